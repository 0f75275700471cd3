//! Likelihood, throughput, correction and ablation measurements.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{radial_encode, RingSchedule, TokenGrid};
use crate::infer::{decode, raster_decode, CorrectionMode, DecodeState, Revision, SamplerConfig, StepAttention};
use crate::mask::MaskKind;
use crate::model::{evaluate_item, LossReport, Model};
use crate::par::{self, Exec};
use crate::train::{radial_item, raster_item, sample_grid, SyntheticSource, TrainConfig, Trainer};

/// Teacher-forced likelihood summary.
#[derive(Clone, Debug, PartialEq)]
pub struct NllReport {
    /// Mean NLL over every predicted position (border and interior).
    pub nll: f64,
    /// Mean NLL over border positions: each grid cell is a border position
    /// exactly once, so this is the grid log-likelihood per cell.
    pub border_nll: f64,
    pub interior_nll: f64,
    pub border_accuracy: f64,
    /// `(nll sum, positions)` per step.
    pub per_step: Vec<(f64, usize)>,
    pub positions: usize,
    pub grids: usize,
}

impl NllReport {
    fn from_report(r: &LossReport, grids: usize) -> Self {
        Self {
            nll: r.loss_sum / r.positions.max(1) as f64,
            border_nll: r.border_loss(),
            interior_nll: if r.interior_count > 0 { r.interior_loss() } else { 0.0 },
            border_accuracy: r.border_accuracy(),
            per_step: r.step_sums.clone(),
            positions: r.positions,
            grids,
        }
    }
}

/// Seeds and classes of `n` evaluation grids; classes cycle.
fn eval_draws(n: usize, num_classes: usize, seed: u64) -> Vec<(usize, u64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| (i % num_classes, rng.random())).collect()
}

fn merge_all(parts: Vec<Result<LossReport>>) -> Result<LossReport> {
    let mut total = LossReport::default();
    for p in parts {
        total.merge(&p?);
    }
    Ok(total)
}

/// Mean NLL of fresh grids under the canonical schedule, without noise or
/// dropped steps. `mask` must match the mask the model was trained with.
pub fn heldout_nll(
    model: &Model<f32>,
    src: &SyntheticSource,
    schedule: &RingSchedule,
    mask: MaskKind,
    n_grids: usize,
    seed: u64,
    exec: Exec,
) -> Result<NllReport> {
    let draws = eval_draws(n_grids, src.num_classes(), seed);
    let parts = par::map(exec, &draws, |&(class, s)| -> Result<LossReport> {
        let grid = sample_grid(src, class, &mut ChaCha8Rng::seed_from_u64(s))?;
        let enc = radial_encode(&grid, schedule)?;
        let mut item = radial_item(&enc, class, model.cfg.step_indexing, mask, 1.0);
        item.weights.iter_mut().skip(1).for_each(|w| *w = 1.0);
        evaluate_item(model, &item)
    });
    Ok(NllReport::from_report(&merge_all(parts)?, n_grids))
}

/// Mean per-cell NLL of a raster-order model on fresh grids.
pub fn raster_nll(
    model: &Model<f32>,
    src: &SyntheticSource,
    n_grids: usize,
    seed: u64,
    exec: Exec,
) -> Result<NllReport> {
    let draws = eval_draws(n_grids, src.num_classes(), seed);
    let parts = par::map(exec, &draws, |&(class, s)| -> Result<LossReport> {
        let grid = sample_grid(src, class, &mut ChaCha8Rng::seed_from_u64(s))?;
        evaluate_item(model, &raster_item(&grid, class))
    });
    Ok(NllReport::from_report(&merge_all(parts)?, n_grids))
}

/// Mean and sample standard deviation of per-call wallclock.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Timing {
    pub mean_s: f64,
    pub std_s: f64,
    pub runs: usize,
}

impl Timing {
    pub fn per_second(&self) -> f64 {
        1.0 / self.mean_s
    }
}

/// Times `runs` calls of `f` after `warmup` untimed calls.
pub fn time_calls(warmup: usize, runs: usize, mut f: impl FnMut(usize) -> Result<()>) -> Result<Timing> {
    if runs == 0 {
        return Err(Error::Config("need at least one timed run".into()));
    }
    for i in 0..warmup {
        f(i)?;
    }
    let mut times = Vec::with_capacity(runs);
    for i in 0..runs {
        let t = Instant::now();
        f(warmup + i)?;
        times.push(t.elapsed().as_secs_f64());
    }
    let mean = times.iter().sum::<f64>() / runs as f64;
    let var = if runs > 1 { times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (runs - 1) as f64 } else { 0.0 };
    Ok(Timing { mean_s: mean, std_s: var.sqrt(), runs })
}

/// One row of a benchmark table.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub method: String,
    pub params: usize,
    pub steps: usize,
    pub forwards: u64,
    pub wallclock_s: f64,
    pub wallclock_std_s: f64,
    pub grids_per_s: f64,
    pub heldout_nll: Option<f64>,
    pub border_accuracy: Option<f64>,
    pub revision_rate: Option<f64>,
    pub revision_benefit: Option<f64>,
}

impl BenchRow {
    pub fn new(method: impl Into<String>, params: usize) -> Self {
        Self {
            method: method.into(),
            params,
            steps: 0,
            forwards: 0,
            wallclock_s: 0.0,
            wallclock_std_s: 0.0,
            grids_per_s: 0.0,
            heldout_nll: None,
            border_accuracy: None,
            revision_rate: None,
            revision_benefit: None,
        }
    }
}

/// A table of rows plus the manifest needed to regenerate it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// `key=value` lines recording seeds and configuration.
    pub manifest: Vec<(String, String)>,
}

impl BenchReport {
    pub const HEADER: &'static str = "method\tparams\tsteps\tforwards\twallclock_s\twallclock_std_s\tgrids_per_s\theldout_nll\tborder_accuracy\trevision_rate\trevision_benefit";

    pub fn to_tsv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.3}\t{}\t{}\t{}\t{}",
                r.method,
                r.params,
                r.steps,
                r.forwards,
                r.wallclock_s,
                r.wallclock_std_s,
                r.grids_per_s,
                opt(r.heldout_nll),
                opt(r.border_accuracy),
                opt(r.revision_rate),
                opt(r.revision_benefit)
            );
        }
        out
    }

    pub fn manifest_text(&self) -> String {
        self.manifest.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn note(&mut self, key: &str, value: impl ToString) {
        self.manifest.push((key.to_string(), value.to_string()));
    }
}

/// Forwards and wallclock of single-threaded radial decodes.
pub fn bench_radial(
    model: &Model<f32>,
    name: &str,
    schedule: &RingSchedule,
    sampler: &SamplerConfig,
    warmup: usize,
    runs: usize,
) -> Result<BenchRow> {
    model.reset_forward_count();
    decode(model, 0, schedule, sampler)?;
    let forwards = model.forward_count();
    let classes = model.cfg.num_classes;
    let t = time_calls(warmup, runs, |i| {
        let s = SamplerConfig { seed: sampler.seed.wrapping_add(i as u64), ..sampler.clone() };
        decode(model, i % classes, schedule, &s).map(|_| ())
    })?;
    let mut row = BenchRow::new(name, model.params.num_params());
    row.steps = schedule.len();
    row.forwards = forwards;
    row.wallclock_s = t.mean_s;
    row.wallclock_std_s = t.std_s;
    row.grids_per_s = t.per_second();
    Ok(row)
}

/// Forwards and wallclock of single-threaded raster decodes.
pub fn bench_raster(
    model: &Model<f32>,
    h: usize,
    w: usize,
    sampler: &SamplerConfig,
    warmup: usize,
    runs: usize,
) -> Result<BenchRow> {
    model.reset_forward_count();
    raster_decode(model, 0, h, w, sampler)?;
    let forwards = model.forward_count();
    let classes = model.cfg.num_classes;
    let t = time_calls(warmup, runs, |i| {
        let s = SamplerConfig { seed: sampler.seed.wrapping_add(i as u64), ..sampler.clone() };
        raster_decode(model, i % classes, h, w, &s).map(|_| ())
    })?;
    let mut row = BenchRow::new("raster", model.params.num_params());
    row.steps = h * w;
    row.forwards = forwards;
    row.wallclock_s = t.mean_s;
    row.wallclock_std_s = t.std_s;
    row.grids_per_s = t.per_second();
    Ok(row)
}

/// Grids per second when `n` independent decodes run across worker threads.
pub fn batch_throughput(
    model: &Model<f32>,
    schedule: &RingSchedule,
    sampler: &SamplerConfig,
    n: usize,
    exec: Exec,
) -> Result<f64> {
    let start = Instant::now();
    let out = par::map_range(exec, n, |i| {
        let s = SamplerConfig { seed: sampler.seed.wrapping_add(i as u64), ..sampler.clone() };
        decode(model, i % model.cfg.num_classes, schedule, &s).map(|_| ())
    });
    out.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(n as f64 / start.elapsed().as_secs_f64())
}

/// Revisions of one decode together with the grid they should converge to.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrectionRecord {
    pub revisions: Vec<Revision>,
    pub exposures: usize,
    pub truth: TokenGrid,
}

impl CorrectionRecord {
    pub fn from_state(st: &DecodeState, truth: &TokenGrid) -> Self {
        Self { revisions: st.revision_log.clone(), exposures: st.exposures, truth: truth.clone() }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CorrectionStats {
    /// Revisions per interior exposure.
    pub revision_rate: f64,
    /// Fraction of revisions fixing a wrong token minus fraction breaking a
    /// right one.
    pub revision_benefit: f64,
    pub revisions: usize,
    pub exposures: usize,
}

pub fn correction_stats(records: &[CorrectionRecord]) -> CorrectionStats {
    let (mut revs, mut exp, mut good, mut bad) = (0usize, 0usize, 0usize, 0usize);
    for rec in records {
        exp += rec.exposures;
        for r in &rec.revisions {
            revs += 1;
            let t = rec.truth.get(r.row, r.col);
            if r.old != t && r.new == t {
                good += 1;
            } else if r.old == t && r.new != t {
                bad += 1;
            }
        }
    }
    CorrectionStats {
        revision_rate: if exp > 0 { revs as f64 / exp as f64 } else { 0.0 },
        revision_benefit: if revs > 0 { (good as f64 - bad as f64) / revs as f64 } else { 0.0 },
        revisions: revs,
        exposures: exp,
    }
}

/// Outcome of planting one corrupted interior token per trial.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorrectionProbe {
    /// Fraction of planted tokens restored to the truth at the step that
    /// first sees them.
    pub recovery: f64,
    /// Recovery expected by guessing uniformly among the other tokens.
    pub chance: f64,
    pub stats: CorrectionStats,
    pub trials: usize,
}

/// Teacher-forced decodes (borders copied from the truth) with one planted
/// interior corruption per trial, corrected with `mode`.
#[allow(clippy::too_many_arguments)]
pub fn correction_probe(
    model: &Model<f32>,
    src: &SyntheticSource,
    schedule: &RingSchedule,
    mode: CorrectionMode,
    attention: StepAttention,
    trials: usize,
    seed: u64,
    exec: Exec,
) -> Result<CorrectionProbe> {
    if schedule.len() < 2 {
        return Err(Error::Config("correction probe needs at least two steps".into()));
    }
    let draws = eval_draws(trials, src.num_classes(), seed);
    let v = src.vocab_size as u32;
    let out = par::map(exec, &draws, |&(class, s)| -> Result<(bool, CorrectionRecord)> {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let truth = sample_grid(src, class, &mut rng)?;
        let k = rng.random_range(1..schedule.len());
        let prev = schedule.extents()[k - 1];
        let (r, c) = (prev.top + rng.random_range(0..prev.height()), prev.left + rng.random_range(0..prev.width()));
        let t = truth.get(r, c);
        let wrong = (t + rng.random_range(1..v)) % v;
        let sampler = SamplerConfig { temperature: 0.0, correction: mode, attention, seed: s, ..Default::default() };
        let mut st = DecodeState::new(model, class, schedule, &sampler)?;
        let mut recovered = false;
        while !st.is_done() {
            if st.cursor == k {
                st.current.set(r, c, wrong)?;
            }
            st.step(model, Some(&truth))?;
            if st.cursor == k + 1 {
                recovered = st.current.get(r, c) == t;
            }
        }
        Ok((recovered, CorrectionRecord::from_state(&st, &truth)))
    });
    let mut hits = 0;
    let mut records = Vec::with_capacity(trials);
    for o in out {
        let (hit, rec) = o?;
        hits += hit as usize;
        records.push(rec);
    }
    Ok(CorrectionProbe {
        recovery: hits as f64 / trials.max(1) as f64,
        chance: 1.0 / (v as f64 - 1.0).max(1.0),
        stats: correction_stats(&records),
        trials,
    })
}

/// One trained ablation variant.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub seed: u64,
    pub nll: NllReport,
    pub final_loss: f64,
}

/// Trains `cfg` on `src` and scores it on `eval_grids` fresh grids with the
/// config's own schedule and mask.
pub fn train_and_score(
    name: &str,
    cfg: &TrainConfig,
    src: &SyntheticSource,
    eval_grids: usize,
    exec: Exec,
) -> Result<AblationRow> {
    let mut tr = Trainer::new(cfg.clone(), src.clone(), exec)?;
    let metrics = tr.run(|_| {})?;
    let nll = heldout_nll(&tr.model, src, &tr.schedule, cfg.mask, eval_grids, cfg.seed ^ 0x5eed, exec)?;
    Ok(AblationRow {
        name: name.to_string(),
        seed: cfg.seed,
        nll,
        final_loss: metrics.last().map_or(f64::NAN, |m| m.loss),
    })
}

/// Variants in the order of the technique table: block-causal baseline,
/// then nested mask, schedule dropout and interior noise added in turn.
pub fn technique_variants(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let mut v = Vec::new();
    let mut c = base.clone();
    c.mask = MaskKind::BlockCausal;
    c.rds_drop_prob = 0.0;
    c.rni_corrupt_prob = 0.0;
    v.push(("baseline".to_string(), c.clone()));
    c.mask = MaskKind::Nested;
    v.push(("+nam".to_string(), c.clone()));
    c.rds_drop_prob = base.rds_drop_prob;
    v.push(("+nam+rds".to_string(), c.clone()));
    c.rni_corrupt_prob = base.rni_corrupt_prob;
    v.push(("+nam+rds+rni".to_string(), c));
    v
}

/// The same config under each start anchor with equal step counts.
pub fn anchor_variants(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    ["center", "edge", "corner"]
        .iter()
        .map(|a| {
            let mut c = base.clone();
            c.schedule = crate::train::ScheduleSpec::Preset(a.to_string());
            (a.to_string(), c)
        })
        .collect()
}

/// Directional checks over an ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationVerdict {
    pub nam_helps: bool,
    /// Seeds where center <= edge <= corner held, out of the seeds run.
    pub anchor_order_votes: (usize, usize),
}

impl AblationVerdict {
    pub fn anchor_order_holds(&self) -> bool {
        self.anchor_order_votes.0 * 2 > self.anchor_order_votes.1
    }
}

/// Trains every technique variant once (seed `seeds[0]`) and every anchor
/// variant per seed; compares border NLL.
pub fn ablation_suite(
    base: &TrainConfig,
    src: &SyntheticSource,
    seeds: &[u64],
    eval_grids: usize,
    exec: Exec,
) -> Result<(Vec<AblationRow>, AblationVerdict)> {
    let first = *seeds.first().ok_or_else(|| Error::Config("ablation needs at least one seed".into()))?;
    let mut rows = Vec::new();
    for (name, mut cfg) in technique_variants(base) {
        cfg.seed = first;
        rows.push(train_and_score(&name, &cfg, src, eval_grids, exec)?);
    }
    let nam_helps = rows[1].nll.border_nll < rows[0].nll.border_nll;
    let mut votes = 0;
    for &seed in seeds {
        let mut scores = Vec::new();
        for (name, mut cfg) in anchor_variants(base) {
            cfg.seed = seed;
            let row = train_and_score(&name, &cfg, src, eval_grids, exec)?;
            scores.push(row.nll.border_nll);
            rows.push(row);
        }
        if scores[0] <= scores[1] && scores[1] <= scores[2] {
            votes += 1;
        }
    }
    Ok((rows, AblationVerdict { nam_helps, anchor_order_votes: (votes, seeds.len()) }))
}
