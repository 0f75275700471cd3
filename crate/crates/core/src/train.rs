//! Synthetic grid sources, schedule dropout, interior noise, and the
//! training loop.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{preset_schedule, radial_encode, RadialEncoding, Region, RingSchedule, TokenGrid};
use crate::mask::{CausalMask, MaskKind, NestedMask};
use crate::model::{
    forward_logits, loss_and_grads, LossReport, Model, ModelConfig, PosTag, SeqInput, Slot, StepIndexing, TrainItem,
};
use crate::optim::{AdamW, AdamWConfig};
use crate::par::{self, Exec};
use crate::tokenizer::{procedural_image, ToyImage, VqConfig, VqTokenizer, VqTrainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceKind {
    /// Every cell holds the class's palette base token.
    Constant,
    /// Low-frequency random sinusoid field quantized into the class palette.
    QuantizedField,
    /// Gibbs samples of a Potts model below its critical temperature.
    PottsGibbs,
    /// Procedural images tokenized by a trained VQ tokenizer.
    VqProcedural,
}

impl fmt::Display for SourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SourceKind::Constant => "constant",
            SourceKind::QuantizedField => "quantized_field",
            SourceKind::PottsGibbs => "potts_gibbs",
            SourceKind::VqProcedural => "vq_procedural",
        })
    }
}

impl FromStr for SourceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(SourceKind::Constant),
            "quantized_field" | "field" => Ok(SourceKind::QuantizedField),
            "potts_gibbs" | "potts" => Ok(SourceKind::PottsGibbs),
            "vq_procedural" | "vq" => Ok(SourceKind::VqProcedural),
            other => Err(Error::Config(format!("unknown source kind {other:?}"))),
        }
    }
}

/// Per-class generation parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassParams {
    /// First token of the class palette.
    pub palette_offset: u32,
    /// Number of palette tokens (quantization levels or Potts states).
    pub levels: u32,
    /// Field frequency in cycles across the grid.
    pub freq: f64,
    /// Potts inverse temperature.
    pub coupling: f64,
}

#[derive(Clone, Debug)]
pub struct SyntheticSource {
    pub kind: SourceKind,
    pub vocab_size: usize,
    pub height: usize,
    pub width: usize,
    pub classes: Vec<ClassParams>,
    pub tokenizer: Option<Arc<VqTokenizer>>,
}

/// Gibbs sweeps per Potts sample.
pub const POTTS_SWEEPS: usize = 12;

impl SyntheticSource {
    /// Builds the class table for the non-tokenizer kinds. Class `c` uses
    /// palette tokens starting at `c * vocab / classes`.
    pub fn new(kind: SourceKind, vocab_size: usize, num_classes: usize, height: usize, width: usize) -> Result<Self> {
        if kind == SourceKind::VqProcedural {
            return Err(Error::Config("vq_procedural sources need a tokenizer; use with_tokenizer".into()));
        }
        if vocab_size < 2 || num_classes == 0 || height == 0 || width == 0 {
            return Err(Error::Config("source needs vocab >= 2, classes >= 1 and a nonempty grid".into()));
        }
        let levels = (vocab_size / num_classes).clamp(2, 8).min(vocab_size) as u32;
        let classes = (0..num_classes)
            .map(|c| {
                let q = levels as f64;
                ClassParams {
                    palette_offset: ((c * vocab_size / num_classes) % vocab_size) as u32,
                    levels,
                    freq: 0.5 + 0.25 * (c % 4) as f64,
                    // 1.4x the critical coupling ln(1 + sqrt(q)) of the square lattice
                    coupling: 1.4 * (1.0 + q.sqrt()).ln(),
                }
            })
            .collect();
        Ok(Self { kind, vocab_size, height, width, classes, tokenizer: None })
    }

    /// Procedural images of `height*patch x width*patch` pixels, tokenized.
    pub fn with_tokenizer(tok: Arc<VqTokenizer>, num_classes: usize, height: usize, width: usize) -> Result<Self> {
        tok.validate()?;
        let mut s = Self::new(SourceKind::QuantizedField, tok.vocab_size.max(2), num_classes, height, width)?;
        s.kind = SourceKind::VqProcedural;
        s.vocab_size = tok.vocab_size;
        s.tokenizer = Some(tok);
        Ok(s)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// The pixel image behind a `VqProcedural` sample.
    pub fn sample_image<R: Rng>(&self, class_id: usize, rng: &mut R) -> Result<ToyImage> {
        let tok = self.tokenizer.as_ref().ok_or_else(|| Error::Config("source has no tokenizer".into()))?;
        let ps = tok.patch_size;
        let mut img = procedural_image(class_id, self.num_classes(), self.height * ps, self.width * ps, rng);
        if tok.channels == 1 {
            let data = img.data.chunks(3).map(|p| (p[0] + p[1] + p[2]) / 3.0).collect();
            img = ToyImage::new(img.height, img.width, 1, data)?;
        }
        Ok(img)
    }
}

/// Draws one grid of `src` for `class_id`.
pub fn sample_grid<R: Rng>(src: &SyntheticSource, class_id: usize, rng: &mut R) -> Result<TokenGrid> {
    let cp = src
        .classes
        .get(class_id)
        .ok_or_else(|| Error::Config(format!("class {class_id} outside 0..{}", src.num_classes())))?;
    let (h, w, v) = (src.height, src.width, src.vocab_size);
    let tok_of = |level: u32| (cp.palette_offset + level) % v as u32;
    let cells = match src.kind {
        SourceKind::Constant => vec![tok_of(0); h * w],
        SourceKind::QuantizedField => {
            let comps: Vec<(f64, f64, f64)> = (0..2)
                .map(|_| {
                    let a = rng.random_range(0.0..std::f64::consts::TAU);
                    let ph = rng.random_range(0.0..std::f64::consts::TAU);
                    (a.cos(), a.sin(), ph)
                })
                .collect();
            let mut out = Vec::with_capacity(h * w);
            for r in 0..h {
                for c in 0..w {
                    let (y, x) = (r as f64 / h as f64, c as f64 / w as f64);
                    let f: f64 = comps
                        .iter()
                        .map(|&(dy, dx, ph)| (std::f64::consts::TAU * cp.freq * (y * dy + x * dx) + ph).sin())
                        .sum::<f64>()
                        / comps.len() as f64;
                    let u = (f + 1.0) / 2.0;
                    let level = ((u * cp.levels as f64) as u32).min(cp.levels - 1);
                    out.push(tok_of(level));
                }
            }
            out
        }
        SourceKind::PottsGibbs => {
            let q = cp.levels as usize;
            let mut s: Vec<usize> = (0..h * w).map(|_| rng.random_range(0..q)).collect();
            let mut weights = vec![0.0f64; q];
            for _ in 0..POTTS_SWEEPS {
                for r in 0..h {
                    for c in 0..w {
                        let mut agree = vec![0usize; q];
                        if r > 0 {
                            agree[s[(r - 1) * w + c]] += 1;
                        }
                        if r + 1 < h {
                            agree[s[(r + 1) * w + c]] += 1;
                        }
                        if c > 0 {
                            agree[s[r * w + c - 1]] += 1;
                        }
                        if c + 1 < w {
                            agree[s[r * w + c + 1]] += 1;
                        }
                        for (wt, &a) in weights.iter_mut().zip(&agree) {
                            *wt = (cp.coupling * a as f64).exp();
                        }
                        let total: f64 = weights.iter().sum();
                        let mut u = rng.random::<f64>() * total;
                        let mut pick = q - 1;
                        for (k, &wt) in weights.iter().enumerate() {
                            if u < wt {
                                pick = k;
                                break;
                            }
                            u -= wt;
                        }
                        s[r * w + c] = pick;
                    }
                }
            }
            s.into_iter().map(|k| tok_of(k as u32)).collect()
        }
        SourceKind::VqProcedural => {
            let img = src.sample_image(class_id, rng)?;
            return src.tokenizer.as_ref().unwrap().encode(&img);
        }
    };
    TokenGrid::new(h, w, v, cells)
}

/// Drops each intermediate extent (every extent but the last) independently
/// with probability `drop_prob`.
pub fn apply_rds<R: Rng>(s: &RingSchedule, rng: &mut R, drop_prob: f64) -> Result<RingSchedule> {
    if !(0.0..=1.0).contains(&drop_prob) {
        return Err(Error::Config(format!("drop probability {drop_prob} outside [0, 1]")));
    }
    let n = s.len();
    let mut keep: Vec<usize> = (0..n - 1).filter(|_| rng.random::<f64>() >= drop_prob).collect();
    keep.push(n - 1);
    s.subset(&keep)
}

/// Replaces each interior (non-prompt) input token with a uniformly random
/// id with probability `corrupt_prob`. Returns the number of replacements.
pub fn apply_rni<R: Rng>(enc: &mut RadialEncoding, rng: &mut R, corrupt_prob: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&corrupt_prob) {
        return Err(Error::Config(format!("corruption probability {corrupt_prob} outside [0, 1]")));
    }
    let mut n = 0;
    for (seg, input) in enc.layout.segments.iter().zip(&mut enc.inputs) {
        let v = input.vocab_size as u32;
        for (i, region) in seg.regions.iter().enumerate() {
            if *region == Region::Interior && rng.random::<f64>() < corrupt_prob {
                input.ids[i] = rng.random_range(0..v);
                n += 1;
            }
        }
    }
    Ok(n)
}

/// Teacher-forced training item for a radial encoding.
pub fn radial_item(
    enc: &RadialEncoding,
    class_id: usize,
    indexing: StepIndexing,
    mask: MaskKind,
    interior_weight: f64,
) -> TrainItem {
    let input = SeqInput::from_radial(enc, class_id, indexing);
    let mut targets = vec![None];
    let mut weights = vec![0.0];
    let mut tags = vec![None];
    for (seg, tgt) in enc.layout.segments.iter().zip(&enc.targets) {
        for (i, &region) in seg.regions.iter().enumerate() {
            targets.push(Some(tgt.cells()[i]));
            weights.push(if region == Region::Interior { interior_weight } else { 1.0 });
            tags.push(Some(PosTag { step: seg.step, region }));
        }
    }
    TrainItem {
        input,
        targets,
        weights,
        tags,
        mask: Box::new(NestedMask::build(&enc.layout, 1, mask)),
        dropout_seed: None,
    }
}

/// Teacher-forced item for the raster-order baseline: position `t` is fed the
/// previous token (the prompt vector at `t = 0`) at the coordinates of the
/// token it predicts.
pub fn raster_item(grid: &TokenGrid, class_id: usize) -> TrainItem {
    let (h, w) = (grid.height(), grid.width());
    let mut input = SeqInput::default();
    input.push(Slot::Class(class_id), (0, 0), 0);
    let mut targets = vec![None];
    let mut tags = vec![None];
    for t in 0..h * w {
        let slot = if t == 0 { Slot::Prompt } else { Slot::Token(grid.cells()[t - 1]) };
        input.push(slot, (t / w, t % w), 0);
        targets.push(Some(grid.cells()[t]));
        tags.push(Some(PosTag { step: 0, region: Region::Border }));
    }
    let n = input.len();
    let mut weights = vec![1.0; n];
    weights[0] = 0.0;
    TrainItem { input, targets, weights, tags, mask: Box::new(CausalMask { len: n }), dropout_seed: None }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    Radial,
    Raster,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ScheduleSpec {
    Preset(String),
    Explicit(RingSchedule),
}

impl ScheduleSpec {
    pub fn resolve(&self, height: usize, width: usize) -> Result<RingSchedule> {
        match self {
            ScheduleSpec::Preset(name) => preset_schedule(name, height, width),
            ScheduleSpec::Explicit(s) => {
                if s.grid_height() != height || s.grid_width() != width {
                    return Err(Error::Config(format!(
                        "schedule is for {}x{}, grid is {height}x{width}",
                        s.grid_height(),
                        s.grid_width()
                    )));
                }
                Ok(s.clone())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optim: AdamWConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub grids_per_epoch: usize,
    pub rds_drop_prob: f64,
    /// Fraction of batches trained on the full canonical schedule.
    pub rds_canonical_frac: f64,
    pub rni_corrupt_prob: f64,
    pub interior_weight: f64,
    /// Probability of replacing the class with the null class (for guidance).
    pub class_dropout: f64,
    pub mask: MaskKind,
    pub layout: Layout,
    pub source: SourceKind,
    pub schedule: ScheduleSpec,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optim: AdamWConfig::default(),
            epochs: 20,
            batch_size: 32,
            grids_per_epoch: 50_000,
            rds_drop_prob: 0.25,
            rds_canonical_frac: 0.25,
            rni_corrupt_prob: 0.1,
            interior_weight: 1.0,
            class_dropout: 0.0,
            mask: MaskKind::Nested,
            layout: Layout::Radial,
            source: SourceKind::QuantizedField,
            schedule: ScheduleSpec::Preset("center".into()),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Small settings that train in about a minute on one core: 8x8 grids,
    /// 16 tokens, 4 classes, a 2-layer width-32 model.
    pub fn desk() -> Self {
        Self {
            model: ModelConfig {
                vocab_size: 16,
                num_classes: 4,
                dim: 32,
                num_layers: 2,
                num_heads: 2,
                mlp_ratio: 4.0,
                max_grid: (8, 8),
                max_steps: 8,
                dropout: 0.0,
                step_indexing: StepIndexing::Ordinal,
            },
            optim: AdamWConfig { lr: 3e-3, ..AdamWConfig::default() },
            epochs: 20,
            batch_size: 16,
            grids_per_epoch: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        for (name, p) in [
            ("rds_drop_prob", self.rds_drop_prob),
            ("rds_canonical_frac", self.rds_canonical_frac),
            ("rni_corrupt_prob", self.rni_corrupt_prob),
            ("class_dropout", self.class_dropout),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if !self.optim.lr.is_finite() || self.optim.lr < 0.0 {
            return Err(Error::Config("lr must be finite and non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.interior_weight.is_nan() || self.interior_weight < 0.0 {
            return Err(Error::Config("interior_weight must be non-negative".into()));
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. Keys not present
    /// keep their values from `base`; unknown keys are errors.
    pub fn parse(text: &str, base: TrainConfig) -> Result<Self> {
        let mut c = base;
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let line_no = ln + 1;
            let err = |msg: String| Error::Parse { line: line_no, msg };
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected key = value".into()))?;
            let (k, v) = (k.trim(), v.trim());
            let f = |v: &str| v.parse::<f64>().map_err(|e| err(format!("{k}: {e}")));
            let u = |v: &str| v.parse::<usize>().map_err(|e| err(format!("{k}: {e}")));
            match k {
                "lr" => c.optim.lr = f(v)?,
                "beta1" => c.optim.beta1 = f(v)?,
                "beta2" => c.optim.beta2 = f(v)?,
                "eps" => c.optim.eps = f(v)?,
                "weight_decay" => c.optim.weight_decay = f(v)?,
                "grad_clip" => c.optim.clip_norm = if v == "none" { None } else { Some(f(v)?) },
                "epochs" => c.epochs = u(v)?,
                "batch_size" => c.batch_size = u(v)?,
                "grids_per_epoch" => c.grids_per_epoch = u(v)?,
                "rds_drop_prob" => c.rds_drop_prob = f(v)?,
                "rds_canonical_frac" => c.rds_canonical_frac = f(v)?,
                "rni_corrupt_prob" => c.rni_corrupt_prob = f(v)?,
                "interior_weight" => c.interior_weight = f(v)?,
                "class_dropout" => c.class_dropout = f(v)?,
                "nested_mask" => {
                    c.mask = match v {
                        "true" | "on" => MaskKind::Nested,
                        "false" | "off" => MaskKind::BlockCausal,
                        _ => return Err(err(format!("nested_mask: expected true/false, got {v:?}"))),
                    }
                }
                "layout" => {
                    c.layout = match v {
                        "radial" => Layout::Radial,
                        "raster" => Layout::Raster,
                        _ => return Err(err(format!("layout: expected radial/raster, got {v:?}"))),
                    }
                }
                "source" => c.source = v.parse().map_err(|e: Error| err(e.to_string()))?,
                "schedule" => c.schedule = ScheduleSpec::Preset(v.to_string()),
                "seed" => c.seed = v.parse().map_err(|e| err(format!("seed: {e}")))?,
                "vocab_size" => c.model.vocab_size = u(v)?,
                "num_classes" => c.model.num_classes = u(v)?,
                "dim" => c.model.dim = u(v)?,
                "num_layers" => c.model.num_layers = u(v)?,
                "num_heads" => c.model.num_heads = u(v)?,
                "mlp_ratio" => c.model.mlp_ratio = f(v)?,
                "max_steps" => c.model.max_steps = u(v)?,
                "dropout" => c.model.dropout = f(v)?,
                "grid" => {
                    let parts: Vec<&str> = v.split_whitespace().collect();
                    if parts.len() != 2 {
                        return Err(err("grid: expected two integers".into()));
                    }
                    c.model.max_grid = (u(parts[0])?, u(parts[1])?);
                }
                "step_indexing" => {
                    c.model.step_indexing = match v {
                        "ordinal" => StepIndexing::Ordinal,
                        "schedule" => StepIndexing::Schedule,
                        _ => return Err(err(format!("step_indexing: expected ordinal/schedule, got {v:?}"))),
                    }
                }
                other => return Err(err(format!("unknown key {other:?}"))),
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// Metrics of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub border_loss: f64,
    pub interior_loss: f64,
    pub grad_norm: f64,
    pub wallclock_s: f64,
}

impl EpochMetrics {
    pub const TSV_HEADER: &'static str = "epoch\tloss\tborder_loss\tinterior_loss\tgrad_norm\twallclock_s";

    pub fn tsv(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.3}",
            self.epoch, self.loss, self.border_loss, self.interior_loss, self.grad_norm, self.wallclock_s
        )
    }
}

/// Model, optimizer, data source and RNG of one training run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model<f32>,
    pub opt: AdamW<f32>,
    pub source: SyntheticSource,
    pub schedule: RingSchedule,
    pub exec: Exec,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, source: SyntheticSource, exec: Exec) -> Result<Self> {
        cfg.validate()?;
        let m = &cfg.model;
        if source.vocab_size != m.vocab_size || source.num_classes() != m.num_classes {
            return Err(Error::Config(format!(
                "source has vocab {} / {} classes, model expects {} / {}",
                source.vocab_size,
                source.num_classes(),
                m.vocab_size,
                m.num_classes
            )));
        }
        if (source.height, source.width) != m.max_grid {
            return Err(Error::Config("source grid size differs from model max_grid".into()));
        }
        let schedule = cfg.schedule.resolve(source.height, source.width)?;
        if cfg.layout == Layout::Radial && schedule.len() > m.max_steps && m.step_indexing == StepIndexing::Ordinal {
            return Err(Error::Config(format!(
                "schedule has {} steps, model max_steps is {}",
                schedule.len(),
                m.max_steps
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = Model::new(m.clone(), &mut rng)?;
        let opt = AdamW::new(cfg.optim.clone(), m);
        Ok(Self { cfg, model, opt, source, schedule, exec, rng, epoch: 0 })
    }

    /// Builds a batch from per-item seeds so the result does not depend on
    /// execution order.
    fn make_batch(&mut self, size: usize) -> Result<Vec<TrainItem>> {
        let canonical = self.rng.random::<f64>() < self.cfg.rds_canonical_frac;
        let seeds: Vec<u64> = (0..size).map(|_| self.rng.random()).collect();
        let cfg = &self.cfg;
        let src = &self.source;
        let sched = &self.schedule;
        let items = par::map(self.exec, &seeds, |&seed| -> Result<TrainItem> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let class = rng.random_range(0..src.num_classes());
            let grid = sample_grid(src, class, &mut rng)?;
            let cond = if rng.random::<f64>() < cfg.class_dropout { cfg.model.null_class() } else { class };
            let mut item = match cfg.layout {
                Layout::Raster => raster_item(&grid, cond),
                Layout::Radial => {
                    let s = if canonical { sched.clone() } else { apply_rds(sched, &mut rng, cfg.rds_drop_prob)? };
                    let mut enc = radial_encode(&grid, &s)?;
                    apply_rni(&mut enc, &mut rng, cfg.rni_corrupt_prob)?;
                    radial_item(&enc, cond, cfg.model.step_indexing, cfg.mask, cfg.interior_weight)
                }
            };
            item.dropout_seed = Some(rng.random());
            Ok(item)
        });
        items.into_iter().collect()
    }

    /// One pass over `grids_per_epoch` fresh grids.
    pub fn train_epoch(&mut self) -> Result<EpochMetrics> {
        let start = Instant::now();
        let mut total = LossReport::default();
        let mut norm_sum = 0.0;
        let mut steps = 0usize;
        let mut left = self.cfg.grids_per_epoch;
        while left > 0 {
            let b = left.min(self.cfg.batch_size);
            left -= b;
            let batch = self.make_batch(b)?;
            let (rep, grads) = loss_and_grads(&self.model, &batch, self.exec)?;
            if !rep.loss().is_finite() {
                return Err(Error::NonFinite { stage: format!("loss at epoch {}", self.epoch + 1), layer: None });
            }
            norm_sum += self.opt.step(&mut self.model.params, &grads)?;
            total.merge(&rep);
            steps += 1;
        }
        self.epoch += 1;
        Ok(EpochMetrics {
            epoch: self.epoch,
            loss: total.loss(),
            border_loss: total.border_loss(),
            interior_loss: total.interior_loss(),
            grad_norm: norm_sum / steps.max(1) as f64,
            wallclock_s: start.elapsed().as_secs_f64(),
        })
    }

    /// Runs the remaining configured epochs, calling `log` after each.
    pub fn run(&mut self, mut log: impl FnMut(&EpochMetrics)) -> Result<Vec<EpochMetrics>> {
        let mut out = Vec::new();
        while self.epoch < self.cfg.epochs {
            let m = self.train_epoch()?;
            log(&m);
            out.push(m);
        }
        Ok(out)
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }
}

/// Outcome of decoder fine-tuning on mixed codes.
#[derive(Clone, Debug, PartialEq)]
pub struct TptReport {
    /// Held-out MSE decoding the images' own codes, before and after.
    pub gt_mse: (f64, f64),
    /// Held-out MSE decoding generator-predicted codes, before and after.
    pub generated_mse: (f64, f64),
}

/// Teacher-forced generator predictions for every cell of `grid`: each cell
/// takes the argmax of its border logits at the step that generates it.
pub fn generator_codes(
    model: &Model<f32>,
    grid: &TokenGrid,
    class_id: usize,
    schedule: &RingSchedule,
) -> Result<TokenGrid> {
    let enc = radial_encode(grid, schedule)?;
    let item = radial_item(&enc, class_id, model.cfg.step_indexing, MaskKind::Nested, 1.0);
    let logits = forward_logits(model, &item.input, item.mask.as_ref())?;
    let v = model.cfg.vocab_size;
    let mut out = grid.clone();
    for (t, meta) in enc.layout.meta().iter().enumerate() {
        if meta.region == Region::Border {
            let row = &logits[(t + 1) * v..(t + 2) * v];
            let best =
                row.iter().enumerate().fold((0, f32::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b });
            out.set(meta.row, meta.col, best.0 as u32)?;
        }
    }
    Ok(out)
}

/// Fine-tunes the tokenizer decoder on codes where each cell takes the
/// generator's teacher-forced prediction with probability `mix_ratio` and the
/// image's own code otherwise; the target is always the true image.
#[allow(clippy::too_many_arguments)]
pub fn toy_tpt_finetune(
    tok: &VqTokenizer,
    model: &Model<f32>,
    src: &SyntheticSource,
    schedule: &RingSchedule,
    mix_ratio: f64,
    steps: usize,
    n_images: usize,
    seed: u64,
) -> Result<(VqTokenizer, TptReport)> {
    if !(0.0..=1.0).contains(&mix_ratio) {
        return Err(Error::Config(format!("mix_ratio {mix_ratio} outside [0, 1]")));
    }
    if model.cfg.vocab_size != tok.vocab_size {
        return Err(Error::Config("generator and tokenizer vocabularies differ".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let collect = |n: usize, rng: &mut ChaCha8Rng| -> Result<(Vec<f32>, Vec<u32>, Vec<u32>)> {
        let (mut patches, mut gt, mut gen) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..n {
            let class = i % src.num_classes();
            let img = src.sample_image(class, rng)?;
            let codes = tok.encode(&img)?;
            let pred = generator_codes(model, &codes, class, schedule)?;
            patches.extend(tok.patches(&img)?);
            gt.extend_from_slice(codes.cells());
            gen.extend_from_slice(pred.cells());
        }
        Ok((patches, gt, gen))
    };
    let (train_p, train_gt, train_gen) = collect(n_images, &mut rng)?;
    let (held_p, held_gt, held_gen) = collect(n_images.div_ceil(2).max(1), &mut rng)?;
    let before = (tok.code_recon_mse(&held_gt, &held_p), tok.code_recon_mse(&held_gen, &held_p));

    let cfg = VqConfig {
        vocab_size: tok.vocab_size,
        latent_dim: tok.latent_dim,
        patch_size: tok.patch_size,
        channels: tok.channels,
        seed,
        lr: 1e-3,
        ..VqConfig::default()
    };
    let mut trainer = VqTrainer::new(cfg, &train_p)?;
    trainer.tok = tok.clone();
    for _ in 0..steps {
        let mixed: Vec<u32> = train_gt
            .iter()
            .zip(&train_gen)
            .map(|(&g, &p)| if rng.random::<f64>() < mix_ratio { p } else { g })
            .collect();
        trainer.epoch(&train_p, Some(&mixed))?;
    }
    let tuned = trainer.tok;
    let after = (tuned.code_recon_mse(&held_gt, &held_p), tuned.code_recon_mse(&held_gen, &held_p));
    Ok((tuned, TptReport { gt_mse: (before.0, after.0), generated_mse: (before.1, after.1) }))
}
