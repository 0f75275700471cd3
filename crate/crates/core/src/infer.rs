//! Ring-parallel decoding over a KV cache with interior correction,
//! constrained decoding, resolution extrapolation, and the raster baseline.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{Extent, Region, RingSchedule, TokenGrid};
use crate::model::{BlockMask, KvCache, Model, SeqInput, Slot, StepIndexing};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CorrectionMode {
    Off,
    /// Replace every interior token with the argmax of its new logits.
    Greedy,
    /// Replace only when the argmax differs and its probability exceeds the
    /// threshold.
    Thresholded(f64),
}

/// Attention among positions of the step being decoded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepAttention {
    /// No restriction inside the step.
    Unrestricted,
    /// Interior positions do not see the step's border (the training mask).
    Nested,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub top_k: Option<usize>,
    /// Guidance scale `s` in `uncond + s * (cond - uncond)`.
    pub cfg_scale: Option<f64>,
    pub correction: CorrectionMode,
    pub attention: StepAttention,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_k: None,
            cfg_scale: None,
            correction: CorrectionMode::Greedy,
            attention: StepAttention::Unrestricted,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, vocab: usize) -> Result<()> {
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(Error::Config(format!("temperature {} must be finite and >= 0", self.temperature)));
        }
        match self.top_k {
            Some(0) => return Err(Error::Config("top_k must be positive".into())),
            Some(k) if k > vocab => return Err(Error::Config(format!("top_k {k} exceeds vocabulary {vocab}"))),
            _ => {}
        }
        if let Some(s) = self.cfg_scale {
            if !s.is_finite() || s < 1.0 {
                return Err(Error::Config(format!("cfg_scale {s} must be >= 1")));
            }
        }
        if let CorrectionMode::Thresholded(t) = self.correction {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("correction threshold {t} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Revision {
    pub step: usize,
    pub row: usize,
    pub col: usize,
    pub old: u32,
    pub new: u32,
}

impl Revision {
    pub fn tsv(&self) -> String {
        format!("{}\t{}\t{}\t{}\t{}", self.step, self.row, self.col, self.old, self.new)
    }
}

fn softmax(logits: &[f32], temperature: f64) -> Vec<f64> {
    let t = if temperature > 0.0 { temperature } else { 1.0 };
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &x| m.max(x)) as f64;
    let mut p: Vec<f64> = logits.iter().map(|&x| ((x as f64 - max) / t).exp()).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= s);
    p
}

fn argmax(row: &[f32]) -> usize {
    row.iter().enumerate().fold((0, f32::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b }).0
}

/// `uncond + s * (cond - uncond)`.
pub fn guide(cond: &[f32], uncond: &[f32], scale: f64) -> Vec<f32> {
    let s = scale as f32;
    cond.iter().zip(uncond).map(|(&c, &u)| u + s * (c - u)).collect()
}

/// Independent RNG stream for one grid cell at one step.
pub fn position_rng(seed: u64, step: usize, row: usize, col: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((step as u64) << 40) ^ ((row as u64) << 20) ^ col as u64);
    rng
}

/// One categorical draw from a single row of logits. Temperature 0 or
/// `top_k = 1` is argmax.
pub fn sample_token<R: Rng>(logits: &[f32], s: &SamplerConfig, rng: &mut R) -> Result<u32> {
    let v = logits.len();
    if let Some(k) = s.top_k {
        if k == 0 || k > v {
            return Err(Error::Config(format!("top_k {k} outside 1..={v}")));
        }
    }
    if s.temperature == 0.0 || s.top_k == Some(1) {
        return Ok(argmax(logits) as u32);
    }
    let mut p = softmax(logits, s.temperature);
    if let Some(k) = s.top_k.filter(|&k| k < v) {
        let mut idx: Vec<usize> = (0..v).collect();
        // stable order: higher logit first, lower index on ties
        idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
        for &i in &idx[k..] {
            p[i] = 0.0;
        }
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= s);
    }
    let mut u = rng.random::<f64>();
    let mut last = 0;
    for (i, &pi) in p.iter().enumerate() {
        if pi > 0.0 {
            last = i;
            if u < pi {
                return Ok(i as u32);
            }
            u -= pi;
        }
    }
    Ok(last as u32)
}

/// Samples every border position of a step from its own RNG stream.
/// `positions[i]` are the grid coordinates of logits row `i`.
pub fn sample_border(
    logits: &[f32],
    positions: &[(usize, usize)],
    step: usize,
    sampler: &SamplerConfig,
) -> Result<Vec<u32>> {
    let v = logits.len() / positions.len().max(1);
    positions
        .iter()
        .enumerate()
        .map(|(i, &(r, c))| {
            let row = &logits[i * v..(i + 1) * v];
            if !row.iter().all(|x| x.is_finite()) {
                return Err(Error::Sampling { step, reason: format!("non-finite logits at ({r}, {c})") });
            }
            sample_token(row, sampler, &mut position_rng(sampler.seed, step, r, c))
        })
        .collect()
}

/// Applies `mode` to interior tokens given their new logits (`n x vocab`).
/// Returns the updated tokens and `(index, old, new)` for every change.
pub fn correct_interior(logits: &[f32], current: &[u32], mode: CorrectionMode) -> (Vec<u32>, Vec<(usize, u32, u32)>) {
    let mut out = current.to_vec();
    let mut changes = Vec::new();
    if mode == CorrectionMode::Off || current.is_empty() {
        return (out, changes);
    }
    let v = logits.len() / current.len();
    for (i, tok) in out.iter_mut().enumerate() {
        let row = &logits[i * v..(i + 1) * v];
        let best = argmax(row) as u32;
        if best == *tok {
            continue;
        }
        let accept = match mode {
            CorrectionMode::Greedy => true,
            CorrectionMode::Thresholded(tau) => softmax(row, 1.0)[best as usize] > tau,
            CorrectionMode::Off => false,
        };
        if accept {
            changes.push((i, *tok, best));
            *tok = best;
        }
    }
    (out, changes)
}

/// Everything a decode carries between steps.
#[derive(Clone, Debug)]
pub struct DecodeState {
    pub cache: KvCache<f32>,
    pub uncond_cache: Option<KvCache<f32>>,
    /// Full-size canvas; only cells inside `defined` are meaningful.
    pub current: TokenGrid,
    pub defined: Option<Extent>,
    pub revision_log: Vec<Revision>,
    pub schedule: RingSchedule,
    pub sampler: SamplerConfig,
    pub class_id: usize,
    /// Steps processed so far.
    pub cursor: usize,
    /// Interior positions offered for correction so far.
    pub exposures: usize,
    /// Step at which each cell was first generated.
    pub born: Vec<Option<usize>>,
    known: HashMap<(usize, usize), u32>,
}

impl DecodeState {
    pub fn new(model: &Model<f32>, class_id: usize, schedule: &RingSchedule, sampler: &SamplerConfig) -> Result<Self> {
        sampler.validate(model.cfg.vocab_size)?;
        schedule.validate()?;
        if class_id > model.cfg.num_classes {
            return Err(Error::Config(format!("class {class_id} out of range")));
        }
        let (h, w) = (schedule.grid_height(), schedule.grid_width());
        Ok(Self {
            cache: KvCache::new(model),
            uncond_cache: sampler.cfg_scale.map(|_| KvCache::new(model)),
            current: TokenGrid::filled(h, w, model.cfg.vocab_size, 0)?,
            defined: None,
            revision_log: Vec::new(),
            schedule: schedule.clone(),
            sampler: sampler.clone(),
            class_id,
            cursor: 0,
            exposures: 0,
            born: vec![None; h * w],
            known: HashMap::new(),
        })
    }

    /// Forces the given cells whenever they are sampled or corrected.
    pub fn set_known(&mut self, known: HashMap<(usize, usize), u32>) -> Result<()> {
        let v = self.current.vocab_size();
        for (&(r, c), &id) in &known {
            if r >= self.current.height() || c >= self.current.width() {
                return Err(Error::OutOfBounds {
                    extent: format!("{r},{c},{},{}", r + 1, c + 1),
                    height: self.current.height(),
                    width: self.current.width(),
                });
            }
            if id as usize >= v {
                return Err(Error::TokenOutOfRange { id, vocab: v });
            }
        }
        self.known = known;
        Ok(())
    }

    pub fn is_done(&self) -> bool {
        self.cursor == self.schedule.len()
    }

    /// Block fed at the next step: the current canvas inside the previous
    /// extent and prompts elsewhere, with the class prefix on the first step.
    fn next_block(&self, model: &Model<f32>, class: usize) -> (SeqInput, Vec<Region>, Vec<(usize, usize)>, usize) {
        let k = self.cursor;
        let e = self.schedule.extents()[k];
        let step = match model.cfg.step_indexing {
            StepIndexing::Ordinal => k,
            StepIndexing::Schedule => self.schedule.origin()[k],
        };
        let mut block = SeqInput::default();
        let prefix = if k == 0 {
            block.push(Slot::Class(class), (0, 0), 0);
            1
        } else {
            0
        };
        let mut regions = Vec::with_capacity(e.area());
        let mut positions = Vec::with_capacity(e.area());
        for (r, c) in e.positions() {
            let interior = self.defined.is_some_and(|d| d.contains(r, c));
            let slot = if interior { Slot::Token(self.current.get(r, c)) } else { Slot::Prompt };
            block.push(slot, (r, c), step);
            regions.push(if interior { Region::Interior } else { Region::Border });
            positions.push((r, c));
        }
        (block, regions, positions, prefix)
    }

    /// Runs the next schedule step. `border_override`, when given, supplies
    /// the border tokens instead of sampling (teacher forcing).
    pub fn step(&mut self, model: &Model<f32>, border_override: Option<&TokenGrid>) -> Result<()> {
        if self.is_done() {
            return Err(Error::Schedule("decode already finished".into()));
        }
        let k = self.cursor;
        let v = model.cfg.vocab_size;
        let (block, regions, positions, prefix) = self.next_block(model, self.class_id);
        let mask = match self.sampler.attention {
            StepAttention::Unrestricted => BlockMask::Unrestricted,
            StepAttention::Nested => BlockMask::Nested(regions.clone()),
        };
        let mut logits = model.forward_block(&mut self.cache, &block, &mask, prefix)?;
        if let Some(scale) = self.sampler.cfg_scale {
            let (ublock, _, _, _) = self.next_block(model, model.cfg.null_class());
            let uc = self.uncond_cache.get_or_insert_with(|| KvCache::new(model));
            let ulogits = model.forward_block(uc, &ublock, &mask, prefix)?;
            logits = guide(&logits, &ulogits, scale);
        }
        let logits = &logits[prefix * v..];
        if !logits.iter().all(|x| x.is_finite()) {
            return Err(Error::Sampling { step: k, reason: "non-finite logits".into() });
        }

        let mut border_rows = Vec::new();
        let mut border_pos = Vec::new();
        let mut interior_rows = Vec::new();
        let mut interior_pos = Vec::new();
        for (i, (&region, &pos)) in regions.iter().zip(&positions).enumerate() {
            let row = &logits[i * v..(i + 1) * v];
            if region == Region::Border {
                border_rows.extend_from_slice(row);
                border_pos.push(pos);
            } else {
                interior_rows.extend_from_slice(row);
                interior_pos.push(pos);
            }
        }

        let current: Vec<u32> = interior_pos.iter().map(|&(r, c)| self.current.get(r, c)).collect();
        let (updated, changes) = correct_interior(&interior_rows, &current, self.sampler.correction);
        self.exposures += interior_pos.len();
        for (i, old, new) in changes {
            let (r, c) = interior_pos[i];
            if self.known.contains_key(&(r, c)) {
                continue;
            }
            self.current.set(r, c, updated[i])?;
            self.revision_log.push(Revision { step: k, row: r, col: c, old, new });
        }

        let sampled = match border_override {
            Some(g) => border_pos.iter().map(|&(r, c)| g.get(r, c)).collect(),
            None => sample_border(&border_rows, &border_pos, k, &self.sampler)?,
        };
        for (&(r, c), &id) in border_pos.iter().zip(&sampled) {
            let id = self.known.get(&(r, c)).copied().unwrap_or(id);
            self.current.set(r, c, id)?;
            self.born[r * self.current.width() + c] = Some(k);
        }
        self.defined = Some(self.schedule.extents()[k]);
        self.cursor += 1;
        Ok(())
    }

    pub fn run(&mut self, model: &Model<f32>) -> Result<TokenGrid> {
        while !self.is_done() {
            self.step(model, None)?;
        }
        Ok(self.current.clone())
    }
}

/// Decodes a full grid: one forward per schedule step (two with guidance).
pub fn decode(
    model: &Model<f32>,
    class_id: usize,
    schedule: &RingSchedule,
    sampler: &SamplerConfig,
) -> Result<(TokenGrid, DecodeState)> {
    let mut st = DecodeState::new(model, class_id, schedule, sampler)?;
    let g = st.run(model)?;
    Ok((g, st))
}

/// [`decode`] with the cells of `known` forced to their given ids.
pub fn constrained_decode(
    model: &Model<f32>,
    class_id: usize,
    schedule: &RingSchedule,
    known: &HashMap<(usize, usize), u32>,
    sampler: &SamplerConfig,
) -> Result<(TokenGrid, DecodeState)> {
    let mut st = DecodeState::new(model, class_id, schedule, sampler)?;
    st.set_known(known.clone())?;
    let g = st.run(model)?;
    Ok((g, st))
}

/// Known cells for out-painting (`keep` cells of `base`) or editing
/// (everything outside `regions`).
pub fn known_outside(base: &TokenGrid, regions: &[Extent]) -> HashMap<(usize, usize), u32> {
    let mut out = HashMap::new();
    for r in 0..base.height() {
        for c in 0..base.width() {
            if !regions.iter().any(|e| e.contains(r, c)) {
                out.insert((r, c), base.get(r, c));
            }
        }
    }
    out
}

/// `base` shifted into the center of a `target_h x target_w` grid, followed
/// by rings growing by one cell per side until the grid is covered.
pub fn extrapolate_schedule(base: &RingSchedule, target_h: usize, target_w: usize) -> Result<RingSchedule> {
    let (h, w) = (base.grid_height(), base.grid_width());
    if target_h < h || target_w < w {
        return Err(Error::Config(format!("target {target_h}x{target_w} smaller than training grid {h}x{w}")));
    }
    let (dr, dc) = ((target_h - h) / 2, (target_w - w) / 2);
    let mut extents: Vec<Extent> = base.extents().iter().map(|e| e.offset(dr, dc)).collect();
    let mut e = *extents.last().unwrap();
    while e != Extent::full(target_h, target_w) {
        e = Extent {
            top: e.top.saturating_sub(1),
            left: e.left.saturating_sub(1),
            bottom: (e.bottom + 1).min(target_h),
            right: (e.right + 1).min(target_w),
        };
        extents.push(e);
    }
    RingSchedule::from_extents(target_h, target_w, base.anchor(), extents)
}

/// Decodes at a resolution larger than the training grid using
/// [`extrapolate_schedule`]. Step embeddings past the table clamp.
pub fn extrapolate_decode(
    model: &Model<f32>,
    class_id: usize,
    base: &RingSchedule,
    target_h: usize,
    target_w: usize,
    sampler: &SamplerConfig,
) -> Result<(TokenGrid, DecodeState)> {
    let s = extrapolate_schedule(base, target_h, target_w)?;
    decode(model, class_id, &s, sampler)
}

/// Token-by-token raster-order decoding with a KV cache: `h * w` forwards.
pub fn raster_decode(
    model: &Model<f32>,
    class_id: usize,
    h: usize,
    w: usize,
    sampler: &SamplerConfig,
) -> Result<TokenGrid> {
    sampler.validate(model.cfg.vocab_size)?;
    let v = model.cfg.vocab_size;
    let mut cache = KvCache::new(model);
    let mut cells = Vec::with_capacity(h * w);
    for t in 0..h * w {
        let mut block = SeqInput::default();
        if t == 0 {
            block.push(Slot::Class(class_id), (0, 0), 0);
            block.push(Slot::Prompt, (0, 0), 0);
        } else {
            block.push(Slot::Token(cells[t - 1]), (t / w, t % w), 0);
        }
        let logits = model.forward_block(&mut cache, &block, &BlockMask::Causal, 0)?;
        let row = &logits[logits.len() - v..];
        if !row.iter().all(|x| x.is_finite()) {
            return Err(Error::Sampling { step: t, reason: "non-finite logits".into() });
        }
        cells.push(sample_token(row, sampler, &mut position_rng(sampler.seed, 0, t / w, t % w))?);
    }
    TokenGrid::new(h, w, v, cells)
}
