//! Decoder-only transformer over flattened token-grid sequences.
//!
//! Position `t` is embedded as token-or-prompt + 2D sinusoid at its absolute
//! `(row, col)` + a learned step embedding. The conditioning prefix carries
//! only the class embedding. Blocks are pre-norm (LayerNorm, multi-head
//! attention, GELU MLP) and the head projects to vocabulary logits.

mod cache;
mod layers;
mod pass;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::grid::RadialEncoding;
use crate::linalg::Float;

pub use cache::{BlockMask, KvCache};
pub use layers::masked_softmax_row;
pub use pass::{evaluate_item, forward_logits, loss_and_grads, LossReport, PosTag, TrainItem};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepIndexing {
    /// Position within the (possibly subsetted) schedule.
    Ordinal,
    /// Index into the canonical schedule the subset came from.
    Schedule,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub num_classes: usize,
    pub dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub max_grid: (usize, usize),
    pub max_steps: usize,
    pub dropout: f64,
    pub step_indexing: StepIndexing,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            num_classes: 8,
            dim: 128,
            num_layers: 4,
            num_heads: 4,
            mlp_ratio: 4.0,
            max_grid: (16, 16),
            max_steps: 16,
            dropout: 0.0,
            step_indexing: StepIndexing::Ordinal,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("num_classes", self.num_classes),
            ("dim", self.dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("max_steps", self.max_steps),
            ("max_grid.0", self.max_grid.0),
            ("max_grid.1", self.max_grid.1),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!("dim {} not divisible by num_heads {}", self.dim, self.num_heads)));
        }
        if !self.dim.is_multiple_of(4) {
            return Err(Error::Config("dim must be a multiple of 4 for the 2D encoding".into()));
        }
        if self.mlp_ratio.is_nan() || self.mlp_ratio <= 0.0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.num_heads
    }

    pub fn hidden(&self) -> usize {
        ((self.dim as f64 * self.mlp_ratio).round() as usize).max(1)
    }

    /// Class slot reserved for unconditional (guidance) inputs.
    pub fn null_class(&self) -> usize {
        self.num_classes
    }
}

/// What feeds the token-embedding component of a position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Class(usize),
    Token(u32),
    Prompt,
}

/// One model input sequence. `coords` and `steps` are ignored for class slots.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct SeqInput {
    pub slots: Vec<Slot>,
    pub coords: Vec<(usize, usize)>,
    pub steps: Vec<usize>,
}

impl SeqInput {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn push(&mut self, slot: Slot, coord: (usize, usize), step: usize) {
        self.slots.push(slot);
        self.coords.push(coord);
        self.steps.push(step);
    }

    /// Class prefix followed by every input segment of `enc` in layout order.
    pub fn from_radial(enc: &RadialEncoding, class_id: usize, indexing: StepIndexing) -> Self {
        let mut s = SeqInput::default();
        s.push(Slot::Class(class_id), (0, 0), 0);
        for (seg, input) in enc.layout.segments.iter().zip(&enc.inputs) {
            let step = match indexing {
                StepIndexing::Ordinal => seg.step,
                StepIndexing::Schedule => enc.layout.origin[seg.step],
            };
            for (i, &pos) in seg.positions.iter().enumerate() {
                let slot = if input.is_prompt(i) { Slot::Prompt } else { Slot::Token(input.ids[i]) };
                s.push(slot, pos, step);
            }
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_g: Vec<T>,
    pub ln1_b: Vec<T>,
    pub w_qkv: Vec<T>,
    pub b_qkv: Vec<T>,
    pub w_o: Vec<T>,
    pub b_o: Vec<T>,
    pub ln2_g: Vec<T>,
    pub ln2_b: Vec<T>,
    pub w_fc1: Vec<T>,
    pub b_fc1: Vec<T>,
    pub w_fc2: Vec<T>,
    pub b_fc2: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub tok_emb: Vec<T>,
    pub prompt: Vec<T>,
    pub cls_emb: Vec<T>,
    pub step_emb: Vec<T>,
    pub layers: Vec<LayerParams<T>>,
    pub lnf_g: Vec<T>,
    pub lnf_b: Vec<T>,
    pub head_w: Vec<T>,
    pub head_b: Vec<T>,
}

/// Name, shape and decay eligibility of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub decay: bool,
}

impl<T: Float> Params<T> {
    /// Tensor descriptions in the same order as [`Params::tensors`].
    pub fn spec(cfg: &ModelConfig) -> Vec<TensorSpec> {
        let (d, h, v) = (cfg.dim, cfg.hidden(), cfg.vocab_size);
        let t = |name: String, shape: Vec<usize>, decay: bool| TensorSpec { name, shape, decay };
        let mut out = vec![
            t("tok_emb".into(), vec![v, d], false),
            t("prompt".into(), vec![d], false),
            t("cls_emb".into(), vec![cfg.num_classes + 1, d], false),
            t("step_emb".into(), vec![cfg.max_steps, d], false),
        ];
        for l in 0..cfg.num_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            out.extend([
                t(p("ln1_g"), vec![d], false),
                t(p("ln1_b"), vec![d], false),
                t(p("w_qkv"), vec![d, 3 * d], true),
                t(p("b_qkv"), vec![3 * d], false),
                t(p("w_o"), vec![d, d], true),
                t(p("b_o"), vec![d], false),
                t(p("ln2_g"), vec![d], false),
                t(p("ln2_b"), vec![d], false),
                t(p("w_fc1"), vec![d, h], true),
                t(p("b_fc1"), vec![h], false),
                t(p("w_fc2"), vec![h, d], true),
                t(p("b_fc2"), vec![d], false),
            ]);
        }
        out.extend([
            t("lnf_g".into(), vec![d], false),
            t("lnf_b".into(), vec![d], false),
            t("head_w".into(), vec![d, v], true),
            t("head_b".into(), vec![v], false),
        ]);
        out
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (d, h, v) = (cfg.dim, cfg.hidden(), cfg.vocab_size);
        let z = |n: usize| vec![T::zero(); n];
        Self {
            tok_emb: z(v * d),
            prompt: z(d),
            cls_emb: z((cfg.num_classes + 1) * d),
            step_emb: z(cfg.max_steps * d),
            layers: (0..cfg.num_layers)
                .map(|_| LayerParams {
                    ln1_g: z(d),
                    ln1_b: z(d),
                    w_qkv: z(d * 3 * d),
                    b_qkv: z(3 * d),
                    w_o: z(d * d),
                    b_o: z(d),
                    ln2_g: z(d),
                    ln2_b: z(d),
                    w_fc1: z(d * h),
                    b_fc1: z(h),
                    w_fc2: z(h * d),
                    b_fc2: z(d),
                })
                .collect(),
            lnf_g: z(d),
            lnf_b: z(d),
            head_w: z(d * v),
            head_b: z(v),
        }
    }

    /// Gaussian init: unit-variance embeddings to match the sinusoid scale,
    /// `1/sqrt(fan_in)` matrices with residual projections further scaled by
    /// depth, unit norm gains, and a zero head so initial logits are uniform.
    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut p = Self::zeros(cfg);
        let (d, hid) = (cfg.dim as f64, cfg.hidden() as f64);
        let depth = (2.0 * cfg.num_layers as f64).sqrt();
        let mut fill = |x: &mut Vec<T>, s: f64| {
            let dist = Normal::new(0.0, s).unwrap();
            x.iter_mut().for_each(|v| *v = T::from_f64_lossy(dist.sample(rng)));
        };
        fill(&mut p.tok_emb, 1.0);
        fill(&mut p.prompt, 1.0);
        fill(&mut p.cls_emb, 1.0);
        fill(&mut p.step_emb, 1.0);
        for l in &mut p.layers {
            fill(&mut l.w_qkv, d.powf(-0.5));
            fill(&mut l.w_o, d.powf(-0.5) / depth);
            fill(&mut l.w_fc1, d.powf(-0.5));
            fill(&mut l.w_fc2, hid.powf(-0.5) / depth);
            l.ln1_g.fill(T::one());
            l.ln2_g.fill(T::one());
        }
        p.lnf_g.fill(T::one());
        p
    }

    pub fn tensors(&self) -> Vec<&Vec<T>> {
        let mut out = vec![&self.tok_emb, &self.prompt, &self.cls_emb, &self.step_emb];
        for l in &self.layers {
            out.extend([
                &l.ln1_g, &l.ln1_b, &l.w_qkv, &l.b_qkv, &l.w_o, &l.b_o, &l.ln2_g, &l.ln2_b, &l.w_fc1, &l.b_fc1,
                &l.w_fc2, &l.b_fc2,
            ]);
        }
        out.extend([&self.lnf_g, &self.lnf_b, &self.head_w, &self.head_b]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out = vec![&mut self.tok_emb, &mut self.prompt, &mut self.cls_emb, &mut self.step_emb];
        for l in &mut self.layers {
            out.extend([
                &mut l.ln1_g,
                &mut l.ln1_b,
                &mut l.w_qkv,
                &mut l.b_qkv,
                &mut l.w_o,
                &mut l.b_o,
                &mut l.ln2_g,
                &mut l.ln2_b,
                &mut l.w_fc1,
                &mut l.b_fc1,
                &mut l.w_fc2,
                &mut l.b_fc2,
            ]);
        }
        out.extend([&mut self.lnf_g, &mut self.lnf_b, &mut self.head_w, &mut self.head_b]);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors().iter().flat_map(|t| t.iter()).map(|&x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn cast<U: Float>(&self) -> Params<U> {
        let conv = |v: &Vec<T>| v.iter().map(|&x| U::from_f64_lossy(x.as_f64())).collect();
        Params {
            tok_emb: conv(&self.tok_emb),
            prompt: conv(&self.prompt),
            cls_emb: conv(&self.cls_emb),
            step_emb: conv(&self.step_emb),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_g: conv(&l.ln1_g),
                    ln1_b: conv(&l.ln1_b),
                    w_qkv: conv(&l.w_qkv),
                    b_qkv: conv(&l.b_qkv),
                    w_o: conv(&l.w_o),
                    b_o: conv(&l.b_o),
                    ln2_g: conv(&l.ln2_g),
                    ln2_b: conv(&l.ln2_b),
                    w_fc1: conv(&l.w_fc1),
                    b_fc1: conv(&l.b_fc1),
                    w_fc2: conv(&l.w_fc2),
                    b_fc2: conv(&l.b_fc2),
                })
                .collect(),
            lnf_g: conv(&self.lnf_g),
            lnf_b: conv(&self.lnf_b),
            head_w: conv(&self.head_w),
            head_b: conv(&self.head_b),
        }
    }
}

/// Configuration, parameters and an instrumented forward counter.
#[derive(Debug)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub params: Params<T>,
    forwards: AtomicU64,
}

impl<T: Float> Clone for Model<T> {
    fn clone(&self) -> Self {
        Self { cfg: self.cfg.clone(), params: self.params.clone(), forwards: AtomicU64::new(0) }
    }
}

impl<T: Float> Model<T> {
    pub fn new<R: Rng>(cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let params = Params::init(&cfg, rng);
        Ok(Self { cfg, params, forwards: AtomicU64::new(0) })
    }

    pub fn from_params(cfg: ModelConfig, params: Params<T>) -> Result<Self> {
        cfg.validate()?;
        let expect = Params::<T>::spec(&cfg);
        for (spec, t) in expect.iter().zip(params.tensors()) {
            let n: usize = spec.shape.iter().product();
            if n != t.len() {
                return Err(Error::Shape(format!("{} has {} values, expected {n}", spec.name, t.len())));
            }
        }
        Ok(Self { cfg, params, forwards: AtomicU64::new(0) })
    }

    /// Number of model forward invocations (full or incremental) so far.
    pub fn forward_count(&self) -> u64 {
        self.forwards.load(Ordering::Relaxed)
    }

    pub fn reset_forward_count(&self) {
        self.forwards.store(0, Ordering::Relaxed);
    }

    pub(crate) fn count_forward(&self) {
        self.forwards.fetch_add(1, Ordering::Relaxed);
    }

    pub fn cast<U: Float>(&self) -> Model<U> {
        Model { cfg: self.cfg.clone(), params: self.params.cast(), forwards: AtomicU64::new(0) }
    }

    /// Sum of token/prompt, positional and step components for every position.
    pub fn embed(&self, input: &SeqInput) -> Result<Vec<T>> {
        let d = self.cfg.dim;
        let p = &self.params;
        let mut x = vec![T::zero(); input.len() * d];
        for (t, row) in x.chunks_mut(d).enumerate() {
            match input.slots[t] {
                Slot::Class(c) => {
                    if c > self.cfg.num_classes {
                        return Err(Error::Config(format!("class {c} out of range")));
                    }
                    row.copy_from_slice(&p.cls_emb[c * d..(c + 1) * d]);
                    continue;
                }
                Slot::Token(id) => {
                    let id = id as usize;
                    if id >= self.cfg.vocab_size {
                        return Err(Error::TokenOutOfRange { id: id as u32, vocab: self.cfg.vocab_size });
                    }
                    row.copy_from_slice(&p.tok_emb[id * d..(id + 1) * d]);
                }
                Slot::Prompt => row.copy_from_slice(&p.prompt),
            }
            let (r, c) = input.coords[t];
            add_sinusoid_2d(row, r, c);
            let s = self.step_slot(input.steps[t]);
            for (v, &e) in row.iter_mut().zip(&p.step_emb[s * d..(s + 1) * d]) {
                *v += e;
            }
        }
        Ok(x)
    }

    /// Step-embedding row for a step value; clamps past the table.
    pub fn step_slot(&self, step: usize) -> usize {
        step.min(self.cfg.max_steps - 1)
    }
}

/// Adds the fixed 2D sinusoid for `(row, col)`: the first half of the
/// channels encode the row, the second half the column.
pub fn add_sinusoid_2d<T: Float>(out: &mut [T], row: usize, col: usize) {
    let half = out.len() / 2;
    let pairs = half / 2;
    for (axis, pos) in [(0usize, row), (1, col)] {
        let base = axis * half;
        for i in 0..pairs {
            let freq = 1.0 / 10000f64.powf(i as f64 / pairs as f64);
            let angle = pos as f64 * freq;
            out[base + 2 * i] += T::from_f64_lossy(angle.sin());
            out[base + 2 * i + 1] += T::from_f64_lossy(angle.cos());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{preset_schedule, radial_encode, TokenGrid};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 5,
            num_classes: 2,
            dim: 8,
            num_layers: 1,
            num_heads: 2,
            mlp_ratio: 2.0,
            max_grid: (4, 4),
            max_steps: 4,
            dropout: 0.0,
            step_indexing: StepIndexing::Ordinal,
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let mut c = tiny();
        c.num_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.dim = 6;
        c.num_heads = 2;
        assert!(c.validate().is_err());
    }

    #[test]
    fn spec_matches_tensors() {
        let cfg = tiny();
        let p = Params::<f32>::zeros(&cfg);
        let spec = Params::<f32>::spec(&cfg);
        assert_eq!(spec.len(), p.tensors().len());
        for (s, t) in spec.iter().zip(p.tensors()) {
            assert_eq!(s.shape.iter().product::<usize>(), t.len(), "{}", s.name);
        }
    }

    #[test]
    fn embedding_is_additive() {
        let cfg = tiny();
        let model = Model::<f64>::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut input = SeqInput::default();
        input.push(Slot::Class(1), (0, 0), 0);
        input.push(Slot::Token(3), (1, 2), 0);
        input.push(Slot::Token(3), (1, 2), 2);
        input.push(Slot::Prompt, (0, 0), 1);
        input.push(Slot::Prompt, (3, 3), 1);
        let x = model.embed(&input).unwrap();
        let d = cfg.dim;
        let p = &model.params;
        for j in 0..d {
            assert_eq!(x[j], p.cls_emb[d + j]);
            let step_diff = p.step_emb[2 * d + j] - p.step_emb[j];
            assert!((x[2 * d + j] - x[d + j] - step_diff).abs() < 1e-12);
        }
        // the prompt component is shared: removing pe and step leaves p
        let mut r3 = x[3 * d..4 * d].to_vec();
        let mut r4 = x[4 * d..5 * d].to_vec();
        let mut pe3 = vec![0.0; d];
        let mut pe4 = vec![0.0; d];
        add_sinusoid_2d(&mut pe3, 0, 0);
        add_sinusoid_2d(&mut pe4, 3, 3);
        for j in 0..d {
            r3[j] -= pe3[j];
            r4[j] -= pe4[j];
        }
        for j in 0..d {
            assert!((r3[j] - r4[j]).abs() < 1e-12);
        }

        let zero = Model::from_params(cfg.clone(), Params::<f64>::zeros(&cfg)).unwrap();
        let mut cls_only = SeqInput::default();
        cls_only.push(Slot::Class(0), (0, 0), 0);
        assert!(zero.embed(&cls_only).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embedding_rejects_out_of_vocab() {
        let cfg = tiny();
        let model = Model::<f32>::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut input = SeqInput::default();
        input.push(Slot::Token(5), (0, 0), 0);
        assert!(model.embed(&input).is_err());
    }

    #[test]
    fn radial_input_has_prefix_and_prompts() {
        let s = preset_schedule("center", 4, 4).unwrap();
        let g = TokenGrid::filled(4, 4, 5, 2).unwrap();
        let enc = radial_encode(&g, &s).unwrap();
        let input = SeqInput::from_radial(&enc, 1, StepIndexing::Ordinal);
        assert_eq!(input.len(), 1 + 4 + 16);
        assert_eq!(input.slots[0], Slot::Class(1));
        assert_eq!(input.slots.iter().filter(|s| **s == Slot::Prompt).count(), 4 + 12);
    }
}
