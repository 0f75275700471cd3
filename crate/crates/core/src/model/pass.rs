//! Full-sequence forward with a tape, exact reverse-mode gradients, and the
//! batched cross-entropy objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{attention_backward, attention_forward, gelu, gelu_grad, layer_norm, layer_norm_backward, LnTape};
use super::{Model, Params, SeqInput, Slot};
use crate::error::{Error, Result};
use crate::grid::Region;
use crate::linalg::{add_bias, matmul, matmul_nt, matmul_tn_acc, sum_rows_into, Float};
use crate::mask::AttentionMask;
use crate::par::{self, Exec};

struct LayerTape<T> {
    ln1: LnTape<T>,
    h1: Vec<T>,
    qkv: Vec<T>,
    probs: Vec<Vec<T>>,
    ctx: Vec<T>,
    attn_keep: Option<Vec<T>>,
    ln2: LnTape<T>,
    h2: Vec<T>,
    pre: Vec<T>,
    act: Vec<T>,
    mlp_keep: Option<Vec<T>>,
}

struct Tape<T> {
    layers: Vec<LayerTape<T>>,
    lnf: LnTape<T>,
    hf: Vec<T>,
}

fn dropout_mask<T: Float>(n: usize, p: f64, rng: &mut ChaCha8Rng) -> Vec<T> {
    let scale = T::from_f64_lossy(1.0 / (1.0 - p));
    (0..n).map(|_| if rng.random::<f64>() < p { T::zero() } else { scale }).collect()
}

fn check_finite<T: Float>(x: &[T], stage: &str, layer: Option<usize>) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { stage: stage.to_string(), layer })
    }
}

fn forward_tape<T: Float>(
    model: &Model<T>,
    input: &SeqInput,
    mask: &dyn AttentionMask,
    dropout_seed: Option<u64>,
) -> Result<(Vec<T>, Tape<T>)> {
    let cfg = &model.cfg;
    let p = &model.params;
    let n = input.len();
    if mask.len() != n {
        return Err(Error::Shape(format!("mask covers {} positions, input has {n}", mask.len())));
    }
    let (d, hid, v) = (cfg.dim, cfg.hidden(), cfg.vocab_size);
    let mut rng = dropout_seed.filter(|_| cfg.dropout > 0.0).map(ChaCha8Rng::seed_from_u64);

    let mut x = model.embed(input)?;
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for (li, lp) in p.layers.iter().enumerate() {
        let mut ln1 = LnTape::default();
        let mut h1 = vec![T::zero(); n * d];
        layer_norm(&x, &lp.ln1_g, &lp.ln1_b, &mut h1, Some(&mut ln1));
        let mut qkv = vec![T::zero(); n * 3 * d];
        matmul(&h1, &lp.w_qkv, &mut qkv, n, d, 3 * d);
        add_bias(&mut qkv, &lp.b_qkv);
        let mut probs = vec![Vec::new(); cfg.num_heads];
        let mut ctx = vec![T::zero(); n * d];
        attention_forward(&qkv, n, d, cfg.num_heads, mask, &mut probs, &mut ctx);
        let mut a = vec![T::zero(); n * d];
        matmul(&ctx, &lp.w_o, &mut a, n, d, d);
        add_bias(&mut a, &lp.b_o);
        let attn_keep = rng.as_mut().map(|r| dropout_mask::<T>(n * d, cfg.dropout, r));
        if let Some(k) = &attn_keep {
            a.iter_mut().zip(k).for_each(|(v, &m)| *v *= m);
        }
        x.iter_mut().zip(&a).for_each(|(xv, &av)| *xv += av);

        let mut ln2 = LnTape::default();
        let mut h2 = vec![T::zero(); n * d];
        layer_norm(&x, &lp.ln2_g, &lp.ln2_b, &mut h2, Some(&mut ln2));
        let mut pre = vec![T::zero(); n * hid];
        matmul(&h2, &lp.w_fc1, &mut pre, n, d, hid);
        add_bias(&mut pre, &lp.b_fc1);
        let act: Vec<T> = pre.iter().map(|&u| gelu(u)).collect();
        let mut m = vec![T::zero(); n * d];
        matmul(&act, &lp.w_fc2, &mut m, n, hid, d);
        add_bias(&mut m, &lp.b_fc2);
        let mlp_keep = rng.as_mut().map(|r| dropout_mask::<T>(n * d, cfg.dropout, r));
        if let Some(k) = &mlp_keep {
            m.iter_mut().zip(k).for_each(|(v, &mk)| *v *= mk);
        }
        x.iter_mut().zip(&m).for_each(|(xv, &mv)| *xv += mv);
        check_finite(&x, "layer output", Some(li))?;

        layers.push(LayerTape { ln1, h1, qkv, probs, ctx, attn_keep, ln2, h2, pre, act, mlp_keep });
    }
    let mut lnf = LnTape::default();
    let mut hf = vec![T::zero(); n * d];
    layer_norm(&x, &p.lnf_g, &p.lnf_b, &mut hf, Some(&mut lnf));
    let mut logits = vec![T::zero(); n * v];
    matmul(&hf, &p.head_w, &mut logits, n, d, v);
    add_bias(&mut logits, &p.head_b);
    check_finite(&logits, "logits", None)?;
    Ok((logits, Tape { layers, lnf, hf }))
}

fn backward<T: Float>(
    model: &Model<T>,
    input: &SeqInput,
    mask: &dyn AttentionMask,
    tape: &Tape<T>,
    dlogits: &[T],
    grads: &mut Params<T>,
) {
    let cfg = &model.cfg;
    let p = &model.params;
    let n = input.len();
    let (d, hid, v) = (cfg.dim, cfg.hidden(), cfg.vocab_size);

    matmul_tn_acc(&tape.hf, dlogits, &mut grads.head_w, d, n, v);
    sum_rows_into(dlogits, &mut grads.head_b);
    let mut dhf = vec![T::zero(); n * d];
    matmul_nt(dlogits, &p.head_w, &mut dhf, n, v, d, false);
    let mut dx = vec![T::zero(); n * d];
    layer_norm_backward(&tape.lnf, &p.lnf_g, &dhf, &mut grads.lnf_g, &mut grads.lnf_b, &mut dx);

    for li in (0..cfg.num_layers).rev() {
        let lp = &p.layers[li];
        let lt = &tape.layers[li];
        let gl = &mut grads.layers[li];

        // MLP branch
        let mut dm = dx.clone();
        if let Some(k) = &lt.mlp_keep {
            dm.iter_mut().zip(k).for_each(|(g, &m)| *g *= m);
        }
        matmul_tn_acc(&lt.act, &dm, &mut gl.w_fc2, hid, n, d);
        sum_rows_into(&dm, &mut gl.b_fc2);
        let mut dpre = vec![T::zero(); n * hid];
        matmul_nt(&dm, &lp.w_fc2, &mut dpre, n, d, hid, false);
        dpre.iter_mut().zip(&lt.pre).for_each(|(g, &u)| *g *= gelu_grad(u));
        matmul_tn_acc(&lt.h2, &dpre, &mut gl.w_fc1, d, n, hid);
        sum_rows_into(&dpre, &mut gl.b_fc1);
        let mut dh2 = vec![T::zero(); n * d];
        matmul_nt(&dpre, &lp.w_fc1, &mut dh2, n, hid, d, false);
        layer_norm_backward(&lt.ln2, &lp.ln2_g, &dh2, &mut gl.ln2_g, &mut gl.ln2_b, &mut dx);

        // attention branch
        let mut da = dx.clone();
        if let Some(k) = &lt.attn_keep {
            da.iter_mut().zip(k).for_each(|(g, &m)| *g *= m);
        }
        matmul_tn_acc(&lt.ctx, &da, &mut gl.w_o, d, n, d);
        sum_rows_into(&da, &mut gl.b_o);
        let mut dctx = vec![T::zero(); n * d];
        matmul_nt(&da, &lp.w_o, &mut dctx, n, d, d, false);
        let mut dqkv = vec![T::zero(); n * 3 * d];
        attention_backward(&lt.qkv, n, d, cfg.num_heads, mask, &lt.probs, &dctx, &mut dqkv);
        matmul_tn_acc(&lt.h1, &dqkv, &mut gl.w_qkv, d, n, 3 * d);
        sum_rows_into(&dqkv, &mut gl.b_qkv);
        let mut dh1 = vec![T::zero(); n * d];
        matmul_nt(&dqkv, &lp.w_qkv, &mut dh1, n, 3 * d, d, false);
        layer_norm_backward(&lt.ln1, &lp.ln1_g, &dh1, &mut gl.ln1_g, &mut gl.ln1_b, &mut dx);
    }

    // embeddings; the sinusoid is fixed
    for (t, row) in dx.chunks(d).enumerate() {
        let target: &mut [T] = match input.slots[t] {
            Slot::Class(c) => &mut grads.cls_emb[c * d..(c + 1) * d],
            Slot::Token(id) => &mut grads.tok_emb[id as usize * d..(id as usize + 1) * d],
            Slot::Prompt => &mut grads.prompt,
        };
        target.iter_mut().zip(row).for_each(|(g, &r)| *g += r);
        if !matches!(input.slots[t], Slot::Class(_)) {
            let s = model.step_slot(input.steps[t]);
            grads.step_emb[s * d..(s + 1) * d].iter_mut().zip(row).for_each(|(g, &r)| *g += r);
        }
    }
}

/// Logits (`n x vocab`) of a full-sequence forward without dropout.
pub fn forward_logits<T: Float>(model: &Model<T>, input: &SeqInput, mask: &dyn AttentionMask) -> Result<Vec<T>> {
    model.count_forward();
    forward_tape(model, input, mask, None).map(|(l, _)| l)
}

/// What a target position is, for loss bookkeeping.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PosTag {
    pub step: usize,
    pub region: Region,
}

/// One training sequence with per-position targets and loss weights.
pub struct TrainItem {
    pub input: SeqInput,
    pub targets: Vec<Option<u32>>,
    pub weights: Vec<f64>,
    pub tags: Vec<Option<PosTag>>,
    pub mask: Box<dyn AttentionMask + Send + Sync>,
    pub dropout_seed: Option<u64>,
}

/// Summed (unnormalized) losses by region and step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub loss_sum: f64,
    pub weight_sum: f64,
    pub positions: usize,
    pub border_sum: f64,
    pub border_count: usize,
    pub border_correct: usize,
    pub interior_sum: f64,
    pub interior_count: usize,
    pub step_sums: Vec<(f64, usize)>,
}

impl LossReport {
    /// Weighted mean negative log-likelihood.
    pub fn loss(&self) -> f64 {
        if self.weight_sum > 0.0 {
            self.loss_sum / self.weight_sum
        } else {
            0.0
        }
    }

    pub fn border_loss(&self) -> f64 {
        self.border_sum / self.border_count.max(1) as f64
    }

    pub fn interior_loss(&self) -> f64 {
        self.interior_sum / self.interior_count.max(1) as f64
    }

    pub fn border_accuracy(&self) -> f64 {
        self.border_correct as f64 / self.border_count.max(1) as f64
    }

    pub fn merge(&mut self, o: &LossReport) {
        self.loss_sum += o.loss_sum;
        self.weight_sum += o.weight_sum;
        self.positions += o.positions;
        self.border_sum += o.border_sum;
        self.border_count += o.border_count;
        self.border_correct += o.border_correct;
        self.interior_sum += o.interior_sum;
        self.interior_count += o.interior_count;
        if self.step_sums.len() < o.step_sums.len() {
            self.step_sums.resize(o.step_sums.len(), (0.0, 0));
        }
        for (a, b) in self.step_sums.iter_mut().zip(&o.step_sums) {
            a.0 += b.0;
            a.1 += b.1;
        }
    }
}

/// Cross-entropy per target position; fills `dlogits` with the unnormalized
/// weighted gradient when given.
fn score<T: Float>(item: &TrainItem, logits: &[T], vocab: usize, mut dlogits: Option<&mut [T]>) -> Result<LossReport> {
    let mut rep = LossReport::default();
    for (t, target) in item.targets.iter().enumerate() {
        let Some(y) = *target else { continue };
        let y = y as usize;
        if y >= vocab {
            return Err(Error::TokenOutOfRange { id: y as u32, vocab });
        }
        let row = &logits[t * vocab..(t + 1) * vocab];
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        let nll = (lse - row[y]).as_f64();
        let w = item.weights[t];
        rep.loss_sum += w * nll;
        rep.weight_sum += w;
        rep.positions += 1;
        let argmax = row
            .iter()
            .enumerate()
            .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
            .0;
        if let Some(tag) = item.tags[t] {
            match tag.region {
                Region::Border => {
                    rep.border_sum += nll;
                    rep.border_count += 1;
                    rep.border_correct += (argmax == y) as usize;
                }
                Region::Interior => {
                    rep.interior_sum += nll;
                    rep.interior_count += 1;
                }
            }
            if rep.step_sums.len() <= tag.step {
                rep.step_sums.resize(tag.step + 1, (0.0, 0));
            }
            rep.step_sums[tag.step].0 += nll;
            rep.step_sums[tag.step].1 += 1;
        }
        if let Some(dl) = dlogits.as_deref_mut() {
            let wt = T::from_f64_lossy(w);
            let drow = &mut dl[t * vocab..(t + 1) * vocab];
            for (j, g) in drow.iter_mut().enumerate() {
                *g = wt * (row[j] - lse).exp();
            }
            drow[y] -= wt;
        }
    }
    Ok(rep)
}

/// Score `item` without gradients.
pub fn evaluate_item<T: Float>(model: &Model<T>, item: &TrainItem) -> Result<LossReport> {
    let logits = forward_logits(model, &item.input, item.mask.as_ref())?;
    score(item, &logits, model.cfg.vocab_size, None)
}

/// Weighted mean cross-entropy over every target position of the batch and
/// its exact gradient. Per-item gradients are summed in batch order, so the
/// result does not depend on `exec`.
pub fn loss_and_grads<T: Float>(model: &Model<T>, batch: &[TrainItem], exec: Exec) -> Result<(LossReport, Params<T>)> {
    for item in batch {
        let n = item.input.len();
        if item.targets.len() != n || item.weights.len() != n || item.tags.len() != n {
            return Err(Error::Shape("targets/weights/tags must align with the input".into()));
        }
    }
    let per_item = par::map(exec, batch, |item| -> Result<(LossReport, Params<T>)> {
        let (logits, tape) = forward_tape(model, &item.input, item.mask.as_ref(), item.dropout_seed)?;
        let v = model.cfg.vocab_size;
        let mut dlogits = vec![T::zero(); logits.len()];
        let rep = score(item, &logits, v, Some(&mut dlogits))?;
        let mut g = Params::zeros(&model.cfg);
        backward(model, &item.input, item.mask.as_ref(), &tape, &dlogits, &mut g);
        Ok((rep, g))
    });
    let mut total = LossReport::default();
    let mut grads = Params::zeros(&model.cfg);
    for r in per_item {
        let (rep, g) = r?;
        total.merge(&rep);
        grads.add_assign(&g);
    }
    if total.weight_sum > 0.0 {
        grads.scale(T::from_f64_lossy(1.0 / total.weight_sum));
    }
    Ok((total, grads))
}
