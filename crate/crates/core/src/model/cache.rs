//! Key/value cache and block-incremental forward for decoding.

use super::layers::{gelu, layer_norm, masked_softmax_row};
use super::{Model, SeqInput};
use crate::error::{Error, Result};
use crate::grid::Region;
use crate::linalg::{add_bias, gemm, matmul, Float, View};

/// Visibility inside a newly appended block. Cached positions are always
/// visible to every new query. A block may start with conditioning-prefix
/// positions, which see only each other; the remaining positions see the
/// prefix and follow the rule below among themselves.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BlockMask {
    /// Every block position sees the whole block.
    Unrestricted,
    /// Border positions see the whole block; interior positions see only
    /// interior positions.
    Nested(Vec<Region>),
    /// Position `i` sees block positions `0..=i`.
    Causal,
}

impl BlockMask {
    fn allowed(&self, q: usize, v: usize) -> bool {
        match self {
            BlockMask::Unrestricted => true,
            BlockMask::Causal => v <= q,
            BlockMask::Nested(r) => r[q] == Region::Border || r[v] == Region::Interior,
        }
    }
}

/// Per-layer keys and values of every position fed so far.
#[derive(Clone, Debug)]
pub struct KvCache<T> {
    dim: usize,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    len: usize,
}

impl<T: Float> KvCache<T> {
    pub fn new(model: &Model<T>) -> Self {
        let l = model.cfg.num_layers;
        Self { dim: model.cfg.dim, keys: vec![Vec::new(); l], values: vec![Vec::new(); l], len: 0 }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Drops every position at or after `len`.
    pub fn truncate(&mut self, len: usize) {
        let len = len.min(self.len);
        for (k, v) in self.keys.iter_mut().zip(&mut self.values) {
            k.truncate(len * self.dim);
            v.truncate(len * self.dim);
        }
        self.len = len;
    }
}

impl<T: Float> Model<T> {
    /// Feeds `block` after the cached positions, appends its keys and values,
    /// and returns its logits (`block.len() x vocab`). The first `prefix`
    /// positions of the block are conditioning prefix. Counts as one forward.
    pub fn forward_block(
        &self,
        cache: &mut KvCache<T>,
        block: &SeqInput,
        mask: &BlockMask,
        prefix: usize,
    ) -> Result<Vec<T>> {
        let cfg = &self.cfg;
        let m = block.len();
        if cache.dim != cfg.dim || cache.keys.len() != cfg.num_layers {
            return Err(Error::Shape("cache does not belong to this model".into()));
        }
        if prefix > m {
            return Err(Error::Shape(format!("prefix {prefix} longer than block {m}")));
        }
        if let BlockMask::Nested(r) = mask {
            if r.len() != m - prefix {
                return Err(Error::Shape(format!("block mask covers {} positions, block has {}", r.len(), m - prefix)));
            }
        }
        self.count_forward();
        let (d, hid, v, heads) = (cfg.dim, cfg.hidden(), cfg.vocab_size, cfg.num_heads);
        let dh = cfg.head_dim();
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let past = cache.len;
        let total = past + m;

        let mut x = self.embed(block)?;
        let mut h = vec![T::zero(); m * d];
        let mut qkv = vec![T::zero(); m * 3 * d];
        let mut ctx = vec![T::zero(); m * d];
        let mut tmp = vec![T::zero(); m * d];
        let mut pre = vec![T::zero(); m * hid];
        let mut scores = vec![T::zero(); m * total];
        let mut probs = vec![T::zero(); m * total];
        for (li, lp) in self.params.layers.iter().enumerate() {
            layer_norm(&x, &lp.ln1_g, &lp.ln1_b, &mut h, None);
            matmul(&h, &lp.w_qkv, &mut qkv, m, d, 3 * d);
            add_bias(&mut qkv, &lp.b_qkv);
            let (keys, values) = (&mut cache.keys[li], &mut cache.values[li]);
            for row in qkv.chunks(3 * d) {
                keys.extend_from_slice(&row[d..2 * d]);
                values.extend_from_slice(&row[2 * d..]);
            }
            for hd in 0..heads {
                let off = hd * dh;
                gemm(
                    m,
                    dh,
                    total,
                    scale,
                    View::new(&qkv[off..], 3 * d),
                    View::t(&keys[off..], d),
                    T::zero(),
                    &mut scores,
                    total,
                );
                for q in 0..m {
                    let row = &scores[q * total..(q + 1) * total];
                    let allowed = |k: usize| {
                        if k < past {
                            return true;
                        }
                        let v = k - past;
                        if v < prefix {
                            return true;
                        }
                        if q < prefix {
                            return false;
                        }
                        mask.allowed(q - prefix, v - prefix)
                    };
                    masked_softmax_row(row, allowed, past + q, &mut probs[q * total..(q + 1) * total]);
                }
                gemm(
                    m,
                    total,
                    dh,
                    T::one(),
                    View::new(&probs, total),
                    View::new(&values[off..], d),
                    T::zero(),
                    &mut ctx[off..],
                    d,
                );
            }
            matmul(&ctx, &lp.w_o, &mut tmp, m, d, d);
            add_bias(&mut tmp, &lp.b_o);
            x.iter_mut().zip(&tmp).for_each(|(a, &b)| *a += b);

            layer_norm(&x, &lp.ln2_g, &lp.ln2_b, &mut h, None);
            matmul(&h, &lp.w_fc1, &mut pre, m, d, hid);
            add_bias(&mut pre, &lp.b_fc1);
            pre.iter_mut().for_each(|u| *u = gelu(*u));
            matmul(&pre, &lp.w_fc2, &mut tmp, m, hid, d);
            add_bias(&mut tmp, &lp.b_fc2);
            x.iter_mut().zip(&tmp).for_each(|(a, &b)| *a += b);
            if !x.iter().all(|v| v.is_finite()) {
                cache.truncate(past);
                return Err(Error::NonFinite { stage: "layer output".into(), layer: Some(li) });
            }
        }
        cache.len = total;
        let p = &self.params;
        layer_norm(&x, &p.lnf_g, &p.lnf_b, &mut h, None);
        let mut logits = vec![T::zero(); m * v];
        matmul(&h, &p.head_w, &mut logits, m, d, v);
        add_bias(&mut logits, &p.head_b);
        Ok(logits)
    }
}
