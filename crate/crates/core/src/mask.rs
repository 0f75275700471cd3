//! Attention permission masks over a [`SequenceLayout`] with a conditioning
//! prefix.
//!
//! Rules for the nested mask (query `q`, key `v`):
//! - prefix queries see only the prefix;
//! - every other query sees the prefix and all positions of earlier steps;
//! - nothing sees a later step;
//! - within a step, border queries see the whole step while interior queries
//!   see only the interior.
//!
//! [`MaskKind::BlockCausal`] drops the last restriction (the ablation without
//! the nested mechanism).

use crate::grid::{Region, SequenceLayout};

/// Sequences longer than this use the rule predicate instead of a dense matrix.
pub const DENSE_LIMIT: usize = 4096;

/// Anything the attention kernels can query for permission.
pub trait AttentionMask: Sync {
    fn len(&self) -> usize;

    fn allowed(&self, q: usize, v: usize) -> bool;

    /// Exclusive upper bound on keys query `q` may see; keys beyond it are
    /// never read.
    fn key_limit(&self, q: usize) -> usize {
        let _ = q;
        self.len()
    }

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskKind {
    Nested,
    BlockCausal,
}

#[derive(Clone, Debug)]
enum Storage {
    Dense(Vec<bool>),
    Rules,
}

/// Per-position step and region labels, with the prefix flattened in front.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskLabels {
    pub prefix_len: usize,
    pub step: Vec<usize>,
    pub region: Vec<Region>,
    /// Exclusive end (in full-sequence index) of each step.
    pub step_end: Vec<usize>,
}

impl MaskLabels {
    pub fn from_layout(layout: &SequenceLayout, prefix_len: usize) -> Self {
        let step = layout.meta().iter().map(|m| m.step).collect();
        let region = layout.meta().iter().map(|m| m.region).collect();
        let step_end = layout.segments.iter().map(|s| prefix_len + s.offset + s.len()).collect();
        Self { prefix_len, step, region, step_end }
    }

    pub fn len(&self) -> usize {
        self.prefix_len + self.step.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Boolean query x key permission matrix built from a layout.
#[derive(Clone, Debug)]
pub struct NestedMask {
    kind: MaskKind,
    labels: MaskLabels,
    storage: Storage,
}

impl NestedMask {
    pub fn build(layout: &SequenceLayout, prefix_len: usize, kind: MaskKind) -> Self {
        let labels = MaskLabels::from_layout(layout, prefix_len);
        Self::from_labels(labels, kind)
    }

    pub fn from_labels(labels: MaskLabels, kind: MaskKind) -> Self {
        let n = labels.len();
        let storage = if n <= DENSE_LIMIT { Storage::Dense(fill_dense(&labels, kind)) } else { Storage::Rules };
        Self { kind, labels, storage }
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn labels(&self) -> &MaskLabels {
        &self.labels
    }

    pub fn prefix_len(&self) -> usize {
        self.labels.prefix_len
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.storage, Storage::Dense(_))
    }

    /// Flip one entry of a dense mask. Only meaningful for testing the checker.
    pub fn flip(&mut self, q: usize, v: usize) {
        let n = self.len();
        if let Storage::Dense(d) = &mut self.storage {
            d[q * n + v] = !d[q * n + v];
        }
    }

    /// Overwrite the dense matrix (row-major `n*n`).
    pub fn set_dense(&mut self, bits: Vec<bool>) {
        assert_eq!(bits.len(), self.len() * self.len());
        self.storage = Storage::Dense(bits);
    }

    /// One line of `0`/`1` characters per query row.
    pub fn dump(&self) -> String {
        let n = self.len();
        let mut out = String::with_capacity(n * (n + 1));
        for q in 0..n {
            for v in 0..n {
                out.push(if self.allowed(q, v) { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }

    fn rule(&self, q: usize, v: usize) -> bool {
        predicate(&self.labels, self.kind, q, v)
    }
}

fn predicate(l: &MaskLabels, kind: MaskKind, q: usize, v: usize) -> bool {
    let p = l.prefix_len;
    if q < p {
        return v < p;
    }
    if v < p {
        return true;
    }
    let (sq, sv) = (l.step[q - p], l.step[v - p]);
    if sv != sq {
        return sv < sq;
    }
    match kind {
        MaskKind::BlockCausal => true,
        MaskKind::Nested => l.region[q - p] == Region::Border || l.region[v - p] == Region::Interior,
    }
}

// Row templates per step: rows of the same step and region are identical.
fn fill_dense(l: &MaskLabels, kind: MaskKind) -> Vec<bool> {
    let n = l.len();
    let p = l.prefix_len;
    let mut bits = vec![false; n * n];
    for q in 0..p {
        bits[q * n..q * n + p].fill(true);
    }
    let mut start = p;
    for &end in &l.step_end {
        // template for border rows: everything up to the end of this step
        let mut border_row = vec![false; n];
        border_row[..end].fill(true);
        let mut interior_row = border_row.clone();
        if kind == MaskKind::Nested {
            for (slot, region) in interior_row[start..end].iter_mut().zip(&l.region[start - p..end - p]) {
                if *region == Region::Border {
                    *slot = false;
                }
            }
        }
        for q in start..end {
            let row = match l.region[q - p] {
                Region::Border => &border_row,
                Region::Interior => &interior_row,
            };
            bits[q * n..(q + 1) * n].copy_from_slice(row);
        }
        start = end;
    }
    bits
}

impl AttentionMask for NestedMask {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn allowed(&self, q: usize, v: usize) -> bool {
        match &self.storage {
            Storage::Dense(d) => d[q * self.len() + v],
            Storage::Rules => self.rule(q, v),
        }
    }

    fn key_limit(&self, q: usize) -> usize {
        let p = self.labels.prefix_len;
        if q < p {
            p
        } else {
            self.labels.step_end[self.labels.step[q - p]]
        }
    }
}

/// Plain causal mask (prefix + token-by-token) used by the raster baseline.
#[derive(Clone, Copy, Debug)]
pub struct CausalMask {
    pub len: usize,
}

impl AttentionMask for CausalMask {
    fn len(&self) -> usize {
        self.len
    }

    fn allowed(&self, q: usize, v: usize) -> bool {
        v <= q
    }

    fn key_limit(&self, q: usize) -> usize {
        q + 1
    }
}

/// Rule a mask entry was checked against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskRule {
    PrefixRowSeesOnlyPrefix,
    PrefixVisibleToAll,
    NoFutureStep,
    EarlierStepsVisible,
    BorderSeesOwnStep,
    InteriorSeesInterior,
    InteriorBlindToBorder,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MaskReport {
    Ok,
    Mismatch { q: usize, v: usize, expected: bool, actual: bool, rule: MaskRule },
}

/// Re-derive every entry of `mask` from the stated rules and report the
/// first disagreement.
pub fn check_mask(mask: &NestedMask) -> MaskReport {
    let l = mask.labels();
    let p = l.prefix_len;
    let n = l.len();
    let nested = mask.kind() == MaskKind::Nested;
    for q in 0..n {
        for v in 0..n {
            let (expected, rule) = if q < p {
                (v < p, MaskRule::PrefixRowSeesOnlyPrefix)
            } else if v < p {
                (true, MaskRule::PrefixVisibleToAll)
            } else {
                let (mq, mv) = (q - p, v - p);
                if l.step[mv] > l.step[mq] {
                    (false, MaskRule::NoFutureStep)
                } else if l.step[mv] < l.step[mq] {
                    (true, MaskRule::EarlierStepsVisible)
                } else if l.region[mq] == Region::Border {
                    (true, MaskRule::BorderSeesOwnStep)
                } else if l.region[mv] == Region::Interior {
                    (true, MaskRule::InteriorSeesInterior)
                } else {
                    (!nested, MaskRule::InteriorBlindToBorder)
                }
            };
            let actual = mask.allowed(q, v);
            if actual != expected {
                return MaskReport::Mismatch { q, v, expected, actual, rule };
            }
        }
    }
    MaskReport::Ok
}
