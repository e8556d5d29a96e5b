//! Sparse cross attention and the position-wise feed-forward block.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::array::DenseArray;
use crate::error::{Error, Result};
use crate::graph::{attention_scores, merge_heads, split_heads, AttentionParams};
use crate::params::{Bound, ParamStore};
use crate::rng::SeededRng;
use crate::tape::{Tape, Var};

/// `min(t, ceil(c ln t))`, at least 1.
pub fn sparse_budget(t: usize, factor: f64) -> usize {
    let u = libm::ceil(factor * libm::log(t as f64));
    (u.max(1.0) as usize).min(t)
}

/// Queries kept per `(batch, head)` row of `scores [B, h, Lq, Lk]`: the
/// `u` largest `max - mean` sparsity scores over `keys`, ties to the lower
/// index.
fn select_queries(scores: &DenseArray, keys: &[usize], u: usize) -> Vec<bool> {
    let s = scores.shape();
    let (lq, lk) = (s[2], s[3]);
    let rows = s[0] * s[1];
    let mut keep = vec![false; rows * lq];
    let mut m = vec![0.0; lq];
    for r in 0..rows {
        for (qi, slot) in m.iter_mut().enumerate() {
            let row = &scores.data()[(r * lq + qi) * lk..(r * lq + qi + 1) * lk];
            let mx = keys.iter().map(|&j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            let mean = keys.iter().map(|&j| row[j]).sum::<f64>() / keys.len() as f64;
            *slot = mx - mean;
        }
        let mut order: Vec<usize> = (0..lq).collect();
        order.sort_by(|&a, &b| m[b].partial_cmp(&m[a]).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b)));
        for &qi in &order[..u] {
            keep[r * lq + qi] = true;
        }
    }
    keep
}

/// Distinct key indices sampled without replacement, sorted.
fn sample_keys(lk: usize, count: usize, rng: &mut SeededRng) -> Vec<usize> {
    if count >= lk {
        return (0..lk).collect();
    }
    let mut idx: Vec<usize> = (0..lk).collect();
    for i in 0..count {
        let j = i + rng.below(lk - i);
        idx.swap(i, j);
    }
    let mut out = idx[..count].to_vec();
    out.sort_unstable();
    out
}

/// Cross attention applied independently per node: queries from `q_src`,
/// keys and values from `kv_src` (both `[T, N, D]`). The `u` most peaked
/// queries (scored on a random key subset) attend over all keys; the rest
/// take the mean of the values. Selection is treated as a constant.
pub fn probsparse_cross_attention(tape: &mut Tape, q_src: Var, kv_src: Var, p: &AttentionParams, factor: f64, rng: &mut SeededRng) -> Result<Var> {
    let s = tape.shape(q_src).to_vec();
    if s.len() != 3 || tape.shape(kv_src)[1..] != s[1..] {
        return Err(Error::Shape {
            op: "probsparse",
            expected: s.clone(),
            got: tape.shape(kv_src).to_vec(),
        });
    }
    let q = tape.permute(q_src, &[1, 0, 2])?; // [N, T, D]
    let kv = tape.permute(kv_src, &[1, 0, 2])?;
    let lk = tape.shape(kv)[1];
    let scores = attention_scores(tape, q, kv, p)?; // [N, h, Tq, Tk]
    let attn = tape.softmax(scores)?;
    let v = tape.matmul(kv, p.wv)?;
    let v = split_heads(tape, v, p.heads)?; // [N, h, Tk, dh]
    let full = tape.matmul(attn, v)?;

    let lq = s[0];
    let u = sparse_budget(lq, factor);
    let keys = sample_keys(lk, sparse_budget(lk, factor), rng);
    let ctx = if u >= lq {
        full
    } else {
        let keep = tape.frozen(|tp| {
            let keep = select_queries(tp.value(scores), &keys, u);
            Ok(keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect())
        })?;
        let fs = tape.shape(full).to_vec();
        let on = DenseArray::from_vec(&[fs[0], fs[1], fs[2], 1], keep)?;
        let off = on.map(|x| 1.0 - x);
        let on = tape.constant(on);
        let off = tape.constant(off);
        let mean = tape.mean_axis(v, 2)?; // [N, h, 1, dh]
        let a = tape.mul(full, on)?;
        let b = tape.mul(mean, off)?;
        tape.add(a, b)?
    };
    let ctx = merge_heads(tape, ctx)?;
    let out = tape.matmul(ctx, p.wo)?;
    tape.permute(out, &[1, 0, 2])
}

/// Two-layer position-wise network `gelu(x w1 + b1) w2 + b2` with hidden
/// width `4D`.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl FeedForward {
    pub const EXPANSION: usize = 4;

    pub fn init_params(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut SeededRng) {
        let f = Self::EXPANSION * d;
        store.insert_xavier(format!("{prefix}.w1"), d, f, 1.0, rng);
        store.insert(format!("{prefix}.b1"), DenseArray::zeros(&[f]));
        store.insert_xavier(format!("{prefix}.w2"), f, d, ParamStore::RESIDUAL_GAIN, rng);
        store.insert(format!("{prefix}.b2"), DenseArray::zeros(&[d]));
    }

    pub fn bind(params: &Bound<'_>, prefix: &str) -> Result<Self> {
        Ok(Self {
            w1: params.sub(prefix, "w1")?,
            b1: params.sub(prefix, "b1")?,
            w2: params.sub(prefix, "w2")?,
            b2: params.sub(prefix, "b2")?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = tape.matmul(x, self.w1)?;
        let h = tape.add(h, self.b1)?;
        let h = tape.gelu(h);
        let h = tape.matmul(h, self.w2)?;
        tape.add(h, self.b2)
    }
}
