//! Message passing among pods: attention between pods sharing a host, and
//! graph attention over the per-step connection adjacency.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::array::DenseArray;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::rng::SeededRng;
use crate::tape::{Tape, Var};

/// Added inside `log(adj + eps)` for the graph-attention edge bias.
pub const EDGE_BIAS_EPS: f64 = 1e-9;

/// Pod counts per host. Nodes are ordered by host, so host `i` owns one
/// contiguous node range.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeploymentMap {
    counts: Vec<usize>,
}

impl DeploymentMap {
    pub fn new(counts: Vec<usize>) -> Self {
        Self { counts }
    }

    /// Validates that the counts cover exactly `nodes` pods.
    pub fn for_nodes(counts: Vec<usize>, nodes: usize) -> Result<Self> {
        let m = Self::new(counts);
        m.check(nodes)?;
        Ok(m)
    }

    pub fn single_host(nodes: usize) -> Self {
        Self::new(vec![nodes])
    }

    pub fn check(&self, nodes: usize) -> Result<()> {
        let sum = self.nodes();
        if sum != nodes {
            return Err(Error::DeploymentMismatch { sum, nodes });
        }
        Ok(())
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn hosts(&self) -> usize {
        self.counts.len()
    }

    pub fn nodes(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn ranges(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.counts
            .iter()
            .map(|&c| {
                let r = start..start + c;
                start += c;
                r
            })
            .collect()
    }

    pub fn host_of(&self, node: usize) -> Option<usize> {
        self.ranges().iter().position(|r| r.contains(&node))
    }
}

/// Per-step row-stochastic adjacency with self-loops, `[T, N, N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedAdjacency(DenseArray);

impl NormalizedAdjacency {
    /// `I` at every step.
    pub fn identity(t: usize, n: usize) -> Self {
        Self(DenseArray::from_fn(&[t, n, n], |i| if i[1] == i[2] { 1.0 } else { 0.0 }))
    }

    pub fn values(&self) -> &DenseArray {
        &self.0
    }

    pub fn steps(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn nodes(&self) -> usize {
        self.0.shape()[1]
    }

    /// Row `u` of step `t`.
    pub fn row(&self, t: usize, u: usize) -> &[f64] {
        let n = self.nodes();
        &self.0.data()[(t * n + u) * n..(t * n + u + 1) * n]
    }
}

/// `A_t -> rowscale(A_t + I)` for every step of a raw `[T, N, N]` adjacency.
pub fn normalize_adjacency(raw: &DenseArray) -> Result<NormalizedAdjacency> {
    let s = raw.shape();
    if s.len() != 3 || s[1] != s[2] {
        return Err(Error::Shape {
            op: "normalize_adjacency",
            expected: vec![s.first().copied().unwrap_or(0), s.get(1).copied().unwrap_or(0), s.get(1).copied().unwrap_or(0)],
            got: s.to_vec(),
        });
    }
    for (index, &v) in raw.data().iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFiniteAdjacency { index });
        }
        if v < 0.0 {
            return Err(Error::NegativeAdjacency { index });
        }
    }
    let n = s[1];
    let mut out = raw.data().to_vec();
    for (ri, row) in out.chunks_mut(n).enumerate() {
        row[ri % n] += 1.0;
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= sum);
    }
    Ok(NormalizedAdjacency(DenseArray::from_vec(s, out)?))
}

/// Contiguous node blocks `[T, m_i, D]` in host order.
pub fn split_by_host(x: &DenseArray, map: &DeploymentMap) -> Result<Vec<DenseArray>> {
    map.check(x.shape()[1])?;
    map.ranges()
        .into_iter()
        .map(|r| x.slice_axis(1, r.start, r.len()))
        .collect()
}

/// Query/key/value/output projections of one multi-head attention.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub heads: usize,
}

impl AttentionParams {
    pub fn init_params(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut SeededRng) {
        for w in ["wq", "wk", "wv"] {
            store.insert_xavier(format!("{prefix}.{w}"), d, d, 1.0, rng);
        }
        store.insert_xavier(format!("{prefix}.wo"), d, d, ParamStore::RESIDUAL_GAIN, rng);
    }

    pub fn bind(params: &Bound<'_>, prefix: &str, heads: usize) -> Result<Self> {
        Ok(Self {
            wq: params.sub(prefix, "wq")?,
            wk: params.sub(prefix, "wk")?,
            wv: params.sub(prefix, "wv")?,
            wo: params.sub(prefix, "wo")?,
            heads,
        })
    }
}

/// `[B, L, D] -> [B, h, L, D/h]`.
pub(crate) fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, l, d) = (s[0], s[1], s[2]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::config(format!("model width {d} not divisible by {heads} heads")));
    }
    let r = tape.reshape(x, &[b, l, heads, d / heads])?;
    tape.permute(r, &[0, 2, 1, 3])
}

/// `[B, h, L, dh] -> [B, L, h*dh]`.
pub(crate) fn merge_heads(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let p = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(p, &[s[0], s[2], s[1] * s[3]])
}

/// Scaled dot-product scores `[B, h, Lq, Lk]` between query stream `xq` and
/// key stream `xk` (both `[B, L, D]`).
pub(crate) fn attention_scores(tape: &mut Tape, xq: Var, xk: Var, p: &AttentionParams) -> Result<Var> {
    let q = tape.matmul(xq, p.wq)?;
    let k = tape.matmul(xk, p.wk)?;
    let q = split_heads(tape, q, p.heads)?;
    let k = split_heads(tape, k, p.heads)?;
    let kt = tape.transpose(k)?;
    let s = tape.matmul(q, kt)?;
    let dh = tape.shape(q)[3];
    Ok(tape.scale(s, 1.0 / libm::sqrt(dh as f64)))
}

/// Multi-head self-attention within each batch row: `[B, L, D] -> [B, L, D]`.
pub fn self_attention(tape: &mut Tape, x: Var, p: &AttentionParams) -> Result<Var> {
    let scores = attention_scores(tape, x, x, p)?;
    let attn = tape.softmax(scores)?;
    let v = tape.matmul(x, p.wv)?;
    let v = split_heads(tape, v, p.heads)?;
    let ctx = tape.matmul(attn, v)?;
    let ctx = merge_heads(tape, ctx)?;
    tape.matmul(ctx, p.wo)
}

/// One infrastructure-message layer: self-attention among the pods of each
/// host at every step, parameters shared across hosts and steps, blocks
/// re-concatenated in host order. Hosts with no pods contribute no block.
pub fn imm_layer(tape: &mut Tape, x: Var, map: &DeploymentMap, p: &AttentionParams) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::Shape {
            op: "imm",
            expected: vec![0, 0, 0],
            got: s,
        });
    }
    map.check(s[1])?;
    let sizes: Vec<usize> = map.counts().iter().copied().filter(|&c| c > 0).collect();
    let blocks = tape.split(x, 1, &sizes)?;
    let mut outs = Vec::with_capacity(blocks.len());
    for b in blocks {
        outs.push(self_attention(tape, b, p)?);
    }
    tape.concat(&outs, 1)
}

/// `K1` stacked [`imm_layer`]s with parameters `{prefix}.{j}`.
pub fn imm_forward(tape: &mut Tape, x: Var, map: &DeploymentMap, params: &Bound<'_>, prefix: &str, layers: usize, heads: usize) -> Result<Var> {
    let mut h = x;
    for j in 0..layers {
        let p = AttentionParams::bind(params, &format!("{prefix}.{j}"), heads)?;
        h = imm_layer(tape, h, map, &p)?;
    }
    Ok(h)
}

/// Graph-attention parameters: shared projection `w [D, D]`, per-head
/// attention vectors `attn [h, 2 * D/h]`, output projection `wo [D, D]`.
#[derive(Clone, Copy, Debug)]
pub struct GatParams {
    pub w: Var,
    pub attn: Var,
    pub wo: Var,
    pub heads: usize,
    pub slope: f64,
}

impl GatParams {
    pub const DEFAULT_SLOPE: f64 = 0.2;

    pub fn init_params(store: &mut ParamStore, prefix: &str, d: usize, heads: usize, rng: &mut SeededRng) {
        store.insert_xavier(format!("{prefix}.w"), d, d, 1.0, rng);
        let dh = d / heads.max(1);
        let a = libm::sqrt(6.0 / (2 * dh + 1) as f64);
        let data = (0..heads * 2 * dh).map(|_| rng.uniform(-a, a)).collect();
        store.insert(format!("{prefix}.attn"), DenseArray::from_vec(&[heads, 2 * dh], data).expect("attn shape"));
        store.insert_xavier(format!("{prefix}.wo"), d, d, ParamStore::RESIDUAL_GAIN, rng);
    }

    pub fn bind(params: &Bound<'_>, prefix: &str, heads: usize, slope: f64) -> Result<Self> {
        Ok(Self {
            w: params.sub(prefix, "w")?,
            attn: params.sub(prefix, "attn")?,
            wo: params.sub(prefix, "wo")?,
            heads,
            slope,
        })
    }
}

/// Per-step neighbor mask (`adj > 0`) and edge bias `log(adj + eps)` (zero
/// where masked), both `[T, 1, N, N]`-shaped.
fn edge_bias(adj: &NormalizedAdjacency) -> (Vec<bool>, DenseArray) {
    let v = adj.values();
    let mask: Vec<bool> = v.data().iter().map(|&a| a > 0.0).collect();
    let bias = v.map(|a| if a > 0.0 { libm::log(a + EDGE_BIAS_EPS) } else { 0.0 });
    let (t, n) = (adj.steps(), adj.nodes());
    (mask, bias.reshape(&[t, 1, n, n]).expect("bias shape"))
}

/// Graph attention coefficients `[T, h, N, N]` and the projected features
/// `[T, h, N, D/h]` they weight.
pub fn gat_coefficients(tape: &mut Tape, x: Var, adj: &NormalizedAdjacency, p: &GatParams) -> Result<(Var, Var)> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[0] != adj.steps() || s[1] != adj.nodes() {
        return Err(Error::Shape {
            op: "gat",
            expected: vec![adj.steps(), adj.nodes(), s.last().copied().unwrap_or(0)],
            got: s,
        });
    }
    let (t, n, d) = (s[0], s[1], s[2]);
    let h = p.heads;
    let wx = tape.matmul(x, p.w)?;
    let wx = split_heads(tape, wx, h)?; // [T, h, N, dh]
    let dh = d / h;
    let a_src = tape.slice(p.attn, 1, 0, dh)?;
    let a_dst = tape.slice(p.attn, 1, dh, dh)?;
    let a_src = tape.reshape(a_src, &[h, 1, dh])?;
    let a_dst = tape.reshape(a_dst, &[h, 1, dh])?;
    let src = tape.mul(wx, a_src)?;
    let src = tape.sum_axis(src, 3)?; // [T, h, N, 1]
    let dst = tape.mul(wx, a_dst)?;
    let dst = tape.sum_axis(dst, 3)?;
    let dst = tape.reshape(dst, &[t, h, 1, n])?;
    let e = tape.add(src, dst)?;
    let e = tape.leaky_relu(e, p.slope);
    let (mask, bias) = edge_bias(adj);
    let bias = tape.constant(bias);
    let e = tape.add(e, bias)?;
    let mut full_mask = Vec::with_capacity(t * h * n * n);
    for ti in 0..t {
        let step = &mask[ti * n * n..(ti + 1) * n * n];
        for _ in 0..h {
            full_mask.extend_from_slice(step);
        }
    }
    let coeff = tape.masked_softmax(e, &full_mask)?;
    Ok((coeff, wx))
}

/// One graph-attention layer over the per-step adjacency: `[T, N, D] -> [T, N, D]`.
pub fn gat_layer(tape: &mut Tape, x: Var, adj: &NormalizedAdjacency, p: &GatParams) -> Result<Var> {
    let (coeff, wx) = gat_coefficients(tape, x, adj, p)?;
    let agg = tape.matmul(coeff, wx)?;
    let agg = merge_heads(tape, agg)?;
    tape.matmul(agg, p.wo)
}

/// `K2` graph-attention layers `{prefix}.{j}`, each followed by a residual add.
pub fn smm_forward(tape: &mut Tape, x: Var, adj: &NormalizedAdjacency, params: &Bound<'_>, prefix: &str, layers: usize, heads: usize, slope: f64) -> Result<Var> {
    let mut h = x;
    for j in 0..layers {
        let p = GatParams::bind(params, &format!("{prefix}.{j}"), heads, slope)?;
        let g = gat_layer(tape, h, adj, &p)?;
        h = tape.add(g, h)?;
    }
    Ok(h)
}
