//! Patch cross attention: kernelized attention over every (patch, node)
//! token jointly, refined by the global spatio-temporal adjacency.

use alloc::format;

use crate::array::DenseArray;
use crate::decomp::time_linear;
use crate::error::{Error, Result};
use crate::graph::NormalizedAdjacency;
use crate::params::{Bound, ParamStore};
use crate::rng::SeededRng;
use crate::tape::{Tape, Var};

use super::prf::{gumbel_kernelized_attention, GumbelNoise, PrfMap};

/// Variance floor of the row standardization of `A_ST`.
pub const LN_EPS: f64 = 1e-5;

fn patches(t: usize, s: usize) -> Result<usize> {
    if s == 0 || !t.is_multiple_of(s) {
        return Err(Error::Indivisible { len: t, by: s });
    }
    Ok(t / s)
}

/// `[P, T]` matrix averaging each block of `s` consecutive steps.
pub fn patch_mean_matrix(t: usize, s: usize) -> Result<DenseArray> {
    let p = patches(t, s)?;
    let w = 1.0 / s as f64;
    Ok(DenseArray::from_fn(&[p, t], |i| if i[1] / s == i[0] { w } else { 0.0 }))
}

/// `[T, P]` matrix repeating each patch `s` times.
pub fn patch_repeat_matrix(t: usize, s: usize) -> Result<DenseArray> {
    let p = patches(t, s)?;
    Ok(DenseArray::from_fn(&[t, p], |i| if i[0] / s == i[1] { 1.0 } else { 0.0 }))
}

/// Non-overlapping window mean along time: `[T, ...] -> [T / s, ...]`.
pub fn patch_time(tape: &mut Tape, x: Var, s: usize) -> Result<Var> {
    let t = tape.shape(x)[0];
    let m = tape.constant(patch_mean_matrix(t, s)?);
    time_linear(tape, m, x)
}

/// `(P*N) x (P*N)` block-tridiagonal matrix: patch-mean adjacency on the
/// diagonal blocks, identity on the first off-diagonal blocks, zero elsewhere.
/// Token `b * N + n` is node `n` in patch `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalSTAdjacency {
    values: DenseArray,
    nodes: usize,
}

impl GlobalSTAdjacency {
    pub fn values(&self) -> &DenseArray {
        &self.values
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn patches(&self) -> usize {
        self.values.shape()[0] / self.nodes
    }

    /// Block `(row, col)` as an `N x N` array.
    pub fn block(&self, row: usize, col: usize) -> DenseArray {
        let n = self.nodes;
        DenseArray::from_fn(&[n, n], |i| self.values.get(&[row * n + i[0], col * n + i[1]]))
    }

    /// Rows standardized to mean 0 and unit variance.
    pub fn standardized(&self) -> DenseArray {
        let k = self.values.shape()[0];
        let mut out = self.values.clone();
        for row in out.data_mut().chunks_mut(k) {
            let mean = row.iter().sum::<f64>() / k as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k as f64;
            let inv = 1.0 / libm::sqrt(var + LN_EPS);
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        out
    }
}

pub fn build_global_st_adjacency(adj: &NormalizedAdjacency, s: usize) -> Result<GlobalSTAdjacency> {
    let (t, n) = (adj.steps(), adj.nodes());
    let p = patches(t, s)?;
    let a = adj.values();
    let mut m = DenseArray::zeros(&[p * n, p * n]);
    for b in 0..p {
        for u in 0..n {
            for v in 0..n {
                let mean = (b * s..(b + 1) * s).map(|ti| a.get(&[ti, u, v])).sum::<f64>() / s as f64;
                m.set(&[b * n + u, b * n + v], mean);
            }
            if b + 1 < p {
                m.set(&[b * n + u, (b + 1) * n + u], 1.0);
                m.set(&[(b + 1) * n + u, b * n + u], 1.0);
            }
        }
    }
    Ok(GlobalSTAdjacency { values: m, nodes: n })
}

/// Projections `wq, wk, wv, wo [D, D]` and the affine `gain, bias [P*N]` of
/// the standardized `A_ST`.
#[derive(Clone, Copy, Debug)]
pub struct PcaParams {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub gain: Var,
    pub bias: Var,
}

impl PcaParams {
    pub fn init_params(store: &mut ParamStore, prefix: &str, d: usize, tokens: usize, rng: &mut SeededRng) {
        for w in ["wq", "wk", "wv"] {
            store.insert_xavier(format!("{prefix}.{w}"), d, d, 1.0, rng);
        }
        store.insert_xavier(format!("{prefix}.wo"), d, d, ParamStore::RESIDUAL_GAIN, rng);
        store.insert(format!("{prefix}.ln_gain"), DenseArray::ones(&[tokens]));
        store.insert(format!("{prefix}.ln_bias"), DenseArray::zeros(&[tokens]));
    }

    pub fn bind(params: &Bound<'_>, prefix: &str) -> Result<Self> {
        Ok(Self {
            wq: params.sub(prefix, "wq")?,
            wk: params.sub(prefix, "wk")?,
            wv: params.sub(prefix, "wv")?,
            wo: params.sub(prefix, "wo")?,
            gain: params.sub(prefix, "ln_gain")?,
            bias: params.sub(prefix, "ln_bias")?,
        })
    }
}

/// Output of [`pca_forward`] before the residual, and the full result.
pub struct PcaOutput {
    pub message: Var,
    pub out: Var,
}

/// PCA over `x [T, N, D]`: patch means, joint Gumbel kernel attention over
/// all `P*N` tokens, refinement by the affine-standardized `A_ST`, output
/// projection, piecewise-constant restoration to `T` steps, residual add.
#[allow(clippy::too_many_arguments)]
pub fn pca_forward(
    tape: &mut Tape,
    x: Var,
    adj: &NormalizedAdjacency,
    map: &PrfMap,
    p: &PcaParams,
    s: usize,
    samples: usize,
    noise: GumbelNoise<'_>,
) -> Result<Var> {
    Ok(pca_parts(tape, x, adj, map, p, s, samples, noise)?.out)
}

#[allow(clippy::too_many_arguments)]
pub fn pca_parts(
    tape: &mut Tape,
    x: Var,
    adj: &NormalizedAdjacency,
    map: &PrfMap,
    p: &PcaParams,
    s: usize,
    samples: usize,
    noise: GumbelNoise<'_>,
) -> Result<PcaOutput> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 || shape[0] != adj.steps() || shape[1] != adj.nodes() {
        return Err(Error::Shape {
            op: "pca",
            expected: alloc::vec![adj.steps(), adj.nodes(), shape.last().copied().unwrap_or(0)],
            got: shape,
        });
    }
    let (t, n, d) = (shape[0], shape[1], shape[2]);
    let np = patches(t, s)?;
    let tokens = tape.shape(p.gain)[0];
    if tokens != np * n {
        return Err(Error::Shape {
            op: "pca",
            expected: alloc::vec![np * n],
            got: alloc::vec![tokens],
        });
    }
    let xp = patch_time(tape, x, s)?;
    let flat = tape.reshape(xp, &[np * n, d])?;
    let q = tape.matmul(flat, p.wq)?;
    let k = tape.matmul(flat, p.wk)?;
    let v = tape.matmul(flat, p.wv)?;
    let z = gumbel_kernelized_attention(tape, q, k, v, map, samples, noise)?;

    let ast = build_global_st_adjacency(adj, s)?;
    let std = tape.constant(ast.standardized());
    let a = tape.mul(std, p.gain)?;
    let a = tape.add(a, p.bias)?;
    let z = tape.matmul(a, z)?;
    let z = tape.matmul(z, p.wo)?;
    let z = tape.reshape(z, &[np, n, d])?;
    let rep = tape.constant(patch_repeat_matrix(t, s)?);
    let message = time_linear(tape, rep, z)?;
    let out = tape.add(message, x)?;
    Ok(PcaOutput { message, out })
}
