//! Period-aware temporal convolution over the degree-weighted node aggregate.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::array::DenseArray;
use crate::error::{Error, Result};
use crate::fft::rfft_magnitude;
use crate::graph::NormalizedAdjacency;
use crate::params::{Bound, ParamStore};
use crate::rng::SeededRng;
use crate::tape::{Tape, Var};

pub const CONV_KERNEL: usize = 3;

/// Per-step node weights from in-degree plus out-degree of the normalized
/// adjacency, each step normalized to sum to one: `[T, N]`.
pub fn node_degree_weights(adj: &NormalizedAdjacency) -> DenseArray {
    let (t, n) = (adj.steps(), adj.nodes());
    let a = adj.values();
    let mut w = DenseArray::zeros(&[t, n]);
    for ti in 0..t {
        let mut raw = vec![0.0; n];
        for u in 0..n {
            for v in 0..n {
                let x = a.get(&[ti, u, v]);
                raw[u] += x; // out-degree of u
                raw[v] += x; // in-degree of v
            }
        }
        let total: f64 = raw.iter().sum();
        for (ni, r) in raw.iter().enumerate() {
            w.set(&[ti, ni], r / total);
        }
    }
    w
}

/// Dominant nonzero frequencies of a series with their periods and
/// amplitude-softmax weights.
#[derive(Clone, Debug, PartialEq)]
pub struct PeriodSet {
    pub frequencies: Vec<usize>,
    pub periods: Vec<usize>,
    pub weights: Vec<f64>,
}

impl PeriodSet {
    /// Flat `[k, frequencies.., periods.., weights..]` form.
    pub fn encode(&self) -> Vec<f64> {
        let mut v = vec![self.frequencies.len() as f64];
        v.extend(self.frequencies.iter().map(|&f| f as f64));
        v.extend(self.periods.iter().map(|&p| p as f64));
        v.extend_from_slice(&self.weights);
        v
    }

    pub fn decode(v: &[f64]) -> Result<Self> {
        let k = v.first().copied().unwrap_or(0.0) as usize;
        if k == 0 || v.len() != 1 + 3 * k {
            return Err(Error::config("malformed period record"));
        }
        Ok(Self {
            frequencies: v[1..=k].iter().map(|&f| f as usize).collect(),
            periods: v[1 + k..=2 * k].iter().map(|&p| p as usize).collect(),
            weights: v[1 + 2 * k..].to_vec(),
        })
    }
}

/// Picks the `k` strongest nonzero frequencies of `g [T, D]` by spectral
/// magnitude averaged over channels. Ties go to the lower frequency; `k` is
/// clamped to the `T/2` available frequencies.
pub fn select_periods(g: &DenseArray, k: usize) -> Result<PeriodSet> {
    let (t, d) = (g.shape()[0], g.shape()[1]);
    if k == 0 {
        return Err(Error::config("k_freq must be at least 1"));
    }
    let bins = t / 2 + 1;
    let mut amp = vec![0.0; bins];
    let mut col = vec![0.0; t];
    for c in 0..d {
        for (ti, slot) in col.iter_mut().enumerate() {
            *slot = g.get(&[ti, c]);
        }
        for (a, m) in amp.iter_mut().zip(rfft_magnitude(&col)?) {
            *a += m / d as f64;
        }
    }
    let mut order: Vec<usize> = (1..bins).collect();
    order.sort_by(|&a, &b| amp[b].partial_cmp(&amp[a]).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b)));
    let k = k.min(order.len());
    let frequencies: Vec<usize> = order[..k].to_vec();
    let periods = frequencies.iter().map(|&f| t.div_ceil(f)).collect();
    let sel: Vec<f64> = frequencies.iter().map(|&f| amp[f]).collect();
    let mx = sel.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = sel.iter().map(|&a| libm::exp(a - mx)).collect();
    let s: f64 = e.iter().sum();
    Ok(PeriodSet {
        frequencies,
        periods,
        weights: e.iter().map(|v| v / s).collect(),
    })
}

/// Two `3 x 3` convolutions `[3, 3, D, D]` with a GELU between, shared by
/// every period branch.
#[derive(Clone, Copy, Debug)]
pub struct TimesBlockParams {
    pub conv1: Var,
    pub conv2: Var,
}

impl TimesBlockParams {
    pub fn init_params(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut SeededRng) {
        let fan = CONV_KERNEL * CONV_KERNEL * d;
        let a = libm::sqrt(6.0 / (2 * fan) as f64);
        for (name, gain) in [("conv1", 1.0), ("conv2", ParamStore::RESIDUAL_GAIN)] {
            let data = (0..fan * d).map(|_| gain * rng.uniform(-a, a)).collect();
            let k = DenseArray::from_vec(&[CONV_KERNEL, CONV_KERNEL, d, d], data).expect("conv shape");
            store.insert(format!("{prefix}.{name}"), k);
        }
    }

    pub fn bind(params: &Bound<'_>, prefix: &str) -> Result<Self> {
        Ok(Self {
            conv1: params.sub(prefix, "conv1")?,
            conv2: params.sub(prefix, "conv2")?,
        })
    }
}

/// TimesBlock over `x [T, N, D]`:
/// collapse nodes with degree weights, fold the aggregate by each dominant
/// period and convolve in 2-D, mix branches by amplitude weights, then
/// redistribute to nodes (`N * w[t, n]`) and add the residual `x`.
///
/// Period selection and amplitude weights are treated as constants.
pub fn timesblock_forward(tape: &mut Tape, x: Var, adj: &NormalizedAdjacency, p: &TimesBlockParams, k_freq: usize) -> Result<Var> {
    let (out, _) = timesblock_with_periods(tape, x, adj, p, k_freq)?;
    Ok(out)
}

/// [`timesblock_forward`] that also reports the selected [`PeriodSet`].
pub fn timesblock_with_periods(tape: &mut Tape, x: Var, adj: &NormalizedAdjacency, p: &TimesBlockParams, k_freq: usize) -> Result<(Var, PeriodSet)> {
    let s = tape.shape(x).to_vec();
    let (t, n, d) = (s[0], s[1], s[2]);
    if t < 4 {
        return Err(Error::SeriesTooShort { len: t, min: 4 });
    }
    if adj.steps() != t || adj.nodes() != n {
        return Err(Error::Shape {
            op: "timesblock",
            expected: vec![adj.steps(), adj.nodes(), d],
            got: s,
        });
    }
    let w = node_degree_weights(adj);
    let wv = tape.constant(w.reshape(&[t, n, 1])?);
    let weighted = tape.mul(x, wv)?;
    let g = tape.sum_axis(weighted, 1)?;
    let g = tape.reshape(g, &[t, d])?;

    let code = tape.frozen(|tp| Ok(select_periods(tp.value(g), k_freq)?.encode()))?;
    let periods = PeriodSet::decode(&code)?;
    let mut agg: Option<Var> = None;
    for (&period, &weight) in periods.periods.iter().zip(&periods.weights) {
        let rows = t.div_ceil(period);
        let pad = rows * period - t;
        let padded = if pad > 0 {
            let z = tape.constant(DenseArray::zeros(&[pad, d]));
            tape.concat(&[g, z], 0)?
        } else {
            g
        };
        let grid = tape.reshape(padded, &[rows, period, d])?;
        let h = tape.conv2d(grid, p.conv1)?;
        let h = tape.gelu(h);
        let h = tape.conv2d(h, p.conv2)?;
        let h = tape.reshape(h, &[rows * period, d])?;
        let h = tape.slice(h, 0, 0, t)?;
        let h = tape.scale(h, weight);
        agg = Some(match agg {
            Some(a) => tape.add(a, h)?,
            None => h,
        });
    }
    let agg = agg.expect("at least one period");
    let agg = tape.reshape(agg, &[t, 1, d])?;
    let spread = tape.constant(w.map(|v| v * n as f64).reshape(&[t, n, 1])?);
    let back = tape.mul(agg, spread)?;
    Ok((tape.add(back, x)?, periods))
}
