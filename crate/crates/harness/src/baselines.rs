//! Reference forecasters: persistence and a per-feature least-squares map
//! from the `T` history values of a series to its `T` target values.

use nalgebra::{DMatrix, SVD};
use stmformer_core::DenseArray;

use crate::data::{NormalizerState, WindowPair};
use crate::error::{HarnessError, Result};
use crate::metrics::MetricsReport;
use crate::train::report_for;

/// Ridge strength used when the normal equations are rank deficient.
pub const RIDGE: f64 = 1e-6;
/// Singular values below this fraction of the largest count as zero.
const RANK_TOL: f64 = 1e-10;

/// Every step of the forecast repeats the last observed step.
pub fn persistence(pairs: &[WindowPair]) -> Vec<Vec<f64>> {
    pairs
        .iter()
        .map(|w| {
            let s = w.history.shape();
            let per = s[1] * s[2];
            let last = &w.history.data()[(s[0] - 1) * per..];
            last.iter().copied().cycle().take(s[0] * per).collect()
        })
        .collect()
}

/// Per-feature affine map `target = [history, 1] W`, shared across nodes.
#[derive(Clone, Debug)]
pub struct LinearBaseline {
    /// One `(T + 1) x T` matrix per feature.
    pub weights: Vec<DMatrix<f64>>,
    /// Features whose fit fell back to ridge regression.
    pub ridge_features: Vec<usize>,
}

/// Time series of one (node, feature) of a `[T, N, C]` array.
fn series(a: &DenseArray, node: usize, feature: usize) -> impl Iterator<Item = f64> + '_ {
    let s = a.shape();
    let (t, n, c) = (s[0], s[1], s[2]);
    (0..t).map(move |ti| a.data()[(ti * n + node) * c + feature])
}

impl LinearBaseline {
    pub fn fit(train: &[WindowPair]) -> Result<Self> {
        let first = train.first().ok_or(HarnessError::EmptySplit("train"))?;
        let s = first.history.shape();
        let (t, n, c) = (s[0], s[1], s[2]);
        let rows = train.len() * n;
        let mut weights = Vec::with_capacity(c);
        let mut ridge_features = Vec::new();
        for f in 0..c {
            let mut x = DMatrix::<f64>::zeros(rows, t + 1);
            let mut y = DMatrix::<f64>::zeros(rows, t);
            for (wi, w) in train.iter().enumerate() {
                for u in 0..n {
                    let r = wi * n + u;
                    for (j, v) in series(&w.history, u, f).enumerate() {
                        x[(r, j)] = v;
                    }
                    x[(r, t)] = 1.0;
                    for (j, v) in series(&w.target, u, f).enumerate() {
                        y[(r, j)] = v;
                    }
                }
            }
            let xtx = x.transpose() * &x;
            let xty = x.transpose() * &y;
            let svd = SVD::new(xtx.clone(), false, false);
            let smax = svd.singular_values.max();
            let smin = svd.singular_values.min();
            let full_rank = smax > 0.0 && smin > RANK_TOL * smax;
            let w = if full_rank {
                xtx.clone().cholesky().map(|ch| ch.solve(&xty))
            } else {
                None
            };
            let w = match w {
                Some(w) => w,
                None => {
                    ridge_features.push(f);
                    let reg = xtx + DMatrix::<f64>::identity(t + 1, t + 1) * RIDGE;
                    reg.cholesky()
                        .ok_or_else(|| HarnessError::config("ridge system not positive definite"))?
                        .solve(&xty)
                }
            };
            weights.push(w);
        }
        Ok(Self { weights, ridge_features })
    }

    pub fn predict(&self, pairs: &[WindowPair]) -> Vec<Vec<f64>> {
        pairs
            .iter()
            .map(|w| {
                let s = w.history.shape();
                let (t, n, c) = (s[0], s[1], s[2]);
                let mut out = vec![0.0; t * n * c];
                for (f, wf) in self.weights.iter().enumerate() {
                    for u in 0..n {
                        let hist: Vec<f64> = series(&w.history, u, f).collect();
                        for j in 0..t {
                            let mut v = wf[(t, j)];
                            for (i, x) in hist.iter().enumerate() {
                                v += x * wf[(i, j)];
                            }
                            out[(j * n + u) * c + f] = v;
                        }
                    }
                }
                out
            })
            .collect()
    }

    pub fn note(&self) -> String {
        if self.ridge_features.is_empty() {
            String::new()
        } else {
            let list: Vec<String> = self.ridge_features.iter().map(|f| f.to_string()).collect();
            format!("ridge {RIDGE:e} fallback on features {}", list.join(" "))
        }
    }
}

/// Named baseline reports on `eval`, the linear map fitted on `train`.
pub fn baselines(
    train: &[WindowPair],
    eval: &[WindowPair],
    normalizer: Option<&NormalizerState>,
) -> Result<Vec<(&'static str, MetricsReport)>> {
    let first = eval.first().ok_or(HarnessError::EmptySplit("evaluation"))?;
    let t = first.history.shape()[0];
    let persist = report_for(&persistence(eval), eval, t, normalizer);
    let lin = LinearBaseline::fit(train)?;
    let mut linear = report_for(&lin.predict(eval), eval, t, normalizer);
    linear.note = lin.note();
    Ok(vec![("persistence", persist), ("linear", linear)])
}
