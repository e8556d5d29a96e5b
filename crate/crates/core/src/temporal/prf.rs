//! Positive-random-feature kernel attention and its Gumbel-perturbed form.
//!
//! `phi(x) = exp(-|x|^2 / 2) / sqrt(m) * [exp(w_1 . x), ..., exp(w_m . x)]`
//! with `w_i ~ N(0, I_d)`. Attention is evaluated in the factored order
//! `phi(q_u) . (sum_v phi(k_v) v_v^T) / phi(q_u) . (sum_w phi(k_w))`, so no
//! `L x L` matrix is ever formed.
//!
//! Everything runs on log-features. Key columns are rescaled by their
//! log-sum-exp over tokens and each query by its largest combined term.
//! Those shifts cancel exactly in the ratio and are recorded as constants,
//! so values and gradients are those of the plain formula, but nothing
//! overflows even for tiny temperatures.

use alloc::vec;
use alloc::vec::Vec;

use crate::array::DenseArray;
use crate::error::{Error, Result};
use crate::rng::{Dist, SeededRng};
use crate::tape::{Tape, Var};

/// Smallest admissible attention denominator.
pub const MIN_DENOMINATOR: f64 = 1e-30;

/// Random projection rows `w_1..w_m` (each of length `d`) and temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct PrfMap {
    rows: DenseArray,
    tau: f64,
}

impl PrfMap {
    pub fn sample(m: usize, d: usize, tau: f64, rng: &mut SeededRng) -> Result<Self> {
        if m == 0 {
            return Err(Error::config("feature dimension m must be positive"));
        }
        Self::from_rows(rng.sample(Dist::StandardNormal, &[m, d]), tau)
    }

    pub fn from_rows(rows: DenseArray, tau: f64) -> Result<Self> {
        if rows.rank() != 2 {
            return Err(Error::Shape {
                op: "prf_map",
                expected: vec![0, 0],
                got: rows.shape().to_vec(),
            });
        }
        if !(tau > 0.0) {
            return Err(Error::config("temperature must be positive"));
        }
        Ok(Self { rows, tau })
    }

    pub fn features(&self) -> usize {
        self.rows.shape()[0]
    }

    pub fn input_dim(&self) -> usize {
        self.rows.shape()[1]
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn rows(&self) -> &DenseArray {
        &self.rows
    }

    pub fn with_tau(&self, tau: f64) -> Result<Self> {
        Self::from_rows(self.rows.clone(), tau)
    }
}

/// `phi(x)` evaluated literally.
pub fn prf_map(x: &[f64], map: &PrfMap) -> Result<Vec<f64>> {
    let d = map.input_dim();
    if x.len() != d {
        return Err(Error::Shape {
            op: "prf_map",
            expected: vec![d],
            got: vec![x.len()],
        });
    }
    let norm2: f64 = x.iter().map(|v| v * v).sum();
    let lead = libm::exp(-norm2 / 2.0) / libm::sqrt(map.features() as f64);
    Ok(map
        .rows
        .data()
        .chunks(d)
        .map(|w| {
            let dot: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
            lead * libm::exp(dot)
        })
        .collect())
}

/// `log phi(scale * x)` for every row of `x [L, d]`, up to the shared
/// `-ln sqrt(m)` constant: `[L, m]`.
pub fn log_features(tape: &mut Tape, x: Var, map: &PrfMap, scale: f64) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 2 || s[1] != map.input_dim() {
        return Err(Error::Shape {
            op: "prf_features",
            expected: vec![s.first().copied().unwrap_or(0), map.input_dim()],
            got: s,
        });
    }
    let xs = if scale == 1.0 { x } else { tape.scale(x, scale) };
    let wt = tape.constant(map.rows.t()?);
    let proj = tape.matmul(xs, wt)?;
    let sq = tape.mul(xs, xs)?;
    let sq = tape.sum_axis(sq, 1)?;
    let half = tape.scale(sq, 0.5);
    tape.sub(proj, half)
}

fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let mx = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + libm::log(v.map(|x| libm::exp(x - mx)).sum::<f64>())
}

/// Factored attention from query/key log-features `[L, m]` and values
/// `[L, dv]`.
pub fn factored_attention(tape: &mut Tape, log_q: Var, log_k: Var, v: Var) -> Result<Var> {
    let (lq, lk) = (tape.value(log_q).clone(), tape.value(log_k).clone());
    let (l, m) = (lk.shape()[0], lk.shape()[1]);
    let lqn = lq.shape()[0];
    if lq.shape()[1] != m || tape.shape(v)[0] != l {
        return Err(Error::Shape {
            op: "kernel_attention",
            expected: vec![l, m],
            got: lq.shape().to_vec(),
        });
    }
    let col: Vec<f64> = (0..m)
        .map(|i| log_sum_exp((0..l).map(|r| lk.data()[r * m + i])))
        .collect();
    let row_shift: Vec<f64> = (0..lqn)
        .map(|u| {
            (0..m)
                .map(|i| lq.data()[u * m + i] + col[i])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let col_c = tape.constant(DenseArray::from_vec(&[1, m], col)?);
    let row_c = tape.constant(DenseArray::from_vec(&[lqn, 1], row_shift)?);

    let kshift = tape.sub(log_k, col_c)?;
    let psi = tape.exp(kshift)?;
    let qshift = tape.add(log_q, col_c)?;
    let qshift = tape.sub(qshift, row_c)?;
    let phi = tape.exp(qshift)?;

    let psi_t = tape.transpose(psi)?;
    let kv = tape.matmul(psi_t, v)?; // [m, dv]
    let ksum = tape.sum_axis(psi, 0)?; // [1, m]
    let num = tape.matmul(phi, kv)?;
    let den = tape.mul(phi, ksum)?;
    let den = tape.sum_axis(den, 1)?; // [Lq, 1]
    if let Some(&bad) = tape
        .value(den)
        .data()
        .iter()
        .find(|&&d| !(d >= MIN_DENOMINATOR) || !d.is_finite())
    {
        return Err(Error::DegenerateKernel(bad));
    }
    tape.div(num, den)
}

/// Kernelized attention `z_u` for `q, k [L, d]` and `v [L, dv]`.
pub fn kernelized_attention(tape: &mut Tape, q: Var, k: Var, v: Var, map: &PrfMap) -> Result<Var> {
    let lq = log_features(tape, q, map, 1.0)?;
    let lk = log_features(tape, k, map, 1.0)?;
    factored_attention(tape, lq, lk, v)
}

/// Source of the per-key Gumbel perturbation.
pub enum GumbelNoise<'a> {
    /// Fresh `g_v` for every key and repetition.
    Sample(&'a mut SeededRng),
    /// Caller-supplied draws, one `[L]` vector per repetition.
    Fixed(&'a [Vec<f64>]),
    /// `g = 0`.
    Zero,
}

/// Gumbel-perturbed kernel attention: queries and keys are scaled by
/// `1 / sqrt(tau)`, key `v` is weighted by `exp(g_v / tau)`, and the result is
/// averaged over `samples` repetitions. With [`GumbelNoise::Zero`] one pass
/// is evaluated regardless of `samples`.
pub fn gumbel_kernelized_attention(tape: &mut Tape, q: Var, k: Var, v: Var, map: &PrfMap, samples: usize, noise: GumbelNoise<'_>) -> Result<Var> {
    if samples == 0 {
        return Err(Error::config("Gumbel sample count must be at least 1"));
    }
    let tau = map.tau();
    let scale = 1.0 / libm::sqrt(tau);
    let lq = log_features(tape, q, map, scale)?;
    let lk = log_features(tape, k, map, scale)?;
    let l = tape.shape(k)[0];
    let mut noise = noise;
    let reps = match noise {
        GumbelNoise::Zero => 1,
        GumbelNoise::Fixed(d) => d.len().min(samples),
        GumbelNoise::Sample(_) => samples,
    };
    if reps == 0 {
        return Err(Error::config("no Gumbel draws supplied"));
    }
    let mut acc: Option<Var> = None;
    for r in 0..reps {
        let g: Vec<f64> = match &mut noise {
            GumbelNoise::Zero => vec![0.0; l],
            GumbelNoise::Fixed(d) => d[r].clone(),
            GumbelNoise::Sample(rng) => (0..l).map(|_| rng.gumbel()).collect(),
        };
        if g.len() != l {
            return Err(Error::Shape {
                op: "gumbel_attention",
                expected: vec![l],
                got: vec![g.len()],
            });
        }
        let z = if matches!(noise, GumbelNoise::Zero) {
            factored_attention(tape, lq, lk, v)?
        } else {
            let gv = tape.constant(DenseArray::from_vec(&[l, 1], g.iter().map(|x| x / tau).collect())?);
            let lkg = tape.add(lk, gv)?;
            factored_attention(tape, lq, lkg, v)?
        };
        acc = Some(match acc {
            Some(a) => tape.add(a, z)?,
            None => z,
        });
    }
    let acc = acc.expect("at least one repetition");
    Ok(if reps > 1 { tape.scale(acc, 1.0 / reps as f64) } else { acc })
}

/// Dense `[Lq, Lk]` attention rows implied by the kernel features, with
/// optional per-key Gumbel offsets `g` and temperature `tau`:
/// `a_uv ~ phi(q_u / sqrt tau) . phi(k_v / sqrt tau) * exp(g_v / tau)`.
/// Computed pairwise in log space; intended as a reference for the
/// factored evaluation.
pub fn implied_attention(q: &DenseArray, k: &DenseArray, map: &PrfMap, g: Option<&[f64]>) -> Result<DenseArray> {
    let tau = map.tau();
    let scale = 1.0 / libm::sqrt(tau);
    let logf = |x: &DenseArray| -> Result<Vec<Vec<f64>>> {
        let d = x.shape()[1];
        x.data()
            .chunks(d)
            .map(|row| {
                let xs: Vec<f64> = row.iter().map(|v| v * scale).collect();
                let n2: f64 = xs.iter().map(|v| v * v).sum();
                if xs.len() != map.input_dim() {
                    return Err(Error::Shape {
                        op: "implied_attention",
                        expected: vec![map.input_dim()],
                        got: vec![xs.len()],
                    });
                }
                Ok(map
                    .rows
                    .data()
                    .chunks(d)
                    .map(|w| w.iter().zip(&xs).map(|(a, b)| a * b).sum::<f64>() - n2 / 2.0)
                    .collect())
            })
            .collect()
    };
    let fq = logf(q)?;
    let fk = logf(k)?;
    let (lq, lk) = (fq.len(), fk.len());
    let mut out = DenseArray::zeros(&[lq, lk]);
    for (u, qu) in fq.iter().enumerate() {
        let logits: Vec<f64> = fk
            .iter()
            .enumerate()
            .map(|(v, kv)| {
                let s = log_sum_exp(qu.iter().zip(kv).map(|(a, b)| a + b));
                s + g.map_or(0.0, |g| g[v] / tau)
            })
            .collect();
        let z = log_sum_exp(logits.iter().copied());
        for (v, lg) in logits.iter().enumerate() {
            out.set(&[u, v], libm::exp(lg - z));
        }
    }
    Ok(out)
}
