//! Multi-filter seasonal/trend decomposition, value embedding and the
//! length-preserving one-stride patch.
//!
//! All temporal filters act along axis 0 (time) with replicate padding at
//! the sequence ends, so they are linear maps `x -> M x` with a constant
//! `T x T` matrix `M`. That is how they are recorded on the tape.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::array::DenseArray;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::rng::SeededRng;
use crate::tape::{Tape, Var};

pub const DEFAULT_KERNELS: [usize; 3] = [3, 7, 15];

/// Moving-average kernel lengths mixed by learnable softmax weights.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KernelBank {
    lengths: Vec<usize>,
}

impl KernelBank {
    pub fn new(lengths: &[usize]) -> Result<Self> {
        if lengths.is_empty() {
            return Err(Error::config("kernel bank must not be empty"));
        }
        if let Some(&k) = lengths.iter().find(|&&k| k == 0 || k % 2 == 0) {
            return Err(Error::EvenKernel(k));
        }
        Ok(Self {
            lengths: lengths.to_vec(),
        })
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn max_half_width(&self) -> usize {
        self.lengths.iter().map(|k| k / 2).max().unwrap_or(0)
    }

    /// Mixing logits start at zero: a uniform mixture.
    pub fn init_params(&self, store: &mut ParamStore, prefix: &str) {
        store.insert(format!("{prefix}.mix"), DenseArray::zeros(&[self.lengths.len()]));
    }
}

impl Default for KernelBank {
    fn default() -> Self {
        Self::new(&DEFAULT_KERNELS).expect("default bank")
    }
}

/// `T x T` matrix of a length-`k` centred moving average with replicate padding.
pub fn averaging_matrix(t: usize, k: usize) -> Result<DenseArray> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(Error::EvenKernel(k));
    }
    let half = (k / 2) as isize;
    let w = 1.0 / k as f64;
    let mut m = DenseArray::zeros(&[t, t]);
    for row in 0..t {
        for off in -half..=half {
            let src = (row as isize + off).clamp(0, t as isize - 1) as usize;
            let v = m.get(&[row, src]);
            m.set(&[row, src], v + w);
        }
    }
    Ok(m)
}

/// Windowed mean along axis 0 with `(k - 1) / 2` replicated steps at both ends.
pub fn moving_average(x: &DenseArray, k: usize) -> Result<DenseArray> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = moving_average_on(&mut tape, xv, k)?;
    Ok(tape.value(out).clone())
}

/// Left-multiplies the time axis of `x` (axis 0) by the constant `m`.
pub(crate) fn time_linear(tape: &mut Tape, m: Var, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let t = shape[0];
    let rest: usize = shape[1..].iter().product();
    let flat = tape.reshape(x, &[t, rest])?;
    let y = tape.matmul(m, flat)?;
    let mut out_shape = shape;
    out_shape[0] = tape.shape(m)[0];
    tape.reshape(y, &out_shape)
}

pub fn moving_average_on(tape: &mut Tape, x: Var, k: usize) -> Result<Var> {
    let t = *tape.shape(x).first().ok_or(Error::InvalidAxis { axis: 0, rank: 0 })?;
    let m = tape.constant(averaging_matrix(t, k)?);
    time_linear(tape, m, x)
}

/// Splits `x` into `(seasonal, trend)` with
/// `trend = sum_i softmax(logits)_i * moving_average(x, k_i)` and
/// `seasonal = x - trend`.
pub fn multi_decomp(tape: &mut Tape, x: Var, bank: &KernelBank, logits: Var) -> Result<(Var, Var)> {
    let t = *tape.shape(x).first().ok_or(Error::InvalidAxis { axis: 0, rank: 0 })?;
    let kn = bank.len();
    if tape.shape(logits) != [kn] {
        return Err(Error::Shape {
            op: "multi_decomp",
            expected: vec![kn],
            got: tape.shape(logits).to_vec(),
        });
    }
    let mats: Vec<DenseArray> = bank
        .lengths()
        .iter()
        .map(|&k| averaging_matrix(t, k))
        .collect::<Result<_>>()?;
    let refs: Vec<&DenseArray> = mats.iter().collect();
    let stacked = DenseArray::concat(&refs, 0)?.reshape(&[kn, t, t])?;
    let stacked = tape.constant(stacked);
    let w = tape.softmax(logits)?;
    let w = tape.reshape(w, &[kn, 1, 1])?;
    let weighted = tape.mul(stacked, w)?;
    let mixed = tape.sum_axis(weighted, 0)?;
    let mixed = tape.reshape(mixed, &[t, t])?;
    let trend = time_linear(tape, mixed, x)?;
    let seasonal = tape.sub(x, trend)?;
    Ok((seasonal, trend))
}

/// Sinusoidal position table `[T, D]`.
pub fn positional_table(t: usize, d: usize) -> DenseArray {
    DenseArray::from_fn(&[t, d], |i| {
        let (pos, j) = (i[0] as f64, i[1]);
        let freq = libm::pow(10_000.0, -((j - j % 2) as f64) / d as f64);
        if j % 2 == 0 {
            libm::sin(pos * freq)
        } else {
            libm::cos(pos * freq)
        }
    })
}

/// Vars of one embedding: `value: [C, D]`, `patch: [p*D, D]`, and the fixed
/// `positional: [T, D]` table.
#[derive(Clone, Copy, Debug)]
pub struct Embedding {
    pub value: Var,
    pub patch: Var,
    pub positional: Var,
    pub patch_len: usize,
}

impl Embedding {
    pub fn init_params(store: &mut ParamStore, prefix: &str, c: usize, d: usize, patch_len: usize, rng: &mut SeededRng) {
        store.insert_xavier(format!("{prefix}.value"), c, d, 1.0, rng);
        store.insert_xavier(format!("{prefix}.patch"), patch_len * d, d, 1.0, rng);
    }

    pub fn bind(tape: &mut Tape, params: &Bound<'_>, prefix: &str, t: usize, d: usize, patch_len: usize) -> Result<Self> {
        Ok(Self {
            value: params.sub(prefix, "value")?,
            patch: params.sub(prefix, "patch")?,
            positional: tape.constant(positional_table(t, d)),
            patch_len,
        })
    }
}

/// `x [T, N, C] -> x * value + positional` (positions broadcast over nodes).
pub fn value_embed(tape: &mut Tape, x: Var, emb: &Embedding) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let ws = tape.shape(emb.value).to_vec();
    if xs.len() != 3 || ws.len() != 2 || xs[2] != ws[0] {
        return Err(Error::Shape {
            op: "value_embed",
            expected: vec![0, 0, ws.first().copied().unwrap_or(0)],
            got: xs,
        });
    }
    let d = ws[1];
    let proj = tape.matmul(x, emb.value)?;
    let pos = tape.reshape(emb.positional, &[xs[0], 1, d])?;
    tape.add(proj, pos)
}

/// Shift matrix selecting step `max(t - lag, 0)` for every `t`.
fn lag_matrix(t: usize, lag: usize) -> DenseArray {
    DenseArray::from_fn(&[t, t], |i| if i[1] == i[0].saturating_sub(lag) { 1.0 } else { 0.0 })
}

/// Re-encodes each step from its `p` most recent steps (oldest first, start
/// replicated): `out_t = [x_{t-p+1} | ... | x_t] * patch`. Keeps length `T`.
pub fn stride1_patch(tape: &mut Tape, x: Var, emb: &Embedding) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let p = emb.patch_len;
    let t = xs[0];
    if p == 0 {
        return Err(Error::config("patch length must be at least 1"));
    }
    if p > t {
        return Err(Error::PatchTooLong { patch: p, len: t });
    }
    let mut frames = Vec::with_capacity(p);
    for j in 0..p {
        let lag = p - 1 - j;
        if lag == 0 {
            frames.push(x);
        } else {
            let m = tape.constant(lag_matrix(t, lag));
            frames.push(time_linear(tape, m, x)?);
        }
    }
    let axis = xs.len() - 1;
    let stacked = if p == 1 { x } else { tape.concat(&frames, axis)? };
    tape.matmul(stacked, emb.patch)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(v: &[f64]) -> DenseArray {
        DenseArray::from_vec(&[v.len(), 1, 1], v.to_vec()).unwrap()
    }

    #[test]
    fn moving_average_cases() {
        let c = DenseArray::full(&[6, 2, 3], 2.0);
        assert!(moving_average(&c, 3).unwrap().data().iter().all(|&v| (v - 2.0).abs() < 1e-15));

        let m = moving_average(&series(&[1.0, 2.0, 3.0, 4.0, 5.0]), 3).unwrap();
        let want = [4.0 / 3.0, 2.0, 3.0, 4.0, 14.0 / 3.0];
        for (a, b) in m.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }

        let x = series(&[0.3, -1.0, 7.0]);
        assert_eq!(moving_average(&x, 1).unwrap(), x);
        assert!(matches!(moving_average(&x, 4), Err(Error::EvenKernel(4))));
    }

    #[test]
    fn bank_rejects_even() {
        assert!(KernelBank::new(&[3, 4]).is_err());
        assert!(KernelBank::new(&[]).is_err());
    }

    #[test]
    fn saturated_identity_kernel_leaves_no_seasonal() {
        let bank = KernelBank::new(&[1, 5]).unwrap();
        let x = DenseArray::from_fn(&[9, 2, 2], |i| libm::sin(i[0] as f64 + i[1] as f64) * 3.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let logits = tape.constant(DenseArray::vector(&[50.0, 0.0]));
        let (s, _) = multi_decomp(&mut tape, xv, &bank, logits).unwrap();
        assert!(tape.value(s).data().iter().all(|v| v.abs() <= 1e-9));
    }

    #[test]
    fn patch_rejects_long_window() {
        let mut tape = Tape::new();
        let x = tape.constant(DenseArray::zeros(&[2, 1, 1]));
        let emb = Embedding {
            value: x,
            patch: tape.constant(DenseArray::zeros(&[3, 1])),
            positional: x,
            patch_len: 3,
        };
        assert!(matches!(
            stride1_patch(&mut tape, x, &emb),
            Err(Error::PatchTooLong { patch: 3, len: 2 })
        ));
    }
}
