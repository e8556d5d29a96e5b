//! Temporal message module: a period-aware convolution branch and a global
//! patch attention branch, mixed by a random gate.

pub mod pca;
pub mod prf;
pub mod timesblock;

use alloc::format;
use alloc::vec::Vec;

use crate::array::DenseArray;
use crate::error::{Error, Result};
use crate::graph::NormalizedAdjacency;
use crate::params::{Bound, ParamStore};
use crate::rng::SeededRng;
use crate::tape::{Tape, Var};

pub use pca::{build_global_st_adjacency, patch_time, pca_forward, GlobalSTAdjacency, PcaParams};
pub use prf::{gumbel_kernelized_attention, implied_attention, kernelized_attention, prf_map, GumbelNoise, PrfMap};
pub use timesblock::{node_degree_weights, select_periods, timesblock_forward, PeriodSet, TimesBlockParams};

/// Eval gate value.
pub const EVAL_GATE: f64 = 0.5;

/// Training draws the gate and Gumbel noise; evaluation uses `alpha = 0.5`
/// and no noise, so it consumes no randomness.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-layer settings shared by every TMM layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TmmConfig {
    pub k_freq: usize,
    pub patch: usize,
    pub samples: usize,
    /// `false` replaces the TimesBlock branch with its input.
    pub timesblock: bool,
    /// `false` replaces the PCA branch with its input.
    pub pca: bool,
}

/// Gate `alpha` of extent `[T, N, 1]` with entries in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixGate(DenseArray);

impl MixGate {
    pub fn sample(t: usize, n: usize, rng: &mut SeededRng) -> Self {
        Self(DenseArray::from_fn(&[t, n, 1], |_| rng.uniform01()))
    }

    pub fn fixed(t: usize, n: usize, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::config(format!("gate value {alpha} outside [0, 1]")));
        }
        Ok(Self(DenseArray::full(&[t, n, 1], alpha)))
    }

    pub fn values(&self) -> &DenseArray {
        &self.0
    }
}

pub fn init_tmm_params(store: &mut ParamStore, prefix: &str, layers: usize, d: usize, tokens: usize, rng: &mut SeededRng) {
    for j in 0..layers {
        TimesBlockParams::init_params(store, &format!("{prefix}.{j}.tb"), d, rng);
        PcaParams::init_params(store, &format!("{prefix}.{j}.pca"), d, tokens, rng);
    }
}

/// One layer: `alpha * TB(x) + (1 - alpha) * PCA(x)`.
#[allow(clippy::too_many_arguments)]
pub fn tmm_layer(
    tape: &mut Tape,
    x: Var,
    adj: &NormalizedAdjacency,
    tb: &TimesBlockParams,
    pca: &PcaParams,
    map: &PrfMap,
    cfg: &TmmConfig,
    gate: &MixGate,
    noise: GumbelNoise<'_>,
) -> Result<Var> {
    let tb_out = if cfg.timesblock {
        timesblock_forward(tape, x, adj, tb, cfg.k_freq)?
    } else {
        x
    };
    let pca_out = if cfg.pca {
        pca_forward(tape, x, adj, map, pca, cfg.patch, cfg.samples, noise)?
    } else {
        x
    };
    let a = tape.constant(gate.values().clone());
    let b = tape.constant(gate.values().map(|v| 1.0 - v));
    let l = tape.mul(a, tb_out)?;
    let r = tape.mul(b, pca_out)?;
    tape.add(l, r)
}

/// `maps.len()` stacked layers `{prefix}.{j}`. Training draws, per layer and
/// in this order, the gate (`T * N` uniforms) then the PCA Gumbel noise.
#[allow(clippy::too_many_arguments)]
pub fn tmm_forward(
    tape: &mut Tape,
    x: Var,
    adj: &NormalizedAdjacency,
    params: &Bound<'_>,
    prefix: &str,
    maps: &[PrfMap],
    cfg: &TmmConfig,
    mode: Mode,
    rng: &mut SeededRng,
) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (t, n) = (s[0], s[1]);
    let mut h = x;
    for (j, map) in maps.iter().enumerate() {
        let tb = TimesBlockParams::bind(params, &format!("{prefix}.{j}.tb"))?;
        let pca = PcaParams::bind(params, &format!("{prefix}.{j}.pca"))?;
        h = match mode {
            Mode::Train => {
                let gate = MixGate::sample(t, n, rng);
                tmm_layer(tape, h, adj, &tb, &pca, map, cfg, &gate, GumbelNoise::Sample(rng))?
            }
            Mode::Eval => {
                let gate = MixGate::fixed(t, n, EVAL_GATE)?;
                tmm_layer(tape, h, adj, &tb, &pca, map, cfg, &gate, GumbelNoise::Zero)?
            }
        };
    }
    Ok(h)
}

/// One PRF map per layer, each `m x d` with temperature `tau`.
pub fn sample_prf_maps(layers: usize, m: usize, d: usize, tau: f64, rng: &mut SeededRng) -> Result<Vec<PrfMap>> {
    (0..layers).map(|_| PrfMap::sample(m, d, tau, rng)).collect()
}
