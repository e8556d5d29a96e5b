//! Normalisation and history/target window pairs.

use stmformer_core::sim::FeatureSchema;
use stmformer_core::DenseArray;

use crate::bundle::DatasetBundle;
use crate::error::{HarnessError, Result};
use crate::split::{Part, SplitSpec};

/// Per-feature min-max statistics of the train split, taken after `log1p`
/// on network features.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizerState {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    /// `log1p` applied before scaling.
    pub log1p: Vec<bool>,
}

impl NormalizerState {
    /// Statistics over `values` laid out as `[.., C]`.
    pub fn fit(values: &[f64], schema: &FeatureSchema) -> Result<Self> {
        let c = schema.len();
        if values.is_empty() {
            return Err(HarnessError::EmptySplit("train"));
        }
        let log1p: Vec<bool> = (0..c).map(|f| schema.is_network(f)).collect();
        let mut min = vec![f64::INFINITY; c];
        let mut max = vec![f64::NEG_INFINITY; c];
        for row in values.chunks_exact(c) {
            for (f, &v) in row.iter().enumerate() {
                let v = forward_log(v, log1p[f], &schema.names()[f])?;
                min[f] = min[f].min(v);
                max[f] = max[f].max(v);
            }
        }
        Ok(Self { min, max, log1p })
    }

    pub fn features(&self) -> usize {
        self.min.len()
    }

    /// `[.., C]` values to the `[0, 1]` training scale. Features with
    /// `max == min` map to 0.
    pub fn normalize(&self, values: &[f64], schema: &FeatureSchema) -> Result<Vec<f64>> {
        let c = self.features();
        let mut out = Vec::with_capacity(values.len());
        for row in values.chunks_exact(c) {
            for (f, &v) in row.iter().enumerate() {
                let v = forward_log(v, self.log1p[f], &schema.names()[f])?;
                let span = self.max[f] - self.min[f];
                out.push(if span > 0.0 { (v - self.min[f]) / span } else { 0.0 });
            }
        }
        Ok(out)
    }

    pub fn denormalize(&self, values: &[f64]) -> Vec<f64> {
        let c = self.features();
        let mut out = Vec::with_capacity(values.len());
        for row in values.chunks_exact(c) {
            for (f, &v) in row.iter().enumerate() {
                let v = v * (self.max[f] - self.min[f]) + self.min[f];
                out.push(if self.log1p[f] { v.exp_m1() } else { v });
            }
        }
        out
    }
}

fn forward_log(v: f64, log: bool, name: &str) -> Result<f64> {
    if !log {
        return Ok(v);
    }
    if v < 0.0 {
        return Err(HarnessError::NegativeNetworkValue {
            feature: name.to_string(),
            value: v,
        });
    }
    Ok(v.ln_1p())
}

/// One supervised example on the normalised scale.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowPair {
    /// Index of the source sample in the bundle.
    pub sample: usize,
    /// `[T, N, C]`.
    pub history: DenseArray,
    /// Raw adjacency over the history span `[T, N, N]`.
    pub adjacency: Option<DenseArray>,
    /// The following `T` steps, `[T, N, C]`.
    pub target: DenseArray,
}

/// Splits a `steps x N x C` sample (and its adjacency) into history (first
/// `t` steps) and target (next `t` steps).
pub fn window_pairs(
    sample: usize,
    states: &[f64],
    adjacency: Option<&[f64]>,
    t: usize,
    n: usize,
    c: usize,
) -> Result<Vec<WindowPair>> {
    let steps = states.len() / (n * c);
    if steps < 2 * t {
        return Err(HarnessError::ShortSample { len: steps, window: t });
    }
    let block = t * n * c;
    let history = DenseArray::from_vec(&[t, n, c], states[..block].to_vec())?;
    let target = DenseArray::from_vec(&[t, n, c], states[block..2 * block].to_vec())?;
    let adjacency = adjacency
        .map(|a| DenseArray::from_vec(&[t, n, n], a[..t * n * n].to_vec()))
        .transpose()?;
    Ok(vec![WindowPair {
        sample,
        history,
        adjacency,
        target,
    }])
}

/// A bundle normalised with train statistics and cut into window pairs.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub normalizer: NormalizerState,
    pub split: SplitSpec,
    pub train: Vec<WindowPair>,
    pub val: Vec<WindowPair>,
    pub test: Vec<WindowPair>,
}

impl Prepared {
    pub fn part(&self, part: Part) -> &[WindowPair] {
        match part {
            Part::Train => &self.train,
            Part::Val => &self.val,
            Part::Test => &self.test,
        }
    }
}

/// Normalises every sample with statistics of the train samples only.
pub fn preprocess(bundle: &DatasetBundle) -> Result<Prepared> {
    let split = bundle.split();
    if split.train.is_empty() {
        return Err(HarnessError::EmptySplit("train"));
    }
    let cfg = &bundle.config;
    let per = bundle.sample_len() * cfg.n * cfg.c;
    let train_values = &bundle.states[split.train.start * per..split.train.end * per];
    let normalizer = NormalizerState::fit(train_values, &bundle.schema)?;
    let pairs = |part: Part| -> Result<Vec<WindowPair>> {
        let mut out = Vec::new();
        for i in split.get(part) {
            let x = normalizer.normalize(bundle.sample_states(i), &bundle.schema)?;
            out.extend(window_pairs(i, &x, bundle.sample_adjacency(i), cfg.t, cfg.n, cfg.c)?);
        }
        Ok(out)
    };
    Ok(Prepared {
        train: pairs(Part::Train)?,
        val: pairs(Part::Val)?,
        test: pairs(Part::Test)?,
        normalizer,
        split,
    })
}
