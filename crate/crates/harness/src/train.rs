//! Adam training with linear warmup and gradient accumulation, and
//! evaluation of a trained model on a split.

use stmformer_core::graph::DeploymentMap;
use stmformer_core::model::{Mode, Stmformer, WindowInput};
use stmformer_core::{DenseArray, SeededRng, Tape};

use crate::data::{NormalizerState, WindowPair};
use crate::error::{HarnessError, Result};
use crate::metrics::{Metrics, MetricsReport};

/// Stream of the train-set shuffles.
pub const SHUFFLE_STREAM: u64 = 4;
/// Stream of the training-mode sampling (gates, Gumbel noise, key samples).
pub const NOISE_STREAM: u64 = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub updates: usize,
    pub micro_batch: usize,
    /// Micro-batches per update.
    pub accumulation: usize,
    pub lr: f64,
    /// Updates over which the learning rate ramps linearly to `lr`.
    pub warmup: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            updates: 500,
            micro_batch: 2,
            accumulation: 4,
            lr: 1e-3,
            warmup: 100,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.micro_batch == 0 || self.accumulation == 0 {
            return Err(HarnessError::config("micro_batch and accumulation must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(HarnessError::config(format!("learning rate {} must be finite and nonnegative", self.lr)));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0) {
            return Err(HarnessError::config("Adam betas must lie in [0, 1) and eps be positive"));
        }
        Ok(())
    }

    /// Learning rate of 1-based update `u`.
    pub fn lr_at(&self, u: usize) -> f64 {
        if self.warmup == 0 {
            self.lr
        } else {
            self.lr * (u as f64 / self.warmup as f64).min(1.0)
        }
    }
}

/// First and second moment estimates, one pair per parameter array.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u32,
}

impl Adam {
    pub fn new(params: &[DenseArray]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut [DenseArray], grads: &[DenseArray], lr: f64, cfg: &TrainConfig) {
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(&mut self.v)) {
            for (((x, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let step = lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
                if step != 0.0 {
                    *x -= step;
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainStatus {
    Completed,
    /// The loss of this 1-based update was not finite; the model holds the
    /// parameters from before it.
    Diverged { update: usize },
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Stmformer,
    /// Mean micro-batch loss of each completed update.
    pub losses: Vec<f64>,
    pub status: TrainStatus,
}

/// Samples the train set in shuffled epochs, reshuffling on wrap-around.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
    rng: SeededRng,
}

impl Sampler {
    fn new(len: usize, seed: u64) -> Self {
        let mut s = Self {
            order: (0..len).collect(),
            pos: 0,
            rng: SeededRng::with_stream(seed, SHUFFLE_STREAM),
        };
        s.rng.shuffle(&mut s.order);
        s
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Mean squared error of one micro-batch and its parameter gradients.
pub fn batch_gradients(
    model: &Stmformer,
    batch: &[&WindowPair],
    deployment: &DeploymentMap,
    rng: &mut SeededRng,
) -> Result<(f64, Vec<DenseArray>)> {
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape);
    let mut total = None;
    for w in batch {
        let input = WindowInput {
            history: &w.history,
            adjacency: w.adjacency.as_ref(),
            deployment,
        };
        let y = model.forward(&mut tape, &bound, &input, Mode::Train, rng)?;
        let target = tape.constant(w.target.clone());
        let e = tape.sub(y, target)?;
        let sq = tape.mul(e, e)?;
        let l = tape.mean_all(sq);
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    let total = total.ok_or(HarnessError::EmptySplit("train"))?;
    let loss = tape.scale(total, 1.0 / batch.len() as f64);
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    Ok((value, bound.gradients(&grads)))
}

/// Trains `model` on `train`. All randomness derives from the model seed.
pub fn train(
    mut model: Stmformer,
    train: &[WindowPair],
    deployment: &DeploymentMap,
    cfg: &TrainConfig,
    mut on_update: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(HarnessError::EmptySplit("train"));
    }
    let seed = model.config().seed;
    let mut sampler = Sampler::new(train.len(), seed);
    let mut rng = SeededRng::with_stream(seed, NOISE_STREAM);
    let mut adam = Adam::new(model.params().values());
    let mut losses = Vec::with_capacity(cfg.updates);
    for u in 1..=cfg.updates {
        let mut acc: Option<Vec<DenseArray>> = None;
        let mut loss = 0.0;
        for _ in 0..cfg.accumulation {
            let batch: Vec<&WindowPair> = (0..cfg.micro_batch).map(|_| &train[sampler.next()]).collect();
            let (l, g) = batch_gradients(&model, &batch, deployment, &mut rng)?;
            loss += l;
            acc = Some(match acc {
                None => g,
                Some(mut a) => {
                    for (a, g) in a.iter_mut().zip(&g) {
                        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                            *x += y;
                        }
                    }
                    a
                }
            });
        }
        let g_scale = 1.0 / cfg.accumulation as f64;
        let loss = loss * g_scale;
        let mut grads = acc.expect("accumulation >= 1");
        if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
            return Ok(TrainOutcome {
                model,
                losses,
                status: TrainStatus::Diverged { update: u },
            });
        }
        for g in &mut grads {
            for x in g.data_mut() {
                *x *= g_scale;
            }
        }
        adam.update(model.params_mut().values_mut(), &grads, cfg.lr_at(u), cfg);
        losses.push(loss);
        on_update(u, loss);
    }
    Ok(TrainOutcome {
        model,
        losses,
        status: TrainStatus::Completed,
    })
}

/// Eval-mode forecasts for `pairs`, each flattened `[T, N, C]`.
pub fn predict_all(model: &Stmformer, pairs: &[WindowPair], deployment: &DeploymentMap) -> Result<Vec<Vec<f64>>> {
    pairs
        .iter()
        .map(|w| {
            let input = WindowInput {
                history: &w.history,
                adjacency: w.adjacency.as_ref(),
                deployment,
            };
            Ok(model.predict(&input)?.into_data())
        })
        .collect()
}

/// Metrics of `model` on `pairs`; raw-scale metrics when `normalizer` is given.
pub fn evaluate(
    model: &Stmformer,
    pairs: &[WindowPair],
    deployment: &DeploymentMap,
    normalizer: Option<&NormalizerState>,
) -> Result<MetricsReport> {
    let pred = predict_all(model, pairs, deployment)?;
    Ok(report_for(&pred, pairs, model.config().t, normalizer))
}

/// Metrics of arbitrary forecasts against the targets of `pairs`.
pub fn report_for(pred: &[Vec<f64>], pairs: &[WindowPair], t: usize, normalizer: Option<&NormalizerState>) -> MetricsReport {
    let truth: Vec<Vec<f64>> = pairs.iter().map(|w| w.target.data().to_vec()).collect();
    let mut report = MetricsReport::from_windows(pred, &truth, t);
    if let Some(norm) = normalizer {
        let p: Vec<f64> = pred.iter().flat_map(|p| norm.denormalize(p)).collect();
        let y: Vec<f64> = truth.iter().flat_map(|y| norm.denormalize(y)).collect();
        report.denormalized = Some(Metrics::from_pairs(&p, &y));
    }
    report
}
