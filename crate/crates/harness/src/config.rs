//! `key=value` configuration files.
//!
//! One entry per line; blank lines and lines starting with `#` are ignored.
//! Keys must be unique and every key must be consumed by the reader, so a
//! misspelt key is reported with its line number instead of being dropped.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use stmformer_core::model::{ModelConfig, Variant};
use stmformer_core::sim::{FaultKind, SimConfig};

use crate::error::{HarnessError, Result};
use crate::train::TrainConfig;

#[derive(Clone, Debug)]
pub struct KvConfig {
    source: String,
    entries: BTreeMap<String, (String, usize)>,
}

impl KvConfig {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| HarnessError::Parse {
                path: source.to_string(),
                line: i + 1,
                msg,
            };
            let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected key=value, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(err("empty key".into()));
            }
            if let Some((_, first)) = entries.insert(k.to_string(), (v.to_string(), i + 1)) {
                return Err(err(format!("duplicate key `{k}` (first on line {first})")));
            }
        }
        Ok(Self {
            source: source.to_string(),
            entries,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(HarnessError::io(path))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Removes and parses `key`, if present.
    pub fn take<T>(&mut self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        let Some((v, line)) = self.entries.remove(key) else {
            return Ok(None);
        };
        v.parse().map(Some).map_err(|e| HarnessError::Parse {
            path: self.source.clone(),
            line,
            msg: format!("`{key}`: {e}"),
        })
    }

    pub fn take_or<T>(&mut self, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.take(key)?.unwrap_or(default))
    }

    pub fn take_list<T>(&mut self, key: &str) -> Result<Option<Vec<T>>>
    where
        T: FromStr,
        T::Err: Display,
    {
        let Some((v, line)) = self.entries.remove(key) else {
            return Ok(None);
        };
        if v.is_empty() {
            return Ok(Some(Vec::new()));
        }
        v.split(',')
            .map(|s| {
                s.trim().parse().map_err(|e| HarnessError::Parse {
                    path: self.source.clone(),
                    line,
                    msg: format!("`{key}`: {e}"),
                })
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    /// Fails on the first key nobody consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().min_by_key(|(_, (_, line))| *line) {
            None => Ok(()),
            Some((k, (_, line))) => Err(HarnessError::Parse {
                path: self.source,
                line,
                msg: format!("unknown key `{k}`"),
            }),
        }
    }
}

/// Dataset generation parameters. Windows are `2 t` steps long: the first
/// `t` are history, the last `t` the forecast target.
#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub samples: usize,
    pub t: usize,
    pub n: usize,
    pub m: usize,
    pub c: usize,
    pub seed: u64,
    /// `normal` then the six fault kinds in [`FaultKind::ALL`] order.
    pub ratios: [f64; 7],
    pub sim: SimConfig,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            samples: 200,
            t: 16,
            n: 8,
            m: 3,
            c: 16,
            seed: 7,
            ratios: [0.4, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1],
            sim: SimConfig::default(),
        }
    }
}

impl GenConfig {
    pub fn ratio_keys() -> [String; 7] {
        let mut keys: [String; 7] = Default::default();
        keys[0] = "ratio.normal".into();
        for (i, k) in FaultKind::ALL.iter().enumerate() {
            keys[i + 1] = format!("ratio.{}", k.name());
        }
        keys
    }

    pub fn from_kv(mut kv: KvConfig) -> Result<Self> {
        let d = Self::default();
        let mut ratios = d.ratios;
        let keys = Self::ratio_keys();
        if keys.iter().any(|k| kv.entries.contains_key(k)) {
            for (r, k) in ratios.iter_mut().zip(&keys) {
                *r = kv.take_or(k, 0.0)?;
            }
        }
        let s = d.sim;
        let cfg = Self {
            samples: kv.take_or("samples", d.samples)?,
            t: kv.take_or("t", d.t)?,
            n: kv.take_or("n", d.n)?,
            m: kv.take_or("m", d.m)?,
            c: kv.take_or("c", d.c)?,
            seed: kv.take_or("seed", d.seed)?,
            ratios,
            sim: SimConfig {
                period: kv.take_or("sim.period", s.period)?,
                amplitude: kv.take_or("sim.amplitude", s.amplitude)?,
                noise: kv.take_or("sim.noise", s.noise)?,
                coupling: kv.take_or("sim.coupling", s.coupling)?,
                delta: kv.take_or("sim.delta", s.delta)?,
                attenuation: kv.take_or("sim.attenuation", s.attenuation)?,
            },
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(HarnessError::config("samples must be positive"));
        }
        if self.t < 4 {
            return Err(HarnessError::config(format!("window length {} below 4", self.t)));
        }
        if self.n < 2 || self.m == 0 || self.c == 0 {
            return Err(HarnessError::config("need n >= 2, m >= 1 and c >= 1"));
        }
        if self.ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(HarnessError::config("fault ratios must be nonnegative"));
        }
        let total: f64 = self.ratios.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(HarnessError::config(format!("fault ratios sum to {total}, expected 1")));
        }
        Ok(())
    }

    /// Canonical `key=value` lines; parsing them reproduces `self`.
    pub fn to_kv_lines(&self) -> Vec<String> {
        let mut out = vec![
            format!("samples={}", self.samples),
            format!("t={}", self.t),
            format!("n={}", self.n),
            format!("m={}", self.m),
            format!("c={}", self.c),
            format!("seed={}", self.seed),
        ];
        for (k, r) in Self::ratio_keys().iter().zip(self.ratios) {
            out.push(format!("{k}={r}"));
        }
        let s = &self.sim;
        out.push(format!("sim.period={}", s.period));
        out.push(format!("sim.amplitude={}", s.amplitude));
        out.push(format!("sim.noise={}", s.noise));
        out.push(format!("sim.coupling={}", s.coupling));
        out.push(format!("sim.delta={}", s.delta));
        out.push(format!("sim.attenuation={}", s.attenuation));
        out
    }
}

/// Model hyperparameters and training budget. Data extents (`t`, `n`, `c`)
/// are filled in from the dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub variant: Variant,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            variant: Variant::Full,
        }
    }
}

impl RunConfig {
    pub fn from_kv(mut kv: KvConfig) -> Result<Self> {
        let dm = ModelConfig::default();
        let dt = TrainConfig::default();
        let variant = match kv.take::<String>("variant")? {
            Some(v) => Variant::parse(&v)?,
            None => Variant::Full,
        };
        let model = ModelConfig {
            d: kv.take_or("d", dm.d)?,
            heads: kv.take_or("heads", dm.heads)?,
            encoder_layers: kv.take_or("encoder_layers", dm.encoder_layers)?,
            decoder_layers: kv.take_or("decoder_layers", dm.decoder_layers)?,
            k_imm: kv.take_or("k_imm", dm.k_imm)?,
            k_smm: kv.take_or("k_smm", dm.k_smm)?,
            k_tmm: kv.take_or("k_tmm", dm.k_tmm)?,
            kernels: kv.take_list("kernels")?.unwrap_or(dm.kernels.clone()),
            patch_len: kv.take_or("patch_len", dm.patch_len)?,
            pca_patch: kv.take_or("pca_patch", dm.pca_patch)?,
            prf_features: kv.take_or("prf_features", dm.prf_features)?,
            tau: kv.take_or("tau", dm.tau)?,
            gumbel_samples: kv.take_or("gumbel_samples", dm.gumbel_samples)?,
            k_freq: kv.take_or("k_freq", dm.k_freq)?,
            probsparse_factor: kv.take_or("probsparse_factor", dm.probsparse_factor)?,
            gat_slope: kv.take_or("gat_slope", dm.gat_slope)?,
            ablation: variant.ablation(),
            seed: kv.take_or("seed", dm.seed)?,
            ..dm
        };
        let train = TrainConfig {
            updates: kv.take_or("updates", dt.updates)?,
            micro_batch: kv.take_or("micro_batch", dt.micro_batch)?,
            accumulation: kv.take_or("accumulation", dt.accumulation)?,
            lr: kv.take_or("lr", dt.lr)?,
            warmup: kv.take_or("warmup", dt.warmup)?,
            beta1: kv.take_or("beta1", dt.beta1)?,
            beta2: kv.take_or("beta2", dt.beta2)?,
            eps: kv.take_or("eps", dt.eps)?,
        };
        kv.finish()?;
        train.validate()?;
        Ok(Self { model, train, variant })
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self.model.ablation = variant.ablation();
        self
    }
}

/// `key=value` lines for the model part of `run`, readable by
/// [`RunConfig::from_kv`].
pub fn model_kv_lines(run: &RunConfig) -> Vec<String> {
    let m = &run.model;
    let kernels: Vec<String> = m.kernels.iter().map(|k| k.to_string()).collect();
    vec![
        format!("variant={}", run.variant.key()),
        format!("d={}", m.d),
        format!("heads={}", m.heads),
        format!("encoder_layers={}", m.encoder_layers),
        format!("decoder_layers={}", m.decoder_layers),
        format!("k_imm={}", m.k_imm),
        format!("k_smm={}", m.k_smm),
        format!("k_tmm={}", m.k_tmm),
        format!("kernels={}", kernels.join(",")),
        format!("patch_len={}", m.patch_len),
        format!("pca_patch={}", m.pca_patch),
        format!("prf_features={}", m.prf_features),
        format!("tau={}", m.tau),
        format!("gumbel_samples={}", m.gumbel_samples),
        format!("k_freq={}", m.k_freq),
        format!("probsparse_factor={}", m.probsparse_factor),
        format!("gat_slope={}", m.gat_slope),
        format!("seed={}", m.seed),
    ]
}

/// `key=value` lines for the training part of `run`.
pub fn train_kv_lines(run: &RunConfig) -> Vec<String> {
    let t = &run.train;
    vec![
        format!("updates={}", t.updates),
        format!("micro_batch={}", t.micro_batch),
        format!("accumulation={}", t.accumulation),
        format!("lr={}", t.lr),
        format!("warmup={}", t.warmup),
        format!("beta1={}", t.beta1),
        format!("beta2={}", t.beta2),
        format!("eps={}", t.eps),
    ]
}
