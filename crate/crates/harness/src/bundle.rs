//! On-disk dataset bundle.
//!
//! A bundle directory holds:
//! - `manifest.txt`: `key=value` lines with the generation parameters,
//!   extents, feature names, network-feature indices and one `fault.{i}` row
//!   per faulted window;
//! - `states.f32`: `samples x 2T x N x C` values;
//! - `adjacency.f32`: `samples x 2T x N x N` values;
//! - `deployment.u32`: `M` host pod counts.
//!
//! All binary files are little-endian and row-major.

use std::fs;
use std::path::{Path, PathBuf};

use stmformer_core::graph::DeploymentMap;
use stmformer_core::rng::SeededRng;
use stmformer_core::sim::{
    build_topology, category_counts, simulate_window, BaselineProfile, FaultKind, FaultSpec, FeatureSchema,
};

use crate::config::{GenConfig, KvConfig};
use crate::error::{HarnessError, Result};
use crate::split::SplitSpec;

pub const FORMAT: &str = "stmformer-bundle-1";
pub const MANIFEST: &str = "manifest.txt";
pub const STATES: &str = "states.f32";
pub const ADJACENCY: &str = "adjacency.f32";
pub const DEPLOYMENT: &str = "deployment.u32";

/// Rng streams derived from the dataset seed.
const TOPOLOGY_STREAM: u64 = 1;
const PROFILE_STREAM: u64 = 2;
const PLAN_STREAM: u64 = 3;
/// Window `i` draws from stream `WINDOW_STREAM_BASE + i`.
const WINDOW_STREAM_BASE: u64 = 1 << 32;

/// Fault injected into one window.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FaultRecord {
    pub sample: usize,
    pub spec: FaultSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub config: GenConfig,
    pub schema: FeatureSchema,
    pub deployment: DeploymentMap,
    pub faults: Vec<FaultRecord>,
    /// `samples x 2T x N x C`, widened from 32-bit storage.
    pub states: Vec<f64>,
    /// `samples x 2T x N x N`; `None` when loaded without adjacency.
    pub adjacency: Option<Vec<f64>>,
}

impl DatasetBundle {
    pub fn samples(&self) -> usize {
        self.config.samples
    }

    /// Steps per stored sample.
    pub fn sample_len(&self) -> usize {
        2 * self.config.t
    }

    pub fn split(&self) -> SplitSpec {
        SplitSpec::new(self.samples())
    }

    /// Values of sample `i`, `2T x N x C`.
    pub fn sample_states(&self, i: usize) -> &[f64] {
        let len = self.sample_len() * self.config.n * self.config.c;
        &self.states[i * len..(i + 1) * len]
    }

    /// Raw adjacency of sample `i`, `2T x N x N`.
    pub fn sample_adjacency(&self, i: usize) -> Option<&[f64]> {
        let len = self.sample_len() * self.config.n * self.config.n;
        self.adjacency.as_ref().map(|a| &a[i * len..(i + 1) * len])
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(HarnessError::io(dir))?;
        let manifest = self.manifest_text();
        write_file(&dir.join(MANIFEST), manifest.as_bytes())?;
        write_file(&dir.join(STATES), &f32_bytes(&self.states))?;
        let adjacency = self.adjacency.as_ref().ok_or_else(|| HarnessError::Bundle {
            path: dir.to_path_buf(),
            msg: "cannot write a bundle loaded without adjacency".into(),
        })?;
        write_file(&dir.join(ADJACENCY), &f32_bytes(adjacency))?;
        let dep: Vec<u8> = self.deployment.counts().iter().flat_map(|&c| (c as u32).to_le_bytes()).collect();
        write_file(&dir.join(DEPLOYMENT), &dep)
    }

    fn manifest_text(&self) -> String {
        let cfg = &self.config;
        let mut lines = vec![format!("format={FORMAT}")];
        lines.extend(cfg.to_kv_lines());
        lines.push(format!("steps={}", self.sample_len()));
        for (i, name) in self.schema.names().iter().enumerate() {
            lines.push(format!("feature.{i}={name}"));
        }
        let net: Vec<String> = self.schema.network_indices().iter().map(|i| i.to_string()).collect();
        lines.push(format!("network={}", net.join(",")));
        let dep: Vec<String> = self.deployment.counts().iter().map(|c| c.to_string()).collect();
        lines.push(format!("deployment={}", dep.join(",")));
        let split = self.split();
        lines.push(format!("split.train={}..{}", split.train.start, split.train.end));
        lines.push(format!("split.val={}..{}", split.val.start, split.val.end));
        lines.push(format!("split.test={}..{}", split.test.start, split.test.end));
        for f in &self.faults {
            let s = &f.spec;
            lines.push(format!(
                "fault.{}={},{},{},{},{}",
                f.sample, s.kind, s.target, s.start, s.duration, s.intensity
            ));
        }
        let mut text = lines.join("\n");
        text.push('\n');
        text
    }

    /// Reads a bundle. With `with_adjacency == false` the adjacency file is
    /// never opened.
    pub fn load(dir: &Path, with_adjacency: bool) -> Result<Self> {
        let bad = |msg: String| HarnessError::Bundle {
            path: dir.to_path_buf(),
            msg,
        };
        let mut kv = KvConfig::load(&dir.join(MANIFEST))?;
        let format: String = kv.take("format")?.unwrap_or_default();
        if format != FORMAT {
            return Err(bad(format!("unsupported format `{format}`")));
        }
        let steps: usize = kv.take("steps")?.ok_or_else(|| bad("missing `steps`".into()))?;
        let mut names = Vec::new();
        while let Some(name) = kv.take::<String>(&format!("feature.{}", names.len()))? {
            names.push(name);
        }
        let network: Vec<usize> = kv.take_list::<usize>("network")?.unwrap_or_default();
        let dep_manifest: Vec<usize> = kv.take_list("deployment")?.unwrap_or_default();
        for key in ["split.train", "split.val", "split.test"] {
            kv.take::<String>(key)?;
        }
        let mut faults = Vec::new();
        let fault_keys: Vec<String> = kv_fault_keys(&kv);
        for key in fault_keys {
            let sample: usize = key["fault.".len()..].parse().map_err(|_| bad(format!("bad key `{key}`")))?;
            let v: Vec<String> = kv.take_list(&key)?.unwrap_or_default();
            faults.push(FaultRecord {
                sample,
                spec: parse_fault(&v).ok_or_else(|| bad(format!("malformed `{key}`")))?,
            });
        }
        faults.sort_by_key(|f| f.sample);
        let config = GenConfig::from_kv(kv)?;

        if steps != 2 * config.t {
            return Err(bad(format!("steps {steps} != 2 x window {}", config.t)));
        }
        let schema = FeatureSchema::with_features(config.c);
        if schema.names() != names.as_slice() || schema.network_indices() != network {
            return Err(bad("feature schema does not match the generator schema".into()));
        }
        let dep_bytes = read_file(&dir.join(DEPLOYMENT))?;
        if dep_bytes.len() != 4 * config.m {
            return Err(bad(format!("deployment file has {} bytes, expected {}", dep_bytes.len(), 4 * config.m)));
        }
        let counts: Vec<usize> = dep_bytes
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
            .collect();
        if counts != dep_manifest {
            return Err(bad("deployment file disagrees with the manifest".into()));
        }
        let deployment = DeploymentMap::for_nodes(counts, config.n)?;

        let (s, n, c) = (config.samples, config.n, config.c);
        let states = read_f32(&dir.join(STATES), s * steps * n * c)?;
        let adjacency = if with_adjacency {
            Some(read_f32(&dir.join(ADJACENCY), s * steps * n * n)?)
        } else {
            None
        };
        Ok(Self {
            config,
            schema,
            deployment,
            faults,
            states,
            adjacency,
        })
    }
}

fn kv_fault_keys(kv: &KvConfig) -> Vec<String> {
    kv.keys().filter(|k| k.starts_with("fault.")).map(str::to_string).collect()
}

fn parse_fault(v: &[String]) -> Option<FaultSpec> {
    if v.len() != 5 {
        return None;
    }
    Some(FaultSpec {
        kind: v[0].parse::<FaultKind>().ok()?,
        target: v[1].parse().ok()?,
        start: v[2].parse().ok()?,
        duration: v[3].parse().ok()?,
        intensity: v[4].parse().ok()?,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(HarnessError::io(path))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(HarnessError::io(path))
}

pub(crate) fn f32_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

pub(crate) fn f32_values(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect()
}

fn read_f32(path: &Path, count: usize) -> Result<Vec<f64>> {
    let bytes = read_file(path)?;
    if bytes.len() != 4 * count {
        return Err(HarnessError::Bundle {
            path: PathBuf::from(path),
            msg: format!("{} bytes, expected {}", bytes.len(), 4 * count),
        });
    }
    Ok(f32_values(&bytes))
}

/// Fault parameters for one window of `steps` steps: duration in
/// `[steps/4, steps/2]`, start anywhere that fits, intensity in `[0.5, 1]`.
fn draw_fault(kind: FaultKind, n: usize, steps: usize, rng: &mut SeededRng) -> FaultSpec {
    let lo = (steps / 4).max(1);
    let duration = lo + rng.below(steps / 2 - lo + 1);
    FaultSpec {
        kind,
        target: rng.below(n),
        start: rng.below(steps - duration + 1),
        duration,
        intensity: rng.uniform(0.5, 1.0),
    }
}

/// Generates a bundle in memory. A pure function of `cfg`.
///
/// The topology, baseline profile and window category plan come from fixed
/// streams of the seed; window `i` draws its fault and noise from its own
/// stream, so windows are independent of generation order.
pub fn generate_dataset(cfg: &GenConfig) -> Result<DatasetBundle> {
    cfg.validate()?;
    let schema = FeatureSchema::with_features(cfg.c);
    let (graph, deployment) = build_topology(cfg.n, cfg.m, &mut SeededRng::with_stream(cfg.seed, TOPOLOGY_STREAM))?;
    let profile = BaselineProfile::sample(cfg.n, &schema, &mut SeededRng::with_stream(cfg.seed, PROFILE_STREAM));

    let counts = category_counts(cfg.samples, &cfg.ratios)?;
    let mut plan: Vec<Option<FaultKind>> = Vec::with_capacity(cfg.samples);
    plan.extend(std::iter::repeat_n(None, counts[0]));
    for (k, &count) in FaultKind::ALL.iter().zip(&counts[1..]) {
        plan.extend(std::iter::repeat_n(Some(*k), count));
    }
    SeededRng::with_stream(cfg.seed, PLAN_STREAM).shuffle(&mut plan);

    let steps = 2 * cfg.t;
    let mut states = Vec::with_capacity(cfg.samples * steps * cfg.n * cfg.c);
    let mut adjacency = Vec::with_capacity(cfg.samples * steps * cfg.n * cfg.n);
    let mut faults = Vec::new();
    for (i, kind) in plan.iter().enumerate() {
        let mut rng = SeededRng::with_stream(cfg.seed, WINDOW_STREAM_BASE + i as u64);
        let spec: Vec<FaultSpec> = kind.map(|k| draw_fault(k, cfg.n, steps, &mut rng)).into_iter().collect();
        let w = simulate_window(&graph, &deployment, &schema, &profile, &cfg.sim, &spec, steps, &mut rng)?;
        // Values are stored at 32-bit precision; keep the in-memory bundle
        // identical to what a reload returns.
        states.extend(w.states.data().iter().map(|&v| v as f32 as f64));
        adjacency.extend(w.adjacency.data().iter().map(|&v| v as f32 as f64));
        faults.extend(spec.into_iter().map(|spec| FaultRecord { sample: i, spec }));
    }
    Ok(DatasetBundle {
        config: cfg.clone(),
        schema,
        deployment,
        faults,
        states,
        adjacency: Some(adjacency),
    })
}
