//! Checkpoint directories.
//!
//! `manifest.txt` holds the run configuration, the data extents, free-form
//! `meta.*` entries and one `param.{i}=name:d0xd1x..` line per parameter in
//! store order; `params.f32` holds every parameter value as 32-bit
//! little-endian floats in that order.

use std::fs;
use std::path::Path;

use stmformer_core::model::Stmformer;
use stmformer_core::params::ParamStore;
use stmformer_core::DenseArray;

use crate::bundle::{f32_bytes, f32_values};
use crate::config::{model_kv_lines, train_kv_lines, KvConfig, RunConfig};
use crate::error::{HarnessError, Result};

pub const FORMAT: &str = "stmformer-checkpoint-1";
pub const MANIFEST: &str = "manifest.txt";
pub const PAYLOAD: &str = "params.f32";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub run: RunConfig,
    pub model: Stmformer,
    /// Extra `meta.{key}` entries, e.g. validation metrics at save time.
    pub meta: Vec<(String, String)>,
}

/// Rounds every parameter to the stored precision, so metrics computed
/// before saving are reproduced exactly after loading.
pub fn round_to_storage(model: &mut Stmformer) {
    for v in model.params_mut().values_mut() {
        for x in v.data_mut() {
            *x = *x as f32 as f64;
        }
    }
}

pub fn save(dir: &Path, run: &RunConfig, model: &Stmformer, meta: &[(String, String)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(HarnessError::io(dir))?;
    let cfg = model.config();
    let mut lines = vec![
        format!("format={FORMAT}"),
        format!("t={}", cfg.t),
        format!("n={}", cfg.n),
        format!("c={}", cfg.c),
    ];
    let run = RunConfig {
        model: cfg.clone(),
        ..run.clone()
    };
    lines.extend(model_kv_lines(&run));
    lines.extend(train_kv_lines(&run));
    for (k, v) in meta {
        lines.push(format!("meta.{k}={v}"));
    }
    let mut payload = Vec::with_capacity(model.params().num_scalars());
    for (i, (name, value)) in model.params().iter().enumerate() {
        let shape: Vec<String> = value.shape().iter().map(|d| d.to_string()).collect();
        lines.push(format!("param.{i}={name}:{}", shape.join("x")));
        payload.extend_from_slice(value.data());
    }
    let mut text = lines.join("\n");
    text.push('\n');
    let manifest = dir.join(MANIFEST);
    fs::write(&manifest, text).map_err(HarnessError::io(&manifest))?;
    let bin = dir.join(PAYLOAD);
    fs::write(&bin, f32_bytes(&payload)).map_err(HarnessError::io(&bin))
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let bad = |msg: String| HarnessError::Checkpoint {
        path: dir.to_path_buf(),
        msg,
    };
    let mut kv = KvConfig::load(&dir.join(MANIFEST))?;
    let format: String = kv.take("format")?.unwrap_or_default();
    if format != FORMAT {
        return Err(bad(format!("unsupported format `{format}`")));
    }
    let missing = |k: &str| bad(format!("missing `{k}`"));
    let t: usize = kv.take("t")?.ok_or_else(|| missing("t"))?;
    let n: usize = kv.take("n")?.ok_or_else(|| missing("n"))?;
    let c: usize = kv.take("c")?.ok_or_else(|| missing("c"))?;
    let mut layout = Vec::new();
    while let Some(entry) = kv.take::<String>(&format!("param.{}", layout.len()))? {
        let (name, shape) = entry.rsplit_once(':').ok_or_else(|| bad(format!("malformed parameter `{entry}`")))?;
        let shape = if shape.is_empty() {
            Vec::new()
        } else {
            shape
                .split('x')
                .map(|d| d.parse::<usize>().map_err(|_| bad(format!("malformed shape `{shape}`"))))
                .collect::<Result<Vec<_>>>()?
        };
        layout.push((name.to_string(), shape));
    }
    let meta_keys: Vec<String> = kv.keys().filter(|k| k.starts_with("meta.")).map(str::to_string).collect();
    let mut meta = Vec::new();
    for k in meta_keys {
        let v: String = kv.take(&k)?.unwrap_or_default();
        meta.push((k["meta.".len()..].to_string(), v));
    }
    let mut run = RunConfig::from_kv(kv)?;
    run.model.t = t;
    run.model.n = n;
    run.model.c = c;

    let bin = dir.join(PAYLOAD);
    let bytes = fs::read(&bin).map_err(HarnessError::io(&bin))?;
    let total: usize = layout.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if bytes.len() != 4 * total {
        return Err(bad(format!("payload has {} bytes, expected {}", bytes.len(), 4 * total)));
    }
    let values = f32_values(&bytes);
    let mut store = ParamStore::new();
    let mut at = 0;
    for (name, shape) in layout {
        let len: usize = shape.iter().product();
        store.insert(name, DenseArray::from_vec(&shape, values[at..at + len].to_vec())?);
        at += len;
    }
    let model = Stmformer::from_params(run.model.clone(), store)?;
    Ok(Checkpoint { run, model, meta })
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}
