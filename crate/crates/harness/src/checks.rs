//! Finite-difference gradient checks of every differentiable building block
//! and of the assembled model.

use stmformer_core::decomp::{multi_decomp, stride1_patch, value_embed, Embedding, KernelBank};
use stmformer_core::gradcheck::grad_check;
use stmformer_core::graph::{imm_forward, normalize_adjacency, smm_forward, AttentionParams, DeploymentMap, GatParams};
use stmformer_core::model::{probsparse_cross_attention, FeedForward, Mode, ModelConfig, Stmformer, WindowInput};
use stmformer_core::params::{Bound, ParamStore};
use stmformer_core::temporal::{init_tmm_params, sample_prf_maps, tmm_forward, TmmConfig};
use stmformer_core::{DenseArray, Result, SeededRng, Tape, Var};

/// Bound on module checks.
pub const MODULE_TOLERANCE: f64 = 1e-5;
/// Bound on the full-model check.
pub const MODEL_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub coordinates: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// `sum(weights * y)` with fixed random weights, so no output coordinate
/// cancels against another.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = SeededRng::new(seed);
    let w = DenseArray::from_fn(tape.shape(y), |_| rng.uniform(-1.0, 1.0));
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum_all(p))
}

/// Checks `f(params, x)` with respect to every parameter of `store` and `x`.
fn check_module<F>(name: &'static str, store: &ParamStore, x: DenseArray, f: F) -> Result<CheckResult>
where
    F: Fn(&mut Tape, &Bound<'_>, Var) -> Result<Var>,
{
    let mut point = store.values().to_vec();
    point.push(x);
    let k = store.len();
    let r = grad_check(
        |tape, v| {
            let bound = Bound::from_vars(store, v[..k].to_vec())?;
            let y = f(tape, &bound, v[k])?;
            weighted_sum(tape, y, 17)
        },
        &point,
    )?;
    Ok(CheckResult {
        name,
        max_rel_error: r.max_rel_error,
        tolerance: MODULE_TOLERANCE,
        coordinates: r.coordinates,
    })
}

fn randn(shape: &[usize], rng: &mut SeededRng) -> DenseArray {
    DenseArray::from_fn(shape, |_| rng.standard_normal())
}

/// Module-level checks on small random instances (`T = 8, N = 4, D = 8`).
pub fn module_checks() -> Result<Vec<CheckResult>> {
    let (t, n, c, d, heads) = (8, 4, 4, 8, 2);
    let mut rng = SeededRng::new(2024);
    let map = DeploymentMap::new(vec![2, 1, 1]);
    let raw = DenseArray::from_fn(&[t, n, n], |i| if i[1] == i[2] { 0.0 } else { rng.uniform(0.0, 2.0) });
    let adj = normalize_adjacency(&raw)?;
    let mut out = Vec::new();

    let mut store = ParamStore::new();
    store.insert("w", randn(&[5, 4], &mut rng));
    out.push(check_module("matmul", &store, randn(&[3, 5], &mut rng), |tape, p, x| {
        tape.matmul(x, p.var("w")?)
    })?);

    let store = ParamStore::new();
    out.push(check_module("softmax", &store, randn(&[3, 5], &mut rng), |tape, _, x| tape.softmax(x))?);

    let mut store = ParamStore::new();
    store.insert("k", randn(&[3, 3, 2, 2], &mut rng));
    out.push(check_module("conv2d", &store, randn(&[6, 6, 2], &mut rng), |tape, p, x| {
        tape.conv2d(x, p.var("k")?)
    })?);

    let bank = KernelBank::new(&[3, 5])?;
    let mut store = ParamStore::new();
    store.insert("mix", randn(&[2], &mut rng));
    out.push(check_module("decomposition", &store, randn(&[t, n, c], &mut rng), |tape, p, x| {
        let (s, tr) = multi_decomp(tape, x, &bank, p.var("mix")?)?;
        let tr = tape.scale(tr, 0.5);
        tape.add(s, tr)
    })?);

    let mut store = ParamStore::new();
    Embedding::init_params(&mut store, "emb", c, d, 3, &mut rng);
    out.push(check_module("embedding", &store, randn(&[t, n, c], &mut rng), |tape, p, x| {
        let emb = Embedding::bind(tape, p, "emb", t, d, 3)?;
        let v = value_embed(tape, x, &emb)?;
        stride1_patch(tape, v, &emb)
    })?);

    let mut store = ParamStore::new();
    AttentionParams::init_params(&mut store, "imm.0", d, &mut rng);
    out.push(check_module("imm", &store, randn(&[t, n, d], &mut rng), |tape, p, x| {
        imm_forward(tape, x, &map, p, "imm", 1, heads)
    })?);

    let mut store = ParamStore::new();
    GatParams::init_params(&mut store, "smm.0", d, heads, &mut rng);
    out.push(check_module("smm", &store, randn(&[t, n, d], &mut rng), |tape, p, x| {
        smm_forward(tape, x, &adj, p, "smm", 1, heads, GatParams::DEFAULT_SLOPE)
    })?);

    let patch = 4;
    let maps = sample_prf_maps(1, 32, d, 0.25, &mut rng)?;
    let mut store = ParamStore::new();
    init_tmm_params(&mut store, "tmm", 1, d, (t / patch) * n, &mut rng);
    for (name, timesblock, pca) in [("timesblock", true, false), ("pca", false, true), ("tmm", true, true)] {
        let cfg = TmmConfig {
            k_freq: 2,
            patch,
            samples: 4,
            timesblock,
            pca,
        };
        out.push(check_module(name, &store, randn(&[t, n, d], &mut rng), |tape, p, x| {
            let mut r = SeededRng::new(99);
            tmm_forward(tape, x, &adj, p, "tmm", &maps, &cfg, Mode::Train, &mut r)
        })?);
    }

    let mut store = ParamStore::new();
    AttentionParams::init_params(&mut store, "cross", d, &mut rng);
    let enc = randn(&[t, n, d], &mut rng);
    out.push(check_module("cross attention", &store, randn(&[t, n, d], &mut rng), |tape, p, x| {
        let a = AttentionParams::bind(p, "cross", heads)?;
        let e = tape.constant(enc.clone());
        let mut r = SeededRng::new(5);
        // Factor 1 keeps ceil(ln 8) = 3 of 8 queries, so the sparse path runs.
        probsparse_cross_attention(tape, x, e, &a, 1.0, &mut r)
    })?);

    let mut store = ParamStore::new();
    FeedForward::init_params(&mut store, "ffn", d, &mut rng);
    out.push(check_module("feed-forward", &store, randn(&[t, n, d], &mut rng), |tape, p, x| {
        FeedForward::bind(p, "ffn")?.forward(tape, x)
    })?);

    Ok(out)
}

/// Gradient of `sum(output)` in training mode with respect to every
/// parameter of the minimal model.
pub fn full_model_check() -> Result<CheckResult> {
    let cfg = ModelConfig::minimal();
    let model = Stmformer::new(cfg.clone())?;
    let mut rng = SeededRng::new(11);
    let x = DenseArray::from_fn(&[cfg.t, cfg.n, cfg.c], |_| rng.uniform01());
    let a = DenseArray::from_fn(&[cfg.t, cfg.n, cfg.n], |_| rng.uniform01());
    let map = DeploymentMap::new(vec![2, 2]);
    let input = WindowInput {
        history: &x,
        adjacency: Some(&a),
        deployment: &map,
    };
    let r = grad_check(
        |tape, v| {
            let bound = Bound::from_vars(model.params(), v.to_vec())?;
            let mut r = SeededRng::new(5);
            let y = model.forward(tape, &bound, &input, Mode::Train, &mut r)?;
            Ok(tape.sum_all(y))
        },
        model.params().values(),
    )?;
    Ok(CheckResult {
        name: "full model",
        max_rel_error: r.max_rel_error,
        tolerance: MODEL_TOLERANCE,
        coordinates: r.coordinates,
    })
}
