//! Encoder/decoder assembly of the forecasting model.
//!
//! Parameter names are hierarchical:
//! `embed.{encoder,decoder,trend}`, `input.decomp`,
//! `encoder.{l}.{imm.j,decomp1,smm.j,decomp2,tmm.j,decomp3,ffn}` and
//! `decoder.{l}.{cross,decomp0,imm.j,decomp1,smm.j,decomp2,tmm.j,decomp3,ffn,trend}`,
//! then `output.w`.
//!
//! Training forwards draw from the caller's rng in layer order: each encoder
//! layer's TMM (gate, then Gumbel noise), then each decoder layer's key
//! sample for sparse attention followed by its TMM. Evaluation never touches
//! the caller's rng.

mod config;
mod layers;

use alloc::format;
use alloc::vec::Vec;

pub use config::{Ablation, ModelConfig, Variant};
pub use layers::{probsparse_cross_attention, sparse_budget, FeedForward};

use crate::array::DenseArray;
use crate::decomp::{multi_decomp, stride1_patch, value_embed, Embedding, KernelBank};
use crate::error::{Error, Result, StageContext};
use crate::graph::{imm_forward, normalize_adjacency, smm_forward, AttentionParams, DeploymentMap, GatParams, NormalizedAdjacency};
use crate::params::{Bound, ParamStore};
use crate::rng::SeededRng;
use crate::tape::{Tape, Var};
pub use crate::temporal::Mode;
use crate::temporal::{init_tmm_params, sample_prf_maps, tmm_forward, PrfMap, TmmConfig};

/// Stream of the parameter initializer.
pub const INIT_STREAM: u64 = 1;
/// Stream of the random feature matrices.
pub const PRF_STREAM: u64 = 2;
/// Stream of the key sample used by evaluation forwards.
pub const EVAL_STREAM: u64 = 3;

/// Gain of the output head. Stage residuals compound, so decoder features
/// start an order of magnitude above the normalized targets.
const OUTPUT_GAIN: f64 = 0.1;

/// One observed window.
#[derive(Clone, Copy, Debug)]
pub struct WindowInput<'a> {
    /// `[T, N, C]`.
    pub history: &'a DenseArray,
    /// Raw `[T, N, N]` connections; unused (and may be `None`) when the
    /// adjacency is ablated.
    pub adjacency: Option<&'a DenseArray>,
    pub deployment: &'a DeploymentMap,
}

/// Running sum of projected decoder trends.
#[derive(Clone, Copy, Debug, Default)]
pub struct TrendState {
    total: Option<Var>,
}

impl TrendState {
    pub fn accumulate(&mut self, tape: &mut Tape, layer_trend: Var) -> Result<()> {
        self.total = Some(match self.total {
            Some(t) => tape.add(t, layer_trend)?,
            None => layer_trend,
        });
        Ok(())
    }

    pub fn total(&self) -> Option<Var> {
        self.total
    }
}

/// A configured model with its parameters and fixed random feature maps.
#[derive(Clone, Debug)]
pub struct Stmformer {
    config: ModelConfig,
    params: ParamStore,
    encoder_maps: Vec<Vec<PrfMap>>,
    decoder_maps: Vec<Vec<PrfMap>>,
}

impl Stmformer {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config);
        let mut rng = SeededRng::with_stream(config.seed, PRF_STREAM);
        let maps = |rng: &mut SeededRng, layers: usize| -> Result<Vec<Vec<PrfMap>>> {
            (0..layers)
                .map(|_| sample_prf_maps(config.k_tmm, config.prf_features, config.d, config.tau, rng))
                .collect()
        };
        let encoder_maps = maps(&mut rng, config.encoder_layers)?;
        let decoder_maps = maps(&mut rng, config.decoder_layers)?;
        Ok(Self {
            config,
            params,
            encoder_maps,
            decoder_maps,
        })
    }

    /// Rebuilds a model from stored parameters; names and shapes must match
    /// `config` exactly. Feature maps are regenerated from the seed.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config)?;
        if params.names() != model.params.names() {
            return Err(Error::config("stored parameter names do not match the configuration"));
        }
        for (name, value) in params.iter() {
            model.params.set(name, value.clone())?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn encoder_maps(&self) -> &[Vec<PrfMap>] {
        &self.encoder_maps
    }

    /// Eval-mode forecast `[T, N, C]` without gradient bookkeeping.
    pub fn predict(&self, input: &WindowInput<'_>) -> Result<DenseArray> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let mut unused = SeededRng::new(self.config.seed);
        let out = self.forward(&mut tape, &bound, input, Mode::Eval, &mut unused)?;
        Ok(tape.value(out).clone())
    }

    /// Forecast `[T, N, C]` with parameters `bound` on `tape`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound<'_>, input: &WindowInput<'_>, mode: Mode, rng: &mut SeededRng) -> Result<Var> {
        let cfg = &self.config;
        let hs = input.history.shape();
        if hs != [cfg.t, cfg.n, cfg.c] {
            return Err(Error::Shape {
                op: "model_forward",
                expected: alloc::vec![cfg.t, cfg.n, cfg.c],
                got: hs.to_vec(),
            });
        }
        input.deployment.check(cfg.n).stage("deployment")?;
        let bank = cfg.kernel_bank()?;
        let x = tape.constant(input.history.clone());
        let (xs, xt) = multi_decomp(tape, x, &bank, bound.var("input.decomp.mix")?).stage("input decomposition")?;
        let x_en = embed(tape, bound, "embed.encoder", xs, cfg).stage("embedding")?;
        let x_de = embed(tape, bound, "embed.decoder", xs, cfg).stage("embedding")?;
        let x_it = embed(tape, bound, "embed.trend", xt, cfg).stage("embedding")?;

        let adj = if cfg.ablation.no_adjacency {
            NormalizedAdjacency::identity(cfg.t, cfg.n)
        } else {
            let raw = input
                .adjacency
                .ok_or_else(|| Error::config("adjacency required unless ablated"))
                .stage("adjacency")?;
            if raw.shape() != [cfg.t, cfg.n, cfg.n] {
                return Err(Error::Shape {
                    op: "adjacency",
                    expected: alloc::vec![cfg.t, cfg.n, cfg.n],
                    got: raw.shape().to_vec(),
                });
            }
            normalize_adjacency(raw).stage("adjacency")?
        };

        let mut eval_rng = SeededRng::with_stream(cfg.seed, EVAL_STREAM);
        let ctx = Context {
            cfg,
            bank: &bank,
            adj: &adj,
            map: input.deployment,
            mode,
        };
        let mut h = x_en;
        for (l, maps) in self.encoder_maps.iter().enumerate() {
            let rng = match mode {
                Mode::Train => &mut *rng,
                Mode::Eval => &mut eval_rng,
            };
            h = encoder_layer(tape, bound, &ctx, h, &format!("encoder.{l}"), maps, rng).stage("encoder")?;
        }
        let enc = h;

        let mut dec = tape.add(x_de, x_it)?;
        let mut trend = TrendState::default();
        for (l, maps) in self.decoder_maps.iter().enumerate() {
            let rng = match mode {
                Mode::Train => &mut *rng,
                Mode::Eval => &mut eval_rng,
            };
            dec = decoder_layer(tape, bound, &ctx, dec, enc, &format!("decoder.{l}"), maps, &mut trend, rng).stage("decoder")?;
        }
        let y = tape.add(dec, x_it)?;
        tape.matmul(y, bound.var("output.w")?).stage("output")
    }
}

struct Context<'a> {
    cfg: &'a ModelConfig,
    bank: &'a KernelBank,
    adj: &'a NormalizedAdjacency,
    map: &'a DeploymentMap,
    mode: Mode,
}

impl Context<'_> {
    fn tmm(&self) -> TmmConfig {
        TmmConfig {
            k_freq: self.cfg.k_freq,
            patch: self.cfg.pca_patch,
            samples: self.cfg.gumbel_samples,
            timesblock: !self.cfg.ablation.no_tmm_tb,
            pca: !self.cfg.ablation.no_tmm_pca,
        }
    }
}

fn embed(tape: &mut Tape, bound: &Bound<'_>, prefix: &str, x: Var, cfg: &ModelConfig) -> Result<Var> {
    let emb = Embedding::bind(tape, bound, prefix, cfg.t, cfg.d, cfg.patch_len)?;
    let v = value_embed(tape, x, &emb)?;
    stride1_patch(tape, v, &emb)
}

/// `MultiDecomp(module + x)`, or `MultiDecomp(x)` for a disabled module.
fn decompose(tape: &mut Tape, bound: &Bound<'_>, ctx: &Context<'_>, x: Var, module: Option<Var>, prefix: &str) -> Result<(Var, Var)> {
    let input = match module {
        Some(m) => tape.add(m, x)?,
        None => x,
    };
    multi_decomp(tape, input, ctx.bank, bound.sub(prefix, "mix")?)
}

/// IMM, SMM and TMM stages shared by both layer kinds. Returns the three
/// `(seasonal, trend)` pairs.
fn message_stages(tape: &mut Tape, bound: &Bound<'_>, ctx: &Context<'_>, x: Var, prefix: &str, first: usize, maps: &[PrfMap], rng: &mut SeededRng) -> Result<[(Var, Var); 3]> {
    let cfg = ctx.cfg;
    let imm = if cfg.ablation.no_imm {
        None
    } else {
        Some(imm_forward(tape, x, ctx.map, bound, &format!("{prefix}.imm"), cfg.k_imm, cfg.heads).stage("imm")?)
    };
    let s1 = decompose(tape, bound, ctx, x, imm, &format!("{prefix}.decomp{first}"))?;

    let smm = if cfg.ablation.no_smm {
        None
    } else {
        Some(smm_forward(tape, s1.0, ctx.adj, bound, &format!("{prefix}.smm"), cfg.k_smm, cfg.heads, cfg.gat_slope).stage("smm")?)
    };
    let s2 = decompose(tape, bound, ctx, s1.0, smm, &format!("{prefix}.decomp{}", first + 1))?;

    let tc = ctx.tmm();
    let tmm = if !tc.timesblock && !tc.pca {
        None
    } else {
        Some(tmm_forward(tape, s2.0, ctx.adj, bound, &format!("{prefix}.tmm"), maps, &tc, ctx.mode, rng).stage("tmm")?)
    };
    let s3 = decompose(tape, bound, ctx, s2.0, tmm, &format!("{prefix}.decomp{}", first + 2))?;
    Ok([s1, s2, s3])
}

fn encoder_layer(tape: &mut Tape, bound: &Bound<'_>, ctx: &Context<'_>, x: Var, prefix: &str, maps: &[PrfMap], rng: &mut SeededRng) -> Result<Var> {
    let [_, _, (s3, _)] = message_stages(tape, bound, ctx, x, prefix, 1, maps, rng)?;
    let ffn = FeedForward::bind(bound, &format!("{prefix}.ffn"))?;
    let f = ffn.forward(tape, s3)?;
    tape.add(f, s3)
}

#[allow(clippy::too_many_arguments)]
fn decoder_layer(
    tape: &mut Tape,
    bound: &Bound<'_>,
    ctx: &Context<'_>,
    x: Var,
    enc: Var,
    prefix: &str,
    maps: &[PrfMap],
    trend: &mut TrendState,
    rng: &mut SeededRng,
) -> Result<Var> {
    let cfg = ctx.cfg;
    let cross = AttentionParams::bind(bound, &format!("{prefix}.cross"), cfg.heads)?;
    let a = probsparse_cross_attention(tape, x, enc, &cross, cfg.probsparse_factor, rng).stage("cross attention")?;
    let (s1, t1) = decompose(tape, bound, ctx, x, Some(a), &format!("{prefix}.decomp0"))?;
    let [(_, t2), (_, t3), (s4, t4)] = message_stages(tape, bound, ctx, s1, prefix, 1, maps, rng)?;
    let ffn = FeedForward::bind(bound, &format!("{prefix}.ffn"))?;
    let f = ffn.forward(tape, s4)?;
    let s5 = tape.add(f, s4)?;
    let mut layer_trend: Option<Var> = None;
    for (i, part) in [t1, t2, t3, t4].into_iter().enumerate() {
        let w = bound.var(&format!("{prefix}.trend.w{}", i + 1))?;
        let p = tape.matmul(part, w)?;
        layer_trend = Some(match layer_trend {
            Some(acc) => tape.add(acc, p)?,
            None => p,
        });
    }
    let layer_trend = layer_trend.expect("four trend parts");
    trend.accumulate(tape, layer_trend)?;
    tape.add(s5, layer_trend)
}

fn init_params(cfg: &ModelConfig) -> ParamStore {
    let mut rng = SeededRng::with_stream(cfg.seed, INIT_STREAM);
    let mut store = ParamStore::new();
    let d = cfg.d;
    let tokens = cfg.patches() * cfg.n;
    let bank = KernelBank::new(&cfg.kernels).expect("validated bank");
    for name in ["embed.encoder", "embed.decoder", "embed.trend"] {
        Embedding::init_params(&mut store, name, cfg.c, d, cfg.patch_len, &mut rng);
    }
    bank.init_params(&mut store, "input.decomp");
    let stages = |store: &mut ParamStore, rng: &mut SeededRng, prefix: &str, first: usize| {
        for j in 0..cfg.k_imm {
            AttentionParams::init_params(store, &format!("{prefix}.imm.{j}"), d, rng);
        }
        bank.init_params(store, &format!("{prefix}.decomp{first}"));
        for j in 0..cfg.k_smm {
            GatParams::init_params(store, &format!("{prefix}.smm.{j}"), d, cfg.heads, rng);
        }
        bank.init_params(store, &format!("{prefix}.decomp{}", first + 1));
        init_tmm_params(store, &format!("{prefix}.tmm"), cfg.k_tmm, d, tokens, rng);
        bank.init_params(store, &format!("{prefix}.decomp{}", first + 2));
        FeedForward::init_params(store, &format!("{prefix}.ffn"), d, rng);
    };
    for l in 0..cfg.encoder_layers {
        stages(&mut store, &mut rng, &format!("encoder.{l}"), 1);
    }
    for l in 0..cfg.decoder_layers {
        let prefix = format!("decoder.{l}");
        AttentionParams::init_params(&mut store, &format!("{prefix}.cross"), d, &mut rng);
        bank.init_params(&mut store, &format!("{prefix}.decomp0"));
        stages(&mut store, &mut rng, &prefix, 1);
        for i in 1..=4 {
            store.insert_xavier(format!("{prefix}.trend.w{i}"), d, d, ParamStore::RESIDUAL_GAIN, &mut rng);
        }
    }
    store.insert_xavier("output.w", d, cfg.c, OUTPUT_GAIN, &mut rng);
    store
}
