use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::decomp::{KernelBank, DEFAULT_KERNELS};
use crate::error::{Error, Result};
use crate::graph::GatParams;

/// Module switches. A disabled module contributes nothing to its stage, so
/// the stage reduces to decomposing its input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    pub no_imm: bool,
    pub no_smm: bool,
    pub no_tmm_tb: bool,
    pub no_tmm_pca: bool,
    /// Identity adjacency at every step; the raw adjacency is never read.
    pub no_adjacency: bool,
}

/// Named model variants: the full model and one per ablation switch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Full,
    NoImm,
    NoSmm,
    NoTmmTb,
    NoTmmPca,
    NoAdjacency,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoImm,
        Variant::NoSmm,
        Variant::NoTmmTb,
        Variant::NoTmmPca,
        Variant::NoAdjacency,
    ];

    /// Row label used in reports.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "STMformer",
            Variant::NoImm => "w/o IMM",
            Variant::NoSmm => "w/o SMM",
            Variant::NoTmmTb => "w/o TMM-TB",
            Variant::NoTmmPca => "w/o TMM-PCA",
            Variant::NoAdjacency => "w/o Adjacency",
        }
    }

    /// Command-line spelling.
    pub fn key(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoImm => "no-imm",
            Variant::NoSmm => "no-smm",
            Variant::NoTmmTb => "no-tmm-tb",
            Variant::NoTmmPca => "no-tmm-pca",
            Variant::NoAdjacency => "no-adjacency",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.key() == s || v.label() == s)
            .ok_or_else(|| Error::config(format!("unknown variant `{s}`")))
    }

    pub fn ablation(self) -> Ablation {
        let mut a = Ablation::default();
        match self {
            Variant::Full => {}
            Variant::NoImm => a.no_imm = true,
            Variant::NoSmm => a.no_smm = true,
            Variant::NoTmmTb => a.no_tmm_tb = true,
            Variant::NoTmmPca => a.no_tmm_pca = true,
            Variant::NoAdjacency => a.no_adjacency = true,
        }
        a
    }
}

/// Every extent and hyperparameter of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Window length; the forecast covers the same number of steps.
    pub t: usize,
    pub n: usize,
    pub c: usize,
    pub d: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub k_imm: usize,
    pub k_smm: usize,
    pub k_tmm: usize,
    pub kernels: Vec<usize>,
    pub patch_len: usize,
    pub pca_patch: usize,
    pub prf_features: usize,
    pub tau: f64,
    pub gumbel_samples: usize,
    pub k_freq: usize,
    pub probsparse_factor: f64,
    pub gat_slope: f64,
    pub ablation: Ablation,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            t: 16,
            n: 8,
            c: 16,
            d: 32,
            heads: 2,
            encoder_layers: 3,
            decoder_layers: 1,
            k_imm: 1,
            k_smm: 1,
            k_tmm: 1,
            kernels: DEFAULT_KERNELS.to_vec(),
            patch_len: 3,
            pca_patch: 4,
            prf_features: 32,
            tau: 0.25,
            gumbel_samples: 4,
            k_freq: 2,
            probsparse_factor: 5.0,
            gat_slope: GatParams::DEFAULT_SLOPE,
            ablation: Ablation::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// The smallest configuration used for full-model gradient checks.
    pub fn minimal() -> Self {
        Self {
            t: 8,
            n: 4,
            c: 4,
            d: 8,
            encoder_layers: 1,
            decoder_layers: 1,
            pca_patch: 4,
            ..Self::default()
        }
    }

    pub fn kernel_bank(&self) -> Result<KernelBank> {
        KernelBank::new(&self.kernels)
    }

    pub fn patches(&self) -> usize {
        self.t / self.pca_patch
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.t < 4 {
            return fail(format!("window length {} below 4", self.t));
        }
        if self.n == 0 || self.c == 0 || self.d == 0 {
            return fail("node, feature and model extents must be positive".into());
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return fail(format!("model width {} not divisible by {} heads", self.d, self.heads));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return fail("encoder and decoder need at least one layer".into());
        }
        if self.k_imm == 0 || self.k_smm == 0 || self.k_tmm == 0 {
            return fail("module depths must be at least 1".into());
        }
        self.kernel_bank()?;
        if self.patch_len == 0 || self.patch_len > self.t {
            return fail(format!("patch length {} outside 1..={}", self.patch_len, self.t));
        }
        if self.pca_patch == 0 || !self.t.is_multiple_of(self.pca_patch) {
            return Err(Error::Indivisible {
                len: self.t,
                by: self.pca_patch,
            });
        }
        if self.prf_features == 0 || self.gumbel_samples == 0 || self.k_freq == 0 {
            return fail("feature dimension, Gumbel samples and k_freq must be positive".into());
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail(format!("temperature {} must be positive", self.tau));
        }
        if !(self.probsparse_factor > 0.0 && self.probsparse_factor.is_finite()) {
            return fail(format!("sparsity factor {} must be positive", self.probsparse_factor));
        }
        Ok(())
    }

    /// Closed-form number of learnable scalars.
    ///
    /// With `K` kernels, `F = 4D` hidden units and `PN` patch tokens:
    /// embeddings `3 (CD + pD^2)`, input decomposition `K`, each encoder
    /// layer `4D^2 K1 + (2D^2 + 2D) K2 + (22D^2 + 2PN) K3 + 3K + (2DF + F + D)`,
    /// each decoder layer the same plus `4D^2` cross attention, one more
    /// decomposition `K` and `4D^2` trend projectors, and `DC` for the output.
    pub fn param_count(&self) -> usize {
        let (c, d, p) = (self.c, self.d, self.patch_len);
        let k = self.kernels.len();
        let f = 4 * d;
        let pn = self.patches() * self.n;
        let ffn = 2 * d * f + f + d;
        let modules = 4 * d * d * self.k_imm + (2 * d * d + 2 * d) * self.k_smm + (22 * d * d + 2 * pn) * self.k_tmm;
        let enc = modules + 3 * k + ffn;
        let dec = enc + 4 * d * d + k + 4 * d * d;
        3 * (c * d + p * d * d) + k + self.encoder_layers * enc + self.decoder_layers * dec + d * c
    }
}
