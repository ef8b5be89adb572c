//! Diagnostics behind the `osdn-diag` binary.
//!
//! Every command takes a [`DiagConfig`] and returns a report whose numeric
//! payload depends only on the config (seed included). Timings from
//! [`bench`] are kept apart from its checksums for that reason.

pub mod bench;
pub mod equiv;
pub mod replay;
pub mod synth;
pub mod theory;

pub use bench::{cmd_bench, BenchReport};
pub use equiv::{cmd_equiv, EquivReport};
pub use replay::{cmd_replay, ReplayReport};
pub use theory::{cmd_theory, TheoryReport};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::recurrent::Backbone;
use crate::types::{PrecondConfig, RetentionMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackboneArg {
    Dn,
    Gdn,
    Kda,
}

impl From<BackboneArg> for Backbone {
    fn from(b: BackboneArg) -> Self {
        match b {
            BackboneArg::Dn => Backbone::DeltaNet,
            BackboneArg::Gdn => Backbone::GatedDeltaNet,
            BackboneArg::Kda => Backbone::Kda,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DictionaryMode {
    /// Scaled standard-basis blocks with disjoint supports.
    Orthogonal,
    /// Normalized Gaussian vectors.
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum, Default)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

/// Settings shared by all commands. Each command reads the fields it needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagConfig {
    pub seed: u64,
    pub backbone: BackboneArg,
    pub batch: usize,
    pub length: usize,
    pub heads: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    pub chunk_size: usize,
    pub dict_size: usize,
    pub dictionary: DictionaryMode,
    /// Number of copies of the first segment in a replay stream.
    pub repeat: usize,
    pub prompts: usize,
    pub bins: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    /// Range of the state decay gates of gated backbones.
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub eta: f64,
    pub d_min: f64,
    pub d_max: f64,
    pub d0: f64,
    /// Constant preconditioner retention; `None` keeps `d` undecayed.
    pub retention: Option<f64>,
    /// Data-dependent retention gates drawn from `[retention_min, 1]`.
    pub apf: bool,
    pub retention_min: f64,
    pub tolerance: f64,
    pub tolerance_f32: f64,
    pub warmup: usize,
    pub repeats: usize,
    pub theory_seeds: usize,
    pub horizon: usize,
    pub audit_length: usize,
}

impl Default for DiagConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            backbone: BackboneArg::Dn,
            batch: 2,
            length: 512,
            heads: 2,
            key_dim: 16,
            value_dim: 16,
            chunk_size: 64,
            dict_size: 8,
            dictionary: DictionaryMode::Orthogonal,
            repeat: 2,
            prompts: 16,
            bins: 8,
            beta_min: 0.55,
            beta_max: 0.95,
            alpha_min: 0.95,
            alpha_max: 1.0,
            eta: 0.003,
            d_min: 0.5,
            d_max: 2.0,
            d0: 1.0,
            retention: None,
            apf: false,
            retention_min: 0.9,
            tolerance: 1e-9,
            tolerance_f32: 7e-3,
            warmup: 1,
            repeats: 5,
            theory_seeds: 10,
            horizon: 200,
            audit_length: 64,
        }
    }
}

/// Partial config: the shape of a config file and of the command-line flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigOverrides {
    /// Base seed; every stream and problem derives its own from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Backbone of the replay run.
    #[arg(long, global = true, value_enum)]
    pub backbone: Option<BackboneArg>,
    /// Batch size of generated streams.
    #[arg(long, global = true)]
    pub batch: Option<usize>,
    /// Tokens per stream.
    #[arg(long, global = true)]
    pub length: Option<usize>,
    /// Heads per stream.
    #[arg(long, global = true)]
    pub heads: Option<usize>,
    /// Key dimension.
    #[arg(long, global = true)]
    pub key_dim: Option<usize>,
    /// Value dimension.
    #[arg(long, global = true)]
    pub value_dim: Option<usize>,
    /// Chunk size of the chunkwise kernel.
    #[arg(long, global = true)]
    pub chunk_size: Option<usize>,
    /// Number of dictionary keys in typed-key streams.
    #[arg(long, global = true)]
    pub dict_size: Option<usize>,
    /// Dictionary construction.
    #[arg(long, global = true, value_enum)]
    pub dictionary: Option<DictionaryMode>,
    /// Copies of the first segment in a replay stream.
    #[arg(long, global = true)]
    pub repeat: Option<usize>,
    /// Independent streams aggregated by replay.
    #[arg(long, global = true)]
    pub prompts: Option<usize>,
    /// Relative-position bins.
    #[arg(long, global = true)]
    pub bins: Option<usize>,
    /// Lower end of the write-strength range.
    #[arg(long, global = true)]
    pub beta_min: Option<f64>,
    /// Upper end of the write-strength range.
    #[arg(long, global = true)]
    pub beta_max: Option<f64>,
    /// Lower end of the state decay gate range.
    #[arg(long, global = true)]
    pub alpha_min: Option<f64>,
    /// Upper end of the state decay gate range.
    #[arg(long, global = true)]
    pub alpha_max: Option<f64>,
    /// Preconditioner learning rate.
    #[arg(long, global = true)]
    pub eta: Option<f64>,
    /// Lower preconditioner bound.
    #[arg(long, global = true)]
    pub d_min: Option<f64>,
    /// Upper preconditioner bound.
    #[arg(long, global = true)]
    pub d_max: Option<f64>,
    /// Initial preconditioner value.
    #[arg(long, global = true)]
    pub d0: Option<f64>,
    /// Constant preconditioner retention.
    #[arg(long, global = true)]
    pub retention: Option<f64>,
    /// Use data-dependent preconditioner retention gates.
    #[arg(long, global = true)]
    pub apf: Option<bool>,
    /// Lower end of the retention gate range.
    #[arg(long, global = true)]
    pub retention_min: Option<f64>,
    /// Equivalence tolerance in 64-bit.
    #[arg(long, global = true)]
    pub tolerance: Option<f64>,
    /// Relative equivalence tolerance in 32-bit.
    #[arg(long, global = true)]
    pub tolerance_f32: Option<f64>,
    /// Untimed benchmark runs.
    #[arg(long, global = true)]
    pub warmup: Option<usize>,
    /// Timed benchmark runs (at least 5).
    #[arg(long, global = true)]
    pub repeats: Option<usize>,
    /// Problems and streams per theory audit.
    #[arg(long, global = true)]
    pub theory_seeds: Option<usize>,
    /// Steps of the population learner.
    #[arg(long, global = true)]
    pub horizon: Option<usize>,
    /// Tokens per token-local audit stream.
    #[arg(long, global = true)]
    pub audit_length: Option<usize>,
}

macro_rules! apply_fields {
    ($cfg:expr, $ov:expr, $($f:ident),* $(,)?) => {
        $(if let Some(v) = $ov.$f { $cfg.$f = v; })*
    };
}

impl DiagConfig {
    /// Overwrites every field set in `ov`.
    pub fn apply(&mut self, ov: &ConfigOverrides) {
        apply_fields!(
            self, ov, seed, backbone, batch, length, heads, key_dim, value_dim, chunk_size, dict_size,
            dictionary, repeat, prompts, bins, beta_min, beta_max, alpha_min, alpha_max, eta, d_min, d_max, d0,
            apf, retention_min, tolerance, tolerance_f32, warmup, repeats, theory_seeds, horizon, audit_length,
        );
        if ov.retention.is_some() {
            self.retention = ov.retention;
        }
    }

    /// Defaults, then the config file, then flags.
    pub fn resolve(file: Option<&ConfigOverrides>, flags: &ConfigOverrides) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(f) = file {
            cfg.apply(f);
        }
        cfg.apply(flags);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("batch", self.batch),
            ("length", self.length),
            ("heads", self.heads),
            ("key_dim", self.key_dim),
            ("value_dim", self.value_dim),
            ("chunk_size", self.chunk_size),
            ("dict_size", self.dict_size),
            ("repeat", self.repeat),
            ("prompts", self.prompts),
            ("bins", self.bins),
            ("theory_seeds", self.theory_seeds),
            ("horizon", self.horizon),
            ("audit_length", self.audit_length),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        let open = |x: f64| x > 0.0 && x < 1.0;
        if !(open(self.beta_min) && open(self.beta_max) && self.beta_min <= self.beta_max) {
            return Err(Error::InvalidConfig("need 0 < beta_min <= beta_max < 1".into()));
        }
        if !(self.alpha_min > 0.0 && self.alpha_min <= self.alpha_max && self.alpha_max <= 1.0) {
            return Err(Error::InvalidConfig("need 0 < alpha_min <= alpha_max <= 1".into()));
        }
        if !(self.retention_min > 0.0 && self.retention_min <= 1.0) {
            return Err(Error::InvalidConfig("need 0 < retention_min <= 1".into()));
        }
        if !(self.tolerance >= 0.0 && self.tolerance_f32 >= 0.0) {
            return Err(Error::InvalidConfig("tolerances must be non-negative".into()));
        }
        self.precond_config().validate()?;
        if !(self.d_min..=self.d_max).contains(&self.d0) {
            return Err(Error::InvalidConfig(format!("d0 = {} outside [{}, {}]", self.d0, self.d_min, self.d_max)));
        }
        Ok(())
    }

    pub fn precond_config(&self) -> PrecondConfig {
        let retention = match (self.apf, self.retention) {
            (true, _) => RetentionMode::DataDependent,
            (false, Some(r)) => RetentionMode::Constant(r),
            (false, None) => RetentionMode::None,
        };
        PrecondConfig::default()
            .with_eta(self.eta)
            .with_box(self.d_min, self.d_max)
            .with_retention(retention)
    }
}

/// Shortest round-trip decimal, with `inf`, `-inf` and `nan` spelled out.
pub(crate) fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x:?}")
    }
}

/// Writes rows through the `csv` crate into a string.
pub(crate) fn csv_string(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

/// Seed for sub-task `index` of a run seeded with `seed`.
pub(crate) fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layering_file_then_flags() {
        let file: ConfigOverrides = serde_json::from_str(r#"{"seed": 4, "eta": 0.1, "bins": 3}"#).unwrap();
        let flags = ConfigOverrides { eta: Some(0.2), ..Default::default() };
        let cfg = DiagConfig::resolve(Some(&file), &flags).unwrap();
        assert_eq!((cfg.seed, cfg.eta, cfg.bins), (4, 0.2, 3));
        assert_eq!(cfg.length, DiagConfig::default().length);
    }

    #[test]
    fn unknown_file_keys_are_rejected() {
        assert!(serde_json::from_str::<ConfigOverrides>(r#"{"sed": 4}"#).is_err());
    }

    #[test]
    fn validation() {
        let bad = [
            ConfigOverrides { repeat: Some(0), ..Default::default() },
            ConfigOverrides { beta_max: Some(1.0), ..Default::default() },
            ConfigOverrides { d0: Some(3.0), ..Default::default() },
            ConfigOverrides { alpha_min: Some(0.0), ..Default::default() },
        ];
        for ov in &bad {
            assert!(DiagConfig::resolve(None, ov).is_err(), "{ov:?}");
        }
        let apf = DiagConfig::resolve(None, &ConfigOverrides { apf: Some(true), ..Default::default() }).unwrap();
        assert_eq!(apf.precond_config().retention, RetentionMode::DataDependent);
    }

    #[test]
    fn float_formatting() {
        assert_eq!(fmt_f64(0.1), "0.1");
        assert_eq!(fmt_f64(f64::NEG_INFINITY), "-inf");
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
    }
}
