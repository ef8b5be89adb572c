//! Wall-clock medians for phase 1, the chunkwise forward and the recurrent
//! forward of each online-scaled backbone.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::synth::random_stream;
use super::{csv_string, derive_seed, fmt_f64, DiagConfig, OutputFormat};
use crate::chunk::{chunk_forward, ChunkOptions};
use crate::error::{Error, Result};
use crate::precond::phase1_sweep;
use crate::recurrent::{run_phase2, Backbone, BackboneSpec, RecurrentOptions};
use crate::types::{Dims, PreconditionerState};

pub const MIN_REPEATS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub backbone: String,
    pub stage: String,
    pub tokens: usize,
    pub median_seconds: f64,
    pub tokens_per_sec: f64,
}

/// Numeric outputs of the benchmarked kernels; independent of timing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchChecksum {
    pub backbone: String,
    pub write_keys: f64,
    pub chunk_outputs: f64,
    pub recurrent_outputs: f64,
    /// Every timed repeat reproduced the first run bitwise.
    pub stable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// `(backbone, phase-1 time as a percentage of phase 1 + chunkwise)`.
    pub phase1_share_pct: Vec<(String, f64)>,
    pub checksums: Vec<BenchChecksum>,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Runs `f` `warmup` times untimed, then `repeats` timed; returns the median
/// and whether every timed result equals the first.
fn time<T: PartialEq>(warmup: usize, repeats: usize, mut f: impl FnMut() -> Result<T>) -> Result<(f64, T, bool)> {
    let first = f()?;
    for _ in 1..warmup {
        f()?;
    }
    let mut times = Vec::with_capacity(repeats);
    let mut stable = true;
    for _ in 0..repeats {
        let start = Instant::now();
        let out = f()?;
        times.push(start.elapsed().as_secs_f64());
        stable &= out == first;
    }
    Ok((median(times), first, stable))
}

pub fn cmd_bench(cfg: &DiagConfig) -> Result<BenchReport> {
    cfg.validate()?;
    if cfg.warmup == 0 {
        return Err(Error::InvalidConfig("warmup must be at least 1".into()));
    }
    if cfg.repeats < MIN_REPEATS {
        return Err(Error::InvalidConfig(format!("repeats must be at least {MIN_REPEATS}")));
    }
    let dims = Dims {
        batch: cfg.batch,
        length: cfg.length,
        heads: cfg.heads,
        key_dim: cfg.key_dim,
        value_dim: cfg.value_dim,
    };
    let tokens = dims.batch * dims.length * dims.heads;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0));
    let syn = random_stream(&mut rng, dims, cfg)?;
    let precond = PreconditionerState::uniform(cfg.precond_config(), dims.batch, dims.heads, dims.key_dim, cfg.d0)?;
    let opts = RecurrentOptions { record_trace: false, position_bins: 1 };
    let chunk_opts = ChunkOptions::new(cfg.chunk_size);

    let mut rows = Vec::new();
    let mut shares = Vec::new();
    let mut checksums = Vec::new();
    for backbone in [Backbone::DeltaNet, Backbone::GatedDeltaNet, Backbone::Kda] {
        let spec = if cfg.apf { BackboneSpec::online_apf(backbone) } else { BackboneSpec::online(backbone) };
        spec.validate(&dims, &syn.gates, Some(&precond))?;
        let label = spec.label();
        let (t1, wk, s1) = time(cfg.warmup, cfg.repeats, || phase1_sweep(&syn.stream, &precond, &syn.gates, false).map(|w| w.write_keys))?;
        let (tc, chunk_out, s2) = time(cfg.warmup, cfg.repeats, || {
            chunk_forward::<f64>(backbone, &syn.stream, &wk, &syn.gates, None, &chunk_opts).map(|o| o.outputs)
        })?;
        let (tr, rec_out, s3) = time(cfg.warmup, cfg.repeats, || {
            run_phase2(&syn.stream, backbone, &syn.gates, &wk, None, &opts, false).map(|o| o.0)
        })?;
        for (stage, secs) in [("phase1", t1), ("chunk", tc), ("recurrent", tr)] {
            rows.push(BenchRow {
                backbone: label.clone(),
                stage: stage.into(),
                tokens,
                median_seconds: secs,
                tokens_per_sec: tokens as f64 / secs.max(f64::MIN_POSITIVE),
            });
        }
        shares.push((label.clone(), 100.0 * t1 / (t1 + tc).max(f64::MIN_POSITIVE)));
        checksums.push(BenchChecksum {
            backbone: label,
            write_keys: wk.sum(),
            chunk_outputs: chunk_out.sum(),
            recurrent_outputs: rec_out.sum(),
            stable: s1 && s2 && s3,
        });
    }
    Ok(BenchReport { rows, phase1_share_pct: shares, checksums })
}

impl BenchReport {
    pub fn ok(&self) -> bool {
        self.checksums.iter().all(|c| c.stable)
    }

    pub fn render(&self, format: OutputFormat) -> Result<String> {
        match format {
            OutputFormat::Json => Ok(serde_json::to_string_pretty(self)? + "\n"),
            OutputFormat::Csv => csv_string(
                &["backbone", "stage", "tokens", "median_seconds", "tokens_per_sec", "phase1_share_pct"],
                self.rows.iter().map(|r| {
                    let share = self.phase1_share_pct.iter().find(|(b, _)| *b == r.backbone).map_or(0.0, |s| s.1);
                    vec![
                        r.backbone.clone(),
                        r.stage.clone(),
                        r.tokens.to_string(),
                        fmt_f64(r.median_seconds),
                        fmt_f64(r.tokens_per_sec),
                        format!("{share:.2}"),
                    ]
                }),
            ),
        }
    }

    /// The timing-free part of the report.
    pub fn render_checksums(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.checksums)? + "\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DiagConfig {
        DiagConfig { batch: 1, heads: 1, length: 64, chunk_size: 16, ..Default::default() }
    }

    #[test]
    fn repeats_reproduce_outputs() {
        let a = cmd_bench(&small()).unwrap();
        let b = cmd_bench(&small()).unwrap();
        assert!(a.ok());
        assert_eq!(a.render_checksums().unwrap(), b.render_checksums().unwrap());
        assert_eq!(a.rows.len(), 9);
        for (_, s) in &a.phase1_share_pct {
            assert!((0.0..=100.0).contains(s));
        }
        for c in &a.checksums {
            assert!((c.chunk_outputs - c.recurrent_outputs).abs() <= 1e-8 * (1.0 + c.recurrent_outputs.abs()));
        }
    }

    #[test]
    fn needs_warmup_and_five_repeats() {
        assert!(cmd_bench(&DiagConfig { warmup: 0, ..small() }).is_err());
        assert!(cmd_bench(&DiagConfig { repeats: 4, ..small() }).is_err());
    }
}
