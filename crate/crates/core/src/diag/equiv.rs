//! Chunkwise against recurrent over a grid of shapes and chunk sizes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::synth::random_stream;
use super::{csv_string, derive_seed, fmt_f64, DiagConfig, OutputFormat};
use crate::chunk::{chunk_forward, ChunkOptions};
use crate::error::Result;
use crate::recurrent::{run_recurrent, Backbone, BackboneSpec, RecurrentOptions};
use crate::types::{Dims, PreconditionerState};

/// Shape and variant of one grid case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivCase {
    pub backbone: String,
    pub variant: String,
    pub dims: Dims,
    pub chunk_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivRow {
    #[serde(flatten)]
    pub case: EquivCase,
    pub output_err: f64,
    pub state_err: f64,
    /// Worst relative error of the 32-bit path on outputs and final state.
    pub rel_err_f32: f64,
    pub floored_entries: u64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivReport {
    pub seed: u64,
    pub tolerance: f64,
    pub tolerance_f32: f64,
    pub rows: Vec<EquivRow>,
}

const VARIANTS: [(Backbone, bool); 6] = [
    (Backbone::DeltaNet, false),
    (Backbone::DeltaNet, true),
    (Backbone::GatedDeltaNet, false),
    (Backbone::GatedDeltaNet, true),
    (Backbone::Kda, false),
    (Backbone::Kda, true),
];

/// `B in {1,2}, T in {32,128}, H in {1,2}, K in {8,16}, V in {8,16}`,
/// `C in {1,16,32,T}`, for each of the six variants.
pub fn default_grid() -> Vec<(Backbone, bool, Dims, usize)> {
    let mut out = Vec::new();
    for (backbone, online) in VARIANTS {
        for batch in [1, 2] {
            for length in [32, 128] {
                for heads in [1, 2] {
                    for key_dim in [8, 16] {
                        for value_dim in [8, 16] {
                            let dims = Dims { batch, length, heads, key_dim, value_dim };
                            for c in [1, 16, 32, length] {
                                out.push((backbone, online, dims, c));
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn max_abs_diff<'a>(a: impl Iterator<Item = &'a f64>, b: impl Iterator<Item = f64>) -> f64 {
    a.zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

fn max_abs<'a>(a: impl Iterator<Item = &'a f64>) -> f64 {
    a.fold(0.0f64, |m, x| m.max(x.abs()))
}

fn run_case(cfg: &DiagConfig, index: usize, backbone: Backbone, online: bool, dims: Dims, c: usize) -> Result<EquivRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, index as u64));
    let syn = random_stream(&mut rng, dims, cfg)?;
    let spec = if online { BackboneSpec::online(backbone) } else { BackboneSpec::host(backbone) };
    let precond = PreconditionerState::uniform(cfg.precond_config(), dims.batch, dims.heads, dims.key_dim, cfg.d0)?;
    let opts = RecurrentOptions { record_trace: false, position_bins: 1 };
    let reference = run_recurrent(&syn.stream, &spec, &syn.gates, None, online.then_some(&precond), &opts)?;
    let wk = &reference.write_keys.write_keys;
    let chunk_opts = ChunkOptions::new(c);
    let c64 = chunk_forward::<f64>(backbone, &syn.stream, wk, &syn.gates, None, &chunk_opts)?;
    let c32 = chunk_forward::<f32>(backbone, &syn.stream, wk, &syn.gates, None, &chunk_opts)?;
    let ref_out = &reference.outputs;
    let ref_state = reference.final_state.tensor();
    let output_err = max_abs_diff(ref_out.iter(), c64.outputs.iter().copied());
    let state_err = max_abs_diff(ref_state.iter(), c64.final_state.iter().copied());
    let rel = |err: f64, scale: f64| err / scale.max(f64::MIN_POSITIVE);
    let rel_err_f32 = rel(max_abs_diff(ref_out.iter(), c32.outputs.iter().map(|x| *x as f64)), max_abs(ref_out.iter())).max(
        rel(max_abs_diff(ref_state.iter(), c32.final_state.iter().map(|x| *x as f64)), max_abs(ref_state.iter())),
    );
    let pass = output_err <= cfg.tolerance && state_err <= cfg.tolerance && rel_err_f32 <= cfg.tolerance_f32;
    Ok(EquivRow {
        case: EquivCase {
            backbone: BackboneSpec::host(backbone).label(),
            variant: spec.label(),
            dims,
            chunk_size: c,
        },
        output_err,
        state_err,
        rel_err_f32,
        floored_entries: c64.diagnostics.floored_entries,
        pass,
    })
}

/// Runs the default grid; cases run in parallel and are reported in grid order.
pub fn cmd_equiv(cfg: &DiagConfig) -> Result<EquivReport> {
    let grid = default_grid();
    let rows = grid
        .par_iter()
        .enumerate()
        .map(|(i, &(backbone, online, dims, c))| run_case(cfg, i, backbone, online, dims, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(EquivReport { seed: cfg.seed, tolerance: cfg.tolerance, tolerance_f32: cfg.tolerance_f32, rows })
}

impl EquivReport {
    pub fn ok(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    /// Case with the largest 64-bit error relative to the tolerance.
    pub fn worst(&self) -> Option<&EquivRow> {
        self.rows.iter().max_by(|a, b| {
            let ka = a.output_err.max(a.state_err);
            let kb = b.output_err.max(b.state_err);
            ka.total_cmp(&kb)
        })
    }

    pub fn render(&self, format: OutputFormat) -> Result<String> {
        match format {
            OutputFormat::Json => Ok(serde_json::to_string_pretty(self)? + "\n"),
            OutputFormat::Csv => csv_string(
                &[
                    "backbone", "variant", "batch", "length", "heads", "key_dim", "value_dim", "chunk_size",
                    "output_err", "state_err", "rel_err_f32", "floored_entries", "pass",
                ],
                self.rows.iter().map(|r| {
                    let d = r.case.dims;
                    vec![
                        r.case.backbone.clone(),
                        r.case.variant.clone(),
                        d.batch.to_string(),
                        d.length.to_string(),
                        d.heads.to_string(),
                        d.key_dim.to_string(),
                        d.value_dim.to_string(),
                        r.case.chunk_size.to_string(),
                        fmt_f64(r.output_err),
                        fmt_f64(r.state_err),
                        fmt_f64(r.rel_err_f32),
                        r.floored_entries.to_string(),
                        r.pass.to_string(),
                    ]
                }),
            ),
        }
    }
}
