//! Residual-ratio replay on repeated typed-key streams.
//!
//! Each prompt is a dictionary stream whose first segment is repeated. The
//! host (`d = 1`) and the online-scaled variant of the same backbone run on
//! identical streams, and `q_geo = exp(mean log q_t)` is aggregated over
//! tokens, lanes and prompts: overall, on the first pass, on the repeated
//! passes, per relative-position bin and per dictionary class.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::synth::{dictionary_stream, Synthetic};
use super::{csv_string, derive_seed, fmt_f64, DiagConfig, OutputFormat};
use crate::error::Result;
use crate::recurrent::{run_recurrent, Backbone, BackboneSpec, RecurrentOptions};
use crate::types::{position_bin, Dims, PreconditionerState, LOG_FLOOR};

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct LogAcc {
    log_sum: f64,
    n: usize,
    floored: usize,
}

impl LogAcc {
    fn push(&mut self, q: f64) {
        self.n += 1;
        if q < LOG_FLOOR {
            self.floored += 1;
            self.log_sum += LOG_FLOOR.ln();
        } else {
            self.log_sum += q.ln();
        }
    }

    fn merge(&mut self, o: &LogAcc) {
        self.log_sum += o.log_sum;
        self.n += o.n;
        self.floored += o.floored;
    }

    fn q_geo(&self) -> f64 {
        (self.log_sum / self.n as f64).exp()
    }
}

/// Buckets in report order: all, first pass, repeated, bins, classes.
#[derive(Debug, Clone)]
struct Buckets {
    acc: Vec<LogAcc>,
    bins: usize,
}

impl Buckets {
    fn new(bins: usize, classes: usize) -> Self {
        Self { acc: vec![LogAcc::default(); 3 + bins + classes], bins }
    }

    fn names(&self) -> Vec<String> {
        let classes = self.acc.len() - 3 - self.bins;
        let mut v = vec!["all".to_string(), "first_pass".into(), "repeated".into()];
        v.extend((0..self.bins).map(|i| format!("bin{i:02}")));
        v.extend((0..classes).map(|c| format!("class{c:02}")));
        v
    }

    fn merge(&mut self, o: &Buckets) {
        for (a, b) in self.acc.iter_mut().zip(&o.acc) {
            a.merge(b);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayRow {
    pub backbone: String,
    pub variant: String,
    pub bin: String,
    #[serde(with = "crate::theory::extended_f64")]
    pub q_geo: f64,
    pub n_tokens: usize,
    /// Tokens with `q_t < 1e-300`, logged at the floor.
    pub floored: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRange {
    pub index: usize,
    pub start: usize,
    pub end: usize,
    /// Pass (0 = first) containing the bin's first token.
    pub pass: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub config: DiagConfig,
    /// Token positions where a repeated pass starts.
    pub seams: Vec<usize>,
    pub bins: Vec<BinRange>,
    pub rows: Vec<ReplayRow>,
    /// `q_geo(os) / q_geo(host)` overall.
    pub ratio_overall: f64,
    /// `q_geo(os) / q_geo(host)` on the repeated passes; `None` when `repeat = 1`.
    pub ratio_repeated: Option<f64>,
}

fn prompt_buckets(syn: &Synthetic, spec: &BackboneSpec, cfg: &DiagConfig) -> Result<Buckets> {
    let dims = syn.stream.dims();
    let precond = PreconditionerState::uniform(cfg.precond_config(), dims.batch, dims.heads, dims.key_dim, cfg.d0)?;
    let opts = RecurrentOptions { record_trace: true, position_bins: cfg.bins };
    let run = run_recurrent(&syn.stream, spec, &syn.gates, None, spec.online_scaled.then_some(&precond), &opts)?;
    let classes = syn.classes.as_ref().expect("dictionary stream");
    let mut out = Buckets::new(cfg.bins, cfg.dict_size);
    for r in &run.trace.expect("traced").records {
        let a = &mut out.acc;
        a[0].push(r.q);
        a[if r.t < syn.segment { 1 } else { 2 }].push(r.q);
        a[3 + position_bin(r.t, dims.length, cfg.bins)].push(r.q);
        a[3 + cfg.bins + classes[[r.batch, r.t, r.head]]].push(r.q);
    }
    Ok(out)
}

pub fn cmd_replay(cfg: &DiagConfig) -> Result<ReplayReport> {
    cfg.validate()?;
    let backbone: Backbone = cfg.backbone.into();
    let host = BackboneSpec::host(backbone);
    let os = if cfg.apf { BackboneSpec::online_apf(backbone) } else { BackboneSpec::online(backbone) };
    let dims = Dims {
        batch: cfg.batch,
        length: cfg.length,
        heads: cfg.heads,
        key_dim: cfg.key_dim,
        value_dim: cfg.value_dim,
    };
    let per_prompt = (0..cfg.prompts)
        .into_par_iter()
        .map(|p| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, p as u64));
            let syn = dictionary_stream(&mut rng, dims, cfg)?;
            Ok((prompt_buckets(&syn, &host, cfg)?, prompt_buckets(&syn, &os, cfg)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut totals = (Buckets::new(cfg.bins, cfg.dict_size), Buckets::new(cfg.bins, cfg.dict_size));
    for (h, o) in &per_prompt {
        totals.0.merge(h);
        totals.1.merge(o);
    }

    let names = totals.0.names();
    let mut rows = Vec::new();
    for (spec, b) in [(&host, &totals.0), (&os, &totals.1)] {
        for (name, acc) in names.iter().zip(&b.acc) {
            if acc.n == 0 {
                continue;
            }
            rows.push(ReplayRow {
                backbone: host.label(),
                variant: spec.label(),
                bin: name.clone(),
                q_geo: acc.q_geo(),
                n_tokens: acc.n,
                floored: acc.floored,
            });
        }
    }
    let segment = cfg.length / cfg.repeat;
    let bins = (0..cfg.bins)
        .map(|i| {
            let start = (0..cfg.length).find(|&t| position_bin(t, cfg.length, cfg.bins) == i).unwrap_or(cfg.length);
            let end = (start..cfg.length).find(|&t| position_bin(t, cfg.length, cfg.bins) != i).unwrap_or(cfg.length);
            BinRange { index: i, start, end, pass: start / segment }
        })
        .collect();
    let ratio = |i: usize| totals.1.acc[i].q_geo() / totals.0.acc[i].q_geo();
    Ok(ReplayReport {
        config: cfg.clone(),
        seams: (1..cfg.repeat).map(|r| r * segment).collect(),
        bins,
        rows,
        ratio_overall: ratio(0),
        ratio_repeated: (cfg.repeat > 1).then(|| ratio(2)),
    })
}

impl ReplayReport {
    pub fn row(&self, variant: &str, bin: &str) -> Option<&ReplayRow> {
        self.rows.iter().find(|r| r.variant == variant && r.bin == bin)
    }

    pub fn render(&self, format: OutputFormat) -> Result<String> {
        match format {
            OutputFormat::Json => Ok(serde_json::to_string_pretty(self)? + "\n"),
            OutputFormat::Csv => csv_string(
                &["backbone", "variant", "bin", "q_geo", "n_tokens"],
                self.rows.iter().map(|r| {
                    vec![r.backbone.clone(), r.variant.clone(), r.bin.clone(), fmt_f64(r.q_geo), r.n_tokens.to_string()]
                }),
            ),
        }
    }

    /// One-line direction-of-effect summary.
    pub fn summary(&self) -> String {
        match self.ratio_repeated {
            Some(r) => format!(
                "q_geo ratio os/host: overall {:.6}, repeated passes {:.6} ({})",
                self.ratio_overall,
                r,
                if r < 1.0 { "os below host" } else { "os not below host" }
            ),
            None => format!("q_geo ratio os/host: overall {:.6}", self.ratio_overall),
        }
    }
}
