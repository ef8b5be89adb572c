//! Bundle of theory audits with one [`AuditRecord`] per check.

use nalgebra::DMatrix;
use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::synth::random_stream;
use super::{csv_string, derive_seed, fmt_f64, DiagConfig, OutputFormat};
use crate::error::Result;
use crate::recurrent::{run_recurrent, Backbone, BackboneSpec, RecurrentOptions};
use crate::theory::{
    alternating_target_example, newton_step_check, repeated_key_audit, run_population_osgm, token_local_audit,
    AuditRecord, Learner, PopulationConfig, QuadraticProblem, Verdict,
};
use crate::types::{Dims, GateSequence, PreconditionerState, TokenStream};

/// Largest key dimension of the population problems.
const MAX_POPULATION_DIM: usize = 8;
const NEWTON_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub seed: u64,
    pub passed: usize,
    pub failed: usize,
    pub not_applicable: usize,
    pub records: Vec<AuditRecord>,
}

fn population_records(cfg: &DiagConfig, index: usize, horizon: usize) -> Result<Vec<AuditRecord>> {
    let seed = derive_seed(cfg.seed, 1_000 + index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = cfg.key_dim.min(MAX_POPULATION_DIM);
    let v = cfg.value_dim.min(MAX_POPULATION_DIM);
    let problem = QuadraticProblem::random(&mut rng, k, v, 0.1, 4.0, 0.1)?;
    let pcfg = PopulationConfig { horizon, ..Default::default() };
    let rep = run_population_osgm(&problem, &pcfg);
    let s = DMatrix::from_fn(v, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    let newton = newton_step_check(&problem, &s);
    Ok(vec![
        AuditRecord {
            theorem: "population_regret_bound".into(),
            lhs: rep.ledger.log_prod_r,
            rhs: rep.log_bound,
            verdict: rep.verdict,
            seed,
            note: format!(
                "diagonal learner, guard on, K={k}, T={horizon}, {} steps audited, worst prefix margin {:.3e}",
                rep.ledger.steps.len(),
                rep.worst_prefix_margin
            ),
        },
        AuditRecord {
            theorem: "newton_exactness".into(),
            lhs: newton,
            rhs: NEWTON_TOL,
            verdict: Verdict::from_bool(newton <= NEWTON_TOL),
            seed,
            note: "||grad f|| ratio after one step with D = pinv(Sigma)".into(),
        },
    ])
}

fn learner_record(cfg: &DiagConfig, learner: Learner, guard: bool) -> Result<AuditRecord> {
    let seed = derive_seed(cfg.seed, 2_000 + learner as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = cfg.key_dim.min(MAX_POPULATION_DIM);
    let problem = QuadraticProblem::random(&mut rng, k, cfg.value_dim.min(MAX_POPULATION_DIM), 0.1, 4.0, 0.0)?;
    let rep = run_population_osgm(&problem, &PopulationConfig { learner, guard, horizon: cfg.horizon, ..Default::default() });
    Ok(AuditRecord {
        theorem: "population_regret_bound".into(),
        lhs: rep.ledger.log_prod_r,
        rhs: rep.log_bound,
        verdict: rep.verdict,
        seed,
        note: format!("{learner:?} learner, guard {}, monotone {}", if guard { "on" } else { "off" }, rep.monotone)
            .to_lowercase(),
    })
}

fn token_records(cfg: &DiagConfig, index: usize, length: usize) -> Result<Vec<AuditRecord>> {
    let seed = derive_seed(cfg.seed, 3_000 + index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = Dims { batch: 1, length, heads: cfg.heads, key_dim: cfg.key_dim, value_dim: cfg.value_dim };
    let syn = random_stream(&mut rng, dims, cfg)?;
    let pc = cfg.precond_config().with_retention(crate::types::RetentionMode::None);
    let precond = PreconditionerState::uniform(pc, 1, cfg.heads, cfg.key_dim, cfg.d0)?;
    let run = run_recurrent(
        &syn.stream,
        &BackboneSpec::online(Backbone::DeltaNet),
        &GateSequence::none(),
        None,
        Some(&precond),
        &RecurrentOptions::default(),
    )?;
    let rep = token_local_audit(run.trace.as_ref().expect("traced"), &syn.stream, &run.write_keys, &pc)?;
    let mut out = rep.records(seed);
    for lane in &rep.lanes {
        let m = &lane.eps_min;
        let others = lane.comparators[1..].iter().map(|c| c.eps).fold(f64::INFINITY, f64::min);
        out.push(AuditRecord {
            theorem: "eps_diag_minimization".into(),
            lhs: m.eps,
            rhs: others,
            verdict: Verdict::from_bool(m.stationary && m.eps <= others + 1e-12),
            seed,
            note: format!(
                "lane ({}, {}), {} iterations, projected gradient {:.3e}",
                lane.batch, lane.head, m.iterations, m.projected_grad_norm
            ),
        });
    }
    Ok(out)
}

/// Orthogonal dictionary stream with one fixed target and `beta` per class,
/// each class visited `reps` times in round-robin order.
fn fixed_target_stream(cfg: &DiagConfig, rng: &mut ChaCha8Rng, reps: usize) -> Result<TokenStream> {
    let k = cfg.key_dim;
    let classes = cfg.dict_size.min(k);
    let block = k / classes;
    let t = classes * reps;
    let v = cfg.value_dim;
    let targets: Vec<f64> = (0..classes * v).map(|_| rng.sample(StandardNormal)).collect();
    let betas: Vec<f64> = (0..classes).map(|_| rng.gen_range(cfg.beta_min..=cfg.beta_max)).collect();
    let w = 1.0 / (block as f64).sqrt();
    let stream = TokenStream::new(
        Array4::from_shape_fn((1, t, 1, k), |_| rng.sample(StandardNormal)),
        Array4::from_shape_fn((1, t, 1, k), |(_, i, _, j)| if j / block == i % classes { w } else { 0.0 }),
        Array4::from_shape_fn((1, t, 1, v), |(_, i, _, j)| targets[(i % classes) * v + j]),
        Array3::from_shape_fn((1, t, 1), |(_, i, _)| betas[i % classes]),
    )?;
    if k % classes == 0 {
        stream.with_unit_norm_keys()
    } else {
        stream.normalize_keys()
    }
}

fn repeated_key_record(cfg: &DiagConfig) -> Result<AuditRecord> {
    let seed = derive_seed(cfg.seed, 4_000);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stream = fixed_target_stream(cfg, &mut rng, 4)?;
    let precond = PreconditionerState::uniform(cfg.precond_config().with_retention(crate::types::RetentionMode::None), 1, 1, cfg.key_dim, cfg.d0)?;
    let run = run_recurrent(
        &stream,
        &BackboneSpec::online(Backbone::DeltaNet),
        &GateSequence::none(),
        None,
        Some(&precond),
        &RecurrentOptions::default(),
    )?;
    let rep = repeated_key_audit(&stream, run.trace.as_ref().expect("traced"), None, &run.final_state)?;
    let lane = &rep.lanes[0];
    Ok(AuditRecord {
        theorem: "repeated_key_identity".into(),
        lhs: lane.lhs,
        rhs: lane.rhs,
        verdict: rep.verdict,
        seed,
        note: format!("{} classes x 4 visits, relative log error {:.3e}", lane.classes, lane.rel_error),
    })
}

fn alternating_record(cfg: &DiagConfig) -> Result<AuditRecord> {
    let r = alternating_target_example(cfg.audit_length)?;
    Ok(AuditRecord {
        theorem: "alternating_target".into(),
        lhs: r.log_prod_q,
        rhs: r.distance,
        verdict: r.verdict,
        seed: cfg.seed,
        note: format!("log prod q vs |S_T - S_pop*| over T={}", r.tokens),
    })
}

/// Population audits on `theory_seeds` problems (plus `T = 1`, the dense
/// learner and an unguarded overshooting learner), token-local and
/// eps-minimization audits on `theory_seeds` streams (plus `T = 1`), the
/// repeated-key identity and the alternating-target example.
pub fn cmd_theory(cfg: &DiagConfig) -> Result<TheoryReport> {
    cfg.validate()?;
    let n = cfg.theory_seeds;
    let mut groups: Vec<Vec<AuditRecord>> = (0..=n)
        .into_par_iter()
        .map(|i| population_records(cfg, i, if i == n { 1 } else { cfg.horizon }))
        .collect::<Result<_>>()?;
    groups.push(vec![learner_record(cfg, Learner::Dense, true)?, learner_record(cfg, Learner::Adversarial, false)?]);
    groups.extend(
        (0..=n)
            .into_par_iter()
            .map(|i| token_records(cfg, i, if i == n { 1 } else { cfg.audit_length }))
            .collect::<Result<Vec<_>>>()?,
    );
    groups.push(vec![repeated_key_record(cfg)?, alternating_record(cfg)?]);
    let records: Vec<AuditRecord> = groups.into_iter().flatten().collect();
    let count = |v: Verdict| records.iter().filter(|r| r.verdict == v).count();
    Ok(TheoryReport {
        seed: cfg.seed,
        passed: count(Verdict::Pass),
        failed: count(Verdict::Fail),
        not_applicable: count(Verdict::NotApplicable),
        records,
    })
}

impl TheoryReport {
    pub fn ok(&self) -> bool {
        self.failed == 0
    }

    pub fn render(&self, format: OutputFormat) -> Result<String> {
        match format {
            OutputFormat::Json => Ok(serde_json::to_string_pretty(self)? + "\n"),
            OutputFormat::Csv => csv_string(
                &["theorem", "lhs", "rhs", "verdict", "seed", "note"],
                self.records.iter().map(|r| {
                    let verdict = serde_json::to_value(r.verdict).ok().and_then(|v| v.as_str().map(String::from));
                    vec![
                        r.theorem.clone(),
                        fmt_f64(r.lhs),
                        fmt_f64(r.rhs),
                        verdict.unwrap_or_default(),
                        r.seed.to_string(),
                        r.note.clone(),
                    ]
                }),
            ),
        }
    }
}
