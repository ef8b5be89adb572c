//! Audits on traced unit-key streams.
//!
//! For a unit key the per-token feedback is `h_t(d) = ((1 - b <d, k^2>)^2 - 1) / 2`
//! and the traced residual ratio is `q_t = 1 + 2 h_t(d_t)`. For any fixed
//! comparator `d`, with `eps_T(d) = mean_t 1/2 (1 - b <d, k^2>)^2` and
//! `R_T(d) = sum_t h_t(d_t) - h_t(d)`, AM-GM gives
//!
//! ```text
//! prod_t q_t <= (2 eps_T(d) + 2 R_T(d) / T)^T
//! ```

use nalgebra::{DMatrix, DVector};
use ndarray::{s, Array3, Array4};
use serde::{Deserialize, Serialize};

use super::{box_qp, log_le, AuditRecord, Verdict, QP_TOL};
use crate::error::{Error, Result};
use crate::precond::hypergrad_eval;
use crate::recurrent::{run_recurrent, Backbone, BackboneSpec, RecurrentOptions};
use crate::recurrent::lanes;
use crate::types::{
    FastWeightState, GateSequence, Orientation, PrecondConfig, PreconditionerState, ResidualRecord,
    ResidualTrace, TokenStream, WriteKeySequence, DEGENERATE_LOSS, UNIT_NORM_TOL,
};

/// Best diagonal comparator for one lane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsMinimum {
    pub d: Vec<f64>,
    pub eps: f64,
    pub iterations: usize,
    pub projected_grad_norm: f64,
    /// First-order stationarity on the box reached within tolerance.
    pub stationary: bool,
}

fn check_unit_keys(stream: &TokenStream) -> Result<()> {
    let dims = stream.dims();
    for b in 0..dims.batch {
        for t in 0..dims.length {
            for h in 0..dims.heads {
                let norm = stream.key(b, t, h).dot(&stream.key(b, t, h)).sqrt();
                if (norm - 1.0).abs() > UNIT_NORM_TOL {
                    return Err(Error::NotUnitNorm { index: vec![b, t, h], norm });
                }
            }
        }
    }
    Ok(())
}

fn eps_of(d: &[f64], keys: &[Vec<f64>], betas: &[f64]) -> f64 {
    let total: f64 = keys
        .iter()
        .zip(betas)
        .map(|(k, b)| {
            let a: f64 = k.iter().zip(d).map(|(ki, di)| di * ki * ki).sum();
            0.5 * (1.0 - b * a).powi(2)
        })
        .sum();
    total / keys.len().max(1) as f64
}

/// Minimizes `eps_T(d)` over `[lo, hi]^K` for one lane of unit keys.
pub fn minimize_eps_diag_lane(keys: &[Vec<f64>], betas: &[f64], lo: f64, hi: f64) -> EpsMinimum {
    let k = keys.first().map_or(0, Vec::len);
    let n = keys.len().max(1) as f64;
    let mut a = DVector::zeros(k);
    let mut m = DMatrix::zeros(k, k);
    for (key, &b) in keys.iter().zip(betas) {
        let s = DVector::from_iterator(k, key.iter().map(|x| x * x));
        a += &s * (b / n);
        m += &s * s.transpose() * (b * b / n);
    }
    let sol = box_qp(&a, &m, lo, hi, &DVector::from_element(k, 1.0));
    let d: Vec<f64> = sol.x.iter().copied().collect();
    EpsMinimum {
        eps: eps_of(&d, keys, betas),
        d,
        iterations: sol.iterations,
        projected_grad_norm: sol.projected_grad_norm,
        stationary: sol.projected_grad_norm <= QP_TOL,
    }
}

fn lane_keys(stream: &TokenStream, b: usize, h: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let t = stream.dims().length;
    let keys = (0..t).map(|i| stream.key(b, i, h).to_vec()).collect();
    let betas = (0..t).map(|i| stream.beta(b, i, h)).collect();
    (keys, betas)
}

/// Best diagonal comparator of every lane, `(d*: [B, H, K], eps: [B, H])`.
pub fn minimize_eps_diag(stream: &TokenStream, cfg: &PrecondConfig) -> Result<(Array3<f64>, Vec<EpsMinimum>)> {
    check_unit_keys(stream)?;
    let dims = stream.dims();
    let mut d = Array3::zeros((dims.batch, dims.heads, dims.key_dim));
    let mut out = Vec::new();
    for (b, h) in lanes(&dims) {
        let (keys, betas) = lane_keys(stream, b, h);
        let m = minimize_eps_diag_lane(&keys, &betas, cfg.d_min, cfg.d_max);
        for (i, v) in m.d.iter().enumerate() {
            d[[b, h, i]] = *v;
        }
        out.push(m);
    }
    Ok((d, out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparatorReport {
    pub name: String,
    pub d: Vec<f64>,
    pub eps: f64,
    pub regret: f64,
    /// `T log(2 eps + 2 R / T)`.
    #[serde(with = "super::extended_f64")]
    pub log_bound: f64,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneAudit {
    pub batch: usize,
    pub head: usize,
    pub tokens: usize,
    #[serde(with = "super::extended_f64")]
    pub log_prod_q: f64,
    pub comparators: Vec<ComparatorReport>,
    pub eps_min: EpsMinimum,
    /// `max |q_t - (1 + 2 h_t(d_t))|` over non-degenerate tokens.
    pub max_identity_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLocalReport {
    pub lanes: Vec<LaneAudit>,
    pub verdict: Verdict,
}

impl TokenLocalReport {
    /// One record per lane, for the minimized comparator.
    pub fn records(&self, seed: u64) -> Vec<AuditRecord> {
        self.lanes
            .iter()
            .map(|l| {
                let c = &l.comparators[0];
                AuditRecord {
                    theorem: "token_local_contraction".into(),
                    lhs: l.log_prod_q,
                    rhs: c.log_bound,
                    verdict: c.verdict,
                    seed,
                    note: format!("lane ({}, {}), comparator {}, eps {:.3e}", l.batch, l.head, c.name, c.eps),
                }
            })
            .collect()
    }
}

fn lane_records(trace: &ResidualTrace, b: usize, h: usize, len: usize) -> Result<Vec<ResidualRecord>> {
    let mut recs: Vec<ResidualRecord> = trace.lane(b, h).copied().collect();
    recs.sort_by_key(|r| r.t);
    if recs.len() != len || recs.iter().enumerate().any(|(i, r)| r.t != i) {
        return Err(Error::InvalidConfig(format!("trace lane ({b}, {h}) does not cover all {len} tokens")));
    }
    Ok(recs)
}

/// Checks the token-local contraction bound on every lane for the minimized
/// comparator, the final preconditioner and the initial one.
pub fn token_local_audit(
    trace: &ResidualTrace,
    stream: &TokenStream,
    write_keys: &WriteKeySequence,
    cfg: &PrecondConfig,
) -> Result<TokenLocalReport> {
    check_unit_keys(stream)?;
    let traj = write_keys.d_trajectory.as_ref().ok_or(Error::MissingTrajectory)?;
    let dims = stream.dims();
    let nt = dims.length;
    let mut out = Vec::new();
    for (b, h) in lanes(&dims) {
        let recs = lane_records(trace, b, h, nt)?;
        let (keys, betas) = lane_keys(stream, b, h);
        let eps_min = minimize_eps_diag_lane(&keys, &betas, cfg.d_min, cfg.d_max);
        let h_at = |d: &[f64], t: usize| -> Result<f64> {
            Ok(hypergrad_eval(ndarray::ArrayView1::from(d), stream.key(b, t, h), betas[t], cfg.epsilon)?.h_value)
        };
        let mut h_traj = Vec::with_capacity(nt);
        let mut max_identity_error = 0.0f64;
        for (t, r) in recs.iter().enumerate() {
            let d_t = traj.slice(s![b, t, h, ..]).to_vec();
            let ht = h_at(&d_t, t)?;
            if r.f_before >= DEGENERATE_LOSS {
                max_identity_error = max_identity_error.max((r.q - (1.0 + 2.0 * ht)).abs());
            }
            h_traj.push(ht);
        }
        let log_prod_q: f64 = recs.iter().map(|r| r.q.ln()).sum();
        let candidates = [
            ("minimized", eps_min.d.clone()),
            ("final", write_keys.d_final.slice(s![b, h, ..]).to_vec()),
            ("initial", traj.slice(s![b, 0, h, ..]).to_vec()),
        ];
        let mut comparators = Vec::new();
        for (name, d) in candidates {
            let mut regret = 0.0;
            for (t, ht) in h_traj.iter().enumerate() {
                regret += ht - h_at(&d, t)?;
            }
            let eps = eps_of(&d, &keys, &betas);
            let base = 2.0 * eps + 2.0 * regret / nt as f64;
            let log_bound = if base > 0.0 { nt as f64 * base.ln() } else { f64::NEG_INFINITY };
            comparators.push(ComparatorReport {
                name: name.to_string(),
                d,
                eps,
                regret,
                log_bound,
                verdict: Verdict::from_bool(log_le(log_prod_q, log_bound)),
            });
        }
        out.push(LaneAudit { batch: b, head: h, tokens: nt, log_prod_q, comparators, eps_min, max_identity_error });
    }
    let ok = out.iter().all(|l| l.comparators.iter().all(|c| !c.verdict.is_fail()));
    Ok(TokenLocalReport { lanes: out, verdict: Verdict::from_bool(ok) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatedLane {
    pub batch: usize,
    pub head: usize,
    pub classes: usize,
    /// `sum_c log F_c(S_T) / F_c(S_0)`.
    #[serde(with = "super::extended_f64")]
    pub lhs: f64,
    /// `sum_t log q_t`.
    #[serde(with = "super::extended_f64")]
    pub rhs: f64,
    pub rel_error: f64,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatedKeyReport {
    pub lanes: Vec<RepeatedLane>,
    pub verdict: Verdict,
}

pub const REPEATED_KEY_TOL: f64 = 1e-10;

fn class_loss(s: ndarray::ArrayView2<'_, f64>, k: &[f64], v: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (i, vi) in v.iter().enumerate() {
        let read: f64 = s.row(i).iter().zip(k).map(|(a, b)| a * b).sum();
        acc += (read - vi).powi(2);
    }
    0.5 * acc
}

/// Compares `prod_c F_c(S_T) / F_c(S_0)` with `prod_t q_t` on a `VxK`
/// stream whose keys come from a dictionary with disjoint supports and whose
/// targets are fixed per key.
pub fn repeated_key_audit(
    stream: &TokenStream,
    trace: &ResidualTrace,
    init_state: Option<&FastWeightState>,
    final_state: &FastWeightState,
) -> Result<RepeatedKeyReport> {
    if final_state.orientation() != Orientation::ValueByKey {
        return Err(Error::InvalidConfig("repeated-key audit needs a VxK state".into()));
    }
    let dims = stream.dims();
    let zeros = FastWeightState::zeros(Orientation::ValueByKey, dims.batch, dims.heads, dims.key_dim, dims.value_dim);
    let init = init_state.unwrap_or(&zeros);
    let mut out = Vec::new();
    for (b, h) in lanes(&dims) {
        let recs = lane_records(trace, b, h, dims.length)?;
        let mut classes: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
        for t in 0..dims.length {
            let k = stream.key(b, t, h).to_vec();
            let v = stream.value(b, t, h).to_vec();
            match classes.iter().find(|(ck, _)| ck.iter().zip(&k).all(|(x, y)| x.to_bits() == y.to_bits())) {
                Some((_, cv)) if cv != &v => {
                    return Err(Error::InvalidConfig(format!("token {t} of lane ({b}, {h}) changes its class target")))
                }
                Some(_) => {}
                None => classes.push((k, v)),
            }
        }
        for (i, (ki, _)) in classes.iter().enumerate() {
            for (kj, _) in &classes[i + 1..] {
                if ki.iter().zip(kj).any(|(x, y)| *x != 0.0 && *y != 0.0) {
                    return Err(Error::InvalidConfig("non-orthogonal dictionary: key supports overlap".into()));
                }
            }
        }
        let mut lhs = 0.0;
        for (k, v) in &classes {
            let f0 = class_loss(init.lane(b, h), k, v);
            let f1 = class_loss(final_state.lane(b, h), k, v);
            if f0 == 0.0 && f1 == 0.0 {
                continue;
            }
            lhs += f1.ln() - f0.ln();
        }
        let rhs: f64 = recs.iter().map(|r| r.q.ln()).sum();
        let rel_error = if lhs == rhs {
            0.0
        } else if lhs.is_finite() && rhs.is_finite() {
            (lhs - rhs).abs() / rhs.abs().max(1.0)
        } else {
            f64::INFINITY
        };
        out.push(RepeatedLane {
            batch: b,
            head: h,
            classes: classes.len(),
            lhs,
            rhs,
            rel_error,
            verdict: Verdict::from_bool(rel_error <= REPEATED_KEY_TOL),
        });
    }
    let ok = out.iter().all(|l| l.verdict == Verdict::Pass);
    Ok(RepeatedKeyReport { lanes: out, verdict: Verdict::from_bool(ok) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlternatingReport {
    pub tokens: usize,
    #[serde(with = "super::extended_f64")]
    pub log_prod_q: f64,
    pub final_state: f64,
    /// Least-squares fit of the whole stream.
    pub population_optimum: f64,
    pub distance: f64,
    pub verdict: Verdict,
}

/// Scalar stream `k_t = 1`, `v_t = (-1)^t` written with exact per-token
/// Newton steps (`b = 0.5`, `d = 2`): every residual ratio is zero while the
/// state keeps flipping sign instead of approaching the fit of the stream.
pub fn alternating_target_example(tokens: usize) -> Result<AlternatingReport> {
    if tokens == 0 {
        return Err(Error::InvalidConfig("need at least one token".into()));
    }
    let values = Array4::from_shape_fn((1, tokens, 1, 1), |(_, t, _, _)| if (t + 1) % 2 == 0 { 1.0 } else { -1.0 });
    let stream = TokenStream::new(
        Array4::ones((1, tokens, 1, 1)),
        Array4::ones((1, tokens, 1, 1)),
        values.clone(),
        Array3::from_elem((1, tokens, 1), 0.5),
    )?
    .with_unit_norm_keys()?;
    let precond = PreconditionerState::uniform(PrecondConfig::default(), 1, 1, 1, 2.0)?;
    let run = run_recurrent(
        &stream,
        &BackboneSpec::online(Backbone::DeltaNet),
        &GateSequence::none(),
        None,
        Some(&precond),
        &RecurrentOptions::default(),
    )?;
    let log_prod_q: f64 = run.trace.as_ref().expect("traced").records.iter().map(|r| r.q.ln()).sum();
    let final_state = run.final_state.tensor()[[0, 0, 0, 0]];
    let population_optimum = values.mean().unwrap_or(0.0);
    let distance = (final_state - population_optimum).abs();
    Ok(AlternatingReport {
        tokens,
        log_prod_q,
        final_state,
        population_optimum,
        distance,
        verdict: Verdict::from_bool(log_prod_q == f64::NEG_INFINITY && distance >= 0.5),
    })
}
