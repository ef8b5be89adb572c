//! Phase 1: the online diagonal preconditioner.
//!
//! For a delta-rule write `S' = S + beta u (d * k)^T` the one-step relative
//! loss change on `f(S) = 1/2 ||S k - v||^2` is
//!
//! ```text
//! h(d) = ((1 - beta <d, k^2>)^2 - 1) / (2 ||k||^2)
//! ```
//!
//! which involves neither `S`, `v` nor the residual. Online gradient descent on
//! `h` followed by a box clamp is therefore an affine-then-project recurrence
//! over the key stream alone, and the write keys `k~_t = d_t * k_t` can be
//! materialised before any state-side work.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView1};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::types::{
    GateSequence, PrecondConfig, PreconditionerState, RetentionMode, TokenStream, WriteKeySequence,
};

/// Closed-form hypergradient feedback at one token.
#[derive(Debug, Clone, PartialEq)]
pub struct HypergradSample {
    pub h_value: f64,
    pub h_grad: Array1<f64>,
    /// `<d, k^2>`.
    pub alignment: f64,
    /// `max(||k||^2, epsilon)`.
    pub key_norm_sq: f64,
}

/// Evaluates `h(d)` and `grad_d h(d)` with `||k||^2` floored at `epsilon`.
pub fn hypergrad_eval(
    d: ArrayView1<'_, f64>,
    k: ArrayView1<'_, f64>,
    beta: f64,
    epsilon: f64,
) -> Result<HypergradSample> {
    if d.len() != k.len() {
        return Err(Error::DimensionMismatch {
            what: "d",
            expected: vec![k.len()],
            found: vec![d.len()],
        });
    }
    if !beta.is_finite() || !epsilon.is_finite() {
        return Err(Error::NonFinite { what: "beta/epsilon", index: vec![] });
    }
    if let Some(i) = d.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite { what: "d", index: vec![i] });
    }
    if let Some(i) = k.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite { what: "k", index: vec![i] });
    }
    let k2 = k.mapv(|x| x * x);
    let n = k2.sum().max(epsilon);
    let alignment = d.dot(&k2);
    let residual_factor = 1.0 - beta * alignment;
    let h_value = (residual_factor * residual_factor - 1.0) / (2.0 * n);
    let coef = -beta * residual_factor / n;
    Ok(HypergradSample {
        h_value,
        h_grad: k2.mapv(|s| coef * s),
        alignment,
        key_norm_sq: n,
    })
}

/// Gate used inside the phase-1 feedback: `beta` when beta-aware, else 1.
#[inline]
pub(crate) fn phase1_beta(cfg: &PrecondConfig, beta: f64) -> f64 {
    if cfg.beta_aware {
        beta
    } else {
        1.0
    }
}

/// One projected step on a lane, in place. Returns the scalar step
/// coefficient; `clamped[i]` is set where the box clipped coordinate `i`.
#[inline]
pub(crate) fn step_lane(
    cfg: &PrecondConfig,
    d: &mut [f64],
    k: &[f64],
    beta: f64,
    retention: f64,
    mut clamped: Option<&mut [bool]>,
) -> f64 {
    let bp = phase1_beta(cfg, beta);
    let mut norm_sq = 0.0;
    let mut alignment = 0.0;
    for (di, ki) in d.iter().zip(k) {
        let s = ki * ki;
        norm_sq += s;
        alignment += di * s;
    }
    let n = norm_sq.max(cfg.epsilon);
    let coef = cfg.eta * bp * (1.0 - bp * alignment) / n;
    for (i, (di, ki)) in d.iter_mut().zip(k).enumerate() {
        let raw = retention * *di + coef * (ki * ki);
        let projected = raw.clamp(cfg.d_min, cfg.d_max);
        if let Some(mask) = clamped.as_deref_mut() {
            mask[i] = projected != raw;
        }
        *di = projected;
    }
    coef
}

/// `d' = clamp(r d + eta b (1 - b <d, k^2>) / max(||k||^2, eps) * k^2)`,
/// with `b = beta` when beta-aware and `b = 1` otherwise.
///
/// `retention` may be any value in `[0, 1]`; `1` is the unforgetting update.
pub fn precond_step(
    cfg: &PrecondConfig,
    d: ArrayView1<'_, f64>,
    k: ArrayView1<'_, f64>,
    beta: f64,
    retention: f64,
) -> Array1<f64> {
    let mut out = d.to_vec();
    let k = k.to_vec();
    step_lane(cfg, &mut out, &k, beta, retention, None);
    Array1::from(out)
}

/// Pre-projection affine map `d -> A d + b` of one step:
/// `A = r I - (eta b^2 / n) k^2 (k^2)^T`, `b = (eta b / n) k^2`.
pub fn affine_map_coefficients(
    k: ArrayView1<'_, f64>,
    beta: f64,
    retention: f64,
    cfg: &PrecondConfig,
) -> (Array2<f64>, Array1<f64>) {
    let bp = phase1_beta(cfg, beta);
    let k2 = k.mapv(|x| x * x);
    let n = k2.sum().max(cfg.epsilon);
    let dim = k.len();
    let mut a = Array2::eye(dim) * retention;
    let outer = cfg.eta * bp * bp / n;
    for i in 0..dim {
        for j in 0..dim {
            a[[i, j]] -= outer * k2[i] * k2[j];
        }
    }
    let b = k2.mapv(|s| cfg.eta * bp / n * s);
    (a, b)
}

/// Resolves the retention applied at token `(b, t, h)`.
pub(crate) fn retention_at(
    cfg: &PrecondConfig,
    gates: &GateSequence,
    b: usize,
    t: usize,
    h: usize,
) -> Result<f64> {
    match cfg.retention {
        RetentionMode::None => Ok(1.0),
        RetentionMode::Constant(rho) => Ok(rho),
        RetentionMode::DataDependent => gates
            .retention()
            .map(|r| r[[b, t, h]])
            .ok_or(Error::MissingGate("retention")),
    }
}

struct LaneSweep {
    write_keys: Vec<f64>,
    d_final: Vec<f64>,
    trajectory: Option<Vec<f64>>,
    mask: Option<Vec<bool>>,
}

/// Runs the phase-1 sweep over every `(batch, head)` lane.
///
/// `write_keys[t]` uses the preconditioner at entry to token `t`; the update
/// happens afterwards. Lanes are processed in parallel, tokens in order.
pub fn phase1_sweep(
    stream: &TokenStream,
    init: &PreconditionerState,
    gates: &GateSequence,
    keep_trajectory: bool,
) -> Result<WriteKeySequence> {
    let dims = stream.dims();
    let cfg = *init.config();
    cfg.validate()?;
    gates.check_dims(&dims)?;
    if init.d().dim() != (dims.batch, dims.heads, dims.key_dim) {
        return Err(Error::DimensionMismatch {
            what: "initial d",
            expected: vec![dims.batch, dims.heads, dims.key_dim],
            found: init.d().shape().to_vec(),
        });
    }
    if cfg.retention == RetentionMode::DataDependent && gates.retention().is_none() {
        return Err(Error::MissingGate("retention"));
    }
    let (nk, nt) = (dims.key_dim, dims.length);

    let lanes: Vec<(usize, usize)> = (0..dims.batch)
        .flat_map(|b| (0..dims.heads).map(move |h| (b, h)))
        .collect();
    let swept: Vec<LaneSweep> = lanes
        .par_iter()
        .map(|&(b, h)| -> Result<LaneSweep> {
            let mut d = init.lane(b, h).to_vec();
            let mut write_keys = vec![0.0; nt * nk];
            let mut trajectory = keep_trajectory.then(|| vec![0.0; nt * nk]);
            let mut mask = keep_trajectory.then(|| vec![false; nt * nk]);
            let mut k = vec![0.0; nk];
            for t in 0..nt {
                for (dst, src) in k.iter_mut().zip(stream.key(b, t, h)) {
                    *dst = *src;
                }
                let row = t * nk..(t + 1) * nk;
                for ((w, di), ki) in write_keys[row.clone()].iter_mut().zip(&d).zip(&k) {
                    *w = di * ki;
                }
                if let Some(tr) = trajectory.as_mut() {
                    tr[row.clone()].copy_from_slice(&d);
                }
                let r = retention_at(&cfg, gates, b, t, h)?;
                let m = mask.as_mut().map(|m| &mut m[row]);
                step_lane(&cfg, &mut d, &k, stream.beta(b, t, h), r, m);
            }
            Ok(LaneSweep {
                write_keys,
                d_final: d,
                trajectory,
                mask,
            })
        })
        .collect::<Result<_>>()?;

    let mut write_keys = Array4::zeros((dims.batch, nt, dims.heads, nk));
    let mut d_final = Array3::zeros((dims.batch, dims.heads, nk));
    let mut trajectory = keep_trajectory.then(|| Array4::zeros((dims.batch, nt, dims.heads, nk)));
    let mut mask = keep_trajectory.then(|| Array4::from_elem((dims.batch, nt, dims.heads, nk), false));
    for (&(b, h), lane) in lanes.iter().zip(swept) {
        for t in 0..nt {
            for i in 0..nk {
                write_keys[[b, t, h, i]] = lane.write_keys[t * nk + i];
                if let (Some(dst), Some(src)) = (trajectory.as_mut(), lane.trajectory.as_ref()) {
                    dst[[b, t, h, i]] = src[t * nk + i];
                }
                if let (Some(dst), Some(src)) = (mask.as_mut(), lane.mask.as_ref()) {
                    dst[[b, t, h, i]] = src[t * nk + i];
                }
            }
        }
        for i in 0..nk {
            d_final[[b, h, i]] = lane.d_final[i];
        }
    }
    Ok(WriteKeySequence {
        write_keys,
        d_final,
        d_trajectory: trajectory,
        clamp_mask: mask,
    })
}
