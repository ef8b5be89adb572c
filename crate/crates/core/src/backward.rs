//! Reverse-mode gradients through the recurrent layer.
//!
//! The write key `k~ = d * k` splits the backward into two sweeps: the usual
//! delta-rule reverse pass over phase 2 that produces a cotangent for every
//! write key, and a reverse sweep over the projected affine `d` recurrence of
//! phase 1. Clamped coordinates pass zero gradient; a value sitting exactly
//! on a bound counts as unclamped.

use ndarray::{s, Array3, Array4};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::precond::{phase1_beta, phase1_sweep, retention_at};
use crate::recurrent::{lanes, run_phase2, Backbone, BackboneSpec, RecurrentOptions, RecurrentOutput};
use crate::types::{
    FastWeightState, GateSequence, Orientation, PreconditionerState, TokenStream, WriteKeySequence,
};

/// `dL/dd_t = k_t * dL/dk~_t` and `dL/dk_t` contribution `d_t * dL/dk~_t`.
/// Returns `(grad_keys_partial, grad_d)`.
pub fn backward_write_key(
    grad_write_keys: &Array4<f64>,
    keys: &Array4<f64>,
    d_trajectory: Option<&Array4<f64>>,
) -> Result<(Array4<f64>, Array4<f64>)> {
    let d = d_trajectory.ok_or(Error::MissingTrajectory)?;
    for (what, a) in [("keys", keys), ("d_trajectory", d)] {
        if a.shape() != grad_write_keys.shape() {
            return Err(Error::DimensionMismatch {
                what,
                expected: grad_write_keys.shape().to_vec(),
                found: a.shape().to_vec(),
            });
        }
    }
    Ok((d * grad_write_keys, keys * grad_write_keys))
}

/// Gradients that reach the inputs through the `d` recurrence.
#[derive(Debug, Clone, PartialEq)]
pub struct DRecurrenceGrads {
    pub keys: Array4<f64>,
    pub betas: Array3<f64>,
    /// `[B, H, K]`.
    pub d0: Array3<f64>,
    /// Per-token retention gradient `[B, T, H]`. For a constant retention
    /// the scalar gradient is the sum.
    pub retention: Array3<f64>,
}

/// Reverse sweep over `d_{t+1} = clamp(r_t d_t + c_t k_t^2)` given the
/// per-token cotangents on `d_t`. `forward` must carry the trajectory and
/// clamp mask of the same sweep.
pub fn backward_d_recurrence(
    grad_d: &Array4<f64>,
    stream: &TokenStream,
    init: &PreconditionerState,
    gates: &GateSequence,
    forward: &WriteKeySequence,
) -> Result<DRecurrenceGrads> {
    let dims = stream.dims();
    let traj = forward.d_trajectory.as_ref().ok_or(Error::MissingTrajectory)?;
    let mask = forward.clamp_mask.as_ref().ok_or(Error::MissingClampMask)?;
    for (what, shape) in [("grad_d", grad_d.shape()), ("d_trajectory", traj.shape()), ("clamp_mask", mask.shape())] {
        if shape != stream.keys().shape() {
            return Err(Error::DimensionMismatch { what, expected: stream.keys().shape().to_vec(), found: shape.to_vec() });
        }
    }
    let cfg = *init.config();
    let (nt, nk) = (dims.length, dims.key_dim);
    let lane_ids = lanes(&dims);
    type Lane = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>);
    let results: Vec<Lane> = lane_ids
        .par_iter()
        .map(|&(b, h)| -> Result<Lane> {
            let mut g_keys = vec![0.0; nt * nk];
            let mut g_betas = vec![0.0; nt];
            let mut g_ret = vec![0.0; nt];
            // Cotangent on d_{t+1}.
            let mut g_next = vec![0.0; nk];
            let mut g_bar = vec![0.0; nk];
            for t in (0..nt).rev() {
                let k = stream.key(b, t, h);
                let d = traj.slice(s![b, t, h, ..]);
                let beta = stream.beta(b, t, h);
                let bp = phase1_beta(&cfg, beta);
                let r = retention_at(&cfg, gates, b, t, h)?;
                let mut norm_sq = 0.0;
                let mut a = 0.0;
                for (di, ki) in d.iter().zip(k.iter()) {
                    norm_sq += ki * ki;
                    a += di * ki * ki;
                }
                let n = norm_sq.max(cfg.epsilon);
                let c = cfg.eta * bp * (1.0 - bp * a) / n;

                let mut g_r = 0.0;
                let mut g_c = 0.0;
                for i in 0..nk {
                    g_bar[i] = if mask[[b, t, h, i]] { 0.0 } else { g_next[i] };
                    g_r += g_bar[i] * d[i];
                    g_c += g_bar[i] * k[i] * k[i];
                }
                let g_a = g_c * (-cfg.eta * bp * bp / n);
                let g_n = if norm_sq >= cfg.epsilon { g_c * (-c / n) } else { 0.0 };
                if cfg.beta_aware {
                    g_betas[t] = g_c * cfg.eta * (1.0 - 2.0 * bp * a) / n;
                }
                g_ret[t] = g_r;
                for i in 0..nk {
                    let s_i = k[i] * k[i];
                    let g_s = c * g_bar[i] + g_a * d[i];
                    g_keys[t * nk + i] = 2.0 * k[i] * (g_s + g_n);
                    g_next[i] = r * g_bar[i] + g_a * s_i + grad_d[[b, t, h, i]];
                }
            }
            Ok((g_keys, g_betas, g_next, g_ret))
        })
        .collect::<Result<_>>()?;

    let mut out = DRecurrenceGrads {
        keys: Array4::zeros(stream.keys().raw_dim()),
        betas: Array3::zeros(stream.betas().raw_dim()),
        d0: Array3::zeros((dims.batch, dims.heads, nk)),
        retention: Array3::zeros(stream.betas().raw_dim()),
    };
    for (&(b, h), (gk, gb, gd0, gr)) in lane_ids.iter().zip(results) {
        for t in 0..nt {
            out.betas[[b, t, h]] = gb[t];
            out.retention[[b, t, h]] = gr[t];
            for i in 0..nk {
                out.keys[[b, t, h, i]] = gk[t * nk + i];
            }
        }
        for i in 0..nk {
            out.d0[[b, h, i]] = gd0[i];
        }
    }
    Ok(out)
}

/// Gradients of a scalar loss with respect to every layer input.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients {
    pub queries: Array4<f64>,
    pub keys: Array4<f64>,
    pub values: Array4<f64>,
    pub betas: Array3<f64>,
    /// Initial fast-weight state, same layout as the state.
    pub init_state: Array4<f64>,
    /// Online-scaled only.
    pub d0: Option<Array3<f64>>,
    /// Online-scaled only; per token, see [`DRecurrenceGrads::retention`].
    pub retention: Option<Array3<f64>>,
    pub alpha_scalar: Option<Array3<f64>>,
    pub alpha_vector: Option<Array4<f64>>,
}

struct LaneGrads {
    q: Vec<f64>,
    k: Vec<f64>,
    wk: Vec<f64>,
    v: Vec<f64>,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    s0: Vec<f64>,
}

/// Reverse pass over phase 2 of one lane. `states` holds the entry state of
/// every token; `final_state` is the state after the last token.
#[allow(clippy::too_many_arguments)]
fn phase2_lane_backward(
    stream: &TokenStream,
    backbone: Backbone,
    gates: &GateSequence,
    write_keys: &Array4<f64>,
    states: &[f64],
    final_state: &[f64],
    grad_outputs: &Array4<f64>,
    grad_final: Option<&[f64]>,
    b: usize,
    h: usize,
) -> LaneGrads {
    let dims = stream.dims();
    let (nt, nk, nv) = (dims.length, dims.key_dim, dims.value_dim);
    let len = nk * nv;
    let scale = stream.query_scale();
    let alpha_width = match backbone {
        Backbone::DeltaNet => 0,
        Backbone::GatedDeltaNet => 1,
        Backbone::Kda => nk,
    };
    let mut g = LaneGrads {
        q: vec![0.0; nt * nk],
        k: vec![0.0; nt * nk],
        wk: vec![0.0; nt * nk],
        v: vec![0.0; nt * nv],
        beta: vec![0.0; nt],
        alpha: vec![0.0; nt * alpha_width],
        s0: vec![0.0; len],
    };
    let mut gs = grad_final.map_or_else(|| vec![0.0; len], <[f64]>::to_vec);
    let mut s_bar = vec![0.0; len];
    let mut u = vec![0.0; nv];
    let mut g_u = vec![0.0; nv];

    for t in (0..nt).rev() {
        let prev = &states[t * len..(t + 1) * len];
        let cur = if t + 1 < nt { &states[(t + 1) * len..(t + 2) * len] } else { final_state };
        let q: Vec<f64> = stream.query(b, t, h).iter().map(|x| scale * x).collect();
        let k = stream.key(b, t, h);
        let wk = write_keys.slice(s![b, t, h, ..]);
        let v = stream.value(b, t, h);
        let g_o = grad_outputs.slice(s![b, t, h, ..]);
        let beta = stream.beta(b, t, h);
        let qrow = &mut g.q[t * nk..(t + 1) * nk];
        let krow = &mut g.k[t * nk..(t + 1) * nk];
        let wrow = &mut g.wk[t * nk..(t + 1) * nk];
        let vrow = &mut g.v[t * nv..(t + 1) * nv];

        match backbone.orientation() {
            Orientation::ValueByKey => {
                let a = match backbone {
                    Backbone::GatedDeltaNet => gates.alpha_scalar().expect("validated")[[b, t, h]],
                    _ => 1.0,
                };
                for (sb, p) in s_bar.iter_mut().zip(prev) {
                    *sb = a * p;
                }
                for i in 0..nv {
                    let row = &s_bar[i * nk..(i + 1) * nk];
                    u[i] = v[i] - row.iter().zip(k.iter()).map(|(x, y)| x * y).sum::<f64>();
                }
                // o = S_t q
                for i in 0..nv {
                    for j in 0..nk {
                        gs[i * nk + j] += g_o[i] * q[j];
                        qrow[j] += cur[i * nk + j] * g_o[i];
                    }
                }
                let mut g_beta = 0.0;
                for i in 0..nv {
                    let gk_i: f64 = (0..nk).map(|j| gs[i * nk + j] * wk[j]).sum();
                    g_u[i] = beta * gk_i;
                    g_beta += u[i] * gk_i;
                }
                g.beta[t] = g_beta;
                for j in 0..nk {
                    wrow[j] = beta * (0..nv).map(|i| gs[i * nk + j] * u[i]).sum::<f64>();
                    krow[j] = -(0..nv).map(|i| s_bar[i * nk + j] * g_u[i]).sum::<f64>();
                }
                vrow.copy_from_slice(&g_u);
                // G_bar = G - g_u k^T
                for i in 0..nv {
                    for j in 0..nk {
                        gs[i * nk + j] -= g_u[i] * k[j];
                    }
                }
                if backbone == Backbone::GatedDeltaNet {
                    g.alpha[t] = gs.iter().zip(prev).map(|(x, y)| x * y).sum();
                    gs.iter_mut().for_each(|x| *x *= a);
                }
            }
            Orientation::KeyByValue => {
                let alpha = gates.alpha_vector().expect("validated").slice(s![b, t, h, ..]).to_owned();
                for i in 0..nk {
                    for j in 0..nv {
                        s_bar[i * nv + j] = alpha[i] * prev[i * nv + j];
                    }
                }
                u.copy_from_slice(v.as_slice().expect("contiguous value"));
                for i in 0..nk {
                    for j in 0..nv {
                        u[j] -= s_bar[i * nv + j] * k[i];
                    }
                }
                // o = S_t^T q
                for i in 0..nk {
                    for j in 0..nv {
                        gs[i * nv + j] += q[i] * g_o[j];
                        qrow[i] += cur[i * nv + j] * g_o[j];
                    }
                }
                for j in 0..nv {
                    g_u[j] = beta * (0..nk).map(|i| gs[i * nv + j] * wk[i]).sum::<f64>();
                }
                let mut g_beta = 0.0;
                for i in 0..nk {
                    let gu_i: f64 = (0..nv).map(|j| gs[i * nv + j] * u[j]).sum();
                    wrow[i] = beta * gu_i;
                    g_beta += wk[i] * gu_i;
                    krow[i] = -(0..nv).map(|j| s_bar[i * nv + j] * g_u[j]).sum::<f64>();
                }
                g.beta[t] = g_beta;
                vrow.copy_from_slice(&g_u);
                for i in 0..nk {
                    for j in 0..nv {
                        gs[i * nv + j] -= k[i] * g_u[j];
                    }
                }
                let arow = &mut g.alpha[t * nk..(t + 1) * nk];
                for i in 0..nk {
                    arow[i] = (0..nv).map(|j| gs[i * nv + j] * prev[i * nv + j]).sum();
                    for j in 0..nv {
                        gs[i * nv + j] *= alpha[i];
                    }
                }
            }
        }
        qrow.iter_mut().for_each(|x| *x *= scale);
    }
    g.s0 = gs;
    g
}

/// Forward pass plus gradients of `<grad_outputs, outputs> + <grad_final_state, S_T>`.
pub fn layer_backward(
    stream: &TokenStream,
    spec: &BackboneSpec,
    gates: &GateSequence,
    init_state: Option<&FastWeightState>,
    init_precond: Option<&PreconditionerState>,
    grad_outputs: &Array4<f64>,
    grad_final_state: Option<&Array4<f64>>,
) -> Result<(RecurrentOutput, LayerGradients)> {
    let dims = stream.dims();
    spec.validate(&dims, gates, init_precond)?;
    let expected_out = [dims.batch, dims.length, dims.heads, dims.value_dim];
    if grad_outputs.shape() != expected_out {
        return Err(Error::DimensionMismatch {
            what: "grad_outputs",
            expected: expected_out.to_vec(),
            found: grad_outputs.shape().to_vec(),
        });
    }
    let write_keys = if spec.online_scaled {
        phase1_sweep(stream, init_precond.expect("validated"), gates, true)?
    } else {
        WriteKeySequence::identity(stream)
    };
    let opts = RecurrentOptions { record_trace: false, position_bins: 1 };
    let (outputs, final_state, _, states) =
        run_phase2(stream, spec.backbone, gates, &write_keys.write_keys, init_state, &opts, true)?;
    let states = states.expect("states kept");
    if let Some(gf) = grad_final_state {
        if gf.shape() != final_state.tensor().shape() {
            return Err(Error::DimensionMismatch {
                what: "grad_final_state",
                expected: final_state.tensor().shape().to_vec(),
                found: gf.shape().to_vec(),
            });
        }
    }

    let lane_ids = lanes(&dims);
    let lane_grads: Vec<LaneGrads> = lane_ids
        .par_iter()
        .zip(states.par_iter())
        .map(|(&(b, h), st)| {
            let fin: Vec<f64> = final_state.lane(b, h).iter().copied().collect();
            let gf: Option<Vec<f64>> = grad_final_state.map(|g| g.slice(s![b, h, .., ..]).iter().copied().collect());
            phase2_lane_backward(
                stream,
                spec.backbone,
                gates,
                &write_keys.write_keys,
                st,
                &fin,
                grad_outputs,
                gf.as_deref(),
                b,
                h,
            )
        })
        .collect();

    let (nt, nk, nv) = (dims.length, dims.key_dim, dims.value_dim);
    let mut g_q = Array4::zeros(stream.queries().raw_dim());
    let mut g_k = Array4::zeros(stream.keys().raw_dim());
    let mut g_wk = Array4::zeros(stream.keys().raw_dim());
    let mut g_v = Array4::zeros(stream.values().raw_dim());
    let mut g_beta = Array3::zeros(stream.betas().raw_dim());
    let mut g_s0 = Array4::zeros(final_state.tensor().raw_dim());
    let mut g_as = (spec.backbone == Backbone::GatedDeltaNet).then(|| Array3::zeros(stream.betas().raw_dim()));
    let mut g_av = (spec.backbone == Backbone::Kda).then(|| Array4::zeros(stream.keys().raw_dim()));
    for (&(b, h), lg) in lane_ids.iter().zip(lane_grads) {
        for t in 0..nt {
            g_beta[[b, t, h]] = lg.beta[t];
            for i in 0..nk {
                g_q[[b, t, h, i]] = lg.q[t * nk + i];
                g_k[[b, t, h, i]] = lg.k[t * nk + i];
                g_wk[[b, t, h, i]] = lg.wk[t * nk + i];
            }
            for i in 0..nv {
                g_v[[b, t, h, i]] = lg.v[t * nv + i];
            }
            if let Some(a) = g_as.as_mut() {
                a[[b, t, h]] = lg.alpha[t];
            }
            if let Some(a) = g_av.as_mut() {
                for i in 0..nk {
                    a[[b, t, h, i]] = lg.alpha[t * nk + i];
                }
            }
        }
        for (dst, src) in g_s0.slice_mut(s![b, h, .., ..]).iter_mut().zip(&lg.s0) {
            *dst = *src;
        }
    }

    let (d0, retention) = if spec.online_scaled {
        let (g_k_direct, g_d) = backward_write_key(&g_wk, stream.keys(), write_keys.d_trajectory.as_ref())?;
        g_k += &g_k_direct;
        let via_d = backward_d_recurrence(&g_d, stream, init_precond.expect("validated"), gates, &write_keys)?;
        g_k += &via_d.keys;
        g_beta += &via_d.betas;
        (Some(via_d.d0), Some(via_d.retention))
    } else {
        g_k += &g_wk;
        (None, None)
    };

    let grads = LayerGradients {
        queries: g_q,
        keys: g_k,
        values: g_v,
        betas: g_beta,
        init_state: g_s0,
        d0,
        retention,
        alpha_scalar: g_as,
        alpha_vector: g_av,
    };
    let forward = RecurrentOutput { outputs, final_state, trace: None, write_keys };
    Ok((forward, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recurrent::run_recurrent;
    use crate::types::{PrecondConfig, RetentionMode};
    use ndarray::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stream(seed: u64, t: usize, k: usize, v: usize) -> TokenStream {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TokenStream::new(
            Array4::from_shape_fn((1, t, 1, k), |_| rng.gen_range(-1.0..1.0)),
            Array4::from_shape_fn((1, t, 1, k), |_| rng.gen_range(-0.8..0.8)),
            Array4::from_shape_fn((1, t, 1, v), |_| rng.gen_range(-1.0..1.0)),
            Array3::from_shape_fn((1, t, 1), |_| rng.gen_range(0.2..0.8)),
        )
        .unwrap()
    }

    #[test]
    fn write_key_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let keys = Array4::from_shape_fn((1, 3, 1, 4), |_| rng.gen_range(-1.0..1.0));
        let d = Array4::from_shape_fn((1, 3, 1, 4), |_| rng.gen_range(0.5..2.0));
        let zero = Array4::zeros((1, 3, 1, 4));
        let (gk, gd) = backward_write_key(&zero, &keys, Some(&d)).unwrap();
        assert!(gk.iter().chain(gd.iter()).all(|&x| x == 0.0));

        let g = Array4::from_shape_fn((1, 3, 1, 4), |_| rng.gen_range(-1.0..1.0));
        let (gk, _) = backward_write_key(&g, &keys, Some(&Array4::ones((1, 3, 1, 4)))).unwrap();
        assert_eq!(gk, g);

        assert!(matches!(backward_write_key(&g, &keys, None), Err(Error::MissingTrajectory)));

        // Central differences of L = <g, d * k>.
        let (gk, gd) = backward_write_key(&g, &keys, Some(&d)).unwrap();
        let loss = |d: &Array4<f64>, k: &Array4<f64>| (&g * &(d * k)).sum();
        let hstep = 1e-6;
        for idx in 0..4 {
            let ix = [0, 1, 0, idx];
            let (mut kp, mut km) = (keys.clone(), keys.clone());
            kp[ix] += hstep;
            km[ix] -= hstep;
            let fd = (loss(&d, &kp) - loss(&d, &km)) / (2.0 * hstep);
            assert!((fd - gk[ix]).abs() <= 1e-9);
            let (mut dp, mut dm) = (d.clone(), d.clone());
            dp[ix] += hstep;
            dm[ix] -= hstep;
            let fd = (loss(&dp, &keys) - loss(&dm, &keys)) / (2.0 * hstep);
            assert!((fd - gd[ix]).abs() <= 1e-9);
        }
    }

    #[test]
    fn frozen_d_passes_gradient_through() {
        let s = stream(2, 8, 4, 3);
        let cfg = PrecondConfig::default().with_eta(0.0);
        let init = PreconditionerState::uniform(cfg, 1, 1, 4, 1.3).unwrap();
        let fwd = phase1_sweep(&s, &init, &GateSequence::none(), true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gd = Array4::from_shape_fn((1, 8, 1, 4), |_| rng.gen_range(-1.0..1.0));
        let out = backward_d_recurrence(&gd, &s, &init, &GateSequence::none(), &fwd).unwrap();
        let total = gd.sum_axis(ndarray::Axis(1));
        for i in 0..4 {
            assert!((out.d0[[0, 0, i]] - total[[0, 0, i]]).abs() <= 1e-14);
        }
        assert!(out.keys.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn clamped_coordinate_blocks_gradient() {
        // d starts at the upper bound and is pushed up on coordinate 0 only.
        let keys = Array4::from_shape_vec((1, 2, 1, 2), vec![1.0, 0.0, 0.6, 0.8]).unwrap();
        let s = TokenStream::new(Array4::ones((1, 2, 1, 2)), keys, Array4::ones((1, 2, 1, 1)), Array3::from_elem((1, 2, 1), 0.2)).unwrap();
        let init = PreconditionerState::new(PrecondConfig::default().with_eta(0.5), Array3::from_shape_vec((1, 1, 2), vec![2.0, 1.0]).unwrap()).unwrap();
        let fwd = phase1_sweep(&s, &init, &GateSequence::none(), true).unwrap();
        let mask = fwd.clamp_mask.as_ref().unwrap();
        assert!(mask[[0, 0, 0, 0]]);
        assert!(!mask[[0, 0, 0, 1]]);
        let mut gd = Array4::zeros((1, 2, 1, 2));
        gd[[0, 1, 0, 0]] = 1.0;
        let out = backward_d_recurrence(&gd, &s, &init, &GateSequence::none(), &fwd).unwrap();
        assert_eq!(out.d0[[0, 0, 0]], 0.0);
        assert_eq!(out.keys[[0, 0, 0, 0]], 0.0);
        let no_mask = WriteKeySequence { clamp_mask: None, ..fwd };
        assert!(matches!(
            backward_d_recurrence(&gd, &s, &init, &GateSequence::none(), &no_mask),
            Err(Error::MissingClampMask)
        ));
    }

    fn loss_of(out: &RecurrentOutput, w: &Array4<f64>) -> f64 {
        (&out.outputs * w).sum()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        diff / na.max(nb).max(1e-300)
    }

    #[test]
    fn osdn_matches_finite_differences() {
        let s = stream(4, 16, 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = Array4::from_shape_fn((1, 16, 1, 4), |_| rng.gen_range(-1.0..1.0));
        let cfg = PrecondConfig::default().with_eta(0.1);
        let init = PreconditionerState::new(cfg, Array3::from_shape_fn((1, 1, 4), |_| rng.gen_range(0.8..1.5))).unwrap();
        let spec = BackboneSpec::online(Backbone::DeltaNet);
        let g = GateSequence::none();
        let (_, grads) = layer_backward(&s, &spec, &g, None, Some(&init), &w, None).unwrap();
        let f = |s: &TokenStream, p: &PreconditionerState| {
            loss_of(&run_recurrent(s, &spec, &g, None, Some(p), &RecurrentOptions { record_trace: false, position_bins: 1 }).unwrap(), &w)
        };
        let h = 1e-6;
        let mut fd_keys = Array::zeros(s.keys().raw_dim());
        for (idx, _) in s.keys().indexed_iter() {
            let ix = [idx.0, idx.1, idx.2, idx.3];
            let (mut kp, mut km) = (s.keys().clone(), s.keys().clone());
            kp[ix] += h;
            km[ix] -= h;
            let sp = TokenStream::new(s.queries().clone(), kp, s.values().clone(), s.betas().clone()).unwrap();
            let sm = TokenStream::new(s.queries().clone(), km, s.values().clone(), s.betas().clone()).unwrap();
            fd_keys[ix] = (f(&sp, &init) - f(&sm, &init)) / (2.0 * h);
        }
        let e = rel_err(grads.keys.as_slice().unwrap(), fd_keys.as_slice().unwrap());
        assert!(e <= 1e-5, "keys rel err {e}");

        let mut fd_d0 = Array3::zeros((1, 1, 4));
        for i in 0..4 {
            let (mut dp, mut dm) = (init.d().clone(), init.d().clone());
            dp[[0, 0, i]] += h;
            dm[[0, 0, i]] -= h;
            let pp = PreconditionerState::new(cfg, dp).unwrap();
            let pm = PreconditionerState::new(cfg, dm).unwrap();
            fd_d0[[0, 0, i]] = (f(&s, &pp) - f(&s, &pm)) / (2.0 * h);
        }
        let e = rel_err(grads.d0.as_ref().unwrap().as_slice().unwrap(), fd_d0.as_slice().unwrap());
        assert!(e <= 1e-5, "d0 rel err {e}");
    }

    #[test]
    fn backward_is_linear_in_cotangent() {
        let s = stream(6, 12, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let gates = GateSequence::none()
            .with_alpha_vector(Array4::from_shape_fn((1, 12, 1, 4), |_| rng.gen_range(0.7..1.0)))
            .unwrap();
        let cfg = PrecondConfig::default().with_eta(0.1).with_retention(RetentionMode::Constant(0.99));
        let init = PreconditionerState::uniform(cfg, 1, 1, 4, 1.0).unwrap();
        let spec = BackboneSpec::online(Backbone::Kda);
        let w1 = Array4::from_shape_fn((1, 12, 1, 3), |_| rng.gen_range(-1.0..1.0));
        let w2 = Array4::from_shape_fn((1, 12, 1, 3), |_| rng.gen_range(-1.0..1.0));
        let run = |w: &Array4<f64>| layer_backward(&s, &spec, &gates, None, Some(&init), w, None).unwrap().1;
        let (g1, g2, g12) = (run(&w1), run(&w2), run(&(&w1 * 2.0 + &w2)));
        let combo = &g1.keys * 2.0 + &g2.keys;
        let err = (&combo - &g12.keys).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(err <= 1e-12, "{err}");
        let combo = &g1.betas * 2.0 + &g2.betas;
        let err = (&combo - &g12.betas).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(err <= 1e-12, "{err}");
    }
}
