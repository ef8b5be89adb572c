//! Exact token-by-token recurrences for DeltaNet, Gated DeltaNet and KDA,
//! each with or without the online-scaled write key.
//!
//! | backbone        | state  | update                                              | read        |
//! |-----------------|--------|-----------------------------------------------------|-------------|
//! | DeltaNet        | `VxK`  | `S (I - b k k~^T) + b v k~^T`                       | `S q`       |
//! | Gated DeltaNet  | `VxK`  | `S a (I - b k k~^T) + b v k~^T`                     | `S q`       |
//! | KDA             | `KxV`  | `(I - b k~ k^T) Diag(a) S + b k~ v^T`               | `S^T q`     |
//!
//! The host backbones are the `k~ = k` special case. These loops are the
//! reference every chunkwise kernel is checked against, and the source of the
//! per-token residual trace.

use ndarray::{Array1, Array2, Array4, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::precond::phase1_sweep;
use crate::types::{
    position_bin, residual_ratio, Dims, FastWeightState, GateSequence, Orientation,
    PreconditionerState, ResidualRecord, ResidualTrace, RetentionMode, TokenStream,
    WriteKeySequence,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    DeltaNet,
    GatedDeltaNet,
    Kda,
}

impl Backbone {
    pub fn orientation(self) -> Orientation {
        match self {
            Backbone::DeltaNet | Backbone::GatedDeltaNet => Orientation::ValueByKey,
            Backbone::Kda => Orientation::KeyByValue,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Backbone::DeltaNet => "delta_net",
            Backbone::GatedDeltaNet => "gated_delta_net",
            Backbone::Kda => "kda",
        }
    }
}

/// Which recurrence to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub backbone: Backbone,
    pub online_scaled: bool,
    /// Data-dependent preconditioner retention.
    pub apf: bool,
}

impl BackboneSpec {
    pub fn host(backbone: Backbone) -> Self {
        Self { backbone, online_scaled: false, apf: false }
    }

    pub fn online(backbone: Backbone) -> Self {
        Self { backbone, online_scaled: true, apf: false }
    }

    pub fn online_apf(backbone: Backbone) -> Self {
        Self { backbone, online_scaled: true, apf: true }
    }

    /// Short label such as `osgdn` or `kda`.
    pub fn label(&self) -> String {
        let base = match self.backbone {
            Backbone::DeltaNet => "dn",
            Backbone::GatedDeltaNet => "gdn",
            Backbone::Kda => "kda",
        };
        match (self.online_scaled, self.apf) {
            (false, _) => base.to_string(),
            (true, false) => format!("os{base}"),
            (true, true) => format!("os{base}-apf"),
        }
    }

    /// Checks gate presence and preconditioner consistency.
    pub fn validate(
        &self,
        dims: &Dims,
        gates: &GateSequence,
        precond: Option<&PreconditionerState>,
    ) -> Result<()> {
        gates.check_dims(dims)?;
        match self.backbone {
            Backbone::GatedDeltaNet if gates.alpha_scalar().is_none() => {
                return Err(Error::MissingGate("alpha_scalar"))
            }
            Backbone::Kda if gates.alpha_vector().is_none() => {
                return Err(Error::MissingGate("alpha_vector"))
            }
            _ => {}
        }
        if self.apf && !self.online_scaled {
            return Err(Error::InvalidConfig("apf requires online scaling".into()));
        }
        if self.online_scaled {
            let p = precond.ok_or_else(|| {
                Error::InvalidConfig("online-scaled backbone needs a preconditioner state".into())
            })?;
            let data_dependent = p.config().retention == RetentionMode::DataDependent;
            if self.apf != data_dependent {
                return Err(Error::InvalidConfig(format!(
                    "apf={} but preconditioner retention is {:?}",
                    self.apf,
                    p.config().retention
                )));
            }
        }
        Ok(())
    }
}

// ── single steps (public, view-based) ───────────────────────────────────

/// Result of one recurrent step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub state: Array2<f64>,
    pub output: Array1<f64>,
    /// `v - S_ref k` against the (post-gate) reference state.
    pub residual: Array1<f64>,
}

/// DeltaNet step in `VxK`: `S' = S + b u k~^T`, `u = v - S k`, `o = S' q`.
pub fn step_delta(
    s: ArrayView2<'_, f64>,
    q: ArrayView1<'_, f64>,
    k: ArrayView1<'_, f64>,
    write_key: ArrayView1<'_, f64>,
    v: ArrayView1<'_, f64>,
    beta: f64,
) -> StepOutput {
    step_gdn(s, q, k, write_key, v, beta, 1.0)
}

/// Gated step in `VxK`: `S_bar = a S`, `e = v - S_bar k`, `S' = S_bar + b e k~^T`.
pub fn step_gdn(
    s: ArrayView2<'_, f64>,
    q: ArrayView1<'_, f64>,
    k: ArrayView1<'_, f64>,
    write_key: ArrayView1<'_, f64>,
    v: ArrayView1<'_, f64>,
    beta: f64,
    alpha: f64,
) -> StepOutput {
    let (nv, nk) = s.dim();
    let mut state: Vec<f64> = s.iter().copied().collect();
    let mut out = vec![0.0; nv];
    let mut res = vec![0.0; nv];
    let lane = LaneRefs::new(q, k, write_key, v);
    let gate = if alpha == 1.0 { Gate::None } else { Gate::Scalar(alpha) };
    step_vk(&mut state, nv, nk, &lane, beta, gate, 1.0, &mut out, &mut res);
    StepOutput {
        state: Array2::from_shape_vec((nv, nk), state).expect("shape"),
        output: Array1::from(out),
        residual: Array1::from(res),
    }
}

/// KDA step in `KxV`: `S_bar = Diag(a) S`, `u = v - S_bar^T k`,
/// `S' = S_bar + b k~ u^T`, `o = S'^T q`.
pub fn step_kda(
    s: ArrayView2<'_, f64>,
    q: ArrayView1<'_, f64>,
    k: ArrayView1<'_, f64>,
    write_key: ArrayView1<'_, f64>,
    v: ArrayView1<'_, f64>,
    beta: f64,
    alpha: ArrayView1<'_, f64>,
) -> StepOutput {
    let (nk, nv) = s.dim();
    let mut state: Vec<f64> = s.iter().copied().collect();
    let mut out = vec![0.0; nv];
    let mut res = vec![0.0; nv];
    let lane = LaneRefs::new(q, k, write_key, v);
    let alpha: Vec<f64> = alpha.to_vec();
    step_kv(&mut state, nk, nv, &lane, beta, Some(&alpha), 1.0, &mut out, &mut res);
    StepOutput {
        state: Array2::from_shape_vec((nk, nv), state).expect("shape"),
        output: Array1::from(out),
        residual: Array1::from(res),
    }
}

// ── lane kernels (slices) ───────────────────────────────────────────────

pub(crate) struct LaneRefs {
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub wk: Vec<f64>,
    pub v: Vec<f64>,
}

impl LaneRefs {
    fn new(
        q: ArrayView1<'_, f64>,
        k: ArrayView1<'_, f64>,
        wk: ArrayView1<'_, f64>,
        v: ArrayView1<'_, f64>,
    ) -> Self {
        Self { q: q.to_vec(), k: k.to_vec(), wk: wk.to_vec(), v: v.to_vec() }
    }
}

#[derive(Clone, Copy)]
pub(crate) enum Gate {
    None,
    Scalar(f64),
}

/// One `VxK` step in place; `s` is row-major `V x K`. Writes the output and
/// the post-gate residual.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn step_vk(
    s: &mut [f64],
    nv: usize,
    nk: usize,
    x: &LaneRefs,
    beta: f64,
    gate: Gate,
    q_scale: f64,
    out: &mut [f64],
    residual: &mut [f64],
) {
    if let Gate::Scalar(a) = gate {
        s.iter_mut().for_each(|x| *x *= a);
    }
    for i in 0..nv {
        let row = &s[i * nk..(i + 1) * nk];
        let read: f64 = row.iter().zip(&x.k).map(|(a, b)| a * b).sum();
        residual[i] = x.v[i] - read;
    }
    for i in 0..nv {
        let bu = beta * residual[i];
        let row = &mut s[i * nk..(i + 1) * nk];
        for (sij, wj) in row.iter_mut().zip(&x.wk) {
            *sij += bu * wj;
        }
        out[i] = row.iter().zip(&x.q).map(|(a, b)| a * (q_scale * b)).sum();
    }
}

/// One `KxV` step in place; `s` is row-major `K x V`.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn step_kv(
    s: &mut [f64],
    nk: usize,
    nv: usize,
    x: &LaneRefs,
    beta: f64,
    alpha: Option<&[f64]>,
    q_scale: f64,
    out: &mut [f64],
    residual: &mut [f64],
) {
    if let Some(a) = alpha {
        for i in 0..nk {
            s[i * nv..(i + 1) * nv].iter_mut().for_each(|x| *x *= a[i]);
        }
    }
    residual.copy_from_slice(&x.v);
    for i in 0..nk {
        let ki = x.k[i];
        for (r, sij) in residual.iter_mut().zip(&s[i * nv..(i + 1) * nv]) {
            *r -= sij * ki;
        }
    }
    out.iter_mut().for_each(|o| *o = 0.0);
    for i in 0..nk {
        let bw = beta * x.wk[i];
        let qi = q_scale * x.q[i];
        for ((sij, r), o) in s[i * nv..(i + 1) * nv].iter_mut().zip(residual.iter()).zip(out.iter_mut()) {
            *sij += bw * r;
            *o += *sij * qi;
        }
    }
}

/// `1/2 || read(S, k) - v ||^2` for either orientation.
fn regression_loss(s: &[f64], orientation: Orientation, nk: usize, nv: usize, k: &[f64], v: &[f64]) -> f64 {
    let mut acc = 0.0;
    match orientation {
        Orientation::ValueByKey => {
            for i in 0..nv {
                let read: f64 = s[i * nk..(i + 1) * nk].iter().zip(k).map(|(a, b)| a * b).sum();
                let r = read - v[i];
                acc += r * r;
            }
        }
        Orientation::KeyByValue => {
            for j in 0..nv {
                let mut read = 0.0;
                for i in 0..nk {
                    read += s[i * nv + j] * k[i];
                }
                let r = read - v[j];
                acc += r * r;
            }
        }
    }
    0.5 * acc
}

// ── full recurrence ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecurrentOptions {
    pub record_trace: bool,
    pub position_bins: usize,
}

impl Default for RecurrentOptions {
    fn default() -> Self {
        Self { record_trace: true, position_bins: 1 }
    }
}

#[derive(Debug, Clone)]
pub struct RecurrentOutput {
    /// `[B, T, H, V]`.
    pub outputs: Array4<f64>,
    pub final_state: FastWeightState,
    pub trace: Option<ResidualTrace>,
    /// Phase-1 output (identity keys for host backbones), with trajectory.
    pub write_keys: WriteKeySequence,
}

struct LaneResult {
    outputs: Vec<f64>,
    state: Vec<f64>,
    records: Vec<ResidualRecord>,
    states: Option<Vec<f64>>,
}

/// Phase 2 on one lane. When `keep_states` is set, the state at entry to
/// every token (before any gate) is stored, `T x state_len`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn run_lane(
    stream: &TokenStream,
    backbone: Backbone,
    gates: &GateSequence,
    write_keys: &Array4<f64>,
    init: Vec<f64>,
    b: usize,
    h: usize,
    opts: &RecurrentOptions,
    keep_states: bool,
) -> (Vec<f64>, Vec<f64>, Vec<ResidualRecord>, Option<Vec<f64>>) {
    let dims = stream.dims();
    let (nk, nv, nt) = (dims.key_dim, dims.value_dim, dims.length);
    let orientation = backbone.orientation();
    let q_scale = stream.query_scale();
    let mut s = init;
    let mut outputs = vec![0.0; nt * nv];
    let mut records = Vec::with_capacity(if opts.record_trace { nt } else { 0 });
    let mut states = keep_states.then(|| Vec::with_capacity(nt * s.len()));
    let mut residual = vec![0.0; nv];
    let mut alpha_vec = vec![0.0; nk];
    for t in 0..nt {
        if let Some(st) = states.as_mut() {
            st.extend_from_slice(&s);
        }
        let x = LaneRefs {
            q: stream.query(b, t, h).to_vec(),
            k: stream.key(b, t, h).to_vec(),
            wk: write_keys.slice(ndarray::s![b, t, h, ..]).to_vec(),
            v: stream.value(b, t, h).to_vec(),
        };
        let beta = stream.beta(b, t, h);
        let out = &mut outputs[t * nv..(t + 1) * nv];
        match backbone {
            Backbone::DeltaNet => step_vk(&mut s, nv, nk, &x, beta, Gate::None, q_scale, out, &mut residual),
            Backbone::GatedDeltaNet => {
                let a = gates.alpha_scalar().expect("validated")[[b, t, h]];
                step_vk(&mut s, nv, nk, &x, beta, Gate::Scalar(a), q_scale, out, &mut residual)
            }
            Backbone::Kda => {
                let a = gates.alpha_vector().expect("validated");
                for (i, dst) in alpha_vec.iter_mut().enumerate() {
                    *dst = a[[b, t, h, i]];
                }
                step_kv(&mut s, nk, nv, &x, beta, Some(&alpha_vec), q_scale, out, &mut residual)
            }
        }
        if opts.record_trace {
            let u2: f64 = residual.iter().map(|r| r * r).sum();
            let k2: f64 = x.k.iter().map(|r| r * r).sum();
            let f_before = 0.5 * u2;
            let f_after = regression_loss(&s, orientation, nk, nv, &x.k, &x.v);
            records.push(ResidualRecord {
                batch: b,
                head: h,
                t,
                f_before,
                f_after,
                grad_norm_sq: u2 * k2,
                q: residual_ratio(f_before, f_after),
                position_bin: position_bin(t, nt, opts.position_bins.max(1)),
            });
        }
    }
    (outputs, s, records, states)
}

pub(crate) fn lanes(dims: &Dims) -> Vec<(usize, usize)> {
    (0..dims.batch)
        .flat_map(|b| (0..dims.heads).map(move |h| (b, h)))
        .collect()
}

/// Runs phase 1 (when online-scaled) and the exact recurrence.
pub fn run_recurrent(
    stream: &TokenStream,
    spec: &BackboneSpec,
    gates: &GateSequence,
    init_state: Option<&FastWeightState>,
    init_precond: Option<&PreconditionerState>,
    opts: &RecurrentOptions,
) -> Result<RecurrentOutput> {
    let dims = stream.dims();
    spec.validate(&dims, gates, init_precond)?;
    let write_keys = if spec.online_scaled {
        phase1_sweep(stream, init_precond.expect("validated"), gates, true)?
    } else {
        WriteKeySequence::identity(stream)
    };
    let (outputs, final_state, trace, _) =
        run_phase2(stream, spec.backbone, gates, &write_keys.write_keys, init_state, opts, false)?;
    Ok(RecurrentOutput { outputs, final_state, trace, write_keys })
}

pub(crate) type Phase2 = (Array4<f64>, FastWeightState, Option<ResidualTrace>, Option<Vec<Vec<f64>>>);

/// Phase 2 with externally supplied write keys.
pub(crate) fn run_phase2(
    stream: &TokenStream,
    backbone: Backbone,
    gates: &GateSequence,
    write_keys: &Array4<f64>,
    init_state: Option<&FastWeightState>,
    opts: &RecurrentOptions,
    keep_states: bool,
) -> Result<Phase2> {
    let dims = stream.dims();
    let orientation = backbone.orientation();
    if write_keys.shape() != stream.keys().shape() {
        return Err(Error::DimensionMismatch {
            what: "write_keys",
            expected: stream.keys().shape().to_vec(),
            found: write_keys.shape().to_vec(),
        });
    }
    let init = match init_state {
        Some(s) => {
            if s.orientation() != orientation {
                return Err(Error::InvalidConfig(format!(
                    "state orientation {:?} does not match backbone {:?}",
                    s.orientation(),
                    backbone
                )));
            }
            s.check_dims(&dims)?;
            s.clone()
        }
        None => FastWeightState::zeros(orientation, dims.batch, dims.heads, dims.key_dim, dims.value_dim),
    };
    let lane_ids = lanes(&dims);
    let results: Vec<LaneResult> = lane_ids
        .par_iter()
        .map(|&(b, h)| {
            let s0: Vec<f64> = init.lane(b, h).iter().copied().collect();
            let (outputs, state, records, states) =
                run_lane(stream, backbone, gates, write_keys, s0, b, h, opts, keep_states);
            LaneResult { outputs, state, records, states }
        })
        .collect();

    let nv = dims.value_dim;
    let mut outputs = Array4::zeros((dims.batch, dims.length, dims.heads, nv));
    let mut final_state = init;
    let mut records = Vec::new();
    let mut all_states = keep_states.then(Vec::new);
    for (&(b, h), lane) in lane_ids.iter().zip(results) {
        for t in 0..dims.length {
            for i in 0..nv {
                outputs[[b, t, h, i]] = lane.outputs[t * nv + i];
            }
        }
        for (dst, src) in final_state.lane_mut(b, h).iter_mut().zip(&lane.state) {
            *dst = *src;
        }
        records.extend(lane.records);
        if let (Some(all), Some(st)) = (all_states.as_mut(), lane.states) {
            all.push(st);
        }
    }
    let trace = opts.record_trace.then(|| ResidualTrace { bins: opts.position_bins.max(1), records });
    Ok((outputs, final_state, trace, all_states))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::precond::hypergrad_eval;
    use crate::types::PrecondConfig;
    use ndarray::{array, Array3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
        Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
    }

    fn max_abs(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        (a - b).iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }

    #[test]
    fn delta_exact_write_then_read() {
        let k = array![0.6, 0.8];
        let q = array![0.3, -0.1];
        let v = array![2.0, -1.0, 0.5];
        let out = step_delta(Array2::zeros((3, 2)).view(), q.view(), k.view(), k.view(), v.view(), 1.0);
        assert_eq!(out.state, outer(&v, &k));
        let kq = k.dot(&q);
        for (o, vi) in out.output.iter().zip(v.iter()) {
            assert!((o - kq * vi).abs() < 1e-15);
        }
    }

    #[test]
    fn delta_forms_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let s = Array2::from_shape_fn((4, 4), |_| rng.gen_range(-1.0..1.0));
            let (q, k, v) = (rand_vec(&mut rng, 4), rand_vec(&mut rng, 4), rand_vec(&mut rng, 4));
            let d: Array1<f64> = (0..4).map(|_| rng.gen_range(0.5..2.0)).collect();
            let wk = &d * &k;
            let beta = rng.gen_range(0.01..0.99);
            let out = step_delta(s.view(), q.view(), k.view(), wk.view(), v.view(), beta);
            // S (I - b k k~^T) + b v k~^T
            let expanded = s.dot(&(Array2::eye(4) - outer(&k, &wk) * beta)) + outer(&v, &wk) * beta;
            assert!(max_abs(&out.state, &expanded) <= 1e-15 * 8.0);
            // residual form S + b u k~^T
            let u = &v - &s.dot(&k);
            let residual_form = &s + &(outer(&u, &wk) * beta);
            assert!(max_abs(&out.state, &residual_form) <= 1e-15);
            assert_eq!(out.residual, u);
        }
    }

    #[test]
    fn unit_preconditioner_is_bitwise_host() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
        let (q, k, v) = (rand_vec(&mut rng, 4), rand_vec(&mut rng, 4), rand_vec(&mut rng, 3));
        let wk = k.mapv(|x| 1.0 * x);
        let a = step_delta(s.view(), q.view(), k.view(), wk.view(), v.view(), 0.4);
        let b = step_delta(s.view(), q.view(), k.view(), k.view(), v.view(), 0.4);
        assert_eq!(a, b);
    }

    #[test]
    fn gdn_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
        let (q, k, v) = (rand_vec(&mut rng, 4), rand_vec(&mut rng, 4), rand_vec(&mut rng, 3));
        let wk = &k * 1.3;
        let g1 = step_gdn(s.view(), q.view(), k.view(), wk.view(), v.view(), 0.4, 1.0);
        let d1 = step_delta(s.view(), q.view(), k.view(), wk.view(), v.view(), 0.4);
        assert_eq!(g1, d1);

        let g0 = step_gdn(s.view(), q.view(), k.view(), wk.view(), v.view(), 0.4, 0.0);
        assert!(max_abs(&g0.state, &(outer(&v, &wk) * 0.4)) <= 1e-16);

        for _ in 0..100 {
            let s = Array2::from_shape_fn((4, 4), |_| rng.gen_range(-1.0..1.0));
            let (q, k, v) = (rand_vec(&mut rng, 4), rand_vec(&mut rng, 4), rand_vec(&mut rng, 4));
            let wk = &k * 0.8;
            let beta = rng.gen_range(0.01..0.99);
            let g = step_gdn(s.view(), q.view(), k.view(), wk.view(), v.view(), beta, 0.9);
            let expanded = s.dot(&((Array2::eye(4) - outer(&k, &wk) * beta) * 0.9)) + outer(&v, &wk) * beta;
            assert!(max_abs(&g.state, &expanded) <= 1e-15 * 8.0);
        }
    }

    #[test]
    fn kda_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
        let (q, k, v) = (rand_vec(&mut rng, 4), rand_vec(&mut rng, 4), rand_vec(&mut rng, 3));
        let ones = Array1::ones(4);
        let kda = step_kda(s.t().to_owned().view(), q.view(), k.view(), k.view(), v.view(), 0.4, ones.view());
        let dn = step_delta(s.view(), q.view(), k.view(), k.view(), v.view(), 0.4);
        assert!(max_abs(&kda.state, &dn.state.t().to_owned()) <= 1e-15);
        for (a, b) in kda.output.iter().zip(dn.output.iter()) {
            assert!((a - b).abs() <= 1e-15);
        }

        let alpha: Array1<f64> = (0..4).map(|_| rng.gen_range(0.5..1.0)).collect();
        let s_kv = s.t().to_owned();
        let r = step_kda(s_kv.view(), q.view(), k.view(), k.view(), v.view(), 0.0, alpha.view());
        let decayed = Array2::from_diag(&alpha).dot(&s_kv);
        assert!(max_abs(&r.state, &decayed) <= 1e-16);

        for _ in 0..100 {
            let s = Array2::from_shape_fn((4, 4), |_| rng.gen_range(-1.0..1.0));
            let (q, k, v) = (rand_vec(&mut rng, 4), rand_vec(&mut rng, 4), rand_vec(&mut rng, 4));
            let d: Array1<f64> = (0..4).map(|_| rng.gen_range(0.5..2.0)).collect();
            let wk = &d * &k;
            let alpha: Array1<f64> = (0..4).map(|_| rng.gen_range(0.5..1.0)).collect();
            let beta = rng.gen_range(0.01..0.99);
            let out = step_kda(s.view(), q.view(), k.view(), wk.view(), v.view(), beta, alpha.view());
            let expanded = (Array2::eye(4) - outer(&wk, &k) * beta).dot(&Array2::from_diag(&alpha).dot(&s))
                + outer(&wk, &v) * beta;
            assert!(max_abs(&out.state, &expanded) <= 1e-15 * 8.0);
            let read = out.state.t().dot(&q);
            for (a, b) in out.output.iter().zip(read.iter()) {
                assert!((a - b).abs() <= 1e-15 * 4.0);
            }
        }
    }

    pub(crate) fn unit_stream(seed: u64, b: usize, t: usize, h: usize, k: usize, v: usize, beta: Option<f64>) -> TokenStream {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = Array4::from_shape_fn((b, t, h, k), |_| rng.gen_range(-1.0..1.0));
        let keys = Array4::from_shape_fn((b, t, h, k), |_| rng.gen_range(-1.0..1.0));
        let vals = Array4::from_shape_fn((b, t, h, v), |_| rng.gen_range(-1.0..1.0));
        let betas = Array3::from_shape_fn((b, t, h), |_| beta.unwrap_or_else(|| rng.gen_range(0.05..0.95)));
        TokenStream::new(q, keys, vals, betas).unwrap().normalize_keys().unwrap()
    }

    #[test]
    fn frozen_online_scaling_matches_host_bitwise() {
        let s = unit_stream(5, 2, 16, 2, 4, 3, None);
        let frozen = PreconditionerState::uniform(PrecondConfig::default().with_eta(0.0), 2, 2, 4, 1.0).unwrap();
        let opts = RecurrentOptions::default();
        let host = run_recurrent(&s, &BackboneSpec::host(Backbone::DeltaNet), &GateSequence::none(), None, None, &opts).unwrap();
        let os = run_recurrent(&s, &BackboneSpec::online(Backbone::DeltaNet), &GateSequence::none(), None, Some(&frozen), &opts).unwrap();
        assert_eq!(host.outputs, os.outputs);
        assert_eq!(host.final_state, os.final_state);
        assert_eq!(host.trace, os.trace);
    }

    #[test]
    fn single_exact_write_kills_residual() {
        let q = Array4::from_elem((1, 1, 1, 2), 0.5);
        let k = Array4::from_shape_vec((1, 1, 1, 2), vec![0.6, 0.8]).unwrap();
        let v = Array4::from_elem((1, 1, 1, 2), 1.0);
        // beta must stay inside (0, 1); d = 2 with beta = 0.5 is an exact write.
        let s = TokenStream::new(q, k, v, Array3::from_elem((1, 1, 1), 0.5)).unwrap();
        let p = PreconditionerState::uniform(PrecondConfig::default(), 1, 1, 2, 2.0).unwrap();
        let out = run_recurrent(&s, &BackboneSpec::online(Backbone::DeltaNet), &GateSequence::none(), None, Some(&p), &RecurrentOptions::default()).unwrap();
        let rec = out.trace.unwrap().records[0];
        assert!(rec.q < 1e-30, "q = {}", rec.q);
    }

    #[test]
    fn host_ratio_is_one_minus_beta_squared() {
        let s = unit_stream(6, 1, 32, 1, 4, 4, Some(0.5));
        let out = run_recurrent(&s, &BackboneSpec::host(Backbone::DeltaNet), &GateSequence::none(), None, None, &RecurrentOptions::default()).unwrap();
        for r in out.trace.unwrap().records {
            assert!((r.q - 0.25).abs() <= 1e-12, "q = {}", r.q);
        }
    }

    fn gates_for(seed: u64, b: usize, t: usize, h: usize, k: usize) -> GateSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GateSequence::none()
            .with_alpha_scalar(Array3::from_shape_fn((b, t, h), |_| rng.gen_range(0.8..1.0)))
            .unwrap()
            .with_alpha_vector(Array4::from_shape_fn((b, t, h, k), |_| rng.gen_range(0.8..1.0)))
            .unwrap()
            .with_retention(Array3::from_shape_fn((b, t, h), |_| rng.gen_range(0.9..1.0)))
            .unwrap()
    }

    #[test]
    fn residual_identity_and_q_equals_one_plus_two_h() {
        let s = unit_stream(7, 2, 48, 2, 6, 5, None);
        let gates = gates_for(8, 2, 48, 2, 6);
        for backbone in [Backbone::DeltaNet, Backbone::GatedDeltaNet, Backbone::Kda] {
            for apf in [false, true] {
                let cfg = PrecondConfig::default().with_eta(0.2).with_retention(if apf {
                    RetentionMode::DataDependent
                } else {
                    RetentionMode::None
                });
                let p = PreconditionerState::uniform(cfg, 2, 2, 6, 1.0).unwrap();
                let spec = BackboneSpec { backbone, online_scaled: true, apf };
                let out = run_recurrent(&s, &spec, &gates, None, Some(&p), &RecurrentOptions::default()).unwrap();
                let traj = out.write_keys.d_trajectory.unwrap();
                for r in out.trace.unwrap().records {
                    let d = traj.slice(ndarray::s![r.batch, r.t, r.head, ..]);
                    let hs = hypergrad_eval(d, s.key(r.batch, r.t, r.head), s.beta(r.batch, r.t, r.head), 1e-6).unwrap();
                    let ratio = (1.0 - s.beta(r.batch, r.t, r.head) * hs.alignment).powi(2);
                    assert!((r.f_after - r.f_before * ratio).abs() <= 1e-12 * r.f_before.max(1e-300));
                    assert!((r.q - (1.0 + 2.0 * hs.h_value)).abs() <= 1e-12);
                    assert!((r.grad_norm_sq - 2.0 * r.f_before).abs() <= 1e-12 * r.f_before);
                }
            }
        }
    }

    #[test]
    fn missing_gate_is_rejected() {
        let s = unit_stream(9, 1, 4, 1, 2, 2, None);
        let err = run_recurrent(&s, &BackboneSpec::host(Backbone::GatedDeltaNet), &GateSequence::none(), None, None, &RecurrentOptions::default()).unwrap_err();
        assert!(matches!(err, Error::MissingGate("alpha_scalar")));
        let err = run_recurrent(&s, &BackboneSpec::host(Backbone::Kda), &GateSequence::none(), None, None, &RecurrentOptions::default()).unwrap_err();
        assert!(matches!(err, Error::MissingGate("alpha_vector")));
        let err = run_recurrent(&s, &BackboneSpec::online(Backbone::DeltaNet), &GateSequence::none(), None, None, &RecurrentOptions::default()).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
    }

    #[test]
    fn unit_gates_reduce_gated_backbones_to_delta() {
        let s = unit_stream(10, 1, 24, 1, 4, 4, None);
        let ones3 = Array3::ones((1, 24, 1));
        let gates = GateSequence::none()
            .with_alpha_scalar(ones3)
            .unwrap()
            .with_alpha_vector(Array4::ones((1, 24, 1, 4)))
            .unwrap();
        let opts = RecurrentOptions::default();
        let dn = run_recurrent(&s, &BackboneSpec::host(Backbone::DeltaNet), &gates, None, None, &opts).unwrap();
        let gdn = run_recurrent(&s, &BackboneSpec::host(Backbone::GatedDeltaNet), &gates, None, None, &opts).unwrap();
        assert_eq!(dn.outputs, gdn.outputs);
        let kda = run_recurrent(&s, &BackboneSpec::host(Backbone::Kda), &gates, None, None, &opts).unwrap();
        let diff = (&dn.outputs - &kda.outputs).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(diff < 1e-13);
    }
}
