//! Shared data model: token streams, preconditioner and fast-weight states,
//! gate sequences, write keys and residual traces.
//!
//! Public tensors use the `[B, T, H, ·]` layout. Every constructor validates
//! its invariants and reports the first offending index.

use ndarray::{
    Array3, Array4, ArrayBase, ArrayView1, ArrayView2, ArrayViewMut2, Axis, Data, Dimension,
    IntoDimension,
};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `| ||k||_2 - 1 |` for streams flagged as unit-norm.
pub const UNIT_NORM_TOL: f64 = 1e-12;

/// Losses below this are treated as exactly zero by the residual trace.
pub const DEGENERATE_LOSS: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub batch: usize,
    pub length: usize,
    pub heads: usize,
    pub key_dim: usize,
    pub value_dim: usize,
}

fn check_shape(what: &'static str, found: &[usize], expected: &[usize]) -> Result<()> {
    if found != expected {
        return Err(Error::DimensionMismatch {
            what,
            expected: expected.to_vec(),
            found: found.to_vec(),
        });
    }
    Ok(())
}

fn check_finite<S, D>(what: &'static str, a: &ArrayBase<S, D>) -> Result<()>
where
    S: Data<Elem = f64>,
    D: Dimension,
{
    if let Some((idx, _)) = a.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite {
            what,
            index: idx.into_dimension().as_array_view().to_vec(),
        });
    }
    Ok(())
}

/// Checks every entry lies in `(0, 1]`.
pub(crate) fn check_unit_gate<S, D>(what: &'static str, a: &ArrayBase<S, D>) -> Result<()>
where
    S: Data<Elem = f64>,
    D: Dimension,
{
    check_finite(what, a)?;
    if let Some((idx, &v)) = a.indexed_iter().find(|(_, &v)| !(v > 0.0 && v <= 1.0)) {
        return Err(Error::GateOutOfRange {
            what,
            value: v,
            index: idx.into_dimension().as_array_view().to_vec(),
        });
    }
    Ok(())
}

// ── TokenStream ─────────────────────────────────────────────────────────

/// Batched per-token layer inputs `(q_t, k_t, v_t, beta_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenStream {
    queries: Array4<f64>,
    keys: Array4<f64>,
    values: Array4<f64>,
    betas: Array3<f64>,
    keys_unit_norm: bool,
    scale_queries: bool,
}

impl TokenStream {
    /// Builds and validates a stream. Queries are scaled by `K^{-1/2}` inside
    /// the kernels unless disabled with [`TokenStream::with_query_scaling`].
    pub fn new(
        queries: Array4<f64>,
        keys: Array4<f64>,
        values: Array4<f64>,
        betas: Array3<f64>,
    ) -> Result<Self> {
        let stream = Self {
            queries,
            keys,
            values,
            betas,
            keys_unit_norm: false,
            scale_queries: true,
        };
        stream.validate()?;
        Ok(stream)
    }

    /// Checks shapes, finiteness, the open-interval gate and the unit-norm flag.
    pub fn validate(&self) -> Result<()> {
        let (b, t, h, k) = self.keys.dim();
        let v = self.values.dim().3;
        check_shape("queries", self.queries.shape(), &[b, t, h, k])?;
        check_shape("values", self.values.shape(), &[b, t, h, v])?;
        check_shape("betas", self.betas.shape(), &[b, t, h])?;
        if b == 0 || t == 0 || h == 0 || k == 0 || v == 0 {
            return Err(Error::InvalidConfig(format!(
                "empty stream dimensions (B={b}, T={t}, H={h}, K={k}, V={v})"
            )));
        }
        check_finite("queries", &self.queries)?;
        check_finite("keys", &self.keys)?;
        check_finite("values", &self.values)?;
        check_finite("betas", &self.betas)?;
        if let Some(((bi, ti, hi), &beta)) = self
            .betas
            .indexed_iter()
            .find(|(_, &x)| !(x > 0.0 && x < 1.0))
        {
            return Err(Error::GateOutOfOpenInterval {
                what: "beta",
                value: beta,
                index: vec![bi, ti, hi],
            });
        }
        if self.keys_unit_norm {
            for ((bi, ti, hi), norm) in self.key_norms().indexed_iter() {
                if (norm - 1.0).abs() > UNIT_NORM_TOL {
                    return Err(Error::NotUnitNorm {
                        index: vec![bi, ti, hi],
                        norm: *norm,
                    });
                }
            }
        }
        Ok(())
    }

    /// Sets the unit-norm flag and verifies it.
    pub fn with_unit_norm_keys(mut self) -> Result<Self> {
        self.keys_unit_norm = true;
        self.validate()?;
        Ok(self)
    }

    pub fn with_query_scaling(mut self, on: bool) -> Self {
        self.scale_queries = on;
        self
    }

    /// Replaces the values, keeping everything else.
    pub fn with_values(mut self, values: Array4<f64>) -> Result<Self> {
        self.values = values;
        self.validate()?;
        Ok(self)
    }

    /// Replaces the queries, keeping everything else.
    pub fn with_queries(mut self, queries: Array4<f64>) -> Result<Self> {
        self.queries = queries;
        self.validate()?;
        Ok(self)
    }

    /// Returns a copy with every key scaled to unit l2 norm and the flag set.
    pub fn normalize_keys(&self) -> Result<Self> {
        let mut keys = self.keys.clone();
        let (b, t, h, _) = keys.dim();
        for bi in 0..b {
            for ti in 0..t {
                for hi in 0..h {
                    let mut k = keys.slice_mut(ndarray::s![bi, ti, hi, ..]);
                    let norm = k.dot(&k).sqrt();
                    if norm == 0.0 {
                        return Err(Error::ZeroKey {
                            index: vec![bi, ti, hi],
                        });
                    }
                    k.mapv_inplace(|x| x / norm);
                }
            }
        }
        let mut out = self.clone();
        out.keys = keys;
        out.keys_unit_norm = true;
        out.validate()?;
        Ok(out)
    }

    fn key_norms(&self) -> Array3<f64> {
        self.keys.map_axis(Axis(3), |k| k.dot(&k).sqrt())
    }

    pub fn dims(&self) -> Dims {
        let (batch, length, heads, key_dim) = self.keys.dim();
        Dims {
            batch,
            length,
            heads,
            key_dim,
            value_dim: self.values.dim().3,
        }
    }

    pub fn queries(&self) -> &Array4<f64> {
        &self.queries
    }

    pub fn keys(&self) -> &Array4<f64> {
        &self.keys
    }

    pub fn values(&self) -> &Array4<f64> {
        &self.values
    }

    pub fn betas(&self) -> &Array3<f64> {
        &self.betas
    }

    pub fn keys_unit_norm(&self) -> bool {
        self.keys_unit_norm
    }

    pub fn scale_queries(&self) -> bool {
        self.scale_queries
    }

    /// Multiplier applied to queries before every read.
    pub fn query_scale(&self) -> f64 {
        if self.scale_queries {
            (self.keys.dim().3 as f64).powf(-0.5)
        } else {
            1.0
        }
    }

    pub fn key(&self, b: usize, t: usize, h: usize) -> ArrayView1<'_, f64> {
        self.keys.slice(ndarray::s![b, t, h, ..])
    }

    pub fn query(&self, b: usize, t: usize, h: usize) -> ArrayView1<'_, f64> {
        self.queries.slice(ndarray::s![b, t, h, ..])
    }

    pub fn value(&self, b: usize, t: usize, h: usize) -> ArrayView1<'_, f64> {
        self.values.slice(ndarray::s![b, t, h, ..])
    }

    pub fn beta(&self, b: usize, t: usize, h: usize) -> f64 {
        self.betas[[b, t, h]]
    }
}

// ── Preconditioner ──────────────────────────────────────────────────────

/// Retention applied to the preconditioner state `d` (never to `S`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "rho", rename_all = "snake_case")]
pub enum RetentionMode {
    None,
    /// Same `rho` for every token and head.
    Constant(f64),
    /// Reads `GateSequence::retention`.
    DataDependent,
}

/// Hyperparameters of the online diagonal preconditioner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecondConfig {
    pub d_min: f64,
    pub d_max: f64,
    pub eta: f64,
    pub epsilon: f64,
    pub beta_aware: bool,
    pub retention: RetentionMode,
}

impl Default for PrecondConfig {
    fn default() -> Self {
        Self {
            d_min: 0.5,
            d_max: 2.0,
            eta: 0.003,
            epsilon: 1e-6,
            beta_aware: true,
            retention: RetentionMode::None,
        }
    }
}

impl PrecondConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_min.is_finite() && self.d_min > 0.0) {
            return Err(Error::InvalidConfig(format!("d_min must be > 0, got {}", self.d_min)));
        }
        if !(self.d_max.is_finite() && self.d_max >= self.d_min) {
            return Err(Error::InvalidConfig(format!(
                "d_max must be >= d_min, got [{}, {}]",
                self.d_min, self.d_max
            )));
        }
        // eta = 0 freezes the preconditioner; it is accepted for testing the
        // unscaled host as a special case.
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(Error::InvalidConfig(format!("eta must be finite and >= 0, got {}", self.eta)));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::InvalidConfig(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if let RetentionMode::Constant(rho) = self.retention {
            if !(rho > 0.0 && rho <= 1.0) {
                return Err(Error::InvalidConfig(format!("constant retention must lie in (0, 1], got {rho}")));
            }
        }
        Ok(())
    }

    pub fn with_eta(mut self, eta: f64) -> Self {
        self.eta = eta;
        self
    }

    pub fn with_retention(mut self, retention: RetentionMode) -> Self {
        self.retention = retention;
        self
    }

    pub fn with_box(mut self, d_min: f64, d_max: f64) -> Self {
        self.d_min = d_min;
        self.d_max = d_max;
        self
    }

    pub fn with_beta_aware(mut self, on: bool) -> Self {
        self.beta_aware = on;
        self
    }
}

/// Diagonal preconditioner `d` per `(batch, head)` with its feasible box.
#[derive(Debug, Clone, PartialEq)]
pub struct PreconditionerState {
    config: PrecondConfig,
    d: Array3<f64>,
}

impl PreconditionerState {
    pub fn new(config: PrecondConfig, d: Array3<f64>) -> Result<Self> {
        config.validate()?;
        check_finite("d", &d)?;
        if let Some((idx, &x)) = d
            .indexed_iter()
            .find(|(_, &x)| x < config.d_min || x > config.d_max)
        {
            return Err(Error::InvalidConfig(format!(
                "initial d={x} at {idx:?} lies outside [{}, {}]",
                config.d_min, config.d_max
            )));
        }
        Ok(Self { config, d })
    }

    /// Every coordinate starts at `value`.
    pub fn uniform(config: PrecondConfig, batch: usize, heads: usize, key_dim: usize, value: f64) -> Result<Self> {
        Self::new(config, Array3::from_elem((batch, heads, key_dim), value))
    }

    pub fn config(&self) -> &PrecondConfig {
        &self.config
    }

    pub fn d(&self) -> &Array3<f64> {
        &self.d
    }

    pub fn lane(&self, b: usize, h: usize) -> ArrayView1<'_, f64> {
        self.d.slice(ndarray::s![b, h, ..])
    }
}

// ── Fast-weight state ───────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// `S` is `V x K` (DeltaNet, Gated DeltaNet).
    ValueByKey,
    /// `S` is `K x V` (KDA).
    KeyByValue,
}

/// Matrix memory per `(batch, head)`: `[B, H, V, K]` or `[B, H, K, V]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FastWeightState {
    orientation: Orientation,
    s: Array4<f64>,
}

impl FastWeightState {
    pub fn new(orientation: Orientation, s: Array4<f64>) -> Result<Self> {
        check_finite("state", &s)?;
        Ok(Self { orientation, s })
    }

    pub fn zeros(orientation: Orientation, batch: usize, heads: usize, key_dim: usize, value_dim: usize) -> Self {
        let shape = match orientation {
            Orientation::ValueByKey => (batch, heads, value_dim, key_dim),
            Orientation::KeyByValue => (batch, heads, key_dim, value_dim),
        };
        Self {
            orientation,
            s: Array4::zeros(shape),
        }
    }

    pub fn orientation(&self) -> Orientation {
        self.orientation
    }

    pub fn tensor(&self) -> &Array4<f64> {
        &self.s
    }

    pub fn into_tensor(self) -> Array4<f64> {
        self.s
    }

    pub fn lane(&self, b: usize, h: usize) -> ArrayView2<'_, f64> {
        self.s.slice(ndarray::s![b, h, .., ..])
    }

    pub fn lane_mut(&mut self, b: usize, h: usize) -> ArrayViewMut2<'_, f64> {
        self.s.slice_mut(ndarray::s![b, h, .., ..])
    }

    /// Checks the `(K, V)` sizes implied by the orientation.
    pub fn check_dims(&self, dims: &Dims) -> Result<()> {
        let expected = match self.orientation {
            Orientation::ValueByKey => [dims.batch, dims.heads, dims.value_dim, dims.key_dim],
            Orientation::KeyByValue => [dims.batch, dims.heads, dims.key_dim, dims.value_dim],
        };
        check_shape("state", self.s.shape(), &expected)
    }
}

// ── Gates ───────────────────────────────────────────────────────────────

/// Backbone decay signals and the preconditioner retention gate.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GateSequence {
    alpha_scalar: Option<Array3<f64>>,
    alpha_vector: Option<Array4<f64>>,
    retention: Option<Array3<f64>>,
}

impl GateSequence {
    pub fn none() -> Self {
        Self::default()
    }

    /// Scalar forget gate `[B, T, H]`, entries in `(0, 1]`.
    pub fn with_alpha_scalar(mut self, alpha: Array3<f64>) -> Result<Self> {
        check_unit_gate("alpha_scalar", &alpha)?;
        self.alpha_scalar = Some(alpha);
        Ok(self)
    }

    /// Channel gate `[B, T, H, K]`, entries in `(0, 1]`.
    pub fn with_alpha_vector(mut self, alpha: Array4<f64>) -> Result<Self> {
        check_unit_gate("alpha_vector", &alpha)?;
        self.alpha_vector = Some(alpha);
        Ok(self)
    }

    /// Preconditioner retention `r_{t,h}` `[B, T, H]`, entries in `(0, 1]`.
    pub fn with_retention(mut self, retention: Array3<f64>) -> Result<Self> {
        check_unit_gate("retention", &retention)?;
        self.retention = Some(retention);
        Ok(self)
    }

    pub fn alpha_scalar(&self) -> Option<&Array3<f64>> {
        self.alpha_scalar.as_ref()
    }

    pub fn alpha_vector(&self) -> Option<&Array4<f64>> {
        self.alpha_vector.as_ref()
    }

    pub fn retention(&self) -> Option<&Array3<f64>> {
        self.retention.as_ref()
    }

    /// Checks shapes of whichever gates are present against the stream.
    pub fn check_dims(&self, dims: &Dims) -> Result<()> {
        let bth = [dims.batch, dims.length, dims.heads];
        if let Some(a) = &self.alpha_scalar {
            check_shape("alpha_scalar", a.shape(), &bth)?;
        }
        if let Some(a) = &self.alpha_vector {
            check_shape(
                "alpha_vector",
                a.shape(),
                &[dims.batch, dims.length, dims.heads, dims.key_dim],
            )?;
        }
        if let Some(r) = &self.retention {
            check_shape("retention", r.shape(), &bth)?;
        }
        Ok(())
    }
}

// ── Write keys ──────────────────────────────────────────────────────────

/// Output of the phase-1 sweep: `k~_t = d_t * k_t` for every token.
#[derive(Debug, Clone, PartialEq)]
pub struct WriteKeySequence {
    pub write_keys: Array4<f64>,
    pub d_final: Array3<f64>,
    /// `d_t` at entry to token `t` (the value used for `write_keys[t]`).
    pub d_trajectory: Option<Array4<f64>>,
    /// `true` where the update leaving token `t` was clipped by the box.
    pub clamp_mask: Option<Array4<bool>>,
}

impl WriteKeySequence {
    /// Write keys equal to the physical keys (`d = 1`), as used by host backbones.
    pub fn identity(stream: &TokenStream) -> Self {
        let d = stream.dims();
        Self {
            write_keys: stream.keys().clone(),
            d_final: Array3::ones((d.batch, d.heads, d.key_dim)),
            d_trajectory: None,
            clamp_mask: None,
        }
    }
}

// ── Residual trace ──────────────────────────────────────────────────────

/// Per-token residual record for one `(batch, head)` lane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualRecord {
    pub batch: usize,
    pub head: usize,
    pub t: usize,
    /// `f_t(S_{t-1})`, against the post-gate reference state for gated backbones.
    pub f_before: f64,
    /// `f_t(S_t)`.
    pub f_after: f64,
    /// `||grad f_t(S_{t-1})||_F^2 = ||u||^2 ||k||^2`.
    pub grad_norm_sq: f64,
    pub q: f64,
    pub position_bin: usize,
}

/// Records ordered by `(batch, head, t)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResidualTrace {
    pub bins: usize,
    pub records: Vec<ResidualRecord>,
}

/// `f_after / f_before`, with `q = 1` when the pre-write loss vanishes.
pub fn residual_ratio(f_before: f64, f_after: f64) -> f64 {
    if f_before < DEGENERATE_LOSS {
        1.0
    } else {
        f_after / f_before
    }
}

/// Bin of token `t` among `bins` equal slices of `[0, length)`.
pub fn position_bin(t: usize, length: usize, bins: usize) -> usize {
    ((t * bins) / length).min(bins.saturating_sub(1))
}

impl ResidualTrace {
    pub fn lane(&self, b: usize, h: usize) -> impl Iterator<Item = &ResidualRecord> {
        self.records
            .iter()
            .filter(move |r| r.batch == b && r.head == h)
    }

    /// `sum_t ln q_t` with zero ratios floored at `1e-300`; returns the sum
    /// and the number of floored tokens.
    pub fn log_q_sum(&self) -> (f64, usize) {
        log_sum_floored(self.records.iter().map(|r| r.q))
    }
}

/// Floor used when taking logs of exactly-zero ratios in aggregates.
pub const LOG_FLOOR: f64 = 1e-300;

pub(crate) fn log_sum_floored(values: impl Iterator<Item = f64>) -> (f64, usize) {
    let mut floored = 0;
    let mut sum = 0.0;
    for q in values {
        if q < LOG_FLOOR {
            floored += 1;
            sum += LOG_FLOOR.ln();
        } else {
            sum += q.ln();
        }
    }
    (sum, floored)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn minimal(betas: f64) -> Result<TokenStream> {
        let q = Array4::from_elem((1, 4, 1, 2), 0.3);
        let k = Array4::from_shape_fn((1, 4, 1, 2), |(_, t, _, i)| (t + i + 1) as f64);
        let v = Array4::from_elem((1, 4, 1, 2), -1.0);
        TokenStream::new(q, k, v, Array3::from_elem((1, 4, 1), betas))
    }

    #[test]
    fn accepts_minimal_stream() {
        let s = minimal(0.5).unwrap();
        assert_eq!(
            s.dims(),
            Dims { batch: 1, length: 4, heads: 1, key_dim: 2, value_dim: 2 }
        );
    }

    #[test]
    fn rejects_closed_gate() {
        let q = Array4::zeros((1, 4, 1, 2));
        let k = Array4::ones((1, 4, 1, 2));
        let v = Array4::zeros((1, 4, 1, 2));
        let mut betas = Array3::from_elem((1, 4, 1), 0.5);
        betas[[0, 2, 0]] = 1.0;
        let err = TokenStream::new(q, k, v, betas).unwrap_err();
        assert!(err.to_string().contains("gate out of open interval"));
        match err {
            Error::GateOutOfOpenInterval { index, .. } => assert_eq!(index, vec![0, 2, 0]),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn rejects_zero_gate_and_nan() {
        assert!(minimal(0.0).is_err());
        let s = minimal(0.5).unwrap();
        let mut k = s.keys().clone();
        k[[0, 3, 0, 1]] = f64::NAN;
        let err = TokenStream::new(s.queries().clone(), k, s.values().clone(), s.betas().clone())
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite { what: "keys", ref index } if index == &vec![0, 3, 0, 1]));
    }

    #[test]
    fn unit_norm_flag_is_verified() {
        let q = Array4::zeros((1, 1, 1, 2));
        let k = Array4::from_shape_vec((1, 1, 1, 2), vec![1.0, 1.0]).unwrap();
        let v = Array4::zeros((1, 1, 1, 2));
        let s = TokenStream::new(q, k, v, Array3::from_elem((1, 1, 1), 0.5)).unwrap();
        assert!(matches!(s.with_unit_norm_keys(), Err(Error::NotUnitNorm { .. })));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let q = Array4::zeros((1, 4, 1, 3));
        let k = Array4::ones((1, 4, 1, 2));
        let v = Array4::zeros((1, 4, 1, 2));
        let err = TokenStream::new(q, k, v, Array3::from_elem((1, 4, 1), 0.5)).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { what: "queries", .. }));
    }

    #[test]
    fn normalize_keys_cases() {
        let q = Array4::zeros((1, 3, 1, 2));
        let k = Array4::from_shape_vec((1, 3, 1, 2), vec![3.0, 4.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        let v = Array4::zeros((1, 3, 1, 2));
        let betas = Array3::from_elem((1, 3, 1), 0.5);
        let s = TokenStream::new(q.clone(), k, v.clone(), betas.clone()).unwrap();
        match s.normalize_keys() {
            Err(Error::ZeroKey { index }) => assert_eq!(index, vec![0, 2, 0]),
            other => panic!("expected zero-key error, got {other:?}"),
        }

        let k = Array4::from_shape_vec((1, 2, 1, 2), vec![3.0, 4.0, 1.0, 0.0]).unwrap();
        let s = TokenStream::new(
            Array4::zeros((1, 2, 1, 2)),
            k,
            Array4::zeros((1, 2, 1, 2)),
            Array3::from_elem((1, 2, 1), 0.5),
        )
        .unwrap();
        let n = s.normalize_keys().unwrap();
        assert!(n.keys_unit_norm());
        assert_eq!(n.key(0, 0, 0).to_vec(), vec![0.6, 0.8]);
        assert_eq!(n.key(0, 1, 0).to_vec(), vec![1.0, 0.0]);
    }

    #[test]
    fn query_scale_defaults_on() {
        let s = minimal(0.5).unwrap();
        assert_eq!(s.query_scale(), 2f64.powf(-0.5));
        assert_eq!(s.with_query_scaling(false).query_scale(), 1.0);
    }

    #[test]
    fn precond_state_box_checks() {
        let cfg = PrecondConfig::default();
        assert!(PreconditionerState::uniform(cfg, 1, 1, 2, 1.0).is_ok());
        assert!(PreconditionerState::uniform(cfg, 1, 1, 2, 3.0).is_err());
        assert!(PreconditionerState::uniform(cfg.with_box(0.0, 1.0), 1, 1, 2, 0.5).is_err());
        let bad = cfg.with_retention(RetentionMode::Constant(1.5));
        assert!(bad.validate().is_err());
    }

    #[test]
    fn gates_reject_zero_and_check_shape() {
        assert!(GateSequence::none().with_alpha_scalar(array![[[0.0]]]).is_err());
        let g = GateSequence::none().with_alpha_scalar(array![[[1.0], [0.5]]]).unwrap();
        let dims = Dims { batch: 1, length: 2, heads: 1, key_dim: 2, value_dim: 2 };
        assert!(g.check_dims(&dims).is_ok());
        let dims3 = Dims { length: 3, ..dims };
        assert!(g.check_dims(&dims3).is_err());
    }

    #[test]
    fn residual_ratio_convention() {
        assert_eq!(residual_ratio(0.0, 0.0), 1.0);
        assert_eq!(residual_ratio(1e-31, 1e-32), 1.0);
        assert_eq!(residual_ratio(2.0, 0.5), 0.25);
        assert_eq!(position_bin(0, 10, 4), 0);
        assert_eq!(position_bin(9, 10, 4), 3);
        assert_eq!(position_bin(5, 10, 2), 1);
    }
}
