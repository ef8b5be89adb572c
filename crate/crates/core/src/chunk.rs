//! Chunkwise WY forward kernels.
//!
//! Every backbone is run internally on a `K x V` state `M` (for the `VxK`
//! backbones `M = S^T`). Inside a chunk of `C` tokens with cumulative gate
//! `G_i = a_1 * .. * a_i` (all ones for DeltaNet, a broadcast scalar for GDN):
//!
//! ```text
//! gk = G * K,  gq = G * Q,  nk = K~ / max(G, floor)
//! A  = strict_lower(diag(b) gk nk^T)
//! (I + A) [W | U] = diag(b) [gk | V]          forward substitution
//! D  = U - W M                                 scaled residuals b_i u_i
//! O  = gq M + tril(gq nk^T) D
//! M' = Diag(G_C) M + (R * K~)^T D              R_i = a_{i+1} * .. * a_C
//! ```
//!
//! Lanes run in parallel, chunks run in order. The kernels are generic over
//! the float type so the same code provides the 64-bit path and the 32-bit
//! replay path.

use std::fmt::Debug;

use ndarray::{s, Array2, Array4, ArrayView2};
use num_traits::Float;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::recurrent::{lanes, Backbone};
use crate::types::{Dims, FastWeightState, GateSequence, Orientation, TokenStream};

/// Float types the kernels run in.
pub trait KernelFloat: Float + Debug + Send + Sync + 'static {
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl KernelFloat for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

impl KernelFloat for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

pub const DEFAULT_GAMMA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChunkOptions {
    pub chunk_size: usize,
    /// Lower clamp on the cumulative gate before dividing by it.
    pub gamma_floor: f64,
}

impl ChunkOptions {
    pub fn new(chunk_size: usize) -> Self {
        Self { chunk_size, gamma_floor: DEFAULT_GAMMA_FLOOR }
    }

    fn validate(&self) -> Result<()> {
        if self.chunk_size == 0 {
            return Err(Error::InvalidConfig("chunk size must be positive".into()));
        }
        if !(self.gamma_floor > 0.0 && self.gamma_floor.is_finite()) {
            return Err(Error::InvalidConfig(format!("gamma floor {} must be positive", self.gamma_floor)));
        }
        Ok(())
    }
}

impl Default for ChunkOptions {
    fn default() -> Self {
        Self::new(64)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ChunkDiagnostics {
    /// Cumulative-gate entries that hit the floor before division.
    pub floored_entries: u64,
    /// Zero-write tokens appended per lane to reach a multiple of `C`.
    pub padded_tokens: usize,
    pub chunks: usize,
}

impl ChunkDiagnostics {
    fn merge(&mut self, other: &ChunkDiagnostics) {
        self.floored_entries += other.floored_entries;
        self.chunks += other.chunks;
        self.padded_tokens = self.padded_tokens.max(other.padded_tokens);
    }
}

#[derive(Debug, Clone)]
pub struct ChunkOutput<F> {
    /// `[B, T, H, V]`.
    pub outputs: Array4<F>,
    /// `[B, H, V, K]` or `[B, H, K, V]` following the backbone orientation.
    pub final_state: Array4<F>,
    pub orientation: Orientation,
    pub diagnostics: ChunkDiagnostics,
}

impl ChunkOutput<f64> {
    pub fn state(&self) -> FastWeightState {
        FastWeightState::new(self.orientation, self.final_state.clone()).expect("kernel state is finite")
    }
}

/// Per-chunk buffers. Row-major, one row per token of the chunk.
#[derive(Debug, Clone)]
pub struct ChunkWorkspace<F> {
    pub chunk_size: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    /// Strictly lower `A`, `C x C`.
    pub gram: Array2<F>,
    /// `C x K`.
    pub cumulative_key: Array2<F>,
    /// `C x V`.
    pub cumulative_value: Array2<F>,
    /// Cumulative gate `G`, `C x K`.
    pub gamma: Array2<F>,
    /// Suffix gate products `R`, `C x K`.
    pub suffix: Array2<F>,
    gk: Array2<F>,
    gq: Array2<F>,
    nk: Array2<F>,
    scores: Array2<F>,
}

impl<F: KernelFloat> ChunkWorkspace<F> {
    pub fn new(chunk_size: usize, key_dim: usize, value_dim: usize) -> Self {
        let (c, k, v) = (chunk_size, key_dim, value_dim);
        Self {
            chunk_size,
            key_dim,
            value_dim,
            gram: Array2::zeros((c, c)),
            cumulative_key: Array2::zeros((c, k)),
            cumulative_value: Array2::zeros((c, v)),
            gamma: Array2::zeros((c, k)),
            suffix: Array2::zeros((c, k)),
            gk: Array2::zeros((c, k)),
            gq: Array2::zeros((c, k)),
            nk: Array2::zeros((c, k)),
            scores: Array2::zeros((c, c)),
        }
    }

    /// `(I + gram)^{-1}` by forward substitution on the identity.
    pub fn ut_inverse(&self) -> Result<Array2<F>> {
        ut_solve(self.gram.view(), Array2::eye(self.chunk_size).view())
    }
}

/// Solves `(I + gram) X = rhs` for strictly lower-triangular `gram`.
pub fn ut_solve<F: KernelFloat>(gram: ArrayView2<'_, F>, rhs: ArrayView2<'_, F>) -> Result<Array2<F>> {
    let (c, c2) = gram.dim();
    if c != c2 || rhs.nrows() != c {
        return Err(Error::DimensionMismatch {
            what: "ut_solve",
            expected: vec![c, c],
            found: vec![c2, rhs.nrows()],
        });
    }
    for ((i, j), g) in gram.indexed_iter() {
        if !g.is_finite() {
            return Err(Error::NonFinite { what: "gram", index: vec![i, j] });
        }
        if j >= i && *g != F::zero() {
            return Err(Error::InvalidConfig(format!("gram entry ({i}, {j}) is not strictly lower")));
        }
    }
    for ((i, j), r) in rhs.indexed_iter() {
        if !r.is_finite() {
            return Err(Error::NonFinite { what: "rhs", index: vec![i, j] });
        }
    }
    let g: Vec<F> = gram.iter().copied().collect();
    let mut x = rhs.as_standard_layout().into_owned();
    forward_substitute(&g, c, x.as_slice_mut().expect("standard layout"), rhs.ncols());
    check_rows(x.as_slice().expect("standard layout"), rhs.ncols())?;
    Ok(x)
}

/// In place: row `i` of `x` becomes `x_i - sum_{j<i} a_ij x_j`.
#[inline]
fn forward_substitute<F: KernelFloat>(a: &[F], c: usize, x: &mut [F], ncol: usize) {
    for i in 1..c {
        let (solved, rest) = x.split_at_mut(i * ncol);
        let row = &mut rest[..ncol];
        for j in 0..i {
            let g = a[i * c + j];
            if g == F::zero() {
                continue;
            }
            for (xi, xj) in row.iter_mut().zip(&solved[j * ncol..(j + 1) * ncol]) {
                *xi = *xi - g * *xj;
            }
        }
    }
}

fn check_rows<F: KernelFloat>(x: &[F], ncol: usize) -> Result<()> {
    match x.iter().position(|v| !v.is_finite()) {
        Some(p) => Err(Error::SingularSystem { row: p / ncol.max(1) }),
        None => Ok(()),
    }
}

/// Raw inputs of one `(b, h)` lane, row-major `T x dim`. Queries are taken
/// as already scaled. Betas here may be any finite value, including zero.
#[derive(Debug, Clone)]
pub struct LaneInputs<F> {
    pub key_dim: usize,
    pub value_dim: usize,
    pub queries: Vec<F>,
    pub keys: Vec<F>,
    pub write_keys: Vec<F>,
    pub values: Vec<F>,
    pub betas: Vec<F>,
    /// Per-channel gates `T x K` (a scalar gate is broadcast), `None` for DeltaNet.
    pub alpha: Option<Vec<F>>,
}

impl<F: KernelFloat> LaneInputs<F> {
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    fn check(&self) -> Result<()> {
        let t = self.len();
        let (k, v) = (self.key_dim, self.value_dim);
        let shapes = [
            ("queries", self.queries.len(), t * k),
            ("keys", self.keys.len(), t * k),
            ("write_keys", self.write_keys.len(), t * k),
            ("values", self.values.len(), t * v),
            ("alpha", self.alpha.as_ref().map_or(t * k, Vec::len), t * k),
        ];
        for (what, found, expected) in shapes {
            if found != expected {
                return Err(Error::DimensionMismatch { what, expected: vec![expected], found: vec![found] });
            }
        }
        Ok(())
    }

    /// Appends zero-write tokens (`b = 0`, zero vectors, unit gate).
    fn pad_to(&mut self, len: usize) {
        let extra = len.saturating_sub(self.len());
        let (k, v) = (self.key_dim, self.value_dim);
        self.queries.extend(std::iter::repeat_n(F::zero(), extra * k));
        self.keys.extend(std::iter::repeat_n(F::zero(), extra * k));
        self.write_keys.extend(std::iter::repeat_n(F::zero(), extra * k));
        self.values.extend(std::iter::repeat_n(F::zero(), extra * v));
        self.betas.extend(std::iter::repeat_n(F::zero(), extra));
        if let Some(a) = self.alpha.as_mut() {
            a.extend(std::iter::repeat_n(F::one(), extra * k));
        }
    }

    /// Gathers lane `(b, h)` of a validated stream.
    pub fn from_stream(
        stream: &TokenStream,
        write_keys: &Array4<f64>,
        backbone: Backbone,
        gates: &GateSequence,
        b: usize,
        h: usize,
    ) -> Self {
        let dims = stream.dims();
        let (nt, k) = (dims.length, dims.key_dim);
        let scale = stream.query_scale();
        let mut x = Self {
            key_dim: k,
            value_dim: dims.value_dim,
            queries: Vec::with_capacity(nt * k),
            keys: Vec::with_capacity(nt * k),
            write_keys: Vec::with_capacity(nt * k),
            values: Vec::with_capacity(nt * dims.value_dim),
            betas: Vec::with_capacity(nt),
            alpha: None,
        };
        for t in 0..nt {
            x.queries.extend(stream.query(b, t, h).iter().map(|q| F::of(scale * q)));
            x.keys.extend(stream.key(b, t, h).iter().map(|&v| F::of(v)));
            x.write_keys.extend(write_keys.slice(s![b, t, h, ..]).iter().map(|&v| F::of(v)));
            x.values.extend(stream.value(b, t, h).iter().map(|&v| F::of(v)));
            x.betas.push(F::of(stream.beta(b, t, h)));
        }
        x.alpha = match backbone {
            Backbone::DeltaNet => None,
            Backbone::GatedDeltaNet => {
                let a = gates.alpha_scalar().expect("validated");
                Some((0..nt).flat_map(|t| std::iter::repeat_n(F::of(a[[b, t, h]]), k)).collect())
            }
            Backbone::Kda => {
                let a = gates.alpha_vector().expect("validated");
                Some(a.slice(s![b, .., h, ..]).iter().map(|&v| F::of(v)).collect())
            }
        };
        x
    }
}

/// Fills the workspace for the chunk starting at token `t0`.
fn prepare_chunk<F: KernelFloat>(x: &LaneInputs<F>, t0: usize, floor: F, ws: &mut ChunkWorkspace<F>) -> u64 {
    let (c, k, v) = (ws.chunk_size, ws.key_dim, ws.value_dim);
    let rows = |dim: usize| (t0 * dim, (t0 + c) * dim);
    let (q0, q1) = rows(k);
    let keys = &x.keys[q0..q1];
    let wk = &x.write_keys[q0..q1];
    let qs = &x.queries[q0..q1];
    let betas = &x.betas[t0..t0 + c];
    let mut floored = 0u64;

    let gamma = ws.gamma.as_slice_mut().expect("standard layout");
    let suffix = ws.suffix.as_slice_mut().expect("standard layout");
    let gk = ws.gk.as_slice_mut().expect("standard layout");
    let gq = ws.gq.as_slice_mut().expect("standard layout");
    let nk = ws.nk.as_slice_mut().expect("standard layout");
    match &x.alpha {
        None => {
            gamma.iter_mut().for_each(|g| *g = F::one());
            suffix.iter_mut().for_each(|g| *g = F::one());
            gk.copy_from_slice(keys);
            gq.copy_from_slice(qs);
            nk.copy_from_slice(wk);
        }
        Some(alpha) => {
            let alpha = &alpha[q0..q1];
            for i in 0..c {
                for j in 0..k {
                    let prev = if i == 0 { F::one() } else { gamma[(i - 1) * k + j] };
                    gamma[i * k + j] = prev * alpha[i * k + j];
                }
            }
            for i in (0..c).rev() {
                for j in 0..k {
                    suffix[i * k + j] = if i + 1 == c { F::one() } else { suffix[(i + 1) * k + j] * alpha[(i + 1) * k + j] };
                }
            }
            for idx in 0..c * k {
                let g = gamma[idx];
                gk[idx] = g * keys[idx];
                gq[idx] = g * qs[idx];
                let denom = if g < floor {
                    floored += 1;
                    floor
                } else {
                    g
                };
                nk[idx] = wk[idx] / denom;
            }
        }
    }

    // Strictly lower gram and the inclusive score matrix.
    let gram = ws.gram.as_slice_mut().expect("standard layout");
    let scores = ws.scores.as_slice_mut().expect("standard layout");
    for i in 0..c {
        let gki = &gk[i * k..(i + 1) * k];
        let gqi = &gq[i * k..(i + 1) * k];
        for j in 0..c {
            if j <= i {
                let nkj = &nk[j * k..(j + 1) * k];
                scores[i * c + j] = dot(gqi, nkj);
                gram[i * c + j] = if j < i { betas[i] * dot(gki, nkj) } else { F::zero() };
            } else {
                scores[i * c + j] = F::zero();
                gram[i * c + j] = F::zero();
            }
        }
    }

    // Right-hand sides diag(b) gk and diag(b) V.
    let w = ws.cumulative_key.as_slice_mut().expect("standard layout");
    let u = ws.cumulative_value.as_slice_mut().expect("standard layout");
    let vals = &x.values[t0 * v..(t0 + c) * v];
    for i in 0..c {
        for j in 0..k {
            w[i * k + j] = betas[i] * gk[i * k + j];
        }
        for j in 0..v {
            u[i * v + j] = betas[i] * vals[i * v + j];
        }
    }
    forward_substitute(gram, c, w, k);
    forward_substitute(gram, c, u, v);
    floored
}

#[inline]
fn dot<F: KernelFloat>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |acc, (x, y)| acc + *x * *y)
}

/// Runs one lane over all chunks; `m` is the `K x V` state, updated in place.
/// Returns outputs (`T x V`, unpadded) and diagnostics.
pub fn chunk_forward_lane<F: KernelFloat>(
    inputs: &LaneInputs<F>,
    m: &mut [F],
    opts: &ChunkOptions,
) -> Result<(Vec<F>, ChunkDiagnostics)> {
    opts.validate()?;
    inputs.check()?;
    let (k, v) = (inputs.key_dim, inputs.value_dim);
    if m.len() != k * v {
        return Err(Error::DimensionMismatch { what: "lane state", expected: vec![k * v], found: vec![m.len()] });
    }
    let c = opts.chunk_size;
    let nt = inputs.len();
    let padded_len = nt.div_ceil(c) * c;
    let padded;
    let x = if padded_len == nt {
        inputs
    } else {
        let mut p = inputs.clone();
        p.pad_to(padded_len);
        padded = p;
        &padded
    };
    let floor = F::of(opts.gamma_floor);
    let mut ws = ChunkWorkspace::new(c, k, v);
    let mut outputs = vec![F::zero(); padded_len * v];
    let mut delta = vec![F::zero(); c * v];
    let mut diag = ChunkDiagnostics { padded_tokens: padded_len - nt, ..Default::default() };

    for t0 in (0..padded_len).step_by(c) {
        diag.floored_entries += prepare_chunk(x, t0, floor, &mut ws);
        diag.chunks += 1;
        let w = ws.cumulative_key.as_slice().expect("standard layout");
        let u = ws.cumulative_value.as_slice().expect("standard layout");
        check_rows(w, k)?;
        check_rows(u, v)?;

        // D = U - W M
        for i in 0..c {
            let di = &mut delta[i * v..(i + 1) * v];
            di.copy_from_slice(&u[i * v..(i + 1) * v]);
            for (j, &wij) in w[i * k..(i + 1) * k].iter().enumerate() {
                if wij == F::zero() {
                    continue;
                }
                for (d, mj) in di.iter_mut().zip(&m[j * v..(j + 1) * v]) {
                    *d = *d - wij * *mj;
                }
            }
        }

        // O = gq M + tril(gq nk^T) D
        let gq = ws.gq.as_slice().expect("standard layout");
        let scores = ws.scores.as_slice().expect("standard layout");
        for i in 0..c {
            let oi = &mut outputs[(t0 + i) * v..(t0 + i + 1) * v];
            for (j, &g) in gq[i * k..(i + 1) * k].iter().enumerate() {
                for (o, mj) in oi.iter_mut().zip(&m[j * v..(j + 1) * v]) {
                    *o = *o + g * *mj;
                }
            }
            for j in 0..=i {
                let sc = scores[i * c + j];
                for (o, dj) in oi.iter_mut().zip(&delta[j * v..(j + 1) * v]) {
                    *o = *o + sc * *dj;
                }
            }
        }

        // M' = Diag(G_C) M + (R * K~)^T D
        let gamma = ws.gamma.as_slice().expect("standard layout");
        let suffix = ws.suffix.as_slice().expect("standard layout");
        let wk = &x.write_keys[t0 * k..(t0 + c) * k];
        for j in 0..k {
            let row = &mut m[j * v..(j + 1) * v];
            let gc = gamma[(c - 1) * k + j];
            if gc != F::one() {
                row.iter_mut().for_each(|e| *e = *e * gc);
            }
            for i in 0..c {
                let coef = suffix[i * k + j] * wk[i * k + j];
                if coef == F::zero() {
                    continue;
                }
                for (e, di) in row.iter_mut().zip(&delta[i * v..(i + 1) * v]) {
                    *e = *e + coef * *di;
                }
            }
        }
    }
    outputs.truncate(nt * v);
    Ok((outputs, diag))
}

/// Workspace of chunk `chunk` of lane `(b, h)`, for inspection.
pub fn inspect_chunk(
    stream: &TokenStream,
    write_keys: &Array4<f64>,
    backbone: Backbone,
    gates: &GateSequence,
    b: usize,
    h: usize,
    chunk: usize,
    chunk_size: usize,
) -> Result<ChunkWorkspace<f64>> {
    let dims = stream.dims();
    check_inputs(stream, write_keys, backbone, gates, None)?;
    let mut x = LaneInputs::<f64>::from_stream(stream, write_keys, backbone, gates, b, h);
    x.pad_to(dims.length.div_ceil(chunk_size) * chunk_size);
    if (chunk + 1) * chunk_size > x.len() {
        return Err(Error::InvalidConfig(format!("chunk {chunk} out of range")));
    }
    let mut ws = ChunkWorkspace::new(chunk_size, dims.key_dim, dims.value_dim);
    prepare_chunk(&x, chunk * chunk_size, DEFAULT_GAMMA_FLOOR, &mut ws);
    Ok(ws)
}

fn check_inputs(
    stream: &TokenStream,
    write_keys: &Array4<f64>,
    backbone: Backbone,
    gates: &GateSequence,
    init: Option<&FastWeightState>,
) -> Result<Dims> {
    let dims = stream.dims();
    if write_keys.shape() != stream.keys().shape() {
        return Err(Error::DimensionMismatch {
            what: "write_keys",
            expected: stream.keys().shape().to_vec(),
            found: write_keys.shape().to_vec(),
        });
    }
    if let Some((i, _)) = write_keys.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite { what: "write_keys", index: vec![i.0, i.1, i.2, i.3] });
    }
    gates.check_dims(&dims)?;
    match backbone {
        Backbone::GatedDeltaNet if gates.alpha_scalar().is_none() => return Err(Error::MissingGate("alpha_scalar")),
        Backbone::Kda if gates.alpha_vector().is_none() => return Err(Error::MissingGate("alpha_vector")),
        _ => {}
    }
    if let Some(s) = init {
        if s.orientation() != backbone.orientation() {
            return Err(Error::InvalidConfig(format!(
                "state orientation {:?} does not match backbone {:?}",
                s.orientation(),
                backbone
            )));
        }
        s.check_dims(&dims)?;
    }
    Ok(dims)
}

/// Chunkwise forward for any backbone in float type `F`.
pub fn chunk_forward<F: KernelFloat>(
    backbone: Backbone,
    stream: &TokenStream,
    write_keys: &Array4<f64>,
    gates: &GateSequence,
    init_state: Option<&FastWeightState>,
    opts: &ChunkOptions,
) -> Result<ChunkOutput<F>> {
    opts.validate()?;
    let dims = check_inputs(stream, write_keys, backbone, gates, init_state)?;
    let (k, v) = (dims.key_dim, dims.value_dim);
    let orientation = backbone.orientation();
    let lane_ids = lanes(&dims);
    let results: Vec<Result<(Vec<F>, Vec<F>, ChunkDiagnostics)>> = lane_ids
        .par_iter()
        .map(|&(b, h)| {
            let x = LaneInputs::<F>::from_stream(stream, write_keys, backbone, gates, b, h);
            let mut m = vec![F::zero(); k * v];
            if let Some(s0) = init_state {
                let lane = s0.lane(b, h);
                for (idx, val) in lane.indexed_iter() {
                    let (r, c) = idx;
                    match orientation {
                        Orientation::ValueByKey => m[c * v + r] = F::of(*val),
                        Orientation::KeyByValue => m[r * v + c] = F::of(*val),
                    }
                }
            }
            let (out, diag) = chunk_forward_lane(&x, &mut m, opts)?;
            Ok((out, m, diag))
        })
        .collect();

    let mut outputs = Array4::zeros((dims.batch, dims.length, dims.heads, v));
    let mut final_state = match orientation {
        Orientation::ValueByKey => Array4::zeros((dims.batch, dims.heads, v, k)),
        Orientation::KeyByValue => Array4::zeros((dims.batch, dims.heads, k, v)),
    };
    let mut diagnostics = ChunkDiagnostics::default();
    for (&(b, h), r) in lane_ids.iter().zip(results) {
        let (out, m, diag) = r?;
        diagnostics.merge(&diag);
        for t in 0..dims.length {
            for i in 0..v {
                outputs[[b, t, h, i]] = out[t * v + i];
            }
        }
        for j in 0..k {
            for i in 0..v {
                match orientation {
                    Orientation::ValueByKey => final_state[[b, h, i, j]] = m[j * v + i],
                    Orientation::KeyByValue => final_state[[b, h, j, i]] = m[j * v + i],
                }
            }
        }
    }
    Ok(ChunkOutput { outputs, final_state, orientation, diagnostics })
}

/// OSDN (or DeltaNet when `write_keys == keys`) in 64-bit.
pub fn chunk_forward_osdn(
    stream: &TokenStream,
    write_keys: &Array4<f64>,
    init_state: Option<&FastWeightState>,
    chunk_size: usize,
) -> Result<ChunkOutput<f64>> {
    chunk_forward(Backbone::DeltaNet, stream, write_keys, &GateSequence::none(), init_state, &ChunkOptions::new(chunk_size))
}

/// OSGDN (decay-ratio gauge) in 64-bit.
pub fn chunk_forward_osgdn(
    stream: &TokenStream,
    write_keys: &Array4<f64>,
    gates: &GateSequence,
    init_state: Option<&FastWeightState>,
    chunk_size: usize,
) -> Result<ChunkOutput<f64>> {
    chunk_forward(Backbone::GatedDeltaNet, stream, write_keys, gates, init_state, &ChunkOptions::new(chunk_size))
}

/// OSKDA with channel-wise cumulative gates in 64-bit.
pub fn chunk_forward_oskda(
    stream: &TokenStream,
    write_keys: &Array4<f64>,
    gates: &GateSequence,
    init_state: Option<&FastWeightState>,
    chunk_size: usize,
) -> Result<ChunkOutput<f64>> {
    chunk_forward(Backbone::Kda, stream, write_keys, gates, init_state, &ChunkOptions::new(chunk_size))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recurrent::{run_phase2, RecurrentOptions};
    use crate::types::WriteKeySequence;
    use ndarray::{array, Array3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn max_abs<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>, b: &ndarray::Array<f64, D>) -> f64 {
        a.iter().zip(b.iter()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
    }

    fn random_stream(seed: u64, b: usize, t: usize, h: usize, k: usize, v: usize) -> (TokenStream, Array4<f64>, GateSequence) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = Array4::from_shape_fn((b, t, h, k), |_| rng.gen_range(-1.0..1.0));
        let keys = Array4::from_shape_fn((b, t, h, k), |_| rng.gen_range(-1.0..1.0));
        let vals = Array4::from_shape_fn((b, t, h, v), |_| rng.gen_range(-1.0..1.0));
        let betas = Array3::from_shape_fn((b, t, h), |_| rng.gen_range(0.05..0.95));
        let stream = TokenStream::new(q, keys, vals, betas).unwrap().normalize_keys().unwrap();
        let d = Array4::from_shape_fn((b, t, h, k), |_| rng.gen_range(0.5..2.0));
        let wk = &d * stream.keys();
        let gates = GateSequence::none()
            .with_alpha_scalar(Array3::from_shape_fn((b, t, h), |_| rng.gen_range(0.9..1.0)))
            .unwrap()
            .with_alpha_vector(Array4::from_shape_fn((b, t, h, k), |_| rng.gen_range(0.9..1.0)))
            .unwrap();
        (stream, wk, gates)
    }

    fn reference(backbone: Backbone, s: &TokenStream, wk: &Array4<f64>, g: &GateSequence) -> (Array4<f64>, FastWeightState) {
        let opts = RecurrentOptions { record_trace: false, position_bins: 1 };
        let (o, st, _, _) = run_phase2(s, backbone, g, wk, None, &opts, false).unwrap();
        (o, st)
    }

    #[test]
    fn ut_solve_examples() {
        let rhs = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(ut_solve(Array2::<f64>::zeros((2, 2)).view(), rhs.view()).unwrap(), rhs);
        let g = array![[0.0, 0.0], [0.5, 0.0]];
        let x = ut_solve(g.view(), rhs.view()).unwrap();
        assert_eq!(x.row(1).to_vec(), vec![3.0 - 0.5 * 1.0, 4.0 - 0.5 * 2.0]);
        assert!(ut_solve(array![[0.0, 1.0], [0.0, 0.0]].view(), rhs.view()).is_err());
        assert!(matches!(
            ut_solve(array![[0.0, 0.0], [f64::NAN, 0.0]].view(), rhs.view()),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn ut_solve_random_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = 64;
        let g = Array2::from_shape_fn((c, c), |(i, j)| if j < i { rng.gen_range(-0.2..0.2) } else { 0.0 });
        let rhs = Array2::from_shape_fn((c, 8), |_| rng.gen_range(-1.0..1.0));
        let x = ut_solve(g.view(), rhs.view()).unwrap();
        let resid = (&x + &g.dot(&x)) - &rhs;
        assert!(resid.iter().fold(0.0f64, |m, r| m.max(r.abs())) <= 1e-12);
    }

    #[test]
    fn ut_inverse_is_exact_on_sampled_chunks() {
        let (s, wk, g) = random_stream(12, 1, 64, 1, 16, 16);
        for backbone in [Backbone::DeltaNet, Backbone::GatedDeltaNet, Backbone::Kda] {
            for chunk in 0..2 {
                let ws = inspect_chunk(&s, &wk, backbone, &g, 0, 0, chunk, 32).unwrap();
                for ((i, j), v) in ws.gram.indexed_iter() {
                    if j >= i {
                        assert_eq!(*v, 0.0);
                    }
                }
                let t = ws.ut_inverse().unwrap();
                let prod = (Array2::eye(32) + &ws.gram).dot(&t);
                assert!(max_abs(&prod, &Array2::eye(32)) <= 1e-12);
            }
        }
    }

    #[test]
    fn orthogonal_keys_have_zero_gram() {
        let mut keys = Array4::zeros((1, 4, 1, 4));
        for t in 0..4 {
            keys[[0, t, 0, t]] = 1.0;
        }
        let s = TokenStream::new(Array4::ones((1, 4, 1, 4)), keys.clone(), Array4::ones((1, 4, 1, 2)), Array3::from_elem((1, 4, 1), 0.5)).unwrap();
        let wk = &keys * 1.5;
        let ws = inspect_chunk(&s, &wk, Backbone::DeltaNet, &GateSequence::none(), 0, 0, 0, 4).unwrap();
        assert!(ws.gram.iter().all(|&g| g == 0.0));
        assert_eq!(ws.ut_inverse().unwrap(), Array2::<f64>::eye(4));
    }

    #[test]
    fn host_gram_is_symmetric() {
        let (s, _, _) = random_stream(13, 1, 16, 1, 8, 4);
        let k: Array2<f64> = s.keys().slice(s![0, .., 0, ..]).to_owned();
        let wk: Array2<f64> = WriteKeySequence::identity(&s).write_keys.slice(s![0, .., 0, ..]).to_owned();
        let g = k.dot(&wk.t());
        assert!(max_abs(&g, &g.t().to_owned()) == 0.0);
    }

    #[test]
    fn single_token_chunks_match_recurrence_exactly() {
        let (s, wk, g) = random_stream(14, 1, 12, 2, 4, 3);
        let (o_ref, st_ref) = reference(Backbone::DeltaNet, &s, &wk, &g);
        let out = chunk_forward_osdn(&s, &wk, None, 1).unwrap();
        assert!(max_abs(&out.outputs, &o_ref) <= 1e-15);
        assert!(max_abs(out.state().tensor(), st_ref.tensor()) <= 1e-15);
    }

    #[test]
    fn random_equivalence_all_backbones() {
        let (s, wk, g) = random_stream(15, 2, 128, 2, 16, 16);
        for backbone in [Backbone::DeltaNet, Backbone::GatedDeltaNet, Backbone::Kda] {
            let (o_ref, st_ref) = reference(backbone, &s, &wk, &g);
            let out = chunk_forward::<f64>(backbone, &s, &wk, &g, None, &ChunkOptions::new(32)).unwrap();
            assert!(max_abs(&out.outputs, &o_ref) <= 1e-9, "{backbone:?}");
            assert!(max_abs(out.state().tensor(), st_ref.tensor()) <= 1e-9, "{backbone:?}");
            assert_eq!(out.diagnostics.floored_entries, 0);
        }
    }

    #[test]
    fn unit_gates_reduce_to_delta_chunk() {
        let (s, wk, _) = random_stream(16, 1, 64, 1, 8, 8);
        let ones = GateSequence::none()
            .with_alpha_scalar(Array3::ones((1, 64, 1)))
            .unwrap()
            .with_alpha_vector(Array4::ones((1, 64, 1, 8)))
            .unwrap();
        let dn = chunk_forward_osdn(&s, &wk, None, 16).unwrap();
        let gdn = chunk_forward_osgdn(&s, &wk, &ones, None, 16).unwrap();
        assert!(max_abs(&dn.outputs, &gdn.outputs) <= 1e-12);
        let kda = chunk_forward_oskda(&s, &wk, &ones, None, 16).unwrap();
        assert!(max_abs(&dn.outputs, &kda.outputs) <= 1e-12);
        let dn_state = dn.state();
        for b in 0..1 {
            let a = dn_state.lane(b, 0);
            let c = kda.final_state.slice(s![b, 0, .., ..]);
            assert!(max_abs(&a.to_owned(), &c.t().to_owned()) <= 1e-12);
        }
    }

    #[test]
    fn two_token_gdn_chunk_matches_two_steps() {
        let q = Array4::from_shape_vec((1, 2, 1, 2), vec![1.0, 0.0, 0.3, 0.7]).unwrap();
        let k = Array4::from_shape_vec((1, 2, 1, 2), vec![0.6, 0.8, 1.0, 0.0]).unwrap();
        let v = Array4::from_shape_vec((1, 2, 1, 2), vec![1.0, -1.0, 0.5, 2.0]).unwrap();
        let s = TokenStream::new(q, k.clone(), v, Array3::from_elem((1, 2, 1), 0.5)).unwrap().with_query_scaling(false);
        let gates = GateSequence::none().with_alpha_scalar(Array3::from_elem((1, 2, 1), 0.5)).unwrap();
        let wk = &k * 1.25;
        let out = chunk_forward_osgdn(&s, &wk, &gates, None, 2).unwrap();
        let mut st = Array2::<f64>::zeros((2, 2));
        let mut outs = Vec::new();
        for t in 0..2 {
            let r = crate::recurrent::step_gdn(
                st.view(),
                s.query(0, t, 0),
                s.key(0, t, 0),
                wk.slice(s![0, t, 0, ..]),
                s.value(0, t, 0),
                0.5,
                0.5,
            );
            st = r.state;
            outs.push(r.output);
        }
        for t in 0..2 {
            for i in 0..2 {
                assert!((out.outputs[[0, t, 0, i]] - outs[t][i]).abs() <= 1e-15);
            }
        }
        assert!(max_abs(&out.state().lane(0, 0).to_owned(), &st) <= 1e-15);
    }

    #[test]
    fn zero_beta_kda_lane_is_read_only_decay() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (t, k, v, c) = (8, 3, 2, 4);
        let alpha: Vec<f64> = (0..t * k).map(|_| rng.gen_range(0.5..1.0)).collect();
        let x = LaneInputs {
            key_dim: k,
            value_dim: v,
            queries: (0..t * k).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            keys: (0..t * k).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            write_keys: (0..t * k).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            values: (0..t * v).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            betas: vec![0.0; t],
            alpha: Some(alpha.clone()),
        };
        let m0: Vec<f64> = (0..k * v).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut m = m0.clone();
        let (out, _) = chunk_forward_lane(&x, &mut m, &ChunkOptions::new(c)).unwrap();
        let mut expect = m0.clone();
        for ti in 0..t {
            for j in 0..k {
                for i in 0..v {
                    expect[j * v + i] *= alpha[ti * k + j];
                }
            }
            for i in 0..v {
                let read: f64 = (0..k).map(|j| x.queries[ti * k + j] * expect[j * v + i]).sum();
                assert!((out[ti * v + i] - read).abs() <= 1e-14);
            }
        }
        for (a, b) in m.iter().zip(&expect) {
            assert!((a - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn padding_truncates_and_matches() {
        let (s, wk, g) = random_stream(18, 1, 37, 2, 8, 4);
        for backbone in [Backbone::DeltaNet, Backbone::GatedDeltaNet, Backbone::Kda] {
            let (o_ref, st_ref) = reference(backbone, &s, &wk, &g);
            let out = chunk_forward::<f64>(backbone, &s, &wk, &g, None, &ChunkOptions::new(16)).unwrap();
            assert_eq!(out.outputs.dim(), o_ref.dim());
            assert_eq!(out.diagnostics.padded_tokens, 11);
            assert!(max_abs(&out.outputs, &o_ref) <= 1e-9);
            assert!(max_abs(out.state().tensor(), st_ref.tensor()) <= 1e-9);
        }
    }

    #[test]
    fn chunk_size_independence() {
        let (s, wk, g) = random_stream(19, 1, 128, 1, 8, 8);
        for backbone in [Backbone::DeltaNet, Backbone::GatedDeltaNet, Backbone::Kda] {
            let runs: Vec<_> = [1, 2, 16, 64]
                .iter()
                .map(|&c| chunk_forward::<f64>(backbone, &s, &wk, &g, None, &ChunkOptions::new(c)).unwrap().outputs)
                .collect();
            for a in &runs {
                for b in &runs {
                    assert!(max_abs(a, b) <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn thirty_two_bit_path_is_close() {
        let (s, wk, g) = random_stream(20, 1, 128, 2, 16, 16);
        for backbone in [Backbone::DeltaNet, Backbone::GatedDeltaNet, Backbone::Kda] {
            let (o_ref, _) = reference(backbone, &s, &wk, &g);
            let out = chunk_forward::<f32>(backbone, &s, &wk, &g, None, &ChunkOptions::new(32)).unwrap();
            let scale = o_ref.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let err = out.outputs.iter().zip(o_ref.iter()).fold(0.0f64, |m, (a, b)| m.max((*a as f64 - b).abs()));
            assert!(err / scale <= 7e-3, "{backbone:?}: {}", err / scale);
        }
    }

    #[test]
    fn gamma_floor_is_counted() {
        let (s, wk, _) = random_stream(21, 1, 32, 1, 4, 4);
        let gates = GateSequence::none().with_alpha_vector(Array4::from_elem((1, 32, 1, 4), 0.5)).unwrap();
        let out = chunk_forward_oskda(&s, &wk, &gates, None, 32).unwrap();
        // 0.5^i < 1e-6 once i >= 20, i.e. positions 19..31 of each channel.
        assert_eq!(out.diagnostics.floored_entries, 13 * 4);
    }

    #[test]
    fn initial_state_is_carried() {
        let (s, wk, g) = random_stream(22, 1, 32, 1, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for backbone in [Backbone::DeltaNet, Backbone::GatedDeltaNet, Backbone::Kda] {
            let shape = match backbone.orientation() {
                Orientation::ValueByKey => (1, 1, 3, 4),
                Orientation::KeyByValue => (1, 1, 4, 3),
            };
            let init = FastWeightState::new(backbone.orientation(), Array4::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0))).unwrap();
            let opts = RecurrentOptions { record_trace: false, position_bins: 1 };
            let (o_ref, st_ref, _, _) = run_phase2(&s, backbone, &g, &wk, Some(&init), &opts, false).unwrap();
            let out = chunk_forward::<f64>(backbone, &s, &wk, &g, Some(&init), &ChunkOptions::new(8)).unwrap();
            assert!(max_abs(&out.outputs, &o_ref) <= 1e-12);
            assert!(max_abs(out.state().tensor(), st_ref.tensor()) <= 1e-12);
        }
    }
}
