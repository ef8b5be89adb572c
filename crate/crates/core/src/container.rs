//! On-disk tensor container, trace CSV and JSON helpers.
//!
//! Container layout:
//!
//! ```text
//! b"OSDNTNS1" | u64 LE header length | JSON header | payload
//! ```
//!
//! The header lists every tensor (name, dtype, layout tag, dims, byte offset)
//! plus non-numeric metadata. Payloads are little-endian, row-major. Every
//! numeric field, scalars included, lives in the payload so a round trip is
//! bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array3, Array4, ArrayD, IxDyn};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{
    FastWeightState, GateSequence, Orientation, PrecondConfig, PreconditionerState, ResidualRecord,
    ResidualTrace, RetentionMode, TokenStream, WriteKeySequence,
};

pub const MAGIC: &[u8; 8] = b"OSDNTNS1";
pub const LAYOUT_ROW_MAJOR: &str = "row_major";

#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    F64(ArrayD<f64>),
    F32(ArrayD<f32>),
    U64(ArrayD<u64>),
    Bool(ArrayD<bool>),
}

impl Tensor {
    pub fn dtype(&self) -> &'static str {
        match self {
            Tensor::F64(_) => "f64",
            Tensor::F32(_) => "f32",
            Tensor::U64(_) => "u64",
            Tensor::Bool(_) => "bool",
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Tensor::F64(a) => a.shape(),
            Tensor::F32(a) => a.shape(),
            Tensor::U64(a) => a.shape(),
            Tensor::Bool(a) => a.shape(),
        }
    }

    fn encode(&self, out: &mut Vec<u8>) {
        match self {
            Tensor::F64(a) => a.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Tensor::F32(a) => a.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Tensor::U64(a) => a.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Tensor::Bool(a) => a.iter().for_each(|x| out.push(u8::from(*x))),
        }
    }

    fn decode(dtype: &str, dims: &[usize], bytes: &[u8]) -> Result<Self> {
        let n: usize = dims.iter().product();
        let width = match dtype {
            "f64" | "u64" => 8,
            "f32" => 4,
            "bool" => 1,
            other => return Err(Error::Format(format!("unknown dtype {other}"))),
        };
        if bytes.len() != n * width {
            return Err(Error::Format(format!("payload of {} bytes, expected {}", bytes.len(), n * width)));
        }
        let shape = IxDyn(dims);
        let fmt = |e: ndarray::ShapeError| Error::Format(e.to_string());
        Ok(match dtype {
            "f64" => Tensor::F64(
                ArrayD::from_shape_vec(shape, bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
                    .map_err(fmt)?,
            ),
            "u64" => Tensor::U64(
                ArrayD::from_shape_vec(shape, bytes.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect())
                    .map_err(fmt)?,
            ),
            "f32" => Tensor::F32(
                ArrayD::from_shape_vec(shape, bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
                    .map_err(fmt)?,
            ),
            _ => {
                let vals = bytes
                    .iter()
                    .map(|b| match b {
                        0 => Ok(false),
                        1 => Ok(true),
                        other => Err(Error::Format(format!("bool byte {other}"))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                Tensor::Bool(ArrayD::from_shape_vec(shape, vals).map_err(fmt)?)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    dtype: String,
    layout: String,
    dims: Vec<usize>,
    offset: usize,
    bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    metadata: serde_json::Map<String, serde_json::Value>,
    tensors: Vec<TensorHeader>,
}

/// Named tensors plus non-numeric metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub kind: String,
    pub metadata: serde_json::Map<String, serde_json::Value>,
    tensors: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn new(kind: &str) -> Self {
        Self { kind: kind.to_string(), metadata: serde_json::Map::new(), tensors: Vec::new() }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        self.tensors.retain(|(n, _)| n != name);
        self.tensors.push((name.to_string(), tensor));
    }

    pub fn with(mut self, name: &str, tensor: Tensor) -> Self {
        self.insert(name, tensor);
        self
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<serde_json::Value>) -> Self {
        self.metadata.insert(key.to_string(), value.into());
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn f64(&self, name: &str) -> Result<&ArrayD<f64>> {
        match self.get(name) {
            Some(Tensor::F64(a)) => Ok(a),
            Some(t) => Err(Error::Format(format!("tensor {name} has dtype {}", t.dtype()))),
            None => Err(Error::Format(format!("missing tensor {name}"))),
        }
    }

    pub fn bool(&self, name: &str) -> Result<&ArrayD<bool>> {
        match self.get(name) {
            Some(Tensor::Bool(a)) => Ok(a),
            Some(t) => Err(Error::Format(format!("tensor {name} has dtype {}", t.dtype()))),
            None => Err(Error::Format(format!("missing tensor {name}"))),
        }
    }

    pub fn u64(&self, name: &str) -> Result<&ArrayD<u64>> {
        match self.get(name) {
            Some(Tensor::U64(a)) => Ok(a),
            Some(t) => Err(Error::Format(format!("tensor {name} has dtype {}", t.dtype()))),
            None => Err(Error::Format(format!("missing tensor {name}"))),
        }
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let a = self.f64(name)?;
        if a.ndim() != 0 {
            return Err(Error::Format(format!("tensor {name} is not a scalar")));
        }
        Ok(a[IxDyn(&[])])
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Format(format!("missing metadata {key}")))
    }

    pub fn meta_bool(&self, key: &str) -> Result<bool> {
        self.metadata
            .get(key)
            .and_then(|v| v.as_bool())
            .ok_or_else(|| Error::Format(format!("missing metadata {key}")))
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!("expected a {kind} archive, found {}", self.kind)));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut headers = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let offset = payload.len();
            t.encode(&mut payload);
            headers.push(TensorHeader {
                name: name.clone(),
                dtype: t.dtype().to_string(),
                layout: LAYOUT_ROW_MAJOR.to_string(),
                dims: t.shape().to_vec(),
                offset,
                bytes: payload.len() - offset,
            });
        }
        let header = serde_json::to_vec(&Header { kind: self.kind.clone(), metadata: self.metadata.clone(), tensors: headers })?;
        let mut out = Vec::with_capacity(16 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| Error::Format("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body)?;
        let payload = &bytes[16 + hlen..];
        let mut archive = Archive { kind: header.kind, metadata: header.metadata, tensors: Vec::new() };
        for th in header.tensors {
            if th.layout != LAYOUT_ROW_MAJOR {
                return Err(Error::Format(format!("unsupported layout {}", th.layout)));
            }
            let chunk = payload
                .get(th.offset..th.offset + th.bytes)
                .ok_or_else(|| Error::Format(format!("tensor {} out of bounds", th.name)))?;
            archive.tensors.push((th.name, Tensor::decode(&th.dtype, &th.dims, chunk)?));
        }
        Ok(archive)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

/// Types with a container representation.
pub trait Persist: Sized {
    fn to_archive(&self) -> Archive;
    fn from_archive(archive: &Archive) -> Result<Self>;

    fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive().save(path)
    }

    fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

fn f64t<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> Tensor {
    Tensor::F64(a.to_owned().into_dyn())
}

fn scalar(x: f64) -> Tensor {
    Tensor::F64(ArrayD::from_elem(IxDyn(&[]), x))
}

fn fixed<D: ndarray::Dimension>(a: &ArrayD<f64>, name: &str) -> Result<ndarray::Array<f64, D>> {
    a.clone().into_dimensionality::<D>().map_err(|e| Error::Format(format!("{name}: {e}")))
}

fn fixed_bool<D: ndarray::Dimension>(a: &ArrayD<bool>, name: &str) -> Result<ndarray::Array<bool, D>> {
    a.clone().into_dimensionality::<D>().map_err(|e| Error::Format(format!("{name}: {e}")))
}

fn orientation_tag(o: Orientation) -> &'static str {
    match o {
        Orientation::ValueByKey => "v_by_k",
        Orientation::KeyByValue => "k_by_v",
    }
}

fn parse_orientation(s: &str) -> Result<Orientation> {
    match s {
        "v_by_k" => Ok(Orientation::ValueByKey),
        "k_by_v" => Ok(Orientation::KeyByValue),
        other => Err(Error::Format(format!("unknown orientation {other}"))),
    }
}

impl Persist for TokenStream {
    fn to_archive(&self) -> Archive {
        Archive::new("token_stream")
            .with_meta("keys_unit_norm", self.keys_unit_norm())
            .with_meta("scale_queries", self.scale_queries())
            .with("queries", f64t(self.queries()))
            .with("keys", f64t(self.keys()))
            .with("values", f64t(self.values()))
            .with("betas", f64t(self.betas()))
    }

    fn from_archive(a: &Archive) -> Result<Self> {
        a.expect_kind("token_stream")?;
        let s = TokenStream::new(
            fixed(a.f64("queries")?, "queries")?,
            fixed(a.f64("keys")?, "keys")?,
            fixed(a.f64("values")?, "values")?,
            fixed(a.f64("betas")?, "betas")?,
        )?
        .with_query_scaling(a.meta_bool("scale_queries")?);
        if a.meta_bool("keys_unit_norm")? {
            s.with_unit_norm_keys()
        } else {
            Ok(s)
        }
    }
}

fn config_into(a: Archive, c: &PrecondConfig) -> Archive {
    let (mode, rho) = match c.retention {
        RetentionMode::None => ("none", None),
        RetentionMode::Constant(r) => ("constant", Some(r)),
        RetentionMode::DataDependent => ("data_dependent", None),
    };
    let mut a = a
        .with_meta("beta_aware", c.beta_aware)
        .with_meta("retention", mode)
        .with("d_min", scalar(c.d_min))
        .with("d_max", scalar(c.d_max))
        .with("eta", scalar(c.eta))
        .with("epsilon", scalar(c.epsilon));
    if let Some(r) = rho {
        a.insert("rho", scalar(r));
    }
    a
}

fn config_from(a: &Archive) -> Result<PrecondConfig> {
    let retention = match a.meta_str("retention")? {
        "none" => RetentionMode::None,
        "constant" => RetentionMode::Constant(a.scalar("rho")?),
        "data_dependent" => RetentionMode::DataDependent,
        other => return Err(Error::Format(format!("unknown retention mode {other}"))),
    };
    let c = PrecondConfig {
        d_min: a.scalar("d_min")?,
        d_max: a.scalar("d_max")?,
        eta: a.scalar("eta")?,
        epsilon: a.scalar("epsilon")?,
        beta_aware: a.meta_bool("beta_aware")?,
        retention,
    };
    c.validate()?;
    Ok(c)
}

impl Persist for PrecondConfig {
    fn to_archive(&self) -> Archive {
        config_into(Archive::new("precond_config"), self)
    }

    fn from_archive(a: &Archive) -> Result<Self> {
        a.expect_kind("precond_config")?;
        config_from(a)
    }
}

impl Persist for PreconditionerState {
    fn to_archive(&self) -> Archive {
        config_into(Archive::new("preconditioner_state"), self.config()).with("d", f64t(self.d()))
    }

    fn from_archive(a: &Archive) -> Result<Self> {
        a.expect_kind("preconditioner_state")?;
        PreconditionerState::new(config_from(a)?, fixed(a.f64("d")?, "d")?)
    }
}

impl Persist for FastWeightState {
    fn to_archive(&self) -> Archive {
        Archive::new("fast_weight_state")
            .with_meta("orientation", orientation_tag(self.orientation()))
            .with("s", f64t(self.tensor()))
    }

    fn from_archive(a: &Archive) -> Result<Self> {
        a.expect_kind("fast_weight_state")?;
        FastWeightState::new(parse_orientation(a.meta_str("orientation")?)?, fixed(a.f64("s")?, "s")?)
    }
}

impl Persist for GateSequence {
    fn to_archive(&self) -> Archive {
        let mut a = Archive::new("gate_sequence");
        if let Some(x) = self.alpha_scalar() {
            a.insert("alpha_scalar", f64t(x));
        }
        if let Some(x) = self.alpha_vector() {
            a.insert("alpha_vector", f64t(x));
        }
        if let Some(x) = self.retention() {
            a.insert("retention", f64t(x));
        }
        a
    }

    fn from_archive(a: &Archive) -> Result<Self> {
        a.expect_kind("gate_sequence")?;
        let mut g = GateSequence::none();
        if a.get("alpha_scalar").is_some() {
            g = g.with_alpha_scalar(fixed(a.f64("alpha_scalar")?, "alpha_scalar")?)?;
        }
        if a.get("alpha_vector").is_some() {
            g = g.with_alpha_vector(fixed(a.f64("alpha_vector")?, "alpha_vector")?)?;
        }
        if a.get("retention").is_some() {
            g = g.with_retention(fixed(a.f64("retention")?, "retention")?)?;
        }
        Ok(g)
    }
}

impl Persist for WriteKeySequence {
    fn to_archive(&self) -> Archive {
        let mut a = Archive::new("write_key_sequence")
            .with("write_keys", f64t(&self.write_keys))
            .with("d_final", f64t(&self.d_final));
        if let Some(x) = &self.d_trajectory {
            a.insert("d_trajectory", f64t(x));
        }
        if let Some(x) = &self.clamp_mask {
            a.insert("clamp_mask", Tensor::Bool(x.clone().into_dyn()));
        }
        a
    }

    fn from_archive(a: &Archive) -> Result<Self> {
        a.expect_kind("write_key_sequence")?;
        let write_keys: Array4<f64> = fixed(a.f64("write_keys")?, "write_keys")?;
        let d_final: Array3<f64> = fixed(a.f64("d_final")?, "d_final")?;
        let d_trajectory = match a.get("d_trajectory") {
            Some(_) => Some(fixed(a.f64("d_trajectory")?, "d_trajectory")?),
            None => None,
        };
        let clamp_mask = match a.get("clamp_mask") {
            Some(_) => Some(fixed_bool(a.bool("clamp_mask")?, "clamp_mask")?),
            None => None,
        };
        Ok(WriteKeySequence { write_keys, d_final, d_trajectory, clamp_mask })
    }
}

impl Persist for ResidualTrace {
    fn to_archive(&self) -> Archive {
        let n = self.records.len();
        let col_u = |f: fn(&ResidualRecord) -> usize| {
            Tensor::U64(ArrayD::from_shape_vec(IxDyn(&[n]), self.records.iter().map(|r| f(r) as u64).collect()).unwrap())
        };
        let col_f = |f: fn(&ResidualRecord) -> f64| {
            Tensor::F64(ArrayD::from_shape_vec(IxDyn(&[n]), self.records.iter().map(f).collect()).unwrap())
        };
        Archive::new("residual_trace")
            .with("bins", Tensor::U64(ArrayD::from_elem(IxDyn(&[]), self.bins as u64)))
            .with("batch", col_u(|r| r.batch))
            .with("head", col_u(|r| r.head))
            .with("t", col_u(|r| r.t))
            .with("position_bin", col_u(|r| r.position_bin))
            .with("f_before", col_f(|r| r.f_before))
            .with("f_after", col_f(|r| r.f_after))
            .with("grad_norm_sq", col_f(|r| r.grad_norm_sq))
            .with("q", col_f(|r| r.q))
    }

    fn from_archive(a: &Archive) -> Result<Self> {
        a.expect_kind("residual_trace")?;
        let bins = *a.u64("bins")?.iter().next().ok_or_else(|| Error::Format("empty bins".into()))? as usize;
        let (b, h, t, p) = (a.u64("batch")?, a.u64("head")?, a.u64("t")?, a.u64("position_bin")?);
        let (fb, fa, g, q) = (a.f64("f_before")?, a.f64("f_after")?, a.f64("grad_norm_sq")?, a.f64("q")?);
        let n = b.len();
        if [h.len(), t.len(), p.len(), fb.len(), fa.len(), g.len(), q.len()].iter().any(|&l| l != n) {
            return Err(Error::Format("trace columns differ in length".into()));
        }
        let records = (0..n)
            .map(|i| ResidualRecord {
                batch: b[i] as usize,
                head: h[i] as usize,
                t: t[i] as usize,
                f_before: fb[i],
                f_after: fa[i],
                grad_norm_sq: g[i],
                q: q[i],
                position_bin: p[i] as usize,
            })
            .collect();
        Ok(ResidualTrace { bins, records })
    }
}

/// Writes one CSV row per record. Floats use the shortest round-trip form.
pub fn write_trace_csv(trace: &ResidualTrace, w: impl Write) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in &trace.records {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_trace_csv(r: impl Read, bins: usize) -> Result<ResidualTrace> {
    let mut rd = csv::Reader::from_reader(r);
    let records = rd.deserialize().collect::<std::result::Result<Vec<ResidualRecord>, _>>()?;
    Ok(ResidualTrace { bins, records })
}

pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}
