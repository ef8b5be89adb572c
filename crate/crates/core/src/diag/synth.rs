//! Synthetic token streams for the diagnostics.

use ndarray::{s, Array2, Array3, Array4};
use rand::distributions::Uniform;
use rand::Rng;
use rand_distr::StandardNormal;

use super::{DiagConfig, DictionaryMode};
use crate::error::{Error, Result};
use crate::types::{Dims, GateSequence, TokenStream};

/// A stream with gates for every backbone and, for dictionary streams, the
/// class of every token (`[B, T, H]`).
#[derive(Debug, Clone)]
pub struct Synthetic {
    pub stream: TokenStream,
    pub gates: GateSequence,
    pub classes: Option<Array3<usize>>,
    /// Length of the segment that is repeated.
    pub segment: usize,
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

fn unit_gaussian<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| gaussian(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn gates<R: Rng>(rng: &mut R, dims: &Dims, cfg: &DiagConfig) -> Result<GateSequence> {
    let alpha = Uniform::new_inclusive(cfg.alpha_min, cfg.alpha_max);
    let keep = Uniform::new_inclusive(cfg.retention_min, 1.0);
    let (b, t, h, k) = (dims.batch, dims.length, dims.heads, dims.key_dim);
    GateSequence::none()
        .with_alpha_scalar(Array3::from_shape_fn((b, t, h), |_| rng.sample(alpha)))?
        .with_alpha_vector(Array4::from_shape_fn((b, t, h, k), |_| rng.sample(alpha)))?
        .with_retention(Array3::from_shape_fn((b, t, h), |_| rng.sample(keep)))
}

/// Gaussian queries and values, normalized Gaussian keys, `beta` uniform in
/// the configured range, and gates for every backbone.
pub fn random_stream<R: Rng>(rng: &mut R, dims: Dims, cfg: &DiagConfig) -> Result<Synthetic> {
    let (b, t, h, k, v) = (dims.batch, dims.length, dims.heads, dims.key_dim, dims.value_dim);
    let beta = Uniform::new_inclusive(cfg.beta_min, cfg.beta_max);
    let q = Array4::from_shape_fn((b, t, h, k), |_| gaussian(rng));
    let keys = Array4::from_shape_fn((b, t, h, k), |_| gaussian(rng));
    let values = Array4::from_shape_fn((b, t, h, v), |_| gaussian(rng));
    let betas = Array3::from_shape_fn((b, t, h), |_| rng.sample(beta));
    let stream = TokenStream::new(q, keys, values, betas)?.normalize_keys()?;
    let gates = gates(rng, &dims, cfg)?;
    Ok(Synthetic { stream, gates, classes: None, segment: t })
}

/// `dict_size` unit keys of dimension `k`, one per row.
fn dictionary<R: Rng>(rng: &mut R, mode: DictionaryMode, size: usize, k: usize) -> Result<Array2<f64>> {
    match mode {
        DictionaryMode::Orthogonal => {
            if size > k {
                return Err(Error::InvalidConfig(format!(
                    "orthogonal dictionary of {size} keys does not fit key_dim {k}"
                )));
            }
            let block = k / size;
            let w = 1.0 / (block as f64).sqrt();
            Ok(Array2::from_shape_fn((size, k), |(c, j)| if j / block == c { w } else { 0.0 }))
        }
        DictionaryMode::Gaussian => {
            let mut d = Array2::zeros((size, k));
            for c in 0..size {
                d.row_mut(c).assign(&ndarray::Array1::from(unit_gaussian(rng, k)));
            }
            Ok(d)
        }
    }
}

/// Typed-key stream: each lane draws a class per position of the first
/// segment from the dictionary, with one `beta` per class, fresh Gaussian
/// values and queries, and fresh gates. The segment is then repeated
/// `cfg.repeat` times.
pub fn dictionary_stream<R: Rng>(rng: &mut R, dims: Dims, cfg: &DiagConfig) -> Result<Synthetic> {
    if dims.length % cfg.repeat != 0 {
        return Err(Error::InvalidConfig(format!(
            "length {} is not a multiple of repeat {}",
            dims.length, cfg.repeat
        )));
    }
    let seg = dims.length / cfg.repeat;
    let (b, h, k, v) = (dims.batch, dims.heads, dims.key_dim, dims.value_dim);
    let beta = Uniform::new_inclusive(cfg.beta_min, cfg.beta_max);
    let first = Dims { length: seg, ..dims };

    let mut q = Array4::zeros((b, seg, h, k));
    let mut keys = Array4::zeros((b, seg, h, k));
    let mut values = Array4::zeros((b, seg, h, v));
    let mut betas = Array3::zeros((b, seg, h));
    let mut classes = Array3::zeros((b, seg, h));
    for bi in 0..b {
        for hi in 0..h {
            let dict = dictionary(rng, cfg.dictionary, cfg.dict_size, k)?;
            let class_beta: Vec<f64> = (0..cfg.dict_size).map(|_| rng.sample(beta)).collect();
            for t in 0..seg {
                let c = rng.gen_range(0..cfg.dict_size);
                classes[[bi, t, hi]] = c;
                betas[[bi, t, hi]] = class_beta[c];
                keys.slice_mut(s![bi, t, hi, ..]).assign(&dict.row(c));
                for j in 0..k {
                    q[[bi, t, hi, j]] = gaussian(rng);
                }
                for j in 0..v {
                    values[[bi, t, hi, j]] = gaussian(rng);
                }
            }
        }
    }
    let g = gates(rng, &first, cfg)?;
    let tile3 = |a: &Array3<f64>| Array3::from_shape_fn((b, dims.length, h), |(x, t, y)| a[[x, t % seg, y]]);
    let tile4 = |a: &Array4<f64>| {
        let d = a.dim().3;
        Array4::from_shape_fn((b, dims.length, h, d), |(x, t, y, z)| a[[x, t % seg, y, z]])
    };
    let stream = TokenStream::new(tile4(&q), tile4(&keys), tile4(&values), tile3(&betas))?;
    let stream = match cfg.dictionary {
        DictionaryMode::Orthogonal if k % cfg.dict_size == 0 => stream.with_unit_norm_keys()?,
        _ => stream.normalize_keys()?,
    };
    let gates = GateSequence::none()
        .with_alpha_scalar(tile3(g.alpha_scalar().expect("drawn")))?
        .with_alpha_vector(tile4(g.alpha_vector().expect("drawn")))?
        .with_retention(tile3(g.retention().expect("drawn")))?;
    let classes = Array3::from_shape_fn((b, dims.length, h), |(x, t, y)| classes[[x, t % seg, y]]);
    Ok(Synthetic { stream, gates, classes: Some(classes), segment: seg })
}
