//! Residual-contraction audits.
//!
//! - [`population`]: the exact quadratic `f(S) = E 1/2 ||S k - v||^2`, its
//!   right-Newton comparator, and online learning of a right preconditioner
//!   with a regret ledger and the super-geometric bound.
//! - [`token`]: audits on traced streams, namely the token-local contraction
//!   bound, the best diagonal comparator, the repeated-key identity and the
//!   alternating-target example.
//!
//! Products of ratios are always accumulated as sums of logs.

pub mod population;
pub mod token;

pub use population::{
    convexity_violation, newton_step_check, population_step, run_population_osgm, DInit, Learner,
    LedgerStep, PopulationConfig, PopulationReport, QuadraticProblem, RegretDecomposition,
    RegretLedger,
};
pub use token::{
    alternating_target_example, minimize_eps_diag, minimize_eps_diag_lane, repeated_key_audit,
    token_local_audit, AlternatingReport, ComparatorReport, EpsMinimum, LaneAudit,
    RepeatedKeyReport, TokenLocalReport,
};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

/// Relative cutoff on eigenvalues treated as zero in pseudo-inverses.
pub const PINV_CUTOFF: f64 = 1e-12;

/// Slack allowed when comparing two logs of products.
pub(crate) const LOG_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Pass,
    Fail,
    /// The audited statement's assumption did not hold on this run.
    #[serde(rename = "N/A")]
    NotApplicable,
}

impl Verdict {
    pub fn from_bool(ok: bool) -> Self {
        if ok {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }

    pub fn is_fail(self) -> bool {
        self == Verdict::Fail
    }
}

/// One line of a theory report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub theorem: String,
    #[serde(with = "extended_f64")]
    pub lhs: f64,
    #[serde(with = "extended_f64")]
    pub rhs: f64,
    pub verdict: Verdict,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
}

/// `a <= b` between logs, with `-inf <= -inf` and a small relative slack.
pub(crate) fn log_le(a: f64, b: f64) -> bool {
    if a == f64::NEG_INFINITY {
        return true;
    }
    if b == f64::NEG_INFINITY {
        return false;
    }
    a <= b + LOG_TOL * (1.0 + b.abs())
}

/// Serializes non-finite floats as the strings `"inf"`, `"-inf"`, `"nan"`.
pub mod extended_f64 {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else if x.is_nan() {
            s.serialize_str("nan")
        } else if *x > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("bad float {other}"))),
            },
        }
    }
}

/// Moore-Penrose pseudo-inverse of a symmetric PSD matrix.
pub(crate) fn sym_pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b));
    let cut = PINV_CUTOFF * lmax;
    let inv = eig.eigenvalues.map(|l| if l > cut { 1.0 / l } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose()
}

/// Result of a box-constrained convex quadratic solve.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxQpSolution {
    pub x: DVector<f64>,
    /// `-a^T x + 1/2 x^T M x`.
    pub objective: f64,
    pub iterations: usize,
    /// `|| x - P(x - grad) ||`.
    pub projected_grad_norm: f64,
}

pub(crate) const QP_TOL: f64 = 1e-10;
pub(crate) const QP_MAX_ITERS: usize = 100_000;

/// Minimizes `-a^T x + 1/2 x^T M x` over `[lo, hi]^n` (`M` PSD) by projected
/// gradient with step `1 / lambda_max(M)`, from `start` projected.
pub(crate) fn box_qp(a: &DVector<f64>, m: &DMatrix<f64>, lo: f64, hi: f64, start: &DVector<f64>) -> BoxQpSolution {
    let lmax = SymmetricEigen::new(m.clone()).eigenvalues.iter().fold(0.0f64, |x, &y| x.max(y));
    let project = |x: &DVector<f64>| x.map(|v| v.clamp(lo, hi));
    let mut x = project(start);
    let mut iters = 0;
    if lmax > 0.0 {
        let step = 1.0 / lmax;
        while iters < QP_MAX_ITERS {
            let grad = m * &x - a;
            let pg = (&x - project(&(&x - &grad))).norm();
            if pg <= QP_TOL {
                break;
            }
            x = project(&(&x - grad * step));
            iters += 1;
        }
    }
    let pg_of = |x: &DVector<f64>| (x - project(&(x - (m * x - a)))).norm();
    if let Some(polished) = polish_free_set(a, m, lo, hi, &x) {
        let p = pg_of(&polished);
        if p <= pg_of(&x) {
            x = polished;
        }
    }
    let pg = pg_of(&x);
    let objective = -a.dot(&x) + 0.5 * x.dot(&(m * &x));
    BoxQpSolution { x, objective, iterations: iters, projected_grad_norm: pg }
}

/// Re-solves the coordinates strictly inside the box exactly, holding the
/// others at their bounds. `None` if the solve leaves the box.
fn polish_free_set(a: &DVector<f64>, m: &DMatrix<f64>, lo: f64, hi: f64, x: &DVector<f64>) -> Option<DVector<f64>> {
    let free: Vec<usize> = (0..x.len()).filter(|&i| x[i] > lo && x[i] < hi).collect();
    if free.is_empty() {
        return None;
    }
    let mff = DMatrix::from_fn(free.len(), free.len(), |i, j| m[(free[i], free[j])]);
    let rhs = DVector::from_fn(free.len(), |i, _| {
        let fi = free[i];
        a[fi] - (0..x.len()).filter(|j| !free.contains(j)).map(|j| m[(fi, j)] * x[j]).sum::<f64>()
    });
    let sol = mff.cholesky()?.solve(&rhs);
    let mut out = x.clone();
    for (i, &fi) in free.iter().enumerate() {
        if !(lo..=hi).contains(&sol[i]) {
            return None;
        }
        out[fi] = sol[i];
    }
    Some(out)
}
