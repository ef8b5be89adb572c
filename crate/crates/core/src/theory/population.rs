//! Population quadratic and right-preconditioned online dynamics.
//!
//! `f(S) = E 1/2 ||S k - v||^2` with `E[k k^T] = Sigma`, `E[v k^T] = C`, so
//! `grad f(S) = S Sigma - C` and the right-Newton comparator is
//! `D* = pinv(Sigma)`. The one-step feedback of a right preconditioner is
//!
//! ```text
//! h(D) = (f(S - G D) - f(S)) / ||G||^2
//!      = (-<G, G D> + 1/2 tr(G D Sigma D^T G^T)) / ||G||^2,   G = grad f(S)
//! ```
//!
//! The online run tracks the error `S - S*` directly, which keeps excess
//! losses relatively accurate deep into super-geometric convergence.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{box_qp, log_le, sym_pinv, Verdict, PINV_CUTOFF};
use crate::error::{Error, Result};

/// Excess losses below this fraction of the initial excess count as reaching
/// the optimum.
const CONVERGED_REL: f64 = 1e-28;

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProblem {
    pub key_covariance: DMatrix<f64>,
    /// `C = E[v k^T]`, `V x K`.
    pub cross_term: DMatrix<f64>,
    pub optimum: DMatrix<f64>,
    pub f_star: f64,
    /// `lambda_max(Sigma)`.
    pub lipschitz: f64,
    /// Smallest eigenvalue above the pseudo-inverse cutoff.
    pub lambda_min_positive: f64,
    pub newton: DMatrix<f64>,
    pub pinv_cutoff: f64,
    pub noise_std: f64,
    target: DMatrix<f64>,
    sqrt_cov: DMatrix<f64>,
}

impl QuadraticProblem {
    /// Problem realized by `k ~ N(0, Sigma)`, `v = target k + noise_std * xi`.
    pub fn new(key_covariance: DMatrix<f64>, target: DMatrix<f64>, noise_std: f64) -> Result<Self> {
        let k = key_covariance.nrows();
        if key_covariance.ncols() != k || target.ncols() != k {
            return Err(Error::DimensionMismatch {
                what: "quadratic problem",
                expected: vec![k, k],
                found: vec![key_covariance.ncols(), target.ncols()],
            });
        }
        let asym = (&key_covariance - key_covariance.transpose()).amax();
        if asym > 1e-12 {
            return Err(Error::InvalidConfig(format!("key covariance asymmetric by {asym:e}")));
        }
        let eig = SymmetricEigen::new(key_covariance.clone());
        let lmax = eig.eigenvalues.max();
        if eig.eigenvalues.min() < -1e-12 * lmax.max(1.0) || lmax <= 0.0 {
            return Err(Error::InvalidConfig("key covariance is not PSD with a positive eigenvalue".into()));
        }
        if !(noise_std >= 0.0 && noise_std.is_finite()) {
            return Err(Error::InvalidConfig(format!("noise std {noise_std}")));
        }
        let cut = PINV_CUTOFF * lmax;
        let lambda_min_positive = eig.eigenvalues.iter().copied().filter(|&l| l > cut).fold(f64::INFINITY, f64::min);
        let sqrt_cov = &eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
        let newton = sym_pinv(&key_covariance);
        let cross_term = &target * &key_covariance;
        let optimum = &cross_term * &newton;
        let mut p = Self {
            key_covariance,
            cross_term,
            optimum,
            f_star: 0.0,
            lipschitz: lmax,
            lambda_min_positive,
            newton,
            pinv_cutoff: PINV_CUTOFF,
            noise_std,
            target,
            sqrt_cov,
        };
        p.f_star = p.f(&p.optimum.clone());
        Ok(p)
    }

    /// Diagonal covariance `diag(eigs)`.
    pub fn diagonal(eigs: &[f64], target: DMatrix<f64>) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(eigs)), target, 0.0)
    }

    /// Random rotation of eigenvalues uniform in `[lo, hi]`, Gaussian target.
    pub fn random<R: Rng>(rng: &mut R, key_dim: usize, value_dim: usize, lo: f64, hi: f64, noise_std: f64) -> Result<Self> {
        let g = DMatrix::from_fn(key_dim, key_dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let q = g.qr().q();
        let eigs = DVector::from_fn(key_dim, |_, _| rng.gen_range(lo..=hi));
        let sigma = &q * DMatrix::from_diagonal(&eigs) * q.transpose();
        let sigma = (&sigma + sigma.transpose()) * 0.5;
        let target = DMatrix::from_fn(value_dim, key_dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        Self::new(sigma, target, noise_std)
    }

    pub fn key_dim(&self) -> usize {
        self.key_covariance.nrows()
    }

    pub fn value_dim(&self) -> usize {
        self.cross_term.nrows()
    }

    pub fn f(&self, s: &DMatrix<f64>) -> f64 {
        let sig = &self.key_covariance;
        let quad = (s * sig).component_mul(s).sum();
        let lin = s.component_mul(&self.cross_term).sum();
        let vv = (&self.target * sig).component_mul(&self.target).sum()
            + self.noise_std * self.noise_std * self.value_dim() as f64;
        0.5 * quad - lin + 0.5 * vv
    }

    /// `f(S) - f*` evaluated as `1/2 tr((S - S*) Sigma (S - S*)^T)`.
    pub fn excess(&self, s: &DMatrix<f64>) -> f64 {
        let e = s - &self.optimum;
        0.5 * (&e * &self.key_covariance).component_mul(&e).sum()
    }

    pub fn grad(&self, s: &DMatrix<f64>) -> DMatrix<f64> {
        s * &self.key_covariance - &self.cross_term
    }

    /// One draw `(k, v)` of the realizing distribution.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> (DVector<f64>, DVector<f64>) {
        let z = DVector::from_fn(self.key_dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let k = &self.sqrt_cov * z;
        let xi = DVector::from_fn(self.value_dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let v = &self.target * &k + xi * self.noise_std;
        (k, v)
    }
}

/// Closed-form `h(D)` for gradient `g`; zero when `g = 0`.
pub(crate) fn h_closed(g: &DMatrix<f64>, d: &DMatrix<f64>, sigma: &DMatrix<f64>) -> f64 {
    let gg = g.norm_squared();
    if gg == 0.0 {
        return 0.0;
    }
    let gd = g * d;
    (-g.component_mul(&gd).sum() + 0.5 * (&gd * sigma).component_mul(&gd).sum()) / gg
}

/// `S' = S - grad f(S) D` and its feedback `h(D)`.
pub fn population_step(s: &DMatrix<f64>, d: &DMatrix<f64>, problem: &QuadraticProblem) -> (DMatrix<f64>, f64) {
    let g = problem.grad(s);
    let h = h_closed(&g, d, &problem.key_covariance);
    (s - &g * d, h)
}

/// `||grad f(S')|| / ||grad f(S)||` after one step with `D*`.
pub fn newton_step_check(problem: &QuadraticProblem, s: &DMatrix<f64>) -> f64 {
    let g0 = problem.grad(s).norm();
    let (s1, _) = population_step(s, &problem.newton, problem);
    problem.grad(&s1).norm() / g0
}

/// Largest convexity violation of `h` along the segment `D1 -> D2`.
pub fn convexity_violation(problem: &QuadraticProblem, s: &DMatrix<f64>, d1: &DMatrix<f64>, d2: &DMatrix<f64>, lambdas: &[f64]) -> f64 {
    let g = problem.grad(s);
    let sig = &problem.key_covariance;
    let (h1, h2) = (h_closed(&g, d1, sig), h_closed(&g, d2, sig));
    lambdas
        .iter()
        .map(|&l| h_closed(&g, &(d1 * l + d2 * (1.0 - l)), sig) - (l * h1 + (1.0 - l) * h2))
        .fold(f64::NEG_INFINITY, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Learner {
    /// Online gradient descent over dense `D`.
    Dense,
    /// Projected online gradient descent over `Diag(d)`, `d` in the box.
    Diagonal,
    /// Fixed overshooting `D = (3 / L) I`; never learns.
    Adversarial,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum DInit {
    /// `D_1 = (c / L) I`.
    ScaledIdentity(f64),
    /// `D_1 = D*`.
    Newton,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopulationConfig {
    pub learner: Learner,
    pub horizon: usize,
    /// Learner step; `1 / L` when unset.
    pub step: Option<f64>,
    pub init: DInit,
    /// Skip any update that would increase `f`.
    pub guard: bool,
    /// Diagonal box; `[0, 2 / lambda_min]` when unset.
    pub box_bounds: Option<(f64, f64)>,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        Self {
            learner: Learner::Diagonal,
            horizon: 200,
            step: None,
            init: DInit::ScaledIdentity(1.0),
            guard: true,
            box_bounds: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LedgerStep {
    pub t: usize,
    /// Feedback of the step actually taken (zero when skipped).
    pub h_decision: f64,
    pub h_proposed: f64,
    pub h_comparator: f64,
    pub skipped: bool,
    pub excess_before: f64,
    #[serde(with = "super::extended_f64")]
    pub log_r: f64,
    /// `|h(D*)|^{-1} / (2L)`, at most one.
    pub rayleigh_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretLedger {
    pub steps: Vec<LedgerStep>,
    /// `sum_t h_t(decision) - h_t(D*)` as accumulated.
    pub regret: f64,
    #[serde(with = "super::extended_f64")]
    pub log_prod_r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretDecomposition {
    pub full: f64,
    pub projected_ogd: f64,
    pub box_gap: f64,
    pub diagonal_gap: f64,
    pub d_box: Vec<f64>,
    pub d_diag: Vec<f64>,
    pub identity_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationReport {
    pub ledger: RegretLedger,
    pub lipschitz: f64,
    pub pinv_cutoff: f64,
    pub horizon: usize,
    /// Steps audited before numerical convergence.
    pub audited_steps: usize,
    pub converged: bool,
    /// `T log(2 L R_T / T)` over the audited horizon.
    #[serde(with = "super::extended_f64")]
    pub log_bound: f64,
    pub prefixes_hold: bool,
    /// Smallest `rhs - lhs` over prefixes.
    #[serde(with = "super::extended_f64")]
    pub worst_prefix_margin: f64,
    pub rayleigh_holds: bool,
    /// False when an applied step increased `f`.
    pub monotone: bool,
    pub skipped_steps: usize,
    pub initial_excess: f64,
    pub final_excess: f64,
    pub decomposition: RegretDecomposition,
    pub verdict: Verdict,
}

/// Runs the learner from `S_1 = 0`.
pub fn run_population_osgm(problem: &QuadraticProblem, cfg: &PopulationConfig) -> PopulationReport {
    let s0 = DMatrix::zeros(problem.value_dim(), problem.key_dim());
    run_population_osgm_from(problem, cfg, &s0)
}

pub fn run_population_osgm_from(problem: &QuadraticProblem, cfg: &PopulationConfig, s0: &DMatrix<f64>) -> PopulationReport {
    let sig = &problem.key_covariance;
    let l = problem.lipschitz;
    let k = problem.key_dim();
    let step = cfg.step.unwrap_or(1.0 / l);
    let (lo, hi) = cfg.box_bounds.unwrap_or((0.0, 2.0 / problem.lambda_min_positive));
    let mut d = match (cfg.learner, cfg.init) {
        (Learner::Adversarial, _) => DMatrix::identity(k, k) * (3.0 / l),
        (_, DInit::Newton) => problem.newton.clone(),
        (_, DInit::ScaledIdentity(c)) => DMatrix::identity(k, k) * (c / l),
    };
    if cfg.learner == Learner::Diagonal {
        d = DMatrix::from_diagonal(&d.diagonal().map(|x| x.clamp(lo, hi)));
    }

    let mut err = s0 - &problem.optimum;
    let initial_excess = problem.excess(s0);
    let mut excess = initial_excess;
    let mut steps = Vec::new();
    let mut a_sum = DVector::zeros(k);
    let mut m_sum = DMatrix::zeros(k, k);
    let (mut dec_sum, mut star_sum) = (0.0, 0.0);
    let mut monotone = true;
    let mut converged = false;

    for t in 1..=cfg.horizon {
        let g = &err * sig;
        let gg = g.norm_squared();
        if excess <= CONVERGED_REL * initial_excess || gg == 0.0 || !gg.is_normal() {
            converged = true;
            break;
        }
        let h_star = -excess / gg;
        let h_prop = h_closed(&g, &d, sig);
        let skipped = cfg.guard && h_prop > 0.0;
        let next = if skipped { err.clone() } else { &err - &g * &d };
        let next_excess = 0.5 * (&next * sig).component_mul(&next).sum();
        if !skipped && next_excess > excess {
            monotone = false;
        }
        let at_optimum = next_excess <= CONVERGED_REL * initial_excess;
        let log_r = if at_optimum { f64::NEG_INFINITY } else { (next_excess / excess).ln() };
        let h_dec = if skipped { 0.0 } else { h_prop };

        let gtg = g.transpose() * &g;
        a_sum += gtg.diagonal() / gg;
        m_sum += sig.component_mul(&gtg) / gg;
        dec_sum += h_dec;
        star_sum += h_star;
        steps.push(LedgerStep {
            t,
            h_decision: h_dec,
            h_proposed: h_prop,
            h_comparator: h_star,
            skipped,
            excess_before: excess,
            log_r,
            rayleigh_ratio: gg / excess / (2.0 * l),
        });

        let grad_d = &gtg * (&d * sig - DMatrix::identity(k, k)) / gg;
        match cfg.learner {
            Learner::Dense => d -= grad_d * step,
            Learner::Diagonal => {
                let upd = d.diagonal() - grad_d.diagonal() * step;
                d = DMatrix::from_diagonal(&upd.map(|x| x.clamp(lo, hi)));
            }
            Learner::Adversarial => {}
        }
        err = next;
        excess = next_excess;
        if at_optimum {
            converged = true;
            break;
        }
    }

    // Prefix audit of prod r_t <= (2 L R_tau / tau)^tau.
    let (mut lhs, mut regret) = (0.0, 0.0);
    let mut prefixes_hold = true;
    let mut worst = f64::INFINITY;
    let mut log_bound = f64::NEG_INFINITY;
    for (i, s) in steps.iter().enumerate() {
        let tau = (i + 1) as f64;
        lhs += s.log_r;
        regret += s.h_decision - s.h_comparator;
        let base = 2.0 * l * regret / tau;
        log_bound = if base > 0.0 { tau * base.ln() } else { f64::NEG_INFINITY };
        if !log_le(lhs, log_bound) {
            prefixes_hold = false;
        }
        let margin = if lhs == f64::NEG_INFINITY { f64::INFINITY } else { log_bound - lhs };
        worst = worst.min(margin);
    }
    let rayleigh_holds = steps.iter().all(|s| s.rayleigh_ratio <= 1.0 + 1e-9);
    let skipped_steps = steps.iter().filter(|s| s.skipped).count();

    // Comparator decomposition on sum_t h_t(Diag(d)) = -a^T d + 1/2 d^T M d.
    let total = |x: &DVector<f64>| -a_sum.dot(x) + 0.5 * x.dot(&(&m_sum * x));
    let d_diag = sym_pinv(&m_sum) * &a_sum;
    let box_sol = box_qp(&a_sum, &m_sum, lo, hi, &d_diag);
    let (h_box, h_diag) = (total(&box_sol.x), total(&d_diag));
    let full = dec_sum - star_sum;
    let projected_ogd = dec_sum - h_box;
    let box_gap = h_box - h_diag;
    let diagonal_gap = h_diag - star_sum;
    let decomposition = RegretDecomposition {
        full,
        projected_ogd,
        box_gap,
        diagonal_gap,
        d_box: box_sol.x.iter().copied().collect(),
        d_diag: d_diag.iter().copied().collect(),
        identity_error: (projected_ogd + box_gap + diagonal_gap - full).abs(),
    };

    let verdict = if !monotone {
        Verdict::NotApplicable
    } else {
        Verdict::from_bool(prefixes_hold && rayleigh_holds)
    };
    PopulationReport {
        ledger: RegretLedger { log_prod_r: lhs, regret, steps },
        lipschitz: l,
        pinv_cutoff: problem.pinv_cutoff,
        horizon: cfg.horizon,
        audited_steps: 0,
        converged,
        log_bound,
        prefixes_hold,
        worst_prefix_margin: worst,
        rayleigh_holds,
        monotone,
        skipped_steps,
        initial_excess,
        final_excess: excess,
        decomposition,
        verdict,
    }
    .with_audited()
}

impl PopulationReport {
    fn with_audited(mut self) -> Self {
        self.audited_steps = self.ledger.steps.len();
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn diag_problem() -> QuadraticProblem {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let target = DMatrix::from_fn(3, 4, |_, _| rng.sample::<f64, _>(StandardNormal));
        QuadraticProblem::diagonal(&[1.0, 2.0, 3.0, 4.0], target).unwrap()
    }

    #[test]
    fn rejects_bad_covariances() {
        let t = DMatrix::zeros(1, 2);
        assert!(QuadraticProblem::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]), t.clone(), 0.0).is_err());
        assert!(QuadraticProblem::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]), t, 0.0).is_err());
    }

    #[test]
    fn optimum_is_minimal_and_sampler_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = QuadraticProblem::random(&mut rng, 4, 2, 0.5, 3.0, 0.1).unwrap();
        for _ in 0..50 {
            let s = DMatrix::from_fn(2, 4, |_, _| rng.gen_range(-2.0..2.0));
            assert!(p.f_star <= p.f(&s) + 1e-12);
            assert!((p.f(&s) - p.f_star - p.excess(&s)).abs() <= 1e-10);
        }
        let n = 20000;
        let mut cov = DMatrix::zeros(4, 4);
        let mut cross = DMatrix::zeros(2, 4);
        for _ in 0..n {
            let (k, v) = p.sample(&mut rng);
            cov += &k * k.transpose();
            cross += &v * k.transpose();
        }
        assert!((cov / n as f64 - &p.key_covariance).amax() < 0.15);
        assert!((cross / n as f64 - &p.cross_term).amax() < 0.3);
    }

    #[test]
    fn step_examples() {
        let p = diag_problem();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = DMatrix::from_fn(3, 4, |_, _| rng.gen_range(-1.0..1.0));
        let (s1, h) = population_step(&s, &DMatrix::zeros(4, 4), &p);
        assert_eq!(s1, s);
        assert_eq!(h, 0.0);

        let (s1, h) = population_step(&s, &p.newton, &p);
        let g = p.grad(&s);
        let expected = -(p.f(&s) - p.f_star) / g.norm_squared();
        assert!((h - expected).abs() <= 1e-12 * expected.abs());
        assert!(p.f(&s1) <= p.f_star + 1e-12);
        assert!(newton_step_check(&p, &s) <= 1e-10);
        // Closed form against the definition.
        let d = DMatrix::from_fn(4, 4, |_, _| rng.gen_range(-0.3..0.3));
        let (s2, h) = population_step(&s, &d, &p);
        let brute = (p.f(&s2) - p.f(&s)) / g.norm_squared();
        assert!((h - brute).abs() <= 1e-12);
    }

    #[test]
    fn feedback_is_convex_in_d() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = QuadraticProblem::random(&mut rng, 5, 3, 0.2, 4.0, 0.0).unwrap();
        let lambdas: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
        for _ in 0..50 {
            let s = DMatrix::from_fn(3, 5, |_, _| rng.gen_range(-1.0..1.0));
            let d1 = DMatrix::from_fn(5, 5, |_, _| rng.gen_range(-1.0..1.0));
            let d2 = DMatrix::from_fn(5, 5, |_, _| rng.gen_range(-1.0..1.0));
            assert!(convexity_violation(&p, &s, &d1, &d2, &lambdas) <= 1e-12);
        }
    }

    #[test]
    fn single_newton_step_run() {
        let p = diag_problem();
        let cfg = PopulationConfig { horizon: 1, init: DInit::Newton, ..Default::default() };
        let r = run_population_osgm(&p, &cfg);
        assert_eq!(r.ledger.steps.len(), 1);
        assert_eq!(r.ledger.log_prod_r, f64::NEG_INFINITY);
        assert_eq!(r.verdict, Verdict::Pass);
    }

    #[test]
    fn diagonal_learner_bound_holds_at_every_prefix() {
        let p = diag_problem();
        let r = run_population_osgm(&p, &PopulationConfig::default());
        assert!(r.prefixes_hold, "margin {}", r.worst_prefix_margin);
        assert!(r.rayleigh_holds);
        assert_eq!(r.verdict, Verdict::Pass);
        assert!(r.final_excess < 1e-6 * r.initial_excess);
    }

    #[test]
    fn dense_learner_decomposition_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = QuadraticProblem::random(&mut rng, 4, 2, 0.5, 4.0, 0.0).unwrap();
        let cfg = PopulationConfig { learner: Learner::Dense, horizon: 60, ..Default::default() };
        let r = run_population_osgm(&p, &cfg);
        let dcmp = &r.decomposition;
        assert!(dcmp.identity_error <= 1e-12 * (1.0 + dcmp.full.abs()));
        assert!(dcmp.box_gap >= -1e-9 && dcmp.diagonal_gap >= -1e-9);
        assert!((dcmp.full - r.ledger.regret).abs() <= 1e-12 * (1.0 + dcmp.full.abs()));
        assert_eq!(r.verdict, Verdict::Pass);
    }

    #[test]
    fn adversarial_learner_without_guard_is_not_applicable() {
        let p = diag_problem();
        let cfg = PopulationConfig { learner: Learner::Adversarial, guard: false, horizon: 20, ..Default::default() };
        let r = run_population_osgm(&p, &cfg);
        assert!(!r.monotone);
        assert_eq!(r.verdict, Verdict::NotApplicable);
        let guarded = run_population_osgm(&p, &PopulationConfig { guard: true, ..cfg });
        assert!(guarded.monotone);
        assert!(guarded.skipped_steps > 0);
        assert_ne!(guarded.verdict, Verdict::Fail);
    }
}
