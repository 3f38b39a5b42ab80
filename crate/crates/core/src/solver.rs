//! Maximization of the penalized likelihood `ℓ(g) − λ J_q(g)`.
//!
//! Damped Newton in the coordinates of the constraint null space (or the
//! full coefficient vector when unconstrained). Each step solves
//! `(−H + 2λP + ρI) s = ∇`, escalating the ridge `ρ` tenfold until the
//! Cholesky factorization succeeds, then backtracks until the Armijo
//! condition holds. Because the objective is concave, any stationary point is
//! the global maximum.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{inner_products, l2_gram, BasisSpec, SplineFunction, Weight};
use crate::error::{Error, Result};
use crate::models::{ConstraintSpec, Dataset, Likelihood, ModelSpec};
use crate::penalty::PenaltyOperator;
use crate::quadrature;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
    pub backtrack: f64,
    pub armijo: f64,
    pub ridge_floor: f64,
    pub quantile_homotopy_stages: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            grad_tol: 1e-8,
            backtrack: 0.5,
            armijo: 1e-4,
            ridge_floor: 1e-10,
            quantile_homotopy_stages: 6,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        let ok = self.max_iter > 0
            && self.grad_tol > 0.0
            && self.backtrack > 0.0
            && self.backtrack < 1.0
            && self.armijo > 0.0
            && self.armijo < 1.0
            && self.ridge_floor > 0.0
            && self.quantile_homotopy_stages > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid fit options {self:?}")))
        }
    }
}

/// Largest smoothing level of the quantile homotopy; each later stage divides
/// it by ten.
pub const HOMOTOPY_START: f64 = 0.1;

const MAX_BACKTRACKS: usize = 60;
const MAX_RIDGE: f64 = 1e12;
/// Relative size of an objective change treated as rounding noise.
const RESOLUTION: f64 = 1e-12;

#[derive(Debug, Clone, Serialize)]
pub struct PenalizedFit {
    pub basis: BasisSpec,
    /// Full-length coefficients (constraint null basis already applied).
    #[serde(serialize_with = "ser_dvec")]
    pub coeffs: DVector<f64>,
    pub lambda: f64,
    /// Penalized objective `ℓ − λ J_q` at `coeffs`.
    pub objective_value: f64,
    pub loglik: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Penalized objective after every accepted step, starting point first.
    pub trace: Vec<f64>,
    pub diagnostic: Option<String>,
}

fn ser_dvec<S: serde::Serializer>(v: &DVector<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(v.iter())
}

impl PenalizedFit {
    pub fn spline(&self) -> SplineFunction {
        SplineFunction {
            basis: self.basis.clone(),
            coeffs: self.coeffs.clone(),
        }
    }
}

/// Penalized objective restricted to `c = Z θ`.
struct Reduced<'a> {
    lik: &'a Likelihood,
    z: Option<&'a DMatrix<f64>>,
    op: &'a PenaltyOperator,
    pen: DMatrix<f64>,
    lambda: f64,
}

impl<'a> Reduced<'a> {
    fn new(lik: &'a Likelihood, pen: &'a PenaltyOperator, lambda: f64, cons: Option<&'a ConstraintSpec>) -> Self {
        let z = cons.map(|c| &c.nullbasis);
        let p = match z {
            Some(z) => z.transpose() * pen.gram() * z,
            None => pen.gram().clone(),
        };
        Self {
            lik,
            z,
            op: pen,
            pen: p,
            lambda,
        }
    }

    fn full(&self, theta: &DVector<f64>) -> DVector<f64> {
        match self.z {
            Some(z) => z * theta,
            None => theta.clone(),
        }
    }

    fn reduce(&self, c: &DVector<f64>) -> DVector<f64> {
        match self.z {
            Some(z) => z.transpose() * c,
            None => c.clone(),
        }
    }

    fn penalty(&self, theta: &DVector<f64>) -> f64 {
        self.op.quadratic_form(&self.full(theta))
    }

    fn value(&self, theta: &DVector<f64>) -> Result<(f64, f64)> {
        let ll = self.lik.objective(&self.full(theta))?;
        let v = ll - self.lambda * self.penalty(theta);
        if v.is_finite() {
            Ok((v, ll))
        } else {
            Err(Error::Divergence)
        }
    }

    /// Gradient and negated Hessian of the penalized objective.
    fn derivatives(&self, theta: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let ev = self.lik.evaluate(&self.full(theta), true, true)?;
        let (g, h) = (ev.gradient.unwrap(), ev.hessian.unwrap());
        let (g, h) = match self.z {
            Some(z) => (z.transpose() * g, z.transpose() * h * z),
            None => (g, h),
        };
        let pc = self.reduce(&self.op.apply(&self.full(theta)));
        let grad = g - pc * (2.0 * self.lambda);
        let neg_h = -h + &self.pen * (2.0 * self.lambda);
        Ok((grad, neg_h))
    }
}

pub fn fit_penalized(
    model: &ModelSpec,
    data: &Dataset,
    basis: &BasisSpec,
    pen: &PenaltyOperator,
    lambda: f64,
    constraints: Option<&ConstraintSpec>,
    opts: &FitOptions,
) -> Result<PenalizedFit> {
    let lik = Likelihood::new(model, data, basis)?;
    fit_likelihood(&lik, pen, lambda, constraints, opts, None)
}

/// As [`fit_penalized`] with a precomputed likelihood and an optional
/// starting point (full coefficients; projected onto the constraint space).
pub fn fit_likelihood(
    lik: &Likelihood,
    pen: &PenaltyOperator,
    lambda: f64,
    constraints: Option<&ConstraintSpec>,
    opts: &FitOptions,
    start: Option<&DVector<f64>>,
) -> Result<PenalizedFit> {
    opts.validate()?;
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidParameter(format!("lambda = {lambda} must be finite and >= 0")));
    }
    if pen.basis() != lik.basis() {
        return Err(Error::InvalidParameter("penalty and likelihood use different bases".into()));
    }
    if let Some(c) = constraints {
        if c.rows.ncols() != lik.basis().dim() {
            return Err(Error::InvalidParameter("constraint width does not match basis".into()));
        }
    }
    let start = match start {
        Some(s) => s.clone(),
        None => initial_coeffs(lik),
    };
    match *lik.model() {
        ModelSpec::Quantile { tau, eps } => {
            let mut levels: Vec<f64> = (0..opts.quantile_homotopy_stages)
                .map(|s| HOMOTOPY_START * 10f64.powi(-(s as i32)))
                .filter(|&e| e > eps)
                .collect();
            if eps > 0.0 {
                levels.push(eps);
            }
            if levels.is_empty() {
                levels.push(eps);
            }
            let mut current = start;
            let mut total_iter = 0;
            let mut fit = None;
            for e in levels {
                let staged = lik.with_model(ModelSpec::Quantile { tau, eps: e })?;
                let f = newton(&staged, pen, lambda, constraints, opts, &current)?;
                total_iter += f.iterations;
                current = f.coeffs.clone();
                fit = Some(f);
            }
            let mut fit = fit.unwrap();
            fit.iterations = total_iter;
            Ok(fit)
        }
        _ => newton(lik, pen, lambda, constraints, opts, &start),
    }
}

/// Zero, except for the log-density and spectral contexts, which start at
/// the constant matching the data (zero for a density under the
/// zero-integral constraint, `log mean I` for a spectrum).
fn initial_coeffs(lik: &Likelihood) -> DVector<f64> {
    let n = lik.basis().dim();
    match (lik.model(), lik.data()) {
        (ModelSpec::Spectral, Dataset::Periodogram { value, .. }) => {
            let mean = value.iter().sum::<f64>() / value.len() as f64;
            if mean > 0.0 {
                DVector::from_element(n, mean.ln())
            } else {
                DVector::zeros(n)
            }
        }
        _ => DVector::zeros(n),
    }
}

fn newton(
    lik: &Likelihood,
    pen: &PenaltyOperator,
    lambda: f64,
    constraints: Option<&ConstraintSpec>,
    opts: &FitOptions,
    start: &DVector<f64>,
) -> Result<PenalizedFit> {
    let prob = Reduced::new(lik, pen, lambda, constraints);
    let mut theta = prob.reduce(start);
    let mut current = prob.value(&theta);
    // never start worse than the zero vector
    let zero = DVector::zeros(theta.len());
    if let Ok(z) = prob.value(&zero) {
        if current.as_ref().map_or(true, |c| z.0 > c.0) {
            theta = zero;
            current = Ok(z);
        }
    }
    let (mut value, mut loglik) = match current {
        Ok(v) => v,
        Err(e) => {
            return Err(Error::InvalidParameter(format!("starting point is not feasible: {e}")));
        }
    };
    let mut trace = vec![value];
    let mut iterations = 0;
    let mut diagnostic = None;
    let mut converged = false;
    let mut grad_norm;
    // gradient norm before the last step taken without a line search
    let mut unguarded_from: Option<f64> = None;
    loop {
        let (grad, neg_h) = match prob.derivatives(&theta) {
            Ok(d) => d,
            Err(e) => {
                diagnostic = Some(format!("derivative evaluation failed: {e}"));
                grad_norm = f64::NAN;
                break;
            }
        };
        grad_norm = grad.norm();
        if grad_norm <= opts.grad_tol * value.abs().max(1.0) {
            converged = true;
            break;
        }
        if iterations >= opts.max_iter {
            diagnostic = Some(format!("iteration cap {} reached", opts.max_iter));
            break;
        }
        let Some(step) = newton_step(&neg_h, &grad, opts.ridge_floor) else {
            diagnostic = Some("Newton system could not be factorized".into());
            break;
        };
        let slope = grad.dot(&step);
        iterations += 1;
        let resolution = RESOLUTION * value.abs().max(1.0);
        if slope <= resolution {
            // The predicted gain is below what the objective (a sum of n
            // terms) can resolve, so Armijo cannot judge the step. Near the
            // optimum the full Newton step is safe; take it unless it lowers
            // the objective, and stop if the gradient fails to shrink.
            if let Some(prev) = unguarded_from {
                if grad_norm >= 0.5 * prev {
                    diagnostic = Some(format!("stalled at rounding level with gradient norm {grad_norm:.3e}"));
                    break;
                }
            }
            let cand = &theta + &step;
            if let Ok((v, ll)) = prob.value(&cand) {
                if v >= value {
                    theta = cand;
                    value = v;
                    loglik = ll;
                    trace.push(v);
                    unguarded_from = Some(grad_norm);
                    continue;
                }
            }
        }
        unguarded_from = None;
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let cand = &theta + &step * t;
            if let Ok((v, ll)) = prob.value(&cand) {
                if v >= value + opts.armijo * t * slope && v > value {
                    accepted = Some((cand, v, ll));
                    break;
                }
            }
            t *= opts.backtrack;
        }
        match accepted {
            Some((cand, v, ll)) => {
                theta = cand;
                value = v;
                loglik = ll;
                trace.push(v);
            }
            None => {
                diagnostic = Some(format!("line search failed with gradient norm {grad_norm:.3e}"));
                break;
            }
        }
    }
    Ok(PenalizedFit {
        basis: lik.basis().clone(),
        coeffs: prob.full(&theta),
        lambda,
        objective_value: value,
        loglik,
        grad_norm,
        iterations,
        converged,
        trace,
        diagnostic,
    })
}

fn newton_step(neg_h: &DMatrix<f64>, grad: &DVector<f64>, floor: f64) -> Option<DVector<f64>> {
    let n = grad.len();
    let mut ridge = floor;
    while ridge <= MAX_RIDGE {
        let mut a = neg_h.clone();
        for i in 0..n {
            a[(i, i)] += ridge;
        }
        if let Some(ch) = a.cholesky() {
            let s = ch.solve(grad);
            if s.iter().all(|v| v.is_finite()) {
                return Some(s);
            }
        }
        ridge *= 10.0;
    }
    None
}

/// `∫ (η̂ − η₀)² w` by adaptive quadrature on each knot interval.
pub fn l2_error<F: Fn(f64) -> f64>(fit: &PenalizedFit, truth: F, weight: &Weight) -> f64 {
    fit.spline().l2_distance_sq(truth, weight, 1e-9)
}

/// `J_q(η̂) = cᵀ P c`.
pub fn penalty_value(fit: &PenalizedFit, pen: &PenaltyOperator) -> f64 {
    pen.quadratic_form(&fit.coeffs)
}

/// Population penalized fit for the Gaussian context: minimizes
/// `‖g − η₀‖² + λ J_q(g)` over the spline space by solving
/// `(G + λP) c = r`, `r_i = ∫ B_i η₀ w`.
pub fn population_fit_gaussian<F: Fn(f64) -> f64>(
    truth: F,
    basis: &BasisSpec,
    pen: &PenaltyOperator,
    lambda: f64,
    weight: &Weight,
) -> Result<PenalizedFit> {
    if pen.basis() != basis {
        return Err(Error::InvalidParameter("penalty and basis differ".into()));
    }
    let g = l2_gram(basis, weight)?;
    let r = inner_products(basis, &truth, weight, quadrature::DEFAULT_RTOL);
    let a = &g + pen.gram() * lambda;
    let coeffs = a
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite("G + λP"))?
        .solve(&r);
    let residual = (&a * &coeffs - &r).norm();
    let spline = SplineFunction::new(basis.clone(), coeffs.clone())?;
    let dist = spline.l2_distance_sq(&truth, weight, 1e-9);
    let j = pen.quadratic_form(&coeffs);
    Ok(PenalizedFit {
        basis: basis.clone(),
        coeffs,
        lambda,
        objective_value: -(dist + lambda * j),
        loglik: -dist,
        grad_norm: residual,
        iterations: 0,
        converged: true,
        trace: Vec::new(),
        diagnostic: None,
    })
}
