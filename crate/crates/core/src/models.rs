//! Concave log-likelihoods over spline coefficients.
//!
//! Every context evaluates `ℓ(h)` for `h = Σ_j c_j B_j` together with its
//! exact gradient and Hessian in `c`. Except for the log-density model the
//! likelihood is a sum over observations of a function of `h(x_i)`, so the
//! derivatives are assembled from per-observation scalars through the sparse
//! design matrix.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::basis::{BasisSpec, Design};
use crate::error::{Error, Result};
use crate::quadrature::{self, GaussLegendre};

/// Exponentiated linear predictors beyond this magnitude are treated as
/// divergence for the Poisson likelihood.
pub const EXP_GUARD: f64 = 30.0;

/// A one-parameter exponential family `y B(η) − C(η)` with mean `A(η)`.
pub trait ExponentialFamily: Send + Sync {
    fn name(&self) -> &str;
    /// `(B, B', B'')` at `eta`.
    fn b(&self, eta: f64) -> (f64, f64, f64);
    /// `(C, C', C'')` at `eta`.
    fn c(&self, eta: f64) -> Result<(f64, f64, f64)>;
    /// Conditional mean `A(η) = C'(η) / B'(η)`.
    fn mean(&self, eta: f64) -> f64;
}

struct Logistic;

impl ExponentialFamily for Logistic {
    fn name(&self) -> &str {
        "logistic"
    }

    fn b(&self, eta: f64) -> (f64, f64, f64) {
        (eta, 1.0, 0.0)
    }

    fn c(&self, eta: f64) -> Result<(f64, f64, f64)> {
        let log1pexp = if eta > 0.0 {
            eta + (-eta).exp().ln_1p()
        } else {
            eta.exp().ln_1p()
        };
        let p = self.mean(eta);
        Ok((log1pexp, p, p * (1.0 - p)))
    }

    fn mean(&self, eta: f64) -> f64 {
        if eta >= 0.0 {
            1.0 / (1.0 + (-eta).exp())
        } else {
            let e = eta.exp();
            e / (1.0 + e)
        }
    }
}

struct Poisson;

impl ExponentialFamily for Poisson {
    fn name(&self) -> &str {
        "poisson"
    }

    fn b(&self, eta: f64) -> (f64, f64, f64) {
        (eta, 1.0, 0.0)
    }

    fn c(&self, eta: f64) -> Result<(f64, f64, f64)> {
        if !(eta.abs() <= EXP_GUARD) {
            return Err(Error::Divergence);
        }
        let e = eta.exp();
        Ok((e, e, e))
    }

    fn mean(&self, eta: f64) -> f64 {
        eta.exp()
    }
}

#[derive(Clone)]
pub struct ExpFamily(Arc<dyn ExponentialFamily>);

impl ExpFamily {
    pub fn logistic() -> Self {
        Self(Arc::new(Logistic))
    }

    pub fn poisson() -> Self {
        Self(Arc::new(Poisson))
    }

    pub fn custom(f: Arc<dyn ExponentialFamily>) -> Self {
        Self(f)
    }

    pub fn family(&self) -> &dyn ExponentialFamily {
        self.0.as_ref()
    }
}

impl fmt::Debug for ExpFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ExpFamily({})", self.0.name())
    }
}

#[derive(Debug, Clone)]
pub enum ModelSpec {
    Gaussian,
    ExpFamily(ExpFamily),
    LogDensity,
    Hazard,
    /// Check loss at quantile level `tau`, smoothed quadratically on
    /// `|u| ≤ eps`. `eps = 0` is the raw check loss.
    Quantile {
        tau: f64,
        eps: f64,
    },
    Spectral,
}

impl ModelSpec {
    pub fn name(&self) -> &str {
        match self {
            ModelSpec::Gaussian => "gaussian",
            ModelSpec::ExpFamily(f) => f.family().name(),
            ModelSpec::LogDensity => "log_density",
            ModelSpec::Hazard => "hazard",
            ModelSpec::Quantile { .. } => "quantile",
            ModelSpec::Spectral => "spectral",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let ModelSpec::Quantile { tau, eps } = *self {
            if !(tau > 0.0 && tau < 1.0) {
                return Err(Error::InvalidParameter(format!("quantile level {tau} not in (0, 1)")));
            }
            if !(eps >= 0.0) {
                return Err(Error::InvalidParameter(format!("smoothing {eps} < 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    /// Regression, generalized regression and quantile data.
    XY { x: Vec<f64>, y: Vec<f64> },
    /// Density estimation sample.
    Points { x: Vec<f64> },
    /// Right-censored survival data with a time-constant covariate.
    Survival {
        x: Vec<f64>,
        time: Vec<f64>,
        event: Vec<bool>,
    },
    /// Periodogram ordinates on the Fourier grid `2πk/T` within `[0, π]`.
    Periodogram {
        lambda: Vec<f64>,
        value: Vec<f64>,
        is_boundary: Vec<bool>,
        series_len: usize,
    },
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::XY { x, .. } | Dataset::Points { x } | Dataset::Survival { x, .. } => x.len(),
            Dataset::Periodogram { lambda, .. } => lambda.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Covariate (or frequency) values.
    pub fn x(&self) -> &[f64] {
        match self {
            Dataset::XY { x, .. } | Dataset::Points { x } | Dataset::Survival { x, .. } => x,
            Dataset::Periodogram { lambda, .. } => lambda,
        }
    }

    /// Builds a periodogram dataset from ordinates at `2πk/T`, `k = k0..`,
    /// checking the grid and flagging the endpoints 0 and π.
    pub fn periodogram(lambda: Vec<f64>, value: Vec<f64>, series_len: usize) -> Result<Self> {
        if lambda.len() != value.len() {
            return Err(Error::DatasetMismatch("lambda and I differ in length".into()));
        }
        if series_len < 2 {
            return Err(Error::DatasetMismatch("series length must be at least 2".into()));
        }
        let step = 2.0 * std::f64::consts::PI / series_len as f64;
        let mut is_boundary = Vec::with_capacity(lambda.len());
        for (&l, &v) in lambda.iter().zip(&value) {
            let k = (l / step).round();
            if (l - k * step).abs() > 1e-9 || !(0.0..=std::f64::consts::PI + 1e-12).contains(&l) {
                return Err(Error::DatasetMismatch(format!(
                    "frequency {l} is not on the grid 2πk/{series_len} within [0, π]"
                )));
            }
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::DatasetMismatch(format!("periodogram ordinate {v} is negative")));
            }
            is_boundary.push(k == 0.0 || 2 * k as usize == series_len);
        }
        Ok(Dataset::Periodogram {
            lambda,
            value,
            is_boundary,
            series_len,
        })
    }

    /// Infers `T` from the spacing of the frequencies.
    pub fn periodogram_infer(lambda: Vec<f64>, value: Vec<f64>) -> Result<Self> {
        if lambda.len() < 2 {
            return Err(Error::DatasetMismatch("need at least two frequencies".into()));
        }
        let step = lambda[1] - lambda[0];
        if !(step > 0.0) {
            return Err(Error::DatasetMismatch("frequencies must increase".into()));
        }
        let t = (2.0 * std::f64::consts::PI / step).round();
        if !(2.0..1e12).contains(&t) {
            return Err(Error::DatasetMismatch("cannot infer series length".into()));
        }
        Self::periodogram(lambda, value, t as usize)
    }
}

/// Linear constraints `rows · c = 0` with an orthonormal basis of their null
/// space.
#[derive(Debug, Clone)]
pub struct ConstraintSpec {
    pub rows: DMatrix<f64>,
    pub nullbasis: DMatrix<f64>,
}

impl ConstraintSpec {
    /// Null space by modified Gram–Schmidt: orthonormalize the rows (dropping
    /// dependent ones), then complete with projected unit vectors.
    pub fn from_rows(rows: DMatrix<f64>) -> Self {
        let n = rows.ncols();
        let mut q: Vec<DVector<f64>> = Vec::new();
        let project_out = |v: &mut DVector<f64>, q: &[DVector<f64>]| {
            for _ in 0..2 {
                for u in q {
                    let d = u.dot(v);
                    v.axpy(-d, u, 1.0);
                }
            }
        };
        for i in 0..rows.nrows() {
            let r: DVector<f64> = rows.row(i).transpose();
            let scale = r.norm();
            let mut v = r;
            project_out(&mut v, &q);
            let nv = v.norm();
            if nv > 1e-10 * scale && nv > 0.0 {
                q.push(v / nv);
            }
        }
        let rank = q.len();
        let mut null: Vec<DVector<f64>> = Vec::new();
        for j in 0..n {
            if null.len() == n - rank {
                break;
            }
            let mut v = DVector::zeros(n);
            v[j] = 1.0;
            let mut all = q.clone();
            all.extend(null.iter().cloned());
            project_out(&mut v, &all);
            let nv = v.norm();
            if nv > 1e-6 {
                null.push(v / nv);
            }
        }
        let nullbasis = if null.is_empty() {
            DMatrix::zeros(n, 0)
        } else {
            DMatrix::from_columns(&null)
        };
        Self { rows, nullbasis }
    }

    pub fn reduced_dim(&self) -> usize {
        self.nullbasis.ncols()
    }

    pub fn rank(&self) -> usize {
        self.rows.ncols() - self.nullbasis.ncols()
    }
}

/// The single row `r_j = ∫ B_j` restricting to splines with zero integral.
pub fn zero_integral_constraint(basis: &BasisSpec) -> ConstraintSpec {
    let m = basis.degree();
    let rule = GaussLegendre::exact_for_degree(m);
    let mut row = DMatrix::zeros(1, basis.dim());
    let mut buf = vec![0.0; m + 1];
    for j in 0..basis.n_intervals() {
        let (a, b) = basis.interval(j);
        for (x, w) in rule.mapped(a, b) {
            let first = basis.local_in_interval(j, x, 0, &mut buf);
            for (r, v) in buf.iter().enumerate() {
                row[(0, first + r)] += w * v;
            }
        }
    }
    ConstraintSpec::from_rows(row)
}

/// `g'(lo) = g'''(lo) = g'(hi) = g'''(hi) = 0`, the even-periodic boundary
/// conditions for a log spectral density on `[0, π]`.
pub fn spectral_boundary_constraints(basis: &BasisSpec) -> Result<ConstraintSpec> {
    if basis.degree() < 3 {
        return Err(Error::InvalidParameter(format!(
            "boundary derivative constraints need degree >= 3, got {}",
            basis.degree()
        )));
    }
    let (lo, hi) = basis.domain();
    let mut rows = DMatrix::zeros(4, basis.dim());
    for (i, (x, r)) in [(lo, 1), (lo, 3), (hi, 1), (hi, 3)].into_iter().enumerate() {
        let v = basis.eval_basis(x, r)?;
        for (j, val) in v.into_iter().enumerate() {
            rows[(i, j)] = val;
        }
    }
    Ok(ConstraintSpec::from_rows(rows))
}

/// Smoothed check loss: quadratic on `|u| ≤ eps`, `ρ_τ` outside, matching
/// value and slope at `±eps`. Returns `(ρ, ψ, ψ')` with `ψ = dρ/du`; at
/// `eps = 0` `ψ` is the right derivative.
pub fn check_loss(u: f64, tau: f64, eps: f64) -> (f64, f64, f64) {
    if eps > 0.0 && u.abs() <= eps {
        (
            u * u / (4.0 * eps) + (tau - 0.5) * u + eps / 4.0,
            u / (2.0 * eps) + tau - 0.5,
            1.0 / (2.0 * eps),
        )
    } else if u >= 0.0 {
        (tau * u, tau, 0.0)
    } else {
        ((tau - 1.0) * u, tau - 1.0, 0.0)
    }
}

/// Log-likelihood of one model on one dataset, with the design precomputed.
#[derive(Debug, Clone)]
pub struct Likelihood {
    model: ModelSpec,
    data: Dataset,
    basis: BasisSpec,
    design: Design,
}

/// Objective value with optional derivatives.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: f64,
    pub gradient: Option<DVector<f64>>,
    pub hessian: Option<DMatrix<f64>>,
}

impl Likelihood {
    pub fn new(model: &ModelSpec, data: &Dataset, basis: &BasisSpec) -> Result<Self> {
        model.validate()?;
        let ok = matches!(
            (model, data),
            (ModelSpec::Gaussian, Dataset::XY { .. })
                | (ModelSpec::ExpFamily(_), Dataset::XY { .. })
                | (ModelSpec::Quantile { .. }, Dataset::XY { .. })
                | (ModelSpec::LogDensity, Dataset::Points { .. })
                | (ModelSpec::Hazard, Dataset::Survival { .. })
                | (ModelSpec::Spectral, Dataset::Periodogram { .. })
        );
        if !ok {
            return Err(Error::DatasetMismatch(format!(
                "model {} cannot use this dataset",
                model.name()
            )));
        }
        if data.is_empty() {
            return Err(Error::EmptySample);
        }
        match data {
            Dataset::XY { x, y } if x.len() != y.len() => {
                return Err(Error::DatasetMismatch("x and y differ in length".into()))
            }
            Dataset::Survival { x, time, event } if x.len() != time.len() || x.len() != event.len() => {
                return Err(Error::DatasetMismatch("survival columns differ in length".into()))
            }
            Dataset::Survival { time, .. } if time.iter().any(|t| !(*t >= 0.0)) => {
                return Err(Error::DatasetMismatch("negative survival time".into()))
            }
            Dataset::XY { y, .. } if y.iter().any(|v| !v.is_finite()) => {
                return Err(Error::DatasetMismatch("non-finite response".into()))
            }
            _ => {}
        }
        let design = basis.design(data.x())?;
        Ok(Self {
            model: model.clone(),
            data: data.clone(),
            basis: basis.clone(),
            design,
        })
    }

    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn basis(&self) -> &BasisSpec {
        &self.basis
    }

    pub fn design(&self) -> &Design {
        &self.design
    }

    /// Same data and basis under a different model (used for the quantile
    /// smoothing homotopy).
    pub fn with_model(&self, model: ModelSpec) -> Result<Self> {
        model.validate()?;
        Ok(Self {
            model,
            ..self.clone()
        })
    }

    fn check_len(&self, c: &DVector<f64>) -> Result<()> {
        if c.len() != self.basis.dim() {
            return Err(Error::CoefficientLength {
                got: c.len(),
                want: self.basis.dim(),
            });
        }
        Ok(())
    }

    pub fn objective(&self, c: &DVector<f64>) -> Result<f64> {
        Ok(self.evaluate(c, false, false)?.value)
    }

    pub fn gradient(&self, c: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.evaluate(c, true, false)?.gradient.unwrap())
    }

    pub fn curvature(&self, c: &DVector<f64>) -> Result<DMatrix<f64>> {
        if let ModelSpec::Quantile { eps, .. } = self.model {
            if eps == 0.0 {
                return Err(Error::NoCurvature);
            }
        }
        Ok(self.evaluate(c, true, true)?.hessian.unwrap())
    }

    pub fn evaluate(&self, c: &DVector<f64>, grad: bool, hess: bool) -> Result<Evaluation> {
        self.check_len(c)?;
        if matches!(self.model, ModelSpec::LogDensity) {
            return self.evaluate_density(c, grad, hess);
        }
        let h = self.design.apply(c);
        let n = h.len();
        let mut d1 = vec![0.0; n];
        let mut d2 = vec![0.0; n];
        let mut value = 0.0;
        let scale = match &self.data {
            Dataset::Periodogram { series_len, .. } => 1.0 / (series_len / 2) as f64,
            _ => 1.0 / n as f64,
        };
        for i in 0..n {
            let hi = h[i];
            let (v, g, c2) = match (&self.model, &self.data) {
                (ModelSpec::Gaussian, Dataset::XY { y, .. }) => {
                    let r = y[i] - hi;
                    (-r * r, 2.0 * r, -2.0)
                }
                (ModelSpec::ExpFamily(fam), Dataset::XY { y, .. }) => {
                    let fam = fam.family();
                    let (b0, b1, b2) = fam.b(hi);
                    let (c0, c1, c2) = fam.c(hi)?;
                    (y[i] * b0 - c0, y[i] * b1 - c1, y[i] * b2 - c2)
                }
                (ModelSpec::Quantile { tau, eps }, Dataset::XY { y, .. }) => {
                    let (r, psi, dpsi) = check_loss(y[i] - hi, *tau, *eps);
                    (-r, psi, -dpsi)
                }
                (ModelSpec::Hazard, Dataset::Survival { time, event, .. }) => {
                    let e = hi.exp();
                    let d = if event[i] { 1.0 } else { 0.0 };
                    (hi * d - time[i] * e, d - time[i] * e, -time[i] * e)
                }
                (
                    ModelSpec::Spectral,
                    Dataset::Periodogram {
                        value: ord,
                        is_boundary,
                        ..
                    },
                ) => {
                    let w = if is_boundary[i] { -0.5 } else { -1.0 };
                    let e = ord[i] * (-hi).exp();
                    (w * (hi + e), w * (1.0 - e), w * e)
                }
                _ => unreachable!("checked in Likelihood::new"),
            };
            value += v;
            d1[i] = g * scale;
            d2[i] = c2 * scale;
        }
        value *= scale;
        if !value.is_finite() {
            return Err(Error::Divergence);
        }
        let gradient = grad.then(|| self.design.apply_t(&d1));
        let hessian = hess.then(|| self.design.weighted_gram(&d2));
        Ok(Evaluation {
            value,
            gradient,
            hessian,
        })
    }

    fn evaluate_density(&self, c: &DVector<f64>, grad: bool, hess: bool) -> Result<Evaluation> {
        let n = self.data.len() as f64;
        let h = self.design.apply(c);
        let mean_h = h.iter().sum::<f64>() / n;
        let moments = basis_moments(&self.basis, c, grad, hess)?;
        let value = mean_h - moments.log_normalizer;
        if !value.is_finite() {
            return Err(Error::Divergence);
        }
        let gradient = grad.then(|| {
            let emp = self.design.apply_t(&vec![1.0 / n; h.len()]);
            emp - moments.mean.as_ref().unwrap()
        });
        let hessian = hess.then(|| -moments.cov.unwrap());
        Ok(Evaluation {
            value,
            gradient,
            hessian,
        })
    }
}

/// Normalizing constant and basis moments under the density `exp(h) / ∫ exp(h)`.
#[derive(Debug, Clone)]
pub struct DensityMoments {
    pub log_normalizer: f64,
    pub mean: Option<DVector<f64>>,
    pub cov: Option<DMatrix<f64>>,
}

/// Computes `log ∫ exp(h)` and, on request, `E[b]` and `Cov[b]` under the
/// normalized density. The adaptive partition for `exp(h)` on each knot
/// interval is reused for the moment integrals.
pub fn basis_moments(basis: &BasisSpec, c: &DVector<f64>, mean: bool, cov: bool) -> Result<DensityMoments> {
    let m = basis.degree();
    let nb = basis.dim();
    // h(x) ≤ max_j c_j by the partition of unity.
    let shift = c.max();
    if !shift.is_finite() {
        return Err(Error::Divergence);
    }
    let rule = quadrature::panel_rule();
    let mut buf = vec![0.0; m + 1];
    let mut z = 0.0;
    let mut m1 = DVector::zeros(nb);
    let mut m2 = DMatrix::zeros(nb, nb);
    for j in 0..basis.n_intervals() {
        let (a, b) = basis.interval(j);
        let eval = |x: f64, buf: &mut [f64]| {
            let first = basis.local_in_interval(j, x, 0, buf);
            let h: f64 = buf.iter().enumerate().map(|(r, v)| v * c[first + r]).sum();
            (first, (h - shift).exp())
        };
        let panels = quadrature::adaptive_panels(|x| eval(x, &mut buf).1, a, b, quadrature::DEFAULT_RTOL);
        for (pa, pb) in panels {
            for (x, w) in rule.mapped(pa, pb) {
                let (first, e) = eval(x, &mut buf);
                let we = w * e;
                z += we;
                if mean || cov {
                    for (r, vr) in buf.iter().enumerate() {
                        m1[first + r] += we * vr;
                        if cov {
                            for (s, vs) in buf.iter().enumerate() {
                                m2[(first + r, first + s)] += we * vr * vs;
                            }
                        }
                    }
                }
            }
        }
    }
    if !(z > 0.0) || !z.is_finite() {
        return Err(Error::Divergence);
    }
    let log_normalizer = shift + z.ln();
    let mu = m1 / z;
    let cov_m = cov.then(|| m2 / z - &mu * mu.transpose());
    Ok(DensityMoments {
        log_normalizer,
        mean: (mean || cov).then_some(mu),
        cov: cov_m,
    })
}

/// `log ∫ exp(h)` for the spline with coefficients `c`.
pub fn log_normalizer(basis: &BasisSpec, c: &DVector<f64>) -> Result<f64> {
    Ok(basis_moments(basis, c, false, false)?.log_normalizer)
}

pub fn objective(model: &ModelSpec, data: &Dataset, basis: &BasisSpec, coeffs: &DVector<f64>) -> Result<f64> {
    Likelihood::new(model, data, basis)?.objective(coeffs)
}

pub fn gradient(model: &ModelSpec, data: &Dataset, basis: &BasisSpec, coeffs: &DVector<f64>) -> Result<DVector<f64>> {
    Likelihood::new(model, data, basis)?.gradient(coeffs)
}

pub fn curvature(model: &ModelSpec, data: &Dataset, basis: &BasisSpec, coeffs: &DVector<f64>) -> Result<DMatrix<f64>> {
    Likelihood::new(model, data, basis)?.curvature(coeffs)
}
