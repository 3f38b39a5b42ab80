//! Univariate B-spline spaces on an interval.
//!
//! A [`BasisSpec`] is the clamped B-spline basis of degree `m` over a
//! [`KnotVector`] with `k` interior knots, so `N = m + k + 1`. Evaluation uses
//! the Cox–de Boor recursion with derivatives; Gram matrices are integrated
//! exactly with a Gauss–Legendre rule on every knot interval.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{self, GaussLegendre};

/// Default bound on the ratio of the largest to the smallest knot gap.
pub const DEFAULT_MESH_RATIO: f64 = 2.0;

/// Grid points per knot interval used by [`complexity_constant`] in the
/// harness and CLI.
pub const COMPLEXITY_GRID: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KnotScheme {
    #[default]
    Equal,
    /// Equal knots with gaps rescaled by independent factors in
    /// `[1, ratio_bound]`, which keeps the mesh ratio within the bound.
    Jittered { ratio_bound: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotVector {
    lo: f64,
    hi: f64,
    interior: Vec<f64>,
    ratio_bound: f64,
}

impl KnotVector {
    pub fn new(lo: f64, hi: f64, interior: Vec<f64>, ratio_bound: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || lo >= hi {
            return Err(Error::InvalidKnots(format!("domain [{lo}, {hi}] is not an interval")));
        }
        if !(ratio_bound >= 1.0) {
            return Err(Error::InvalidKnots(format!("mesh ratio bound {ratio_bound} < 1")));
        }
        let mut prev = lo;
        for &t in interior.iter().chain(std::iter::once(&hi)) {
            if !(t > prev) {
                return Err(Error::InvalidKnots(format!(
                    "knots must be strictly increasing inside ({lo}, {hi}); saw {t} after {prev}"
                )));
            }
            prev = t;
        }
        let kv = Self {
            lo,
            hi,
            interior,
            ratio_bound,
        };
        let ratio = kv.mesh_ratio();
        if ratio > ratio_bound * (1.0 + 1e-12) {
            return Err(Error::InvalidKnots(format!(
                "mesh ratio {ratio} exceeds declared bound {ratio_bound}"
            )));
        }
        Ok(kv)
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn interior(&self) -> &[f64] {
        &self.interior
    }

    pub fn ratio_bound(&self) -> f64 {
        self.ratio_bound
    }

    /// Domain endpoints with the interior knots between them.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.interior.len() + 2);
        v.push(self.lo);
        v.extend_from_slice(&self.interior);
        v.push(self.hi);
        v
    }

    fn gaps(&self) -> impl Iterator<Item = f64> + '_ {
        let pts = std::iter::once(self.lo)
            .chain(self.interior.iter().copied())
            .chain(std::iter::once(self.hi));
        let next = self.interior.iter().copied().chain(std::iter::once(self.hi));
        pts.zip(next).map(|(a, b)| b - a)
    }

    /// Mesh size δ: the largest gap between neighbouring knots.
    pub fn mesh_size(&self) -> f64 {
        self.gaps().fold(0.0, f64::max)
    }

    pub fn mesh_ratio(&self) -> f64 {
        let (mn, mx) = self
            .gaps()
            .fold((f64::INFINITY, 0.0f64), |(mn, mx), g| (mn.min(g), mx.max(g)));
        mx / mn
    }
}

pub fn make_knots(a: f64, b: f64, k: usize, scheme: KnotScheme) -> Result<KnotVector> {
    if !(a < b) || !a.is_finite() || !b.is_finite() {
        return Err(Error::InvalidKnots(format!("nonmonotone request: a = {a}, b = {b}")));
    }
    match scheme {
        KnotScheme::Equal => {
            let h = (b - a) / (k + 1) as f64;
            let interior = (1..=k).map(|j| a + j as f64 * h).collect();
            KnotVector::new(a, b, interior, DEFAULT_MESH_RATIO)
        }
        KnotScheme::Jittered { ratio_bound, seed } => {
            if !(ratio_bound >= 1.0) {
                return Err(Error::InvalidKnots(format!("mesh ratio bound {ratio_bound} < 1")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dist = Uniform::new_inclusive(1.0, ratio_bound);
            let raw: Vec<f64> = (0..=k).map(|_| dist.sample(&mut rng)).collect();
            let total: f64 = raw.iter().sum();
            let mut interior = Vec::with_capacity(k);
            let mut acc = 0.0;
            for g in &raw[..k] {
                acc += g;
                interior.push(a + (b - a) * acc / total);
            }
            // Rescaling by a common factor leaves max/min gap unchanged, but the
            // cumulative sums can round; allow for that in the declared bound.
            KnotVector::new(a, b, interior, ratio_bound * (1.0 + 1e-9))
        }
    }
}

/// A clamped B-spline basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "BasisSpecRaw")]
pub struct BasisSpec {
    knots: KnotVector,
    degree: usize,
    #[serde(skip)]
    full: Vec<f64>,
}

impl BasisSpec {
    pub fn new(knots: KnotVector, degree: usize) -> Self {
        let mut full = Vec::with_capacity(knots.interior.len() + 2 * degree + 2);
        full.extend(std::iter::repeat_n(knots.lo, degree + 1));
        full.extend_from_slice(&knots.interior);
        full.extend(std::iter::repeat_n(knots.hi, degree + 1));
        Self {
            knots,
            degree,
            full,
        }
    }

    /// Equally spaced basis on [a, b]; the common construction in tests and
    /// the harness.
    pub fn uniform(a: f64, b: f64, k: usize, degree: usize) -> Result<Self> {
        Ok(Self::new(make_knots(a, b, k, KnotScheme::Equal)?, degree))
    }

    pub fn knots(&self) -> &KnotVector {
        &self.knots
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn dim(&self) -> usize {
        self.degree + self.knots.interior.len() + 1
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.knots.lo, self.knots.hi)
    }

    pub fn n_intervals(&self) -> usize {
        self.knots.interior.len() + 1
    }

    /// Knot interval `j` as `(lo, hi)`.
    pub fn interval(&self, j: usize) -> (f64, f64) {
        let m = self.degree;
        (self.full[m + j], self.full[m + j + 1])
    }

    /// Index of the knot interval containing `x` (right-continuous, with the
    /// right endpoint assigned to the last interval).
    pub fn interval_of(&self, x: f64) -> usize {
        let k = self.knots.interior.len();
        self.knots.interior.partition_point(|&t| t <= x).min(k)
    }

    pub fn check_domain(&self, x: f64) -> Result<()> {
        if x.is_nan() || x < self.knots.lo || x > self.knots.hi {
            return Err(Error::OutsideDomain {
                x,
                lo: self.knots.lo,
                hi: self.knots.hi,
            });
        }
        Ok(())
    }

    /// Values of the `m + 1` possibly nonzero basis functions (or their
    /// `deriv`-th derivatives) on interval `j`, written into `out`. Returns
    /// the index of the first of them. No domain checks.
    pub fn local_in_interval(&self, j: usize, x: f64, deriv: usize, out: &mut [f64]) -> usize {
        let p = self.degree;
        let span = p + j;
        let u = &self.full;
        debug_assert_eq!(out.len(), p + 1);
        if deriv > p {
            out.iter_mut().for_each(|v| *v = 0.0);
            return j;
        }
        // ndu holds basis values of increasing degree in its upper triangle
        // and knot differences in its lower triangle.
        let mut ndu = vec![vec![0.0; p + 1]; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        ndu[0][0] = 1.0;
        for jj in 1..=p {
            left[jj] = x - u[span + 1 - jj];
            right[jj] = u[span + jj] - x;
            let mut saved = 0.0;
            for r in 0..jj {
                ndu[jj][r] = right[r + 1] + left[jj - r];
                let temp = ndu[r][jj - 1] / ndu[jj][r];
                ndu[r][jj] = saved + right[r + 1] * temp;
                saved = left[jj - r] * temp;
            }
            ndu[jj][jj] = saved;
        }
        if deriv == 0 {
            for r in 0..=p {
                out[r] = ndu[r][p];
            }
            return j;
        }
        let mut a = [vec![0.0; p + 1], vec![0.0; p + 1]];
        for r in 0..=p {
            let (mut s1, mut s2) = (0usize, 1usize);
            a[0].iter_mut().for_each(|v| *v = 0.0);
            a[0][0] = 1.0;
            let mut d = 0.0;
            for kk in 1..=deriv {
                d = 0.0;
                let rk = r as isize - kk as isize;
                let pk = p - kk;
                if r >= kk {
                    a[s2][0] = a[s1][0] / ndu[pk + 1][rk as usize];
                    d = a[s2][0] * ndu[rk as usize][pk];
                }
                let j1 = if rk >= -1 { 1 } else { (-rk) as usize };
                let j2 = if (r as isize - 1) <= pk as isize { kk - 1 } else { p - r };
                for jj in j1..=j2 {
                    let idx = (rk + jj as isize) as usize;
                    a[s2][jj] = (a[s1][jj] - a[s1][jj - 1]) / ndu[pk + 1][idx];
                    d += a[s2][jj] * ndu[idx][pk];
                }
                if r <= pk {
                    a[s2][kk] = -a[s1][kk - 1] / ndu[pk + 1][r];
                    d += a[s2][kk] * ndu[r][pk];
                }
                std::mem::swap(&mut s1, &mut s2);
            }
            out[r] = d;
        }
        let mut factor = 1.0;
        for kk in (p - deriv + 1)..=p {
            factor *= kk as f64;
        }
        out.iter_mut().for_each(|v| *v *= factor);
        j
    }

    /// Local evaluation at `x` with domain and order checks.
    pub fn eval_local(&self, x: f64, deriv: usize) -> Result<(usize, Vec<f64>)> {
        self.check_domain(x)?;
        if deriv > self.degree {
            return Err(Error::DerivativeOrder {
                order: deriv,
                degree: self.degree,
            });
        }
        let mut out = vec![0.0; self.degree + 1];
        let first = self.local_in_interval(self.interval_of(x), x, deriv, &mut out);
        Ok((first, out))
    }

    /// `deriv`-th derivatives of all `N` basis functions at `x`.
    pub fn eval_basis(&self, x: f64, deriv: usize) -> Result<Vec<f64>> {
        let (first, local) = self.eval_local(x, deriv)?;
        let mut v = vec![0.0; self.dim()];
        v[first..first + local.len()].copy_from_slice(&local);
        Ok(v)
    }

    /// Sparse design matrix with rows `b(x_i)`.
    pub fn design(&self, xs: &[f64]) -> Result<Design> {
        self.design_deriv(xs, 0)
    }

    pub fn design_deriv(&self, xs: &[f64], deriv: usize) -> Result<Design> {
        if deriv > self.degree {
            return Err(Error::DerivativeOrder {
                order: deriv,
                degree: self.degree,
            });
        }
        let width = self.degree + 1;
        let mut first = Vec::with_capacity(xs.len());
        let mut vals = vec![0.0; xs.len() * width];
        for (i, &x) in xs.iter().enumerate() {
            self.check_domain(x)?;
            let f = self.local_in_interval(
                self.interval_of(x),
                x,
                deriv,
                &mut vals[i * width..(i + 1) * width],
            );
            first.push(f);
        }
        Ok(Design {
            ncols: self.dim(),
            width,
            first,
            vals,
        })
    }

    /// Coefficients of the polynomial `x ↦ Σ_j poly[j] x^j` (degree ≤ m) in
    /// this basis, obtained by interpolation at Greville-like points.
    pub fn polynomial_coeffs(&self, poly: &[f64]) -> Result<DVector<f64>> {
        if poly.len() > self.degree + 1 {
            return Err(Error::InvalidParameter(format!(
                "polynomial degree {} exceeds spline degree {}",
                poly.len() - 1,
                self.degree
            )));
        }
        let f = |x: f64| poly.iter().rev().fold(0.0, |acc, c| acc * x + c);
        let proj = best_l2_projection(self, &f, &Weight::Constant(1.0))?;
        Ok(proj.spline.coeffs)
    }
}

impl fmt::Display for BasisSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "degree {} on [{}, {}] with {} interior knots (N = {})",
            self.degree,
            self.knots.lo,
            self.knots.hi,
            self.knots.interior.len(),
            self.dim()
        )
    }
}

#[derive(Deserialize)]
struct BasisSpecRaw {
    knots: KnotVector,
    degree: usize,
}

impl From<BasisSpecRaw> for BasisSpec {
    fn from(r: BasisSpecRaw) -> Self {
        BasisSpec::new(r.knots, r.degree)
    }
}

/// Row-sparse design matrix: each row holds `m + 1` consecutive entries.
#[derive(Debug, Clone)]
pub struct Design {
    ncols: usize,
    width: usize,
    first: Vec<usize>,
    vals: Vec<f64>,
}

impl Design {
    pub fn nrows(&self) -> usize {
        self.first.len()
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn row(&self, i: usize) -> (usize, &[f64]) {
        (self.first[i], &self.vals[i * self.width..(i + 1) * self.width])
    }

    pub fn rows(&self) -> impl Iterator<Item = (usize, &[f64])> + '_ {
        (0..self.nrows()).map(move |i| self.row(i))
    }

    /// `B c`.
    pub fn apply(&self, c: &DVector<f64>) -> Vec<f64> {
        self.rows()
            .map(|(f, v)| v.iter().enumerate().map(|(a, b)| b * c[f + a]).sum())
            .collect()
    }

    /// `Bᵀ u`.
    pub fn apply_t(&self, u: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.ncols);
        for ((f, v), &ui) in self.rows().zip(u) {
            for (a, b) in v.iter().enumerate() {
                out[f + a] += b * ui;
            }
        }
        out
    }

    /// `Bᵀ diag(w) B`.
    pub fn weighted_gram(&self, w: &[f64]) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(self.ncols, self.ncols);
        for ((f, v), &wi) in self.rows().zip(w) {
            for (a, va) in v.iter().enumerate() {
                let s = wi * va;
                for (b, vb) in v.iter().enumerate() {
                    g[(f + a, f + b)] += s * vb;
                }
            }
        }
        g
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows(), self.ncols);
        for (i, (f, v)) in self.rows().enumerate() {
            for (a, b) in v.iter().enumerate() {
                m[(i, f + a)] = *b;
            }
        }
        m
    }
}

/// A weight (or design density) on the basis domain.
#[derive(Clone)]
pub enum Weight {
    Constant(f64),
    /// `Σ_j c[j] x^j`.
    Polynomial(Vec<f64>),
    /// Arbitrary positive function; Gram entries then use a fixed
    /// high-order rule per knot interval instead of an exact one.
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl fmt::Debug for Weight {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Weight::Constant(c) => write!(f, "Constant({c})"),
            Weight::Polynomial(p) => write!(f, "Polynomial({p:?})"),
            Weight::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

/// Extra nodes per knot interval for [`Weight::Custom`].
const CUSTOM_WEIGHT_NODES: usize = 16;

impl Weight {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Weight::Constant(c) => *c,
            Weight::Polynomial(p) => p.iter().rev().fold(0.0, |acc, c| acc * x + c),
            Weight::Custom(f) => f(x),
        }
    }

    pub fn poly_degree(&self) -> Option<usize> {
        match self {
            Weight::Constant(_) => Some(0),
            Weight::Polynomial(p) => Some(p.len().saturating_sub(1)),
            Weight::Custom(_) => None,
        }
    }

    /// Uniform probability density on [a, b].
    pub fn uniform_density(a: f64, b: f64) -> Self {
        Weight::Constant(1.0 / (b - a))
    }

    /// Probability density proportional to `1 + x/2` on [0, 1].
    pub fn linear_density() -> Self {
        Weight::Polynomial(vec![0.8, 0.4])
    }

    /// Gauss–Legendre rule for integrating a product of two degree-`d`
    /// piecewise polynomials against this weight.
    fn rule_for(&self, d: usize) -> GaussLegendre {
        match self.poly_degree() {
            Some(w) => GaussLegendre::new((2 * d + w + 1).div_ceil(2).max(1)),
            None => GaussLegendre::new(d + CUSTOM_WEIGHT_NODES),
        }
    }
}

/// A function in a spline space.
#[derive(Debug, Clone)]
pub struct SplineFunction {
    pub basis: BasisSpec,
    pub coeffs: DVector<f64>,
}

impl SplineFunction {
    pub fn new(basis: BasisSpec, coeffs: DVector<f64>) -> Result<Self> {
        if coeffs.len() != basis.dim() {
            return Err(Error::CoefficientLength {
                got: coeffs.len(),
                want: basis.dim(),
            });
        }
        Ok(Self { basis, coeffs })
    }

    pub fn eval(&self, x: f64) -> Result<f64> {
        self.eval_deriv(x, 0)
    }

    pub fn eval_deriv(&self, x: f64, deriv: usize) -> Result<f64> {
        let (first, local) = self.basis.eval_local(x, deriv)?;
        Ok(local.iter().enumerate().map(|(a, v)| v * self.coeffs[first + a]).sum())
    }

    /// Evaluation inside interval `j` without checks.
    pub(crate) fn eval_in(&self, j: usize, x: f64, deriv: usize, buf: &mut [f64]) -> f64 {
        let first = self.basis.local_in_interval(j, x, deriv, buf);
        buf.iter().enumerate().map(|(a, v)| v * self.coeffs[first + a]).sum()
    }

    /// Integral of `(self - f)^2 w` by adaptive quadrature on each knot
    /// interval.
    pub fn l2_distance_sq<F: Fn(f64) -> f64>(&self, f: F, w: &Weight, rtol: f64) -> f64 {
        let mut buf = vec![0.0; self.basis.degree + 1];
        (0..self.basis.n_intervals())
            .map(|j| {
                let (a, b) = self.basis.interval(j);
                quadrature::adaptive(
                    |x| {
                        let d = self.eval_in(j, x, 0, &mut buf) - f(x);
                        d * d * w.eval(x)
                    },
                    a,
                    b,
                    rtol,
                )
            })
            .sum()
    }
}

/// `G_ij = ∫ B_i B_j w dx`, exact for polynomial weights.
pub fn l2_gram(spec: &BasisSpec, weight: &Weight) -> Result<DMatrix<f64>> {
    let m = spec.degree;
    let n = spec.dim();
    let rule = weight.rule_for(m);
    let mut g = DMatrix::zeros(n, n);
    let mut buf = vec![0.0; m + 1];
    for j in 0..spec.n_intervals() {
        let (a, b) = spec.interval(j);
        for (x, qw) in rule.mapped(a, b) {
            let w = weight.eval(x);
            if !(w > 0.0) {
                return Err(Error::NonpositiveWeight(x));
            }
            let first = spec.local_in_interval(j, x, 0, &mut buf);
            for (r, vr) in buf.iter().enumerate() {
                for (s, vs) in buf.iter().enumerate() {
                    g[(first + r, first + s)] += qw * w * vr * vs;
                }
            }
        }
    }
    Ok(g)
}

/// Result of [`best_l2_projection`].
#[derive(Debug, Clone)]
pub struct Projection {
    pub spline: SplineFunction,
    /// Weighted L2 distance between the projection and the target.
    pub error: f64,
}

/// `∫ B_i f w dx` for every basis function, adaptively on each knot interval.
pub fn inner_products<F: Fn(f64) -> f64>(spec: &BasisSpec, f: &F, weight: &Weight, rtol: f64) -> DVector<f64> {
    let m = spec.degree;
    let mut r = DVector::zeros(spec.dim());
    let mut buf = vec![0.0; m + 1];
    for j in 0..spec.n_intervals() {
        let (a, b) = spec.interval(j);
        let first = j;
        let local = quadrature::adaptive_vec(
            |x, out| {
                spec.local_in_interval(j, x, 0, &mut buf);
                let fw = f(x) * weight.eval(x);
                for (o, v) in out.iter_mut().zip(&buf) {
                    *o = v * fw;
                }
            },
            m + 1,
            a,
            b,
            rtol,
        );
        for (a, v) in local.iter().enumerate() {
            r[first + a] += v;
        }
    }
    r
}

pub fn best_l2_projection<F: Fn(f64) -> f64>(spec: &BasisSpec, f: &F, weight: &Weight) -> Result<Projection> {
    let g = l2_gram(spec, weight)?;
    let r = inner_products(spec, f, weight, quadrature::DEFAULT_RTOL);
    let chol = g
        .cholesky()
        .ok_or(Error::NotPositiveDefinite("L2 Gram matrix"))?;
    let coeffs = chol.solve(&r);
    let spline = SplineFunction::new(spec.clone(), coeffs)?;
    let error = spline.l2_distance_sq(f, weight, quadrature::DEFAULT_RTOL).max(0.0).sqrt();
    Ok(Projection { spline, error })
}

/// `A_n = sup_x sqrt(b(x)ᵀ G⁻¹ b(x))` with unit weight, maximised over
/// `grid_density` equally spaced points (endpoints included) per interval.
pub fn complexity_constant(spec: &BasisSpec, grid_density: usize) -> Result<f64> {
    if grid_density < 16 {
        return Err(Error::InvalidParameter(format!(
            "grid density {grid_density} < 16"
        )));
    }
    let g = l2_gram(spec, &Weight::Constant(1.0))?;
    let ginv = g
        .cholesky()
        .ok_or(Error::NotPositiveDefinite("L2 Gram matrix"))?
        .inverse();
    let m = spec.degree;
    let mut buf = vec![0.0; m + 1];
    let mut best = 0.0f64;
    for j in 0..spec.n_intervals() {
        let (a, b) = spec.interval(j);
        for i in 0..grid_density {
            let x = a + (b - a) * i as f64 / (grid_density - 1) as f64;
            let first = spec.local_in_interval(j, x, 0, &mut buf);
            let mut q = 0.0;
            for (r, vr) in buf.iter().enumerate() {
                for (s, vs) in buf.iter().enumerate() {
                    q += vr * vs * ginv[(first + r, first + s)];
                }
            }
            best = best.max(q);
        }
    }
    Ok(best.sqrt())
}

/// Largest `|‖g‖_n / ‖g‖ − 1|` over `trials` random splines `g`, where the
/// empirical norm averages over `sample` and the theoretical norm integrates
/// against `design` (the sampling density).
pub fn empirical_norm_ratio(
    spec: &BasisSpec,
    sample: &[f64],
    design: &Weight,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    if sample.is_empty() {
        return Err(Error::EmptySample);
    }
    let w = vec![1.0 / sample.len() as f64; sample.len()];
    empirical_norm_ratio_weighted(spec, sample, &w, design, trials, seed)
}

/// As [`empirical_norm_ratio`] with `‖g‖²_n = Σ w_i g(x_i)²`.
pub fn empirical_norm_ratio_weighted(
    spec: &BasisSpec,
    sample: &[f64],
    sample_weights: &[f64],
    design: &Weight,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    if sample.is_empty() {
        return Err(Error::EmptySample);
    }
    if sample.len() != sample_weights.len() {
        return Err(Error::InvalidParameter("sample and weights differ in length".into()));
    }
    let g = l2_gram(spec, design)?;
    let emp = spec.design(sample)?.weighted_gram(sample_weights);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let c = DVector::from_fn(spec.dim(), |_, _| StandardNormal.sample(&mut rng));
        let theo = (c.transpose() * &g * &c)[0];
        let e = (c.transpose() * &emp * &c)[0];
        worst = worst.max(((e / theo).sqrt() - 1.0).abs());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn equal_knots() {
        let k = make_knots(0.0, 1.0, 1, KnotScheme::Equal).unwrap();
        assert_eq!(k.interior(), &[0.5]);
        assert_eq!(k.mesh_size(), 0.5);
        let k = make_knots(0.0, 1.0, 3, KnotScheme::Equal).unwrap();
        assert_eq!(k.interior(), &[0.25, 0.5, 0.75]);
        let k = make_knots(0.0, 1.0, 0, KnotScheme::Equal).unwrap();
        assert!(k.interior().is_empty());
        assert_eq!(k.mesh_ratio(), 1.0);
    }

    #[test]
    fn jittered_knots_respect_ratio() {
        for seed in 0..20 {
            let k = make_knots(0.0, 1.0, 9, KnotScheme::Jittered { ratio_bound: 2.0, seed }).unwrap();
            assert_eq!(k.interior().len(), 9);
            assert!(k.mesh_ratio() <= 2.0 + 1e-9, "ratio {}", k.mesh_ratio());
        }
    }

    #[test]
    fn knot_errors() {
        assert!(make_knots(1.0, 0.0, 3, KnotScheme::Equal).is_err());
        assert!(make_knots(0.0, 1.0, 3, KnotScheme::Jittered { ratio_bound: 0.5, seed: 1 }).is_err());
        assert!(KnotVector::new(0.0, 1.0, vec![0.5, 0.4], 10.0).is_err());
        assert!(KnotVector::new(0.0, 1.0, vec![0.0, 0.4], 10.0).is_err());
        assert!(KnotVector::new(0.0, 1.0, vec![0.1], 2.0).is_err());
    }

    #[test]
    fn hand_evaluations() {
        let b0 = BasisSpec::uniform(0.0, 1.0, 1, 0).unwrap();
        assert_eq!(b0.eval_basis(0.25, 0).unwrap(), vec![1.0, 0.0]);
        let b1 = BasisSpec::uniform(0.0, 1.0, 1, 1).unwrap();
        assert_eq!(b1.dim(), 3);
        let v = b1.eval_basis(0.5, 0).unwrap();
        assert!(close(v[0], 0.0, 1e-15) && close(v[1], 1.0, 1e-15) && close(v[2], 0.0, 1e-15));
        let v = b1.eval_basis(0.25, 0).unwrap();
        assert!(close(v[0], 0.5, 1e-15) && close(v[1], 0.5, 1e-15) && close(v[2], 0.0, 1e-15));
        let v = b1.eval_basis(1.0, 0).unwrap();
        assert!(close(v[2], 1.0, 1e-15));
    }

    #[test]
    fn eval_errors() {
        let b = BasisSpec::uniform(0.0, 1.0, 3, 2).unwrap();
        assert!(matches!(b.eval_basis(1.5, 0), Err(Error::OutsideDomain { .. })));
        assert!(matches!(b.eval_basis(-1e-9, 0), Err(Error::OutsideDomain { .. })));
        assert!(matches!(b.eval_basis(0.5, 3), Err(Error::DerivativeOrder { .. })));
    }

    #[test]
    fn gram_hand_values() {
        let b0 = BasisSpec::uniform(0.0, 1.0, 1, 0).unwrap();
        let g = l2_gram(&b0, &Weight::Constant(1.0)).unwrap();
        assert!(close(g[(0, 0)], 0.5, 1e-15) && close(g[(1, 1)], 0.5, 1e-15) && g[(0, 1)] == 0.0);
        let b1 = BasisSpec::uniform(0.0, 1.0, 0, 1).unwrap();
        let g = l2_gram(&b1, &Weight::Constant(1.0)).unwrap();
        assert!(close(g[(0, 0)], 1.0 / 3.0, 1e-15));
        assert!(close(g[(0, 1)], 1.0 / 6.0, 1e-15));
        assert!(close(g[(1, 0)], 1.0 / 6.0, 1e-15));
        assert!(close(g[(1, 1)], 1.0 / 3.0, 1e-15));
    }

    #[test]
    fn gram_total_mass_and_band() {
        for m in 0..4 {
            let spec = BasisSpec::new(
                make_knots(-1.0, 2.0, 7, KnotScheme::Jittered { ratio_bound: 2.0, seed: 3 }).unwrap(),
                m,
            );
            let g = l2_gram(&spec, &Weight::Constant(1.0)).unwrap();
            assert!(close(g.sum(), 3.0, 1e-12));
            for i in 0..spec.dim() {
                for j in 0..spec.dim() {
                    if i.abs_diff(j) > m {
                        assert_eq!(g[(i, j)], 0.0);
                    }
                }
            }
            assert!(g.clone().cholesky().is_some());
        }
    }

    #[test]
    fn nonpositive_weight_rejected() {
        let spec = BasisSpec::uniform(0.0, 1.0, 3, 2).unwrap();
        let w = Weight::Polynomial(vec![-0.5, 1.0]);
        assert!(matches!(l2_gram(&spec, &w), Err(Error::NonpositiveWeight(_))));
    }

    #[test]
    fn polynomials_projected_exactly() {
        for m in 0..4 {
            let spec = BasisSpec::uniform(0.0, 1.0, 5, m).unwrap();
            let poly: Vec<f64> = (0..=m).map(|j| 1.0 - 0.7 * j as f64).collect();
            let f = |x: f64| poly.iter().rev().fold(0.0, |acc, c| acc * x + c);
            let p = best_l2_projection(&spec, &f, &Weight::Constant(1.0)).unwrap();
            assert!(p.error <= 1e-9, "m={m} err={}", p.error);
        }
    }

    #[test]
    fn complexity_constant_closed_forms() {
        for k in [0usize, 1, 4, 9] {
            let spec = BasisSpec::uniform(0.0, 1.0, k, 0).unwrap();
            let a = complexity_constant(&spec, 64).unwrap();
            assert!(close(a, ((k + 1) as f64).sqrt(), 1e-12), "k={k} a={a}");
        }
        let spec = BasisSpec::uniform(0.0, 1.0, 0, 1).unwrap();
        let a = complexity_constant(&spec, 64).unwrap();
        // Endpoint maximum of (c1(1-x) + c2 x)^2 under cᵀGc = 1 with
        // G = [[1/3, 1/6], [1/6, 1/3]]: G⁻¹ = [[4, -2], [-2, 4]], so the
        // value at x = 0 is 4.
        assert!(close(a, 2.0, 1e-12), "a={a}");
        assert!(complexity_constant(&spec, 8).is_err());
    }

    #[test]
    fn norm_ratio_on_quadrature_nodes() {
        let spec = BasisSpec::uniform(0.0, 1.0, 6, 3).unwrap();
        let rule = GaussLegendre::new(4);
        let mut xs = Vec::new();
        let mut ws = Vec::new();
        for j in 0..spec.n_intervals() {
            let (a, b) = spec.interval(j);
            for (x, w) in rule.mapped(a, b) {
                xs.push(x);
                ws.push(w);
            }
        }
        let d = empirical_norm_ratio_weighted(&spec, &xs, &ws, &Weight::Constant(1.0), 50, 9).unwrap();
        assert!(d < 1e-8, "deviation {d}");
        assert!(matches!(
            empirical_norm_ratio(&spec, &[], &Weight::Constant(1.0), 5, 1),
            Err(Error::EmptySample)
        ));
    }

    #[test]
    fn smoothness_at_knots() {
        let spec = BasisSpec::uniform(0.0, 1.0, 4, 3).unwrap();
        let coeffs = DVector::from_fn(spec.dim(), |i, _| ((i * 7 % 5) as f64) - 2.0);
        let s = SplineFunction::new(spec.clone(), coeffs).unwrap();
        let mut buf = vec![0.0; 4];
        for (j, &t) in spec.knots().interior().iter().enumerate() {
            for r in 0..3 {
                let left = s.eval_in(j, t, r, &mut buf);
                let right = s.eval_in(j + 1, t, r, &mut buf);
                assert!((left - right).abs() < 1e-9 * (1.0 + left.abs()), "r={r} knot={t}");
            }
        }
    }

    proptest! {
        #[test]
        fn partition_of_unity_and_support(x in 0.0f64..=1.0, m in 0usize..5, seed in 0u64..50) {
            let spec = BasisSpec::new(
                make_knots(0.0, 1.0, 11, KnotScheme::Jittered { ratio_bound: 2.0, seed }).unwrap(),
                m,
            );
            let v = spec.eval_basis(x, 0).unwrap();
            prop_assert!(v.iter().all(|&b| b >= 0.0));
            prop_assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(v.iter().filter(|&&b| b != 0.0).count() <= m + 1);
        }

        #[test]
        fn derivatives_match_finite_differences(x in 0.02f64..0.98, m in 1usize..5, r in 1usize..4) {
            prop_assume!(r <= m);
            let spec = BasisSpec::uniform(0.0, 1.0, 7, m).unwrap();
            let h = 1e-6;
            // stay away from knots so the finite difference sees one polynomial piece
            let dist = spec.knots().breakpoints().iter().map(|t| (x - t).abs()).fold(f64::INFINITY, f64::min);
            prop_assume!(dist > 1e-3);
            let d = spec.eval_basis(x, r).unwrap();
            let up = spec.eval_basis(x + h, r - 1).unwrap();
            let dn = spec.eval_basis(x - h, r - 1).unwrap();
            let scale = d.iter().fold(1.0f64, |a, v| a.max(v.abs()));
            for i in 0..spec.dim() {
                let fd = (up[i] - dn[i]) / (2.0 * h);
                prop_assert!((fd - d[i]).abs() <= 1e-5 * scale, "i={} fd={} d={}", i, fd, d[i]);
            }
        }

        #[test]
        fn projection_is_first_order_optimal(seed in 0u64..20) {
            let spec = BasisSpec::uniform(0.0, 1.0, 5, 2).unwrap();
            let f = |x: f64| (3.0 * x).sin() + x * x;
            let w = Weight::Constant(1.0);
            let p = best_l2_projection(&spec, &f, &w).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut d = DVector::from_fn(spec.dim(), |_, _| StandardNormal.sample(&mut rng));
            d *= 1e-4 / d.norm();
            let perturbed = SplineFunction::new(spec.clone(), &p.spline.coeffs + d).unwrap();
            let e = perturbed.l2_distance_sq(f, &w, 1e-12).sqrt();
            prop_assert!(e >= p.error * (1.0 - 1e-12));
        }
    }
}
