//! Roughness penalties `J_q(g) = ∫ (g^{(q)})²` and their eigenanalysis.
//!
//! The penalty Gram matrix is integrated exactly: on each knot interval the
//! integrand is a polynomial of degree `2(m − q)`, so `m − q + 1`
//! Gauss–Legendre nodes suffice.
//!
//! For evaluating `J_q` at given coefficients the operator also keeps the
//! factorization `P = Dᵀ G₀ D`, where `D` maps B-spline coefficients to those
//! of the `q`-th derivative (scaled differences) and `G₀` is the L2 Gram
//! matrix of the degree `m − q` splines on the same knots. `cᵀPc` cancels
//! catastrophically for nearly polynomial splines because `P` has entries of
//! order `δ^{1−2q}`; differencing first avoids that.
//!
//! The eigensystem solves `P φ = ρ G φ`. With `G = L Lᵀ` and `G₀ = L₀ L₀ᵀ`
//! the eigenvalues are the squared singular values of `L₀ᵀ D L⁻ᵀ`, which
//! resolves the `q` null eigenvalues far below the rounding level of `P`
//! itself. It is a diagnostic only and never used when fitting.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::basis::{l2_gram, BasisSpec, Weight};
use crate::error::{Error, Result};
use crate::quadrature::GaussLegendre;
use crate::stats;

#[derive(Debug, Clone)]
pub struct PenaltyOperator {
    basis: BasisSpec,
    order: usize,
    gram: DMatrix<f64>,
    /// Row `i` of `D` holds its `q + 1` nonzeros, starting at column `i`.
    diff: Vec<Vec<f64>>,
    low_gram: DMatrix<f64>,
}

impl PenaltyOperator {
    pub fn basis(&self) -> &BasisSpec {
        &self.basis
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    /// Coefficients of the `q`-th derivative in the degree `m − q` basis.
    pub fn derivative_coeffs(&self, c: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.diff.len(),
            self.diff
                .iter()
                .enumerate()
                .map(|(i, row)| row.iter().zip(c.iter().skip(i)).map(|(a, b)| a * b).sum()),
        )
    }

    /// `cᵀ P c`, the roughness of the spline with coefficients `c`.
    pub fn quadratic_form(&self, c: &DVector<f64>) -> f64 {
        let d = self.derivative_coeffs(c);
        let band = self.basis.degree() - self.order;
        let n = d.len();
        let mut s = 0.0;
        for i in 0..n {
            let mut row = self.low_gram[(i, i)] * d[i];
            for j in (i + 1)..=(i + band).min(n - 1) {
                row += 2.0 * self.low_gram[(i, j)] * d[j];
            }
            s += d[i] * row;
        }
        s
    }

    fn diff_matrix(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.diff.len(), self.basis.dim());
        for (i, row) in self.diff.iter().enumerate() {
            for (k, a) in row.iter().enumerate() {
                d[(i, i + k)] = *a;
            }
        }
        d
    }

    /// `P c`, evaluated as `Dᵀ G₀ D c`.
    pub fn apply(&self, c: &DVector<f64>) -> DVector<f64> {
        let g0d = &self.low_gram * self.derivative_coeffs(c);
        let mut out = DVector::zeros(c.len());
        for (i, row) in self.diff.iter().enumerate() {
            for (k, a) in row.iter().enumerate() {
                out[i + k] += a * g0d[i];
            }
        }
        out
    }
}

/// Banded rows of the map from B-spline coefficients to those of the
/// `q`-th derivative: `q` applications of
/// `c′_j = r (c_{j+1} − c_j) / (u_{j+r+1} − u_{j+1})` on degree `r` knots `u`.
fn difference_rows(basis: &BasisSpec, q: usize) -> Vec<Vec<f64>> {
    let m = basis.degree();
    let n = basis.dim();
    let mut knots = Vec::with_capacity(n + m + 1);
    knots.extend(std::iter::repeat_n(basis.knots().lo(), m + 1));
    knots.extend_from_slice(basis.knots().interior());
    knots.extend(std::iter::repeat_n(basis.knots().hi(), m + 1));
    let mut rows: Vec<Vec<f64>> = (0..n).map(|_| vec![1.0]).collect();
    for level in 0..q {
        let r = m - level;
        let u = &knots[level..knots.len() - level];
        rows = (0..rows.len() - 1)
            .map(|j| {
                let scale = r as f64 / (u[j + r + 1] - u[j + 1]);
                let mut row = vec![0.0; rows[j].len() + 1];
                for (k, v) in rows[j].iter().enumerate() {
                    row[k] -= scale * v;
                }
                for (k, v) in rows[j + 1].iter().enumerate() {
                    row[k + 1] += scale * v;
                }
                row
            })
            .collect();
    }
    rows
}

pub fn penalty_gram(basis: &BasisSpec, q: usize) -> Result<PenaltyOperator> {
    let m = basis.degree();
    if q < 1 || q > m {
        return Err(Error::PenaltyOrder { q, m });
    }
    let n = basis.dim();
    let rule = GaussLegendre::new(m - q + 1);
    let mut gram = DMatrix::zeros(n, n);
    let mut buf = vec![0.0; m + 1];
    for j in 0..basis.n_intervals() {
        let (a, b) = basis.interval(j);
        for (x, w) in rule.mapped(a, b) {
            let first = basis.local_in_interval(j, x, q, &mut buf);
            for (r, vr) in buf.iter().enumerate() {
                for (s, vs) in buf.iter().enumerate() {
                    gram[(first + r, first + s)] += w * vr * vs;
                }
            }
        }
    }
    let low_gram = l2_gram(&BasisSpec::new(basis.knots().clone(), m - q), &Weight::Constant(1.0))?;
    Ok(PenaltyOperator {
        basis: basis.clone(),
        order: q,
        gram,
        diff: difference_rows(basis, q),
        low_gram,
    })
}

/// Simultaneous diagonalization of the penalty and the L2 inner product.
#[derive(Debug, Clone, Serialize)]
pub struct EigenSystem {
    /// Nondecreasing eigenvalues; index 0 is the first null-space direction.
    pub rho: Vec<f64>,
    /// Column `ν` holds the coefficients of eigenfunction `φ_ν`.
    #[serde(skip)]
    pub phi: DMatrix<f64>,
}

pub fn eigen_decompose(pen: &PenaltyOperator, gram: &DMatrix<f64>) -> Result<EigenSystem> {
    let n = gram.nrows();
    if gram.ncols() != n || n != pen.basis.dim() {
        return Err(Error::InvalidParameter("Gram matrix does not match the penalty basis".into()));
    }
    let not_pd = || Error::NotPositiveDefinite("L2 Gram matrix");
    let l = gram.clone().cholesky().ok_or_else(not_pd)?.l();
    let l0 = pen
        .low_gram
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite("derivative Gram matrix"))?
        .l();
    // M = L₀ᵀ D L⁻ᵀ, padded with q zero rows so the SVD returns a full V
    let x = l.solve_lower_triangular(&pen.diff_matrix().transpose()).ok_or_else(not_pd)?;
    let mut m = DMatrix::zeros(n, n);
    m.rows_mut(0, n - pen.order).copy_from(&(l0.transpose() * x.transpose()));
    let svd = m.svd(false, true);
    let v_t = svd.v_t.ok_or(Error::NotPositiveDefinite("singular value decomposition"))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]));
    let mut y = DMatrix::zeros(n, n);
    let mut rho = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        rho.push(svd.singular_values[src].powi(2));
        y.set_column(dst, &v_t.row(src).transpose());
    }
    let phi = l.transpose().solve_upper_triangular(&y).ok_or_else(not_pd)?;
    Ok(EigenSystem { rho, phi })
}

impl EigenSystem {
    /// Number of eigenvalues below `rel` times the first eigenvalue outside
    /// the order-`q` null space.
    pub fn null_count(&self, q: usize, rel: f64) -> usize {
        let reference = self.rho.get(q).copied().unwrap_or(f64::INFINITY);
        self.rho.iter().filter(|&&r| r < rel * reference).count()
    }

    /// OLS slope of `log ρ_ν` on `log ν` over `ν ∈ [lo, hi]`.
    pub fn growth_slope(&self, lo: usize, hi: usize) -> f64 {
        let hi = hi.min(self.rho.len() - 1);
        let nu: Vec<f64> = (lo..=hi).map(|v| v as f64).collect();
        let r: Vec<f64> = (lo..=hi).map(|v| self.rho[v]).collect();
        stats::loglog_slope(&nu, &r).0
    }

    /// Slope over the default diagnostic window, which drops the lowest 10%
    /// and the highest 20% of the spectrum.
    pub fn default_growth_slope(&self, q: usize) -> f64 {
        let n = self.rho.len();
        let lo = (n / 10).max(q + 1);
        let hi = n - n / 5 - 1;
        self.growth_slope(lo, hi)
    }
}

/// `Σ_ν 1 / (1 + λ ρ_ν)`.
pub fn trace_sum(sys: &EigenSystem, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidParameter(format!("lambda = {lambda} must be >= 0")));
    }
    Ok(sys.rho.iter().map(|r| 1.0 / (1.0 + lambda * r)).sum())
}
