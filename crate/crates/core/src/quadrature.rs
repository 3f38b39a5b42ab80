//! Gauss–Legendre rules and adaptive interval subdivision.
//!
//! Piecewise-polynomial integrands (Gram and penalty entries) are integrated
//! exactly with a fixed rule per knot interval. Everything else goes through
//! [`adaptive`] / [`adaptive_panels`], which bisect an interval until the
//! rule and its two-panel refinement agree.

use std::f64::consts::PI;

/// Maximum bisection depth for adaptive integration.
pub const MAX_DEPTH: usize = 12;
/// Default relative tolerance for adaptive integration.
pub const DEFAULT_RTOL: f64 = 1e-10;

/// Points per panel used by the adaptive routines.
const ADAPTIVE_POINTS: usize = 10;

/// An `n`-point Gauss–Legendre rule on [-1, 1].
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    /// Builds the rule by Newton iteration on P_n from the Chebyshev-like
    /// initial guesses; nodes are accurate to machine precision for n ≤ 200.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "Gauss-Legendre rule needs at least one node");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let half = n.div_ceil(2);
        for i in 0..half {
            let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre_with_derivative(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre_with_derivative(n, x);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        Self { nodes, weights }
    }

    /// Rule exact for polynomials of the given degree.
    pub fn exact_for_degree(degree: usize) -> Self {
        Self::new(degree / 2 + 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nodes and weights mapped onto [a, b].
    pub fn mapped(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(move |(&t, &w)| (mid + half * t, half * w))
    }

    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        self.mapped(a, b).map(|(x, w)| w * f(x)).sum()
    }
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Integrates `f` over [a, b] by recursive bisection until the panel
/// estimate agrees with the sum over its halves to `rtol` (relative to the
/// running magnitude of the integral) or `MAX_DEPTH` is reached.
pub fn adaptive<F: FnMut(f64) -> f64>(f: F, a: f64, b: f64, rtol: f64) -> f64 {
    let rule = GaussLegendre::new(ADAPTIVE_POINTS);
    adaptive_with(&rule, f, a, b, rtol)
}

pub fn adaptive_with<F: FnMut(f64) -> f64>(
    rule: &GaussLegendre,
    mut f: F,
    a: f64,
    b: f64,
    rtol: f64,
) -> f64 {
    if a == b {
        return 0.0;
    }
    let whole = rule.integrate(a, b, &mut f);
    let mut scale = whole.abs();
    recurse(rule, &mut f, a, b, whole, rtol, 0, &mut scale)
}

#[allow(clippy::too_many_arguments)]
fn recurse<F: FnMut(f64) -> f64>(
    rule: &GaussLegendre,
    f: &mut F,
    a: f64,
    b: f64,
    whole: f64,
    rtol: f64,
    depth: usize,
    scale: &mut f64,
) -> f64 {
    let mid = 0.5 * (a + b);
    let left = rule.integrate(a, mid, &mut *f);
    let right = rule.integrate(mid, b, &mut *f);
    let refined = left + right;
    *scale = scale.max(refined.abs());
    let tol = rtol * scale.max(f64::MIN_POSITIVE);
    if depth >= MAX_DEPTH || (refined - whole).abs() <= tol {
        return refined;
    }
    recurse(rule, f, a, mid, left, rtol, depth + 1, scale)
        + recurse(rule, f, mid, b, right, rtol, depth + 1, scale)
}

/// Returns a partition of [a, b] on which `f` is resolved by the adaptive
/// rule. Reusing the partition lets vector-valued integrals (moments of a
/// density against a basis) share one subdivision.
pub fn adaptive_panels<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, rtol: f64) -> Vec<(f64, f64)> {
    let rule = GaussLegendre::new(ADAPTIVE_POINTS);
    let whole = rule.integrate(a, b, &mut f);
    let mut scale = whole.abs();
    let mut out = Vec::new();
    panels_rec(&rule, &mut f, a, b, whole, rtol, 0, &mut scale, &mut out);
    out
}

#[allow(clippy::too_many_arguments)]
fn panels_rec<F: FnMut(f64) -> f64>(
    rule: &GaussLegendre,
    f: &mut F,
    a: f64,
    b: f64,
    whole: f64,
    rtol: f64,
    depth: usize,
    scale: &mut f64,
    out: &mut Vec<(f64, f64)>,
) {
    let mid = 0.5 * (a + b);
    let left = rule.integrate(a, mid, &mut *f);
    let right = rule.integrate(mid, b, &mut *f);
    *scale = scale.max((left + right).abs());
    let tol = rtol * scale.max(f64::MIN_POSITIVE);
    if depth >= MAX_DEPTH || (left + right - whole).abs() <= tol {
        out.push((a, mid));
        out.push((mid, b));
        return;
    }
    panels_rec(rule, f, a, mid, left, rtol, depth + 1, scale, out);
    panels_rec(rule, f, mid, b, right, rtol, depth + 1, scale, out);
}

/// The rule used on each panel returned by [`adaptive_panels`].
pub fn panel_rule() -> GaussLegendre {
    GaussLegendre::new(ADAPTIVE_POINTS)
}

/// Vector-valued version of [`adaptive`]: `f(x, out)` fills `out` (length
/// `dim`); convergence is judged on the largest component change relative to
/// the largest component magnitude.
pub fn adaptive_vec<F: FnMut(f64, &mut [f64])>(mut f: F, dim: usize, a: f64, b: f64, rtol: f64) -> Vec<f64> {
    let rule = GaussLegendre::new(ADAPTIVE_POINTS);
    let mut buf = vec![0.0; dim];
    let whole = rule_vec(&rule, &mut f, &mut buf, a, b);
    let mut scale = max_abs(&whole);
    vec_rec(&rule, &mut f, &mut buf, a, b, whole, rtol, 0, &mut scale)
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn rule_vec<F: FnMut(f64, &mut [f64])>(
    rule: &GaussLegendre,
    f: &mut F,
    buf: &mut [f64],
    a: f64,
    b: f64,
) -> Vec<f64> {
    let mut acc = vec![0.0; buf.len()];
    for (x, w) in rule.mapped(a, b) {
        buf.iter_mut().for_each(|v| *v = 0.0);
        f(x, buf);
        for (s, v) in acc.iter_mut().zip(buf.iter()) {
            *s += w * v;
        }
    }
    acc
}

#[allow(clippy::too_many_arguments)]
fn vec_rec<F: FnMut(f64, &mut [f64])>(
    rule: &GaussLegendre,
    f: &mut F,
    buf: &mut [f64],
    a: f64,
    b: f64,
    whole: Vec<f64>,
    rtol: f64,
    depth: usize,
    scale: &mut f64,
) -> Vec<f64> {
    let mid = 0.5 * (a + b);
    let left = rule_vec(rule, f, buf, a, mid);
    let right = rule_vec(rule, f, buf, mid, b);
    let refined: Vec<f64> = left.iter().zip(&right).map(|(l, r)| l + r).collect();
    *scale = scale.max(max_abs(&refined));
    let diff = refined
        .iter()
        .zip(&whole)
        .fold(0.0f64, |m, (r, w)| m.max((r - w).abs()));
    if depth >= MAX_DEPTH || diff <= rtol * scale.max(f64::MIN_POSITIVE) {
        return refined;
    }
    let l = vec_rec(rule, f, buf, a, mid, left, rtol, depth + 1, scale);
    let r = vec_rec(rule, f, buf, mid, b, right, rtol, depth + 1, scale);
    l.iter().zip(&r).map(|(x, y)| x + y).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_two() {
        for n in 1..40 {
            let r = GaussLegendre::new(n);
            let s: f64 = r.weights.iter().sum();
            assert!((s - 2.0).abs() < 1e-13, "n={n} sum={s}");
        }
    }

    #[test]
    fn exact_on_monomials() {
        for n in 1..12 {
            let r = GaussLegendre::new(n);
            for d in 0..(2 * n) {
                let got = r.integrate(0.0, 1.0, |x| x.powi(d as i32));
                let want = 1.0 / (d as f64 + 1.0);
                assert!((got - want).abs() < 1e-13, "n={n} d={d}");
            }
        }
    }

    #[test]
    fn adaptive_handles_singular_derivative() {
        let got = adaptive(|x: f64| x.sqrt(), 0.0, 1.0, 1e-10);
        assert!((got - 2.0 / 3.0).abs() < 1e-9);
        let got = adaptive(|x: f64| (x - 0.3).abs().powf(2.5), 0.0, 1.0, 1e-12);
        let want = (0.3f64.powf(3.5) + 0.7f64.powf(3.5)) / 3.5;
        assert!((got - want).abs() < 1e-11);
    }

    #[test]
    fn panels_cover_interval() {
        let p = adaptive_panels(|x: f64| (10.0 * x).exp(), 0.0, 2.0, 1e-12);
        assert_eq!(p.first().unwrap().0, 0.0);
        assert_eq!(p.last().unwrap().1, 2.0);
        for w in p.windows(2) {
            assert_eq!(w[0].1, w[1].0);
        }
        let rule = panel_rule();
        let s: f64 = p.iter().map(|&(a, b)| rule.integrate(a, b, |x| (10.0 * x).exp())).sum();
        let want = ((20.0f64).exp() - 1.0) / 10.0;
        assert!(((s - want) / want).abs() < 1e-11);
    }
}
