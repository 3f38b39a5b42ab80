//! Monte Carlo rate experiments.
//!
//! A [`ScenarioSpec`] fixes a model, a truth of declared smoothness `p`, the
//! spline degree `m`, the penalty order `q`, and power-law tuning rules
//! `δ_n = c_δ n^{−a}` and `λ_n = c_λ n^{−b}`. [`run_scenario`] fits every
//! replication along the sample-size grid and regresses the log mean squared
//! error on `log n`; the slope is compared with the rate predicted for the
//! scenario's regime.
//!
//! The seven regimes, with `p′ = min(p, m + 1)`:
//!
//! | case  | orders        | tuning                              | exponent        |
//! |-------|---------------|-------------------------------------|-----------------|
//! | I.1   | `q < p′`      | `λ ≲ δ^{2p′}`                       | `2p′/(2p′+1)`   |
//! | I.2   | `q < p′`      | `δ^{2p′} ≲ λ ≲ δ^{2q}`              | `2p′/(2p′+1)`   |
//! | I.3   | `q < p′`      | `λ ≳ δ^{2q}`                        | `2q/(2q+1)`     |
//! | II.1  | `q = p ≤ m`   | `λ ≲ δ^{2p}`                        | `2p/(2p+1)`     |
//! | II.2  | `q = p ≤ m`   | `λ ≳ δ^{2p}`                        | `2p/(2p+1)`     |
//! | III.1 | `p < q ≤ m`   | `λ ≲ δ^{2q}`                        | `2p/(2p+1)`     |
//! | III.2 | `p < q ≤ m`   | `λ ≳ δ^{2q}`                        | `2p/(2p+1)`     |
//!
//! With power-law rules, `λ ≲ δ^{2r}` holds along any grid exactly when
//! `b ≥ 2r·a`, which is how the regime of a spec is checked.

use std::fmt;
use std::io::Write;
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{l2_gram, make_knots, BasisSpec, KnotScheme, Weight};
use crate::error::{Error, Result};
use crate::models::{spectral_boundary_constraints, zero_integral_constraint, ConstraintSpec, Dataset, Likelihood};
use crate::penalty::{penalty_gram, PenaltyOperator};
use crate::quadrature;
use crate::simulate::{generate, strict_model, DesignDensity, DgpModel, DgpSpec, TruthFunction};
use crate::solver::{fit_likelihood, l2_error, penalty_value, population_fit_gaussian, FitOptions, PenalizedFit};
use crate::stats::{loglog_slope, mean_se};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_TOLERANCE: f64 = 0.15;
pub const DEFAULT_REPLICATIONS: usize = 100;
/// Largest tolerated fraction of non-converged fits.
pub const MAX_FAILURE_RATE: f64 = 0.01;
const EXPONENT_SLACK: f64 = 1e-9;

pub fn default_n_grid() -> Vec<usize> {
    (8..=13).map(|e| 1usize << e).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CaseLabel {
    #[serde(rename = "I.1")]
    I1,
    #[serde(rename = "I.2")]
    I2,
    #[serde(rename = "I.3")]
    I3,
    #[serde(rename = "II.1")]
    II1,
    #[serde(rename = "II.2")]
    II2,
    #[serde(rename = "III.1")]
    III1,
    #[serde(rename = "III.2")]
    III2,
}

impl CaseLabel {
    pub const ALL: [CaseLabel; 7] = [
        CaseLabel::I1,
        CaseLabel::I2,
        CaseLabel::I3,
        CaseLabel::II1,
        CaseLabel::II2,
        CaseLabel::III1,
        CaseLabel::III2,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            CaseLabel::I1 => "I.1",
            CaseLabel::I2 => "I.2",
            CaseLabel::I3 => "I.3",
            CaseLabel::II1 => "II.1",
            CaseLabel::II2 => "II.2",
            CaseLabel::III1 => "III.1",
            CaseLabel::III2 => "III.2",
        }
    }

    fn group(&self) -> u8 {
        match self {
            CaseLabel::I1 | CaseLabel::I2 | CaseLabel::I3 => 1,
            CaseLabel::II1 | CaseLabel::II2 => 2,
            CaseLabel::III1 | CaseLabel::III2 => 3,
        }
    }
}

impl fmt::Display for CaseLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for CaseLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CaseLabel::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown case label `{s}`")))
    }
}

/// `c · n^{−exponent}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerRule {
    pub c: f64,
    pub exponent: f64,
}

impl PowerRule {
    pub fn at(&self, n: usize) -> f64 {
        self.c * (n as f64).powf(-self.exponent)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub case: CaseLabel,
    /// Spline degree.
    pub m: usize,
    /// Penalty order.
    pub q: usize,
    /// Overrides the truth's own smoothness tag.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<u32>,
    #[serde(default = "default_n_grid")]
    pub n_grid: Vec<usize>,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    /// Worker threads; 0 uses all available cores.
    #[serde(default)]
    pub workers: usize,
    #[serde(default)]
    pub design: DesignDensity,
    /// Final check-loss smoothing for quantile fits (0: full homotopy).
    #[serde(default)]
    pub quantile_eps: f64,
    #[serde(deserialize_with = "strict_model")]
    pub model: DgpModel,
    pub truth: TruthFunction,
    /// `δ_n = c · n^{−exponent}`.
    pub knot_rule: PowerRule,
    /// `λ_n = c · n^{−exponent}`.
    pub lambda_rule: PowerRule,
    #[serde(default)]
    pub knot_scheme: KnotScheme,
    #[serde(default)]
    pub fit: FitOptions,
}

fn default_replications() -> usize {
    DEFAULT_REPLICATIONS
}

fn default_tolerance() -> f64 {
    DEFAULT_TOLERANCE
}

/// Basis, penalty and tuning for one grid point.
#[derive(Debug, Clone)]
pub struct GridPoint {
    pub n: usize,
    pub k: usize,
    pub lambda: f64,
    pub basis: BasisSpec,
    pub pen: PenaltyOperator,
    pub constraints: Option<ConstraintSpec>,
}

impl ScenarioSpec {
    /// Parses a TOML config and validates it; syntax and schema errors carry
    /// the offending line.
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: ScenarioSpec = parse_toml(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Declared smoothness of the truth.
    pub fn p(&self) -> u32 {
        self.p.unwrap_or_else(|| self.model.target(&self.truth).smoothness())
    }

    /// `p′ = min(p, m + 1)`.
    pub fn p_prime(&self) -> u32 {
        self.p().min(self.m as u32 + 1)
    }

    /// The function the fits estimate: the truth, centered for densities, or
    /// the AR log spectrum for spectral data.
    pub fn target(&self) -> TruthFunction {
        let t = self.model.target(&self.truth);
        if self.model == DgpModel::LogDensity {
            let (a, b) = self.model.domain();
            let mean = quadrature::adaptive(|x| t.eval(x), a, b, 1e-12) / (b - a);
            t.clone().scaled(t.scale, t.offset - mean)
        } else {
            t
        }
    }

    /// L2 weight: the design density for regression-type data, Lebesgue
    /// measure for densities and spectra.
    pub fn weight(&self) -> Weight {
        match self.model {
            DgpModel::LogDensity | DgpModel::Spectral { .. } => Weight::Constant(1.0),
            _ => self.design.weight(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.m == 0 {
            return bad("spline degree m must be at least 1".into());
        }
        if self.q == 0 || self.q > self.m {
            return Err(Error::PenaltyOrder { q: self.q, m: self.m });
        }
        if self.p() == 0 {
            return bad("declared smoothness p must be at least 1".into());
        }
        if self.n_grid.is_empty() || self.n_grid.windows(2).any(|w| w[0] >= w[1]) || self.n_grid[0] == 0 {
            return bad("n_grid must be a nonempty strictly increasing list of positive sizes".into());
        }
        if self.replications == 0 {
            return bad("replications must be positive".into());
        }
        if !(self.tolerance > 0.0) {
            return bad(format!("tolerance {} must be positive", self.tolerance));
        }
        if !(self.quantile_eps >= 0.0) {
            return bad(format!("quantile_eps {} must be >= 0", self.quantile_eps));
        }
        for (name, rule) in [("knot_rule", self.knot_rule), ("lambda_rule", self.lambda_rule)] {
            if !(rule.c > 0.0 && rule.c.is_finite() && rule.exponent.is_finite()) {
                return bad(format!("{name} needs c > 0 and a finite exponent"));
            }
        }
        if !(self.knot_rule.exponent > 0.0 && self.knot_rule.exponent < 1.0) {
            return bad(format!(
                "knot_rule exponent {} must lie in (0, 1) so that δ_n → 0 and nδ_n → ∞",
                self.knot_rule.exponent
            ));
        }
        if self.lambda_rule.exponent < 0.0 {
            return bad("lambda_rule exponent must be >= 0".into());
        }
        self.fit.validate()?;
        self.probe_dgp().validate()?;
        self.model.model_spec(self.quantile_eps).validate()?;
        self.check_regime()?;
        for &n in &self.n_grid {
            self.knots_for(n)?;
        }
        Ok(())
    }

    fn probe_dgp(&self) -> DgpSpec {
        DgpSpec {
            model: self.model.clone(),
            truth: self.truth.clone(),
            n: self.n_grid[0],
            design: self.design,
            seed: self.seed,
        }
    }

    /// Checks that the tuning exponents place the spec in its labeled regime.
    pub fn check_regime(&self) -> Result<()> {
        let (p, q, m) = (self.p() as usize, self.q, self.m);
        let pp = self.p_prime() as usize;
        let group = if q < pp {
            1
        } else if q == p && p <= m {
            2
        } else {
            3
        };
        if group != self.case.group() {
            let actual = ["I (q < p′)", "II (q = p ≤ m)", "III (p < q ≤ m)"][group as usize - 1];
            return Err(Error::Regime(format!(
                "case {} does not match p = {p}, q = {q}, m = {m}, which is group {actual}",
                self.case
            )));
        }
        let (a, b) = (self.knot_rule.exponent, self.lambda_rule.exponent);
        // λ ≲ δ^{2r}  ⇔  b ≥ 2r·a
        let light = |r: usize| b >= 2.0 * r as f64 * a - EXPONENT_SLACK;
        let heavy = |r: usize| b <= 2.0 * r as f64 * a + EXPONENT_SLACK;
        let (ok, need) = match self.case {
            CaseLabel::I1 => (light(pp), format!("λ ≲ δ^{{2p′}}: b ≥ {}·a", 2 * pp)),
            CaseLabel::I2 => (
                heavy(pp) && light(q),
                format!("δ^{{2p′}} ≲ λ ≲ δ^{{2q}}: {}·a ≤ b ≤ {}·a", 2 * q, 2 * pp),
            ),
            CaseLabel::I3 => (heavy(q), format!("λ ≳ δ^{{2q}}: b ≤ {}·a", 2 * q)),
            CaseLabel::II1 => (light(p), format!("λ ≲ δ^{{2p}}: b ≥ {}·a", 2 * p)),
            CaseLabel::II2 => (heavy(p), format!("λ ≳ δ^{{2p}}: b ≤ {}·a", 2 * p)),
            CaseLabel::III1 => (light(q), format!("λ ≲ δ^{{2q}}: b ≥ {}·a", 2 * q)),
            CaseLabel::III2 => (heavy(q), format!("λ ≳ δ^{{2q}}: b ≤ {}·a", 2 * q)),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Regime(format!(
                "case {} requires {need}, but a = {a}, b = {b}",
                self.case
            )))
        }
    }

    /// Positive exponent `r` of the predicted rate `n^{−r}`.
    pub fn expected_exponent(&self) -> f64 {
        let r = match self.case {
            CaseLabel::I1 | CaseLabel::I2 => self.p_prime() as f64,
            CaseLabel::I3 => self.q as f64,
            _ => self.p() as f64,
        };
        2.0 * r / (2.0 * r + 1.0)
    }

    /// Interior knot count `round(n^a / c_δ) − 1`.
    pub fn knot_count(&self, n: usize) -> Result<usize> {
        let intervals = ((n as f64).powf(self.knot_rule.exponent) / self.knot_rule.c).round();
        if intervals < 1.0 {
            return Err(Error::InvalidParameter(format!("knot rule gives no interval at n = {n}")));
        }
        Ok(intervals as usize - 1)
    }

    fn knots_for(&self, n: usize) -> Result<BasisSpec> {
        let (a, b) = self.model.domain();
        let k = self.knot_count(n)?;
        let basis = BasisSpec::new(make_knots(a, b, k, self.knot_scheme)?, self.m);
        if basis.dim() <= self.constraints_for(&basis)?.map_or(0, |c| c.rank()) {
            return Err(Error::InvalidParameter(format!(
                "k = {k} leaves no free coefficient after constraints at n = {n}"
            )));
        }
        Ok(basis)
    }

    fn constraints_for(&self, basis: &BasisSpec) -> Result<Option<ConstraintSpec>> {
        Ok(match self.model {
            DgpModel::LogDensity => Some(zero_integral_constraint(basis)),
            DgpModel::Spectral { .. } => Some(spectral_boundary_constraints(basis)?),
            _ => None,
        })
    }

    pub fn grid_point(&self, n: usize) -> Result<GridPoint> {
        let basis = self.knots_for(n)?;
        let pen = penalty_gram(&basis, self.q)?;
        let constraints = self.constraints_for(&basis)?;
        Ok(GridPoint {
            n,
            k: basis.knots().interior().len(),
            lambda: self.lambda_rule.at(n),
            basis,
            pen,
            constraints,
        })
    }

    pub fn dgp(&self, n: usize, seed: u64) -> DgpSpec {
        DgpSpec {
            n,
            seed,
            ..self.probe_dgp()
        }
    }

    /// Generates replication `r` at grid point `gp` and fits it.
    pub fn fit_replication(&self, gp: &GridPoint, r: usize) -> Result<(Dataset, PenalizedFit)> {
        let data = generate(&self.dgp(gp.n, replication_seed(self.seed, gp.n, r)))?;
        let lik = Likelihood::new(&self.model.model_spec(self.quantile_eps), &data, &gp.basis)?;
        let fit = fit_likelihood(&lik, &gp.pen, gp.lambda, gp.constraints.as_ref(), &self.fit, None)?;
        Ok((data, fit))
    }
}

pub fn expected_exponent(spec: &ScenarioSpec) -> f64 {
    spec.expected_exponent()
}

/// Seed of replication `r` at sample size `n`. Depends only on the base seed,
/// `n` and `r`, so scenarios sharing a seed see the same data.
pub fn replication_seed(base: u64, n: usize, r: usize) -> u64 {
    base.wrapping_add((n as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(r as u64)
}

pub(crate) fn parse_toml<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| {
        let line = e.span().map_or(0, |s| text[..s.start.min(text.len())].matches('\n').count() + 1);
        Error::Parse {
            line,
            msg: e.message().trim().to_string(),
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub n: usize,
    pub k: usize,
    pub lambda: f64,
    /// Mean and standard error of `‖η̂ − η₀‖²`.
    pub mse_mean: f64,
    pub mse_se: Option<f64>,
    /// Mean and standard error of `λ J_q(η̂)`.
    pub pen_mean: f64,
    pub pen_se: Option<f64>,
    pub converged: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub wall_clock_seconds: f64,
    pub workers: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RateReport {
    pub schema_version: u32,
    pub scenario: ScenarioSpec,
    pub case: CaseLabel,
    pub model: String,
    pub p: u32,
    pub points: Vec<RatePoint>,
    /// OLS slope of `log mse_mean` on `log n`.
    pub slope: f64,
    pub slope_se: Option<f64>,
    /// Predicted slope is `−expected`.
    pub expected: f64,
    pub tolerance: f64,
    /// `None` when the run is too small to judge (fewer than two
    /// replications or three grid points).
    pub pass: Option<bool>,
    pub warnings: Vec<String>,
    pub timing: Timing,
}

impl RateReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: RateReport = serde_json::from_str(text)?;
        if report.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "report schema version {} is not supported (expected {SCHEMA_VERSION})",
                report.schema_version
            )));
        }
        Ok(report)
    }

    /// Copy with the wall-clock and worker fields cleared, for
    /// reproducibility checks.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.scenario.workers = 0;
        r.timing = Timing {
            wall_clock_seconds: 0.0,
            workers: 0,
        };
        r
    }
}

/// Per-replication outcome: `(‖η̂ − η₀‖², λ J_q(η̂))`, or `None` when the
/// fit failed to converge.
type Outcome = Option<(f64, f64)>;

fn build_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

pub fn run_scenario(spec: &ScenarioSpec) -> Result<RateReport> {
    spec.validate()?;
    let start = Instant::now();
    let pool = build_pool(spec.workers)?;
    let target = spec.target();
    let weight = spec.weight();
    let grid: Vec<GridPoint> = spec.n_grid.iter().map(|&n| spec.grid_point(n)).collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|g| (0..spec.replications).map(move |r| (g, r)))
        .collect();
    // collect keeps (n, r) order, so aggregation is independent of scheduling
    let outcomes: Vec<Result<Outcome>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(g, r)| {
                let gp = &grid[g];
                match spec.fit_replication(gp, r) {
                    Ok((_, fit)) if fit.converged => Ok(Some((
                        l2_error(&fit, |x| target.eval(x), &weight),
                        gp.lambda * penalty_value(&fit, &gp.pen),
                    ))),
                    Ok(_) | Err(Error::Divergence) => Ok(None),
                    Err(e) => Err(e),
                }
            })
            .collect()
    });
    let outcomes: Vec<Outcome> = outcomes.into_iter().collect::<Result<_>>()?;

    let total = outcomes.len();
    let failed_total = outcomes.iter().filter(|o| o.is_none()).count();
    if failed_total as f64 > MAX_FAILURE_RATE * total as f64 {
        let per_n: Vec<String> = grid
            .iter()
            .enumerate()
            .map(|(g, gp)| {
                let f = outcomes[g * spec.replications..(g + 1) * spec.replications]
                    .iter()
                    .filter(|o| o.is_none())
                    .count();
                format!("n={}: {f}", gp.n)
            })
            .collect();
        return Err(Error::NonConverged {
            failed: failed_total,
            total,
            diagnostic: format!("non-converged fits per n: {}", per_n.join(", ")),
        });
    }

    let mut points = Vec::with_capacity(grid.len());
    for (g, gp) in grid.iter().enumerate() {
        let chunk = &outcomes[g * spec.replications..(g + 1) * spec.replications];
        let ok: Vec<(f64, f64)> = chunk.iter().flatten().copied().collect();
        let mse: Vec<f64> = ok.iter().map(|o| o.0).collect();
        let pen: Vec<f64> = ok.iter().map(|o| o.1).collect();
        let (mse_mean, mse_se) = mean_se(&mse);
        let (pen_mean, pen_se) = mean_se(&pen);
        points.push(RatePoint {
            n: gp.n,
            k: gp.k,
            lambda: gp.lambda,
            mse_mean,
            mse_se: finite(mse_se),
            pen_mean,
            pen_se: finite(pen_se),
            converged: ok.len(),
            failed: chunk.len() - ok.len(),
        });
    }
    Ok(assemble(spec, points, start.elapsed().as_secs_f64(), pool.current_num_threads()))
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn assemble(spec: &ScenarioSpec, points: Vec<RatePoint>, seconds: f64, workers: usize) -> RateReport {
    let ns: Vec<f64> = points.iter().map(|p| p.n as f64).collect();
    let mse: Vec<f64> = points.iter().map(|p| p.mse_mean).collect();
    let (slope, slope_se) = if points.len() >= 2 {
        loglog_slope(&ns, &mse)
    } else {
        (f64::NAN, f64::NAN)
    };
    let expected = spec.expected_exponent();
    let judged = spec.replications >= 2 && points.len() >= 3;
    let pass = judged.then(|| (slope + expected).abs() <= spec.tolerance);
    let mut warnings = Vec::new();
    if mse.windows(2).any(|w| !(w[1] < w[0])) {
        warnings.push("mean squared error does not decrease strictly along n_grid".to_string());
    }
    for p in &points {
        if p.failed > 0 {
            warnings.push(format!("{} of {} fits at n = {} did not converge", p.failed, p.failed + p.converged, p.n));
        }
    }
    RateReport {
        schema_version: SCHEMA_VERSION,
        scenario: spec.clone(),
        case: spec.case,
        model: spec.model.name().to_string(),
        p: spec.p(),
        points,
        slope,
        slope_se: finite(slope_se),
        expected,
        tolerance: spec.tolerance,
        pass,
        warnings,
        timing: Timing {
            wall_clock_seconds: seconds,
            workers,
        },
    }
}

pub const SUMMARY_HEADER: [&str; 9] = [
    "case", "n", "mse_mean", "mse_se", "pen_mean", "slope", "slope_se", "expected", "pass",
];

/// Writes one summary row per grid point of every report.
pub fn write_summary<W: Write>(reports: &[RateReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(SUMMARY_HEADER).map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    for r in reports {
        for p in &r.points {
            w.write_record([
                r.case.to_string(),
                p.n.to_string(),
                p.mse_mean.to_string(),
                opt(p.mse_se),
                p.pen_mean.to_string(),
                r.slope.to_string(),
                opt(r.slope_se),
                r.expected.to_string(),
                r.pass.map_or(String::new(), |b| b.to_string()),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionRow {
    pub n: usize,
    pub lambda: f64,
    /// Mean of `‖η̂ − η̄‖²`.
    pub estimation_mean: f64,
    /// `‖η̄ − η₀‖²`.
    pub approximation: f64,
    /// Mean of `‖η̂ − η₀‖²`.
    pub total_mean: f64,
    /// Range over replications of `(‖η̂ − η̄‖² + ‖η̄ − η₀‖²) / ‖η̂ − η₀‖²`.
    pub ratio_min: f64,
    pub ratio_max: f64,
}

/// Splits the error of every Gaussian replication through the population
/// penalized fit `η̄`.
pub fn decomposition_report(spec: &ScenarioSpec) -> Result<Vec<DecompositionRow>> {
    if !matches!(spec.model, DgpModel::Gaussian { .. }) {
        return Err(Error::InvalidParameter(format!(
            "decomposition needs the Gaussian model, got {}",
            spec.model.name()
        )));
    }
    spec.validate()?;
    let pool = build_pool(spec.workers)?;
    let weight = spec.weight();
    let truth = spec.target();
    spec.n_grid
        .iter()
        .map(|&n| {
            let gp = spec.grid_point(n)?;
            let gram = l2_gram(&gp.basis, &weight)?;
            let pop = population_fit_gaussian(|x| truth.eval(x), &gp.basis, &gp.pen, gp.lambda, &weight)?;
            let approximation = l2_error(&pop, |x| truth.eval(x), &weight);
            let reps: Vec<(f64, f64)> = pool.install(|| {
                (0..spec.replications)
                    .into_par_iter()
                    .map(|r| {
                        let (_, fit) = spec.fit_replication(&gp, r)?;
                        let d: DVector<f64> = &fit.coeffs - &pop.coeffs;
                        let est = (d.transpose() * &gram * &d)[(0, 0)];
                        Ok((est, l2_error(&fit, |x| truth.eval(x), &weight)))
                    })
                    .collect::<Result<_>>()
            })?;
            let ratios: Vec<f64> = reps.iter().map(|(e, t)| (e + approximation) / t).collect();
            Ok(DecompositionRow {
                n,
                lambda: gp.lambda,
                estimation_mean: reps.iter().map(|r| r.0).sum::<f64>() / reps.len() as f64,
                approximation,
                total_mean: reps.iter().map(|r| r.1).sum::<f64>() / reps.len() as f64,
                ratio_min: ratios.iter().copied().fold(f64::INFINITY, f64::min),
                ratio_max: ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::TruthKind;

    const II2: &str = r#"
case = "II.2"
m = 3
q = 2
replications = 4
seed = 11
n_grid = [256, 512, 1024]

[model]
kind = "gaussian"
sigma = 0.5

[truth]
kind = "power_kink"
s = 2.5
c = 0.5

[knot_rule]
c = 1.0
exponent = 0.5

[lambda_rule]
c = 0.5
exponent = 0.8
"#;

    fn spec_with(case: &str, m: usize, q: usize, truth: TruthFunction, a: f64, b: f64) -> ScenarioSpec {
        let mut s = ScenarioSpec::from_toml(II2).unwrap();
        s.case = case.parse().unwrap();
        s.m = m;
        s.q = q;
        s.truth = truth;
        s.knot_rule.exponent = a;
        s.lambda_rule.exponent = b;
        s
    }

    #[test]
    fn expected_exponents() {
        let kink = TruthFunction::power_kink(2.5, 0.5);
        let s = spec_with("II.2", 3, 2, kink.clone(), 0.5, 0.8);
        assert!((s.expected_exponent() - 0.8).abs() < 1e-15);
        let s = spec_with("I.3", 3, 1, TruthFunction::smooth_sin(), 0.5, 2.0 / 3.0);
        assert!((s.expected_exponent() - 2.0 / 3.0).abs() < 1e-15);
        let s = spec_with("I.1", 1, 1, TruthFunction::smooth_sin(), 0.2, 0.9);
        assert_eq!(s.p_prime(), 2);
        assert!((expected_exponent(&s) - 0.8).abs() < 1e-15);
        let s = spec_with("III.2", 3, 3, kink, 0.2, 1.2);
        assert!((s.expected_exponent() - 0.8).abs() < 1e-15);
        s.validate().unwrap();
    }

    #[test]
    fn regime_checks() {
        let kink = TruthFunction::power_kink(2.5, 0.5);
        let sin = TruthFunction::smooth_sin();
        // (case, m, q, truth, a, b, valid)
        let cases = [
            ("II.2", 3, 2, &kink, 0.5, 0.8, true),
            ("II.1", 3, 2, &kink, 0.2, 0.8, true),
            ("II.1", 3, 2, &kink, 0.5, 0.8, false),
            ("I.3", 3, 1, &kink, 0.5, 2.0 / 3.0, true),
            ("I.3", 3, 1, &kink, 0.2, 2.0 / 3.0, false),
            ("I.2", 3, 1, &sin, 0.2, 0.5, true),
            // λ much heavier than δ^{2q}
            ("I.2", 3, 1, &sin, 0.5, 0.5, false),
            ("I.1", 3, 1, &sin, 0.2, 1.6, true),
            ("III.1", 3, 3, &kink, 0.2, 1.3, true),
            ("III.2", 3, 3, &kink, 0.2, 1.3, false),
            // wrong group: q = p labeled as group I
            ("I.3", 3, 2, &kink, 0.5, 0.8, false),
            ("II.2", 3, 2, &sin, 0.5, 0.8, false),
        ];
        for (case, m, q, t, a, b, valid) in cases {
            let r = spec_with(case, m, q, t.clone(), a, b).validate();
            assert_eq!(r.is_ok(), valid, "{case} a={a} b={b}: {r:?}");
            if !valid {
                assert!(matches!(r, Err(Error::Regime(_))), "{r:?}");
            }
        }
    }

    #[test]
    fn config_errors_carry_lines() {
        let bad = II2.replace("sigma = 0.5", "sigma = \"half\"");
        match ScenarioSpec::from_toml(&bad) {
            // anchored at the table holding the bad value
            Err(Error::Parse { line, .. }) => assert_eq!(line, 9),
            other => panic!("{other:?}"),
        }
        let typo = II2.replace("seed = 11", "sead = 11");
        assert!(matches!(ScenarioSpec::from_toml(&typo), Err(Error::Parse { line: 6, .. })));
        let extra = II2.replace("exponent = 0.8", "exponent = 0.8\nslope = 2");
        assert!(matches!(ScenarioSpec::from_toml(&extra), Err(Error::Parse { .. })));
        let q_big = II2.replace("q = 2", "q = 4");
        assert!(matches!(ScenarioSpec::from_toml(&q_big), Err(Error::PenaltyOrder { .. })));
    }

    #[test]
    fn knot_rule_rounding() {
        let s = ScenarioSpec::from_toml(II2).unwrap();
        assert_eq!(s.knot_count(256).unwrap(), 15);
        assert_eq!(s.knot_count(8192).unwrap(), 90);
        let gp = s.grid_point(1024).unwrap();
        assert_eq!((gp.k, gp.basis.dim()), (31, 35));
        assert!((gp.lambda - 0.5 * 1024f64.powf(-0.8)).abs() < 1e-15);
    }

    #[test]
    fn degenerate_run_leaves_pass_undefined() {
        let mut s = ScenarioSpec::from_toml(II2).unwrap();
        s.replications = 1;
        s.n_grid = vec![256, 512];
        let r = run_scenario(&s).unwrap();
        assert_eq!(r.points.len(), 2);
        assert!(r.pass.is_none());
        assert!(r.slope.is_finite() && r.slope_se.is_none());
        assert!(r.points[0].mse_se.is_none());
    }

    #[test]
    fn reports_are_reproducible_and_roundtrip() {
        let mut s = ScenarioSpec::from_toml(II2).unwrap();
        s.workers = 3;
        let a = run_scenario(&s).unwrap();
        s.workers = 1;
        let b = run_scenario(&s).unwrap();
        let ja = a.without_timing().to_json().unwrap();
        assert_eq!(ja, b.without_timing().to_json().unwrap());
        assert!(a.pass.is_some());
        let back = RateReport::from_json(&a.to_json().unwrap()).unwrap();
        assert_eq!(back.to_json().unwrap(), a.to_json().unwrap());
        assert_eq!(back.points, a.points);
        let mut csv = Vec::new();
        write_summary(&[a], &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), SUMMARY_HEADER.join(","));
        assert_eq!(lines.count(), 3);
    }

    #[test]
    fn config_roundtrip() {
        let s = ScenarioSpec::from_toml(II2).unwrap();
        let again = ScenarioSpec::from_toml(&s.to_toml().unwrap()).unwrap();
        assert_eq!(serde_json::to_value(&s).unwrap(), serde_json::to_value(&again).unwrap());
    }

    #[test]
    fn decomposition_limits() {
        // spline truth inside every grid space, λ = 0
        let coarse = BasisSpec::uniform(0.0, 1.0, 3, 3).unwrap();
        let truth = TruthFunction::new(TruthKind::SplineTruth {
            basis: coarse,
            coeffs: vec![0.3, -1.0, 0.5, 1.2, 0.0, -0.4, 0.8],
        });
        let mut s = ScenarioSpec::from_toml(II2).unwrap();
        s.truth = truth;
        s.p = Some(2);
        s.lambda_rule.c = 1e-300;
        s.n_grid = vec![255, 1023];
        s.replications = 3;
        let rows = decomposition_report(&s).unwrap();
        for r in &rows {
            assert!(r.approximation < 1e-10, "{r:?}");
            assert!((r.ratio_min - 1.0).abs() < 1e-6 && (r.ratio_max - 1.0).abs() < 1e-6);
        }
        // a heavy penalty makes the approximation part dominate
        let mut heavy = ScenarioSpec::from_toml(II2).unwrap();
        heavy.lambda_rule = PowerRule { c: 10.0, exponent: 0.0 };
        heavy.truth = TruthFunction::power_kink(2.5, 0.5).scaled(10.0, 0.0);
        heavy.replications = 3;
        for r in decomposition_report(&heavy).unwrap() {
            assert!(r.approximation > 10.0 * r.estimation_mean, "{r:?}");
            assert!(r.ratio_min > 0.5 && r.ratio_max < 2.0);
        }
        let mut logistic = ScenarioSpec::from_toml(II2).unwrap();
        logistic.model = DgpModel::Logistic;
        assert!(decomposition_report(&logistic).is_err());
    }
}
