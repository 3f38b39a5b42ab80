//! Data-generating processes with known truth functions.
//!
//! Every generator is a pure function of its [`DgpSpec`]: the seed feeds a
//! ChaCha8 stream and draws happen in a fixed order, so the same spec always
//! yields a bitwise-identical [`Dataset`].

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson, StudentT};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as NormalDist, StudentsT};

use crate::basis::{BasisSpec, SplineFunction};
use crate::error::{Error, Result};
use crate::models::{Dataset, ExpFamily, ModelSpec};
use crate::quadrature::GaussLegendre;

/// Smoothness tag for infinitely differentiable truths.
pub const SMOOTH_P: u32 = 1000;

#[derive(Clone)]
pub struct CustomTruth {
    pub f: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub p: u32,
}

impl fmt::Debug for CustomTruth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CustomTruth(p = {})", self.p)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TruthKind {
    /// `sin(2πx)`.
    SmoothSin,
    /// `|x − c|^s`.
    PowerKink { s: f64, c: f64 },
    /// A spline with the given basis and coefficients.
    SplineTruth { basis: BasisSpec, coeffs: Vec<f64> },
    /// Log spectral density of an AR process with innovation s.d. `sigma`.
    ArLogSpectrum { ar: Vec<f64>, sigma: f64 },
    #[serde(skip)]
    Custom(CustomTruth),
}

/// `offset + scale · base(x)` for one of the [`TruthKind`] shapes.
///
/// Serialized as the kind's table with optional `scale` and `offset` keys
/// alongside; unknown keys are rejected.
#[derive(Debug, Clone)]
pub struct TruthFunction {
    pub kind: TruthKind,
    pub scale: f64,
    pub offset: f64,
}

impl Serialize for TruthFunction {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Flat<'a> {
            #[serde(flatten)]
            kind: &'a TruthKind,
            scale: f64,
            offset: f64,
        }
        Flat {
            kind: &self.kind,
            scale: self.scale,
            offset: self.offset,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for TruthFunction {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let mut map = serde_json::Map::<String, serde_json::Value>::deserialize(d)?;
        let mut take = |key: &str, default: f64| match map.remove(key) {
            None => Ok(default),
            Some(v) => v
                .as_f64()
                .ok_or_else(|| D::Error::custom(format!("`{key}` must be a number"))),
        };
        let scale = take("scale", 1.0)?;
        let offset = take("offset", 0.0)?;
        let kind = from_map_strict(map).map_err(D::Error::custom)?;
        Ok(Self { kind, scale, offset })
    }
}

fn one() -> f64 {
    1.0
}

impl TruthFunction {
    pub fn new(kind: TruthKind) -> Self {
        Self {
            kind,
            scale: 1.0,
            offset: 0.0,
        }
    }

    pub fn smooth_sin() -> Self {
        Self::new(TruthKind::SmoothSin)
    }

    pub fn power_kink(s: f64, c: f64) -> Self {
        Self::new(TruthKind::PowerKink { s, c })
    }

    pub fn scaled(mut self, scale: f64, offset: f64) -> Self {
        self.scale = scale;
        self.offset = offset;
        self
    }

    pub fn eval(&self, x: f64) -> f64 {
        let base = match &self.kind {
            TruthKind::SmoothSin => (2.0 * PI * x).sin(),
            TruthKind::PowerKink { s, c } => (x - c).abs().powf(*s),
            TruthKind::SplineTruth { basis, coeffs } => {
                let spline = SplineFunction {
                    basis: basis.clone(),
                    coeffs: nalgebra::DVector::from_column_slice(coeffs),
                };
                spline.eval(x).unwrap_or(f64::NAN)
            }
            TruthKind::ArLogSpectrum { ar, sigma } => ar_log_spectrum(ar, *sigma, x),
            TruthKind::Custom(c) => (c.f)(x),
        };
        self.offset + self.scale * base
    }

    /// Declared Sobolev order: the largest integer `p` with `J_p` finite.
    /// For `|x − c|^s` that is the largest integer below `s + 1/2`.
    pub fn smoothness(&self) -> u32 {
        match &self.kind {
            TruthKind::SmoothSin | TruthKind::ArLogSpectrum { .. } => SMOOTH_P,
            TruthKind::PowerKink { s, .. } => ((s + 0.5).ceil() - 1.0).max(0.0) as u32,
            TruthKind::SplineTruth { basis, .. } => basis.degree() as u32,
            TruthKind::Custom(c) => c.p,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            TruthKind::PowerKink { s, c } if !(*s > 0.0) || !c.is_finite() => {
                Err(Error::InvalidParameter(format!("power kink needs s > 0, got s = {s}")))
            }
            TruthKind::SplineTruth { basis, coeffs } if coeffs.len() != basis.dim() => {
                Err(Error::CoefficientLength {
                    got: coeffs.len(),
                    want: basis.dim(),
                })
            }
            TruthKind::ArLogSpectrum { ar, sigma } => check_ar(ar, *sigma),
            _ if !(self.scale.is_finite() && self.offset.is_finite()) => {
                Err(Error::InvalidParameter("truth scale and offset must be finite".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Deserializes a tagged enum from a map, rejecting keys the chosen variant
/// does not use (serde skips that check for unit variants).
fn from_map_strict<T>(map: serde_json::Map<String, serde_json::Value>) -> std::result::Result<T, String>
where
    T: Serialize + serde::de::DeserializeOwned,
{
    let value = T::deserialize(serde_json::Value::Object(map.clone())).map_err(|e| e.to_string())?;
    if let Ok(serde_json::Value::Object(known)) = serde_json::to_value(&value) {
        if let Some(extra) = map.keys().find(|k| !known.contains_key(*k)) {
            return Err(format!("unknown field `{extra}`"));
        }
    }
    Ok(value)
}

/// `deserialize_with` adapter for [`DgpModel`] fields.
pub(crate) fn strict_model<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<DgpModel, D::Error> {
    use serde::de::Error as _;
    let map = serde_json::Map::<String, serde_json::Value>::deserialize(d)?;
    from_map_strict(map).map_err(D::Error::custom)
}

pub fn truth_eval(t: &TruthFunction, x: f64) -> f64 {
    t.eval(x)
}

pub fn truth_smoothness(t: &TruthFunction) -> u32 {
    t.smoothness()
}

/// `log(σ²/2π) − log|1 − Σ_j φ_j e^{−ijλ}|²`.
pub fn ar_log_spectrum(ar: &[f64], sigma: f64, lambda: f64) -> f64 {
    let (mut re, mut im) = (1.0, 0.0);
    for (j, phi) in ar.iter().enumerate() {
        let a = (j + 1) as f64 * lambda;
        re -= phi * a.cos();
        im += phi * a.sin();
    }
    (sigma * sigma / (2.0 * PI)).ln() - (re * re + im * im).ln()
}

fn check_ar(ar: &[f64], sigma: f64) -> Result<()> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidParameter(format!("innovation s.d. {sigma} must be > 0")));
    }
    let stationary = match ar {
        [p1] => p1.abs() < 1.0,
        [p1, p2] => p2.abs() < 1.0 && p1 + p2 < 1.0 && p2 - p1 < 1.0,
        _ => {
            return Err(Error::InvalidParameter(format!(
                "only AR(1) and AR(2) are supported, got order {}",
                ar.len()
            )))
        }
    };
    if stationary {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "AR coefficients {ar:?} are not stationary (characteristic root inside the unit circle)"
        )))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignDensity {
    #[default]
    Uniform,
    /// Density proportional to `1 + x/2` on [0, 1].
    Linear,
}

impl DesignDensity {
    pub fn weight(&self) -> crate::basis::Weight {
        match self {
            DesignDensity::Uniform => crate::basis::Weight::Constant(1.0),
            DesignDensity::Linear => crate::basis::Weight::linear_density(),
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        let u: f64 = rng.gen();
        match self {
            DesignDensity::Uniform => u,
            // F(x) = (x + x²/4) / 1.25
            DesignDensity::Linear => 2.0 * ((1.0 + 1.25 * u).sqrt() - 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantileNoise {
    #[default]
    Gaussian,
    StudentT3,
}

impl QuantileNoise {
    pub fn quantile(&self, tau: f64) -> f64 {
        match self {
            QuantileNoise::Gaussian => NormalDist::new(0.0, 1.0).unwrap().inverse_cdf(tau),
            QuantileNoise::StudentT3 => StudentsT::new(0.0, 1.0, 3.0).unwrap().inverse_cdf(tau),
        }
    }
}

/// Model-specific generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DgpModel {
    Gaussian {
        sigma: f64,
    },
    Logistic,
    Poisson,
    LogDensity,
    Hazard {
        #[serde(default = "default_censor")]
        censor_bound: f64,
    },
    /// `Y = η₀(X) + scale · (e − q_τ(e))`, so the conditional τ-quantile is η₀.
    Quantile {
        tau: f64,
        #[serde(default)]
        noise: QuantileNoise,
        #[serde(default = "one")]
        scale: f64,
    },
    /// AR series of length `n`; the truth is the AR log spectral density.
    Spectral {
        ar: Vec<f64>,
        #[serde(default = "one")]
        sigma: f64,
    },
}

/// Censoring bound for hazard data when none is given.
pub const DEFAULT_CENSOR_BOUND: f64 = 2.0;

fn default_censor() -> f64 {
    DEFAULT_CENSOR_BOUND
}

impl DgpModel {
    /// Likelihood used to fit data from this process. `quantile_eps` sets the
    /// check-loss smoothing (0 runs the full homotopy).
    pub fn model_spec(&self, quantile_eps: f64) -> ModelSpec {
        match self {
            DgpModel::Gaussian { .. } => ModelSpec::Gaussian,
            DgpModel::Logistic => ModelSpec::ExpFamily(ExpFamily::logistic()),
            DgpModel::Poisson => ModelSpec::ExpFamily(ExpFamily::poisson()),
            DgpModel::LogDensity => ModelSpec::LogDensity,
            DgpModel::Hazard { .. } => ModelSpec::Hazard,
            DgpModel::Quantile { tau, .. } => ModelSpec::Quantile {
                tau: *tau,
                eps: quantile_eps,
            },
            DgpModel::Spectral { .. } => ModelSpec::Spectral,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DgpModel::Gaussian { .. } => "gaussian",
            DgpModel::Logistic => "logistic",
            DgpModel::Poisson => "poisson",
            DgpModel::LogDensity => "log_density",
            DgpModel::Hazard { .. } => "hazard",
            DgpModel::Quantile { .. } => "quantile",
            DgpModel::Spectral { .. } => "spectral",
        }
    }

    /// Domain of the estimated function.
    pub fn domain(&self) -> (f64, f64) {
        match self {
            DgpModel::Spectral { .. } => (0.0, PI),
            _ => (0.0, 1.0),
        }
    }

    /// The function the estimator targets, given the declared truth.
    pub fn target(&self, truth: &TruthFunction) -> TruthFunction {
        match self {
            DgpModel::Spectral { ar, sigma } => TruthFunction::new(TruthKind::ArLogSpectrum {
                ar: ar.clone(),
                sigma: *sigma,
            }),
            _ => truth.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpSpec {
    #[serde(deserialize_with = "strict_model")]
    pub model: DgpModel,
    pub truth: TruthFunction,
    /// Sample size, or series length for the spectral process.
    pub n: usize,
    #[serde(default)]
    pub design: DesignDensity,
    pub seed: u64,
}

impl DgpSpec {
    /// Parses a TOML description; errors carry the offending line.
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: DgpSpec = crate::harness::parse_toml(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.truth.validate()?;
        if self.n == 0 {
            return Err(Error::InvalidParameter("sample size must be positive".into()));
        }
        match &self.model {
            DgpModel::Gaussian { sigma } if !(*sigma >= 0.0) => {
                Err(Error::InvalidParameter(format!("sigma = {sigma} must be >= 0")))
            }
            DgpModel::Hazard { censor_bound } if !(*censor_bound > 0.0) => {
                Err(Error::InvalidParameter(format!("censor bound {censor_bound} must be > 0")))
            }
            DgpModel::Quantile { tau, scale, .. } if !(*tau > 0.0 && *tau < 1.0) || !(*scale > 0.0) => {
                Err(Error::InvalidParameter(format!("quantile needs 0 < tau < 1 and scale > 0, got {tau}, {scale}")))
            }
            DgpModel::Spectral { ar, sigma } => {
                check_ar(ar, *sigma)?;
                if self.n < 4 {
                    return Err(Error::InvalidParameter("series length must be at least 4".into()));
                }
                if self.design != DesignDensity::Uniform {
                    return Err(Error::InvalidParameter("spectral data have no design density".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

pub fn generate(dgp: &DgpSpec) -> Result<Dataset> {
    dgp.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(dgp.seed);
    let n = dgp.n;
    let truth = &dgp.truth;
    let draw_x = |rng: &mut ChaCha8Rng| dgp.design.sample(rng);
    match &dgp.model {
        DgpModel::Gaussian { sigma } => {
            let mut x = Vec::with_capacity(n);
            let mut y = Vec::with_capacity(n);
            for _ in 0..n {
                let xi = draw_x(&mut rng);
                let e: f64 = rng.sample(rand_distr::StandardNormal);
                x.push(xi);
                y.push(truth.eval(xi) + sigma * e);
            }
            Ok(Dataset::XY { x, y })
        }
        DgpModel::Logistic => {
            let mut x = Vec::with_capacity(n);
            let mut y = Vec::with_capacity(n);
            for _ in 0..n {
                let xi = draw_x(&mut rng);
                let p = 1.0 / (1.0 + (-truth.eval(xi)).exp());
                x.push(xi);
                y.push(if rng.gen::<f64>() < p { 1.0 } else { 0.0 });
            }
            Ok(Dataset::XY { x, y })
        }
        DgpModel::Poisson => {
            let mut x = Vec::with_capacity(n);
            let mut y = Vec::with_capacity(n);
            for _ in 0..n {
                let xi = draw_x(&mut rng);
                let mean = truth.eval(xi).exp();
                let d = Poisson::new(mean)
                    .map_err(|e| Error::InvalidParameter(format!("Poisson mean {mean}: {e}")))?;
                x.push(xi);
                y.push(d.sample(&mut rng));
            }
            Ok(Dataset::XY { x, y })
        }
        DgpModel::LogDensity => {
            if dgp.design != DesignDensity::Uniform {
                return Err(Error::InvalidParameter("density samples have no separate design".into()));
            }
            let table = CdfTable::new(|x| truth.eval(x), 0.0, 1.0, 512);
            let x = (0..n).map(|_| table.invert(rng.gen::<f64>())).collect();
            Ok(Dataset::Points { x })
        }
        DgpModel::Hazard { censor_bound } => {
            let mut x = Vec::with_capacity(n);
            let mut time = Vec::with_capacity(n);
            let mut event = Vec::with_capacity(n);
            for _ in 0..n {
                let xi = draw_x(&mut rng);
                let rate = truth.eval(xi).exp();
                let t = Exp::new(rate)
                    .map_err(|e| Error::InvalidParameter(format!("hazard rate {rate}: {e}")))?
                    .sample(&mut rng);
                let c = rng.gen::<f64>() * censor_bound;
                x.push(xi);
                time.push(t.min(c));
                event.push(t <= c);
            }
            Ok(Dataset::Survival { x, time, event })
        }
        DgpModel::Quantile { tau, noise, scale } => {
            let shift = noise.quantile(*tau);
            let t3 = StudentT::new(3.0).unwrap();
            let mut x = Vec::with_capacity(n);
            let mut y = Vec::with_capacity(n);
            for _ in 0..n {
                let xi = draw_x(&mut rng);
                let e: f64 = match noise {
                    QuantileNoise::Gaussian => rng.sample(rand_distr::StandardNormal),
                    QuantileNoise::StudentT3 => t3.sample(&mut rng),
                };
                x.push(xi);
                y.push(truth.eval(xi) + scale * (e - shift));
            }
            Ok(Dataset::XY { x, y })
        }
        DgpModel::Spectral { ar, sigma } => {
            let series = ar_series(ar, *sigma, n, &mut rng);
            let (lambda, value) = periodogram(&series);
            Dataset::periodogram(lambda, value, n)
        }
    }
}

/// Burn-in discarded before an AR series is recorded.
const AR_BURN_IN: usize = 1000;

fn ar_series(ar: &[f64], sigma: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let noise = Normal::new(0.0, sigma).unwrap();
    let mut hist = vec![0.0; ar.len()];
    let mut out = Vec::with_capacity(n);
    for t in 0..(AR_BURN_IN + n) {
        let mut v = noise.sample(rng);
        for (j, phi) in ar.iter().enumerate() {
            v += phi * hist[j];
        }
        hist.rotate_right(1);
        hist[0] = v;
        if t >= AR_BURN_IN {
            out.push(v);
        }
    }
    out
}

/// Periodogram `|Σ_t X_t e^{−iλt}|² / (2πT)` at `λ_k = 2πk/T`,
/// `k = 1, …, ⌊T/2⌋`.
pub fn periodogram(series: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let t = series.len();
    let mut buf: Vec<Complex<f64>> = series.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(t).process(&mut buf);
    let norm = 1.0 / (2.0 * PI * t as f64);
    (1..=t / 2)
        .map(|k| (2.0 * PI * k as f64 / t as f64, buf[k].norm_sqr() * norm))
        .unzip()
}

/// Tabulated CDF of `exp(h)` on [a, b], for inverse-CDF sampling.
struct CdfTable<F> {
    h: F,
    edges: Vec<f64>,
    /// Unnormalized cumulative integrals at `edges`.
    cum: Vec<f64>,
    rule: GaussLegendre,
}

impl<F: Fn(f64) -> f64> CdfTable<F> {
    fn new(h: F, a: f64, b: f64, panels: usize) -> Self {
        let rule = GaussLegendre::new(20);
        let edges: Vec<f64> = (0..=panels).map(|i| a + (b - a) * i as f64 / panels as f64).collect();
        let mut cum = vec![0.0];
        for w in edges.windows(2) {
            let v = rule.integrate(w[0], w[1], |x| h(x).exp());
            cum.push(cum.last().unwrap() + v);
        }
        Self { h, edges, cum, rule }
    }

    fn total(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    fn panel_of(&self, x: f64) -> usize {
        self.edges.partition_point(|&e| e <= x).clamp(1, self.edges.len() - 1) - 1
    }

    fn cdf(&self, x: f64) -> f64 {
        let x = x.clamp(self.edges[0], *self.edges.last().unwrap());
        let i = self.panel_of(x);
        let part = self.rule.integrate(self.edges[i], x, |s| (self.h)(s).exp());
        ((self.cum[i] + part) / self.total()).clamp(0.0, 1.0)
    }

    /// Solves `F(x) = u` to 1e-10 in `x` by safeguarded Newton inside the
    /// panel holding `u`.
    fn invert(&self, u: f64) -> f64 {
        let target = u * self.total();
        let i = self.cum.partition_point(|&c| c <= target).clamp(1, self.edges.len() - 1) - 1;
        let (mut lo, mut hi) = (self.edges[i], self.edges[i + 1]);
        let rest = target - self.cum[i];
        let mut x = 0.5 * (lo + hi);
        for _ in 0..100 {
            let f = self.rule.integrate(self.edges[i], x, |s| (self.h)(s).exp()) - rest;
            if f > 0.0 {
                hi = x;
            } else {
                lo = x;
            }
            let mut next = x - f / (self.h)(x).exp();
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - x).abs() < 1e-12 || hi - lo < 1e-10 {
                return next;
            }
            x = next;
        }
        x
    }
}

/// Normalized CDF of `exp(h)` on [a, b] at the points `xs`.
pub fn density_cdf<F: Fn(f64) -> f64>(h: F, a: f64, b: f64, xs: &[f64]) -> Vec<f64> {
    let table = CdfTable::new(h, a, b, 512);
    xs.iter().map(|&x| table.cdf(x)).collect()
}
