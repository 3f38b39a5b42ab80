//! Command-line front end for the penspline library.
//!
//! Exit status: 0 on success, 2 on invalid input (arguments, configs,
//! datasets), 3 when a rate run misses its expected exponent, 1 otherwise.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use penspline::basis::{complexity_constant, l2_gram, make_knots, BasisSpec, KnotScheme, Weight, COMPLEXITY_GRID};
use penspline::harness::{run_scenario, write_summary, RateReport, ScenarioSpec};
use penspline::io::{read_dataset, write_curve, write_dataset};
use penspline::models::{spectral_boundary_constraints, zero_integral_constraint, ExpFamily, ModelSpec};
use penspline::penalty::{eigen_decompose, penalty_gram};
use penspline::simulate::{generate, DgpSpec};
use penspline::solver::{fit_penalized, FitOptions};
use penspline::Error;

#[derive(Parser)]
#[command(name = "penspline", version, about = "Penalized spline estimation and rate experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct SpaceArgs {
    /// Spline degree.
    #[arg(long, default_value_t = 3)]
    m: usize,
    /// Number of interior knots.
    #[arg(long)]
    k: usize,
    #[arg(long, value_enum, default_value_t = Scheme::Equal)]
    scheme: Scheme,
    /// Mesh-ratio bound for jittered knots.
    #[arg(long, default_value_t = 2.0)]
    ratio: f64,
    /// Seed for jittered knots.
    #[arg(long, default_value_t = 0)]
    knot_seed: u64,
    /// Domain endpoints (default [0, 1], or [0, π] for spectral fits).
    #[arg(long)]
    lo: Option<f64>,
    #[arg(long)]
    hi: Option<f64>,
}

impl SpaceArgs {
    fn basis(&self, default_hi: f64) -> Result<BasisSpec, Error> {
        let scheme = match self.scheme {
            Scheme::Equal => KnotScheme::Equal,
            Scheme::Jittered => KnotScheme::Jittered {
                ratio_bound: self.ratio,
                seed: self.knot_seed,
            },
        };
        let knots = make_knots(self.lo.unwrap_or(0.0), self.hi.unwrap_or(default_hi), self.k, scheme)?;
        Ok(BasisSpec::new(knots, self.m))
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Scheme {
    Equal,
    Jittered,
}

#[derive(Clone, Copy, ValueEnum)]
enum Model {
    Gaussian,
    Logistic,
    Poisson,
    LogDensity,
    Hazard,
    Quantile,
    Spectral,
}

#[derive(Subcommand)]
enum Command {
    /// Dump knots, the L2 Gram matrix and the complexity constant A_n as JSON.
    Basis {
        #[command(flatten)]
        space: SpaceArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Penalty eigenvalues as CSV `nu,rho` (nu = 0 is the first null direction).
    Eigen {
        #[command(flatten)]
        space: SpaceArgs,
        /// Penalty order.
        #[arg(long, default_value_t = 2)]
        q: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a dataset CSV from a TOML data-generating process.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's sample size.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a penalized spline to a dataset CSV; writes the fit as JSON.
    Fit {
        #[arg(long, value_enum)]
        model: Model,
        /// Quantile level.
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
        /// Final check-loss smoothing (0 runs the full homotopy).
        #[arg(long, default_value_t = 0.0)]
        eps: f64,
        #[command(flatten)]
        space: SpaceArgs,
        /// Penalty order.
        #[arg(long, default_value_t = 2)]
        q: usize,
        #[arg(long)]
        lambda: f64,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write `x,eta_hat` on an equally spaced grid to this CSV.
        #[arg(long)]
        eval: Option<PathBuf>,
        #[arg(long, default_value_t = 201)]
        eval_points: usize,
    },
    /// Run a rate scenario from a TOML config; writes the report as JSON.
    Rates {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads (0: all cores).
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the summary CSV.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Merge report JSONs into one summary CSV.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Lib(Error),
    File(PathBuf, io::Error),
    Acceptance(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Lib(e) if e.is_validation() => 2,
            Failure::Acceptance(_) => 3,
            _ => 1,
        }
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::File(path.to_path_buf(), e))
}

fn with_path<T>(path: &Path, r: Result<T, Error>) -> Result<T, Failure> {
    r.map_err(|e| match e {
        Error::Io(io) => Failure::File(path.to_path_buf(), io),
        e => Failure::Lib(e),
    })
}

/// Runs `f` on the output file, or on stdout when no path is given.
fn emit<F>(out: Option<&Path>, f: F) -> Result<(), Failure>
where
    F: FnOnce(&mut dyn Write) -> Result<(), Error>,
{
    match out {
        Some(p) => {
            let file = fs::File::create(p).map_err(|e| Failure::File(p.to_path_buf(), e))?;
            let mut w = io::BufWriter::new(file);
            with_path(p, f(&mut w))?;
            w.flush().map_err(|e| Failure::File(p.to_path_buf(), e))
        }
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            with_path(Path::new("<stdout>"), f(&mut lock))
        }
    }
}

fn json_line(w: &mut dyn Write, value: &serde_json::Value) -> Result<(), Error> {
    serde_json::to_writer_pretty(&mut *w, value)?;
    writeln!(w)?;
    Ok(())
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Basis { space, out } => {
            let basis = space.basis(1.0)?;
            let gram = l2_gram(&basis, &Weight::Constant(1.0))?;
            let a_n = complexity_constant(&basis, COMPLEXITY_GRID)?;
            let value = serde_json::json!({
                "degree": basis.degree(),
                "dim": basis.dim(),
                "domain": [basis.domain().0, basis.domain().1],
                "interior_knots": basis.knots().interior(),
                "mesh_size": basis.knots().mesh_size(),
                "mesh_ratio": basis.knots().mesh_ratio(),
                "gram": matrix_rows(&gram),
                "a_n": a_n,
            });
            emit(out.as_deref(), |w| json_line(w, &value))
        }
        Command::Eigen { space, q, out } => {
            let basis = space.basis(1.0)?;
            let gram = l2_gram(&basis, &Weight::Constant(1.0))?;
            let sys = eigen_decompose(&penalty_gram(&basis, q)?, &gram)?;
            emit(out.as_deref(), |w| {
                writeln!(w, "nu,rho")?;
                for (nu, rho) in sys.rho.iter().enumerate() {
                    writeln!(w, "{nu},{rho}")?;
                }
                Ok(())
            })
        }
        Command::Simulate { config, seed, n, out } => {
            let text = read(&config)?;
            let mut dgp = DgpSpec::from_toml(&text)?;
            if let Some(s) = seed {
                dgp.seed = s;
            }
            if let Some(n) = n {
                dgp.n = n;
            }
            let data = generate(&dgp)?;
            emit(out.as_deref(), |w| write_dataset(&data, w))
        }
        Command::Fit {
            model,
            tau,
            eps,
            space,
            q,
            lambda,
            input,
            out,
            eval,
            eval_points,
        } => {
            let spec = match model {
                Model::Gaussian => ModelSpec::Gaussian,
                Model::Logistic => ModelSpec::ExpFamily(ExpFamily::logistic()),
                Model::Poisson => ModelSpec::ExpFamily(ExpFamily::poisson()),
                Model::LogDensity => ModelSpec::LogDensity,
                Model::Hazard => ModelSpec::Hazard,
                Model::Quantile => ModelSpec::Quantile { tau, eps },
                Model::Spectral => ModelSpec::Spectral,
            };
            let default_hi = match model {
                Model::Spectral => std::f64::consts::PI,
                _ => 1.0,
            };
            let basis = space.basis(default_hi)?;
            let file = fs::File::open(&input).map_err(|e| Failure::File(input.clone(), e))?;
            let data = with_path(&input, read_dataset(io::BufReader::new(file)))?;
            let pen = penalty_gram(&basis, q)?;
            let constraints = match model {
                Model::LogDensity => Some(zero_integral_constraint(&basis)),
                Model::Spectral => Some(spectral_boundary_constraints(&basis)?),
                _ => None,
            };
            let fit = fit_penalized(&spec, &data, &basis, &pen, lambda, constraints.as_ref(), &FitOptions::default())?;
            if !fit.converged {
                eprintln!(
                    "warning: fit did not converge: {}",
                    fit.diagnostic.as_deref().unwrap_or("unknown reason")
                );
            }
            let value = serde_json::to_value(&fit).map_err(Error::from)?;
            emit(out.as_deref(), |w| json_line(w, &value))?;
            if let Some(path) = eval {
                if eval_points < 2 {
                    return Err(Error::InvalidParameter("--eval-points must be at least 2".into()).into());
                }
                let (a, b) = basis.domain();
                let xs: Vec<f64> = (0..eval_points)
                    .map(|i| a + (b - a) * i as f64 / (eval_points - 1) as f64)
                    .collect();
                let spline = fit.spline();
                let values = xs.iter().map(|&x| spline.eval(x)).collect::<Result<Vec<_>, _>>()?;
                emit(Some(&path), |w| write_curve(&xs, &values, w))?;
            }
            Ok(())
        }
        Command::Rates {
            config,
            seed,
            workers,
            out,
            summary,
        } => {
            let text = read(&config)?;
            let mut spec = ScenarioSpec::from_toml(&text)?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            if let Some(w) = workers {
                spec.workers = w;
            }
            let report = run_scenario(&spec)?;
            let json = report.to_json()?;
            emit(out.as_deref(), |w| Ok(writeln!(w, "{json}")?))?;
            if let Some(path) = summary {
                emit(Some(&path), |w| write_summary(std::slice::from_ref(&report), w))?;
            }
            for warning in &report.warnings {
                eprintln!("warning: {warning}");
            }
            if report.pass == Some(false) {
                return Err(Failure::Acceptance(format!(
                    "case {}: slope {:.3} is outside −{:.3} ± {}",
                    report.case, report.slope, report.expected, report.tolerance
                )));
            }
            Ok(())
        }
        Command::Report { reports, out } => {
            let parsed = reports
                .iter()
                .map(|p| {
                    let text = read(p)?;
                    RateReport::from_json(&text).map_err(|e| {
                        Failure::Lib(match e {
                            Error::Json(j) => Error::Parse {
                                line: j.line(),
                                msg: format!("{}: {j}", p.display()),
                            },
                            e => e,
                        })
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            emit(out.as_deref(), |w| write_summary(&parsed, w))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Lib(e) => eprintln!("error: {e}"),
                Failure::File(p, e) => eprintln!("error: {}: {e}", p.display()),
                Failure::Acceptance(msg) => eprintln!("failed: {msg}"),
            }
            ExitCode::from(f.code())
        }
    }
}
