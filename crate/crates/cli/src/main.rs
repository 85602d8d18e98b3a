//! `dyadiv` command-line front end: simulate, estimate, mc-table.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use dyadiv::data::{load_csv_any, write_csv, Ego, EstimandSpec};
use dyadiv::error::Error;
use dyadiv::estimators::{estimate, EstimationConfig, IteMode, Method};
use dyadiv::inference::{bootstrap, BootstrapConfig};
use dyadiv::nuisance::{LassoLambda, Learner};
use dyadiv::sieve::BasisSpec;
use dyadiv::sim::dgp::{generate, DgpConfig, MisspecPattern};
use dyadiv::sim::mc::{run_mc, CiKind, McConfig, McMethod};

const EXIT_USAGE: u8 = 2;
const EXIT_ABORT: u8 = 3;
const EXIT_IO: u8 = 4;

#[derive(Parser, Debug)]
#[command(
    name = "dyadiv",
    version,
    about = "Peer-effect estimation for dyads with dual instruments",
    args_override_self = true,
    after_help = "Any command accepts --config FILE: lines of `key = value` read as \
                  `--key value` ahead of the command line, so explicit flags win."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a dataset from the simulation design and write it as CSV.
    Simulate(SimulateArgs),
    /// Estimate one effect from a CSV dataset and print a JSON report.
    Estimate(EstimateArgs),
    /// Run the Monte Carlo study and write bias / SD / coverage tables.
    McTable(McArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LearnerArg {
    Parametric,
    Lasso,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum IteArg {
    Difference,
    Conditional,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Nuisance learner.
    #[arg(long, value_enum, default_value = "parametric")]
    learner: LearnerArg,
    /// Instrument propensity clamp `[eps, 1 - eps]`.
    #[arg(long, default_value_t = 0.01)]
    trim_eps: f64,
    #[arg(long, default_value_t = 1e-10)]
    newton_tol: f64,
    #[arg(long, default_value_t = 100)]
    newton_max_iter: usize,
    /// Fixed lasso penalty; cross-validated when absent.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, default_value_t = 5)]
    cv_folds: usize,
    /// Total degree of the sieve polynomial basis.
    #[arg(long, default_value_t = 2)]
    basis_degree: usize,
    /// Use raw covariates in the sieve basis.
    #[arg(long)]
    no_standardize: bool,
    #[arg(long, value_enum, default_value = "difference")]
    ite_mode: IteArg,
}

impl ModelArgs {
    fn config(&self) -> Result<EstimationConfig, Error> {
        let mut cfg = EstimationConfig::default();
        cfg.nuisance.learner = match self.learner {
            LearnerArg::Parametric => Learner::Parametric,
            LearnerArg::Lasso => Learner::Lasso,
        };
        cfg.nuisance.trim_eps = self.trim_eps;
        cfg.nuisance.newton_tol = self.newton_tol;
        cfg.nuisance.newton_max_iter = self.newton_max_iter;
        cfg.nuisance.lasso_lambda = match self.lambda {
            Some(l) => LassoLambda::Fixed(l),
            None => LassoLambda::Cv(self.cv_folds),
        };
        cfg.sieve = BasisSpec {
            degree: self.basis_degree,
            standardize: !self.no_standardize,
            ..BasisSpec::default()
        };
        cfg.ite_mode = match self.ite_mode {
            IteArg::Difference => IteMode::Difference,
            IteArg::Conditional => IteMode::Conditional,
        };
        cfg.nuisance.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct EstimateArgs {
    #[arg(long)]
    data: PathBuf,
    /// dte1 | dte0 | ste1 | ste0 | ite
    #[arg(long)]
    estimand: EstimandSpec,
    /// wald | ipw | g | reg | mr | sieve
    #[arg(long)]
    method: Method,
    /// Whose outcome is analyzed.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    ego: u8,
    /// Bootstrap resamples; no bootstrap when absent.
    #[arg(long)]
    bootstrap: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Two-sided interval level.
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Debug)]
struct McArgs {
    #[arg(long)]
    reps: usize,
    /// Comma-separated sample sizes.
    #[arg(long, value_delimiter = ',', required = true)]
    ns: Vec<usize>,
    /// Comma-separated columns: parametric, lasso, sieve, wald, ipw, g, reg.
    #[arg(long, value_delimiter = ',', required = true)]
    methods: Vec<McMethod>,
    #[arg(long)]
    seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "dte1,dte0,ste1,ste0")]
    estimands: Vec<EstimandSpec>,
    /// Interval type per replicate.
    #[arg(long, value_enum, default_value = "bootstrap")]
    ci: CiArg,
    /// Bootstrap resamples per replicate.
    #[arg(long, default_value_t = 200)]
    bootstrap: usize,
    /// Corrupt nuisances, keeping only one submodel correct.
    #[arg(long, value_parser = parse_misspec, default_value = "none")]
    misspec: MisspecPattern,
    /// Output prefix for `<prefix>.csv` and `<prefix>.txt`; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CiArg {
    Bootstrap,
    Plugin,
    None,
}

fn parse_misspec(s: &str) -> Result<MisspecPattern, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Expands `--config FILE` into flags placed right after the subcommand.
fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let Some(pos) = args.iter().position(|a| a == "--config") else {
        return Ok(args);
    };
    let path = args
        .get(pos + 1)
        .ok_or("--config needs a file path")?
        .clone();
    let text = fs::read_to_string(&path)
        .map_err(|e| format!("cannot read config {}: {e}", Path::new(&path).display()))?;
    let mut rest: Vec<OsString> = args[..pos].to_vec();
    rest.extend_from_slice(&args[pos + 2..]);

    let mut injected = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("config line {}: expected key = value", k + 1))?;
        let key = key.trim().replace('_', "-");
        match value.trim() {
            "true" => injected.push(format!("--{key}").into()),
            "false" => {}
            v => {
                injected.push(format!("--{key}").into());
                injected.push(v.into());
            }
        }
    }
    // Program name, then the subcommand, then file flags, then the rest.
    let sub = rest
        .iter()
        .skip(1)
        .position(|a| !a.to_string_lossy().starts_with('-'))
        .map(|p| p + 1)
        .ok_or("missing command")?;
    let mut out = rest[..=sub].to_vec();
    out.extend(injected);
    out.extend_from_slice(&rest[sub + 1..]);
    Ok(out)
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Config(_) => EXIT_USAGE,
        Error::Io(_) | Error::Csv(_) | Error::Parse { .. } | Error::Domain { .. } | Error::Schema(_) => EXIT_IO,
        _ => EXIT_ABORT,
    }
}

fn write_output(out: Option<&Path>, text: &str) -> Result<(), Error> {
    match out {
        Some(p) => fs::write(p, text).map_err(Error::from),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn cmd_simulate(a: &SimulateArgs) -> Result<(), Error> {
    let cfg = DgpConfig::new(a.n, a.seed);
    cfg.validate()?;
    let ds = generate(&cfg)?;
    let file = fs::File::create(&a.out)?;
    write_csv(&ds, std::io::BufWriter::new(file))
}

fn cmd_estimate(a: &EstimateArgs) -> Result<(), Error> {
    let cfg = a.model.config()?;
    if !(a.level > 0.0 && a.level < 1.0) {
        return Err(Error::Config(format!("--level must lie in (0, 1), got {}", a.level)));
    }
    let boot = a.bootstrap.map(|b| {
        let mut c = BootstrapConfig::new(b, a.seed);
        c.level = a.level;
        c
    });
    if let Some(b) = &boot {
        b.validate()?;
    }
    let spec = a.estimand.with_ego(if a.ego == 2 { Ego::Unit2 } else { Ego::Unit1 });
    let ds = load_csv_any(&a.data)?;
    let mut report = estimate(&ds, &spec, a.method, &cfg)?;
    if report.se_plugin.is_some() {
        let (lo, hi) = dyadiv::inference::plugin_ci(&report, a.level)?;
        report.ci = Some([lo, hi]);
    }
    if let Some(b) = &boot {
        let res = bootstrap(&ds, &spec, a.method, &cfg, b)?;
        report = report.with_bootstrap(res);
    }
    write_output(a.out.as_deref(), &report.to_json())
}

fn cmd_mc(a: &McArgs) -> Result<(), Error> {
    let mut cfg = McConfig::new(a.reps, a.ns.clone(), a.methods.clone(), a.seed);
    cfg.estimands = a.estimands.clone();
    cfg.bootstrap_b = a.bootstrap;
    cfg.ci = match a.ci {
        CiArg::Bootstrap => CiKind::Bootstrap,
        CiArg::Plugin => CiKind::Plugin,
        CiArg::None => CiKind::None,
    };
    cfg.misspec = a.misspec;
    cfg.estimation = a.model.config()?;
    cfg.validate()?;
    if a.reps < McConfig::LOW_REPS {
        eprintln!("warning: low-rep warning: {} replications give noisy summaries", a.reps);
    }
    let table = run_mc(&cfg)?;
    match &a.out {
        Some(prefix) => {
            let mut csv = Vec::new();
            table.write_csv(&mut csv)?;
            fs::write(prefix.with_extension("csv"), csv)?;
            fs::write(prefix.with_extension("txt"), table.to_text())?;
        }
        None => print!("{}", table.to_text()),
    }
    for line in table.summary_lines() {
        println!("{line}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = match expand_config(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let res = match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Estimate(a) => cmd_estimate(a),
        Command::McTable(a) => cmd_mc(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
