use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use ace_cli::advise::{self, InitOptions};
use ace_cli::config::{env_default_seed, ConfigError, RunConfig};
use ace_cli::{report, simulate, truth};
use ace_core::simulation::{Method, PropensityMode, Scenario};
use ace_core::surrogate::WeightSpec;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "ace", version, about = "Adaptive experiment design for treatment-effect estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run replications and write replications.csv, aggregate.csv and manifest.json.
    Simulate(SimulateArgs),
    /// Render result tables from a results directory.
    Report {
        #[arg(default_value = "results")]
        dir: PathBuf,
    },
    /// Drive a live study: JSON requests on stdin, one response per line on stdout.
    Advise(AdviseArgs),
    /// Ground-truth estimand by Monte Carlo and by the test-set plug-in.
    Truth(TruthArgs),
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: ace_core::AceError| e.to_string())
}

fn parse_scenario(s: &str) -> Result<Scenario, String> {
    s.parse().map_err(|e: ace_core::AceError| e.to_string())
}

fn parse_weight(s: &str) -> Result<WeightSpec, String> {
    s.parse().map_err(|e: ace_core::AceError| e.to_string())
}

fn parse_propensity(s: &str) -> Result<PropensityMode, String> {
    match s {
        "known" => Ok(PropensityMode::Known),
        "estimated" => Ok(PropensityMode::Estimated),
        _ => Err(format!("expected 'known' or 'estimated', got '{s}'")),
    }
}

#[derive(Args)]
struct SimulateArgs {
    /// TOML config, or a manifest.json from an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_scenario)]
    scenario: Option<Scenario>,
    /// Repeatable or comma-separated.
    #[arg(long, value_parser = parse_method, value_delimiter = ',')]
    method: Vec<Method>,
    /// ate, atte, ato, truncated:<alpha> or matching.
    #[arg(long, value_parser = parse_weight)]
    weight: Option<WeightSpec>,
    #[arg(long)]
    reps: Option<usize>,
    /// Base seed; defaults to ACE_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    n_pool: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    n_init: Option<usize>,
    #[arg(long)]
    noise_sd: Option<f64>,
    /// UCB exploration constant.
    #[arg(long)]
    c: Option<f64>,
    #[arg(long)]
    refit_interval: Option<usize>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    refit_restarts: Option<usize>,
    #[arg(long, value_parser = parse_propensity)]
    propensity: Option<PropensityMode>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl SimulateArgs {
    fn into_config(self) -> Result<RunConfig, ConfigError> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident <- $arg:ident),* $(,)?) => {$(
                if let Some(v) = self.$arg { c.$field = v; }
            )*};
        }
        set!(
            scenario <- scenario, weight <- weight, reps <- reps, n <- n, n_pool <- n_pool,
            n_test <- n_test, n_init <- n_init, noise_sd <- noise_sd, c <- c,
            refit_interval <- refit_interval, restarts <- restarts, refit_restarts <- refit_restarts,
            propensity_mode <- propensity, threads <- threads, output <- out,
        );
        if self.seed.is_some() {
            c.seed = self.seed;
        }
        if !self.method.is_empty() {
            c.methods = self.method;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct AdviseArgs {
    /// Session state file.
    #[arg(long)]
    session: PathBuf,
    /// Create the session instead of serving requests.
    #[arg(long)]
    init: bool,
    #[arg(long, value_parser = parse_scenario, default_value = "s2a")]
    scenario: Scenario,
    #[arg(long, value_parser = parse_weight, default_value = "ate")]
    weight: WeightSpec,
    #[arg(long, value_parser = parse_propensity, default_value = "known")]
    propensity: PropensityMode,
    /// Candidate pool CSV with header x1..xd.
    #[arg(long)]
    pool: Option<PathBuf>,
    /// Test set CSV with header x1..xd.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Generate a uniform pool of this size next to the session file.
    #[arg(long)]
    pool_uniform: Option<usize>,
    #[arg(long)]
    test_uniform: Option<usize>,
    #[arg(long, default_value_t = 2)]
    dim: usize,
    #[arg(long, default_value_t = 0.01)]
    c: f64,
    #[arg(long, default_value_t = 10)]
    restarts: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    noise_adjusted: bool,
}

#[derive(Args)]
struct TruthArgs {
    #[arg(long, value_parser = parse_weight, default_value = "ate")]
    weight: WeightSpec,
    /// Monte-Carlo sample size.
    #[arg(long, default_value_t = 1_000_000)]
    n: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1000)]
    n_test: usize,
    #[arg(long, default_value_t = ace_core::simulation::TEST_SET_SEED)]
    test_seed: u64,
    /// Print a JSON object instead of text.
    #[arg(long)]
    json: bool,
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast::<ConfigError>() {
            Ok(c) => Failure::Usage(c.to_string()),
            Err(e) => Failure::Runtime(e),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), Failure> {
    let cfg = args.into_config()?;
    let batch = simulate::run_batch(&cfg)?;
    simulate::write_outputs(&batch, &cfg.output)?;
    let mut out = io::stdout().lock();
    writeln!(out, "{:<10} {:>6} {:>9} {:>12} {:>12} {:>12}", "method", "reps", "excluded", "bias_e3", "rmse_e3", "ite_median")?;
    for (m, met) in batch.metrics() {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
        writeln!(
            out,
            "{:<10} {:>6} {:>9} {:>12} {:>12} {:>12}",
            m.name(),
            met.replications,
            met.excluded,
            f(met.bias_e3()),
            f(met.rmse_e3()),
            f(met.cumulative_ite.map(|q| q.median))
        )?;
    }
    writeln!(out, "results written to {}", cfg.output.display())?;
    Ok(())
}

fn cmd_report(dir: PathBuf) -> Result<(), Failure> {
    let r = report::run(&dir)?;
    print!("{}", r.text);
    Ok(())
}

fn cmd_advise(a: AdviseArgs) -> Result<(), Failure> {
    if a.init {
        let seed = match a.seed {
            Some(s) => s,
            None => env_default_seed()?,
        };
        let opts = InitOptions {
            scenario: a.scenario,
            weight: a.weight,
            propensity_mode: a.propensity,
            pool: a.pool,
            test: a.test,
            pool_uniform: a.pool_uniform,
            test_uniform: a.test_uniform,
            dim: a.dim,
            c: a.c,
            restarts: a.restarts,
            seed,
            noise_adjusted: a.noise_adjusted,
        };
        let s = advise::init_session(&a.session, &opts).map_err(|e| Failure::Usage(format!("{e:#}")))?;
        println!(
            "{}",
            serde_json::json!({ "created": a.session, "scenario": s.scenario, "estimand": s.weight.name() })
        );
        return Ok(());
    }
    let stdin = io::stdin().lock();
    let stdout = BufWriter::new(io::stdout().lock());
    advise::serve(&a.session, stdin, stdout)?;
    Ok(())
}

fn cmd_truth(a: TruthArgs) -> Result<(), Failure> {
    let seed = match a.seed {
        Some(s) => s,
        None => env_default_seed()?,
    };
    let r = truth::compute(a.weight, a.n, seed, a.n_test, a.test_seed)?;
    if a.json {
        println!("{}", serde_json::to_string(&r).map_err(anyhow::Error::from)?);
    } else {
        println!("estimand            {}", r.weight.name());
        println!("monte carlo         {:.8} (se {:.2e}, n = {})", r.monte_carlo.estimate, r.monte_carlo.std_error, r.monte_carlo.n);
        println!("test-set plug-in    {:.8} (sampling se {:.2e}, n_test = {})", r.test_set_plug_in, r.test_set_std_error, a.n_test);
        println!("difference / se     {:.3}", r.z);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Report { dir } => cmd_report(dir),
        Command::Advise(a) => cmd_advise(a),
        Command::Truth(a) => cmd_truth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
