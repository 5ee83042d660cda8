use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mapvamp::admm::{check_fixed_point, run_fixed, KktTolerances};
use mapvamp::harness::{self, ExperimentConfig};
use mapvamp::mlvamp::{self, nmse_db, RunOptions};
use mapvamp::model::{self, FactoredNetwork, Network};
use mapvamp::oracle;
use mapvamp::se::{predicted_nmse_db, run_se, DisturbanceModel};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(
    name = "mapvamp",
    version,
    about = "MAP inference in multi-layer networks by message passing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random network (and optionally a signal/observation pair).
    Gen(GenArgs),
    /// Run message-passing inference on an observation.
    Infer(InferArgs),
    /// Predict per-layer NMSE with state evolution.
    Predict(PredictArgs),
    /// Run the fixed-precision iteration and check its fixed point.
    Verify(VerifyArgs),
    /// Run a full sweep and write the results CSV.
    Experiment(ExperimentArgs),
    /// Print brute-force reference values.
    #[command(subcommand)]
    Oracle(OracleCommand),
}

/// Flags that override config fields one-for-one.
#[derive(Args, Clone, Default)]
struct Overrides {
    #[arg(long)]
    snr_db: Option<f64>,
    #[arg(long)]
    damping: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    mc_samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Overrides {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(v) = self.snr_db {
            cfg.network.snr_db = v;
        }
        if let Some(v) = self.damping {
            cfg.mlvamp.damping = v;
        }
        if let Some(v) = self.max_iters {
            cfg.mlvamp.max_iters = v;
        }
        if let Some(v) = self.mc_samples {
            cfg.se.mc_samples = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
    }
}

#[derive(Args)]
struct GenArgs {
    /// Experiment config whose `network` section describes the family.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 300)]
    ny: usize,
    /// Model file to write.
    #[arg(long)]
    out: PathBuf,
    /// Also draw a signal and its observation and write them here.
    #[arg(long)]
    signals: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    /// Signals file with `y` and optionally the true `z0`.
    #[arg(long)]
    observation: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    observation: PathBuf,
    /// Fixed precision for every position and direction; by default the
    /// precisions an adaptive run settles on are frozen.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, default_value_t = 5000)]
    max_iters: usize,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Subcommand)]
enum OracleCommand {
    /// Grid-search minimizer of the two-sided ReLU proximal problem.
    ProxRelu {
        #[arg(long, allow_hyphen_values = true)]
        r_prev: f64,
        #[arg(long, allow_hyphen_values = true)]
        r_cur: f64,
        #[arg(long, default_value_t = 1.0)]
        gamma_prev: f64,
        #[arg(long, default_value_t = 1.0)]
        gamma_cur: f64,
    },
    /// Dense joint-Gaussian MAP estimate of the input.
    GaussianMap {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        observation: PathBuf,
    },
}

/// Bad configuration, reported with the usage exit code.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Serialize, Deserialize)]
struct Signals {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    z0: Option<Vec<f64>>,
    y: Vec<f64>,
}

#[derive(Serialize)]
struct Estimate {
    converged: bool,
    iterations: usize,
    z0: Vec<f64>,
    nmse_db: Option<f64>,
}

fn load_config(path: Option<&Path>, overrides: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => harness::load_config(p).map_err(|e| match e {
            mapvamp::Error::Io(io) => {
                anyhow::Error::new(io).context(format!("reading {}", p.display()))
            }
            other => Usage(other.to_string()).into(),
        })?,
        None => ExperimentConfig::default(),
    };
    overrides.apply(&mut cfg);
    cfg.validate().map_err(|e| Usage(e.to_string()))?;
    Ok(cfg)
}

fn load_network(path: &Path) -> Result<FactoredNetwork<f64>> {
    let net: Network<f64> =
        model::load_model(path).with_context(|| format!("loading model {}", path.display()))?;
    Ok(FactoredNetwork::new(net)?)
}

fn load_signals(path: &Path) -> Result<Signals> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn run_options(o: &Overrides) -> RunOptions<f64> {
    let mut opts = RunOptions::default();
    if let Some(d) = o.damping {
        opts.damping = d;
    }
    if let Some(m) = o.max_iters {
        opts.max_iters = m;
    }
    opts
}

fn fmt_db(v: f64) -> String {
    if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v:.3}")
    }
}

fn gen(args: &GenArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref(), &args.overrides)?;
    let inst = harness::build_instance(&cfg, args.ny, cfg.seed)?;
    model::save_model(inst.network.network(), &args.out)?;
    if let Some(path) = &args.signals {
        let signals = Signals {
            z0: Some(inst.truth.z[0].iter().copied().collect()),
            y: inst.y.iter().copied().collect(),
        };
        fs::write(path, serde_json::to_string_pretty(&signals)?)?;
    }
    Ok(())
}

fn infer(args: &InferArgs) -> Result<()> {
    let net = load_network(&args.model)?;
    let signals = load_signals(&args.observation)?;
    let y = DVector::from_vec(signals.y.clone());
    let res = mlvamp::run(&net, &y, None, run_options(&args.overrides))?;
    let z0 = &res.state.zhat_plus[0];
    let score = match &signals.z0 {
        Some(truth) => Some(nmse_db(z0, &DVector::from_vec(truth.clone()))?),
        None => None,
    };
    let est = Estimate {
        converged: res.converged,
        iterations: res.iterations,
        z0: z0.iter().copied().collect(),
        nmse_db: score,
    };
    let text = serde_json::to_string_pretty(&est)?;
    match &args.out {
        Some(p) => fs::write(p, text)?,
        None => println!("{text}"),
    }
    if let Some(v) = score {
        eprintln!(
            "input NMSE {} dB after {} iterations",
            fmt_db(v),
            res.iterations
        );
    }
    Ok(())
}

fn predict(args: &PredictArgs) -> Result<()> {
    let net = load_network(&args.model)?;
    let model = DisturbanceModel::from_network(&net)?;
    let cfg = load_config(None, &args.overrides)?;
    let mut opts = cfg.se_options(cfg.seed);
    if let Some(m) = args.overrides.max_iters {
        opts.max_iters = m;
    }
    let se = run_se(&model, &opts)?;
    for w in &se.warnings {
        eprintln!("warning: {w}");
    }
    let last = 2 * se.iterations.len() - 1;
    println!(
        "iterations {} converged {}",
        se.iterations.len(),
        se.converged
    );
    println!("layer,nmse_db");
    for layer in 0..model.positions() {
        println!("{layer},{}", fmt_db(predicted_nmse_db(&se, layer, last)?));
    }
    Ok(())
}

/// Returns whether the check passed.
fn verify(args: &VerifyArgs) -> Result<bool> {
    let net = load_network(&args.model)?;
    let y = DVector::from_vec(load_signals(&args.observation)?.y);
    let gammas = match args.gamma {
        Some(g) => vec![(g, g); net.network().depth() - 1],
        None => {
            let st = mlvamp::run(&net, &y, None, RunOptions::default())?.state;
            st.gamma_plus.into_iter().zip(st.gamma_minus).collect()
        }
    };
    let (res, duals) = run_fixed(&net, &y, &gammas, args.max_iters)?;
    let report = check_fixed_point(
        &net,
        &res.state,
        &duals,
        &gammas,
        &y,
        KktTolerances::default(),
    )?;
    println!("iterations {} converged {}", res.iterations, res.converged);
    println!("primal gap    {:.3e}", report.max_primal_gap());
    println!("dual gap      {:.3e}", report.max_dual_gap());
    println!("stationarity  {:.3e}", report.max_stationarity());
    let ok = report.passed && res.converged;
    println!("{}", if ok { "PASS" } else { "FAIL" });
    Ok(ok)
}

fn experiment(args: &ExperimentArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref(), &args.overrides)?;
    if let Some(out) = &args.out {
        cfg.output = Some(out.clone());
    }
    let outcome = harness::run_experiment(&cfg)?;
    for f in &outcome.failures {
        eprintln!(
            "instance {} (ny {}) {} failed: {}",
            f.seed,
            f.ny,
            f.method.name(),
            f.message
        );
    }
    println!("ny,method,median_nmse_db,instances");
    for row in harness::aggregate(&outcome.records) {
        println!(
            "{},{},{},{}",
            row.ny,
            row.method.name(),
            fmt_db(row.median_nmse_db),
            row.instances
        );
    }
    if cfg.output.is_none() {
        eprintln!("records not written; pass --out to keep them");
    }
    outcome.check()?;
    Ok(())
}

fn oracle_cmd(cmd: &OracleCommand) -> Result<()> {
    match cmd {
        OracleCommand::ProxRelu {
            r_prev,
            r_cur,
            gamma_prev,
            gamma_cur,
        } => {
            if !(*gamma_prev > 0.0 && *gamma_cur > 0.0) {
                bail!("precisions must be positive");
            }
            let z = oracle::relu_pair_grid(*r_prev, *r_cur, *gamma_prev, *gamma_cur);
            println!("{}", (z * 1e6).round() / 1e6);
        }
        OracleCommand::GaussianMap { model, observation } => {
            let net: Network<f64> = model::load_model(model)?;
            let y = DVector::from_vec(load_signals(observation)?.y);
            let map = oracle::gaussian_map(&net, &y)?;
            println!(
                "{}",
                serde_json::to_string(&map[0].iter().collect::<Vec<_>>())?
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(a) => gen(a),
        Command::Infer(a) => infer(a),
        Command::Predict(a) => predict(a),
        Command::Verify(a) => match verify(a) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(1),
            Err(e) => Err(e),
        },
        Command::Experiment(a) => experiment(a),
        Command::Oracle(c) => oracle_cmd(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if e.is::<Usage>() { 2 } else { 1 })
        }
    }
}
