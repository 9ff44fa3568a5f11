use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qtrain::config::{parse_config, MappingKind, TrainConfig};
use qtrain::trainer::{load_datasets, Experiment, ParamBreakdown};
use qtrain::verify::{run_suite, Suite, VerifyOptions};
use qtrain::Error;

/// Train classical networks whose weights come from a simulated quantum
/// circuit and a tensor-network mapping.
#[derive(Debug, Parser)]
#[command(name = "qtrain", version)]
struct Cli {
    #[command(flatten)]
    global: Global,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// JSON config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config value, e.g. `--set run.seed=42` or `--set epochs=0`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Dataset directory, replacing `dataset.data_dir`.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,

    /// Random seed: `run.seed` for training, the instance seed for verify.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory, replacing `run.output_dir`.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run an experiment; writes metrics.csv and checkpoint.qtc.
    Train {
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run numerical self-checks.
    Verify {
        /// gradients, distributed, mps-oracle or all
        #[arg(long, default_value = "all")]
        suite: String,

        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Print the trainable parameter breakdown.
    CountParams {
        /// Also print one summary line per bond dimension.
        #[arg(long, value_delimiter = ',')]
        bond_dims: Vec<usize>,
    },
}

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Data(_) | Error::Domain(_) => EXIT_USAGE,
        Error::Diverged(_) => EXIT_DIVERGED,
        _ => EXIT_FAILURE,
    }
}

fn load_config(global: &Global) -> Result<TrainConfig, Error> {
    let path = global
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required for this command".into()))?;
    let mut overrides = global.overrides.clone();
    if let Some(dir) = &global.data_dir {
        overrides.push(format!("dataset.data_dir={}", json_string(dir)));
    }
    if let Some(seed) = global.seed {
        overrides.push(format!("run.seed={seed}"));
    }
    if let Some(dir) = &global.output_dir {
        overrides.push(format!("run.output_dir={}", json_string(dir)));
    }
    parse_config(path, &overrides).map_err(|e| match e {
        // an unreadable config file is a usage problem
        Error::Io { path, source } => Error::Config(format!("cannot read config {}: {source}", path.display())),
        other => other,
    })
}

fn json_string(path: &std::path::Path) -> String {
    serde_json::Value::String(path.display().to_string()).to_string()
}

fn train(global: &Global, resume: Option<&PathBuf>) -> Result<(), Error> {
    let config = load_config(global)?;
    let (train, test) = load_datasets(&config)?;
    eprintln!(
        "train: {} train / {} test examples, output {}",
        train.len(),
        test.len(),
        config.run.output_dir.display()
    );
    let experiment = match resume {
        Some(ckpt) => Experiment::resume(config, ckpt, &train, &test)?,
        None => Experiment::start(config, &train, &test)?,
    };
    let outcome = experiment.run()?;
    if let Some(last) = outcome.records.last() {
        eprintln!("final: step {} loss {:.6} train_acc {:.4}", last.step, last.loss, last.train_accuracy);
    }
    if let Some(acc) = outcome.final_test_accuracy {
        println!("test_acc={acc}");
    }
    println!("metrics={}", outcome.metrics_path.display());
    println!("checkpoint={}", outcome.checkpoint_path.display());
    Ok(())
}

fn verify(global: &Global, suite: &str, inject_fault: bool) -> Result<bool, Error> {
    let suite: Suite = suite.parse()?;
    let report = run_suite(suite, VerifyOptions { seed: global.seed.unwrap_or(0), inject_fault })?;
    for check in &report.checks {
        println!("{check}");
    }
    let ok = report.all_passed();
    println!("verify: {}", if ok { "all checks passed" } else { "FAILED" });
    Ok(ok)
}

fn count_params(global: &Global, bond_dims: &[usize]) -> Result<(), Error> {
    let config = load_config(global)?;
    let m = config.target_model()?.param_count()?;
    let circuit = config.circuit_spec()?;
    let n = circuit.total_qubits();
    let b = ParamBreakdown::new(circuit.theta_count(), config.mapping.param_count(n), m);
    let mapping_label = match config.mapping.kind {
        MappingKind::Mps => format!("mapping (mps, r={})", config.mapping.bond_dim()),
        MappingKind::Mlp => format!("mapping (mlp, h={})", config.mapping.hidden()),
    };
    println!("qubits N = {n}, splits {:?}, layers L = {}", circuit.splits(), circuit.layers());
    println!("{:<22} {:>10}", "component", "count");
    println!("{:<22} {:>10}", "theta", b.theta);
    println!("{:<22} {:>10}", mapping_label, b.mapping);
    println!("{:<22} {:>10}", "total trainable", b.total);
    println!("{:<22} {:>10}", "target m", b.m);
    println!("{:<22} {:>10.6}", "ratio total/m", b.ratio);
    println!("{}", b.summary_line());
    for &r in bond_dims {
        let mut mapping = config.mapping.clone();
        mapping.kind = MappingKind::Mps;
        mapping.hidden = None;
        mapping.bond_dim = Some(r);
        let swept = ParamBreakdown::new(circuit.theta_count(), mapping.param_count(n), m);
        println!("bond_dim={r} {}", swept.summary_line());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { resume } => train(&cli.global, resume.as_ref()).map(|()| true),
        Command::Verify { suite, inject_fault } => verify(&cli.global, suite, *inject_fault),
        Command::CountParams { bond_dims } => count_params(&cli.global, bond_dims).map(|()| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_FAILURE),
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Diverged(snapshot) = &e {
                eprintln!(
                    "  loss {} |theta|max {} |mapping|max {} |omega|max {}",
                    snapshot.loss, snapshot.theta_max_abs, snapshot.mapping_max_abs, snapshot.omega_max_abs
                );
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
