use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use geoflow_core::harness::{self, EXIT_CONFIG, EXIT_INVARIANT_FAILURE, EXIT_OK, EXIT_RANK_LOSS};
use geoflow_core::{
    compare, generate_dataset, run, verify_table, DataLaw, Error, FlowChoice, FlowKind, RunConfig,
    RunRecord, Tolerances, TrajectoryTable,
};

#[derive(Parser)]
#[command(
    name = "geoflow",
    version,
    about = "Integrate and verify adapted gradient flows on small networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// Replace the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Replace the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Flow kind: standard, overparam, underparam, comparison or auto.
    #[arg(long)]
    flow: Option<FlowChoice>,
    /// Target cost for the stopping-time rule.
    #[arg(long)]
    eps: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one config and write trajectory.csv, verification.json and run.json.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run configs sharing network, dataset and seed, and tabulate them.
    Compare {
        #[arg(required = true)]
        configs: Vec<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Write a synthetic dataset as inputs.csv and outputs.csv.
    GenData {
        #[arg(long, short = 'm')]
        inputs: usize,
        #[arg(long, short = 'q')]
        outputs: usize,
        #[arg(long, short = 'n')]
        samples: usize,
        #[arg(long, default_value = "gaussian")]
        law: DataLaw,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Recheck a trajectory CSV. The flow kind defaults to the one recorded in
    /// a sibling run.json.
    Verify {
        trajectory: PathBuf,
        #[arg(long)]
        flow: Option<FlowKind>,
    },
}

fn apply(mut cfg: RunConfig, o: &Overrides) -> anyhow::Result<RunConfig> {
    if let Some(seed) = o.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &o.out {
        // relative to the working directory, not the config file
        let out = std::path::absolute(out)?;
        cfg = cfg.with_output_dir(out);
    }
    if let Some(flow) = o.flow {
        cfg = cfg.with_flow(flow);
    }
    if let Some(eps) = o.eps {
        cfg = cfg.with_eps(eps)?;
    }
    Ok(cfg)
}

fn cmd_run(path: &Path, o: &Overrides) -> anyhow::Result<i32> {
    let cfg = apply(RunConfig::load(path)?, o)?;
    let outcome = run(&cfg)?;
    let r = &outcome.record;
    println!(
        "{}: {} at s = {:.6e}, C = {:.6e} (C0 = {:.6e}), {} steps",
        r.flow,
        r.termination.label(),
        r.final_s,
        r.final_cost,
        r.initial_cost,
        r.accepted_steps
    );
    if let Some(fit) = r.rate_fit {
        println!(
            "fitted rate {:.6e} (2/N = {:.6e})",
            fit.lambda_hat,
            2.0 / r.n as f64
        );
    }
    for c in r.verification.failures() {
        println!(
            "FAIL {}: measured {:.3e}, tolerance {:.3e}",
            c.name, c.measured, c.tolerance
        );
    }
    println!("wrote {}", cfg.output_path().display());
    Ok(outcome.exit_code())
}

fn cmd_compare(paths: &[PathBuf], o: &Overrides) -> anyhow::Result<i32> {
    let configs = paths
        .iter()
        .map(|p| apply(RunConfig::load(p)?, o))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let cmp = compare(&configs)?;
    print!("{}", cmp.to_text());
    Ok(cmp
        .outcomes
        .iter()
        .map(|o| o.exit_code())
        .max()
        .unwrap_or(EXIT_OK))
}

fn cmd_gen_data(
    m: usize,
    q: usize,
    n: usize,
    law: DataLaw,
    seed: u64,
    out: &Path,
) -> anyhow::Result<i32> {
    let data = generate_dataset(m, q, n, law, seed)?;
    std::fs::create_dir_all(out)?;
    data.write_csv(&out.join("inputs.csv"), &out.join("outputs.csv"))?;
    println!("wrote {} samples to {}", data.len(), out.display());
    Ok(EXIT_OK)
}

fn recorded_flow(trajectory: &Path) -> Option<FlowKind> {
    let record = trajectory.with_file_name(harness::RECORD_FILE);
    let text = std::fs::read_to_string(record).ok()?;
    serde_json::from_str::<RunRecord>(&text)
        .ok()
        .map(|r| r.flow)
}

fn cmd_verify(path: &Path, flow: Option<FlowKind>) -> anyhow::Result<i32> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let table = TrajectoryTable::read(file)?;
    let kind = flow.or_else(|| recorded_flow(path));
    if kind.is_none() {
        log::warn!("flow kind unknown, running kind-independent checks only");
    }
    let report = verify_table(&table, kind, &Tolerances::default());
    println!("{}", report.to_json());
    Ok(if report.all_pass() {
        EXIT_OK
    } else {
        EXIT_INVARIANT_FAILURE
    })
}

fn error_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<Error>() {
        Some(Error::RankDeficient { .. }) => EXIT_RANK_LOSS,
        _ => EXIT_CONFIG,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { config, overrides } => cmd_run(config, overrides),
        Command::Compare { configs, overrides } => cmd_compare(configs, overrides),
        Command::GenData {
            inputs,
            outputs,
            samples,
            law,
            seed,
            out,
        } => cmd_gen_data(*inputs, *outputs, *samples, *law, *seed, out),
        Command::Verify { trajectory, flow } => cmd_verify(trajectory, *flow),
    };
    let code = result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        error_code(&e)
    });
    ExitCode::from(code as u8)
}
