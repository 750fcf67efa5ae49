use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use prefrl_core::metrics::{Report, REPORT_WINDOW};
use prefrl_core::orchestrator::{oracle_replay, run_experiment, ExperimentConfig};
use prefrl_core::Error;

/// Reinforcement learning from pairwise trajectory preferences.
#[derive(Parser)]
#[command(name = "prefrl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its artifacts to the output directory.
    Train(ConfigArgs),
    /// Serve pending pairs from a human-feedback run over HTTP.
    Serve(ServeArgs),
    /// Run the full method and its six ablations on shared seeds.
    Ablate(AblateArgs),
    /// Summarise metrics files and emit window-averaged curves as CSV.
    Report(ReportArgs),
    /// Re-label a run's stored comparisons with the synthetic oracle.
    OracleReplay(ReplayArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment config. Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set seed=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory. Defaults to `$PREFRL_OUT/<env>-seed<seed>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Root for default output directories.
    #[arg(long, env = "PREFRL_OUT", default_value = "runs")]
    out_root: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    /// Output directory of the human-feedback run.
    #[arg(long)]
    run_dir: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: String,
    /// Environment for the instructions text; read from the run's config when omitted.
    #[arg(long)]
    env: Option<String>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    base: ConfigArgs,
    /// Seeds per variant, starting at the configured seed.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
}

#[derive(Args)]
struct ReportArgs {
    /// Metrics files (`metrics.jsonl`) or run directories containing one.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Records per averaging window.
    #[arg(long, default_value_t = REPORT_WINDOW)]
    window: usize,
    /// Write the CSV here instead of standard output.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    run_dir: PathBuf,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Config(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig, Failure> {
    Ok(match &args.config {
        Some(path) => ExperimentConfig::from_path(path, &args.overrides)?,
        None => ExperimentConfig::from_toml_str("", &args.overrides)?,
    })
}

fn out_dir(args: &ConfigArgs, config: &ExperimentConfig) -> PathBuf {
    args.out
        .clone()
        .unwrap_or_else(|| args.out_root.join(format!("{}-seed{}", config.env.name(), config.seed)))
}

fn echo_config(config: &ExperimentConfig) {
    println!("# effective config");
    print!("{}", config.to_toml());
    println!("# end config");
}

fn train(args: ConfigArgs) -> Result<(), Failure> {
    let config = load_config(&args)?;
    let out = out_dir(&args, &config);
    echo_config(&config);
    println!("output: {}", out.display());
    let summary = run_experiment(&config, Some(&out))?;
    println!(
        "steps {} labels {} final_return {}",
        summary.steps,
        summary.labels,
        summary.final_return.map_or("n/a".into(), |r| format!("{r:.3}"))
    );
    Ok(())
}

fn serve(args: ServeArgs) -> Result<(), Failure> {
    if !args.run_dir.is_dir() {
        return Err(Failure::Config(format!("run directory {} does not exist", args.run_dir.display())));
    }
    let env = args
        .env
        .or_else(|| prefrl_service::env_of_run(&args.run_dir))
        .unwrap_or_else(|| "pendulum".into());
    let runtime = tokio::runtime::Runtime::new()?;
    println!("serving {} on http://{}/api/v1", args.run_dir.display(), args.addr);
    runtime.block_on(prefrl_service::serve(&args.addr, args.run_dir, prefrl_service::ServiceConfig::new(env)))?;
    Ok(())
}

fn ablate(args: AblateArgs) -> Result<(), Failure> {
    let base = load_config(&args.base)?;
    if args.seeds == 0 {
        return Err(Failure::Config("--seeds must be at least 1".into()));
    }
    let root = out_dir(&args.base, &base).with_extension("ablate");
    echo_config(&base);
    let variants = base.ablation_variants()?;
    let mut rows = Vec::new();
    for (name, config) in variants {
        let mut finals = Vec::new();
        let mut failed = None;
        for offset in 0..args.seeds {
            let mut c = config.clone();
            c.seed = config.seed + offset;
            let dir = root.join(format!("{name}-seed{}", c.seed));
            match run_experiment(&c, Some(&dir)) {
                Ok(s) => finals.push(s.final_return),
                Err(e) => {
                    failed = Some(e.to_string());
                    break;
                }
            }
        }
        rows.push((name, finals, failed));
    }
    println!("{:<20} {:>12}  per-seed", "variant", "mean_return");
    let mut csv = String::from("variant,mean_final_return,status\n");
    for (name, finals, failed) in rows {
        let values: Option<Vec<f64>> = finals.iter().copied().collect();
        match (failed, values) {
            (None, Some(v)) if !v.is_empty() => {
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                let per: Vec<String> = v.iter().map(|x| format!("{x:.2}")).collect();
                println!("{name:<20} {mean:>12.2}  {}", per.join(" "));
                csv.push_str(&format!("{name},{mean},ok\n"));
            }
            (Some(why), _) => {
                println!("{name:<20} {:>12}  {why}", "failed");
                csv.push_str(&format!("{name},,failed\n"));
            }
            _ => {
                println!("{name:<20} {:>12}  run too short for a report window", "n/a");
                csv.push_str(&format!("{name},,no_window\n"));
            }
        }
    }
    std::fs::create_dir_all(&root)?;
    std::fs::write(root.join("ablation.csv"), csv)?;
    println!("table: {}", root.join("ablation.csv").display());
    Ok(())
}

fn metrics_file(input: &Path) -> PathBuf {
    if input.is_dir() {
        input.join("metrics.jsonl")
    } else {
        input.to_path_buf()
    }
}

fn report(args: ReportArgs) -> Result<(), Failure> {
    if args.window == 0 {
        return Err(Failure::Config("--window must be at least 1".into()));
    }
    let files: Vec<PathBuf> = args.inputs.iter().map(|p| metrics_file(p)).collect();
    let refs: Vec<&Path> = files.iter().map(PathBuf::as_path).collect();
    let report = Report::build(&refs, args.window);
    for (name, why) in &report.skipped {
        eprintln!("warning: skipped {name}: {why}");
    }
    if report.runs.is_empty() {
        return Err(Failure::Runtime("no readable metrics files".into()));
    }
    match &args.csv {
        Some(path) => {
            std::fs::write(path, report.to_csv())?;
            print!("{}", report.summary());
        }
        None => {
            print!("{}", report.to_csv());
            eprint!("{}", report.summary());
        }
    }
    Ok(())
}

fn replay(args: ReplayArgs) -> Result<(), Failure> {
    let r = oracle_replay(&args.run_dir)?;
    println!(
        "records {} agree {} disagree {} tie_mismatch {} agreement {}",
        r.records,
        r.agree,
        r.disagree,
        r.tie_mismatch,
        r.agreement().map_or("n/a".into(), |a| format!("{a:.4}"))
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Serve(a) => serve(a),
        Command::Ablate(a) => ablate(a),
        Command::Report(a) => report(a),
        Command::OracleReplay(a) => replay(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
