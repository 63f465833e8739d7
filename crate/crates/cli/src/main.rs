use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{info, warn};

use phiprof_core::analysis::{
    analyze_many, csv_row, run_config_for_dir, validate_run, Analysis, AnalysisOptions, CSV_COLUMNS,
};
use phiprof_core::model::RunConfig;
use phiprof_core::orchestrator::shell::ShellExecutor;
use phiprof_core::orchestrator::simulated::SimulatedExecutor;
use phiprof_core::orchestrator::{enumerate_runs, run_experiment, Executor, ExecutorKind, ExperimentPlan};
use phiprof_core::par::ExecMode;
use phiprof_core::sampler::{run_sampler, RealClock, SamplerKind, SamplerSpec, StopSignal};
use phiprof_core::sync::SyncTolerances;
use phiprof_core::synth::{generate, Scenario};
use phiprof_core::trace::{load_run_dir, APP_OUT};

const REPORT_FILE: &str = "report.json";
const SUMMARY_FILE: &str = "summary.csv";

#[derive(Parser)]
#[command(name = "phiprof", version, about = "Measured runs and power/performance analysis for offloaded applications")]
struct Cli {
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Executor for `run`, overriding the plan.
    #[arg(long, global = true, env = "PHIPROF_EXECUTOR")]
    executor: Option<ExecutorKind>,
    #[arg(long, global = true, default_value_t = 20.0)]
    tolerance_host_ms: f64,
    #[arg(long, global = true, default_value_t = 100.0)]
    tolerance_mic_ms: f64,
    /// Process run directories one at a time.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute every run of an experiment plan.
    Run {
        #[arg(long)]
        plan: PathBuf,
        /// Virtual time runs this many times faster (simulated executor).
        #[arg(long)]
        time_divisor: Option<f64>,
    },
    /// Analyze a run directory or a directory of runs.
    Analyze { dir: PathBuf },
    /// Render a synthetic run with its ground truth.
    Synth {
        /// Scenario file; the built-in default when omitted.
        scenario: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Parse and check artifacts without computing metrics.
    Validate { dir: PathBuf },
    /// Run one sampler until interrupted.
    Sample {
        /// host_live, host_replay or mic_replay.
        #[arg(long)]
        kind: SamplerKind,
        #[arg(long)]
        output: PathBuf,
        /// Recorded log to replay.
        #[arg(long)]
        source: Option<PathBuf>,
        /// Defaults to 10 (host) or 50 (MIC).
        #[arg(long)]
        period_ms: Option<f64>,
        /// Hardware counters for the live host sampler.
        #[arg(long, value_delimiter = ',')]
        counters: Vec<String>,
        /// Defaults to /sys/class/powercap.
        #[arg(long)]
        powercap_root: Option<PathBuf>,
    },
}

/// Failure carrying its exit status.
struct Fail {
    code: u8,
    message: String,
}

fn usage(message: impl Into<String>) -> Fail {
    Fail {
        code: 2,
        message: message.into(),
    }
}

fn runtime(message: impl Into<String>) -> Fail {
    Fail {
        code: 1,
        message: message.into(),
    }
}

fn stop_on_signal() -> StopSignal {
    let stop = StopSignal::new();
    let s = stop.clone();
    if let Err(e) = ctrlc::set_handler(move || s.stop()) {
        warn!("cannot install signal handler: {e}");
    }
    stop
}

fn tolerances(cli: &Cli) -> Result<SyncTolerances, Fail> {
    let t = SyncTolerances {
        host_s: cli.tolerance_host_ms / 1000.0,
        mic_s: cli.tolerance_mic_ms / 1000.0,
    };
    if !(t.host_s >= 0.0 && t.mic_s >= 0.0) {
        return Err(usage("tolerances must be >= 0"));
    }
    Ok(t)
}

fn mode(cli: &Cli) -> ExecMode {
    if cli.sequential {
        ExecMode::Sequential
    } else {
        ExecMode::Parallel
    }
}

fn cmd_run(cli: &Cli, plan_path: &Path, divisor: Option<f64>) -> Result<(), Fail> {
    let text = fs::read_to_string(plan_path).map_err(|e| usage(format!("{}: {e}", plan_path.display())))?;
    let mut plan = ExperimentPlan::from_toml_str(&text).map_err(|e| usage(format!("{}: {e}", plan_path.display())))?;
    if let Some(k) = cli.executor {
        plan.executor = k;
    }
    if let Some(d) = divisor {
        plan.time_divisor = d;
    }
    plan.check().map_err(|e| usage(e.to_string()))?;
    let configs = enumerate_runs(&plan).map_err(|e| usage(e.to_string()))?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("results"));
    info!("{} runs into {}", configs.len(), out.display());
    let stop = stop_on_signal();
    let mut exec: Box<dyn Executor> = match plan.executor {
        ExecutorKind::Simulated => Box::new(SimulatedExecutor::new(&plan)),
        ExecutorKind::Shell => Box::new(ShellExecutor::new(&plan)),
    };
    let (manifest, runs) =
        run_experiment(&plan, exec.as_mut(), &out, &stop).map_err(|e| runtime(e.to_string()))?;
    for r in &runs {
        println!("{}\t{}", r.run_id, r.status);
        for w in &r.warnings {
            eprintln!("warning: {}: {w}", r.run_id);
        }
    }
    if !manifest.complete {
        return Err(runtime(format!(
            "interrupted after {} of {} runs",
            manifest.runs.len(),
            manifest.planned_runs
        )));
    }
    let failed = runs.iter().filter(|r| !r.status.is_ok()).count();
    if failed > 0 {
        return Err(runtime(format!("{failed} of {} runs failed", runs.len())));
    }
    Ok(())
}

/// The directory itself when it holds a run, otherwise its run
/// subdirectories in name order.
fn run_dirs(dir: &Path) -> Result<Vec<PathBuf>, Fail> {
    if !dir.is_dir() {
        return Err(usage(format!("{}: not a directory", dir.display())));
    }
    if dir.join(APP_OUT).exists() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| runtime(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && !p.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.')))
        .collect();
    out.sort();
    if out.is_empty() {
        // a lone run dir missing its application output
        return Ok(vec![dir.to_path_buf()]);
    }
    Ok(out)
}

fn run_name(dir: &Path) -> String {
    dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn cmd_analyze(cli: &Cli, dir: &Path) -> Result<(), Fail> {
    let tol = tolerances(cli)?;
    let dirs = run_dirs(dir)?;
    let single = dirs.len() == 1 && dirs[0] == dir;
    let out_root = cli.out.clone().unwrap_or_else(|| dir.to_path_buf());
    let results = analyze_many(
        &dirs,
        |d| AnalysisOptions {
            config: run_config_for_dir(d, &RunConfig::default()),
            tolerances: tol.clone(),
            ..AnalysisOptions::default()
        },
        mode(cli),
    );
    fs::create_dir_all(&out_root).map_err(|e| runtime(format!("{}: {e}", out_root.display())))?;
    let csv_path = out_root.join(SUMMARY_FILE);
    let mut csv = csv::Writer::from_path(&csv_path).map_err(|e| runtime(format!("{}: {e}", csv_path.display())))?;
    csv.write_record(CSV_COLUMNS).map_err(|e| runtime(e.to_string()))?;
    let mut errors = Vec::new();
    for (d, result) in dirs.iter().zip(results) {
        let id = run_name(d);
        match result {
            Ok(a) => {
                write_report(&out_root, &id, single, &a)?;
                csv.write_record(csv_row(&id, &a)).map_err(|e| runtime(e.to_string()))?;
                for w in &a.warnings {
                    eprintln!("warning: {id}: {w}");
                }
                println!("{id}\tok\t{} warnings", a.warnings.len());
            }
            Err(e) => {
                println!("{id}\tfailed");
                errors.push(format!("{id}: {e}"));
            }
        }
    }
    csv.flush().map_err(|e| runtime(e.to_string()))?;
    if errors.is_empty() {
        Ok(())
    } else {
        Err(runtime(errors.join("\n")))
    }
}

fn write_report(out_root: &Path, id: &str, single: bool, a: &Analysis) -> Result<(), Fail> {
    let dir = if single { out_root.to_path_buf() } else { out_root.join(id) };
    fs::create_dir_all(&dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    let path = dir.join(REPORT_FILE);
    let json = serde_json::to_string_pretty(a).map_err(|e| runtime(e.to_string()))?;
    fs::write(&path, json).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn cmd_synth(cli: &Cli, path: Option<&Path>, seed: Option<u64>) -> Result<(), Fail> {
    let mut scenario = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            Scenario::from_toml_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => Scenario::default(),
    };
    if let Some(s) = seed {
        scenario.seed = s;
    }
    let run = generate(&scenario).map_err(|e| usage(e.to_string()))?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("synth"));
    run.write_to(&out).map_err(|e| runtime(e.to_string()))?;
    for name in run.files.keys() {
        println!("{}", out.join(name).display());
    }
    Ok(())
}

fn cmd_validate(cli: &Cli, dir: &Path) -> Result<(), Fail> {
    let tol = tolerances(cli)?;
    let mut problems = Vec::new();
    for d in run_dirs(dir)? {
        let id = run_name(&d);
        match load_run_dir(&d, mode(cli)) {
            Ok(parsed) => {
                let v = validate_run(&parsed, &tol);
                println!("{id}\t{}", if v.is_empty() { "valid".to_string() } else { format!("{} violations", v.len()) });
                problems.extend(v.into_iter().map(|v| format!("{id}: {v}")));
            }
            Err(e) => {
                println!("{id}\tunparseable");
                problems.push(format!("{id}: {e}"));
            }
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(runtime(problems.join("\n")))
    }
}

fn cmd_sample(
    kind: SamplerKind,
    output: &Path,
    source: Option<&Path>,
    period_ms: Option<f64>,
    counters: &[String],
    powercap_root: Option<&Path>,
) -> Result<(), Fail> {
    let mut spec = SamplerSpec::new(kind, output).with_env_period().map_err(|e| usage(e.to_string()))?;
    spec.source_path = source.map(Path::to_path_buf);
    if let Some(ms) = period_ms {
        spec.period_s = ms / 1000.0;
    }
    spec.counter_names = counters.to_vec();
    spec.powercap_root = powercap_root.map(Path::to_path_buf);
    spec.check().map_err(|e| usage(e.to_string()))?;
    let stop = stop_on_signal();
    let n = run_sampler(&spec, &RealClock::new(), &stop).map_err(|e| runtime(e.to_string()))?;
    info!("{n} samples written to {}", output.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { plan, time_divisor } => cmd_run(&cli, plan, *time_divisor),
        Command::Analyze { dir } => cmd_analyze(&cli, dir),
        Command::Synth { scenario, seed } => cmd_synth(&cli, scenario.as_deref(), *seed),
        Command::Validate { dir } => cmd_validate(&cli, dir),
        Command::Sample {
            kind,
            output,
            source,
            period_ms,
            counters,
            powercap_root,
        } => cmd_sample(*kind, output, source.as_deref(), *period_ms, counters, powercap_root.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
