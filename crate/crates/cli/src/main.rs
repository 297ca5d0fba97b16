//! Command-line front end: runs searches, simulates and compares
//! deployment plans, derives compact models from saved states, and
//! generates synthetic latency tables.
//!
//! Exit codes: 0 success, 1 usage error, 2 input validation error,
//! 3 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use splitnas::search::{history_to_tsv, SavedState};
use splitnas::{
    build_assignment, compare_with_cloud, simulate, synthesize_table, validate_trace,
    DeploymentPlan, Error as CoreError, LatencyTable, RunConfig, SplitDataset, Topology,
};

const OUT_DIR_ENV: &str = "SPLITNAS_OUT";

#[derive(Parser)]
#[command(
    name = "splitnas",
    version,
    about = "Joint architecture search and multi-split deployment over simulated edge networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Output directory for run artifacts (default: $SPLITNAS_OUT, then ./splitnas-out)
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Override the config seed
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Print per-epoch progress
    #[arg(long, global = true)]
    verbose: bool,
}

#[derive(Args)]
struct TableSource {
    /// Latency table file (tab-separated exec/comm records)
    #[arg(long)]
    latency_table: Option<PathBuf>,

    /// Synthesize the table from the topology and the model config
    #[arg(long)]
    synthesize_table: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run the two-stage search and write plan, history, report, state and manifest
    Search {
        /// Topology config file
        #[arg(long)]
        topology: PathBuf,
        /// Search/model/data config file
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        table: TableSource,
        /// Override the latency constraint, in milliseconds
        #[arg(long)]
        tconst: Option<f64>,
    },
    /// Simulate a deployment plan and print its completion latency
    Simulate {
        /// Deployment plan file
        #[arg(long)]
        plan: PathBuf,
        /// Write the event trace to this file (tab-separated)
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Compare a split deployment against the cloud-only baseline
    Compare {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        topology: PathBuf,
        #[command(flatten)]
        table: TableSource,
        /// Model config; required with --synthesize-table
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Derive the compact architecture from a saved search state
    Derive {
        /// state.json written by `search`
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        topology: PathBuf,
        #[command(flatten)]
        table: TableSource,
    },
    /// Generate a synthetic latency table for a topology and model config
    GenTable {
        #[arg(long)]
        topology: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Output file (default: <out>/table.tsv)
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

enum CliError {
    Usage(String),
    Validation(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Validation(m) | CliError::Runtime(m) => m,
        }
    }
}

/// Errors raised while reading and checking inputs are validation
/// failures; anything after that is a runtime failure.
fn validation(err: CoreError) -> CliError {
    CliError::Validation(err.to_string())
}

fn runtime(err: CoreError) -> CliError {
    match err {
        CoreError::NonFinite { .. } | CoreError::Simulation(_) => {
            CliError::Runtime(err.to_string())
        }
        other => CliError::Validation(other.to_string()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not errors.
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn out_dir(cli_out: &Option<PathBuf>) -> PathBuf {
    cli_out
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("splitnas-out"))
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

fn read_input(path: &Path, manifest: &mut Manifest) -> Result<String, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    manifest.record_input(path, text.as_bytes());
    Ok(text)
}

/// Writes through a temp file and renames, so partial artifacts never
/// appear under the final name.
fn write_atomic(path: &Path, contents: &str) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, path)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

#[derive(Serialize)]
struct FileDigest {
    path: String,
    sha256: String,
}

/// Everything needed to reproduce a run: the exact command, resolved
/// config, seed, input digests and produced outputs.
#[derive(Serialize)]
struct Manifest {
    command: String,
    argv: Vec<String>,
    tool_version: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    started_unix_ms: u128,
    finished_unix_ms: u128,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<RunConfig>,
}

impl Manifest {
    fn new(command: &str) -> Self {
        Manifest {
            command: command.to_string(),
            argv: std::env::args().skip(1).collect(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: None,
            started_unix_ms: now_ms(),
            finished_unix_ms: 0,
            inputs: Vec::new(),
            outputs: Vec::new(),
            config: None,
        }
    }

    fn record_input(&mut self, path: &Path, bytes: &[u8]) {
        self.inputs.push(FileDigest {
            path: path.display().to_string(),
            sha256: sha256_hex(bytes),
        });
    }

    fn write_output(&mut self, path: &Path, contents: &str) -> Result<(), CliError> {
        write_atomic(path, contents)?;
        self.outputs.push(FileDigest {
            path: path.display().to_string(),
            sha256: sha256_hex(contents.as_bytes()),
        });
        Ok(())
    }

    /// Finalizes and writes the manifest itself, atomically.
    fn finish(mut self, dir: &Path) -> Result<(), CliError> {
        self.finished_unix_ms = now_ms();
        let text = toml::to_string(&self)
            .map_err(|e| CliError::Runtime(format!("manifest serialization: {e}")))?;
        write_atomic(&dir.join("manifest.toml"), &text)
    }
}

fn ensure_out_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))
}

fn load_table(
    source: &TableSource,
    topo: &Topology,
    config: Option<&RunConfig>,
    manifest: &mut Manifest,
) -> Result<LatencyTable, CliError> {
    match (&source.latency_table, source.synthesize_table) {
        (Some(path), false) => {
            let text = read_input(path, manifest)?;
            LatencyTable::parse(&text).map_err(validation)
        }
        (None, true) => {
            let config = config.ok_or_else(|| {
                CliError::Usage("--synthesize-table needs a model config (--config)".to_string())
            })?;
            let specs = config.model.candidate_specs().map_err(validation)?;
            synthesize_table(
                topo,
                &config.data.input_shape(),
                config.model.layers,
                &specs,
            )
            .map_err(validation)
        }
        (Some(_), true) => Err(CliError::Usage(
            "--latency-table and --synthesize-table are mutually exclusive".to_string(),
        )),
        (None, false) => Err(CliError::Usage(
            "provide --latency-table FILE or --synthesize-table".to_string(),
        )),
    }
}

/// 1-based view of an architecture for the report file.
#[derive(Serialize)]
struct ReportFile {
    tool_version: String,
    seed: u64,
    t_const_ms: f64,
    architecture: Vec<usize>,
    ops: Vec<String>,
    val_accuracy: f64,
    pre_retrain_val_accuracy: f64,
    expected_latency_ms: f64,
    simulated_latency_ms: f64,
    final_objective: f64,
    warmup_epochs: usize,
    search_epochs: usize,
    retrain_epochs: usize,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let dir = out_dir(&cli.out);
    match &cli.command {
        Command::Search {
            topology,
            config,
            table,
            tconst,
        } => {
            let mut manifest = Manifest::new("search");
            let topo_text = read_input(topology, &mut manifest)?;
            let topo = Topology::parse(&topo_text).map_err(validation)?;
            let config_text = read_input(config, &mut manifest)?;
            let mut run_config = RunConfig::parse(&config_text).map_err(validation)?;
            if let Some(seed) = cli.seed {
                run_config.search.seed = seed;
            }
            if let Some(tconst) = tconst {
                run_config.search.t_const_ms = *tconst;
            }
            run_config.validate().map_err(validation)?;
            let latency_table = load_table(table, &topo, Some(&run_config), &mut manifest)?;
            manifest.seed = Some(run_config.search.seed);
            manifest.config = Some(run_config.clone());

            let data = SplitDataset::generate(&run_config.data).map_err(validation)?;
            let (state, report) =
                splitnas::run_pipeline(&data, &topo, &latency_table, &run_config)
                    .map_err(runtime)?;

            if cli.verbose {
                for r in &report.history {
                    println!(
                        "{} epoch {}: loss {:.4}, E[T] {:.4} ms, penalty {:.4}, val acc {:.3}",
                        r.phase, r.epoch, r.loss, r.expected_latency_ms, r.penalty, r.val_accuracy
                    );
                }
            }

            ensure_out_dir(&dir)?;
            let plan = report.plan.as_ref().expect("pipeline always builds a plan");
            manifest.write_output(&dir.join("plan.toml"), &plan.to_toml())?;
            manifest.write_output(&dir.join("history.tsv"), &history_to_tsv(&report.history))?;
            let report_file = ReportFile {
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                seed: run_config.search.seed,
                t_const_ms: report.t_const_ms,
                architecture: report.architecture.iter().map(|i| i + 1).collect(),
                ops: report.ops.clone(),
                val_accuracy: report.val_accuracy,
                pre_retrain_val_accuracy: report.pre_retrain_val_accuracy,
                expected_latency_ms: report.expected_latency_ms,
                simulated_latency_ms: report.simulated_latency_ms,
                final_objective: report.final_objective,
                warmup_epochs: run_config.search.warmup_epochs,
                search_epochs: run_config.search.search_epochs,
                retrain_epochs: run_config.search.retrain_epochs,
            };
            let report_text = toml::to_string(&report_file)
                .map_err(|e| CliError::Runtime(format!("report serialization: {e}")))?;
            manifest.write_output(&dir.join("report.toml"), &report_text)?;
            manifest.write_output(&dir.join("state.json"), &SavedState::of(&state).to_json())?;
            manifest.finish(&dir)?;

            println!("derived architecture: {}", report.ops.join(", "));
            println!("validation accuracy: {:.3}", report.val_accuracy);
            println!(
                "expected latency: {:.3} ms (constraint {:.3} ms)",
                report.expected_latency_ms, report.t_const_ms
            );
            println!("simulated latency: {:.3} ms", report.simulated_latency_ms);
            println!("artifacts written to {}", dir.display());
            Ok(())
        }
        Command::Simulate { plan, trace } => {
            let mut manifest = Manifest::new("simulate");
            let plan_text = read_input(plan, &mut manifest)?;
            let plan = DeploymentPlan::parse(&plan_text).map_err(validation)?;
            let result = simulate(&plan).map_err(runtime)?;
            let violations = validate_trace(&result.trace, &plan);
            if !violations.is_empty() {
                for v in &violations {
                    eprintln!("trace violation: {v}");
                }
                return Err(CliError::Runtime(format!(
                    "simulation produced {} trace violations",
                    violations.len()
                )));
            }
            println!("completion latency: {:.3} ms", result.completion_ms);
            if cli.verbose {
                println!("events: {}", result.trace.events.len());
            }
            ensure_out_dir(&dir)?;
            if let Some(trace_path) = trace {
                manifest.write_output(trace_path, &result.trace.to_tsv())?;
            }
            manifest.finish(&dir)?;
            Ok(())
        }
        Command::Compare {
            plan,
            topology,
            table,
            config,
        } => {
            let mut manifest = Manifest::new("compare");
            let plan_text = read_input(plan, &mut manifest)?;
            let plan = DeploymentPlan::parse(&plan_text).map_err(validation)?;
            let topo_text = read_input(topology, &mut manifest)?;
            let topo = Topology::parse(&topo_text).map_err(validation)?;
            let run_config = match config {
                Some(path) => {
                    let text = read_input(path, &mut manifest)?;
                    Some(RunConfig::parse(&text).map_err(validation)?)
                }
                None => None,
            };
            let latency_table = load_table(table, &topo, run_config.as_ref(), &mut manifest)?;
            let cmp = compare_with_cloud(&plan, &topo, &latency_table).map_err(runtime)?;
            println!("split deployment: {:.3} ms", cmp.split_ms);
            println!("cloud-only baseline: {:.3} ms", cmp.cloud_ms);
            println!(
                "difference: {:.1}% (positive means the split deployment is faster)",
                cmp.reduction_pct
            );
            ensure_out_dir(&dir)?;
            manifest.finish(&dir)?;
            Ok(())
        }
        Command::Derive {
            state,
            topology,
            table,
        } => {
            let mut manifest = Manifest::new("derive");
            let state_text = read_input(state, &mut manifest)?;
            let saved = SavedState::parse(&state_text).map_err(validation)?;
            let topo_text = read_input(topology, &mut manifest)?;
            let topo = Topology::parse(&topo_text).map_err(validation)?;
            let latency_table = load_table(table, &topo, Some(&saved.config), &mut manifest)?;
            manifest.seed = Some(saved.config.search.seed);

            let arch = saved.net.derive_compact();
            let assignment =
                build_assignment(saved.config.model.layers, &topo).map_err(validation)?;
            let specs = saved.config.model.candidate_specs().map_err(validation)?;
            let plan = DeploymentPlan::build(
                "derived",
                &topo,
                &assignment,
                &latency_table,
                &arch,
                &specs,
                &saved.config.data.input_shape(),
            )
            .map_err(runtime)?;
            let ops: Vec<String> = arch.iter().map(|&i| specs[i].name()).collect();
            println!("derived architecture: {}", ops.join(", "));
            println!(
                "analytic latency: {:.3} ms",
                plan.analytic_latency_ms().map_err(runtime)?
            );
            ensure_out_dir(&dir)?;
            manifest.write_output(&dir.join("plan.toml"), &plan.to_toml())?;
            manifest.finish(&dir)?;
            Ok(())
        }
        Command::GenTable {
            topology,
            config,
            output,
        } => {
            let mut manifest = Manifest::new("gen-table");
            let topo_text = read_input(topology, &mut manifest)?;
            let topo = Topology::parse(&topo_text).map_err(validation)?;
            let config_text = read_input(config, &mut manifest)?;
            let run_config = RunConfig::parse(&config_text).map_err(validation)?;
            let specs = run_config.model.candidate_specs().map_err(validation)?;
            let table = synthesize_table(
                &topo,
                &run_config.data.input_shape(),
                run_config.model.layers,
                &specs,
            )
            .map_err(validation)?;
            ensure_out_dir(&dir)?;
            let path = output.clone().unwrap_or_else(|| dir.join("table.tsv"));
            manifest.write_output(&path, &table.to_tsv())?;
            manifest.finish(&dir)?;
            println!("latency table written to {}", path.display());
            Ok(())
        }
    }
}
