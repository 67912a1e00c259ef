//! Command-line front end for the switchsync library: single scenario runs,
//! parallel parameter sweeps, standalone gain design, reachability filtering
//! of graph files, and config validation.
//!
//! Exit codes: 0 success, 1 error, 2 run completed but was flagged divergent
//! (so ablation scripts can branch on the outcome without parsing JSON).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use rayon::prelude::*;

use switchsync::gain::{rate_diamond, rate_star, GainDesign, GainError, SystemModel};
use switchsync::link::signal_to_csv;
use switchsync::scenario::{run_with, RunOutput, ScenarioConfig, SignalSource};
use switchsync::sim::{trajectory_to_csv, SimMode};
use switchsync::topology::{compute_theta, parse_edge_list, transform, write_edge_list};

#[derive(Parser)]
#[command(
    name = "switchsync",
    version,
    about = "Leader-follower synchronization over switching communication graphs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one scenario; write trajectory.csv, signal.csv, report.json.
    Run(RunArgs),
    /// Run a (mode x seed x lambda x mu) grid in parallel; aggregate sweep.csv.
    Sweep(SweepArgs),
    /// Synthesize feedback gains for a model file and print the design report.
    Design(DesignArgs),
    /// Apply the reachability filter to an edge-list graph file.
    Transform(TransformArgs),
    /// Check a scenario config file and report the first problem found.
    Validate(ValidateArgs),
}

/// `--mode` values, mirroring the simulation modes.
#[derive(Clone, Copy, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
enum ModeArg {
    Fixed,
    Adaptive,
    ObserverFixed,
    ObserverAdaptive,
    NoTransform,
}

impl From<ModeArg> for SimMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Fixed => SimMode::Fixed,
            ModeArg::Adaptive => SimMode::Adaptive,
            ModeArg::ObserverFixed => SimMode::ObserverFixed,
            ModeArg::ObserverAdaptive => SimMode::ObserverAdaptive,
            ModeArg::NoTransform => SimMode::NoTransform,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Scenario config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory [default: $SWITCHSYNC_OUT/<name> or switchsync_out/<name>].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's simulation mode.
    #[arg(long)]
    mode: Option<ModeArg>,
    /// Overwrite existing output files.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct SweepArgs {
    /// Scenario config (JSON) used as the template for every cell.
    #[arg(long)]
    config: PathBuf,
    /// Output directory [default: $SWITCHSYNC_OUT/<name>_sweep or switchsync_out/<name>_sweep].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Modes to run (comma separated) [default: the config's mode].
    #[arg(long, value_delimiter = ',')]
    modes: Vec<ModeArg>,
    /// Seeds to run (comma separated) [default: the config's seed].
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Repair rates mu to sweep (stochastic-signal scenarios only).
    #[arg(long, value_delimiter = ',')]
    mu: Vec<f64>,
    /// Failure rates lambda to sweep (stochastic-signal scenarios only).
    #[arg(long, value_delimiter = ',')]
    lambda: Vec<f64>,
    /// Maximum parallel jobs (0 = one per CPU).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Overwrite existing output files.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct DesignArgs {
    /// System model (JSON: a, b, optional c, rho, f).
    model: PathBuf,
    /// Riccati scaling for the gain synthesis.
    #[arg(long, default_value_t = 1.0)]
    kappa_star: f64,
    /// Optional edge-list graph; adds network rate figures to the report.
    #[arg(long)]
    graph: Option<PathBuf>,
}

#[derive(Args)]
struct TransformArgs {
    /// Edge-list graph file (lines: `n N`, `pin I`, `arc FROM TO`, 1-based).
    graph: PathBuf,
}

#[derive(Args)]
struct ValidateArgs {
    /// Scenario config (JSON).
    config: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Design(args) => cmd_design(args),
        Command::Transform(args) => cmd_transform(args),
        Command::Validate(args) => cmd_validate(args),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

/// Output root: $SWITCHSYNC_OUT if set, else ./switchsync_out.
fn out_root() -> PathBuf {
    std::env::var_os("SWITCHSYNC_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("switchsync_out"))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn load_config(path: &Path) -> Result<ScenarioConfig> {
    let text = read_file(path)?;
    let config: ScenarioConfig = serde_json::from_str(&text)
        .with_context(|| format!("malformed config {}", path.display()))?;
    Ok(config)
}

fn load_model(path: &Path) -> Result<SystemModel> {
    let text = read_file(path)?;
    let model: SystemModel = serde_json::from_str(&text)
        .with_context(|| format!("malformed model {}", path.display()))?;
    model
        .validate()
        .with_context(|| format!("invalid model {}", path.display()))?;
    Ok(model)
}

/// Write-temp-then-rename so concurrent readers never see partial files.
fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).with_context(|| format!("cannot write {}", tmp.display()))?;
    fs::rename(&tmp, path)
        .with_context(|| format!("cannot rename {} into place", tmp.display()))?;
    Ok(())
}

const RUN_FILES: [&str; 3] = ["trajectory.csv", "signal.csv", "report.json"];

fn refuse_overwrite(dir: &Path, files: &[&str], force: bool) -> Result<()> {
    if force {
        return Ok(());
    }
    for f in files {
        let p = dir.join(f);
        if p.exists() {
            bail!(
                "refusing to overwrite {}; pass --force to replace existing output",
                p.display()
            );
        }
    }
    Ok(())
}

/// Execute one run and write its three artifacts into `dir`.
fn write_run(dir: &Path, out: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    write_atomic(
        &dir.join("trajectory.csv"),
        &trajectory_to_csv(&out.trajectory),
    )?;
    write_atomic(&dir.join("signal.csv"), &signal_to_csv(&out.signal))?;
    let report = serde_json::to_string_pretty(&out.report).context("serialize report")? + "\n";
    write_atomic(&dir.join("report.json"), &report)?;
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<ExitCode> {
    let config = load_config(&args.config)?;
    let dir = args.out.unwrap_or_else(|| out_root().join(&config.name));
    fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    refuse_overwrite(&dir, &RUN_FILES, args.force)?;
    let out = run_with(&config, args.mode.map(Into::into), args.seed)?;
    write_run(&dir, &out)?;
    let r = &out.report;
    println!(
        "run {} mode {} seed {}: decay_ratio {} diverged {} -> {}",
        r.name,
        r.mode,
        r.seed,
        r.error_decay_ratio
            .map_or_else(|| "n/a".into(), |v| format!("{v:.6e}")),
        r.diverged,
        dir.display()
    );
    Ok(if r.diverged {
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    })
}

fn cmd_transform(args: TransformArgs) -> Result<ExitCode> {
    let text = read_file(&args.graph)?;
    let graph =
        parse_edge_list(&text).with_context(|| format!("cannot parse {}", args.graph.display()))?;
    let t = transform(&graph);
    // The beta edge list is itself a valid input file, so the output
    // re-parses and re-transforms to exactly the same text (idempotence).
    print!("{}", write_edge_list(&t.beta));
    let ones = |set: &[usize]| {
        set.iter()
            .map(|i| (i + 1).to_string())
            .collect::<Vec<_>>()
            .join(" ")
    };
    println!("# v_star {}", ones(&t.v_star));
    println!("# v_diamond {}", ones(&t.v_diamond));
    Ok(ExitCode::SUCCESS)
}

fn cmd_design(args: DesignArgs) -> Result<ExitCode> {
    let model = load_model(&args.model)?;
    let design = match GainDesign::for_control(&model, args.kappa_star) {
        Err(GainError::Uncontrollable) => {
            bail!("uncontrollable pair: gain synthesis requires a controllable (A, B)")
        }
        other => other.context("gain synthesis failed")?,
    };
    let mut report = serde_json::to_value(&design).context("serialize design")?;
    if let Some(graph_path) = &args.graph {
        let text = read_file(graph_path)?;
        let graph = parse_edge_list(&text)
            .with_context(|| format!("cannot parse {}", graph_path.display()))?;
        let t = transform(&graph);
        let obj = report
            .as_object_mut()
            .expect("design serializes to an object");
        if !t.v_star.is_empty() {
            // Unit coupling gains: the rate figures then depend only on the
            // design and the network, which is what a standalone report can say.
            let kappas = vec![1.0; t.beta.n_nodes()];
            let theta =
                compute_theta(&t.h_star, args.kappa_star).context("theta construction failed")?;
            let rs = rate_star(&design, &t, &kappas, &theta, model.rho)?;
            obj.insert("rate_star".into(), serde_json::json!(rs));
        }
        if !t.v_diamond.is_empty() {
            let kappas_d = vec![1.0; t.v_diamond.len()];
            let theta_d = DVector::from_element(t.v_diamond.len(), 1.0);
            let rd = rate_diamond(&model, &kappas_d, &theta_d)?;
            obj.insert("rate_diamond".into(), serde_json::json!(rd));
        }
        // 1-based agent ids, matching the edge-list and config file formats.
        let ones = |set: &[usize]| set.iter().map(|i| i + 1).collect::<Vec<_>>();
        obj.insert("v_star".into(), serde_json::json!(ones(&t.v_star)));
        obj.insert("v_diamond".into(), serde_json::json!(ones(&t.v_diamond)));
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&report).context("serialize report")?
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_validate(args: ValidateArgs) -> Result<ExitCode> {
    let config = load_config(&args.config)?;
    config
        .validate()
        .with_context(|| format!("invalid config {}", args.config.display()))?;
    println!(
        "ok: {} ({} agents, state dim {}, horizon {})",
        config.name,
        config.n_agents()?,
        config.model.state_dim(),
        config.horizon
    );
    Ok(ExitCode::SUCCESS)
}

/// One cell of the sweep grid.
struct Cell {
    mode: SimMode,
    seed: u64,
    lambda: Option<f64>,
    mu: Option<f64>,
}

impl Cell {
    fn dir_name(&self) -> String {
        let mut s = format!("{}_s{}", self.mode, self.seed);
        if let Some(l) = self.lambda {
            s.push_str(&format!("_lam{l}"));
        }
        if let Some(m) = self.mu {
            s.push_str(&format!("_mu{m}"));
        }
        s
    }
}

/// Minimal CSV quoting: wrap fields containing separators or quotes.
fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn cmd_sweep(args: SweepArgs) -> Result<ExitCode> {
    let config = load_config(&args.config)?;
    let stochastic = matches!(config.signal, SignalSource::Stochastic { .. });
    if !stochastic && (!args.mu.is_empty() || !args.lambda.is_empty()) {
        bail!("--mu/--lambda only apply to stochastic-signal scenarios; this config uses a cyclic schedule");
    }
    let modes: Vec<SimMode> = if args.modes.is_empty() {
        vec![config.effective_mode()]
    } else {
        args.modes.iter().copied().map(Into::into).collect()
    };
    let seeds = if args.seeds.is_empty() {
        vec![config.seed]
    } else {
        args.seeds.clone()
    };
    let lambdas: Vec<Option<f64>> = if args.lambda.is_empty() {
        vec![None]
    } else {
        args.lambda.iter().copied().map(Some).collect()
    };
    let mus: Vec<Option<f64>> = if args.mu.is_empty() {
        vec![None]
    } else {
        args.mu.iter().copied().map(Some).collect()
    };

    let mut cells = Vec::new();
    for &mode in &modes {
        for &seed in &seeds {
            for &lambda in &lambdas {
                for &mu in &mus {
                    cells.push(Cell {
                        mode,
                        seed,
                        lambda,
                        mu,
                    });
                }
            }
        }
    }

    let dir = args
        .out
        .unwrap_or_else(|| out_root().join(format!("{}_sweep", config.name)));
    fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    refuse_overwrite(&dir, &["sweep.csv"], args.force)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs)
        .build()
        .context("cannot build thread pool")?;

    // Each job is fully independent; rows come back in grid order so the
    // aggregate file is bit-identical across repeats regardless of timing.
    let rows: Vec<String> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let mut c = config.clone();
                if let SignalSource::Stochastic {
                    lambda_fail,
                    mu_repair,
                    ..
                } = &mut c.signal
                {
                    if let Some(l) = cell.lambda {
                        *lambda_fail = l;
                    }
                    if let Some(m) = cell.mu {
                        *mu_repair = m;
                    }
                }
                let (lam, mu) = match &c.signal {
                    SignalSource::Stochastic {
                        lambda_fail,
                        mu_repair,
                        ..
                    } => (lambda_fail.to_string(), mu_repair.to_string()),
                    SignalSource::Cyclic { .. } => (String::new(), String::new()),
                };
                let cell_dir = dir.join(cell.dir_name());
                let result = run_with(&c, Some(cell.mode), Some(cell.seed))
                    .map_err(anyhow::Error::from)
                    .and_then(|out| write_run(&cell_dir, &out).map(|()| out));
                match result {
                    Ok(out) => {
                        let r = &out.report;
                        format!(
                            "{},{},{},{},{},{},{},{},{},{},ok",
                            csv_field(&r.name),
                            r.mode,
                            r.seed,
                            lam,
                            mu,
                            r.error_decay_ratio.map_or(String::new(), |v| v.to_string()),
                            r.terminal_max_error,
                            r.max_error_over_run,
                            r.diverged,
                            csv_field(&cell.dir_name()),
                        )
                    }
                    Err(err) => format!(
                        "{},{},{},{},{},,,,,{},{}",
                        csv_field(&config.name),
                        cell.mode,
                        cell.seed,
                        lam,
                        mu,
                        csv_field(&cell.dir_name()),
                        csv_field(&format!("error: {err:#}")),
                    ),
                }
            })
            .collect()
    });

    let successes = rows.iter().filter(|r| r.ends_with(",ok")).count();
    let mut csv = String::from(
        "name,mode,seed,lambda_fail,mu_repair,decay_ratio,terminal_max_error,max_error_over_run,diverged,dir,status\n",
    );
    for row in &rows {
        csv.push_str(row);
        csv.push('\n');
    }
    write_atomic(&dir.join("sweep.csv"), &csv)?;
    println!(
        "sweep {}: {} / {} runs succeeded -> {}",
        config.name,
        successes,
        rows.len(),
        dir.display()
    );
    Ok(if successes > 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}
