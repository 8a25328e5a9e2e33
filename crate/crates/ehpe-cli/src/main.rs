//! `ehpe` — synthetic-data generation, two-phase training, evaluation, and
//! ablation suites for the segmented 2.5D hand-pose estimator.
//!
//! Exit codes are a stable contract: 0 success, 2 usage error, 3 data error
//! (missing or malformed files, degenerate inputs), 4 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ehpe_cli::ablate::{self, AblateRequest};
use ehpe_cli::evalrun::{run_eval, EvalRequest, JointScope};
use ehpe_cli::manifest::{write_text, RunManifest};
use ehpe_cli::trainer::{self, Phase, TrainConfig};
use ehpe_core::config::ModelConfig;
use ehpe_core::metrics::default_thresholds;
use ehpe_core::{Error, Result};
use ehpe_handsim::{generate_dataset, GenParams, Split};

#[derive(Parser)]
#[command(
    name = "ehpe",
    version,
    about = "Segmented 2.5D hand-pose estimation: synthetic data, two-phase training, evaluation, ablations"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    Tw,
    Pg,
}

#[derive(Clone, Copy, ValueEnum)]
enum JointsArg {
    /// All 21 joints.
    Full,
    /// Only the first stage's supervised joints.
    Supervised,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic hand dataset (deterministic in --seed).
    GenData {
        /// Number of samples (at least 1).
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write the run manifest to this path.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train one phase of the two-phase protocol.
    Train {
        #[arg(long, value_enum)]
        phase: PhaseArg,
        /// Training config as JSON; omitted fields take the phase defaults,
        /// unknown fields are rejected.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Checkpoint output path.
        #[arg(long)]
        out: Option<PathBuf>,
        /// First-stage checkpoint to freeze (required for --phase pg).
        #[arg(long)]
        tw_checkpoint: Option<PathBuf>,
        /// Newline-delimited JSON epoch metrics.
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Score a checkpoint (or ground truth with --oracle) on a dataset split.
    Eval {
        /// Checkpoint to score; optional only with --oracle.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        /// JSON report output path.
        #[arg(long)]
        report: PathBuf,
        /// Category CSV output path (default: report path with .csv).
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Model config as JSON (must match the checkpoint's architecture).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = JointsArg::Full)]
        joints: JointsArg,
        /// Score ground truth against itself (pipeline self-check).
        #[arg(long)]
        oracle: bool,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Run one ablation suite at a smoke budget and emit its table.
    Ablate {
        /// One of: table3, table4, table5, table6.
        #[arg(long)]
        suite: String,
        #[arg(long)]
        dataset: PathBuf,
        /// Training epochs per phase for every row.
        #[arg(long, default_value_t = 5)]
        budget: usize,
        /// Rows trained concurrently.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        /// Directory for per-row checkpoints and the suite report.
        #[arg(long, default_value = "ablate-out")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

/// EHPE_SEED overrides every other seed source when set.
fn env_seed() -> Result<Option<u64>> {
    match std::env::var("EHPE_SEED") {
        Ok(s) => s
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|_| Error::config(format!("EHPE_SEED must be an unsigned integer, got '{s}'"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Error::config(format!("EHPE_SEED is not valid unicode: {e}"))),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| match e.classify() {
        // Well-formed JSON that violates the schema (unknown key, wrong
        // type) is a usage error; broken JSON is a data error.
        serde_json::error::Category::Data => Error::config(format!("{}: {e}", path.display())),
        _ => Error::format(path, e.to_string()),
    })
}

/// Writes a line to stdout, quietly dropping it if the reader has gone away
/// (e.g. the output is piped into `head`); file artifacts still get written.
fn say(text: impl std::fmt::Display) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{text}");
}

fn emit_manifest(man: RunManifest, file: Option<&Path>) -> Result<()> {
    let text = man.finish();
    say(&text);
    if let Some(p) = file {
        write_text(p, &text)?;
    }
    Ok(())
}

fn cmd_gen_data(n: u64, seed: u64, out: &Path, manifest_path: Option<&Path>) -> Result<()> {
    let seed = env_seed()?.unwrap_or(seed);
    let mut man = RunManifest::start(format!("gen-data --n {n} --seed {seed}"));
    let header = generate_dataset(out, n, seed, &GenParams::default())?;
    man.add_artifact(out)?;
    say(format!(
        "wrote {} samples ({}x{}x{} images, depth {}) to {}",
        header.n,
        header.channels,
        header.height,
        header.width,
        header.depth,
        out.display()
    ));
    emit_manifest(man, manifest_path)
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    phase: PhaseArg,
    config: Option<&Path>,
    dataset: Option<PathBuf>,
    out: Option<PathBuf>,
    tw_checkpoint: Option<PathBuf>,
    metrics: Option<PathBuf>,
    epochs: Option<usize>,
    seed: Option<u64>,
    manifest_path: Option<&Path>,
) -> Result<()> {
    let mut cfg: TrainConfig = match config {
        Some(p) => read_json(p)?,
        None => match phase {
            PhaseArg::Tw => TrainConfig::default(),
            PhaseArg::Pg => TrainConfig::default_pg(),
        },
    };
    cfg.phase = match phase {
        PhaseArg::Tw => Phase::Tw,
        PhaseArg::Pg => Phase::Pg,
    };
    if let Some(d) = dataset {
        cfg.dataset = d;
    }
    if let Some(o) = out {
        cfg.checkpoint_out = o;
    }
    if let Some(t) = tw_checkpoint {
        cfg.tw_checkpoint = Some(t);
    }
    if let Some(m) = metrics {
        cfg.metrics_out = Some(m);
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(s) = env_seed()? {
        cfg.seed = s;
    }
    cfg.validate()?;

    let mut man = RunManifest::start(format!("train --phase {:?}", cfg.phase));
    man.set_config_bytes(serde_json::to_string(&cfg).expect("config serializes").as_bytes());
    man.set_dataset(&cfg.dataset)?;

    let outcome = trainer::train(&cfg)?;
    let pairs: Vec<String> = outcome
        .term_names
        .iter()
        .enumerate()
        .map(|(i, n)| format!("{n} {:.6} -> {:.6}", outcome.initial_terms[i], outcome.final_terms[i]))
        .collect();
    say(format!("trained {} epochs in {:.1}s: {}", cfg.epochs, outcome.wall_ms as f64 / 1e3, pairs.join(", ")));
    match outcome.val_pa_mpjpe {
        Some(pa) => say(format!("validation MPJPE {:.4}, PA-MPJPE {pa:.4} (world units)", outcome.val_mpjpe)),
        None => say(format!("validation MPJPE {:.4} (world units)", outcome.val_mpjpe)),
    }
    if let Some(h) = &outcome.tw_hash_hex {
        say(format!("frozen first-stage hash {h} (verified unchanged)"));
    }

    man.add_artifact(&outcome.checkpoint)?;
    if let Some(m) = &cfg.metrics_out {
        man.add_artifact(m)?;
    }
    emit_manifest(man, manifest_path)
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    checkpoint: Option<PathBuf>,
    dataset: PathBuf,
    report_path: &Path,
    csv: Option<PathBuf>,
    config: Option<&Path>,
    joints: JointsArg,
    oracle: bool,
    split: SplitArg,
    manifest_path: Option<&Path>,
) -> Result<()> {
    let model: ModelConfig = match config {
        Some(p) => read_json(p)?,
        None => ModelConfig::default(),
    };
    let mut man = RunManifest::start("eval".to_string());
    man.set_config_bytes(serde_json::to_string(&model).expect("config serializes").as_bytes());
    man.set_dataset(&dataset)?;

    let req = EvalRequest {
        checkpoint,
        dataset,
        model,
        split: split.into(),
        scope: match joints {
            JointsArg::Full => JointScope::Full,
            JointsArg::Supervised => JointScope::Supervised,
        },
        oracle,
        thresholds: default_thresholds(),
    };
    let report = run_eval(&req)?;

    write_text(report_path, &report.to_json())?;
    let csv_path = csv.unwrap_or_else(|| report_path.with_extension("csv"));
    write_text(&csv_path, &report.category_csv())?;
    say(format!(
        "MPJPE {:.4}  PA-MPJPE {:.4}  (n={}, {} degenerate excluded, AUC {:.4})",
        report.mpjpe, report.pa_mpjpe, report.n_samples, report.excluded_degenerate, report.pck_auc
    ));
    man.add_artifact(report_path)?;
    man.add_artifact(&csv_path)?;
    emit_manifest(man, manifest_path)
}

fn cmd_ablate(
    suite: String,
    dataset: PathBuf,
    budget: usize,
    parallel: usize,
    out: PathBuf,
    seed: u64,
    manifest_path: Option<&Path>,
) -> Result<()> {
    let seed = env_seed()?.unwrap_or(seed);
    let mut man = RunManifest::start(format!("ablate --suite {suite} --budget {budget} --seed {seed}"));
    let req = AblateRequest { suite, dataset, budget, parallel, out_dir: out, seed };
    let report = ablate::run_suite(&req)?;
    man.set_dataset(&req.dataset)?;
    {
        use std::io::Write;
        let mut out = std::io::stdout().lock();
        let _ = write!(out, "{}", report.render_table());
    }
    man.add_artifact(&req.out_dir.join(format!("{}.json", req.suite)))?;
    man.add_artifact(&req.out_dir.join(format!("{}.txt", req.suite)))?;
    emit_manifest(man, manifest_path)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData { n, seed, out, manifest } => cmd_gen_data(n, seed, &out, manifest.as_deref()),
        Cmd::Train { phase, config, dataset, out, tw_checkpoint, metrics, epochs, seed, manifest } => cmd_train(
            phase,
            config.as_deref(),
            dataset,
            out,
            tw_checkpoint,
            metrics,
            epochs,
            seed,
            manifest.as_deref(),
        ),
        Cmd::Eval { checkpoint, dataset, report, csv, config, joints, oracle, split, manifest } => cmd_eval(
            checkpoint,
            dataset,
            &report,
            csv,
            config.as_deref(),
            joints,
            oracle,
            split,
            manifest.as_deref(),
        ),
        Cmd::Ablate { suite, dataset, budget, parallel, out, seed, manifest } => {
            cmd_ablate(suite, dataset, budget, parallel, out, seed, manifest.as_deref())
        }
    }
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Shape(_) => 2,
        Error::Io { .. } | Error::Format { .. } | Error::Degenerate(_) => 3,
        Error::NonFinite(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
