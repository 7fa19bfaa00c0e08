//! Command-line driver: data generation, staged training, evaluation under
//! routing-policy ablations, and single-sample routing inspection.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/checkpoint error,
//! 3 training divergence.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vismoe::pipeline::ablate::{ablate, Policy};
use vismoe::pipeline::checkpoint as ckpt_io;
use vismoe::pipeline::metrics::MetricsWriter;
use vismoe::pipeline::{
    init_checkpoint, route_image, run_stage, Checkpoint, StageKind, StageSummary,
};
use vismoe::profile::Profile;
use vismoe::router::ExpertId;
use vismoe::synthdata::{gen_dataset, load_dataset, read_records, DatasetManifest};
use vismoe::{Error, Result};

use config::RunConfig;

/// The only precision available; the variable exists so runs can pin it.
const PRECISION_VAR: &str = "VISMOE_PRECISION";

#[derive(Parser)]
#[command(
    name = "vismoe",
    version,
    about = "Routed mixture-of-vision-encoders captioner: data, training, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the three-domain synthetic dataset from a manifest file.
    GenData {
        /// Manifest file (key=value: version, seed, train_per_class, heldout_per_class).
        #[arg(long)]
        manifest: PathBuf,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one training stage and write its checkpoint and metrics.
    Train {
        /// Which stage: router, pretrain or finetune.
        #[arg(long)]
        stage: String,
        /// Run-configuration file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the stage's step count.
        #[arg(long)]
        steps: Option<usize>,
        /// Override the stage's learning rate.
        #[arg(long)]
        lr: Option<f64>,
        /// Override the stage's batch size.
        #[arg(long)]
        batch: Option<usize>,
        /// Override the run seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the dataset directory.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Override the checkpoint directory.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        /// Override the metrics file path.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on held-out data under a routing policy.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory (as written by gen-data).
        #[arg(long)]
        data: PathBuf,
        /// Routing policy: learned, oracle, random or fixed:<i>.
        #[arg(long, default_value = "learned")]
        policy: String,
        /// Seed for the random policy.
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Directory for report.txt and confusion.csv.
        #[arg(long, default_value = "eval-out")]
        out: PathBuf,
    },
    /// Route one stored sample: print the expert, gate weights and
    /// pooled-feature norm.
    Route {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A dataset records file (e.g. heldout.bin).
        #[arg(long)]
        image: PathBuf,
        /// Record index within the file.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Bypass the router and force this expert.
        #[arg(long = "override")]
        override_expert: Option<usize>,
        /// Run-configuration file (route.override applies when --override
        /// is absent).
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    if let Ok(mode) = std::env::var(PRECISION_VAR) {
        if mode != "64" && mode != "f64" {
            eprintln!(
                "error: {PRECISION_VAR}={mode} is not supported; \
                 all arithmetic runs in 64-bit (set \"64\" or unset)"
            );
            return ExitCode::from(1);
        }
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        // Malformed user-written input (flags, config text) is a usage error;
        // missing or corrupt artifacts are data errors.
        Error::Config(_) | Error::Parse { .. } => 1,
        Error::Diverged { .. } | Error::NonFiniteGrad { .. } => 3,
        _ => 2,
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { manifest, out } => cmd_gen_data(&manifest, &out),
        Command::Train {
            stage,
            config,
            steps,
            lr,
            batch,
            seed,
            data,
            checkpoints,
            metrics,
        } => cmd_train(TrainArgs {
            stage,
            config,
            steps,
            lr,
            batch,
            seed,
            data,
            checkpoints,
            metrics,
        }),
        Command::Eval {
            checkpoint,
            data,
            policy,
            seed,
            out,
        } => cmd_eval(&checkpoint, &data, &policy, seed, &out),
        Command::Route {
            checkpoint,
            image,
            index,
            override_expert,
            config,
        } => {
            let forced = match (override_expert, &config) {
                (Some(e), _) => Some(e),
                (None, Some(path)) => RunConfig::from_file(path)?.route_override,
                (None, None) => None,
            };
            cmd_route(&checkpoint, &image, index, forced)
        }
    }
}

// ─── gen-data ────────────────────────────────────────────────────────────

/// FNV-1a over a file's bytes: cheap, stable fingerprint for idempotence
/// checks across reruns.
fn file_hash(path: &Path) -> Result<u64> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    Ok(h)
}

fn cmd_gen_data(manifest_path: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest = DatasetManifest::parse(&text, &manifest_path.display().to_string())?;
    let dataset = gen_dataset(out, &manifest)?;

    let domains = ["general", "formula", "chart"];
    println!(
        "generated {} train + {} held-out samples in {}",
        dataset.train.len(),
        dataset.heldout.len(),
        out.display()
    );
    for (d, name) in domains.iter().enumerate() {
        let train = dataset.train.iter().filter(|s| s.label.0 == d).count();
        let held = dataset.heldout.iter().filter(|s| s.label.0 == d).count();
        println!("domain {d} ({name}): train={train} heldout={held}");
    }
    let train_hash = file_hash(&vismoe::synthdata::train_path(out))?;
    let heldout_hash = file_hash(&vismoe::synthdata::heldout_path(out))?;
    println!("dataset_hash={:016x}", train_hash ^ heldout_hash.rotate_left(1));
    Ok(())
}

// ─── train ───────────────────────────────────────────────────────────────

struct TrainArgs {
    stage: String,
    config: Option<PathBuf>,
    steps: Option<usize>,
    lr: Option<f64>,
    batch: Option<usize>,
    seed: Option<u64>,
    data: Option<PathBuf>,
    checkpoints: Option<PathBuf>,
    metrics: Option<PathBuf>,
}

fn stage_filename(stage: StageKind) -> &'static str {
    match stage {
        StageKind::Router => "router.ckpt",
        StageKind::Pretrain => "pretrain.ckpt",
        StageKind::Finetune => "finetune.ckpt",
    }
}

/// Load the checkpoint this stage starts from. The router stage builds a
/// fresh initialization (persisted as init.ckpt); later stages require
/// their predecessor's output.
fn starting_checkpoint(
    stage: StageKind,
    rc: &RunConfig,
    train: &[vismoe::synthdata::Sample],
) -> Result<Checkpoint> {
    match stage {
        StageKind::Router => {
            let profile = Profile::new(rc.profile);
            let ckpt = init_checkpoint(&profile, rc.seed, train, rc.router_bias)?;
            ckpt_io::save(&ckpt, &rc.checkpoint_dir.join("init.ckpt"))?;
            Ok(ckpt)
        }
        StageKind::Pretrain => {
            let path = rc.checkpoint_dir.join(stage_filename(StageKind::Router));
            if !path.exists() {
                return Err(Error::Checkpoint {
                    section: "provenance".into(),
                    detail: format!(
                        "stage-1 checkpoint required: {} not found (run `vismoe train --stage router` first)",
                        path.display()
                    ),
                });
            }
            ckpt_io::load(&path)
        }
        StageKind::Finetune => {
            let path = rc.checkpoint_dir.join(stage_filename(StageKind::Pretrain));
            if !path.exists() {
                return Err(Error::Checkpoint {
                    section: "provenance".into(),
                    detail: format!(
                        "stage-2 checkpoint required: {} not found (run `vismoe train --stage pretrain` first)",
                        path.display()
                    ),
                });
            }
            ckpt_io::load(&path)
        }
    }
}

fn summary_line(summary: &StageSummary, out_path: &Path) -> String {
    let mut line = format!("stage={} steps={}", summary.stage.name(), summary.steps);
    if let Some(loss) = summary.final_loss {
        line.push_str(&format!(" final_loss={loss:.6}"));
    }
    if let Some(loss) = summary.heldout_loss {
        line.push_str(&format!(" heldout_loss={loss:.6}"));
    }
    if let Some(acc) = summary.heldout_accuracy {
        line.push_str(&format!(" heldout_accuracy={acc:.6}"));
    }
    if !summary.adapter_updates.is_empty() {
        let counts: Vec<String> = summary
            .adapter_updates
            .iter()
            .map(|c| c.to_string())
            .collect();
        line.push_str(&format!(" adapter_updates={}", counts.join("/")));
    }
    line.push_str(&format!(
        " wall_ms={} checkpoint={}",
        summary.wall_ms,
        out_path.display()
    ));
    line
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let stage = StageKind::parse(&args.stage)?;
    let mut rc = match &args.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        rc.seed = seed;
    }
    if let Some(data) = args.data {
        rc.data_dir = data;
    }
    if let Some(dir) = args.checkpoints {
        rc.checkpoint_dir = dir;
    }
    if let Some(path) = args.metrics {
        rc.metrics_path = path;
    }

    let mut cfg = rc.stage_config(stage);
    if let Some(steps) = args.steps {
        cfg.steps = steps;
    }
    if let Some(lr) = args.lr {
        cfg.learning_rate = lr;
    }
    if let Some(batch) = args.batch {
        cfg.batch_size = batch;
    }
    cfg.validate()?;

    let data = load_dataset(&rc.data_dir)?;
    let ckpt = starting_checkpoint(stage, &rc, &data.train)?;
    let mut metrics = MetricsWriter::to_file(&rc.metrics_path)?;
    let (out_ckpt, summary) = run_stage(ckpt, &data, &cfg, &mut metrics)?;
    let out_path = rc.checkpoint_dir.join(stage_filename(stage));
    ckpt_io::save(&out_ckpt, &out_path)?;
    println!("{}", summary_line(&summary, &out_path));
    Ok(())
}

// ─── eval ────────────────────────────────────────────────────────────────

fn cmd_eval(checkpoint: &Path, data_dir: &Path, policy: &str, seed: u64, out: &Path) -> Result<()> {
    let ckpt = ckpt_io::load(checkpoint)?;
    let data = load_dataset(data_dir)?;
    let policy = Policy::parse(policy, seed)?;
    let report = ablate(&ckpt, &data.heldout, policy)?;

    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let report_path = out.join("report.txt");
    std::fs::write(&report_path, report.to_text()).map_err(|e| Error::io(&report_path, e))?;
    let csv_path = out.join("confusion.csv");
    std::fs::write(&csv_path, report.confusion_csv()).map_err(|e| Error::io(&csv_path, e))?;

    print!("{}", report.to_text());
    println!("report={} confusion={}", report_path.display(), csv_path.display());
    Ok(())
}

// ─── route ───────────────────────────────────────────────────────────────

fn cmd_route(
    checkpoint: &Path,
    image: &Path,
    index: usize,
    override_expert: Option<usize>,
) -> Result<()> {
    let ckpt = ckpt_io::load(checkpoint)?;
    let samples = read_records(image)?;
    let sample = samples.get(index).ok_or_else(|| Error::IndexOutOfRange {
        what: "sample index",
        index,
        bound: samples.len(),
    })?;

    let (mut info, _) = route_image(&ckpt, &sample.image)?;
    if let Some(e) = override_expert {
        if e >= ckpt.encoders.len() {
            return Err(Error::IndexOutOfRange {
                what: "expert id",
                index: e,
                bound: ckpt.encoders.len(),
            });
        }
        info.expert = ExpertId(e);
        info.gate = vec![0.0; ckpt.encoders.len()];
        info.gate[e] = 1.0;
        info.forced = true;
    }

    let forced = if info.forced { " (forced)" } else { "" };
    println!("expert {}{forced}", info.expert.0);
    println!("encoder={}", ckpt.encoders[info.expert.0].spec.name);
    let gate: Vec<String> = info.gate.iter().map(|g| format!("{g:.6}")).collect();
    println!("gate={}", gate.join(","));
    println!("pooled_norm={:.6}", info.pooled_norm);
    Ok(())
}
