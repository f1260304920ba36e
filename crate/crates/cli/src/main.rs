use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use diffid_core::checkpoint::Checkpoint;
use diffid_core::dataset::{compute_identity_cdf, stats_report, DatasetManifest, StatsOptions};
use diffid_core::filter::{FilterKind, TrainConfig};
use diffid_core::pipeline::{refilter_manifest, run_pipeline, PipelineConfig, Threshold};
use diffid_core::pretrain::{append_run_ledger, finetune_eval, pretrain, TrainingConfig};

#[derive(Parser)]
#[command(name = "diffid", version, about = "Synthetic person re-identification data: generate, filter, assemble, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a pipeline config and list every problem found.
    Validate { config: PathBuf },
    /// Run the generation pipeline; exits 2 if any identity failed.
    Run {
        config: PathBuf,
        /// Overrides `run.workers`.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Print the key-value statistics report of a manifest.
    Stats {
        manifest: PathBuf,
        /// Inclusive per-identity image-count range, `LO,HI`.
        #[arg(long, value_delimiter = ',', num_args = 2, default_values_t = [70, 210])]
        range: Vec<usize>,
        #[arg(long, default_value_t = 130)]
        above: usize,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Print the identity CDF as `X Y` rows.
    Cdf {
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
        thresholds: Vec<u64>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Re-score a manifest with one filter and keep records above threshold.
    Filter(FilterArgs),
    /// Pre-train a backbone on a manifest; writes a checkpoint.
    Pretrain {
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to `backbone.ck` next to the manifest.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Fine-tune on a target manifest's train split and report mAP and CMC.
    Eval {
        /// Backbone checkpoint, or `random` for random initialisation.
        checkpoint: String,
        target: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Append `run_id, config hash, mAP, rank-1` to this file.
        #[arg(long)]
        ledger: Option<PathBuf>,
        #[arg(long, default_value = "eval")]
        run_id: String,
    },
}

#[derive(Args)]
struct FilterArgs {
    manifest: PathBuf,
    #[arg(long, value_parser = parse_kind)]
    kind: FilterKind,
    #[arg(long, conflicts_with = "calibrate", required_unless_present = "calibrate")]
    tau: Option<f64>,
    /// Keep fraction used to calibrate the threshold on the reference.
    #[arg(long)]
    calibrate: Option<f64>,
    /// Labeled manifest the filter is fitted on; defaults to the input.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Defaults to `manifest.<kind>.tsv` next to the input.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

fn parse_kind(s: &str) -> Result<FilterKind, String> {
    s.parse().map_err(|e: diffid_core::Error| e.to_string())
}

type CliResult = Result<ExitCode, Box<dyn std::error::Error>>;

fn dir_of(path: &Path) -> &Path {
    path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."))
}

fn emit(text: &str, output: Option<&Path>) -> std::io::Result<()> {
    match output {
        Some(p) => std::fs::write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn training(config: Option<&Path>) -> diffid_core::Result<(TrainingConfig, String)> {
    match config {
        Some(p) => Ok((TrainingConfig::load(p)?, std::fs::read_to_string(p).unwrap_or_default())),
        None => Ok((TrainingConfig::default(), String::new())),
    }
}

fn validate(config: &Path) -> CliResult {
    match PipelineConfig::load(config) {
        Ok(_) => {
            println!("ok");
            Ok(ExitCode::SUCCESS)
        }
        Err(diffid_core::Error::Validation(errors)) => {
            for e in errors {
                println!("{e}");
            }
            Ok(ExitCode::FAILURE)
        }
        Err(e) => Err(e.into()),
    }
}

fn run(config: &Path, workers: Option<usize>) -> CliResult {
    let mut cfg = PipelineConfig::load(config)?;
    if let Some(w) = workers {
        cfg.run.workers = w;
    }
    let out = run_pipeline(&cfg)?;
    println!("manifest: {}", out.manifest_path.display());
    println!("images: {}", out.manifest.len());
    println!("identities: {}", out.manifest.identity_count());
    for (source, tau) in &out.thresholds {
        println!("threshold.{source}: {tau:.6}");
    }
    for (identity, error) in &out.failed {
        eprintln!("failed {identity}: {error}");
    }
    Ok(if out.success() { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn filter(a: &FilterArgs) -> CliResult {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let reference = match &a.reference {
        Some(p) => Some((DatasetManifest::load(p)?, dir_of(p).to_path_buf())),
        None => None,
    };
    let threshold = match (a.tau, a.calibrate) {
        (Some(t), _) => Threshold::Fixed(t),
        (None, Some(k)) => Threshold::Calibrate(k),
        (None, None) => unreachable!("clap requires one of --tau, --calibrate"),
    };
    let train = TrainConfig {
        epochs: a.epochs,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let dir = dir_of(&a.manifest);
    let out = refilter_manifest(
        &manifest,
        dir,
        a.kind,
        reference.as_ref().map(|(m, d)| (m, d.as_path())),
        threshold,
        &train,
    )?;
    let path = a.output.clone().unwrap_or_else(|| dir.join(format!("manifest.{}.tsv", a.kind)));
    // Record paths are relative to the input's directory.
    if dir_of(&path).canonicalize().ok() != dir.canonicalize().ok() {
        eprintln!("warning: output is not beside the input; record paths will not resolve");
    }
    out.manifest.save(&path)?;
    for (id, e) in &out.errors {
        eprintln!("unscored {id}: {e}");
    }
    println!("threshold: {:.6}", out.threshold);
    println!("kept: {}", out.kept);
    println!("discarded: {}", out.discarded);
    println!("manifest: {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result: CliResult = match &cli.command {
        Command::Validate { config } => validate(config),
        Command::Run { config, workers } => run(config, *workers),
        Command::Stats {
            manifest,
            range,
            above,
            output,
        } => (|| {
            let m = DatasetManifest::load(manifest)?;
            let opts = StatsOptions {
                range: (range[0], range[1]),
                above: *above,
            };
            emit(&stats_report(&m, &opts)?.to_text(), output.as_deref())?;
            Ok(ExitCode::SUCCESS)
        })(),
        Command::Cdf {
            manifest,
            thresholds,
            output,
        } => (|| {
            let m = DatasetManifest::load(manifest)?;
            emit(&compute_identity_cdf(&m, thresholds)?.to_text(), output.as_deref())?;
            Ok(ExitCode::SUCCESS)
        })(),
        Command::Filter(a) => filter(a),
        Command::Pretrain {
            manifest,
            config,
            output,
        } => (|| {
            let (cfg, _) = training(config.as_deref())?;
            let m = DatasetManifest::load(manifest)?;
            let out = pretrain(&m, dir_of(manifest), &cfg.pretrain)?;
            let path = output.clone().unwrap_or_else(|| dir_of(manifest).join("backbone.ck"));
            out.checkpoint.save(&path)?;
            for (i, l) in out.epoch_losses.iter().enumerate() {
                println!("epoch {}: loss {l:.6}", i + 1);
            }
            println!("train_accuracy: {:.4}", out.train_accuracy);
            println!("checkpoint: {}", path.display());
            Ok(ExitCode::SUCCESS)
        })(),
        Command::Eval {
            checkpoint,
            target,
            config,
            ledger,
            run_id,
        } => (|| {
            let (cfg, text) = training(config.as_deref())?;
            let ck = match checkpoint.as_str() {
                "random" => None,
                p => Some(Checkpoint::load(Path::new(p))?),
            };
            let m = DatasetManifest::load(target)?;
            let out = finetune_eval(ck.as_ref(), &m, dir_of(target), &cfg.finetune)?;
            for (i, v) in out.map_trace.iter().enumerate() {
                println!("epoch {}: mAP {v:.6}", i + 1);
            }
            println!("mAP: {:.6}", out.result.map_score);
            for r in [1, 5, 10] {
                println!("rank{r}: {:.6}", out.result.rank(r));
            }
            if let Some(p) = ledger {
                append_run_ledger(p, run_id, &format!("{checkpoint}\n{text}"), &out.result)?;
            }
            Ok(ExitCode::SUCCESS)
        })(),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
