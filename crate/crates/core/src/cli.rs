//! Command-line front end. Every stage reads and writes checkpoint directories.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{Checkpoint, MANIFEST_FILE, WEIGHTS_FILE};
use crate::data::{load_dataset, write_dataset, Dataset};
use crate::detector::{build_mfssd, ArchConfig, DecodeConfig, GraphSpec, Params};
use crate::error::{Error, Result};
use crate::eval::evaluate_model;
use crate::io::{read_file, write_file_atomic, write_files_atomic};
use crate::optim::{train, EpochLog, TrainConfig, DEFAULT_SPARSITY_LAMBDA};
use crate::slimming::{count_params, finetune, finetune_config, prune, prune_to_reduction};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const PRUNE_REPORT_FILE: &str = "prune_report.json";

/// Contents of a `--config` file: training fields at the top level plus an
/// optional `arch` object.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub arch: ArchConfig,
}

#[derive(Parser, Debug)]
#[command(
    name = "mfssd",
    version,
    about = "Small-object detector training and channel slimming"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic shapes dataset.
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 96)]
        size: usize,
        #[arg(long, default_value_t = 0.5)]
        small_fraction: f64,
    },
    /// Train from scratch without the sparsity penalty.
    Train {
        #[command(flatten)]
        common: TrainArgs,
    },
    /// Train with the L1 penalty on batch-norm scaling factors.
    Sparsify {
        #[command(flatten)]
        common: TrainArgs,
        #[arg(long)]
        lambda: Option<f64>,
        /// Start from this checkpoint instead of fresh weights.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Remove low-|γ| channels.
    Prune {
        #[arg(long)]
        ckpt: PathBuf,
        /// Fraction of prunable channels to remove.
        #[arg(
            long,
            required_unless_present = "target_reduction",
            conflicts_with = "target_reduction"
        )]
        ratio: Option<f64>,
        /// Instead of a ratio: smallest prune cutting trainable parameters by this percent.
        #[arg(long)]
        target_reduction: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        iterations: usize,
    },
    /// Retrain a pruned model without the penalty at a tenth of the learning rate.
    Finetune {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        common: TrainArgs,
    },
    /// mAP of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        #[arg(long, default_value_t = 0.05)]
        score_threshold: f64,
        #[arg(long, default_value_t = 0.45)]
        nms_iou: f64,
        #[arg(long, default_value_t = 100)]
        top_k: usize,
        /// Also write the result to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parameter counts of a checkpoint.
    Info {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_steps: Option<usize>,
}

impl TrainArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let bytes = read_file(p)?;
                serde_json::from_slice::<RunConfig>(&bytes)
                    .map_err(|e| Error::format(p, format!("invalid config: {e}")))?
            }
            None => RunConfig::default(),
        };
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = self.lr {
            cfg.train.base_lr = v;
        }
        if let Some(v) = self.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = self.seed {
            cfg.train.seed = v;
        }
        if self.max_steps.is_some() {
            cfg.train.max_steps = self.max_steps;
        }
        Ok(cfg)
    }
}

fn log_epoch(stage: &str, l: &EpochLog) {
    eprintln!(
        "{stage} epoch {} loss {:.5} penalty {:.5} lr {:.5} |γ| median {:.4} <0.01 {:.3}",
        l.epoch, l.loss, l.penalty, l.lr, l.gamma_median, l.gamma_frac_below_0p01
    );
}

fn dataset_info(ds: &Dataset) -> serde_json::Value {
    json!({
        "seed": ds.manifest.seed,
        "image_count": ds.manifest.image_count,
        "image_size": ds.manifest.image_size,
        "crc32": ds.manifest.images_crc32,
    })
}

fn save_trained(
    out: &Path,
    graph: GraphSpec,
    params: Params<f32>,
    metadata: serde_json::Value,
    logs: &[EpochLog],
) -> Result<()> {
    let ckpt = Checkpoint::new(graph, params, metadata)?;
    let (m, w) = ckpt.to_bytes()?;
    let mut log = Vec::new();
    for l in logs {
        serde_json::to_writer(&mut log, l)?;
        log.push(b'\n');
    }
    write_files_atomic(
        out,
        &[(MANIFEST_FILE, &m), (WEIGHTS_FILE, &w), (LOG_FILE, &log)],
    )
}

fn run_training(
    stage: &str,
    common: &TrainArgs,
    mut cfg: RunConfig,
    init: Option<&Path>,
    lambda: f64,
) -> Result<()> {
    cfg.train.sparsity_lambda = lambda;
    cfg.train.validate()?;
    let ds = load_dataset(&common.data)?;
    let (graph, mut params, parent) = match init {
        Some(p) => {
            let c = Checkpoint::load(p)?;
            (c.graph, c.params, Some(c.metadata))
        }
        None => {
            if ds.image_size() != cfg.arch.input_size || ds.num_classes() != cfg.arch.num_classes {
                return Err(Error::invalid(format!(
                    "dataset is {}px with {} classes, architecture expects {}px with {}",
                    ds.image_size(),
                    ds.num_classes(),
                    cfg.arch.input_size,
                    cfg.arch.num_classes
                )));
            }
            let g = build_mfssd(&cfg.arch)?;
            let p = Params::init(&g, cfg.train.seed)?;
            (g, p, None)
        }
    };
    let logs = train(&graph, &mut params, &ds, &cfg.train, |l, _| {
        log_epoch(stage, l)
    })?;
    let metadata = json!({
        "stage": stage,
        "config": cfg,
        "epochs_completed": logs.len(),
        "steps": logs.iter().map(|l| l.steps).sum::<usize>(),
        "final_loss": logs.last().map(|l| l.loss),
        "dataset": dataset_info(&ds),
        "parent": parent,
    });
    save_trained(&common.out, graph, params, metadata, &logs)
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData {
            seed,
            n,
            out,
            size,
            small_fraction,
        } => {
            let ds = write_dataset(&out, seed, n, size, small_fraction)?;
            let objects: usize = ds.manifest.records.iter().map(|r| r.objects.len()).sum();
            print_json(&json!({
                "out": out,
                "images": ds.len(),
                "objects": objects,
                "images_crc32": ds.manifest.images_crc32,
            }))
        }
        Command::Train { common } => {
            let cfg = common.config()?;
            run_training("train", &common, cfg, None, 0.0)
        }
        Command::Sparsify {
            common,
            lambda,
            init,
        } => {
            let cfg = common.config()?;
            let lambda = lambda.unwrap_or(if cfg.train.sparsity_lambda > 0.0 {
                cfg.train.sparsity_lambda
            } else {
                DEFAULT_SPARSITY_LAMBDA
            });
            if !(lambda > 0.0) {
                return Err(Error::invalid(format!(
                    "sparsify needs lambda > 0, got {lambda}"
                )));
            }
            run_training("sparsify", &common, cfg, init.as_deref(), lambda)
        }
        Command::Prune {
            ckpt,
            ratio,
            target_reduction,
            out,
            iterations,
        } => {
            let c = Checkpoint::load(&ckpt)?;
            let (g, p, report) = match (ratio, target_reduction) {
                (Some(r), None) => prune(&c.graph, &c.params, r, iterations)?,
                (None, Some(t)) => prune_to_reduction(&c.graph, &c.params, t)?,
                _ => {
                    return Err(Error::invalid(
                        "give exactly one of --ratio and --target-reduction",
                    ))
                }
            };
            let metadata = json!({
                "stage": "prune",
                "requested_ratio": report.requested_ratio,
                "realized_ratio": report.realized_ratio,
                "param_reduction_pct": report.param_reduction_pct,
                "parent": c.metadata,
            });
            let (m, w) = Checkpoint::new(g, p, metadata)?.to_bytes()?;
            let mut r = serde_json::to_vec_pretty(&report)?;
            r.push(b'\n');
            write_files_atomic(
                &out,
                &[
                    (MANIFEST_FILE, &m),
                    (WEIGHTS_FILE, &w),
                    (PRUNE_REPORT_FILE, &r),
                ],
            )?;
            print_json(&report)
        }
        Command::Finetune { ckpt, common } => {
            let cfg = common.config()?;
            cfg.train.validate()?;
            let c = Checkpoint::load(&ckpt)?;
            let ds = load_dataset(&common.data)?;
            let mut params = c.params;
            let logs = finetune(&c.graph, &mut params, &ds, &cfg.train, |l, _| {
                log_epoch("finetune", l)
            })?;
            let metadata = json!({
                "stage": "finetune",
                "config": RunConfig {
                    train: finetune_config(&cfg.train),
                    arch: cfg.arch.clone(),
                },
                "epochs_completed": logs.len(),
                "final_loss": logs.last().map(|l| l.loss),
                "dataset": dataset_info(&ds),
                "parent": c.metadata,
            });
            save_trained(&common.out, c.graph, params, metadata, &logs)
        }
        Command::Eval {
            ckpt,
            data,
            iou,
            score_threshold,
            nms_iou,
            top_k,
            out,
        } => {
            let c = Checkpoint::load(&ckpt)?;
            let ds = load_dataset(&data)?;
            let dc = DecodeConfig {
                score_threshold,
                nms_iou,
                top_k,
            };
            let r = evaluate_model(&c.graph, &c.params, &ds, &dc, iou)?;
            if let Some(p) = out {
                let mut bytes = serde_json::to_vec_pretty(&r)?;
                bytes.push(b'\n');
                write_file_atomic(&p, &bytes)?;
            }
            print_json(&r)
        }
        Command::Info { ckpt } => {
            let c = Checkpoint::load(&ckpt)?;
            print_json(&count_params(&c.graph)?)
        }
    }
}

fn report_error(kind: &str, message: &str, code: i32) {
    let line = json!({"error": kind, "message": message, "exit_code": code});
    eprintln!("{line}");
}

/// Runs the CLI and returns the process exit status: 0 success, 1 usage,
/// 2 data or format, 3 numerical failure.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let text: Vec<&str> = msg
                .lines()
                .take_while(|l| !l.starts_with("Usage:"))
                .map(|l| l.trim())
                .filter(|l| !l.is_empty())
                .collect();
            report_error("usage", text.join(" ").trim_start_matches("error: "), 1);
            return 1;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let code = e.exit_code();
            report_error(e.kind(), &e.to_string().replace('\n', " "), code);
            code
        }
    }
}
