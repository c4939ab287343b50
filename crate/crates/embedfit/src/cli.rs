//! Command-line surface and the command implementations behind it.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use embedfit_core::baseline::{self, RansacConfig, TypeSchedule};
use embedfit_core::datagen::{self, Composition, Sample};
use embedfit_core::inference::{Evaluation, KMode, MetricsSummary};
use embedfit_core::losses::LossKind;
use embedfit_core::net::EmbedNet;
use embedfit_core::trainer::{self, Checkpoint, Trainer};
use serde::Serialize;

use crate::config::{RunConfig, Split};
use crate::formats;

#[derive(Debug, Parser)]
#[command(name = "embedfit", version, about = "Learned point embeddings for multi-model, multi-type conic fitting")]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed for every random choice in the run.
    #[arg(long, value_parser = clap::value_parser!(u64).range(..=i64::MAX as u64))]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Directory holding train/val/test JSON Lines files (default: out dir).
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KModeArg {
    GroundTruth,
    Sod,
    Silhouette,
}

impl From<KModeArg> for KMode {
    fn from(k: KModeArg) -> Self {
        match k {
            KModeArg::GroundTruth => KMode::GroundTruthK,
            KModeArg::Sod => KMode::EstimateSod,
            KModeArg::Silhouette => KMode::EstimateSilhouette,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CompositionArg {
    Lce,
    LceUnmixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    /// Mixed line/circle/ellipse rounds.
    Seq,
    /// General conics only.
    Ho,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train/val/test datasets.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_val: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long, value_enum)]
        composition: Option<CompositionArg>,
    },
    /// Train the embedding network.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_loss)]
        loss: Option<LossKind>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        depth: Option<usize>,
        /// Continue from `checkpoint.json` in the out dir if present.
        #[arg(long)]
        resume: bool,
    },
    /// Cluster embeddings of a split and score them.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Network file (default: `<out-dir>/model.json`).
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, value_enum)]
        k_mode: Option<KModeArg>,
    },
    /// Estimate K per sample from residual curves and silhouettes.
    SelectK {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Run a sequential RANSAC baseline.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "seq")]
        method: Method,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Write per-point embeddings of a split as CSV.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
}

fn parse_loss(s: &str) -> Result<LossKind, String> {
    s.parse()
}

/// Defaults, then the config file, then flags.
pub fn resolve_config(common: &Common, overrides: impl FnOnce(&mut RunConfig)) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &common.out_dir {
        cfg.out_dir = dir.clone();
    }
    if let Some(dir) = &common.data_dir {
        cfg.data_dir = Some(dir.clone());
    }
    overrides(&mut cfg);
    cfg.resolve()
}

fn echo_config(cfg: &RunConfig, verb: &str) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let path = cfg.out_dir.join(format!("config_{verb}.toml"));
    fs::write(&path, cfg.to_toml()?).with_context(|| format!("writing {}", path.display()))
}

fn load_split(cfg: &RunConfig, split: Split) -> Result<Vec<Sample>> {
    let path = cfg.dataset_path(split);
    if !path.exists() {
        bail!(
            "dataset {} not found; run `embedfit gen-data` or pass --data-dir",
            path.display()
        );
    }
    Ok(formats::read_jsonl(&path)?)
}

fn load_model(cfg: &RunConfig, model: Option<&Path>) -> Result<EmbedNet> {
    let path = model.map_or_else(|| cfg.out_dir.join("model.json"), Path::to_path_buf);
    if !path.exists() {
        bail!("model {} not found; run `embedfit train` or pass --model", path.display());
    }
    Ok(formats::load_json(&path)?)
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    seed: u64,
    split: &'a str,
    summary: MetricsSummary,
}

fn write_report(cfg: &RunConfig, stem: &str, split: Split, eval: &Evaluation) -> Result<()> {
    let csv = cfg.out_dir.join(format!("{stem}_{}.csv", split.name()));
    formats::write_metrics(&csv, &eval.rows, cfg.inference.sod_range)?;
    let json = cfg.out_dir.join(format!("{stem}_{}_summary.json", split.name()));
    formats::save_json(
        &json,
        &SummaryFile {
            seed: cfg.seed,
            split: split.name(),
            summary: eval.summary,
        },
    )?;
    let s = &eval.summary;
    println!(
        "{stem} on {} ({} samples): mean error {:.4}, median error {:.4}, mean NMI {:.4}",
        split.name(),
        s.samples,
        s.mean_error,
        s.median_error,
        s.mean_nmi
    );
    if s.samples > 0 && (s.sod_correct > 0.0 || s.silhouette_correct > 0.0 || stem == "select_k") {
        println!(
            "K recovered: SOD {:.1}%, silhouette {:.1}%",
            100.0 * s.sod_correct,
            100.0 * s.silhouette_correct
        );
    }
    println!("wrote {}", csv.display());
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            common,
            n_train,
            n_val,
            n_test,
            sigma,
            composition,
        } => {
            let cfg = resolve_config(&common, |c| {
                if let Some(n) = n_train {
                    c.data.n_train = n;
                }
                if let Some(n) = n_val {
                    c.data.n_val = n;
                }
                if let Some(n) = n_test {
                    c.data.n_test = n;
                }
                if let Some(s) = sigma {
                    c.data.noise_sigma = s;
                }
                if let Some(comp) = composition {
                    c.data.composition = match comp {
                        CompositionArg::Lce => Composition::Lce,
                        CompositionArg::LceUnmixed => Composition::LceUnmixed,
                    };
                }
            })?;
            cmd_gen_data(&cfg)
        }
        Command::Train {
            common,
            loss,
            epochs,
            lr,
            width,
            depth,
            resume,
        } => {
            let cfg = resolve_config(&common, |c| {
                if let Some(k) = loss {
                    c.train.loss.kind = k;
                }
                if let Some(e) = epochs {
                    c.train.epochs = e;
                }
                if let Some(l) = lr {
                    c.train.lr = l;
                }
                if let Some(w) = width {
                    c.train.net.width = w;
                }
                if let Some(d) = depth {
                    c.train.net.depth = d;
                }
            })?;
            cmd_train(&cfg, resume)
        }
        Command::Eval {
            common,
            model,
            split,
            k_mode,
        } => {
            let cfg = resolve_config(&common, |c| {
                if let Some(k) = k_mode {
                    c.inference.k_mode = k.into();
                }
            })?;
            cmd_eval(&cfg, model.as_deref(), split.into())
        }
        Command::SelectK { common, model, split } => {
            let cfg = resolve_config(&common, |_| {})?;
            cmd_select_k(&cfg, model.as_deref(), split.into())
        }
        Command::Baseline {
            common,
            method,
            threshold,
            iterations,
            split,
        } => {
            let cfg = resolve_config(&common, |c| {
                if let Some(t) = threshold {
                    c.baseline.inlier_threshold = t;
                }
                if let Some(i) = iterations {
                    c.baseline.iterations = i;
                }
                if method == Method::Ho {
                    c.baseline.type_order = TypeSchedule::high_order();
                }
            })?;
            cmd_baseline(&cfg, method, split.into())
        }
        Command::ExportEmbeddings { common, model, split } => {
            let cfg = resolve_config(&common, |_| {})?;
            cmd_export_embeddings(&cfg, model.as_deref(), split.into())
        }
    }
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    echo_config(cfg, "gen-data")?;
    for split in Split::ALL {
        let spec = cfg.data.spec(split, cfg.seed);
        let samples = if spec.n_samples == 0 {
            Vec::new()
        } else {
            datagen::generate(&spec)?
        };
        let path = cfg.dataset_path(split);
        formats::write_jsonl(&path, &samples)?;
        let points: usize = samples.iter().map(Sample::len).sum();
        println!("{}: {} samples, {} points -> {}", split.name(), samples.len(), points, path.display());
    }
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<()> {
    let train = load_split(cfg, Split::Train)?;
    if train.is_empty() {
        bail!("training set {} is empty", cfg.dataset_path(Split::Train).display());
    }
    let val = load_split(cfg, Split::Val)?;
    echo_config(cfg, "train")?;

    let ck_path = cfg.out_dir.join("checkpoint.json");
    let mut trainer = if resume && ck_path.exists() {
        let ck: Checkpoint = formats::load_json(&ck_path)?;
        // only the epoch budget may change between runs
        let mut ck = ck;
        let mut expected = cfg.train.clone();
        expected.epochs = ck.config.epochs;
        if ck.config != expected {
            bail!("checkpoint {} was written with a different [train] config", ck_path.display());
        }
        ck.config.epochs = cfg.train.epochs;
        println!("resuming after epoch {}", ck.epochs_done);
        Trainer::from_checkpoint(ck)?
    } else {
        Trainer::new(cfg.train.clone())?
    };

    let every = cfg.train.checkpoint_every;
    while !trainer.is_finished() {
        let rec = trainer.run_epoch(&train, &val)?;
        println!(
            "epoch {:>4}  loss {:.6}  val_error {}  val_nmi {}",
            rec.epoch,
            rec.train_loss,
            rec.val_error.map_or_else(|| "-".into(), |v| format!("{v:.4}")),
            rec.val_nmi.map_or_else(|| "-".into(), |v| format!("{v:.4}")),
        );
        if every > 0 && rec.epoch % every == 0 {
            formats::save_json(&ck_path, &trainer.checkpoint())?;
            formats::write_history(&cfg.out_dir.join("history.csv"), trainer.history())?;
        }
    }
    formats::save_json(&ck_path, &trainer.checkpoint())?;
    let outcome = trainer.finish();
    formats::write_history(&cfg.out_dir.join("history.csv"), &outcome.history)?;
    formats::save_json(&cfg.out_dir.join("model.json"), &outcome.net)?;
    formats::save_json(&cfg.out_dir.join("model_final.json"), &outcome.final_net)?;
    match outcome.best_epoch {
        Some(e) => println!("kept epoch {e} (best validation error)"),
        None => println!("no validation set; kept the final epoch"),
    }
    println!("wrote {}", cfg.out_dir.join("model.json").display());
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, model: Option<&Path>, split: Split) -> Result<()> {
    let net = load_model(cfg, model)?;
    let data = load_split(cfg, split)?;
    echo_config(cfg, "eval")?;
    let eval = trainer::evaluate(&net, &data, cfg.inference.k_mode, &cfg.inference_config())?;
    write_report(cfg, "metrics", split, &eval)
}

pub fn cmd_select_k(cfg: &RunConfig, model: Option<&Path>, split: Split) -> Result<()> {
    let net = load_model(cfg, model)?;
    let data = load_split(cfg, split)?;
    echo_config(cfg, "select-k")?;
    let eval = trainer::evaluate(&net, &data, KMode::EstimateSod, &cfg.inference_config())?;
    write_report(cfg, "select_k", split, &eval)
}

pub fn cmd_baseline(cfg: &RunConfig, method: Method, split: Split) -> Result<()> {
    let data = load_split(cfg, split)?;
    echo_config(cfg, "baseline")?;
    let ransac: &RansacConfig = &cfg.baseline;
    let eval = baseline::baseline_eval(&data, ransac, cfg.seed)?;
    let stem = match method {
        Method::Seq => "baseline_seq",
        Method::Ho => "baseline_ho",
    };
    write_report(cfg, stem, split, &eval)
}

pub fn cmd_export_embeddings(cfg: &RunConfig, model: Option<&Path>, split: Split) -> Result<()> {
    let net = load_model(cfg, model)?;
    let data = load_split(cfg, split)?;
    echo_config(cfg, "export-embeddings")?;
    let embeddings = trainer::embed_dataset(&net, &data)?;
    let path = cfg.out_dir.join(format!("embeddings_{}.csv", split.name()));
    formats::write_embeddings(&path, &data, &embeddings)?;
    let rows: usize = embeddings.iter().map(|e| e.len()).sum();
    println!("wrote {rows} rows to {}", path.display());
    Ok(())
}
