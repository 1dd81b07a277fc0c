use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use gflowmask_core::data::{
    apply_noise_normalized, generate_synthetic, load_dataset, preprocess, write_ppm, ImageSample, NoiseSpec, SplitCounts,
};
use gflowmask_core::gflowout::{GFlowOutConfig, Network, Trainer};
use gflowmask_core::metrics::{argmax, compare_ood, sample_entropies, EntropySummary, MetricsReport, OodComparison, PredictiveDistribution};
use gflowmask_core::nn::{snapshot, BackboneConfig, Tensor};
use gflowmask_core::rng::{stream, substream, Stream};
use gflowmask_core::saliency::{grad_cam, overlay};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{CliError, RunConfig};

pub const THREADS_ENV: &str = "GFLOWMASK_THREADS";
pub const LOG_FILE: &str = "train_log.csv";
const SNAPSHOT_FORMAT: &str = "gflowmask/1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SnapshotMeta {
    format: String,
    backbone: BackboneConfig,
    gflowout: GFlowOutConfig,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Worker count for evaluation: `GFLOWMASK_THREADS` if set, else the
/// number of available cores.
pub fn eval_threads() -> Result<usize, CliError> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::Config(format!("{THREADS_ENV}={v:?} is not a positive integer"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn load_split(dir: &Path, n_classes: usize) -> Result<Vec<ImageSample>, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Config(format!("dataset directory {} does not exist", dir.display())));
    }
    let samples = load_dataset(dir)?;
    if let Some(s) = samples.iter().find(|s| s.label >= n_classes) {
        return Err(CliError::Config(format!(
            "{}: sample {} has label {} but the model has {n_classes} classes",
            dir.display(),
            s.id,
            s.label
        )));
    }
    Ok(samples)
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<SplitCounts, CliError> {
    let mut syn = cfg.synthetic.clone();
    syn.seed = cfg.seed;
    let ds = generate_synthetic(&syn)?;
    ds.write(&cfg.dataset_dir)?;
    write_json(&cfg.dataset_dir.join("synthetic.json"), &syn)?;
    Ok(syn.split_counts())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub ce_loss: f64,
    pub tb_loss: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochLog>,
    pub final_test_accuracy: Option<f64>,
    pub snapshot: PathBuf,
}

fn point_accuracy(net: &Network, data: &[(Tensor, usize)]) -> Result<f64, CliError> {
    let mut correct = 0usize;
    for (x, y) in data {
        correct += usize::from(argmax(&net.expected_probs(x)?) == *y);
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

fn to_tensors(samples: &[ImageSample], cfg: &RunConfig) -> Result<Vec<(Tensor, usize)>, CliError> {
    samples
        .iter()
        .map(|s| Ok((preprocess(s, &cfg.preprocess)?, s.label)))
        .collect()
}

/// Trains on `dataset_dir/train`, logging test accuracy per epoch when
/// `dataset_dir/test` exists, and writes `model.gfmk`, `train_log.csv` and a
/// copy of the config to `output_dir`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome, CliError> {
    let n_classes = cfg.backbone.n_classes;
    let train = to_tensors(&load_split(&cfg.split_dir("train"), n_classes)?, cfg)?;
    if train.is_empty() {
        return Err(CliError::Config("training set is empty".into()));
    }
    let test_dir = cfg.split_dir("test");
    let test = if test_dir.is_dir() {
        Some(to_tensors(&load_split(&test_dir, n_classes)?, cfg)?)
    } else {
        None
    };
    fs::create_dir_all(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join("run_config.json"), cfg)?;

    let net = Network::new(cfg.backbone.clone(), cfg.gflowout.clone(), cfg.seed)?;
    let mut trainer = Trainer::new(net, cfg.train.clone());
    let mut order_rng = stream(cfg.seed, Stream::DataOrder);
    let mut mask_rng = stream(cfg.seed, Stream::Masks);
    let mut log = csv::Writer::from_path(cfg.output_dir.join(LOG_FILE))?;
    log.write_record(["epoch", "ce_loss", "tb_loss", "train_acc", "test_acc"])?;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let l = trainer.train_epoch(&train, &mut order_rng, &mut mask_rng)?;
        let test_acc = test.as_deref().map(|t| point_accuracy(&trainer.net, t)).transpose()?;
        let row = EpochLog {
            epoch,
            ce_loss: l.mean_ce(),
            tb_loss: l.mean_tb(),
            train_acc: l.accuracy(),
            test_acc,
        };
        log.write_record([
            row.epoch.to_string(),
            row.ce_loss.to_string(),
            row.tb_loss.to_string(),
            row.train_acc.to_string(),
            row.test_acc.map(|a| a.to_string()).unwrap_or_default(),
        ])?;
        log.flush()?;
        epochs.push(row);
    }
    let net = trainer.into_network();
    let meta = SnapshotMeta {
        format: SNAPSHOT_FORMAT.into(),
        backbone: net.backbone.clone(),
        gflowout: net.gflowout.clone(),
    };
    let path = cfg.snapshot_path();
    snapshot::save(&path, &serde_json::to_string(&meta)?, &net.params).map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(TrainOutcome {
        final_test_accuracy: epochs.last().and_then(|e| e.test_acc),
        epochs,
        snapshot: path,
    })
}

/// Loads a snapshot and checks it was trained with the configured backbone
/// and mask settings.
pub fn load_network(cfg: &RunConfig, path: Option<&Path>) -> Result<Network, CliError> {
    let default = cfg.snapshot_path();
    let path = path.unwrap_or(&default);
    let (meta, params) = snapshot::load(path).map_err(|e| CliError::Snapshot(format!("{}: {e}", path.display())))?;
    let meta: SnapshotMeta = serde_json::from_str(&meta)
        .map_err(|e| CliError::Snapshot(format!("{}: unreadable metadata: {e}", path.display())))?;
    if meta.format != SNAPSHOT_FORMAT {
        return Err(CliError::Snapshot(format!("unsupported snapshot format `{}`", meta.format)));
    }
    if meta.backbone != cfg.backbone {
        return Err(CliError::Snapshot(format!(
            "snapshot backbone {:?} differs from config {:?}",
            meta.backbone, cfg.backbone
        )));
    }
    if meta.gflowout != cfg.gflowout {
        return Err(CliError::Snapshot(format!(
            "snapshot mask settings {:?} differ from config {:?}",
            meta.gflowout, cfg.gflowout
        )));
    }
    Network::from_params(meta.backbone, meta.gflowout, params).map_err(|e| CliError::Snapshot(e.to_string()))
}

/// K stochastic passes plus the expected-mask pass for every sample, with
/// optional noise on the preprocessed tensor. Sample `i` draws masks and
/// noise from its own sub-streams, so results do not depend on `threads`.
pub fn predict(
    net: &Network,
    samples: &[ImageSample],
    cfg: &RunConfig,
    noise: Option<NoiseSpec>,
    passes: usize,
    threads: usize,
) -> Result<Vec<PredictiveDistribution>, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    pool.install(|| {
        samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let mut x = preprocess(s, &cfg.preprocess)?;
                if let Some(n) = noise {
                    x = apply_noise_normalized(&x, n, &cfg.preprocess, &mut substream(cfg.seed, Stream::Noise, i as u64))?;
                }
                let mut rng = substream(cfg.seed, Stream::Eval, i as u64);
                Ok(net.predictive_passes(&s.id, &x, s.label, passes, Some(&mut rng))?)
            })
            .collect()
    })
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Snapshot to evaluate (default: `output_dir/model.gfmk`).
    #[arg(long)]
    pub snapshot: Option<PathBuf>,
    /// Split under `dataset_dir`.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Dataset directory; overrides `--split`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Noise on every preprocessed image, e.g. `gaussian:0.1`.
    #[arg(long)]
    pub noise: Option<NoiseSpec>,
    #[arg(long)]
    pub passes: Option<usize>,
    /// Report path (default: `output_dir/eval_<split>[_<noise>].json`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Default for EvalArgs {
    fn default() -> Self {
        Self {
            snapshot: None,
            split: "test".into(),
            dataset: None,
            noise: None,
            passes: None,
            out: None,
        }
    }
}

fn dataset_name(dir: &Path) -> String {
    dir.file_name().map_or_else(|| "dataset".into(), |n| n.to_string_lossy().into_owned())
}

/// Evaluates a snapshot; writes the JSON report and a `_bins.csv`
/// reliability table next to it.
pub fn cmd_eval(cfg: &RunConfig, args: &EvalArgs) -> Result<MetricsReport, CliError> {
    let passes = args.passes.unwrap_or(cfg.eval.passes);
    if passes == 0 {
        return Err(CliError::Config("--passes must be positive".into()));
    }
    let noise = args.noise.or(cfg.eval.noise);
    // zero-strength noise is the identity and is reported as clean
    let label = noise.filter(|n| !n.is_identity());
    let dir = args.dataset.clone().unwrap_or_else(|| cfg.split_dir(&args.split));
    let threads = eval_threads()?;
    let samples = load_split(&dir, cfg.backbone.n_classes)?;
    let net = load_network(cfg, args.snapshot.as_deref())?;
    let preds = predict(&net, &samples, cfg, noise, passes, threads)?;
    let echo = serde_json::json!({
        "run": cfg,
        "dataset": dir,
        "noise": label.map(|n| n.to_string()),
        "passes": passes,
    });
    let report = MetricsReport::compute(&preds, cfg.eval.ece_bins, cfg.eval.entropy, echo)?;
    let out = args.out.clone().unwrap_or_else(|| {
        let mut stem = format!("eval_{}", dataset_name(&dir));
        if let Some(n) = label {
            stem.push_str(&format!("_{}", n.to_string().replace(':', "-")));
        }
        cfg.output_dir.join(format!("{stem}.json"))
    });
    write_json(&out, &report)?;
    let bins = out.with_file_name(format!(
        "{}_bins.csv",
        out.file_stem().map_or_else(|| "eval".into(), |s| s.to_string_lossy())
    ));
    report.calibration.write_csv(fs::File::create(bins)?)?;
    Ok(report)
}

#[derive(Debug, Clone, Default, Args)]
pub struct OodArgs {
    #[arg(long)]
    pub snapshot: Option<PathBuf>,
    /// In-distribution dataset (default: `dataset_dir/test`).
    #[arg(long)]
    pub id_dataset: Option<PathBuf>,
    /// Shifted dataset (default: `dataset_dir/ood`).
    #[arg(long)]
    pub ood_dataset: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodOutput {
    pub comparison: OodComparison,
    pub id_entropy: EntropySummary,
    pub ood_entropy: EntropySummary,
    pub id_ece: f64,
    pub ood_ece: f64,
    /// OOD labels outside the model's classes were replaced, so only the
    /// entropy comparison is meaningful.
    pub ood_labels_ignored: bool,
}

/// Writes `ood_comparison.json` and `ood_entropy.csv` (one row per sample
/// of both datasets).
pub fn cmd_ood(cfg: &RunConfig, args: &OodArgs) -> Result<OodOutput, CliError> {
    let n_classes = cfg.backbone.n_classes;
    let id_dir = args.id_dataset.clone().unwrap_or_else(|| cfg.split_dir("test"));
    let ood_dir = args.ood_dataset.clone().unwrap_or_else(|| cfg.split_dir("ood"));
    let threads = eval_threads()?;
    let id = load_split(&id_dir, n_classes)?;
    if !ood_dir.is_dir() {
        return Err(CliError::Config(format!("dataset directory {} does not exist", ood_dir.display())));
    }
    let mut ood = load_dataset(&ood_dir)?;
    let ood_labels_ignored = ood.iter().any(|s| s.label >= n_classes);
    if ood_labels_ignored {
        ood.iter_mut().for_each(|s| s.label = 0);
    }
    let net = load_network(cfg, args.snapshot.as_deref())?;
    let passes = cfg.eval.passes;
    let id_preds = predict(&net, &id, cfg, None, passes, threads)?;
    let ood_preds = predict(&net, &ood, cfg, None, passes, threads)?;
    let id_report = MetricsReport::compute(&id_preds, cfg.eval.ece_bins, cfg.eval.entropy, serde_json::Value::Null)?;
    let ood_report = MetricsReport::compute(&ood_preds, cfg.eval.ece_bins, cfg.eval.entropy, serde_json::Value::Null)?;
    let out = OodOutput {
        comparison: compare_ood(&id_report, &ood_report)?,
        id_entropy: id_report.entropy,
        ood_entropy: ood_report.entropy,
        id_ece: id_report.ece,
        ood_ece: ood_report.ece,
        ood_labels_ignored,
    };
    write_json(&cfg.output_dir.join("ood_comparison.json"), &out)?;
    let mut w = csv::Writer::from_path(cfg.output_dir.join("ood_entropy.csv"))?;
    w.write_record(["split", "id", "label", "prediction", "entropy"])?;
    for (split, preds) in [("id", &id_preds), ("ood", &ood_preds)] {
        for (p, h) in preds.iter().zip(sample_entropies(preds, cfg.eval.entropy)?) {
            w.write_record([split, &p.id, &p.label.to_string(), &p.prediction().to_string(), &h.to_string()])?;
        }
    }
    w.flush()?;
    Ok(out)
}

#[derive(Debug, Clone, Args)]
pub struct SaliencyArgs {
    #[arg(long)]
    pub snapshot: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Number of lowest- and of highest-entropy samples to export.
    #[arg(long, default_value_t = 1)]
    pub top: usize,
}

impl Default for SaliencyArgs {
    fn default() -> Self {
        Self {
            snapshot: None,
            split: "test".into(),
            dataset: None,
            top: 1,
        }
    }
}

/// Grad-CAM heatmap (PGM) and overlay (PPM) of the predicted class for the
/// `top` lowest- and highest-entropy samples, written to
/// `output_dir/saliency`.
pub fn cmd_saliency(cfg: &RunConfig, args: &SaliencyArgs) -> Result<Vec<PathBuf>, CliError> {
    if args.top == 0 {
        return Err(CliError::Config("--top must be positive".into()));
    }
    let dir = args.dataset.clone().unwrap_or_else(|| cfg.split_dir(&args.split));
    let threads = eval_threads()?;
    let samples = load_split(&dir, cfg.backbone.n_classes)?;
    let net = load_network(cfg, args.snapshot.as_deref())?;
    let preds = predict(&net, &samples, cfg, None, cfg.eval.passes, threads)?;
    let h = sample_entropies(&preds, cfg.eval.entropy)?;
    let mut order: Vec<usize> = (0..h.len()).collect();
    order.sort_by(|&a, &b| h[a].total_cmp(&h[b]).then(a.cmp(&b)));
    let n = args.top.min(order.len());
    let picks = order[..n]
        .iter()
        .enumerate()
        .map(|(r, &i)| ("min", r, i))
        .chain(order.iter().rev().take(n).enumerate().map(|(r, &i)| ("max", r, i)));
    let out_dir = cfg.output_dir.join("saliency");
    fs::create_dir_all(&out_dir)?;
    let mut files = Vec::new();
    for (tag, rank, i) in picks {
        let s = &samples[i];
        let x = preprocess(s, &cfg.preprocess)?;
        let heat = grad_cam(&net, &x, preds[i].prediction(), None)?;
        let img = cfg.preprocess.denormalize(&x, &s.id)?;
        let stem = format!("{tag}{rank}_{}_H{:.4}", s.id, h[i]);
        let heat_path = out_dir.join(format!("{stem}_heatmap.pgm"));
        let over_path = out_dir.join(format!("{stem}_overlay.ppm"));
        heat.write_pgm(&heat_path)?;
        write_ppm(&over_path, &overlay(&heat, &img)?)?;
        files.push(heat_path);
        files.push(over_path);
    }
    Ok(files)
}
