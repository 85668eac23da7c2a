//! Command implementations behind the `rankprune` binary: run configuration,
//! training reports, evaluation, rank analysis, and the regularizer ablation.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointMeta};
use crate::data::{gen_synthetic_split, read_cifar10, synthetic_samples, LabeledImageSet, NormStats, SyntheticSpec};
use crate::error::{Error, Result};
use crate::layers::LayerSpec;
use crate::metrics::{model_account, topk_accuracy, ModelAccount};
use crate::model::{desk_architecture, InputShape, Model};
use crate::regularization::{LossConfig, RegMode};
use crate::tensor::Precision;
use crate::training::{fit, CheckpointPlan, EpochRecord, FitOptions, SgdConfig, TrainState};

/// Where training and held-out images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Cifar10 {
        train: Vec<PathBuf>,
        /// Explicit held-out files; without them the last tenth of `train` is held out.
        #[serde(default)]
        test: Vec<PathBuf>,
        #[serde(default)]
        limit_per_class: Option<usize>,
    },
}

/// Fraction of the training set held out when no explicit test set is given.
pub const HELDOUT_FRACTION: f64 = 0.1;

/// Standardized training and held-out splits.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: LabeledImageSet,
    pub heldout: LabeledImageSet,
    pub stats: NormStats,
}

impl DataSource {
    pub fn validate(&self) -> Result<()> {
        match self {
            DataSource::Synthetic(s) => {
                if s.classes < 2 || s.train_per_class == 0 || s.image_size == 0 || s.channels == 0 {
                    return Err(Error::Config(format!("invalid synthetic data settings {s:?}")));
                }
                if !(s.class_spread > 0.0 && s.class_spread <= 1.0) {
                    return Err(Error::Config(format!("class_spread must lie in (0, 1], got {}", s.class_spread)));
                }
            }
            DataSource::Cifar10 { train, limit_per_class, .. } => {
                if train.is_empty() {
                    return Err(Error::Config("cifar10 source needs at least one train file".into()));
                }
                if *limit_per_class == Some(0) {
                    return Err(Error::Config("limit_per_class must be positive".into()));
                }
            }
        }
        Ok(())
    }

    pub fn load(&self) -> Result<Splits> {
        match self {
            DataSource::Synthetic(spec) if spec.heldout_per_class > 0 => {
                let (train, heldout) = gen_synthetic_split(spec)?;
                let stats = train.stats.clone().expect("standardized split");
                Ok(Splits { train, heldout, stats })
            }
            DataSource::Synthetic(spec) => {
                let raw = synthetic_samples(spec, spec.train_per_class)?;
                let (train, heldout) = raw.split_tail(HELDOUT_FRACTION)?;
                standardize_pair(train, heldout)
            }
            DataSource::Cifar10 {
                train,
                test,
                limit_per_class,
            } => {
                let all = read_cifar10(train, *limit_per_class)?;
                let (train, heldout) = if test.is_empty() {
                    all.split_tail(HELDOUT_FRACTION)?
                } else {
                    (all, read_cifar10(test, None)?)
                };
                standardize_pair(train, heldout)
            }
        }
    }
}

fn standardize_pair(mut train: LabeledImageSet, mut heldout: LabeledImageSet) -> Result<Splits> {
    let stats = train.normalize()?;
    heldout.normalize_with(&stats)?;
    Ok(Splits { train, heldout, stats })
}

/// Network description: the reference desk model or an explicit layer list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum Architecture {
    Desk,
    Custom(Vec<LayerSpec>),
}

impl Architecture {
    pub fn specs(&self, input: InputShape, num_classes: usize) -> Vec<LayerSpec> {
        match self {
            Architecture::Desk => desk_architecture(input.channels, num_classes),
            Architecture::Custom(layers) => layers.clone(),
        }
    }
}

/// Optional per-field overrides of the preset loss configuration.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossOverrides {
    pub lambda_str: Option<f64>,
    pub lambda_comp: Option<f64>,
    pub mu_orth: Option<f64>,
    pub mu_sort: Option<f64>,
    pub epsilon: Option<f64>,
    pub lambda_reg: Option<f64>,
    pub delta: Option<f64>,
}

fn default_preset() -> String {
    "cifar10-resnet20".into()
}

fn default_mode() -> RegMode {
    RegMode::Proposed
}

fn default_architecture() -> Architecture {
    Architecture::Desk
}

fn default_checkpoint_every() -> usize {
    0
}

/// One JSON document describing a run; unknown fields are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSource,
    #[serde(default = "default_architecture")]
    pub architecture: Architecture,
    #[serde(default = "default_preset")]
    pub preset: String,
    #[serde(default = "default_mode")]
    pub mode: RegMode,
    #[serde(default)]
    pub loss: LossOverrides,
    pub sgd: SgdConfig,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub augment: bool,
    pub out_dir: PathBuf,
    /// Write a checkpoint every this many epochs (0: final checkpoint only).
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    /// Modes compared by `ablate`; defaults to all five.
    #[serde(default)]
    pub ablation_modes: Option<Vec<RegMode>>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Loss configuration of the proposed-mode run: preset, then overrides, then `mode`.
    pub fn base_loss(&self) -> Result<LossConfig> {
        let mut cfg = LossConfig::preset(&self.preset)?;
        let o = &self.loss;
        let set = |dst: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut cfg.lambda_str, o.lambda_str);
        set(&mut cfg.lambda_comp, o.lambda_comp);
        set(&mut cfg.mu_orth, o.mu_orth);
        set(&mut cfg.mu_sort, o.mu_sort);
        set(&mut cfg.epsilon, o.epsilon);
        set(&mut cfg.lambda_reg, o.lambda_reg);
        set(&mut cfg.delta, o.delta);
        Ok(cfg)
    }

    /// Loss configuration for a run in `mode`. Non-proposed modes take the comparison weight and threshold
    /// unless the config overrides them explicitly.
    pub fn loss_for(&self, mode: RegMode) -> Result<LossConfig> {
        let base = self.base_loss()?;
        let mut cfg = base.for_ablation(mode);
        if mode != RegMode::Proposed {
            if let Some(v) = self.loss.lambda_reg {
                cfg.lambda_reg = v;
            }
            if let Some(v) = self.loss.epsilon {
                cfg.epsilon = v;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.sgd.validate()?;
        if self.sgd.epochs == 0 {
            return Err(Error::Config("sgd.epochs must be positive".into()));
        }
        self.loss_for(self.mode)?;
        if let Some(modes) = &self.ablation_modes {
            if modes.is_empty() {
                return Err(Error::Config("ablation_modes must not be empty".into()));
            }
            for &m in modes {
                self.loss_for(m)?;
            }
        }
        if let Architecture::Custom(layers) = &self.architecture {
            if layers.is_empty() {
                return Err(Error::Config("custom architecture has no layers".into()));
            }
        }
        Ok(())
    }
}

/// Model drawn from the run seed for the given data.
pub fn init_model(cfg: &RunConfig, data: &LabeledImageSet) -> Result<Model> {
    let [c, h, w] = data.sample_shape();
    let input = InputShape {
        channels: c,
        height: h,
        width: w,
    };
    let specs = cfg.architecture.specs(input, data.num_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sgd.seed);
    let model = Model::init(input, &specs, &mut rng, cfg.precision)?;
    let nc = model.num_classes()?;
    if nc != data.num_classes {
        return Err(Error::Config(format!(
            "architecture outputs {nc} classes but the data has {}",
            data.num_classes
        )));
    }
    Ok(model)
}

/// Outcome of one training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub records: Vec<EpochRecord>,
    pub meta: CheckpointMeta,
}

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const MIDRUN_DIR: &str = "checkpoints";
/// Checkpoint of the freshly initialized model.
pub const INIT_DIR: &str = "init";

/// Trains in `mode` and writes every report plus the initial and final checkpoints into `out_dir`.
pub fn run_training(cfg: &RunConfig, mode: RegMode, splits: &Splits, out_dir: &Path, threads: usize) -> Result<TrainOutcome> {
    let loss = cfg.loss_for(mode)?;
    let model = init_model(cfg, &splits.train)?;
    let meta = CheckpointMeta {
        loss,
        sgd: cfg.sgd,
        precision: cfg.precision,
        augment: cfg.augment,
        stats: Some(splits.stats.clone()),
        data: serde_json::to_value(&cfg.data)?,
    };
    fs::create_dir_all(out_dir)?;
    let opts = FitOptions {
        precision: cfg.precision,
        augment: cfg.augment,
        threads,
        checkpoint: (cfg.checkpoint_every > 0).then(|| CheckpointPlan {
            dir: out_dir.join(MIDRUN_DIR),
            every: cfg.checkpoint_every,
            meta: meta.clone(),
        }),
        ..FitOptions::default()
    };
    let mut state = TrainState::new(model, &cfg.sgd);
    checkpoint::save(&out_dir.join(INIT_DIR), &state, &meta)?;
    let records = fit(&mut state, &splits.train, &splits.heldout, &loss, &cfg.sgd, &opts)?;
    write_reports(out_dir, &records)?;
    checkpoint::save(&out_dir.join(CHECKPOINT_DIR), &state, &meta)?;
    let summary = summarize(&state.model, records.last().map_or(0.0, |r| r.top1))?;
    fs::write(out_dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(TrainOutcome { state, records, meta })
}

/// Writes `report.csv`, `ranks.csv`, `sigma_trace.csv` and `events.jsonl`.
///
/// `report.csv` and `sigma_trace.csv` start at epoch 0 (initialization); `ranks.csv` has one row per trained epoch.
pub fn write_reports(dir: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut report = csv::Writer::from_path(dir.join("report.csv"))?;
    report.write_record([
        "epoch", "l_app", "l_orth", "l_sort", "l_comp", "l_total", "lr", "params", "macs", "top1", "l_reg",
        "compression",
    ])?;
    for r in records {
        report.write_record([
            r.epoch.to_string(),
            r.losses.app.to_string(),
            r.losses.orth.to_string(),
            r.losses.sort.to_string(),
            r.losses.comp.to_string(),
            r.losses.total.to_string(),
            r.lr.to_string(),
            r.params.to_string(),
            r.macs.to_string(),
            r.top1.to_string(),
            r.losses.reg.to_string(),
            r.compression.to_string(),
        ])?;
    }
    report.flush()?;

    let mut ranks = csv::Writer::from_path(dir.join("ranks.csv"))?;
    let n_layers = records.first().map_or(0, |r| r.ranks.len());
    let mut header = vec!["epoch".to_string()];
    header.extend((0..n_layers).map(|i| format!("layer{i}")));
    ranks.write_record(&header)?;
    for r in records.iter().filter(|r| r.epoch > 0) {
        let mut row = vec![r.epoch.to_string()];
        row.extend(r.ranks.iter().map(usize::to_string));
        ranks.write_record(&row)?;
    }
    ranks.flush()?;

    let mut trace = csv::Writer::from_path(dir.join("sigma_trace.csv"))?;
    trace.write_record(["epoch", "layer", "index", "value"])?;
    for r in records {
        for (layer, sigma) in r.sigma.iter().enumerate() {
            for (i, v) in sigma.iter().enumerate() {
                trace.write_record([r.epoch.to_string(), layer.to_string(), i.to_string(), v.to_string()])?;
            }
        }
    }
    trace.flush()?;

    let mut events = String::new();
    for r in records {
        for e in &r.events {
            events.push_str(&serde_json::to_string(e)?);
            events.push('\n');
        }
    }
    fs::write(dir.join("events.jsonl"), events)?;
    Ok(())
}

/// Headline numbers of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub top1: f64,
    pub params: usize,
    pub dense_params: usize,
    pub compression: f64,
    pub macs: u64,
    pub ranks: Vec<usize>,
}

fn summarize(model: &Model, top1: f64) -> Result<Summary> {
    let acc = model_account(model)?;
    Ok(Summary {
        top1,
        params: acc.trainable_params,
        dense_params: acc.dense_params,
        compression: acc.compression,
        macs: acc.macs,
        ranks: model.ranks(),
    })
}

/// `train`: runs one fit and writes its reports. Returns the output directory.
pub fn cmd_train(config: &Path, out: Option<&Path>, threads: usize) -> Result<(PathBuf, TrainOutcome)> {
    let cfg = RunConfig::load(config)?;
    let out_dir = out.map_or_else(|| cfg.out_dir.clone(), Path::to_path_buf);
    let splits = cfg.data.load()?;
    let outcome = run_training(&cfg, cfg.mode, &splits, &out_dir, threads)?;
    Ok((out_dir, outcome))
}

/// Which images `eval` scores.
#[derive(Debug, Clone, PartialEq)]
pub enum EvalData {
    /// The split recorded in the checkpoint's data source.
    Train,
    Heldout,
    /// CIFAR-10 files, standardized with the checkpoint's statistics.
    Cifar10(Vec<PathBuf>),
}

impl std::str::FromStr for EvalData {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(EvalData::Train),
            "heldout" => Ok(EvalData::Heldout),
            _ => match s.strip_prefix("cifar10:") {
                Some(paths) if !paths.is_empty() => Ok(EvalData::Cifar10(paths.split(',').map(PathBuf::from).collect())),
                _ => Err(Error::Config(format!(
                    "data spec `{s}`: expected `train`, `heldout`, or `cifar10:<file>[,<file>...]`"
                ))),
            },
        }
    }
}

/// Result of `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub top1: f64,
    pub top5: Option<f64>,
    pub params: usize,
    pub dense_params: usize,
    pub compression: f64,
    pub macs: u64,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "samples      {}", self.samples);
        let _ = writeln!(s, "top-1        {}", self.top1);
        if let Some(t5) = self.top5 {
            let _ = writeln!(s, "top-5        {t5}");
        }
        let _ = writeln!(s, "params       {}", self.params);
        let _ = writeln!(s, "dense params {}", self.dense_params);
        let _ = writeln!(s, "compression  {}", self.compression);
        let _ = writeln!(s, "MACs         {}", self.macs);
        s
    }
}

fn eval_set(data: &EvalData, meta: &CheckpointMeta) -> Result<LabeledImageSet> {
    match data {
        EvalData::Train | EvalData::Heldout => {
            let source: DataSource = serde_json::from_value(meta.data.clone())
                .map_err(|e| Error::Format { offset: 0, msg: format!("checkpoint data source: {e}") })?;
            let splits = source.load()?;
            if let Some(stats) = &meta.stats {
                if *stats != splits.stats {
                    return Err(Error::Input("data source no longer reproduces the checkpoint's statistics".into()));
                }
            }
            Ok(if *data == EvalData::Train { splits.train } else { splits.heldout })
        }
        EvalData::Cifar10(paths) => {
            let mut set = read_cifar10(paths, None)?;
            match &meta.stats {
                Some(stats) => set.normalize_with(stats)?,
                None => {
                    set.normalize()?;
                }
            }
            Ok(set)
        }
    }
}

/// Scores `model` on `set`.
pub fn evaluate_model(model: &Model, set: &LabeledImageSet, precision: Precision) -> Result<EvalReport> {
    let nc = model.num_classes()?;
    if set.num_classes != nc {
        return Err(Error::Input(format!("data has {} classes, model outputs {nc}", set.num_classes)));
    }
    let logits = model.predict(&set.images, precision, 256)?;
    let acc: ModelAccount = model_account(model)?;
    Ok(EvalReport {
        samples: set.len(),
        top1: topk_accuracy(&logits, &set.labels, 1)?,
        top5: if nc >= 5 { Some(topk_accuracy(&logits, &set.labels, 5)?) } else { None },
        params: acc.trainable_params,
        dense_params: acc.dense_params,
        compression: acc.compression,
        macs: acc.macs,
    })
}

/// `eval`: loads a checkpoint and scores it.
pub fn cmd_eval(ckpt: &Path, data: &EvalData) -> Result<EvalReport> {
    let (state, meta) = checkpoint::load(ckpt)?;
    let set = eval_set(data, &meta)?;
    evaluate_model(&state.model, &set, meta.precision)
}

/// One row of the rank analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAnalysis {
    pub layer: usize,
    pub kind: String,
    pub h: usize,
    pub w: usize,
    pub theta: usize,
    pub rank: usize,
    pub params: usize,
    pub dense_params: usize,
    pub compression: f64,
    pub macs: u64,
    pub mac_share: f64,
    pub sigma: Vec<f64>,
}

/// Per-layer rank, σ, compression and MAC share of a model.
pub fn analyze_model(model: &Model) -> Result<Vec<LayerAnalysis>> {
    let acc = model_account(model)?;
    let total = acc.macs.max(1) as f64;
    Ok(acc
        .layers
        .iter()
        .map(|l| {
            let factors = model.layers[l.layer].factors();
            LayerAnalysis {
                layer: l.layer,
                kind: l.kind.clone(),
                h: l.h,
                w: l.w,
                theta: factors.map_or(l.rank, |p| p.theta),
                rank: l.rank,
                params: l.p_actual,
                dense_params: l.p_dense,
                compression: l.compression,
                macs: l.macs,
                mac_share: l.macs as f64 / total,
                sigma: factors.map_or_else(Vec::new, |p| p.sigma.data().to_vec()),
            }
        })
        .collect())
}

pub fn write_analysis_csv(path: &Path, rows: &[LayerAnalysis]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "layer", "kind", "h", "w", "theta", "rank", "params", "dense_params", "compression", "macs", "mac_share",
        "sigma",
    ])?;
    for r in rows {
        let sigma: Vec<String> = r.sigma.iter().map(f64::to_string).collect();
        w.write_record([
            r.layer.to_string(),
            r.kind.clone(),
            r.h.to_string(),
            r.w.to_string(),
            r.theta.to_string(),
            r.rank.to_string(),
            r.params.to_string(),
            r.dense_params.to_string(),
            r.compression.to_string(),
            r.macs.to_string(),
            r.mac_share.to_string(),
            sigma.join(" "),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn analysis_table(rows: &[LayerAnalysis]) -> String {
    let mut s = format!(
        "{:>5} {:>4} {:>5} {:>4} {:>5} {:>4} {:>7} {:>7} {:>11} {:>9} {:>9}  sigma\n",
        "layer", "kind", "h", "w", "theta", "rank", "params", "dense", "compression", "macs", "mac_share"
    );
    for r in rows {
        let sigma: Vec<String> = r.sigma.iter().map(|v| format!("{v:.4}")).collect();
        let _ = writeln!(
            s,
            "{:>5} {:>4} {:>5} {:>4} {:>5} {:>4} {:>7} {:>7} {:>11.6} {:>9} {:>9.6}  {}",
            r.layer,
            r.kind,
            r.h,
            r.w,
            r.theta,
            r.rank,
            r.params,
            r.dense_params,
            r.compression,
            r.macs,
            r.mac_share,
            sigma.join(" ")
        );
    }
    s
}

/// `analyze`: per-layer report of a checkpoint, written as CSV to `csv_out`.
pub fn cmd_analyze(ckpt: &Path, csv_out: &Path) -> Result<Vec<LayerAnalysis>> {
    let (state, _) = checkpoint::load(ckpt)?;
    let rows = analyze_model(&state.model)?;
    write_analysis_csv(csv_out, &rows)?;
    Ok(rows)
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: RegMode,
    pub top1: f64,
    pub compression_pct: f64,
    pub macs: u64,
    pub params: usize,
}

/// `ablate`: one fit per mode under the shared seed, each in `<out_dir>/<mode>/`, then `ablation.csv`.
pub fn cmd_ablate(config: &Path, out: Option<&Path>, threads: usize) -> Result<(PathBuf, Vec<AblationRow>)> {
    let cfg = RunConfig::load(config)?;
    let out_dir = out.map_or_else(|| cfg.out_dir.clone(), Path::to_path_buf);
    let splits = cfg.data.load()?;
    let modes = cfg.ablation_modes.clone().unwrap_or_else(|| RegMode::ALL.to_vec());
    let mut rows = Vec::new();
    for mode in modes {
        log::info!("ablation: mode {}", mode.as_str());
        let outcome = run_training(&cfg, mode, &splits, &out_dir.join(mode.as_str()), threads)?;
        let last = outcome.records.last().expect("fit yields records");
        rows.push(AblationRow {
            mode,
            top1: last.top1,
            compression_pct: 100.0 * last.compression,
            macs: last.macs,
            params: last.params,
        });
    }
    write_ablation_csv(&out_dir.join("ablation.csv"), &rows)?;
    Ok((out_dir, rows))
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["mode", "top1", "compression_pct", "macs", "params"])?;
    for r in rows {
        w.write_record([
            r.mode.as_str().to_string(),
            r.top1.to_string(),
            r.compression_pct.to_string(),
            r.macs.to_string(),
            r.params.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<9} {:>8} {:>15} {:>10} {:>8}\n", "mode", "top1", "compression_pct", "macs", "params");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<9} {:>8.4} {:>15.4} {:>10} {:>8}",
            r.mode.as_str(),
            r.top1,
            r.compression_pct,
            r.macs,
            r.params
        );
    }
    s
}

/// Human-readable end-of-training summary; its numbers are also in `summary.json`.
pub fn train_summary_text(out_dir: &Path, outcome: &TrainOutcome) -> String {
    let mut s = String::new();
    if let Some(last) = outcome.records.last() {
        let _ = writeln!(s, "epochs       {}", last.epoch);
        let _ = writeln!(s, "top-1        {}", last.top1);
        let _ = writeln!(s, "params       {}", last.params);
        let _ = writeln!(s, "dense params {}", last.dense_params);
        let _ = writeln!(s, "compression  {}", last.compression);
        let _ = writeln!(s, "MACs         {}", last.macs);
        let _ = writeln!(s, "ranks        {:?}", last.ranks);
    }
    let _ = writeln!(s, "reports in   {}", out_dir.display());
    s
}

/// Writes `text` to stdout, ignoring a closed pipe.
pub fn emit(text: &str) {
    let _ = std::io::stdout().write_all(text.as_bytes());
}
