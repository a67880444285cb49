//! Optimizer, learning-rate schedule, run configuration and the training loop.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diffcore::{rng_from_seed, Graph, ParamGroup, ParamId, ParamStore, Tensor};
use crate::error::{bail, Error, Result};
use crate::evalkit::{ensemble_stages, evaluate, DetectionResult, EvalReport, ENSEMBLE_NMS_IOU, EVAL_THRESHOLDS};
use crate::geometry::IouMode;
use crate::heads_losses::write_loss_rows;
use crate::model::{Detector, ModelConfig};
use crate::scenegen::{augment, generate_split, Dataset, GeneratorConfig, Scene};

pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const LOSSES_FILE: &str = "losses.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Learning rate of the attention modules relative to the base rate.
    pub decoder_lr_factor: f64,
    /// Decay points as fractions of the total epoch count.
    pub milestones: Vec<f64>,
    pub decay_factor: f64,
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 0.006,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
            decoder_lr_factor: 0.1,
            milestones: vec![0.7, 0.85],
            decay_factor: 0.1,
            grad_clip: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.decoder_lr_factor > 0.0) || !(self.grad_clip > 0.0) {
            bail!(Config, "lr, decoder_lr_factor and grad_clip must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            bail!(Config, "betas must lie in [0, 1) and eps must be positive");
        }
        if self.weight_decay < 0.0 || !(self.decay_factor > 0.0) {
            bail!(Config, "weight_decay must be non-negative and decay_factor positive");
        }
        let m = &self.milestones;
        if m.iter().any(|&x| !(x > 0.0 && x < 1.0)) || m.windows(2).any(|w| w[0] >= w[1]) {
            bail!(Config, "milestones must be strictly increasing fractions in (0, 1), got {m:?}");
        }
        Ok(())
    }
}

/// Learning rate of each parameter group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupRates {
    pub backbone: f64,
    pub decoder: f64,
}

impl GroupRates {
    pub fn of(&self, g: ParamGroup) -> f64 {
        match g {
            ParamGroup::Backbone => self.backbone,
            ParamGroup::Decoder => self.decoder,
        }
    }
}

/// Base rate decayed once per milestone passed; the decoder group runs at
/// a fixed fraction of it.
pub fn lr_at(epoch: usize, total_epochs: usize, cfg: &OptimizerConfig) -> GroupRates {
    let passed = cfg
        .milestones
        .iter()
        .filter(|&&m| epoch >= (m * total_epochs as f64).round() as usize)
        .count();
    let backbone = cfg.lr * cfg.decay_factor.powi(passed as i32);
    GroupRates {
        backbone,
        decoder: backbone * cfg.decoder_lr_factor,
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [(ParamId, Tensor)], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        bail!(Argument, "max_norm must be positive");
    }
    let norm = grads
        .iter()
        .flat_map(|(_, t)| t.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, t) in grads.iter_mut() {
            t.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    Ok(norm)
}

/// Moment estimates and hyperparameters of decoupled-decay Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
}

impl AdamW {
    pub fn new(cfg: &OptimizerConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: vec![],
            v: vec![],
        }
    }

    /// One update of every parameter that received a gradient.
    pub fn adamw_step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], rates: &GroupRates) -> Result<()> {
        for (id, g) in grads {
            if g.shape() != store.value(*id).shape() {
                bail!(Dimension, "gradient of {} has shape {:?}, parameter {:?}", store.name(*id), g.shape(), store.value(*id).shape());
            }
            if !g.is_finite() {
                bail!(Training, "non-finite gradient for parameter {}", store.name(*id));
            }
        }
        self.step += 1;
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads {
            let lr = rates.of(store.group(*id));
            let n = g.numel();
            let m = self.m[id.0].get_or_insert_with(|| vec![0.0; n]);
            let v = self.v[id.0].get_or_insert_with(|| vec![0.0; n]);
            let p = store.value_mut(*id).data_mut();
            for i in 0..n {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                p[i] -= lr * (update + self.weight_decay * p[i]);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub trials: usize,
    pub epochs: usize,
    pub train_scenes: usize,
    pub val_scenes: usize,
    /// Evaluate every this many epochs; zero evaluates only at the end.
    pub eval_every: usize,
    pub augment: bool,
    /// Merge the predictions of every decoder stage before evaluation.
    pub ensemble: bool,
    pub optimizer: OptimizerConfig,
    pub generator: GeneratorConfig,
    pub model: ModelConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            trials: 1,
            epochs: 300,
            train_scenes: 64,
            val_scenes: 16,
            eval_every: 50,
            augment: true,
            ensemble: false,
            optimizer: OptimizerConfig::default(),
            generator: GeneratorConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.generator.validate()?;
        self.model.validate()?;
        if self.trials == 0 {
            bail!(Config, "trials must be at least 1");
        }
        if self.generator.points_per_scene < self.model.backbone.stage_point_counts[0] {
            bail!(
                Config,
                "scenes have {} points but the backbone samples {}",
                self.generator.points_per_scene,
                self.model.backbone.stage_point_counts[0]
            );
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Named starting points: `default`, `overfit` and `ablation`.
    pub fn preset(name: &str) -> Result<Self> {
        let mut cfg = Self::default();
        match name {
            "default" => {}
            "overfit" => {
                cfg.train_scenes = 8;
                cfg.val_scenes = 0;
                cfg.epochs = 300;
                cfg.eval_every = 0;
                cfg.augment = false;
                small_clouds(&mut cfg);
            }
            "ablation" => {
                cfg.train_scenes = 48;
                cfg.val_scenes = 100;
                cfg.epochs = 60;
                cfg.eval_every = 0;
                small_clouds(&mut cfg);
            }
            other => bail!(Argument, "unknown preset {other:?} (expected default, overfit or ablation)"),
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn iou_mode(&self) -> IouMode {
        if self.generator.yaw {
            IouMode::Oriented
        } else {
            IouMode::AxisAligned
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        self.generator.categories.iter().map(|c| c.name.clone()).collect()
    }

    pub fn generate_dataset(&self) -> Result<Dataset> {
        let gen = GeneratorConfig {
            seed: self.seed,
            ..self.generator.clone()
        };
        let (train, val) = generate_split(&gen, self.train_scenes, self.val_scenes)?;
        Ok(Dataset { generator: gen, train, val })
    }

    pub fn build_model(&self, seed: u64) -> Result<(Detector, ParamStore)> {
        Detector::new(&self.model, &self.model.head_config(&self.generator), seed)
    }
}

/// 512-point scenes with a proportionally smaller backbone.
fn small_clouds(cfg: &mut RunConfig) {
    cfg.generator.points_per_scene = 512;
    cfg.model.backbone.stage_point_counts = [256, 128, 64, 32];
    cfg.model.backbone.up_point_counts = [64, 128];
    cfg.optimizer.lr = 0.002;
}

/// Boxes for one scene: the last stage after class-wise NMS, or every
/// stage merged and suppressed together.
pub fn predict_scene(det: &Detector, store: &ParamStore, scene: &Scene, ensemble: bool, mode: IouMode) -> Result<DetectionResult> {
    let stages = det.detect(store, &scene.points, scene.features.as_ref())?;
    let results: Vec<DetectionResult> = stages
        .into_iter()
        .enumerate()
        .map(|(i, b)| DetectionResult::new(scene.id.clone(), b, i))
        .collect();
    if ensemble {
        ensemble_stages(&results, ENSEMBLE_NMS_IOU, mode)
    } else {
        Ok(results.last().expect("at least one stage").suppressed(ENSEMBLE_NMS_IOU, mode))
    }
}

/// Predictions for many scenes, in scene order.
pub fn predict(det: &Detector, store: &ParamStore, scenes: &[Scene], ensemble: bool, mode: IouMode) -> Result<Vec<DetectionResult>> {
    scenes.iter().map(|s| predict_scene(det, store, s, ensemble, mode)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: String,
    pub map: [f64; 2],
    /// Mean loss terms over the epoch (training) or the split (evaluation).
    pub losses: Vec<(String, f64)>,
}

pub fn metrics_header(loss_names: &[String]) -> String {
    let mut s = String::from("epoch,split,mAP@0.25,mAP@0.5");
    for n in loss_names {
        write!(s, ",{n}").unwrap();
    }
    s
}

pub fn metrics_line(row: &MetricsRow) -> String {
    let mut s = format!("{},{},{:.6},{:.6}", row.epoch, row.split, row.map[0], row.map[1]);
    for (_, v) in &row.losses {
        write!(s, ",{v:.6}").unwrap();
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub detector: Detector,
    pub store: ParamStore,
    pub metrics: Vec<MetricsRow>,
    /// Mean total loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub reports: Vec<(String, EvalReport)>,
}

/// Mean per-term losses and evaluation report on a split.
pub fn evaluate_split(
    det: &Detector,
    store: &ParamStore,
    scenes: &[Scene],
    cfg: &RunConfig,
) -> Result<(EvalReport, Vec<(String, f64)>)> {
    let mode = cfg.iou_mode();
    let mut sums: Vec<(String, f64)> = Vec::new();
    let mut results = Vec::with_capacity(scenes.len());
    for s in scenes {
        let mut g = Graph::new();
        let out = det.forward(&mut g, store, &s.points, s.features.as_ref())?;
        let (_, parts) = det.loss(&mut g, &out, &s.boxes)?;
        accumulate(&mut sums, parts.named());
        let stages: Vec<DetectionResult> = out
            .stages
            .into_iter()
            .enumerate()
            .map(|(i, p)| DetectionResult::new(s.id.clone(), p.boxes, i))
            .collect();
        results.push(if cfg.ensemble {
            ensemble_stages(&stages, ENSEMBLE_NMS_IOU, mode)?
        } else {
            stages.last().expect("at least one stage").suppressed(ENSEMBLE_NMS_IOU, mode)
        });
    }
    let n = scenes.len().max(1) as f64;
    sums.iter_mut().for_each(|(_, v)| *v /= n);
    let report = evaluate(&results, scenes, &cfg.class_names(), &EVAL_THRESHOLDS, mode)?;
    Ok((report, sums))
}

fn accumulate(sums: &mut Vec<(String, f64)>, terms: Vec<(String, f64)>) {
    if sums.is_empty() {
        *sums = terms;
    } else {
        for ((_, s), (_, v)) in sums.iter_mut().zip(terms) {
            *s += v;
        }
    }
}

/// Run directory writers.
struct RunFiles {
    metrics: BufWriter<File>,
    losses: BufWriter<File>,
    header_written: bool,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn io_err(e: std::io::Error) -> Error {
    Error::Training(format!("writing run files: {e}"))
}

/// Trains a fresh model on `data`. With `out`, writes the config, the
/// checkpoint, per-step loss terms and the metrics table there.
pub fn train(cfg: &RunConfig, data: &Dataset, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        bail!(Data, "training split is empty");
    }
    let (det, mut store) = cfg.build_model(cfg.seed)?;
    let mut files = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join(CONFIG_FILE);
            std::fs::write(&p, cfg.to_toml()).map_err(|e| Error::io(&p, e))?;
            store.save(&dir.join(CHECKPOINT_FILE))?;
            let mut losses = create(&dir.join(LOSSES_FILE))?;
            writeln!(losses, "{}", crate::heads_losses::LOSS_CSV_HEADER).map_err(io_err)?;
            Some(RunFiles {
                metrics: create(&dir.join(METRICS_FILE))?,
                losses,
                header_written: false,
            })
        }
        None => None,
    };
    let mut opt = AdamW::new(&cfg.optimizer);
    let mut rng = rng_from_seed(cfg.seed ^ 0x5eed_a0a0);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut metrics = Vec::new();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut reports = Vec::new();
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let rates = lr_at(epoch, cfg.epochs, &cfg.optimizer);
        order.shuffle(&mut rng);
        let mut sums: Vec<(String, f64)> = Vec::new();
        for &i in &order {
            let scene = if cfg.augment {
                augment(&data.train[i], &mut rng)
            } else {
                data.train[i].clone()
            };
            let mut g = Graph::new();
            let fwd = det.forward(&mut g, &store, &scene.points, scene.features.as_ref())?;
            let (loss, parts) = det.loss(&mut g, &fwd, &scene.boxes)?;
            if !parts.total.is_finite() {
                if let Some(dir) = out {
                    store.save(&dir.join(CHECKPOINT_FILE))?;
                }
                bail!(Training, "non-finite loss at epoch {epoch}, step {step} (scene {})", scene.id);
            }
            if let Some(f) = files.as_mut() {
                let named = parts.named();
                let terms: Vec<(&str, f64)> = named.iter().map(|(n, v)| (n.as_str(), *v)).collect();
                write_loss_rows(&mut f.losses, step, "mean", &terms)?;
            }
            let mut grads = g.backward(loss)?.into_params();
            clip_grad_norm(&mut grads, cfg.optimizer.grad_clip)?;
            if let Err(e) = opt.adamw_step(&mut store, &grads, &rates) {
                if let Some(dir) = out {
                    store.save(&dir.join(CHECKPOINT_FILE))?;
                }
                return Err(e);
            }
            accumulate(&mut sums, parts.named());
            step += 1;
        }
        let n = order.len() as f64;
        sums.iter_mut().for_each(|(_, v)| *v /= n);
        epoch_losses.push(sums[0].1);

        let last = epoch + 1 == cfg.epochs;
        if last || (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0) {
            let mut rows = Vec::new();
            for (split, scenes) in [("train", &data.train), ("val", &data.val)] {
                if scenes.is_empty() {
                    continue;
                }
                let (report, losses) = evaluate_split(&det, &store, scenes, cfg)?;
                rows.push(MetricsRow {
                    epoch: epoch + 1,
                    split: split.to_string(),
                    map: [report.map[0], report.map[1]],
                    losses,
                });
                if last {
                    reports.push((split.to_string(), report));
                }
            }
            if let (Some(f), Some(dir)) = (files.as_mut(), out) {
                for r in &rows {
                    if !f.header_written {
                        let names: Vec<String> = r.losses.iter().map(|(n, _)| n.clone()).collect();
                        writeln!(f.metrics, "{}", metrics_header(&names)).map_err(io_err)?;
                        f.header_written = true;
                    }
                    writeln!(f.metrics, "{}", metrics_line(r)).map_err(io_err)?;
                }
                f.metrics.flush().map_err(io_err)?;
                f.losses.flush().map_err(io_err)?;
                store.save(&dir.join(CHECKPOINT_FILE))?;
            }
            metrics.extend(rows);
        }
    }
    if let Some(mut f) = files {
        f.metrics.flush().map_err(io_err)?;
        f.losses.flush().map_err(io_err)?;
    }
    if let Some(dir) = out {
        store.save(&dir.join(CHECKPOINT_FILE))?;
    }
    Ok(TrainOutcome {
        detector: det,
        store,
        metrics,
        epoch_losses,
        reports,
    })
}

/// Rebuilds a trained model from a run directory.
pub fn load_run(dir: &Path) -> Result<(RunConfig, Detector, ParamStore)> {
    let cfg = RunConfig::load(&dir.join(CONFIG_FILE))?;
    let (det, mut store) = cfg.build_model(cfg.seed)?;
    store.assign_from(&ParamStore::load(&dir.join(CHECKPOINT_FILE))?)?;
    Ok((cfg, det, store))
}
