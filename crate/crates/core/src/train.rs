//! STL / MTL fine-tuning, keypoint-head pretraining, validation-based model
//! selection and λ_K sweeps.
//!
//! Output layout of a training directory:
//!
//! ```text
//! <out>/warmup/<digest>.safetensors   shared tracking-only initialisation
//! <out>/runs/<digest>/model.safetensors
//! <out>/runs/<digest>/log.jsonl       one line per epoch, then the run record
//! <out>/runs.jsonl                    one run record per completed run
//! ```

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::data::{AugmentConfig, Clip, PairingConfig, TrainSample, TrainingData};
use crate::geometry::{miou, AnchorSet, BBox};
use crate::losses::{
    assign_anchor_targets, cls_loss, kpt_loss, make_keypoint_target, mtl_loss, reg_loss, trk_loss,
    AnchorThresholds, LossWeights,
};
use crate::model::{
    digest_json, is_keypoint_param, load_checkpoint, save_checkpoint, Model, ModelConfig,
    TEMPLATE_SIZE,
};
use crate::tracking::{track_sequence, TrackerConfig};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Stl,
    Mtl,
    KptPretrain,
}

/// Tracking-only phase run before the compared arms, standing in for a
/// generally pretrained tracker. All arms with the same settings share it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WarmupConfig {
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            learning_rate: 5e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub samples_per_epoch: usize,
    /// Rescale each batch gradient to at most this global norm (0 = off).
    pub grad_clip: f64,
    pub warmup: WarmupConfig,
    /// Pretrain the keypoint head on a frozen backbone before MTL training.
    pub pretrain_keypoint_head: bool,
    pub pretrain_epochs: usize,
    pub pretrain_learning_rate: f64,
    pub anchors: AnchorThresholds,
    /// Radius of the disc marking a keypoint in its target map.
    pub keypoint_radius: usize,
    pub augment: AugmentConfig,
    pub pairing: PairingConfig,
    /// Validation pairs drawn once per run for the validation losses.
    pub val_samples: usize,
    pub tracker: TrackerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Stl,
            seed: 0,
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            learning_rate: 8e-4,
            momentum: 0.9,
            epochs: 5,
            batch_size: 8,
            samples_per_epoch: 160,
            grad_clip: 5.0,
            warmup: WarmupConfig::default(),
            pretrain_keypoint_head: false,
            pretrain_epochs: 5,
            pretrain_learning_rate: 1e-3,
            anchors: AnchorThresholds::default(),
            keypoint_radius: 2,
            augment: AugmentConfig::default(),
            pairing: PairingConfig::default(),
            val_samples: 16,
            tracker: TrackerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if self.mode == TrainMode::Stl && self.loss.lambda_k != 0.0 {
            return Err(Error::Config(format!(
                "stl training requires lambda_k = 0, got {}",
                self.loss.lambda_k
            )));
        }
        if self.mode == TrainMode::KptPretrain && self.pretrain_keypoint_head {
            return Err(Error::Config(
                "keypoint pretraining cannot itself request pretraining".into(),
            ));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("warmup.learning_rate", self.warmup.learning_rate),
            ("pretrain_learning_rate", self.pretrain_learning_rate),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 || self.samples_per_epoch == 0 {
            return Err(Error::Config(
                "batch size and samples per epoch must be positive".into(),
            ));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::Config("grad_clip must be ≥ 0".into()));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        digest_json(self)
    }

    fn short_digest(&self) -> String {
        self.digest()[..16].to_string()
    }

    /// The shared tracking-only phase that precedes this run.
    pub fn warmup_config(&self) -> TrainConfig {
        TrainConfig {
            mode: TrainMode::Stl,
            loss: LossWeights {
                lambda_k: 0.0,
                ..self.loss
            },
            learning_rate: self.warmup.learning_rate,
            epochs: self.warmup.epochs,
            warmup: WarmupConfig {
                epochs: 0,
                ..self.warmup.clone()
            },
            pretrain_keypoint_head: false,
            ..self.clone()
        }
    }

    fn pretrain_config(&self) -> TrainConfig {
        TrainConfig {
            mode: TrainMode::KptPretrain,
            learning_rate: self.pretrain_learning_rate,
            epochs: self.pretrain_epochs,
            pretrain_keypoint_head: false,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Validation tracking mIoU (tracking modes).
    pub val_miou: Option<f64>,
    /// Validation keypoint loss (when keypoint data exists).
    pub val_kpt_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub digest: String,
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    /// Index into `epochs` of the kept model.
    pub selected_epoch: usize,
    pub checkpoint: Option<PathBuf>,
    pub model_digest: String,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    /// Applies the selection rule to the stored per-epoch metrics; the first
    /// best epoch wins ties. Without any validation metric the latest epoch
    /// is selected.
    pub fn recompute_selection(epochs: &[EpochRecord], mode: TrainMode) -> Option<usize> {
        let key = |e: &EpochRecord| match mode {
            TrainMode::KptPretrain => e.val_kpt_loss.map(|v| -v),
            _ => e.val_miou,
        };
        let mut best: Option<(usize, f64)> = None;
        for (i, e) in epochs.iter().enumerate() {
            if let Some(v) = key(e) {
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((i, v));
                }
            }
        }
        best.map(|(i, _)| i).or(epochs.len().checked_sub(1))
    }
}

/// Per-sample objective. Returns the loss variable and its keypoint part.
fn sample_loss(
    g: &mut Graph,
    model: &Model,
    trainable: &dyn Fn(&str) -> bool,
    sample: &TrainSample,
    cfg: &TrainConfig,
    anchors: &AnchorSet,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, Vec<(String, Var)>)> {
    let bound = model.bind(g, trainable);
    let z = g.constant(sample.template.clone());
    let fz = bound.backbone(g, z)?;
    let kpt = |g: &mut Graph, fz: Var| -> Result<Option<Var>> {
        match &sample.keypoints {
            Some(kps) => {
                let logits = bound.keypoint_head(g, fz)?;
                let target = make_keypoint_target(kps, cfg.keypoint_radius, TEMPLATE_SIZE);
                Ok(Some(kpt_loss(g, logits, &target)?))
            }
            None => Ok(None),
        }
    };
    let loss = match cfg.mode {
        TrainMode::KptPretrain => {
            kpt(g, fz)?.ok_or_else(|| Error::Data("pretraining sample without keypoints".into()))?
        }
        TrainMode::Stl | TrainMode::Mtl => {
            let x = g.constant(sample.detection.clone());
            let fx = bound.backbone(g, x)?;
            let out = bound.rpn(g, fz, fx)?;
            let targets = assign_anchor_targets(anchors, &sample.detection_box, &cfg.anchors, rng);
            let c = cls_loss(g, out.cls, &targets)?;
            let r = reg_loss(g, out.reg, &targets)?;
            let trk = trk_loss(g, c, r, &cfg.loss)?;
            let k = if cfg.mode == TrainMode::Mtl && cfg.loss.lambda_k != 0.0 {
                kpt(g, fz)?
            } else {
                None
            };
            mtl_loss(g, trk, k, &cfg.loss)?
        }
    };
    let vars = bound
        .vars()
        .filter(|(_, v)| g.requires_grad(*v))
        .map(|(n, v)| (n.to_string(), v))
        .collect();
    Ok((loss, vars))
}

fn trainable_filter(mode: TrainMode) -> fn(&str) -> bool {
    match mode {
        TrainMode::KptPretrain => is_keypoint_param,
        // the keypoint head only receives gradient through the MTL term
        TrainMode::Stl | TrainMode::Mtl => |_: &str| true,
    }
}

/// Stills reserved for validation: the last tenth.
fn still_split(n: usize) -> usize {
    if n < 2 {
        n
    } else {
        n - (n / 10).max(1)
    }
}

fn rng_stream(seed: u64, phase: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((phase << 32) + epoch as u64);
    rng
}

const PHASE_TRAIN: u64 = 1;
const PHASE_VAL: u64 = 2;

/// Mean tracking mIoU over clips with at least two frames.
pub fn clips_miou(model: &Model, tracker: TrackerConfig, clips: &[Clip]) -> Result<Option<f64>> {
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for c in clips.iter().filter(|c| c.frames.len() >= 2) {
        let r = track_sequence(model, tracker, &c.tensors(), &c.gt)?;
        preds.push(r.predictions);
        gts.push(c.gt[1..].to_vec());
    }
    if preds.is_empty() {
        return Ok(None);
    }
    Ok(Some(miou(&preds, &gts)?))
}

/// A view of the data with validation stills held out.
struct Split<'a> {
    train: TrainingData,
    val_stills: &'a [crate::data::Still],
    val_clips: &'a [Clip],
}

fn split_data(data: &TrainingData) -> Split<'_> {
    let cut = still_split(data.stills.len());
    Split {
        train: TrainingData {
            stills: data.stills[..cut].to_vec(),
            train: data.train.clone(),
            val: Vec::new(),
        },
        val_stills: &data.stills[cut..],
        val_clips: &data.val,
    }
}

struct Progress<'a> {
    log: Option<&'a mut dyn std::io::Write>,
}

impl Progress<'_> {
    fn line<T: Serialize>(&mut self, value: &T) -> Result<()> {
        if let Some(w) = self.log.as_mut() {
            let s = serde_json::to_string(value)?;
            writeln!(w, "{s}").map_err(|e| Error::io("training log", e))?;
        }
        Ok(())
    }
}

/// Runs one training phase from `init`. Returns the selected model and the
/// per-epoch metrics. `on_best` is called whenever a new best model appears.
fn run_phase(
    cfg: &TrainConfig,
    data: &TrainingData,
    init: Model,
    progress: &mut Progress<'_>,
    on_best: &mut dyn FnMut(&Model) -> Result<()>,
) -> Result<(Model, Vec<EpochRecord>, usize)> {
    cfg.validate()?;
    let split = split_data(data);
    let anchors = cfg.model.anchor_set()?;
    let trainable = trainable_filter(cfg.mode);
    let mut model = init;
    if model.config != cfg.model {
        return Err(Error::Config(
            "initial model does not match the configured architecture".into(),
        ));
    }
    let pretrain = cfg.mode == TrainMode::KptPretrain;
    let source = if pretrain {
        TrainingData {
            stills: split.train.stills.clone(),
            ..Default::default()
        }
    } else {
        split.train.clone()
    };
    if source.stills.is_empty() && source.train.is_empty() {
        return Err(Error::Data("no training samples for this mode".into()));
    }

    // fixed validation pairs
    let mut vrng = rng_stream(cfg.seed, PHASE_VAL, 0);
    let val_data = TrainingData {
        stills: split.val_stills.to_vec(),
        train: split.val_clips.to_vec(),
        val: Vec::new(),
    };
    let val_pairs: Vec<TrainSample> = if val_data.stills.is_empty() && val_data.train.is_empty() {
        Vec::new()
    } else {
        let plan = val_data.plan_epoch(cfg.val_samples, &cfg.pairing, &mut vrng);
        plan.into_iter()
            .map(|s| val_data.sample(s, &AugmentConfig::none(), &mut vrng))
            .collect::<Result<_>>()?
    };
    let val_kpt: Vec<TrainSample> = split
        .val_stills
        .iter()
        .map(|s| {
            let f = crate::image::rgb8_to_tensor(&s.image);
            crate::data::make_sample(
                &f,
                &s.bbox,
                Some(&s.keypoints),
                &f,
                &s.bbox,
                &AugmentConfig::none(),
                &mut vrng,
            )
        })
        .collect::<Result<_>>()?;

    let mut velocity: std::collections::BTreeMap<String, Tensor> = model
        .params
        .iter()
        .filter(|(n, _)| trainable(n))
        .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
        .collect();
    let mut epochs = Vec::new();
    let mut best: Option<(usize, Model)> = None;
    // the starting point is the last good model until an epoch completes
    on_best(&model)?;

    for epoch in 0..cfg.epochs {
        let mut rng = rng_stream(cfg.seed, PHASE_TRAIN, epoch);
        let plan = source.plan_epoch(cfg.samples_per_epoch, &cfg.pairing, &mut rng);
        let mut total = 0.0;
        for batch in plan.chunks(cfg.batch_size) {
            let mut grads: std::collections::BTreeMap<String, Tensor> = Default::default();
            for &src in batch {
                let sample = source.sample(src, &cfg.augment, &mut rng)?;
                let mut g = Graph::new();
                let (loss, vars) =
                    sample_loss(&mut g, &model, &trainable, &sample, cfg, &anchors, &mut rng)?;
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite training loss in epoch {}",
                        epoch + 1
                    )));
                }
                total += value;
                let gr = g.backward(loss)?;
                for (name, v) in vars {
                    if let Some(d) = gr.get(v) {
                        match grads.get_mut(&name) {
                            Some(acc) => acc.add_assign(d)?,
                            None => {
                                grads.insert(name, d.clone());
                            }
                        }
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            let norm = grads
                .values()
                .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
                .sum::<f64>()
                .sqrt()
                * inv;
            if !norm.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient in epoch {}",
                    epoch + 1
                )));
            }
            let clip = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
                cfg.grad_clip / norm
            } else {
                1.0
            };
            for (name, v) in velocity.iter_mut() {
                let p = model.params.get_mut(name).expect("velocity mirrors params");
                let g = grads.get(name);
                for (i, (vi, pi)) in v.data_mut().iter_mut().zip(p.data_mut()).enumerate() {
                    let gi = g.map_or(0.0, |g| g.data()[i] * inv * clip);
                    *vi = cfg.momentum * *vi + gi;
                    *pi -= cfg.learning_rate * *vi;
                }
            }
            model.round_to_f32();
        }
        let train_loss = total / plan.len() as f64;

        // validation on a read-only snapshot
        let mut vrng = rng_stream(cfg.seed, PHASE_VAL, epoch + 1);
        let mut val_loss = 0.0;
        let pairs = if pretrain { &val_kpt } else { &val_pairs };
        for s in pairs {
            let mut g = Graph::new();
            let (loss, _) = sample_loss(&mut g, &model, &|_| false, s, cfg, &anchors, &mut vrng)?;
            val_loss += g.value(loss).item();
        }
        if !pairs.is_empty() {
            val_loss /= pairs.len() as f64;
        }
        let val_kpt_loss = if val_kpt.is_empty() {
            None
        } else {
            let kcfg = TrainConfig {
                mode: TrainMode::KptPretrain,
                ..cfg.clone()
            };
            let mut sum = 0.0;
            for s in &val_kpt {
                let mut g = Graph::new();
                let (loss, _) =
                    sample_loss(&mut g, &model, &|_| false, s, &kcfg, &anchors, &mut vrng)?;
                sum += g.value(loss).item();
            }
            Some(sum / val_kpt.len() as f64)
        };
        let val_miou = if pretrain {
            None
        } else {
            clips_miou(&model, cfg.tracker, split.val_clips)?
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss,
            val_loss,
            val_miou,
            val_kpt_loss,
        };
        log::info!(
            "epoch {}/{}: train {:.4} val {:.4} mIoU {}",
            epoch + 1,
            cfg.epochs,
            train_loss,
            val_loss,
            val_miou.map_or("-".into(), |v| format!("{v:.4}"))
        );
        progress.line(&record)?;
        epochs.push(record);

        if RunRecord::recompute_selection(&epochs, cfg.mode) == Some(epoch) {
            on_best(&model)?;
            best = Some((epoch, model.clone()));
        }
    }
    match best {
        Some((i, m)) => Ok((m, epochs, i)),
        None => Ok((model, epochs, 0)),
    }
}

/// Where a run's files go.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

impl RunPaths {
    pub fn for_config(out: &Path, cfg: &TrainConfig) -> Self {
        let dir = out.join("runs").join(cfg.short_digest());
        Self {
            checkpoint: dir.join("model.safetensors"),
            log: dir.join("log.jsonl"),
            dir,
        }
    }
}

fn warmup_path(out: &Path, cfg: &TrainConfig) -> PathBuf {
    out.join("warmup").join(format!(
        "{}.safetensors",
        cfg.warmup_config().short_digest()
    ))
}

/// Produces the starting model: fresh initialisation, then the shared warmup
/// (cached under `out`) and optional keypoint-head pretraining.
fn initial_model(cfg: &TrainConfig, data: &TrainingData, out: Option<&Path>) -> Result<Model> {
    let mut model = Model::init(cfg.model.clone(), cfg.seed)?;
    if cfg.warmup.epochs > 0 {
        let wcfg = cfg.warmup_config();
        let cached = out.map(|o| warmup_path(o, cfg));
        model = match cached.as_ref().filter(|p| p.exists()) {
            Some(p) => load_checkpoint(p, Some(&cfg.model))?,
            None => {
                log::info!("warmup: {} epochs", wcfg.epochs);
                let (m, _, _) =
                    run_phase(&wcfg, data, model, &mut Progress { log: None }, &mut |_| {
                        Ok(())
                    })?;
                if let Some(p) = &cached {
                    save_checkpoint(&m, p)?;
                }
                m
            }
        };
    }
    if cfg.pretrain_keypoint_head && cfg.mode != TrainMode::KptPretrain {
        log::info!("keypoint head pretraining: {} epochs", cfg.pretrain_epochs);
        let (m, _, _) = run_phase(
            &cfg.pretrain_config(),
            data,
            model,
            &mut Progress { log: None },
            &mut |_| Ok(()),
        )?;
        model = m;
    }
    Ok(model)
}

static RECORDS_LOCK: std::sync::Mutex<()> = std::sync::Mutex::new(());

/// Trains one configuration. With `out`, the best checkpoint is written as
/// soon as it appears (so an abort keeps the last good model) and the run is
/// logged; a completed run with the same digest is loaded instead of retrained.
pub fn train(
    cfg: &TrainConfig,
    data: &TrainingData,
    out: Option<&Path>,
) -> Result<(Model, RunRecord)> {
    cfg.validate()?;
    let start = Instant::now();
    let Some(out) = out else {
        let init = initial_model(cfg, data, None)?;
        let (model, epochs, selected) = run_phase(
            cfg,
            data,
            init,
            &mut Progress { log: None },
            &mut |_| Ok(()),
        )?;
        let record = make_record(cfg, epochs, selected, None, &model, start);
        return Ok((model, record));
    };
    let paths = RunPaths::for_config(out, cfg);
    let existing = {
        let _g = RECORDS_LOCK.lock().unwrap_or_else(|e| e.into_inner());
        completed_run(out, &cfg.digest())?
    };
    if let Some(rec) = existing.filter(|_| paths.checkpoint.exists()) {
        log::info!("run {} already complete", &rec.digest[..16]);
        let model = load_checkpoint(&paths.checkpoint, Some(&cfg.model))?;
        return Ok((model, rec));
    }
    std::fs::create_dir_all(&paths.dir).map_err(|e| Error::io(&paths.dir, e))?;
    let init = initial_model(cfg, data, Some(out))?;
    let mut log_file = std::fs::File::create(&paths.log).map_err(|e| Error::io(&paths.log, e))?;
    let mut progress = Progress {
        log: Some(&mut log_file),
    };
    let ckpt = paths.checkpoint.clone();
    let (model, epochs, selected) = run_phase(cfg, data, init, &mut progress, &mut |m| {
        save_checkpoint(m, &ckpt)
    })?;
    let record = make_record(cfg, epochs, selected, Some(ckpt), &model, start);
    progress.line(&record)?;
    let _g = RECORDS_LOCK.lock().unwrap_or_else(|e| e.into_inner());
    append_record(out, &record)?;
    Ok((model, record))
}

fn make_record(
    cfg: &TrainConfig,
    epochs: Vec<EpochRecord>,
    selected: usize,
    checkpoint: Option<PathBuf>,
    model: &Model,
    start: Instant,
) -> RunRecord {
    RunRecord {
        digest: cfg.digest(),
        config: cfg.clone(),
        epochs,
        selected_epoch: selected,
        checkpoint,
        model_digest: model.weights_digest(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    }
}

fn records_path(out: &Path) -> PathBuf {
    out.join("runs.jsonl")
}

/// Every run record stored under `out`.
pub fn read_records(out: &Path) -> Result<Vec<RunRecord>> {
    let path = records_path(out);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

fn completed_run(out: &Path, digest: &str) -> Result<Option<RunRecord>> {
    Ok(read_records(out)?.into_iter().find(|r| r.digest == digest))
}

fn append_record(out: &Path, record: &RunRecord) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = records_path(out);
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    writeln!(f, "{}", serde_json::to_string(record)?).map_err(|e| Error::io(&path, e))
}

/// The configuration trained for one λ_K value of a sweep: λ_K = 0 is the
/// single-task baseline.
pub fn sweep_config(base: &TrainConfig, lambda_k: f64) -> TrainConfig {
    TrainConfig {
        mode: if lambda_k == 0.0 {
            TrainMode::Stl
        } else {
            TrainMode::Mtl
        },
        loss: LossWeights {
            lambda_k,
            ..base.loss
        },
        pretrain_keypoint_head: base.pretrain_keypoint_head && lambda_k != 0.0,
        ..base.clone()
    }
}

/// One run per λ_K value, all sharing the base seed and warmup. Completed
/// digests found under `out` are not retrained. Runs are spread over `jobs`
/// threads once the shared warmup exists.
pub fn sweep(
    base: &TrainConfig,
    lambdas: &[f64],
    data: &TrainingData,
    out: &Path,
    jobs: usize,
) -> Result<Vec<RunRecord>> {
    let configs: Vec<TrainConfig> = lambdas.iter().map(|&l| sweep_config(base, l)).collect();
    for c in &configs {
        c.validate()?;
    }
    if base.warmup.epochs > 0 && !warmup_path(out, base).exists() {
        initial_model(&sweep_config(base, 0.0), data, Some(out))?;
    }
    let results: Vec<std::sync::Mutex<Option<Result<RunRecord>>>> = configs
        .iter()
        .map(|_| std::sync::Mutex::new(None))
        .collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, configs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= configs.len() {
                    break;
                }
                let r = train(&configs[i], data, Some(out)).map(|(_, rec)| rec);
                *results[i].lock().expect("result slot") = Some(r);
            });
        }
    });
    results
        .into_iter()
        .map(|m| {
            m.into_inner()
                .expect("result slot")
                .expect("every run finished")
        })
        .collect()
}

/// Tracks each `(frames, gt)` sequence and returns per-sequence results.
pub fn evaluate(
    model: &Model,
    tracker: TrackerConfig,
    sequences: &[(Vec<Tensor>, Vec<BBox>)],
) -> Result<Vec<crate::tracking::SequenceResult>> {
    sequences
        .iter()
        .map(|(f, g)| track_sequence(model, tracker, f, g))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stl_requires_zero_lambda() {
        let mut cfg = TrainConfig::default();
        cfg.loss.lambda_k = 0.2;
        assert!(cfg.validate().is_err());
        cfg.mode = TrainMode::Mtl;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn sweep_configs_pick_modes_and_digests() {
        let base = TrainConfig::default();
        let a = sweep_config(&base, 0.0);
        assert_eq!(a.mode, TrainMode::Stl);
        let b = sweep_config(&base, 0.2);
        let c = sweep_config(&base, 1.0);
        assert_eq!(b.mode, TrainMode::Mtl);
        assert_ne!(b.digest(), c.digest());
        // both arms share the warmup
        assert_eq!(b.warmup_config().digest(), c.warmup_config().digest());
        assert_eq!(a.warmup_config().digest(), b.warmup_config().digest());
    }

    #[test]
    fn selection_rule() {
        let e = |i, miou: Option<f64>, k: Option<f64>| EpochRecord {
            epoch: i,
            train_loss: 0.0,
            val_loss: 0.0,
            val_miou: miou,
            val_kpt_loss: k,
        };
        let epochs = vec![
            e(1, Some(0.3), Some(0.5)),
            e(2, Some(0.6), Some(0.7)),
            e(3, Some(0.6), Some(0.2)),
        ];
        assert_eq!(
            RunRecord::recompute_selection(&epochs, TrainMode::Stl),
            Some(1)
        );
        assert_eq!(
            RunRecord::recompute_selection(&epochs, TrainMode::KptPretrain),
            Some(2)
        );
        assert_eq!(
            RunRecord::recompute_selection(&[e(1, None, None), e(2, None, None)], TrainMode::Mtl),
            Some(1)
        );
        assert_eq!(RunRecord::recompute_selection(&[], TrainMode::Mtl), None);
    }

    #[test]
    fn still_split_keeps_a_tenth() {
        assert_eq!(still_split(200), 180);
        assert_eq!(still_split(5), 4);
        assert_eq!(still_split(1), 1);
        assert_eq!(still_split(0), 0);
    }
}
