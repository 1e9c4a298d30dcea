//! Subcommands behind the `skelevision` binary.
//!
//! Everything a command produces lives under the output directory:
//!
//! ```text
//! <out>/config-<digest>.toml       resolved experiment config of each invocation
//! <out>/runs.jsonl, runs/, warmup/ training (see skelevision_core::train)
//! <out>/eval/results.json          per-model, per-sequence tracking mIoU
//! <out>/attack/records.jsonl       one record per (model, δ, sequence)
//! <out>/attack/textures/<model slug>/delta-<δ>/<sequence>.png
//! <out>/attack/results.csv|.txt    the robustness table
//! <out>/report/                    tables and SVG charts
//! ```

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use skelevision_core::attack::{
    build_overlay_spec, run_patch_attack, save_texture, PatchSpec, TextureMeta,
};
use skelevision_core::autograd::Tensor;
use skelevision_core::config::ExperimentConfig;
use skelevision_core::data::{
    load_test_sequences, read_synth_manifest, write_synth_dataset, TestSequence, TrainingData,
};
use skelevision_core::model::{digest_json, load_checkpoint, Model};
use skelevision_core::report::{iou_chart, model_label, steps_chart, ResultsTable};
use skelevision_core::tracking::track_sequence;
use skelevision_core::train::{read_records, sweep, sweep_config, train, RunRecord};
use skelevision_core::{Error, Result};

/// Settings shared by every subcommand.
#[derive(Clone, Debug)]
pub struct Context {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    pub jobs: usize,
}

impl Context {
    /// Stores the resolved configuration next to the outputs it produced.
    pub fn record_config(&self) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        let path = self
            .out
            .join(format!("config-{}.toml", &self.config.digest()[..16]));
        if !path.exists() {
            std::fs::write(&path, self.config.to_toml()).map_err(|e| Error::io(&path, e))?;
        }
        Ok(path)
    }
}

pub fn cmd_synth(ctx: &Context) -> Result<()> {
    let root = &ctx.config.data.root;
    let cfg = &ctx.config.data.synth;
    match read_synth_manifest(root)? {
        Some(existing) if &existing == cfg => {
            log::info!("synthetic dataset already present under {}", root.display());
            Ok(())
        }
        Some(_) => Err(Error::Config(format!(
            "{} holds a synthetic dataset generated with different settings",
            root.display()
        ))),
        None => {
            log::info!("writing synthetic dataset to {}", root.display());
            write_synth_dataset(cfg, root)
        }
    }
}

fn load_training_data(ctx: &Context) -> Result<TrainingData> {
    let data = TrainingData::load(&ctx.config.data.root)?;
    log::info!(
        "{} keypoint stills, {} train clips, {} val clips",
        data.stills.len(),
        data.train.len(),
        data.val.len()
    );
    Ok(data)
}

pub fn cmd_train(ctx: &Context) -> Result<RunRecord> {
    ctx.record_config()?;
    let data = load_training_data(ctx)?;
    let (_, record) = train(&ctx.config.train, &data, Some(&ctx.out))?;
    Ok(record)
}

pub fn cmd_sweep(ctx: &Context) -> Result<Vec<RunRecord>> {
    ctx.record_config()?;
    let data = load_training_data(ctx)?;
    sweep(
        &ctx.config.train,
        &ctx.config.sweep.lambdas,
        &data,
        &ctx.out,
        ctx.jobs,
    )
}

/// A trained model of the sweep with its table label.
pub struct SweepModel {
    pub label: String,
    pub lambda_k: f64,
    pub record: RunRecord,
    pub model: Model,
}

/// Loads the checkpoint of every sweep value from completed training runs.
pub fn sweep_models(ctx: &Context) -> Result<Vec<SweepModel>> {
    let records = read_records(&ctx.out)?;
    ctx.config
        .sweep
        .lambdas
        .iter()
        .map(|&lambda_k| {
            let digest = sweep_config(&ctx.config.train, lambda_k).digest();
            let missing = || {
                Error::Checkpoint(format!(
                    "no checkpoint for run {} (lambda_k = {lambda_k}); train or sweep first",
                    &digest[..16]
                ))
            };
            let record = records
                .iter()
                .find(|r| r.digest == digest)
                .ok_or_else(missing)?;
            let path = record
                .checkpoint
                .as_ref()
                .filter(|p| p.exists())
                .ok_or_else(missing)?;
            let model = load_checkpoint(path, Some(&record.config.model))?;
            Ok(SweepModel {
                label: model_label(lambda_k),
                lambda_k,
                record: record.clone(),
                model,
            })
        })
        .collect()
}

fn test_sequences(ctx: &Context) -> Result<Vec<TestSequence>> {
    let dir = ctx.config.data.root.join("test");
    let mut seqs = load_test_sequences(&dir)?;
    let wanted = &ctx.config.attack.sequences;
    if !wanted.is_empty() {
        if let Some(w) = wanted.iter().find(|w| !seqs.iter().any(|s| &s.name == *w)) {
            return Err(Error::Config(format!(
                "no test sequence named {w} under {}",
                dir.display()
            )));
        }
        seqs.retain(|s| wanted.contains(&s.name));
    }
    if seqs.is_empty() {
        return Err(Error::Data(format!(
            "no test sequences under {}",
            dir.display()
        )));
    }
    Ok(seqs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceEval {
    pub sequence: String,
    pub miou: f64,
    pub ious: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelEval {
    pub model: String,
    pub run_digest: String,
    pub sequences: Vec<SequenceEval>,
    pub mean_miou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_digest: String,
    pub tracker: skelevision_core::tracking::TrackerConfig,
    pub models: Vec<ModelEval>,
}

/// Clean-frame tracking of the test sequences with every sweep model.
pub fn cmd_eval(ctx: &Context) -> Result<EvalReport> {
    ctx.record_config()?;
    let models = sweep_models(ctx)?;
    let seqs = test_sequences(ctx)?;
    let tracker = ctx.config.eval.tracker;
    let mut out = Vec::new();
    for m in &models {
        let sequences = seqs
            .iter()
            .map(|s| {
                let r = track_sequence(&m.model, tracker, &s.frames, &s.gt)?;
                Ok(SequenceEval {
                    sequence: s.name.clone(),
                    miou: r.miou,
                    ious: r.ious,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mean_miou = sequences.iter().map(|s| s.miou).sum::<f64>() / sequences.len() as f64;
        out.push(ModelEval {
            model: m.label.clone(),
            run_digest: m.record.digest.clone(),
            sequences,
            mean_miou,
        });
    }
    let report = EvalReport {
        config_digest: ctx.config.digest(),
        tracker,
        models: out,
    };
    let dir = ctx.out.join("eval");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join("results.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report)?)
        .map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

/// Outcome of attacking one sequence with one model at one δ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    /// Digest of everything that determines the outcome.
    pub key: String,
    pub model: String,
    pub lambda_k: f64,
    pub run_digest: String,
    pub delta: f64,
    pub sequence: String,
    pub attack: skelevision_core::attack::AttackConfig,
    /// `(steps, mIoU)` for every requested step count, benign at 0.
    pub miou_at: Vec<(usize, f64)>,
    pub benign_ious: Vec<f64>,
    /// Per-frame IoU after the full ascent.
    pub adversarial_ious: Vec<f64>,
    /// Summed rollout loss before each update.
    pub loss_trace: Vec<f64>,
    pub texture: Option<PathBuf>,
    pub config_digest: String,
}

impl AttackRecord {
    pub fn miou(&self, steps: usize) -> Option<f64> {
        self.miou_at
            .iter()
            .find(|(s, _)| *s == steps)
            .map(|(_, v)| *v)
    }
}

/// File-name form of a model label: `STL` → `stl`, `MTL(0.2)` → `mtl-0.2`.
pub fn label_slug(label: &str) -> String {
    label.to_lowercase().replace('(', "-").replace(')', "")
}

fn attack_dir(out: &Path) -> PathBuf {
    out.join("attack")
}

pub fn read_attack_records(out: &Path) -> Result<Vec<AttackRecord>> {
    let path = attack_dir(out).join("records.jsonl");
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

fn append_attack_record(out: &Path, rec: &AttackRecord) -> Result<()> {
    let dir = attack_dir(out);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join("records.jsonl");
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    writeln!(f, "{}", serde_json::to_string(rec)?).map_err(|e| Error::io(&path, e))
}

fn patch_for(seq: &TestSequence) -> Result<PatchSpec> {
    match &seq.patch {
        Some(p) => Ok(p.clone()),
        None => build_overlay_spec(&seq.frames, &seq.gt),
    }
}

fn attack_one(
    ctx: &Context,
    m: &SweepModel,
    delta: f64,
    seq: &TestSequence,
    key: String,
) -> Result<AttackRecord> {
    let section = &ctx.config.attack;
    let cfg = section.attack_config(delta);
    let spec = patch_for(seq)?;
    let grid: Vec<usize> = section.steps.clone();
    let (miou_at, benign_ious, adversarial_ious, loss_trace, texture) = if section.max_steps() == 0
    {
        let frames: Vec<Tensor> = spec.composite(&seq.frames)?;
        let r = track_sequence(&m.model, cfg.tracker, &frames, &seq.gt)?;
        (vec![(0, r.miou)], r.ious.clone(), r.ious, Vec::new(), None)
    } else {
        let outcome = run_patch_attack(&m.model, &seq.frames, &seq.gt, &spec, &cfg)?;
        let miou_at = grid
            .iter()
            .map(|&s| {
                let v = if s == 0 {
                    outcome.benign_miou()
                } else {
                    outcome
                        .snapshots
                        .iter()
                        .find(|(k, _)| *k == s)
                        .map(|(_, v)| *v)
                        .expect("every positive grid step is a snapshot")
                };
                (s, v)
            })
            .collect();
        let path = attack_dir(&ctx.out)
            .join("textures")
            .join(label_slug(&m.label))
            .join(format!("delta-{delta}"))
            .join(format!("{}.png", seq.name));
        let meta = TextureMeta {
            region: spec.region,
            frame_size: spec.frame_size,
            delta,
            steps: cfg.steps,
            seed: ctx.config.train.seed,
        };
        save_texture(&path, &outcome.texture, &meta)?;
        (
            miou_at,
            outcome.benign.ious.clone(),
            outcome.adversarial.ious.clone(),
            outcome.loss_trace.clone(),
            Some(path),
        )
    };
    Ok(AttackRecord {
        key,
        model: m.label.clone(),
        lambda_k: m.lambda_k,
        run_digest: m.record.digest.clone(),
        delta,
        sequence: seq.name.clone(),
        attack: cfg,
        miou_at,
        benign_ious,
        adversarial_ious,
        loss_trace,
        texture,
        config_digest: ctx.config.digest(),
    })
}

/// Every (model, δ, sequence) cell. Cells already recorded under the same
/// key are reused. Returns the table and the records it was built from.
pub fn cmd_attack(ctx: &Context) -> Result<(ResultsTable, Vec<AttackRecord>)> {
    ctx.record_config()?;
    let models = sweep_models(ctx)?;
    let seqs = test_sequences(ctx)?;
    let section = &ctx.config.attack;
    let existing: BTreeMap<String, AttackRecord> = read_attack_records(&ctx.out)?
        .into_iter()
        .map(|r| (r.key.clone(), r))
        .collect();

    let mut cells = Vec::new();
    for (mi, m) in models.iter().enumerate() {
        for &delta in &section.deltas {
            for (si, s) in seqs.iter().enumerate() {
                let key = digest_json(&(
                    &m.record.model_digest,
                    section.attack_config(delta),
                    &section.steps,
                    &s.name,
                    digest_json(&s.gt),
                ));
                cells.push((mi, delta, si, key));
            }
        }
    }
    let results: Vec<Mutex<Option<Result<AttackRecord>>>> =
        cells.iter().map(|_| Mutex::new(None)).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let store = Mutex::new(());
    std::thread::scope(|scope| {
        for _ in 0..ctx.jobs.clamp(1, cells.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                let Some((mi, delta, si, key)) = cells.get(i) else {
                    break;
                };
                let r = match existing.get(key) {
                    Some(rec) => Ok(rec.clone()),
                    None => {
                        let (m, s) = (&models[*mi], &seqs[*si]);
                        log::info!("attack {} delta {delta} on {}", m.label, s.name);
                        attack_one(ctx, m, *delta, s, key.clone()).and_then(|rec| {
                            let _g = store.lock().unwrap_or_else(|e| e.into_inner());
                            append_attack_record(&ctx.out, &rec)?;
                            Ok(rec)
                        })
                    }
                };
                *results[i].lock().expect("result slot") = Some(r);
            });
        }
    });
    let records = results
        .into_iter()
        .map(|m| {
            m.into_inner()
                .expect("result slot")
                .expect("every cell ran")
        })
        .collect::<Result<Vec<_>>>()?;

    let table = results_table(
        &models.iter().map(|m| m.label.clone()).collect::<Vec<_>>(),
        &section.deltas,
        &section.steps,
        &records,
    )?;
    table.write(&attack_dir(&ctx.out), "results")?;
    Ok((table, records))
}

/// Cell = mean over sequences of the per-sequence mIoU at that step count.
pub fn results_table(
    models: &[String],
    deltas: &[f64],
    steps: &[usize],
    records: &[AttackRecord],
) -> Result<ResultsTable> {
    let mut grid: Vec<usize> = steps.to_vec();
    grid.sort_unstable();
    grid.dedup();
    let mut table = ResultsTable::new(models.to_vec());
    for &delta in deltas {
        for &s in &grid {
            let cells = models
                .iter()
                .map(|label| {
                    let vals: Vec<f64> = records
                        .iter()
                        .filter(|r| &r.model == label && r.delta == delta)
                        .map(|r| {
                            r.miou(s).ok_or_else(|| {
                                Error::Data(format!("record {} lacks step {s}", r.key))
                            })
                        })
                        .collect::<Result<_>>()?;
                    if vals.is_empty() {
                        return Err(Error::Data(format!(
                            "no attack records for {label} at delta {delta}"
                        )));
                    }
                    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
                })
                .collect::<Result<Vec<_>>>()?;
            table.push(delta, s, cells)?;
        }
    }
    Ok(table)
}

/// Files written by [`cmd_report`].
#[derive(Clone, Debug, Default)]
pub struct ReportFiles {
    pub tables: Vec<PathBuf>,
    pub steps_charts: Vec<PathBuf>,
    pub iou_charts: Vec<PathBuf>,
}

/// Renders the stored attack table and records; no metric is recomputed.
pub fn cmd_report(ctx: &Context) -> Result<ReportFiles> {
    let dir = attack_dir(&ctx.out);
    let csv_path = dir.join("results.csv");
    if !csv_path.exists() {
        return Err(Error::Data(format!(
            "{} has no attack results; run attack first",
            ctx.out.display()
        )));
    }
    let text = std::fs::read_to_string(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let table = ResultsTable::from_csv(&text)?;
    if table.rows.is_empty() {
        return Err(Error::Data(format!("{} is empty", csv_path.display())));
    }
    let out = ctx.out.join("report");
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    table.write(&out, "results")?;
    let mut files = ReportFiles {
        tables: vec![out.join("results.csv"), out.join("results.txt")],
        ..Default::default()
    };
    let (w, h) = (
        ctx.config.report.chart_width,
        ctx.config.report.chart_height,
    );
    for delta in table.deltas() {
        let path = out.join(format!("steps-delta-{delta}.svg"));
        std::fs::write(&path, steps_chart(&table, delta, w, h)?)
            .map_err(|e| Error::io(&path, e))?;
        files.steps_charts.push(path);
    }
    let iou_dir = out.join("iou");
    std::fs::create_dir_all(&iou_dir).map_err(|e| Error::io(&iou_dir, e))?;
    for r in read_attack_records(&ctx.out)? {
        if !table.models.contains(&r.model) || !table.deltas().contains(&r.delta) {
            continue;
        }
        let title = format!("{} / {} / delta {}", r.sequence, r.model, r.delta);
        let path = iou_dir.join(format!(
            "{}-{}-delta-{}.svg",
            r.sequence,
            label_slug(&r.model),
            r.delta
        ));
        std::fs::write(
            &path,
            iou_chart(&title, &r.benign_ious, &r.adversarial_ious, w, h),
        )
        .map_err(|e| Error::io(&path, e))?;
        files.iou_charts.push(path);
    }
    Ok(files)
}
