//! Training data: keypoint-annotated stills, frame sequences, template /
//! detection pair sampling and a synthetic sprite dataset.
//!
//! On-disk layout shared by real and synthetic data:
//!
//! ```text
//! <root>/keypoints/annotations.json     COCO person-keypoints subset
//! <root>/keypoints/images/<file_name>
//! <root>/sequences/<name>/img/00001.png training videos
//! <root>/sequences/<name>/groundtruth.txt
//! <root>/test/<name>/img/00001.png      evaluation / attack sequences
//! <root>/test/<name>/groundtruth.txt
//! <root>/test/<name>/patch/region.json  optional reserved patch region
//! <root>/test/<name>/patch/mask/00001.png
//! <root>/test/<name>/patch/init.png
//! ```

mod coco;
mod sequences;
mod synth;

use std::path::Path;

use ::image::RgbImage;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::geometry::BBox;
use crate::image::rgb8_to_tensor;
use crate::losses::Keypoint;
use crate::model::{DETECTION_SIZE, TEMPLATE_SIZE};
use crate::tracking::{crop_context, crop_window, CropRole, CropWindow};
use crate::{Error, Result};

pub use coco::{load_coco_keypoints, CocoInstances, KeypointInstance};
pub use sequences::{
    ingest_sequences, load_test_sequences, read_groundtruth, split_lengths, write_groundtruth,
    SequenceRecord, Split, TestSequence,
};
pub use synth::{
    read_synth_manifest, render_sequence, render_still, write_synth_dataset, SynthConfig,
    SynthSequence, SynthStill,
};

/// Augmentation magnitudes for the detection crop.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Maximum crop-center shift, in detection-patch pixels.
    pub shift: f64,
    /// Relative scale jitter: the window side is multiplied by `1 ± scale`.
    pub scale: f64,
    /// Relative per-channel color jitter.
    pub color: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            shift: 16.0,
            scale: 0.05,
            color: 0.05,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            shift: 0.0,
            scale: 0.0,
            color: 0.0,
        }
    }
}

/// One template / detection training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub template: Tensor,
    /// Target box in template-patch coordinates.
    pub template_box: BBox,
    /// Keypoints in template-patch coordinates, when annotated.
    pub keypoints: Option<Vec<Keypoint>>,
    pub detection: Tensor,
    /// Target box in detection-patch coordinates.
    pub detection_box: BBox,
}

impl TrainSample {
    pub fn validate(&self) -> Result<()> {
        let s = TEMPLATE_SIZE;
        if self.template.shape() != [3, s, s] {
            return Err(Error::Shape(format!(
                "template patch {:?}",
                self.template.shape()
            )));
        }
        if self.detection.shape() != [3, DETECTION_SIZE, DETECTION_SIZE] {
            return Err(Error::Shape(format!(
                "detection patch {:?}",
                self.detection.shape()
            )));
        }
        for b in [&self.template_box, &self.detection_box] {
            if ![b.cx, b.cy, b.w, b.h].iter().all(|v| v.is_finite()) || b.w <= 0.0 || b.h <= 0.0 {
                return Err(Error::Data(format!("invalid sample box {b:?}")));
            }
        }
        if let Some(kps) = &self.keypoints {
            let inside =
                |k: &Keypoint| (0.0..s as f64).contains(&k.x) && (0.0..s as f64).contains(&k.y);
            if kps.iter().any(|k| k.visible && !inside(k)) {
                return Err(Error::Data(
                    "visible keypoint outside the template patch".into(),
                ));
            }
        }
        Ok(())
    }
}

fn jitter(rng: &mut impl Rng, magnitude: f64) -> f64 {
    magnitude * (2.0 * rng.gen::<f64>() - 1.0)
}

/// Maps frame keypoints into a crop; keypoints landing outside become
/// invisible.
pub fn keypoints_to_patch(kps: &[Keypoint], window: &CropWindow) -> Vec<Keypoint> {
    let s = window.out_size as f64;
    kps.iter()
        .map(|k| {
            let (x, y) = window.frame_to_patch(k.x, k.y);
            let inside = (0.0..s).contains(&x) && (0.0..s).contains(&y);
            Keypoint {
                x,
                y,
                visible: k.visible && inside,
            }
        })
        .collect()
}

/// Builds a training pair: the template crop comes from the unmodified
/// template frame, the detection crop from a shifted, rescaled and
/// color-jittered view of the detection frame.
pub fn make_sample(
    frame_z: &Tensor,
    box_z: &BBox,
    keypoints: Option<&[Keypoint]>,
    frame_x: &Tensor,
    box_x: &BBox,
    aug: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<TrainSample> {
    let (template, zwin) = crop_context(frame_z, box_z, CropRole::Template)?;
    let base = CropWindow::around(box_x, CropRole::Detection);
    let (dx, dy) = (jitter(rng, aug.shift), jitter(rng, aug.shift));
    let scale = 1.0 + jitter(rng, aug.scale);
    let per_px = 1.0 / base.scale();
    let window = CropWindow {
        cx: base.cx + dx * per_px,
        cy: base.cy + dy * per_px,
        side: base.side * scale,
        out_size: DETECTION_SIZE,
    };
    let mut detection = crop_window(frame_x, &window)?;
    let gains = [0; 3].map(|_| 1.0 + jitter(rng, aug.color));
    let plane = DETECTION_SIZE * DETECTION_SIZE;
    for (i, v) in detection.data_mut().iter_mut().enumerate() {
        *v = (*v * gains[i / plane]).clamp(0.0, 1.0);
    }
    let sample = TrainSample {
        template,
        template_box: zwin.box_to_patch(box_z),
        keypoints: keypoints.map(|k| keypoints_to_patch(k, &zwin)),
        detection,
        detection_box: window.box_to_patch(box_x),
    };
    sample.validate()?;
    Ok(sample)
}

/// Mixing of still-image and video pairs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairingConfig {
    /// Largest template-to-detection frame distance in a video pair.
    pub max_gap: usize,
    /// Probability that a drawn sample is a keypoint still.
    pub still_fraction: f64,
}

impl Default for PairingConfig {
    fn default() -> Self {
        Self {
            max_gap: 30,
            still_fraction: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleSource {
    Still(usize),
    Video {
        clip: usize,
        template: usize,
        detection: usize,
    },
}

#[derive(Clone, Debug)]
pub struct Still {
    pub image: RgbImage,
    pub bbox: BBox,
    pub keypoints: Vec<Keypoint>,
}

#[derive(Clone, Debug)]
pub struct Clip {
    pub name: String,
    pub frames: Vec<RgbImage>,
    pub gt: Vec<BBox>,
}

impl Clip {
    pub fn tensors(&self) -> Vec<Tensor> {
        self.frames.iter().map(rgb8_to_tensor).collect()
    }
}

/// Training material held in memory as 8-bit frames.
#[derive(Clone, Debug, Default)]
pub struct TrainingData {
    pub stills: Vec<Still>,
    pub train: Vec<Clip>,
    pub val: Vec<Clip>,
}

impl TrainingData {
    /// Loads `<root>/keypoints` (if present) and `<root>/sequences`.
    pub fn load(root: &Path) -> Result<Self> {
        let mut data = TrainingData::default();
        let kp_dir = root.join("keypoints");
        if kp_dir.join("annotations.json").exists() {
            let coco =
                load_coco_keypoints(&kp_dir.join("annotations.json"), &kp_dir.join("images"))?;
            if coco.missing_images > 0 {
                log::warn!(
                    "{} keypoint instances skipped: image missing",
                    coco.missing_images
                );
            }
            let mut cache: std::collections::BTreeMap<std::path::PathBuf, RgbImage> =
                Default::default();
            for inst in coco.instances {
                if !cache.contains_key(&inst.image) {
                    cache.insert(inst.image.clone(), crate::image::load_rgb8(&inst.image)?);
                }
                data.stills.push(Still {
                    image: cache[&inst.image].clone(),
                    bbox: inst.bbox,
                    keypoints: inst.keypoints,
                });
            }
        }
        let seq_dir = root.join("sequences");
        if seq_dir.exists() {
            for rec in ingest_sequences(&seq_dir)? {
                let frames = rec
                    .frames
                    .iter()
                    .map(|p| crate::image::load_rgb8(p))
                    .collect::<Result<Vec<_>>>()?;
                let clip = Clip {
                    name: rec.name.clone(),
                    frames,
                    gt: rec.gt.clone(),
                };
                match rec.split {
                    Split::Train => data.train.push(clip),
                    Split::Val => data.val.push(clip),
                    Split::Test => {}
                }
            }
        }
        if data.stills.is_empty() && data.train.is_empty() {
            return Err(Error::Data(format!(
                "no training data under {}",
                root.display()
            )));
        }
        Ok(data)
    }

    /// Draws `n` sample sources. Stills are chosen with probability
    /// `still_fraction` when both kinds exist.
    pub fn plan_epoch(
        &self,
        n: usize,
        pairing: &PairingConfig,
        rng: &mut impl Rng,
    ) -> Vec<SampleSource> {
        let clips: Vec<usize> = (0..self.train.len())
            .filter(|&i| !self.train[i].frames.is_empty())
            .collect();
        (0..n)
            .map(|_| {
                let use_still = match (self.stills.is_empty(), clips.is_empty()) {
                    (true, _) => false,
                    (false, true) => true,
                    (false, false) => rng.gen::<f64>() < pairing.still_fraction,
                };
                if use_still {
                    SampleSource::Still(rng.gen_range(0..self.stills.len()))
                } else {
                    let clip = *clips.choose(rng).expect("clips available");
                    let len = self.train[clip].frames.len();
                    let template = rng.gen_range(0..len);
                    let lo = template.saturating_sub(pairing.max_gap);
                    let hi = (template + pairing.max_gap).min(len - 1);
                    SampleSource::Video {
                        clip,
                        template,
                        detection: rng.gen_range(lo..=hi),
                    }
                }
            })
            .collect()
    }

    pub fn sample(
        &self,
        source: SampleSource,
        aug: &AugmentConfig,
        rng: &mut impl Rng,
    ) -> Result<TrainSample> {
        match source {
            SampleSource::Still(i) => {
                let s = self
                    .stills
                    .get(i)
                    .ok_or_else(|| Error::Data(format!("no still {i}")))?;
                let frame = rgb8_to_tensor(&s.image);
                make_sample(
                    &frame,
                    &s.bbox,
                    Some(&s.keypoints),
                    &frame,
                    &s.bbox,
                    aug,
                    rng,
                )
            }
            SampleSource::Video {
                clip,
                template,
                detection,
            } => {
                let c = self
                    .train
                    .get(clip)
                    .ok_or_else(|| Error::Data(format!("no clip {clip}")))?;
                let (fz, fx) = (
                    rgb8_to_tensor(&c.frames[template]),
                    rgb8_to_tensor(&c.frames[detection]),
                );
                make_sample(&fz, &c.gt[template], None, &fx, &c.gt[detection], aug, rng)
            }
        }
    }
}
