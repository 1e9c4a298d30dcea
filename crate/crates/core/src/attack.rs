//! Static background patch attack: compositing under occlusion masks,
//! gradient ascent on the tracking loss, and the overlay scenario.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{CustomOp, Graph, Tensor, Var};
use crate::geometry::BBox;
use crate::image::{load, save_png16};
use crate::model::Model;
use crate::tracking::{
    differentiable_rollout, track_sequence, RolloutMode, SequenceResult, TrackerConfig,
};
use crate::{Error, Result};

/// Levels of the texture grid. Textures are kept on this grid so 16-bit PNG
/// export is lossless.
pub const TEXTURE_LEVELS: f64 = 65535.0;

/// Pixel-aligned rectangle `[x, x + width) × [y, y + height)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Region {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.y..self.y + self.height).contains(&row)
            && (self.x..self.x + self.width).contains(&col)
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }

    pub fn as_bbox(&self) -> Result<BBox> {
        BBox::from_corners(
            self.x as f64,
            self.y as f64,
            (self.x + self.width) as f64,
            (self.y + self.height) as f64,
        )
    }
}

/// A static patch: its region, per-frame visibility and texture.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSpec {
    pub region: Region,
    /// `(height, width)` of the frames.
    pub frame_size: (usize, usize),
    /// Row-major `H × W` visibility per frame.
    pub masks: Vec<Vec<bool>>,
    pub first_frame_clean: bool,
    /// `[3, region.height, region.width]` in `[0, 1]`.
    pub texture: Tensor,
}

impl PatchSpec {
    pub fn new(
        region: Region,
        frame_size: (usize, usize),
        masks: Vec<Vec<bool>>,
        first_frame_clean: bool,
        texture: Tensor,
    ) -> Result<Self> {
        let spec = Self {
            region,
            frame_size,
            masks,
            first_frame_clean,
            texture,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.frame_size;
        let r = &self.region;
        if r.width == 0 || r.height == 0 || r.x + r.width > w || r.y + r.height > h {
            return Err(Error::Shape(format!(
                "patch region {r:?} does not fit a {w}x{h} frame"
            )));
        }
        if self.texture.shape() != [3, r.height, r.width] {
            return Err(Error::Shape(format!(
                "texture {:?} does not match region {}x{}",
                self.texture.shape(),
                r.width,
                r.height
            )));
        }
        if self.texture.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data("texture values must lie in [0, 1]".into()));
        }
        for (t, m) in self.masks.iter().enumerate() {
            if m.len() != h * w {
                return Err(Error::Shape(format!(
                    "mask {} has {} entries, expected {}",
                    t + 1,
                    m.len(),
                    h * w
                )));
            }
            if m.iter()
                .enumerate()
                .any(|(i, &v)| v && !r.contains(i / w, i % w))
            {
                return Err(Error::Data(format!(
                    "mask {} is visible outside the region",
                    t + 1
                )));
            }
        }
        if self.first_frame_clean && self.masks.first().is_some_and(|m| m.iter().any(|&v| v)) {
            return Err(Error::Data("first frame must be clean".into()));
        }
        Ok(())
    }

    /// Checks that `frames` can be composited with this spec.
    pub fn check(&self, frames: &[Tensor]) -> Result<()> {
        if frames.len() > self.masks.len() {
            return Err(Error::Shape(format!(
                "{} frames but only {} masks",
                frames.len(),
                self.masks.len()
            )));
        }
        let (h, w) = self.frame_size;
        for (t, f) in frames.iter().enumerate() {
            if f.shape() != [3, h, w] {
                return Err(Error::Shape(format!(
                    "frame {} is {:?}, expected [3, {h}, {w}]",
                    t + 1,
                    f.shape()
                )));
            }
        }
        Ok(())
    }

    /// Number of visible patch pixels in frame `t` (0-based).
    pub fn visible(&self, t: usize) -> usize {
        self.masks[t].iter().filter(|&&v| v).count()
    }

    /// Frame `t` with `texture` pasted where the mask is set.
    pub fn composite_frame(&self, frame: &Tensor, t: usize, texture: &Tensor) -> Result<Tensor> {
        let (h, w) = self.frame_size;
        if frame.shape() != [3, h, w] || texture.shape() != self.texture.shape() {
            return Err(Error::Shape(format!(
                "composite of frame {:?} with texture {:?}",
                frame.shape(),
                texture.shape()
            )));
        }
        let mask = self
            .masks
            .get(t)
            .ok_or_else(|| Error::Shape(format!("no mask for frame {}", t + 1)))?;
        let mut out = frame.clone();
        let r = &self.region;
        for c in 0..3 {
            for i in 0..r.height {
                for j in 0..r.width {
                    let (y, x) = (r.y + i, r.x + j);
                    if mask[y * w + x] {
                        out.data_mut()[(c * h + y) * w + x] =
                            texture.data()[(c * r.height + i) * r.width + j];
                    }
                }
            }
        }
        Ok(out)
    }

    /// Composites every frame with the spec's own texture.
    pub fn composite(&self, frames: &[Tensor]) -> Result<Vec<Tensor>> {
        self.check(frames)?;
        frames
            .iter()
            .enumerate()
            .map(|(t, f)| self.composite_frame(f, t, &self.texture))
            .collect()
    }
}

struct CompositeOp {
    base: Tensor,
    mask: Vec<bool>,
    region: Region,
}

impl CustomOp for CompositeOp {
    fn name(&self) -> &'static str {
        "composite"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> crate::autograd::Result<Tensor> {
        let (_, h, w) = self.base.dims3()?;
        let r = &self.region;
        let tex = inputs[0].data();
        let mut out = self.base.clone();
        for c in 0..3 {
            for i in 0..r.height {
                for j in 0..r.width {
                    let (y, x) = (r.y + i, r.x + j);
                    if self.mask[y * w + x] {
                        out.data_mut()[(c * h + y) * w + x] = tex[(c * r.height + i) * r.width + j];
                    }
                }
            }
        }
        Ok(out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> crate::autograd::Result<Vec<Option<Tensor>>> {
        let (_, h, w) = self.base.dims3()?;
        let r = &self.region;
        let mut d = Tensor::zeros(inputs[0].shape());
        for c in 0..3 {
            for i in 0..r.height {
                for j in 0..r.width {
                    let (y, x) = (r.y + i, r.x + j);
                    if self.mask[y * w + x] {
                        d.data_mut()[(c * r.height + i) * r.width + j] =
                            grad.data()[(c * h + y) * w + x];
                    }
                }
            }
        }
        Ok(vec![Some(d)])
    }
}

/// Differentiable composite of frame `t` with the texture variable.
pub fn composite_var(
    g: &mut Graph,
    frame: &Tensor,
    spec: &PatchSpec,
    t: usize,
    texture: Var,
) -> Result<Var> {
    if g.value(texture).shape() != spec.texture.shape() {
        return Err(Error::Shape(format!(
            "texture variable {:?} does not match spec {:?}",
            g.value(texture).shape(),
            spec.texture.shape()
        )));
    }
    let (h, w) = spec.frame_size;
    if frame.shape() != [3, h, w] {
        return Err(Error::Shape(format!(
            "frame {:?} does not match spec",
            frame.shape()
        )));
    }
    let mask = spec
        .masks
        .get(t)
        .ok_or_else(|| Error::Shape(format!("no mask for frame {}", t + 1)))?;
    let op = CompositeOp {
        base: frame.clone(),
        mask: mask.clone(),
        region: spec.region,
    };
    Ok(g.custom(&[texture], Box::new(op))?)
}

/// L1 distance between the corner coordinates of two boxes.
pub fn adv_task_loss(pred: &BBox, gt: &BBox) -> f64 {
    pred.corners()
        .iter()
        .zip(gt.corners())
        .map(|(a, b)| (a - b).abs())
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub delta: f64,
    pub steps: usize,
    pub attacked_frames: usize,
    pub rollout: RolloutMode,
    pub tracker: TrackerConfig,
    /// Steps after which the adversarial mIoU is also recorded.
    pub snapshot_steps: Vec<usize>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            delta: 0.1,
            steps: 50,
            attacked_frames: 100,
            rollout: RolloutMode::Detached,
            tracker: TrackerConfig::attack(),
            snapshot_steps: Vec::new(),
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::Config(format!(
                "attack delta must be ≥ 0, got {}",
                self.delta
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("attack needs at least one step".into()));
        }
        if self.attacked_frames < 2 {
            return Err(Error::Config(
                "attack needs at least two attacked frames".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackOutcome {
    pub texture: Tensor,
    /// Tracking with the initial texture.
    pub benign: SequenceResult,
    /// Tracking with the final texture.
    pub adversarial: SequenceResult,
    /// Summed rollout loss before each update.
    pub loss_trace: Vec<f64>,
    /// `(step, adversarial mIoU)` at each requested snapshot.
    pub snapshots: Vec<(usize, f64)>,
}

impl AttackOutcome {
    pub fn benign_miou(&self) -> f64 {
        self.benign.miou
    }

    pub fn adversarial_miou(&self) -> f64 {
        self.adversarial.miou
    }
}

fn on_grid(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * TEXTURE_LEVELS).round() / TEXTURE_LEVELS
}

/// Gradient ascent on the summed tracking loss over the first
/// `attacked_frames` frames. Each step adds `delta · g / frames` to the
/// texture and clips to `[0, 1]`. mIoU is measured on the whole composited
/// sequence.
pub fn run_patch_attack(
    model: &Model,
    frames: &[Tensor],
    gt: &[BBox],
    spec: &PatchSpec,
    cfg: &AttackConfig,
) -> Result<AttackOutcome> {
    cfg.validate()?;
    spec.validate()?;
    spec.check(frames)?;
    let n = cfg.attacked_frames.min(frames.len());
    let (att_frames, att_gt) = (&frames[..n], &gt[..n.min(gt.len())]);
    if (0..n).all(|t| spec.visible(t) == 0) {
        return Err(Error::Data(
            "patch is never visible in the attacked frames".into(),
        ));
    }
    let evaluate = |texture: &Tensor| -> Result<SequenceResult> {
        let mut s = spec.clone();
        s.texture = texture.clone();
        track_sequence(model, cfg.tracker, &s.composite(frames)?, gt)
    };

    let mut texture = spec.texture.map(on_grid);
    let benign = evaluate(&texture)?;
    let mut loss_trace = Vec::with_capacity(cfg.steps);
    let mut snapshots = Vec::new();
    let attacked = (n - 1) as f64;
    for step in 1..=cfg.steps {
        let r = differentiable_rollout(
            model,
            cfg.tracker,
            att_frames,
            att_gt,
            spec,
            &texture,
            cfg.rollout,
        )?;
        if !r.texture_grad.all_finite() {
            return Err(Error::Numerical(format!(
                "non-finite gradient at attack step {step}"
            )));
        }
        loss_trace.push(r.loss);
        log::debug!("attack step {step}: loss {:.4}", r.loss);
        let scale = cfg.delta / attacked;
        for (t, g) in texture.data_mut().iter_mut().zip(r.texture_grad.data()) {
            *t = on_grid(*t + scale * g);
        }
        if cfg.snapshot_steps.contains(&step) {
            snapshots.push((step, evaluate(&texture)?.miou));
        }
    }
    let adversarial = evaluate(&texture)?;
    Ok(AttackOutcome {
        texture,
        benign,
        adversarial,
        loss_trace,
        snapshots,
    })
}

/// The overlay rectangle of an `h × w` frame, inset by 10% per edge, and the
/// pixels whose centers fall inside it.
pub fn overlay_region(h: usize, w: usize) -> Result<(BBox, Region)> {
    if h < 50 || w < 50 {
        return Err(Error::Data(format!(
            "frame {w}x{h} is too small for an overlay patch"
        )));
    }
    let (wf, hf) = (w as f64, h as f64);
    let outline = BBox::from_corners(0.1 * wf, 0.1 * hf, 0.9 * wf, 0.9 * hf)?;
    // pixel i is inside when lo < i + 0.5 < hi
    let span = |lo: f64, hi: f64| {
        let first = (lo - 0.5).floor() as usize + 1;
        let last = (hi - 0.5).ceil() as usize;
        (first, last - first)
    };
    let [x1, y1, x2, y2] = outline.corners();
    let (x, width) = span(x1, x2);
    let (y, height) = span(y1, y2);
    Ok((
        outline,
        Region {
            x,
            y,
            width,
            height,
        },
    ))
}

/// Overlay scenario: the region is the frame inset by 10% per edge, hidden
/// wherever the ground truth expanded by 25 px covers it, and absent from
/// frame 1. The initial texture copies frame 1's region.
pub fn build_overlay_spec(frames: &[Tensor], gt: &[BBox]) -> Result<PatchSpec> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Data("no frames".into()))?;
    if frames.len() != gt.len() {
        return Err(Error::Shape(format!(
            "{} frames but {} boxes",
            frames.len(),
            gt.len()
        )));
    }
    let (_, h, w) = first.dims3()?;
    let (_, region) = overlay_region(h, w)?;
    let masks = gt
        .iter()
        .enumerate()
        .map(|(t, b)| {
            let [x1, y1, x2, y2] = b.corners();
            let (x1, y1, x2, y2) = (x1 - 25.0, y1 - 25.0, x2 + 25.0, y2 + 25.0);
            (0..h * w)
                .map(|i| {
                    let (y, x) = (i / w, i % w);
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let covered = px > x1 && px < x2 && py > y1 && py < y2;
                    t > 0 && region.contains(y, x) && !covered
                })
                .collect()
        })
        .collect();
    let texture = Tensor::from_fn(&[3, region.height, region.width], |i| {
        let (c, rest) = (i / region.area(), i % region.area());
        let (y, x) = (
            region.y + rest / region.width,
            region.x + rest % region.width,
        );
        on_grid(first.at3(c, y, x))
    });
    PatchSpec::new(region, (h, w), masks, true, texture)
}

/// Sidecar record written next to an exported texture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextureMeta {
    pub region: Region,
    pub frame_size: (usize, usize),
    pub delta: f64,
    pub steps: usize,
    pub seed: u64,
}

fn sidecar_path(png: &Path) -> std::path::PathBuf {
    png.with_extension("json")
}

/// Writes the texture as a 16-bit PNG plus a JSON sidecar.
pub fn save_texture(path: &Path, texture: &Tensor, meta: &TextureMeta) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save_png16(path, texture)?;
    let side = sidecar_path(path);
    let text = serde_json::to_string_pretty(meta)?;
    std::fs::write(&side, text).map_err(|e| Error::io(&side, e))
}

pub fn load_texture(path: &Path) -> Result<(Tensor, TextureMeta)> {
    let texture = load(path)?;
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: TextureMeta = serde_json::from_str(&text)?;
    if texture.shape() != [3, meta.region.height, meta.region.width] {
        return Err(Error::Shape(format!(
            "texture {:?} disagrees with its sidecar region {:?}",
            texture.shape(),
            meta.region
        )));
    }
    Ok((texture, meta))
}
