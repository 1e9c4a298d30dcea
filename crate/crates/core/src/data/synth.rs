//! Synthetic stick-figure sequences and keypoint stills, written in the same
//! layout as real data.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::coco::{CocoAnnotation, CocoFile, CocoImage};
use super::sequences::write_groundtruth;
use crate::attack::{PatchSpec, Region, TEXTURE_LEVELS};
use crate::autograd::Tensor;
use crate::geometry::BBox;
use crate::image::{quantize, save_mask, save_png8};
use crate::losses::Keypoint;
use crate::model::NUM_KEYPOINTS;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    /// Square frame side in pixels.
    pub frame_size: usize,
    pub train_sequences: usize,
    pub frames_per_sequence: usize,
    pub test_sequences: usize,
    pub test_frames: usize,
    pub stills: usize,
    /// Side of the reserved patch region.
    pub patch_side: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            frame_size: 160,
            train_sequences: 8,
            frames_per_sequence: 90,
            test_sequences: 5,
            test_frames: 20,
            stills: 200,
            patch_side: 64,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_size < 64 {
            return Err(Error::Config(format!(
                "synthetic frames must be ≥ 64 px, got {}",
                self.frame_size
            )));
        }
        if self.patch_side == 0 || self.patch_side > self.frame_size {
            return Err(Error::Config(format!(
                "patch side {} does not fit",
                self.patch_side
            )));
        }
        if self.frames_per_sequence < 2 || self.test_frames < 2 {
            return Err(Error::Config("sequences need at least two frames".into()));
        }
        Ok(())
    }
}

// random streams, one per generated item
const STREAM_TRAIN: u64 = 1 << 32;
const STREAM_TEST: u64 = 2 << 32;
const STREAM_STILL: u64 = 3 << 32;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Smooth textured background: a few random plane waves plus fine noise.
fn background(rng: &mut impl Rng, size: usize) -> Tensor {
    let base: [f64; 3] = [0; 3].map(|_| rng.gen_range(0.25..0.55));
    let waves: Vec<(f64, f64, f64, f64, usize)> = (0..6)
        .map(|_| {
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let freq = rng.gen_range(0.04..0.25);
            (
                freq * angle.cos(),
                freq * angle.sin(),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.03..0.1),
                rng.gen_range(0..3),
            )
        })
        .collect();
    let plane = size * size;
    let noise: Vec<f64> = (0..3 * plane).map(|_| rng.gen_range(-0.03..0.03)).collect();
    let t = Tensor::from_fn(&[3, size, size], |i| {
        let (c, p) = (i / plane, i % plane);
        let (y, x) = ((p / size) as f64, (p % size) as f64);
        let mut v = base[c] + noise[i];
        for &(fx, fy, phase, amp, ch) in &waves {
            let a = if ch == c { amp } else { amp * 0.4 };
            v += a * (fx * x + fy * y + phase).sin();
        }
        v
    });
    quantize(&t, 255.0)
}

/// Joint layout of the figure. Eyes and ears are not drawn and stay
/// unlabeled.
#[derive(Clone, Copy, Debug)]
struct Pose {
    /// Hip center.
    x: f64,
    y: f64,
    height: f64,
    phase: f64,
}

const NOSE: usize = 0;
const UNUSED: [usize; 4] = [1, 2, 3, 4];
const BONES: [(usize, usize); 10] = [
    (5, 6),
    (5, 7),
    (7, 9),
    (6, 8),
    (8, 10),
    (11, 12),
    (11, 13),
    (13, 15),
    (12, 14),
    (14, 16),
];

impl Pose {
    fn joints(&self) -> [(f64, f64); NUM_KEYPOINTS] {
        let h = self.height;
        let swing = 0.5 * self.phase.sin();
        let limb = |from: (f64, f64), angle: f64, len: f64| {
            (from.0 + len * angle.sin(), from.1 + len * angle.cos())
        };
        let neck = (self.x, self.y - 0.42 * h);
        let nose = (self.x, neck.1 - 0.16 * h);
        let ls = (self.x - 0.13 * h, neck.1 + 0.02 * h);
        let rs = (self.x + 0.13 * h, neck.1 + 0.02 * h);
        let le = limb(ls, -0.25 + swing, 0.2 * h);
        let re = limb(rs, 0.25 - swing, 0.2 * h);
        let lw = limb(le, -0.1 + 1.3 * swing, 0.18 * h);
        let rw = limb(re, 0.1 - 1.3 * swing, 0.18 * h);
        let lh = (self.x - 0.08 * h, self.y);
        let rh = (self.x + 0.08 * h, self.y);
        let lk = limb(lh, -swing, 0.24 * h);
        let rk = limb(rh, swing, 0.24 * h);
        let la = limb(lk, -0.6 * swing - 0.1, 0.24 * h);
        let ra = limb(rk, 0.6 * swing + 0.1, 0.24 * h);
        let mut j = [(0.0, 0.0); NUM_KEYPOINTS];
        j[NOSE] = nose;
        for (k, p) in [ls, rs, le, re, lw, rw, lh, rh, lk, rk, la, ra]
            .into_iter()
            .enumerate()
        {
            j[5 + k] = p;
        }
        j
    }

    /// Segments drawn as thick strokes: the bones plus neck and spine.
    fn segments(&self) -> Vec<((f64, f64), (f64, f64))> {
        let j = self.joints();
        let mid = |a: (f64, f64), b: (f64, f64)| ((a.0 + b.0) / 2.0, (a.1 + b.1) / 2.0);
        let (shoulders, hips) = (mid(j[5], j[6]), mid(j[11], j[12]));
        let mut out: Vec<_> = BONES.iter().map(|&(a, b)| (j[a], j[b])).collect();
        out.push((shoulders, hips));
        out.push((j[NOSE], shoulders));
        out
    }

    /// Row-major coverage of the figure on a `size × size` frame; pixel
    /// centers are tested against the strokes and the head disc.
    fn mask(&self, size: usize) -> Vec<bool> {
        let j = self.joints();
        let segs = self.segments();
        let half = 0.045 * self.height;
        let head_r = 0.1 * self.height;
        let mut m = vec![false; size * size];
        for (i, cell) in m.iter_mut().enumerate() {
            let (px, py) = ((i % size) as f64 + 0.5, (i / size) as f64 + 0.5);
            let head = (px - j[NOSE].0).hypot(py - j[NOSE].1) <= head_r;
            *cell = head
                || segs
                    .iter()
                    .any(|&(a, b)| segment_distance((px, py), a, b) <= half);
        }
        m
    }

    fn keypoints(&self, size: usize) -> Vec<Keypoint> {
        let s = size as f64;
        self.joints()
            .iter()
            .enumerate()
            .map(|(k, &(x, y))| {
                let used = !UNUSED.contains(&k);
                let inside = (0.0..s).contains(&x) && (0.0..s).contains(&y);
                if used && inside {
                    Keypoint {
                        x,
                        y,
                        visible: true,
                    }
                } else {
                    Keypoint {
                        x: 0.0,
                        y: 0.0,
                        visible: false,
                    }
                }
            })
            .collect()
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p.0 - a.0 - t * dx).hypot(p.1 - a.1 - t * dy)
}

/// Tight box around the set pixels of a mask.
fn mask_box(mask: &[bool], size: usize) -> Option<BBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for (i, _) in mask.iter().enumerate().filter(|(_, &v)| v) {
        let (y, x) = (i / size, i % size);
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x + 1);
        y1 = y1.max(y + 1);
    }
    (x0 != usize::MAX)
        .then(|| BBox::from_corners(x0 as f64, y0 as f64, x1 as f64, y1 as f64).expect("non-empty"))
}

fn paint(frame: &mut Tensor, mask: &[bool], color: [f64; 3]) {
    let plane = mask.len();
    for (i, _) in mask.iter().enumerate().filter(|(_, &v)| v) {
        for (c, v) in color.iter().enumerate() {
            frame.data_mut()[c * plane + i] = *v;
        }
    }
}

fn sprite_color(rng: &mut impl Rng) -> [f64; 3] {
    // saturated colors, far from the mid-gray backgrounds
    let mut c = [0; 3].map(|_| rng.gen_range(0.0..0.2));
    let hi = rng.gen_range(0..3);
    c[hi] = rng.gen_range(0.85..1.0);
    c[(hi + 1) % 3] = rng.gen_range(0.5..1.0);
    c.map(|v: f64| (v * 255.0).round() / 255.0)
}

#[derive(Clone, Debug)]
pub struct SynthSequence {
    pub name: String,
    pub frames: Vec<Tensor>,
    pub gt: Vec<BBox>,
    pub keypoints: Vec<Vec<Keypoint>>,
    /// Figure coverage per frame.
    pub sprite_masks: Vec<Vec<bool>>,
    /// The clean background, for reference.
    pub background: Tensor,
    pub patch: PatchSpec,
}

#[derive(Clone, Debug)]
pub struct SynthStill {
    pub image: Tensor,
    pub bbox: BBox,
    pub keypoints: Vec<Keypoint>,
}

/// Renders one sequence: a walking figure following a smooth random walk
/// over a static background, with a reserved patch region near its start.
pub fn render_sequence(
    seed: u64,
    index: usize,
    test: bool,
    cfg: &SynthConfig,
) -> Result<SynthSequence> {
    cfg.validate()?;
    let stream = if test { STREAM_TEST } else { STREAM_TRAIN } + index as u64;
    let mut rng = rng_for(seed, stream);
    let size = cfg.frame_size;
    let n = if test {
        cfg.test_frames
    } else {
        cfg.frames_per_sequence
    };
    let bg = background(&mut rng, size);
    let color = sprite_color(&mut rng);
    let height = rng.gen_range(0.24..0.32) * size as f64;
    // the hip center stays far enough from the border to keep the figure inside
    let (top, bottom, side) = (
        0.72 * height + 2.0,
        0.52 * height + 2.0,
        0.45 * height + 2.0,
    );
    let (xmin, xmax, ymin, ymax) = (side, size as f64 - side, top, size as f64 - bottom);
    let mut pos = (rng.gen_range(xmin..xmax), rng.gen_range(ymin..ymax));
    let mut vel: (f64, f64) = (rng.gen_range(-1.5..1.5), rng.gen_range(-1.0..1.0));
    let mut phase = rng.gen_range(0.0..std::f64::consts::TAU);

    let ps = cfg.patch_side;
    let max_xy = size - ps;
    let place =
        |c: f64, off: f64| ((c + off - ps as f64 / 2.0).round().max(0.0) as usize).min(max_xy);
    let region = Region {
        x: place(pos.0, rng.gen_range(-16.0..16.0)),
        y: place(pos.1 - 0.1 * height, rng.gen_range(-16.0..16.0)),
        width: ps,
        height: ps,
    };

    let (mut frames, mut gt, mut kps, mut sprite_masks, mut masks) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for t in 0..n {
        let pose = Pose {
            x: pos.0,
            y: pos.1,
            height,
            phase,
        };
        let m = pose.mask(size);
        let mut f = bg.clone();
        paint(&mut f, &m, color);
        gt.push(mask_box(&m, size).ok_or_else(|| Error::Data("figure left the frame".into()))?);
        kps.push(pose.keypoints(size));
        masks.push(
            (0..size * size)
                .map(|i| t > 0 && region.contains(i / size, i % size) && !m[i])
                .collect(),
        );
        sprite_masks.push(m);
        frames.push(f);

        vel.0 = (0.85 * vel.0 + rng.gen_range(-0.6..0.6)).clamp(-3.0, 3.0);
        vel.1 = (0.85 * vel.1 + rng.gen_range(-0.4..0.4)).clamp(-2.0, 2.0);
        pos = (pos.0 + vel.0, pos.1 + vel.1);
        if pos.0 < xmin || pos.0 > xmax {
            vel.0 = -vel.0;
            pos.0 = pos.0.clamp(xmin, xmax);
        }
        if pos.1 < ymin || pos.1 > ymax {
            vel.1 = -vel.1;
            pos.1 = pos.1.clamp(ymin, ymax);
        }
        phase += 0.35 + 0.08 * vel.0.abs();
    }
    let texture = Tensor::from_fn(&[3, ps, ps], |i| {
        let (c, rest) = (i / (ps * ps), i % (ps * ps));
        let v = bg.at3(c, region.y + rest / ps, region.x + rest % ps);
        (v * TEXTURE_LEVELS).round() / TEXTURE_LEVELS
    });
    let patch = PatchSpec::new(region, (size, size), masks, true, texture)?;
    Ok(SynthSequence {
        name: format!("{}{:03}", if test { "test" } else { "walk" }, index),
        frames,
        gt,
        keypoints: kps,
        sprite_masks,
        background: bg,
        patch,
    })
}

/// Renders one keypoint still with a figure in a random pose.
pub fn render_still(seed: u64, index: usize, cfg: &SynthConfig) -> Result<SynthStill> {
    cfg.validate()?;
    let mut rng = rng_for(seed, STREAM_STILL + index as u64);
    let size = cfg.frame_size;
    let mut image = background(&mut rng, size);
    let height = rng.gen_range(0.22..0.36) * size as f64;
    let (top, bottom, side) = (
        0.72 * height + 2.0,
        0.52 * height + 2.0,
        0.45 * height + 2.0,
    );
    let pose = Pose {
        x: rng.gen_range(side..size as f64 - side),
        y: rng.gen_range(top..size as f64 - bottom),
        height,
        phase: rng.gen_range(0.0..std::f64::consts::TAU),
    };
    let m = pose.mask(size);
    paint(&mut image, &m, sprite_color(&mut rng));
    Ok(SynthStill {
        image,
        bbox: mask_box(&m, size).ok_or_else(|| Error::Data("empty figure".into()))?,
        keypoints: pose.keypoints(size),
    })
}

fn write_sequence(dir: &Path, seq: &SynthSequence, with_patch: bool) -> Result<()> {
    let img = dir.join("img");
    std::fs::create_dir_all(&img).map_err(|e| Error::io(&img, e))?;
    for (t, f) in seq.frames.iter().enumerate() {
        save_png8(&img.join(format!("{:05}.png", t + 1)), f)?;
    }
    write_groundtruth(&dir.join("groundtruth.txt"), &seq.gt)?;
    if with_patch {
        let pdir = dir.join("patch");
        let mdir = pdir.join("mask");
        std::fs::create_dir_all(&mdir).map_err(|e| Error::io(&mdir, e))?;
        let region_path = pdir.join("region.json");
        std::fs::write(
            &region_path,
            serde_json::to_string_pretty(&seq.patch.region)?,
        )
        .map_err(|e| Error::io(&region_path, e))?;
        let (h, w) = seq.patch.frame_size;
        for (t, m) in seq.patch.masks.iter().enumerate() {
            save_mask(&mdir.join(format!("{:05}.png", t + 1)), m, w, h)?;
        }
        save_png8(&pdir.join("init.png"), &seq.patch.texture)?;
    }
    Ok(())
}

/// Generates the whole dataset under `root`, one item at a time. The
/// `synth.json` manifest is written last and marks a complete dataset.
pub fn write_synth_dataset(cfg: &SynthConfig, root: &Path) -> Result<()> {
    cfg.validate()?;
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;

    let img_dir = root.join("keypoints").join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut coco = CocoFile {
        images: Vec::new(),
        annotations: Vec::new(),
    };
    for i in 0..cfg.stills {
        let still = render_still(cfg.seed, i, cfg)?;
        let file_name = format!("{:05}.png", i + 1);
        save_png8(&img_dir.join(&file_name), &still.image)?;
        let [x1, y1, x2, y2] = still.bbox.corners();
        let keypoints = still
            .keypoints
            .iter()
            .flat_map(|k| [k.x, k.y, if k.visible { 2.0 } else { 0.0 }])
            .collect();
        coco.images.push(CocoImage {
            id: i as u64 + 1,
            file_name,
            width: Some(cfg.frame_size as u32),
            height: Some(cfg.frame_size as u32),
        });
        coco.annotations.push(CocoAnnotation {
            id: Some(i as u64 + 1),
            image_id: i as u64 + 1,
            category_id: Some(1),
            bbox: vec![x1, y1, x2 - x1, y2 - y1],
            keypoints,
            num_keypoints: still.keypoints.iter().filter(|k| k.visible).count(),
            iscrowd: 0,
        });
    }
    let ann = root.join("keypoints").join("annotations.json");
    std::fs::write(&ann, serde_json::to_string(&coco)?).map_err(|e| Error::io(&ann, e))?;

    for i in 0..cfg.train_sequences {
        let seq = render_sequence(cfg.seed, i, false, cfg)?;
        write_sequence(&root.join("sequences").join(&seq.name), &seq, false)?;
    }
    for i in 0..cfg.test_sequences {
        let seq = render_sequence(cfg.seed, i, true, cfg)?;
        write_sequence(&root.join("test").join(&seq.name), &seq, true)?;
    }
    let manifest = root.join("synth.json");
    std::fs::write(&manifest, serde_json::to_string_pretty(cfg)?)
        .map_err(|e| Error::io(&manifest, e))
}

/// The configuration of a complete synthetic dataset under `root`, if any.
pub fn read_synth_manifest(root: &Path) -> Result<Option<SynthConfig>> {
    let manifest = root.join("synth.json");
    if !manifest.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    Ok(Some(serde_json::from_str(&text)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            frame_size: 96,
            frames_per_sequence: 12,
            test_frames: 6,
            patch_side: 32,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let cfg = small();
        let a = render_sequence(4, 1, false, &cfg).unwrap();
        let b = render_sequence(4, 1, false, &cfg).unwrap();
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.gt, b.gt);
        assert_eq!(a.patch, b.patch);
        let c = render_sequence(5, 1, false, &cfg).unwrap();
        assert_ne!(a.frames, c.frames);
    }

    #[test]
    fn boxes_bound_the_figure_pixels() {
        let cfg = small();
        let seq = render_sequence(1, 0, true, &cfg).unwrap();
        let s = cfg.frame_size;
        for (t, f) in seq.frames.iter().enumerate() {
            // pixel scan: every pixel differing from the background belongs to the figure
            let (mut x0, mut y0, mut x1, mut y1) = (s, s, 0, 0);
            for y in 0..s {
                for x in 0..s {
                    let differs = (0..3).any(|c| f.at3(c, y, x) != seq.background.at3(c, y, x));
                    if differs {
                        (x0, y0, x1, y1) = (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1));
                    }
                }
            }
            let scan = [x0, y0, x1, y1].map(|v| v as f64);
            for (a, b) in seq.gt[t].corners().iter().zip(scan) {
                assert!(
                    (a - b).abs() <= 1.0,
                    "frame {t}: {:?} vs {scan:?}",
                    seq.gt[t].corners()
                );
            }
        }
    }

    #[test]
    fn keypoints_sit_on_the_figure() {
        let cfg = small();
        let still = render_still(2, 3, &cfg).unwrap();
        let visible: Vec<&Keypoint> = still.keypoints.iter().filter(|k| k.visible).collect();
        assert_eq!(visible.len(), 13);
        let [x1, y1, x2, y2] = still.bbox.corners();
        for k in visible {
            assert!(k.x >= x1 - 1.0 && k.x <= x2 + 1.0 && k.y >= y1 - 1.0 && k.y <= y2 + 1.0);
        }
        for k in UNUSED {
            assert!(!still.keypoints[k].visible);
        }
    }

    #[test]
    fn masks_exclude_the_figure_and_the_first_frame() {
        let cfg = small();
        let seq = render_sequence(3, 2, true, &cfg).unwrap();
        assert!(seq.patch.masks[0].iter().all(|&v| !v));
        let r = seq.patch.region;
        for t in 1..seq.frames.len() {
            for (i, &v) in seq.patch.masks[t].iter().enumerate() {
                let inside = r.contains(i / cfg.frame_size, i % cfg.frame_size);
                assert_eq!(v, inside && !seq.sprite_masks[t][i]);
            }
        }
    }

    #[test]
    fn written_sequences_load_back_exactly() {
        let cfg = small();
        let dir = tempfile::tempdir().unwrap();
        let seq = render_sequence(0, 0, true, &cfg).unwrap();
        write_sequence(&dir.path().join(&seq.name), &seq, true).unwrap();
        let loaded = crate::data::load_test_sequences(dir.path()).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0].frames, seq.frames);
        assert_eq!(loaded[0].gt, seq.gt);
        let patch = loaded[0].patch.as_ref().unwrap();
        assert_eq!(patch.masks, seq.patch.masks);
        assert_eq!(patch.region, seq.patch.region);
        assert!(patch.first_frame_clean);
        assert!(patch.texture.max_abs_diff(&seq.patch.texture).unwrap() < 1e-12);
    }

    #[test]
    fn small_frames_are_rejected() {
        let cfg = SynthConfig {
            frame_size: 32,
            ..small()
        };
        assert!(render_sequence(0, 0, false, &cfg).is_err());
    }
}
