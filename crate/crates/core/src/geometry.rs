//! Boxes, overlap metrics, anchors and box-delta coding.
//!
//! Coordinates are continuous pixels: pixel `(row i, col j)` covers
//! `[j, j+1) x [i, i+1)`, so a box with corners `(0,0)-(2,2)` covers exactly
//! four pixels.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Axis-aligned box in center form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) || ![cx, cy, w, h].iter().all(|v| v.is_finite()) {
            return Err(Error::Config(format!(
                "invalid box cx={cx} cy={cy} w={w} h={h}"
            )));
        }
        Ok(Self { cx, cy, w, h })
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Self::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    /// `[x1, y1, x2, y2]`.
    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self {
            cx: self.cx + dx,
            cy: self.cy + dy,
            ..*self
        }
    }

    /// Grows each side by `pad` pixels.
    pub fn expand(&self, pad: f64) -> Result<Self> {
        Self::new(self.cx, self.cy, self.w + 2.0 * pad, self.h + 2.0 * pad)
    }

    /// Intersection with `[0, width] x [0, height]`, or `None` when empty.
    pub fn clip_to(&self, width: f64, height: f64) -> Option<Self> {
        let [x1, y1, x2, y2] = self.corners();
        let (x1, y1) = (x1.max(0.0), y1.max(0.0));
        let (x2, y2) = (x2.min(width), y2.min(height));
        (x2 > x1 && y2 > y1).then(|| Self::from_corners(x1, y1, x2, y2).ok())?
    }
}

/// Intersection over union; exactly 0 when the boxes do not overlap.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let iw = ax2.min(bx2) - ax1.max(bx1);
    let ih = ay2.min(by2) - ay1.max(by1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    (inter / (a.area() + b.area() - inter)).clamp(0.0, 1.0)
}

/// Per-frame IoU of two aligned box lists.
pub fn ious(pred: &[BBox], gt: &[BBox]) -> Result<Vec<f64>> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} ground-truth boxes",
            pred.len(),
            gt.len()
        )));
    }
    Ok(pred.iter().zip(gt).map(|(p, g)| iou(p, g)).collect())
}

/// Mean over sequences of the per-sequence mean frame IoU.
pub fn miou(pred: &[Vec<BBox>], gt: &[Vec<BBox>]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "{} predicted sequences for {} ground-truth sequences",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Shape("mIoU needs at least one sequence".into()));
    }
    let mut total = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        if p.is_empty() {
            return Err(Error::Shape("mIoU over an empty sequence".into()));
        }
        total += mean(&ious(p, g)?);
    }
    Ok(total / pred.len() as f64)
}

pub(crate) fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Regression offsets of a box relative to an anchor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Deltas {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl Deltas {
    pub fn to_array(self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }
}

pub fn encode_deltas(anchor: &BBox, gt: &BBox) -> Deltas {
    Deltas {
        dx: (gt.cx - anchor.cx) / anchor.w,
        dy: (gt.cy - anchor.cy) / anchor.h,
        dw: (gt.w / anchor.w).ln(),
        dh: (gt.h / anchor.h).ln(),
    }
}

pub fn decode_deltas(anchor: &BBox, d: &Deltas) -> BBox {
    BBox {
        cx: anchor.cx + d.dx * anchor.w,
        cy: anchor.cy + d.dy * anchor.h,
        w: anchor.w * d.dw.exp(),
        h: anchor.h * d.dh.exp(),
    }
}

/// Anchors tiled over a response grid inside the detection patch.
///
/// `boxes` is ordered anchor-major: index `(a * grid_h + i) * grid_w + j`
/// holds ratio `a` at cell `(i, j)`, matching the channel layout of the RPN
/// outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub grid_h: usize,
    pub grid_w: usize,
    pub stride: f64,
    pub ratios: Vec<f64>,
    pub base_scale: f64,
    pub boxes: Vec<BBox>,
}

impl AnchorSet {
    pub fn num_ratios(&self) -> usize {
        self.ratios.len()
    }

    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// `(ratio index, row, col)` of a flat anchor index.
    pub fn unravel(&self, index: usize) -> (usize, usize, usize) {
        let a = index / self.cells();
        let rem = index % self.cells();
        (a, rem / self.grid_w, rem % self.grid_w)
    }
}

/// Tiles `ratios.len()` anchors per cell of a `grid_h x grid_w` lattice with
/// spacing `stride`, centered in a square patch of side `patch_size`. Ratio
/// `r` is height over width and every anchor has area `base_scale²`.
pub fn generate_anchors(
    grid_h: usize,
    grid_w: usize,
    stride: f64,
    ratios: &[f64],
    base_scale: f64,
    patch_size: f64,
) -> Result<AnchorSet> {
    if !(stride > 0.0) || !(base_scale > 0.0) {
        return Err(Error::Config(format!(
            "anchor stride {stride} and base scale {base_scale} must be positive"
        )));
    }
    if ratios.is_empty() || ratios.iter().any(|r| !(*r > 0.0)) {
        return Err(Error::Config(format!(
            "anchor ratios must be positive and nonempty: {ratios:?}"
        )));
    }
    if grid_h == 0 || grid_w == 0 {
        return Err(Error::Config("anchor grid must be nonempty".into()));
    }
    let center = patch_size / 2.0;
    let mut boxes = Vec::with_capacity(grid_h * grid_w * ratios.len());
    for &r in ratios {
        let (w, h) = (base_scale / r.sqrt(), base_scale * r.sqrt());
        for i in 0..grid_h {
            let cy = center + (i as f64 - (grid_h as f64 - 1.0) / 2.0) * stride;
            for j in 0..grid_w {
                let cx = center + (j as f64 - (grid_w as f64 - 1.0) / 2.0) * stride;
                boxes.push(BBox { cx, cy, w, h });
            }
        }
    }
    Ok(AnchorSet {
        grid_h,
        grid_w,
        stride,
        ratios: ratios.to_vec(),
        base_scale,
        boxes,
    })
}
