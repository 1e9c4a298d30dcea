//! Context cropping, template-once sequential inference and the
//! differentiable rollout used by the patch attack.

use serde::{Deserialize, Serialize};

use crate::attack::{composite_var, PatchSpec};
use crate::autograd::{CustomOp, Graph, Tensor, Var};
use crate::geometry::{decode_deltas, ious, mean, AnchorSet, BBox, Deltas};
use crate::model::{Bound, Model, RpnKernels, DETECTION_SIZE, RESPONSE_SIZE, TEMPLATE_SIZE};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CropRole {
    Template,
    Detection,
}

impl CropRole {
    pub fn out_size(self) -> usize {
        match self {
            CropRole::Template => TEMPLATE_SIZE,
            CropRole::Detection => DETECTION_SIZE,
        }
    }
}

/// Square context window, frame-to-patch mapping of a crop.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropWindow {
    pub cx: f64,
    pub cy: f64,
    pub side: f64,
    pub out_size: usize,
}

impl CropWindow {
    /// Context window around `b`: `s_z = sqrt((w + p)(h + p))` with
    /// `p = (w + h) / 2`; detection windows are `s_z · 255 / 127`.
    pub fn around(b: &BBox, role: CropRole) -> Self {
        let p = (b.w + b.h) / 2.0;
        let s_z = ((b.w + p) * (b.h + p)).sqrt();
        let side = match role {
            CropRole::Template => s_z,
            CropRole::Detection => s_z * DETECTION_SIZE as f64 / TEMPLATE_SIZE as f64,
        };
        Self {
            cx: b.cx,
            cy: b.cy,
            side,
            out_size: role.out_size(),
        }
    }

    /// Patch pixels per frame pixel.
    pub fn scale(&self) -> f64 {
        self.out_size as f64 / self.side
    }

    pub fn frame_to_patch(&self, x: f64, y: f64) -> (f64, f64) {
        let k = self.scale();
        (
            (x - (self.cx - self.side / 2.0)) * k,
            (y - (self.cy - self.side / 2.0)) * k,
        )
    }

    pub fn patch_to_frame(&self, u: f64, v: f64) -> (f64, f64) {
        let k = 1.0 / self.scale();
        (
            self.cx - self.side / 2.0 + u * k,
            self.cy - self.side / 2.0 + v * k,
        )
    }

    pub fn box_to_patch(&self, b: &BBox) -> BBox {
        let (cx, cy) = self.frame_to_patch(b.cx, b.cy);
        let k = self.scale();
        BBox {
            cx,
            cy,
            w: b.w * k,
            h: b.h * k,
        }
    }

    pub fn box_to_frame(&self, b: &BBox) -> BBox {
        let (cx, cy) = self.patch_to_frame(b.cx, b.cy);
        let k = 1.0 / self.scale();
        BBox {
            cx,
            cy,
            w: b.w * k,
            h: b.h * k,
        }
    }
}

/// Bilinear taps of one output row/column: `(index, weight, in_frame)` for
/// the lower and upper neighbour, plus the sample position.
#[derive(Clone, Copy)]
struct Taps {
    lo: isize,
    t: f64,
}

fn taps(center: f64, side: f64, out: usize) -> Vec<Taps> {
    let start = center - side / 2.0;
    let step = side / out as f64;
    (0..out)
        .map(|i| {
            // continuous coordinate of the output pixel center, in pixel-index space
            let s = start + (i as f64 + 0.5) * step - 0.5;
            let lo = s.floor();
            Taps {
                lo: lo as isize,
                t: s - lo,
            }
        })
        .collect()
}

fn inside(i: isize, n: usize) -> bool {
    i >= 0 && (i as usize) < n
}

/// Differentiable context crop: inputs are the `[3, H, W]` frame and a
/// `[3]` window `(cx, cy, side)`. Samples outside the frame read the frame's
/// per-channel mean.
struct CropOp {
    out: usize,
}

struct CropPlan {
    rows: Vec<Taps>,
    cols: Vec<Taps>,
    means: Vec<f64>,
}

impl CropOp {
    fn plan(&self, frame: &Tensor, window: &Tensor) -> CropPlan {
        let (c, h, w) = (frame.shape()[0], frame.shape()[1], frame.shape()[2]);
        let [cx, cy, side] = [window.data()[0], window.data()[1], window.data()[2]];
        let means = (0..c)
            .map(|ch| {
                frame.data()[ch * h * w..(ch + 1) * h * w]
                    .iter()
                    .sum::<f64>()
                    / (h * w) as f64
            })
            .collect();
        CropPlan {
            rows: taps(cy, side, self.out),
            cols: taps(cx, side, self.out),
            means,
        }
    }
}

/// Padded pixel read.
#[inline]
fn px(plane: &[f64], h: usize, w: usize, mean: f64, y: isize, x: isize) -> f64 {
    if inside(y, h) && inside(x, w) {
        plane[y as usize * w + x as usize]
    } else {
        mean
    }
}

impl CustomOp for CropOp {
    fn name(&self) -> &'static str {
        "crop"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> crate::autograd::Result<Tensor> {
        let (frame, window) = (inputs[0], inputs[1]);
        let (c, h, w) = frame.dims3()?;
        let plan = self.plan(frame, window);
        let s = self.out;
        let mut out = vec![0.0; c * s * s];
        for ch in 0..c {
            let plane = &frame.data()[ch * h * w..(ch + 1) * h * w];
            let mean = plan.means[ch];
            for (i, r) in plan.rows.iter().enumerate() {
                for (j, q) in plan.cols.iter().enumerate() {
                    let top = (1.0 - q.t) * px(plane, h, w, mean, r.lo, q.lo)
                        + q.t * px(plane, h, w, mean, r.lo, q.lo + 1);
                    let bottom = (1.0 - q.t) * px(plane, h, w, mean, r.lo + 1, q.lo)
                        + q.t * px(plane, h, w, mean, r.lo + 1, q.lo + 1);
                    out[(ch * s + i) * s + j] = (1.0 - r.t) * top + r.t * bottom;
                }
            }
        }
        Tensor::new(&[c, s, s], out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> crate::autograd::Result<Vec<Option<Tensor>>> {
        let (frame, window) = (inputs[0], inputs[1]);
        let (c, h, w) = frame.dims3()?;
        let plan = self.plan(frame, window);
        let s = self.out;
        let g = grad.data();

        let d_frame = needs[0].then(|| {
            let mut d = vec![0.0; c * h * w];
            for ch in 0..c {
                let plane = &mut d[ch * h * w..(ch + 1) * h * w];
                let mut to_mean = 0.0;
                for (i, r) in plan.rows.iter().enumerate() {
                    for (j, q) in plan.cols.iter().enumerate() {
                        let gv = g[(ch * s + i) * s + j];
                        if gv == 0.0 {
                            continue;
                        }
                        for (dy, wy) in [(0, 1.0 - r.t), (1, r.t)] {
                            for (dx, wx) in [(0, 1.0 - q.t), (1, q.t)] {
                                let (y, x) = (r.lo + dy, q.lo + dx);
                                if inside(y, h) && inside(x, w) {
                                    plane[y as usize * w + x as usize] += gv * wy * wx;
                                } else {
                                    to_mean += gv * wy * wx;
                                }
                            }
                        }
                    }
                }
                let share = to_mean / (h * w) as f64;
                plane.iter_mut().for_each(|v| *v += share);
            }
            Tensor::new(&[c, h, w], d)
        });

        let d_window = needs[1].then(|| {
            let (mut dcx, mut dcy, mut dside) = (0.0, 0.0, 0.0);
            for ch in 0..c {
                let plane = &frame.data()[ch * h * w..(ch + 1) * h * w];
                let mean = plan.means[ch];
                let p = |y, x| px(plane, h, w, mean, y, x);
                for (i, r) in plan.rows.iter().enumerate() {
                    let dv_dside = -0.5 + (i as f64 + 0.5) / s as f64;
                    for (j, q) in plan.cols.iter().enumerate() {
                        let gv = g[(ch * s + i) * s + j];
                        if gv == 0.0 {
                            continue;
                        }
                        let du_dside = -0.5 + (j as f64 + 0.5) / s as f64;
                        let (a00, a01) = (p(r.lo, q.lo), p(r.lo, q.lo + 1));
                        let (a10, a11) = (p(r.lo + 1, q.lo), p(r.lo + 1, q.lo + 1));
                        // d out / d (row coordinate), d out / d (col coordinate)
                        let d_v = (1.0 - q.t) * (a10 - a00) + q.t * (a11 - a01);
                        let d_u = (1.0 - r.t) * (a01 - a00) + r.t * (a11 - a10);
                        dcy += gv * d_v;
                        dcx += gv * d_u;
                        dside += gv * (d_v * dv_dside + d_u * du_dside);
                    }
                }
            }
            Tensor::from_vec(vec![dcx, dcy, dside])
        });

        Ok(vec![d_frame.transpose()?, d_window])
    }
}

/// Adds a crop of `frame` through `window` (`[cx, cy, side]`) to the graph.
pub fn crop_var(g: &mut Graph, frame: Var, window: Var, out_size: usize) -> Result<Var> {
    g.value(frame).dims3()?;
    if g.value(window).shape() != [3] {
        return Err(Error::Shape(format!(
            "crop window must be [3], got {:?}",
            g.value(window).shape()
        )));
    }
    Ok(g.custom(&[frame, window], Box::new(CropOp { out: out_size }))?)
}

fn frame_dims(frame: &Tensor) -> Result<(usize, usize)> {
    match frame.shape() {
        [3, h, w] if *h > 0 && *w > 0 => Ok((*h, *w)),
        s => Err(Error::Shape(format!("frame must be [3, H, W], got {s:?}"))),
    }
}

/// Crops the context region around `b` and resizes it to the role's input
/// size.
pub fn crop_context(frame: &Tensor, b: &BBox, role: CropRole) -> Result<(Tensor, CropWindow)> {
    let (h, w) = frame_dims(frame)?;
    if b.clip_to(w as f64, h as f64).is_none() {
        return Err(Error::Data(format!(
            "box {b:?} lies outside the {w}x{h} frame"
        )));
    }
    let window = CropWindow::around(b, role);
    Ok((crop_window(frame, &window)?, window))
}

/// Resamples `frame` through an arbitrary window.
pub fn crop_window(frame: &Tensor, window: &CropWindow) -> Result<Tensor> {
    frame_dims(frame)?;
    if !(window.side > 0.0 && window.side.is_finite()) {
        return Err(Error::Shape(format!(
            "crop side must be positive, got {}",
            window.side
        )));
    }
    let mut op = CropOp {
        out: window.out_size,
    };
    let wt = Tensor::from_vec(vec![window.cx, window.cy, window.side]);
    Ok(op.forward(&[frame, &wt])?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    /// Blend weight of the cosine window in anchor selection.
    pub window_influence: f64,
    /// Scale-change penalty strength; 0 disables it.
    pub penalty_k: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            window_influence: 0.4,
            penalty_k: 0.0,
        }
    }
}

impl TrackerConfig {
    /// Selection used when attacking: pure foreground argmax.
    pub fn attack() -> Self {
        Self {
            window_influence: 0.0,
            penalty_k: 0.0,
        }
    }
}

/// Per-sequence tracker state. The correlation kernels derived from the
/// template are computed once in [`Tracker::init`].
#[derive(Clone, Debug)]
pub struct TrackerState {
    pub kernel_cls: Tensor,
    pub kernel_reg: Tensor,
    pub last: BBox,
    pub frame_size: (usize, usize),
    pub template_passes: usize,
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub bbox: BBox,
    /// `[m, 17, 17]` foreground probabilities.
    pub scores: Tensor,
    pub anchor: usize,
}

pub struct Tracker<'m> {
    pub model: &'m Model,
    pub config: TrackerConfig,
    anchors: AnchorSet,
    cosine: Vec<f64>,
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * (i as f64 + 0.5) / n as f64).cos())
        .collect()
}

/// Foreground probability per anchor from `[2m, H, W]` logits.
pub fn foreground_scores(cls: &Tensor) -> Tensor {
    let (c2, h, w) = (cls.shape()[0], cls.shape()[1], cls.shape()[2]);
    let cells = h * w;
    let m = c2 / 2;
    let d = cls.data();
    let mut out = Tensor::zeros(&[m, h, w]);
    for a in 0..m {
        for cell in 0..cells {
            let (bg, fg) = (d[2 * a * cells + cell], d[(2 * a + 1) * cells + cell]);
            out.data_mut()[a * cells + cell] = 1.0 / (1.0 + (bg - fg).exp());
        }
    }
    out
}

/// Clamps a predicted box so it stays a valid box inside the frame.
pub fn clip_prediction(b: &BBox, width: usize, height: usize) -> BBox {
    let (fw, fh) = (width as f64, height as f64);
    let cx = b.cx.clamp(0.0, fw);
    let cy = b.cy.clamp(0.0, fh);
    let w = b.w.clamp(4.0_f64.min(fw), fw);
    let h = b.h.clamp(4.0_f64.min(fh), fh);
    BBox { cx, cy, w, h }
        .clip_to(fw, fh)
        .expect("center inside frame with positive size")
}

impl<'m> Tracker<'m> {
    pub fn new(model: &'m Model, config: TrackerConfig) -> Result<Self> {
        let anchors = model.config.anchor_set()?;
        let hw = hann(RESPONSE_SIZE);
        let cells: Vec<f64> = (0..RESPONSE_SIZE * RESPONSE_SIZE)
            .map(|c| hw[c / RESPONSE_SIZE] * hw[c % RESPONSE_SIZE])
            .collect();
        let cosine = (0..anchors.num_ratios())
            .flat_map(|_| cells.iter().copied())
            .collect();
        Ok(Self {
            model,
            config,
            anchors,
            cosine,
        })
    }

    pub fn anchors(&self) -> &AnchorSet {
        &self.anchors
    }

    pub fn init(&self, frame: &Tensor, gt: &BBox) -> Result<TrackerState> {
        let (h, w) = frame_dims(frame)?;
        let (patch, _) = crop_context(frame, gt, CropRole::Template)?;
        let mut g = Graph::new();
        let bound = self.model.bind(&mut g, |_| false);
        let z = g.constant(patch);
        let fz = bound.backbone(&mut g, z)?;
        let k = bound.rpn_kernels(&mut g, fz)?;
        Ok(TrackerState {
            kernel_cls: g.value(k.cls).clone(),
            kernel_reg: g.value(k.reg).clone(),
            last: *gt,
            frame_size: (h, w),
            template_passes: 1,
        })
    }

    /// Anchor chosen from foreground scores: cosine-window blend, optional
    /// scale-change penalty, then argmax.
    pub fn select(
        &self,
        scores: &Tensor,
        reg: &Tensor,
        window: &CropWindow,
        last: &BBox,
    ) -> Result<usize> {
        if !scores.all_finite() || !reg.all_finite() {
            return Err(Error::Numerical("non-finite tracker scores".into()));
        }
        let wi = self.config.window_influence;
        let cells = self.anchors.cells();
        let prev = window.box_to_patch(last);
        let size = |w: f64, h: f64| {
            let p = (w + h) / 2.0;
            ((w + p) * (h + p)).sqrt()
        };
        let mut best = (0, f64::NEG_INFINITY);
        for (i, &s) in scores.data().iter().enumerate() {
            let mut s = s;
            if self.config.penalty_k > 0.0 {
                let d = self.deltas_at(reg, i, cells);
                let b = decode_deltas(&self.anchors.boxes[i], &d);
                let change = |r: f64| r.max(1.0 / r);
                let sc = change(size(b.w, b.h) / size(prev.w, prev.h));
                let rc = change((prev.w / prev.h) / (b.w / b.h));
                s *= (-(rc * sc - 1.0) * self.config.penalty_k).exp();
            }
            let v = if wi > 0.0 {
                (1.0 - wi) * s + wi * self.cosine[i]
            } else {
                s
            };
            if v > best.1 {
                best = (i, v);
            }
        }
        Ok(best.0)
    }

    fn deltas_at(&self, reg: &Tensor, anchor: usize, cells: usize) -> Deltas {
        let (a, cell) = (anchor / cells, anchor % cells);
        let d = reg.data();
        Deltas {
            dx: d[(4 * a) * cells + cell],
            dy: d[(4 * a + 1) * cells + cell],
            dw: d[(4 * a + 2) * cells + cell],
            dh: d[(4 * a + 3) * cells + cell],
        }
    }

    fn detect(
        &self,
        g: &mut Graph,
        bound: &Bound<'_>,
        state: &TrackerState,
        patch: Var,
    ) -> Result<(Var, Var)> {
        let kernels = RpnKernels {
            cls: g.constant(state.kernel_cls.clone()),
            reg: g.constant(state.kernel_reg.clone()),
        };
        let fx = bound.backbone(g, patch)?;
        let out = bound.rpn_detect(g, &kernels, fx)?;
        Ok((out.cls, out.reg))
    }

    pub fn update(&self, state: &mut TrackerState, frame: &Tensor) -> Result<Prediction> {
        let (h, w) = frame_dims(frame)?;
        let (patch, window) = crop_context(frame, &state.last, CropRole::Detection)?;
        let mut g = Graph::new();
        let bound = self.model.bind(&mut g, |_| false);
        let x = g.constant(patch);
        let (cls, reg) = self.detect(&mut g, &bound, state, x)?;
        let scores = foreground_scores(g.value(cls));
        let reg = g.value(reg);
        let anchor = self.select(&scores, reg, &window, &state.last)?;
        let d = self.deltas_at(reg, anchor, self.anchors.cells());
        let in_patch = decode_deltas(&self.anchors.boxes[anchor], &d);
        let raw = window.box_to_frame(&in_patch);
        if ![raw.cx, raw.cy, raw.w, raw.h].iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite box prediction (deltas {d:?})"
            )));
        }
        let bbox = clip_prediction(&raw, w, h);
        state.last = bbox;
        state.frame_size = (h, w);
        Ok(Prediction {
            bbox,
            scores,
            anchor,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceResult {
    /// Predictions for frames 2..n.
    pub predictions: Vec<BBox>,
    pub ious: Vec<f64>,
    pub miou: f64,
}

/// Initializes on frame 1 with its ground truth and tracks frames 2..n.
/// IoU is reported over the tracked frames only.
pub fn track_sequence(
    model: &Model,
    config: TrackerConfig,
    frames: &[Tensor],
    gt: &[BBox],
) -> Result<SequenceResult> {
    if frames.len() < 2 {
        return Err(Error::Data("tracking needs at least two frames".into()));
    }
    if frames.len() != gt.len() {
        return Err(Error::Shape(format!(
            "{} frames but {} ground-truth boxes",
            frames.len(),
            gt.len()
        )));
    }
    let tracker = Tracker::new(model, config)?;
    let mut state = tracker.init(&frames[0], &gt[0])?;
    let mut predictions = Vec::with_capacity(frames.len() - 1);
    for frame in &frames[1..] {
        predictions.push(tracker.update(&mut state, frame)?.bbox);
    }
    debug_assert_eq!(state.template_passes, 1);
    let ious = ious(&predictions, &gt[1..])?;
    let miou = mean(&ious);
    Ok(SequenceResult {
        predictions,
        ious,
        miou,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RolloutMode {
    /// Crop centers are constants taken from the previous (detached) prediction.
    #[default]
    Detached,
    /// Gradient also flows into earlier frames through the crop windows.
    FullUnroll,
}

/// Longest sequence accepted by [`RolloutMode::FullUnroll`].
pub const MAX_UNROLL_FRAMES: usize = 10;

#[derive(Clone, Debug)]
pub struct Rollout {
    /// Sum of per-frame L1 corner errors over frames 2..n.
    pub loss: f64,
    pub frame_losses: Vec<f64>,
    /// Gradient of `loss` with respect to the patch texture.
    pub texture_grad: Tensor,
    pub predictions: Vec<BBox>,
}

/// Detection window `[cx, cy, side]` from box corners `[x1, y1, x2, y2]`.
struct DetectionWindowOp;

impl DetectionWindowOp {
    const RATIO: f64 = DETECTION_SIZE as f64 / TEMPLATE_SIZE as f64;
}

impl CustomOp for DetectionWindowOp {
    fn name(&self) -> &'static str {
        "detection_window"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> crate::autograd::Result<Tensor> {
        let c = inputs[0].data();
        let (w, h) = (c[2] - c[0], c[3] - c[1]);
        let p = (w + h) / 2.0;
        let side = ((w + p) * (h + p)).sqrt() * Self::RATIO;
        Ok(Tensor::from_vec(vec![
            (c[0] + c[2]) / 2.0,
            (c[1] + c[3]) / 2.0,
            side,
        ]))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> crate::autograd::Result<Vec<Option<Tensor>>> {
        let c = inputs[0].data();
        let (w, h) = (c[2] - c[0], c[3] - c[1]);
        let (a, b) = ((3.0 * w + h) / 2.0, (w + 3.0 * h) / 2.0);
        let side = output.data()[2];
        // side = R sqrt(a b), da/dw = 3/2, db/dw = 1/2 (and mirrored for h)
        let k = Self::RATIO * Self::RATIO / (2.0 * side);
        let ds_dw = k * (1.5 * b + 0.5 * a);
        let ds_dh = k * (0.5 * b + 1.5 * a);
        let g = grad.data();
        let (gx, gy, gs) = (g[0] / 2.0, g[1] / 2.0, g[2]);
        Ok(vec![Some(Tensor::from_vec(vec![
            gx - gs * ds_dw,
            gy - gs * ds_dh,
            gx + gs * ds_dw,
            gy + gs * ds_dh,
        ]))])
    }
}

/// Differentiable L1 corner error of the box decoded at a fixed anchor.
/// Returns the loss, the predicted corners `[4]` and the unclipped box.
fn decoded_l1(
    g: &mut Graph,
    reg: Var,
    anchors: &AnchorSet,
    anchor_index: usize,
    window: Var,
    gt: &BBox,
) -> Result<(Var, Var, BBox)> {
    let out_size = DETECTION_SIZE;
    let anchor = &anchors.boxes[anchor_index];
    let cells = anchors.cells();
    let (a, cell) = (anchor_index / cells, anchor_index % cells);
    let slots: Vec<usize> = (0..4).map(|t| (4 * a + t) * cells + cell).collect();
    let d = g.gather(reg, &slots)?;
    let dxy = g.gather(d, &[0, 1])?;
    let dwh = g.gather(d, &[2, 3])?;
    let a_wh = g.constant(Tensor::from_vec(vec![anchor.w, anchor.h]));
    let a_c = g.constant(Tensor::from_vec(vec![anchor.cx, anchor.cy]));
    let off = g.mul(dxy, a_wh)?;
    let c_patch = g.add(a_c, off)?;
    let e = g.exp(dwh);
    let s_patch = g.mul(e, a_wh)?;
    // frame = window_center - side/2 + patch * side / out
    let wc = g.gather(window, &[0, 1])?;
    let side_v = g.gather(window, &[2, 2])?;
    let per_px = g.scale(side_v, 1.0 / out_size as f64);
    let half_side = g.scale(side_v, 0.5);
    let origin = g.sub(wc, half_side)?;
    let c_rel = g.mul(c_patch, per_px)?;
    let center = g.add(origin, c_rel)?;
    let size = g.mul(s_patch, per_px)?;
    let half = g.scale(size, 0.5);
    let lo = g.sub(center, half)?;
    let hi = g.add(center, half)?;
    let pred = g.concat(&[lo, hi]);
    let target = g.constant(Tensor::from_vec(gt.corners().to_vec()));
    let diff = g.sub(pred, target)?;
    let abs = g.abs(diff);
    let loss = g.sum(abs);
    let v = g.value(pred).data();
    let bbox = BBox {
        cx: (v[0] + v[2]) / 2.0,
        cy: (v[1] + v[3]) / 2.0,
        w: v[2] - v[0],
        h: v[3] - v[1],
    };
    Ok((loss, pred, bbox))
}

/// Runs the tracker over `frames` with `texture` composited through `spec`,
/// summing the L1 box loss against `gt` on frames 2..n and differentiating it
/// with respect to the texture. The selected anchor of each frame is a
/// constant of differentiation.
pub fn differentiable_rollout(
    model: &Model,
    config: TrackerConfig,
    frames: &[Tensor],
    gt: &[BBox],
    spec: &PatchSpec,
    texture: &Tensor,
    mode: RolloutMode,
) -> Result<Rollout> {
    if frames.len() < 2 || frames.len() != gt.len() {
        return Err(Error::Shape(format!(
            "rollout needs ≥2 frames with matching ground truth ({} frames, {} boxes)",
            frames.len(),
            gt.len()
        )));
    }
    spec.check(frames)?;
    if mode == RolloutMode::FullUnroll && frames.len() > MAX_UNROLL_FRAMES {
        return Err(Error::Config(format!(
            "full unroll is limited to {MAX_UNROLL_FRAMES} frames, got {}",
            frames.len()
        )));
    }
    let tracker = Tracker::new(model, config)?;
    let first = spec.composite_frame(&frames[0], 0, texture)?;
    let mut state = tracker.init(&first, &gt[0])?;
    let (h, w) = frame_dims(&frames[0])?;

    let mut texture_grad = Tensor::zeros(texture.shape());
    let mut frame_losses = Vec::with_capacity(frames.len() - 1);
    let mut predictions = Vec::with_capacity(frames.len() - 1);
    let mut g = Graph::new();
    let mut tex = g.param(texture.clone());
    let mut unrolled = Vec::new();
    let mut prev_pred: Option<Var> = None;

    for t in 1..frames.len() {
        if mode == RolloutMode::Detached && t > 1 {
            g = Graph::new();
            tex = g.param(texture.clone());
        }
        let bound = model.bind(&mut g, |_| false);
        let window = CropWindow::around(&state.last, CropRole::Detection);
        let frame = composite_var(&mut g, &frames[t], spec, t, tex)?;
        let window_var = match prev_pred.take() {
            Some(p) => g.custom(&[p], Box::new(DetectionWindowOp))?,
            None => g.constant(Tensor::from_vec(vec![window.cx, window.cy, window.side])),
        };
        let patch = crop_var(&mut g, frame, window_var, DETECTION_SIZE)?;
        let (cls, reg) = tracker.detect(&mut g, &bound, &state, patch)?;
        let scores = foreground_scores(g.value(cls));
        let anchor = tracker.select(&scores, g.value(reg), &window, &state.last)?;
        let (loss, pred, raw) =
            decoded_l1(&mut g, reg, &tracker.anchors, anchor, window_var, &gt[t])?;
        let value = g.value(loss).item();
        if !value.is_finite() || ![raw.cx, raw.cy, raw.w, raw.h].iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite attack loss at frame {}",
                t + 1
            )));
        }
        frame_losses.push(value);
        let bbox = clip_prediction(&raw, w, h);
        predictions.push(bbox);
        state.last = bbox;
        match mode {
            RolloutMode::Detached => {
                if let Some(d) = g.backward(loss)?.get(tex) {
                    texture_grad.add_assign(d)?;
                }
            }
            RolloutMode::FullUnroll => {
                unrolled.push(loss);
                // a clipped box no longer depends smoothly on the prediction
                if raw
                    .corners()
                    .iter()
                    .zip(bbox.corners())
                    .all(|(a, b)| (a - b).abs() < 1e-9)
                {
                    prev_pred = Some(pred);
                }
            }
        }
    }

    if mode == RolloutMode::FullUnroll {
        let all = g.concat(&unrolled);
        let total = g.sum(all);
        if let Some(d) = g.backward(total)?.get(tex) {
            texture_grad = d.clone();
        }
    }
    if !texture_grad.all_finite() {
        return Err(Error::Numerical("non-finite texture gradient".into()));
    }
    Ok(Rollout {
        loss: frame_losses.iter().sum(),
        frame_losses,
        texture_grad,
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::check::{numeric_gradient, relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_frame(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[3, h, w], |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn context_side_formula() {
        let b = BBox::new(100.0, 100.0, 64.0, 64.0).unwrap();
        let win = CropWindow::around(&b, CropRole::Template);
        assert!((win.side - 128.0).abs() < 1e-12);
        assert!((win.scale() - 127.0 / 128.0).abs() < 1e-12);
        let det = CropWindow::around(&b, CropRole::Detection);
        assert!((det.side - 128.0 * 255.0 / 127.0).abs() < 1e-9);
    }

    #[test]
    fn patch_corners_map_back_to_crop_square() {
        let b = BBox::new(40.0, 70.0, 23.0, 51.0).unwrap();
        for role in [CropRole::Template, CropRole::Detection] {
            let win = CropWindow::around(&b, role);
            let s = win.out_size as f64;
            let (x0, y0) = win.patch_to_frame(0.0, 0.0);
            let (x1, y1) = win.patch_to_frame(s, s);
            assert!((x0 - (b.cx - win.side / 2.0)).abs() < 1e-4);
            assert!((y0 - (b.cy - win.side / 2.0)).abs() < 1e-4);
            assert!((x1 - (b.cx + win.side / 2.0)).abs() < 1e-4);
            assert!((y1 - (b.cy + win.side / 2.0)).abs() < 1e-4);
            let rt = win.box_to_frame(&win.box_to_patch(&b));
            assert!((rt.cx - b.cx).abs() < 1e-9 && (rt.w - b.w).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_frame_gives_constant_patch() {
        let frame = Tensor::from_fn(&[3, 50, 80], |i| [0.2, 0.5, 0.9][i / 4000]);
        let b = BBox::new(40.0, 25.0, 30.0, 20.0).unwrap();
        let (patch, _) = crop_context(&frame, &b, CropRole::Detection).unwrap();
        for c in 0..3 {
            let want = [0.2, 0.5, 0.9][c];
            for i in 0..255 {
                for j in 0..255 {
                    assert!((patch.at3(c, i, j) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn crop_reads_the_right_pixels() {
        // identity scale: side == out, window aligned on pixel edges
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frame = random_frame(&mut rng, 10, 12);
        let mut op = CropOp { out: 4 };
        let window = Tensor::from_vec(vec![5.0, 4.0, 4.0]); // covers x 3..7, y 2..6
        let patch = op.forward(&[&frame, &window]).unwrap();
        for c in 0..3 {
            for i in 0..4 {
                for j in 0..4 {
                    assert!((patch.at3(c, i, j) - frame.at3(c, 2 + i, 3 + j)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn box_outside_frame_is_rejected() {
        let frame = Tensor::zeros(&[3, 20, 20]);
        let b = BBox::new(-30.0, 5.0, 4.0, 4.0).unwrap();
        assert!(crop_context(&frame, &b, CropRole::Template).is_err());
    }

    #[test]
    fn crop_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..4 {
            let frame = random_frame(&mut rng, 9, 11);
            let window = Tensor::from_vec(vec![
                rng.gen_range(2.0..9.0),
                rng.gen_range(2.0..7.0),
                rng.gen_range(4.0..12.0),
            ]);
            let probe = Tensor::from_fn(&[3, 7, 7], |_| rng.gen_range(-1.0..1.0));
            let f = |frame: &Tensor, window: &Tensor| {
                let mut op = CropOp { out: 7 };
                let out = op.forward(&[frame, window]).unwrap();
                out.data()
                    .iter()
                    .zip(probe.data())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            };
            let mut g = Graph::new();
            let fv = g.param(frame.clone());
            let wv = g.param(window.clone());
            let out = crop_var(&mut g, fv, wv, 7).unwrap();
            let p = g.constant(probe.clone());
            let m = g.mul(out, p).unwrap();
            let l = g.sum(m);
            let grads = g.backward(l).unwrap();
            let num_f = numeric_gradient(&frame, 1e-6, |x| f(x, &window));
            let err = relative_error(grads.get(fv).unwrap().data(), num_f.data(), 1e-9);
            assert!(err < 1e-6, "frame grad error {err}");
            let num_w = numeric_gradient(&window, 1e-6, |x| f(&frame, x));
            let err = relative_error(grads.get(wv).unwrap().data(), num_w.data(), 1e-9);
            assert!(err < 1e-4, "window grad error {err}");
        }
    }

    #[test]
    fn detection_window_op_matches_context_formula() {
        let b = BBox::new(30.0, 41.0, 17.0, 29.0).unwrap();
        let corners = Tensor::from_vec(b.corners().to_vec());
        let out = DetectionWindowOp.forward(&[&corners]).unwrap();
        let want = CropWindow::around(&b, CropRole::Detection);
        assert!((out.data()[0] - want.cx).abs() < 1e-12);
        assert!((out.data()[1] - want.cy).abs() < 1e-12);
        assert!((out.data()[2] - want.side).abs() < 1e-9);
        let probe = [0.3, -1.1, 0.7];
        let f = |x: &Tensor| {
            let o = DetectionWindowOp.forward(&[x]).unwrap();
            o.data().iter().zip(probe).map(|(a, b)| a * b).sum::<f64>()
        };
        let grad = DetectionWindowOp
            .backward(
                &[&corners],
                &out,
                &Tensor::from_vec(probe.to_vec()),
                &[true],
            )
            .unwrap();
        let num = numeric_gradient(&corners, 1e-6, f);
        let err = relative_error(grad[0].as_ref().unwrap().data(), num.data(), 1e-9);
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn selection_without_window_is_argmax() {
        let model = Model::init(Default::default(), 0).unwrap();
        let tracker = Tracker::new(&model, TrackerConfig::attack()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let scores = Tensor::from_fn(&[5, 17, 17], |_| rng.gen_range(0.0..1.0));
        let reg = Tensor::zeros(&[20, 17, 17]);
        let win = CropWindow::around(
            &BBox::new(50.0, 50.0, 20.0, 40.0).unwrap(),
            CropRole::Detection,
        );
        let last = BBox::new(50.0, 50.0, 20.0, 40.0).unwrap();
        let picked = tracker.select(&scores, &reg, &win, &last).unwrap();
        let argmax = (0..scores.numel())
            .max_by(|&a, &b| scores.data()[a].total_cmp(&scores.data()[b]))
            .unwrap();
        assert_eq!(picked, argmax);
        let mut bad = scores.clone();
        bad.data_mut()[3] = f64::NAN;
        assert!(matches!(
            tracker.select(&bad, &reg, &win, &last),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn clipped_predictions_stay_inside() {
        let b = BBox::new(-20.0, 130.0, 500.0, 0.5).unwrap();
        let c = clip_prediction(&b, 100, 120);
        let [x1, y1, x2, y2] = c.corners();
        assert!(x1 >= 0.0 && y1 >= 0.0 && x2 <= 100.0 && y2 <= 120.0);
    }
}
