//! Anchor target assignment and the tracking / keypoint objectives.
//!
//! The three task losses are fused graph ops with hand-written adjoints; they
//! read the RPN and keypoint maps in the channel layout documented in
//! [`crate::model`].

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{CustomOp, Graph, Tensor, Var};
use crate::geometry::{encode_deltas, iou, AnchorSet, BBox, Deltas};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnchorThresholds {
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub pos_cap: usize,
    pub neg_cap: usize,
}

impl Default for AnchorThresholds {
    fn default() -> Self {
        Self {
            pos_iou: 0.6,
            neg_iou: 0.3,
            pos_cap: 16,
            neg_cap: 48,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorTargets {
    /// One label per anchor, anchor-major like [`AnchorSet::boxes`].
    pub labels: Vec<AnchorLabel>,
    /// Regression target of each positive anchor; `None` elsewhere.
    pub reg_targets: Vec<Option<Deltas>>,
    pub pos_count: usize,
    pub neg_count: usize,
    /// Anchor layout, kept so the loss ops can address map channels.
    pub num_ratios: usize,
    pub cells: usize,
}

impl AnchorTargets {
    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == AnchorLabel::Positive)
            .map(|(i, _)| i)
    }
}

/// Labels anchors against `gt` (detection-patch coordinates).
///
/// Positives: IoU ≥ `pos_iou`, keeping the `pos_cap` highest. If none
/// qualifies the single best-overlapping anchor is forced positive.
/// Negatives: IoU ≤ `neg_iou`, uniformly subsampled down to `neg_cap`.
pub fn assign_anchor_targets(
    anchors: &AnchorSet,
    gt: &BBox,
    th: &AnchorThresholds,
    rng: &mut impl Rng,
) -> AnchorTargets {
    let n = anchors.len();
    let overlaps: Vec<f64> = anchors.boxes.iter().map(|a| iou(a, gt)).collect();
    let mut labels = vec![AnchorLabel::Ignore; n];

    let mut pos: Vec<usize> = (0..n).filter(|&i| overlaps[i] >= th.pos_iou).collect();
    if pos.is_empty() {
        let best = (0..n)
            .max_by(|&a, &b| overlaps[a].total_cmp(&overlaps[b]).then(b.cmp(&a)))
            .expect("nonempty anchor set");
        pos.push(best);
    }
    if pos.len() > th.pos_cap.max(1) {
        pos.sort_by(|&a, &b| overlaps[b].total_cmp(&overlaps[a]).then(a.cmp(&b)));
        pos.truncate(th.pos_cap.max(1));
    }
    for &i in &pos {
        labels[i] = AnchorLabel::Positive;
    }

    let neg_pool: Vec<usize> = (0..n)
        .filter(|&i| labels[i] == AnchorLabel::Ignore && overlaps[i] <= th.neg_iou)
        .collect();
    let negs: Vec<usize> = if neg_pool.len() > th.neg_cap {
        let mut picked: Vec<usize> = sample(rng, neg_pool.len(), th.neg_cap)
            .into_iter()
            .map(|k| neg_pool[k])
            .collect();
        picked.sort_unstable();
        picked
    } else {
        neg_pool
    };
    for &i in &negs {
        labels[i] = AnchorLabel::Negative;
    }

    let reg_targets = labels
        .iter()
        .zip(&anchors.boxes)
        .map(|(l, a)| (*l == AnchorLabel::Positive).then(|| encode_deltas(a, gt)))
        .collect();
    AnchorTargets {
        labels,
        reg_targets,
        pos_count: pos.len(),
        neg_count: negs.len(),
        num_ratios: anchors.num_ratios(),
        cells: anchors.cells(),
    }
}

fn log_sum_exp2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Numerically stable `BCE(sigmoid(logit), target)`.
pub fn bce_with_logits(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn smooth_l1(u: f64) -> f64 {
    if u.abs() < 1.0 {
        0.5 * u * u
    } else {
        u.abs() - 0.5
    }
}

fn smooth_l1_grad(u: f64) -> f64 {
    u.clamp(-1.0, 1.0)
}

fn check_map(t: &Tensor, channels: usize, cells: usize, what: &str) -> Result<()> {
    let ok =
        t.shape().len() == 3 && t.shape()[0] == channels && t.shape()[1] * t.shape()[2] == cells;
    if ok {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "{what} map {:?} does not match {channels} channels over {cells} cells",
            t.shape()
        )))
    }
}

struct ClsLossOp {
    /// `(anchor index, is_positive)` of every non-ignored anchor.
    terms: Vec<(usize, bool)>,
    cells: usize,
}

impl ClsLossOp {
    fn slots(&self, anchor: usize) -> (usize, usize) {
        let (a, cell) = (anchor / self.cells, anchor % self.cells);
        ((2 * a) * self.cells + cell, (2 * a + 1) * self.cells + cell)
    }
}

impl CustomOp for ClsLossOp {
    fn name(&self) -> &'static str {
        "cls_loss"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> crate::autograd::Result<Tensor> {
        let x = inputs[0].data();
        let total: f64 = self
            .terms
            .iter()
            .map(|&(anchor, positive)| {
                let (bg, fg) = self.slots(anchor);
                log_sum_exp2(x[bg], x[fg]) - if positive { x[fg] } else { x[bg] }
            })
            .sum();
        Ok(Tensor::scalar(total / self.terms.len() as f64))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> crate::autograd::Result<Vec<Option<Tensor>>> {
        let x = inputs[0].data();
        let scale = grad.item() / self.terms.len() as f64;
        let mut d = Tensor::zeros(inputs[0].shape());
        let dd = d.data_mut();
        for &(anchor, positive) in &self.terms {
            let (bg, fg) = self.slots(anchor);
            let p_fg = sigmoid(x[fg] - x[bg]);
            let y = if positive { 1.0 } else { 0.0 };
            dd[fg] += scale * (p_fg - y);
            dd[bg] -= scale * (p_fg - y);
        }
        Ok(vec![Some(d)])
    }
}

/// Mean two-class cross-entropy over non-ignored anchors.
pub fn cls_loss(g: &mut Graph, cls_logits: Var, targets: &AnchorTargets) -> Result<Var> {
    check_map(
        g.value(cls_logits),
        2 * targets.num_ratios,
        targets.cells,
        "classification",
    )?;
    let terms: Vec<(usize, bool)> = targets
        .labels
        .iter()
        .enumerate()
        .filter_map(|(i, l)| match l {
            AnchorLabel::Positive => Some((i, true)),
            AnchorLabel::Negative => Some((i, false)),
            AnchorLabel::Ignore => None,
        })
        .collect();
    if terms.is_empty() {
        return Err(Error::Data(
            "classification loss needs at least one labelled anchor".into(),
        ));
    }
    let op = ClsLossOp {
        terms,
        cells: targets.cells,
    };
    Ok(g.custom(&[cls_logits], Box::new(op))?)
}

struct RegLossOp {
    terms: Vec<(usize, [f64; 4])>,
    cells: usize,
}

impl RegLossOp {
    fn slot(&self, anchor: usize, t: usize) -> usize {
        let (a, cell) = (anchor / self.cells, anchor % self.cells);
        (4 * a + t) * self.cells + cell
    }
}

impl CustomOp for RegLossOp {
    fn name(&self) -> &'static str {
        "reg_loss"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> crate::autograd::Result<Tensor> {
        if self.terms.is_empty() {
            return Ok(Tensor::scalar(0.0));
        }
        let x = inputs[0].data();
        let total: f64 = self
            .terms
            .iter()
            .map(|(anchor, target)| {
                (0..4)
                    .map(|t| smooth_l1(x[self.slot(*anchor, t)] - target[t]))
                    .sum::<f64>()
            })
            .sum();
        Ok(Tensor::scalar(total / self.terms.len() as f64))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> crate::autograd::Result<Vec<Option<Tensor>>> {
        let mut d = Tensor::zeros(inputs[0].shape());
        if self.terms.is_empty() {
            return Ok(vec![Some(d)]);
        }
        let x = inputs[0].data();
        let scale = grad.item() / self.terms.len() as f64;
        let dd = d.data_mut();
        for (anchor, target) in &self.terms {
            for t in 0..4 {
                let s = self.slot(*anchor, t);
                dd[s] += scale * smooth_l1_grad(x[s] - target[t]);
            }
        }
        Ok(vec![Some(d)])
    }
}

/// Mean over positive anchors of the summed smooth-L1 delta error.
pub fn reg_loss(g: &mut Graph, reg_deltas: Var, targets: &AnchorTargets) -> Result<Var> {
    check_map(
        g.value(reg_deltas),
        4 * targets.num_ratios,
        targets.cells,
        "regression",
    )?;
    let terms = targets
        .reg_targets
        .iter()
        .enumerate()
        .filter_map(|(i, d)| d.map(|d| (i, d.to_array())))
        .collect();
    let op = RegLossOp {
        terms,
        cells: targets.cells,
    };
    Ok(g.custom(&[reg_deltas], Box::new(op))?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_r: f64,
    pub lambda_k: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_c: 1.0,
            lambda_r: 1.2,
            lambda_k: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_c", self.lambda_c),
            ("lambda_r", self.lambda_r),
            ("lambda_k", self.lambda_k),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!(
                    "{name} must be a nonnegative number, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn trk(&self, cls: f64, reg: f64) -> f64 {
        self.lambda_c * cls + self.lambda_r * reg
    }

    pub fn mtl(&self, trk: f64, kpt: f64) -> f64 {
        if self.lambda_k == 0.0 {
            trk
        } else {
            trk + self.lambda_k * kpt
        }
    }
}

/// `λ_C · cls + λ_R · reg`.
pub fn trk_loss(g: &mut Graph, cls: Var, reg: Var, weights: &LossWeights) -> Result<Var> {
    weights.validate()?;
    let c = g.scale(cls, weights.lambda_c);
    let r = g.scale(reg, weights.lambda_r);
    Ok(g.add(c, r)?)
}

/// `trk + λ_K · kpt`; with `λ_K = 0` (or no keypoint term) this is `trk`
/// itself.
pub fn mtl_loss(g: &mut Graph, trk: Var, kpt: Option<Var>, weights: &LossWeights) -> Result<Var> {
    weights.validate()?;
    match kpt {
        Some(k) if weights.lambda_k != 0.0 => {
            let k = g.scale(k, weights.lambda_k);
            Ok(g.add(trk, k)?)
        }
        _ => Ok(trk),
    }
}

/// One keypoint in patch pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeypointTarget {
    /// `[K, S, S]` binary map.
    pub map: Tensor,
    pub visibility: Vec<bool>,
}

/// Stamps a disk of ones (radius in pixels) at each visible keypoint.
///
/// The disk is centered on the pixel containing the keypoint and clipped to
/// the patch. A visible keypoint whose disk misses the patch entirely is
/// marked invisible.
pub fn make_keypoint_target(keypoints: &[Keypoint], radius: usize, size: usize) -> KeypointTarget {
    let k = keypoints.len();
    let mut map = Tensor::zeros(&[k, size, size]);
    let mut visibility = vec![false; k];
    let r = radius as i64;
    for (c, kp) in keypoints.iter().enumerate() {
        if !kp.visible || !kp.x.is_finite() || !kp.y.is_finite() {
            continue;
        }
        let (px, py) = (kp.x.floor() as i64, kp.y.floor() as i64);
        let plane = &mut map.data_mut()[c * size * size..(c + 1) * size * size];
        let mut stamped = false;
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy > r * r {
                    continue;
                }
                let (x, y) = (px + dx, py + dy);
                if x >= 0 && y >= 0 && (x as usize) < size && (y as usize) < size {
                    plane[y as usize * size + x as usize] = 1.0;
                    stamped = true;
                }
            }
        }
        visibility[c] = stamped;
    }
    KeypointTarget { map, visibility }
}

struct KptLossOp {
    target: Tensor,
    visibility: Vec<bool>,
}

impl KptLossOp {
    fn denom(&self, plane: usize) -> f64 {
        (self.visibility.iter().filter(|v| **v).count() * plane) as f64
    }
}

impl CustomOp for KptLossOp {
    fn name(&self) -> &'static str {
        "kpt_loss"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> crate::autograd::Result<Tensor> {
        let x = inputs[0];
        let plane = x.shape()[1] * x.shape()[2];
        if !self.visibility.iter().any(|v| *v) {
            return Ok(Tensor::scalar(0.0));
        }
        let mut total = 0.0;
        for (c, _) in self.visibility.iter().enumerate().filter(|(_, v)| **v) {
            let range = c * plane..(c + 1) * plane;
            total += x.data()[range.clone()]
                .iter()
                .zip(&self.target.data()[range])
                .map(|(&l, &t)| bce_with_logits(l, t))
                .sum::<f64>();
        }
        Ok(Tensor::scalar(total / self.denom(plane)))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> crate::autograd::Result<Vec<Option<Tensor>>> {
        let x = inputs[0];
        let plane = x.shape()[1] * x.shape()[2];
        let mut d = Tensor::zeros(x.shape());
        if !self.visibility.iter().any(|v| *v) {
            return Ok(vec![Some(d)]);
        }
        let scale = grad.item() / self.denom(plane);
        for (c, _) in self.visibility.iter().enumerate().filter(|(_, v)| **v) {
            for i in c * plane..(c + 1) * plane {
                d.data_mut()[i] = scale * (sigmoid(x.data()[i]) - self.target.data()[i]);
            }
        }
        Ok(vec![Some(d)])
    }
}

/// Per-pixel binary cross-entropy averaged over the pixels of visible
/// channels. Invisible channels contribute nothing, not even to the
/// denominator.
pub fn kpt_loss(g: &mut Graph, logits: Var, target: &KeypointTarget) -> Result<Var> {
    if g.value(logits).shape() != target.map.shape() {
        return Err(Error::Shape(format!(
            "keypoint logits {:?} vs target {:?}",
            g.value(logits).shape(),
            target.map.shape()
        )));
    }
    if !target.visibility.iter().any(|v| *v) {
        log::warn!("keypoint loss: no visible keypoints, contributing 0");
    }
    let op = KptLossOp {
        target: target.map.clone(),
        visibility: target.visibility.clone(),
    };
    Ok(g.custom(&[logits], Box::new(op))?)
}
