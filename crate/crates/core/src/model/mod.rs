//! Siamese backbone, cross-correlation RPN head and template-branch keypoint
//! head.
//!
//! All maps are channel-first `[C, H, W]`. RPN outputs are laid out
//! anchor-major: classification channel `2a + k` holds class `k` (0 background,
//! 1 foreground) of anchor ratio `a`, regression channel `4a + t` holds delta
//! component `t` (dx, dy, dw, dh) of anchor ratio `a`.
//!
//! Canonical parameter names (each conv has `.weight` and `.bias`):
//!
//! | name | weight shape |
//! |------|--------------|
//! | `backbone.conv{i}` | `[out, in, k, k]` |
//! | `rpn.cls_kernel` | `[2m·C, C, 3, 3]` |
//! | `rpn.reg_kernel` | `[4m·C, C, 3, 3]` |
//! | `rpn.cls_search` / `rpn.reg_search` | `[C, C, 3, 3]` |
//! | `rpn.cls_out` | bias only, `[2m]` |
//! | `rpn.reg_adjust` | `[4m, 4m, 1, 1]` |
//! | `kpt.block{i}` | `[c_i, c_{i-1}, 3, 3]` |
//! | `kpt.deconv` | `[c_last, K, 4, 4]` (transposed) |

mod checkpoint;

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Tensor, Var};
use crate::geometry::{generate_anchors, AnchorSet};
use crate::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};

pub const TEMPLATE_SIZE: usize = 127;
pub const DETECTION_SIZE: usize = 255;
pub const TEMPLATE_FEATURE: usize = 6;
pub const DETECTION_FEATURE: usize = 22;
pub const RESPONSE_SIZE: usize = 17;
pub const TOTAL_STRIDE: usize = 8;
pub const NUM_KEYPOINTS: usize = 17;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneVariant {
    PaperAlexnet,
    Tiny,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub variant: BackboneVariant,
    /// Width of the tiny variant; ignored by `paper-alexnet` (always 256).
    pub channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            variant: BackboneVariant::Tiny,
            channels: 32,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Layer {
    Conv {
        index: usize,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        relu: bool,
    },
    Pool {
        kernel: usize,
        stride: usize,
    },
}

impl BackboneConfig {
    pub fn out_channels(&self) -> usize {
        match self.variant {
            BackboneVariant::PaperAlexnet => 256,
            BackboneVariant::Tiny => self.channels,
        }
    }

    pub fn total_stride(&self) -> usize {
        TOTAL_STRIDE
    }

    fn layers(&self) -> Vec<Layer> {
        let conv = |index, in_ch, out_ch, kernel, stride, relu| Layer::Conv {
            index,
            in_ch,
            out_ch,
            kernel,
            stride,
            relu,
        };
        let pool = Layer::Pool {
            kernel: 3,
            stride: 2,
        };
        match self.variant {
            BackboneVariant::PaperAlexnet => vec![
                conv(1, 3, 96, 11, 2, true),
                pool,
                conv(2, 96, 256, 5, 1, true),
                pool,
                conv(3, 256, 384, 3, 1, true),
                conv(4, 384, 384, 3, 1, true),
                conv(5, 384, 256, 3, 1, false),
            ],
            BackboneVariant::Tiny => {
                let c = self.channels;
                vec![
                    conv(1, 3, c, 5, 2, true),
                    pool,
                    conv(2, c, c, 3, 1, true),
                    pool,
                    conv(3, c, c, 8, 1, false),
                ]
            }
        }
    }

    /// Output side length for an input side, following the layer schedule.
    pub fn output_side(&self, input: usize) -> Option<usize> {
        let mut s = input;
        for layer in self.layers() {
            let (k, st) = match layer {
                Layer::Conv { kernel, stride, .. } => (kernel, stride),
                Layer::Pool { kernel, stride } => (kernel, stride),
            };
            if s < k {
                return None;
            }
            s = (s - k) / st + 1;
        }
        Some(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadDepth {
    Shallow,
    Deep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KeypointHeadConfig {
    pub depth: HeadDepth,
    pub num_keypoints: usize,
}

impl Default for KeypointHeadConfig {
    fn default() -> Self {
        Self {
            depth: HeadDepth::Shallow,
            num_keypoints: NUM_KEYPOINTS,
        }
    }
}

impl KeypointHeadConfig {
    pub fn channels(&self) -> &'static [usize] {
        match self.depth {
            HeadDepth::Shallow => &[128, 64],
            HeadDepth::Deep => &[128, 128, 64, 64],
        }
    }
}

/// Side of the transposed-convolution output before bilinear upsampling.
pub const DECONV_SIDE: usize = (TEMPLATE_FEATURE - 1) * 2 + 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnchorConfig {
    pub ratios: Vec<f64>,
    pub base_scale: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            ratios: vec![0.33, 0.5, 1.0, 2.0, 3.0],
            base_scale: 64.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub keypoint_head: KeypointHeadConfig,
    pub anchors: AnchorConfig,
}

impl ModelConfig {
    pub fn num_anchors(&self) -> usize {
        self.anchors.ratios.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.keypoint_head.num_keypoints == 0 {
            return Err(Error::Config("keypoint head needs K > 0".into()));
        }
        if self.backbone.variant == BackboneVariant::Tiny && self.backbone.channels == 0 {
            return Err(Error::Config("tiny backbone needs channels > 0".into()));
        }
        if self.anchors.ratios.is_empty() {
            return Err(Error::Config(
                "at least one anchor ratio is required".into(),
            ));
        }
        self.anchor_set().map(|_| ())
    }

    pub fn anchor_set(&self) -> Result<AnchorSet> {
        generate_anchors(
            RESPONSE_SIZE,
            RESPONSE_SIZE,
            TOTAL_STRIDE as f64,
            &self.anchors.ratios,
            self.anchors.base_scale,
            DETECTION_SIZE as f64,
        )
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        digest_json(self)
    }

    /// `(name, shape)` of every parameter, in canonical (sorted) order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut conv = |name: String, o: usize, i: usize, k: usize| {
            out.push((format!("{name}.weight"), vec![o, i, k, k]));
            out.push((format!("{name}.bias"), vec![o]));
        };
        for layer in self.backbone.layers() {
            if let Layer::Conv {
                index,
                in_ch,
                out_ch,
                kernel,
                ..
            } = layer
            {
                conv(format!("backbone.conv{index}"), out_ch, in_ch, kernel);
            }
        }
        let c = self.backbone.out_channels();
        let m = self.num_anchors();
        conv("rpn.cls_kernel".into(), 2 * m * c, c, 3);
        conv("rpn.reg_kernel".into(), 4 * m * c, c, 3);
        conv("rpn.cls_search".into(), c, c, 3);
        conv("rpn.reg_search".into(), c, c, 3);
        conv("rpn.reg_adjust".into(), 4 * m, 4 * m, 1);
        let mut prev = c;
        for (i, &ch) in self.keypoint_head.channels().iter().enumerate() {
            conv(format!("kpt.block{i}"), ch, prev, 3);
            prev = ch;
        }
        let k = self.keypoint_head.num_keypoints;
        out.push(("kpt.deconv.weight".into(), vec![prev, k, 4, 4]));
        out.push(("kpt.deconv.bias".into(), vec![k]));
        out.push(("rpn.cls_out.bias".into(), vec![2 * m]));
        out.sort();
        out
    }
}

pub fn digest_json<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(json))
}

/// Named parameter tensors in canonical order.
pub type ParamStore = BTreeMap<String, Tensor>;

pub fn is_backbone_param(name: &str) -> bool {
    name.starts_with("backbone.")
}

pub fn is_rpn_param(name: &str) -> bool {
    name.starts_with("rpn.")
}

pub fn is_keypoint_param(name: &str) -> bool {
    name.starts_with("kpt.")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Correlation kernels computed once from the template features.
#[derive(Clone, Copy, Debug)]
pub struct RpnKernels {
    pub cls: Var,
    pub reg: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct RpnOutput {
    /// `[2m, 17, 17]`
    pub cls: Var,
    /// `[4m, 17, 17]`
    pub reg: Var,
}

impl Model {
    /// Fresh parameters: uniform in `±sqrt(6 / fan_in)` for weights, zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape) in config.param_shapes() {
            let tensor = if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                let fan_in = if name == "kpt.deconv.weight" {
                    shape[0] * shape[2] * shape[3]
                } else {
                    shape[1] * shape[2] * shape[3]
                };
                let bound = (6.0 / fan_in as f64).sqrt();
                Tensor::from_fn(&shape, |_| rng.gen_range(-bound..bound))
            };
            params.insert(name, tensor);
        }
        let mut model = Self { config, params };
        model.round_to_f32();
        Ok(model)
    }

    /// Rounds every parameter to `f32` precision, the storage precision of
    /// checkpoints.
    pub fn round_to_f32(&mut self) {
        for t in self.params.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    pub fn param_count(&self, filter: impl Fn(&str) -> bool) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| filter(n))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn digest(&self) -> String {
        self.config.digest()
    }

    /// Hash of the parameter values at checkpoint precision.
    pub fn weights_digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.params {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update((*v as f32).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Adds parameters to `g`; those selected by `trainable` become
    /// differentiable leaves, the rest constants.
    pub fn bind<'m>(&'m self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> Bound<'m> {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| {
                let v = if trainable(name) {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (name.as_str(), v)
            })
            .collect();
        Bound { model: self, vars }
    }
}

/// A model whose parameters live in one [`Graph`].
pub struct Bound<'m> {
    pub model: &'m Model,
    vars: BTreeMap<&'m str, Var>,
}

fn check_image(g: &Graph, x: Var) -> Result<usize> {
    match g.value(x).shape() {
        [3, h, w] if h == w && (*h == TEMPLATE_SIZE || *h == DETECTION_SIZE) => Ok(*h),
        s => Err(Error::Shape(format!(
            "backbone expects [3, {TEMPLATE_SIZE}|{DETECTION_SIZE}, same] patch, got {s:?}"
        ))),
    }
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Var {
        self.vars[name]
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, Var)> + '_ {
        self.vars.iter().map(|(n, v)| (*n, *v))
    }

    fn conv(&self, g: &mut Graph, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = self.var(&format!("{name}.weight"));
        let b = self.var(&format!("{name}.bias"));
        Ok(g.conv2d(x, w, Some(b), stride, pad)?)
    }

    /// Shared feature extractor for both branches.
    pub fn backbone(&self, g: &mut Graph, patch: Var) -> Result<Var> {
        check_image(g, patch)?;
        let mut x = patch;
        for layer in self.model.config.backbone.layers() {
            x = match layer {
                Layer::Conv {
                    index,
                    stride,
                    relu,
                    ..
                } => {
                    let y = self.conv(g, &format!("backbone.conv{index}"), x, stride, 0)?;
                    if relu {
                        g.relu(y)
                    } else {
                        y
                    }
                }
                Layer::Pool { kernel, stride } => g.max_pool2d(x, kernel, stride)?,
            };
        }
        Ok(x)
    }

    fn check_feature(&self, g: &Graph, f: Var, side: usize, what: &str) -> Result<()> {
        let c = self.model.config.backbone.out_channels();
        if g.value(f).shape() != [c, side, side] {
            return Err(Error::Shape(format!(
                "{what} features must be [{c}, {side}, {side}], got {:?}",
                g.value(f).shape()
            )));
        }
        Ok(())
    }

    /// Projects template features into per-anchor correlation kernels.
    pub fn rpn_kernels(&self, g: &mut Graph, feat_z: Var) -> Result<RpnKernels> {
        self.check_feature(g, feat_z, TEMPLATE_FEATURE, "template")?;
        let c = self.model.config.backbone.out_channels();
        let m = self.model.config.num_anchors();
        let k = TEMPLATE_FEATURE - 2;
        let cls = self.conv(g, "rpn.cls_kernel", feat_z, 1, 0)?;
        let cls = g.reshape(cls, &[2 * m, c, k, k])?;
        let reg = self.conv(g, "rpn.reg_kernel", feat_z, 1, 0)?;
        let reg = g.reshape(reg, &[4 * m, c, k, k])?;
        Ok(RpnKernels { cls, reg })
    }

    /// Correlates detection features against precomputed kernels.
    pub fn rpn_detect(
        &self,
        g: &mut Graph,
        kernels: &RpnKernels,
        feat_x: Var,
    ) -> Result<RpnOutput> {
        self.check_feature(g, feat_x, DETECTION_FEATURE, "detection")?;
        let c = self.model.config.backbone.out_channels();
        let m = self.model.config.num_anchors();
        for (kv, mult) in [(kernels.cls, 2), (kernels.reg, 4)] {
            let want = [mult * m, c, TEMPLATE_FEATURE - 2, TEMPLATE_FEATURE - 2];
            if g.value(kv).shape() != want {
                return Err(Error::Shape(format!(
                    "correlation kernel {:?} != {want:?}",
                    g.value(kv).shape()
                )));
            }
        }
        let scale = 1.0 / ((c * (TEMPLATE_FEATURE - 2).pow(2)) as f64).sqrt();
        let xs = self.conv(g, "rpn.cls_search", feat_x, 1, 0)?;
        let cls = g.conv2d(xs, kernels.cls, Some(self.var("rpn.cls_out.bias")), 1, 0)?;
        let cls = g.scale(cls, scale);
        let xr = self.conv(g, "rpn.reg_search", feat_x, 1, 0)?;
        let reg = g.conv2d(xr, kernels.reg, None, 1, 0)?;
        let reg = g.scale(reg, scale);
        let reg = self.conv(g, "rpn.reg_adjust", reg, 1, 0)?;
        Ok(RpnOutput { cls, reg })
    }

    pub fn rpn(&self, g: &mut Graph, feat_z: Var, feat_x: Var) -> Result<RpnOutput> {
        let kernels = self.rpn_kernels(g, feat_z)?;
        self.rpn_detect(g, &kernels, feat_x)
    }

    /// Per-pixel keypoint logits `[K, 127, 127]` from template features.
    pub fn keypoint_head(&self, g: &mut Graph, feat_z: Var) -> Result<Var> {
        self.check_feature(g, feat_z, TEMPLATE_FEATURE, "template")?;
        let mut x = feat_z;
        for i in 0..self.model.config.keypoint_head.channels().len() {
            let y = self.conv(g, &format!("kpt.block{i}"), x, 1, 1)?;
            x = g.relu(y);
        }
        let up = g.conv_transpose2d(
            x,
            self.var("kpt.deconv.weight"),
            Some(self.var("kpt.deconv.bias")),
            2,
        )?;
        let m = Rc::new(bilinear_matrix(TEMPLATE_SIZE, DECONV_SIDE));
        Ok(g.separable(up, m.clone(), m)?)
    }
}

/// `[out, in]` bilinear interpolation weights with half-pixel centers and
/// edge clamping.
pub fn bilinear_matrix(out: usize, input: usize) -> Tensor {
    let mut m = Tensor::zeros(&[out, input]);
    let scale = input as f64 / out as f64;
    for o in 0..out {
        let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(input - 1);
        let t = s - i0 as f64;
        let row = &mut m.data_mut()[o * input..(o + 1) * input];
        row[i0] += 1.0 - t;
        row[i1] += t;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig::default()
    }

    #[test]
    fn schedules_meet_spatial_contract() {
        for variant in [BackboneVariant::PaperAlexnet, BackboneVariant::Tiny] {
            let cfg = BackboneConfig {
                variant,
                channels: 32,
            };
            assert_eq!(cfg.output_side(127), Some(6), "{variant:?}");
            assert_eq!(cfg.output_side(255), Some(22), "{variant:?}");
        }
        assert_eq!(DECONV_SIDE, 14);
    }

    #[test]
    fn param_names_are_canonical() {
        let shapes = tiny().param_shapes();
        let names: Vec<&str> = shapes.iter().map(|(n, _)| n.as_str()).collect();
        assert!(names.windows(2).all(|w| w[0] < w[1]));
        assert!(names.contains(&"backbone.conv1.weight"));
        assert!(names.contains(&"kpt.deconv.weight"));
        let kernel = shapes
            .iter()
            .find(|(n, _)| n == "rpn.cls_kernel.weight")
            .unwrap();
        assert_eq!(kernel.1, vec![2 * 5 * 32, 32, 3, 3]);
    }

    #[test]
    fn init_is_deterministic() {
        let a = Model::init(tiny(), 7).unwrap();
        let b = Model::init(tiny(), 7).unwrap();
        let c = Model::init(tiny(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn config_errors() {
        let mut cfg = tiny();
        cfg.keypoint_head.num_keypoints = 0;
        assert!(matches!(Model::init(cfg, 0), Err(Error::Config(_))));
        let mut cfg = tiny();
        cfg.anchors.base_scale = 0.0;
        assert!(Model::init(cfg, 0).is_err());
    }

    #[test]
    fn bilinear_rows_are_convex() {
        let m = bilinear_matrix(127, 14);
        for row in m.data().chunks(14) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
        // identity when sizes match
        let id = bilinear_matrix(5, 5);
        for i in 0..5 {
            assert_eq!(id.data()[i * 5 + i], 1.0);
        }
    }

    #[test]
    fn digest_tracks_config() {
        let a = tiny();
        let mut b = tiny();
        b.keypoint_head.depth = HeadDepth::Deep;
        assert_eq!(a.digest(), tiny().digest());
        assert_ne!(a.digest(), b.digest());
    }
}
