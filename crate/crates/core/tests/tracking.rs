use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skelevision_core::attack::{PatchSpec, Region};
use skelevision_core::autograd::check::relative_error;
use skelevision_core::autograd::Tensor;
use skelevision_core::geometry::{iou, BBox};
use skelevision_core::model::{Model, ModelConfig};
use skelevision_core::tracking::{
    differentiable_rollout, track_sequence, RolloutMode, Tracker, TrackerConfig,
};

const H: usize = 160;
const W: usize = 160;

/// Noisy background with a bright square target at `(cx, cy)`.
fn scene(rng: &mut ChaCha8Rng, centers: &[(f64, f64)]) -> Vec<Tensor> {
    let bg = Tensor::from_fn(&[3, H, W], |_| rng.gen_range(0.0..0.4));
    centers
        .iter()
        .map(|&(cx, cy)| {
            let mut f = bg.clone();
            for y in 0..H {
                for x in 0..W {
                    if (x as f64 + 0.5 - cx).abs() < 12.0 && (y as f64 + 0.5 - cy).abs() < 12.0 {
                        for c in 0..3 {
                            f.data_mut()[(c * H + y) * W + x] = [0.9, 0.8, 0.2][c];
                        }
                    }
                }
            }
            f
        })
        .collect()
}

fn boxes(centers: &[(f64, f64)]) -> Vec<BBox> {
    centers
        .iter()
        .map(|&(x, y)| BBox::new(x, y, 24.0, 24.0).unwrap())
        .collect()
}

fn spec_for(n: usize, visible: bool) -> PatchSpec {
    let region = Region {
        x: 30,
        y: 95,
        width: 40,
        height: 24,
    };
    let masks = (0..n)
        .map(|t| {
            (0..H * W)
                .map(|i| visible && t > 0 && region.contains(i / W, i % W))
                .collect()
        })
        .collect();
    PatchSpec::new(region, (H, W), masks, true, Tensor::full(&[3, 24, 40], 0.5)).unwrap()
}

fn small_model(seed: u64) -> Model {
    let mut cfg = ModelConfig::default();
    cfg.backbone.channels = 8;
    Model::init(cfg, seed).unwrap()
}

#[test]
fn init_is_deterministic_and_computes_template_once() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let frames = scene(&mut rng, &[(40.0, 40.0), (44.0, 41.0), (47.0, 43.0)]);
    let gt = boxes(&[(40.0, 40.0), (44.0, 41.0), (47.0, 43.0)]);
    let model = small_model(3);
    let tracker = Tracker::new(&model, TrackerConfig::default()).unwrap();
    let a = tracker.init(&frames[0], &gt[0]).unwrap();
    let b = tracker.init(&frames[0], &gt[0]).unwrap();
    assert_eq!(a.kernel_cls, b.kernel_cls);
    assert_eq!(a.kernel_reg, b.kernel_reg);
    assert_eq!(a.template_passes, 1);
    let mut state = a;
    for f in &frames[1..] {
        tracker.update(&mut state, f).unwrap();
    }
    assert_eq!(state.template_passes, 1);

    let result = track_sequence(&model, TrackerConfig::default(), &frames, &gt).unwrap();
    assert_eq!(result.predictions.len(), 2);
    for (k, p) in result.predictions.iter().enumerate() {
        assert_eq!(result.ious[k], iou(p, &gt[k + 1]));
    }
    let mean = result.ious.iter().sum::<f64>() / 2.0;
    assert!((result.miou - mean).abs() < 1e-15);
}

#[test]
fn tracking_needs_two_frames() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let frames = scene(&mut rng, &[(40.0, 40.0)]);
    let model = small_model(3);
    assert!(track_sequence(
        &model,
        TrackerConfig::default(),
        &frames,
        &boxes(&[(40.0, 40.0)])
    )
    .is_err());
}

#[test]
fn inference_depends_on_frame_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let centers = [(40.0, 40.0), (60.0, 52.0), (30.0, 35.0)];
    let frames = scene(&mut rng, &centers);
    let model = small_model(7);
    let tracker = Tracker::new(&model, TrackerConfig::default()).unwrap();
    let gt = boxes(&centers);
    let run = |order: [usize; 2]| {
        let mut s = tracker.init(&frames[0], &gt[0]).unwrap();
        order.map(|i| tracker.update(&mut s, &frames[i]).unwrap().bbox)
    };
    let forward = run([1, 2]);
    let backward = run([2, 1]);
    // the prediction on frame 2 depends on which frame came before it
    assert_ne!(forward[1], backward[0]);
}

/// Backbone and classification branch set to positive averaging filters, so
/// the response is a translation-equivariant function of the crop.
fn averaging_model() -> Model {
    let mut model = Model::init(ModelConfig::default(), 0).unwrap();
    let c = model.config.backbone.out_channels();
    for (name, t) in model.params.iter_mut() {
        let shape = t.shape().to_vec();
        if name.ends_with(".bias") {
            *t = Tensor::zeros(&shape);
        } else if name.starts_with("backbone.") || name == "rpn.cls_search.weight" {
            let fan_in = shape[1..].iter().product::<usize>() as f64;
            *t = Tensor::full(&shape, 1.0 / fan_in);
        } else if name == "rpn.cls_kernel.weight" {
            let per_out = shape[1..].iter().product::<usize>();
            *t = Tensor::from_fn(&shape, |i| {
                let block = (i / per_out) / c;
                if block % 2 == 1 {
                    1.0 / per_out as f64
                } else {
                    0.0
                }
            });
        }
    }
    model
}

#[test]
fn shifting_content_shifts_the_argmax_cell() {
    let model = averaging_model();
    let tracker = Tracker::new(&model, TrackerConfig::attack()).unwrap();
    let (fh, fw) = (400, 400);
    let blob = |dx: f64| {
        Tensor::from_fn(&[3, fh, fw], |i| {
            let (y, x) = ((i / fw) % fh, i % fw);
            let (u, v) = (x as f64 - 190.0 - dx, y as f64 - 203.0);
            (-(u * u + 0.5 * v * v) / 300.0).exp()
                + 0.3 * (-(u - 9.0).powi(2) / 40.0 - v * v / 90.0).exp()
        })
    };
    // w = h = 63.5 gives a 255-pixel detection window: one patch pixel per frame pixel
    let gt = BBox::new(201.0, 201.0, 63.5, 63.5).unwrap();
    let base = blob(0.0);
    let state = tracker.init(&base, &gt).unwrap();
    let cells = tracker.anchors().cells();
    let cell = |frame: &Tensor| {
        let mut s = state.clone();
        let p = tracker.update(&mut s, frame).unwrap();
        let c = p.anchor % cells;
        (c / 17, c % 17)
    };
    let (row0, col0) = cell(&base);
    for delta in [8i64, 16, -24] {
        let (row, col) = cell(&blob(delta as f64));
        assert_eq!(row, row0);
        assert_eq!(col as i64 - col0 as i64, delta / 8, "shift {delta}");
    }
}

fn sequence(n: usize, seed: u64) -> (Vec<Tensor>, Vec<BBox>) {
    let centers: Vec<(f64, f64)> = (0..n)
        .map(|t| (78.0 + 3.0 * t as f64, 80.0 + t as f64))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (scene(&mut rng, &centers), boxes(&centers))
}

/// Small regression outputs keep predictions inside the frame, so clipping
/// stays inactive and every window depends smoothly on the texture.
fn damped_model() -> Model {
    let mut model = small_model(2);
    for name in ["rpn.reg_adjust.weight", "rpn.reg_adjust.bias"] {
        let t = model.params.get_mut(name).unwrap();
        *t = t.map(|v| 0.05 * v);
    }
    model
}

/// Directional finite-difference check of the texture gradient.
fn check_rollout_gradient(mode: RolloutMode, n: usize) {
    let (frames, gt) = sequence(n, 11);
    let model = damped_model();
    let mut spec = spec_for(n, true);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    spec.texture = Tensor::from_fn(spec.texture.shape(), |_| rng.gen_range(0.2..0.8));
    let cfg = TrackerConfig::attack();
    let r = differentiable_rollout(&model, cfg, &frames, &gt, &spec, &spec.texture, mode).unwrap();
    assert!(r.texture_grad.data().iter().any(|&v| v != 0.0));
    let eps = 1e-5;
    for trial in 0..3 {
        let dir = Tensor::from_fn(spec.texture.shape(), |_| rng.gen_range(-1.0..1.0));
        let shifted = |s: f64| {
            let t = Tensor::from_fn(dir.shape(), |i| spec.texture.data()[i] + s * dir.data()[i]);
            let out = differentiable_rollout(&model, cfg, &frames, &gt, &spec, &t, mode).unwrap();
            out.loss
        };
        let numeric = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
        let analytic: f64 = r
            .texture_grad
            .data()
            .iter()
            .zip(dir.data())
            .map(|(a, b)| a * b)
            .sum();
        let err = relative_error(&[analytic], &[numeric], 1e-8);
        assert!(
            err <= 1e-3,
            "{mode:?} trial {trial}: {analytic} vs {numeric}"
        );
    }
}

#[test]
fn single_frame_rollout_gradient_matches_finite_differences() {
    check_rollout_gradient(RolloutMode::Detached, 2);
}

#[test]
fn full_unroll_gradient_matches_finite_differences() {
    check_rollout_gradient(RolloutMode::FullUnroll, 4);
}

#[test]
fn full_unroll_differs_from_detached_rollout() {
    let (frames, gt) = sequence(4, 11);
    let model = damped_model();
    let spec = spec_for(4, true);
    let cfg = TrackerConfig::attack();
    let run = |mode| {
        differentiable_rollout(&model, cfg, &frames, &gt, &spec, &spec.texture, mode).unwrap()
    };
    let (d, u) = (run(RolloutMode::Detached), run(RolloutMode::FullUnroll));
    assert_eq!(d.loss, u.loss);
    assert_eq!(d.predictions, u.predictions);
    assert!(d.texture_grad.max_abs_diff(&u.texture_grad).unwrap() > 1e-9);
}

#[test]
fn invisible_patch_has_zero_gradient() {
    let (frames, gt) = sequence(4, 3);
    let model = small_model(2);
    let spec = spec_for(4, false);
    for mode in [RolloutMode::Detached, RolloutMode::FullUnroll] {
        let r = differentiable_rollout(
            &model,
            TrackerConfig::attack(),
            &frames,
            &gt,
            &spec,
            &spec.texture,
            mode,
        )
        .unwrap();
        assert!(r.texture_grad.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn rollout_loss_vanishes_on_own_predictions() {
    let (frames, gt) = sequence(4, 4);
    // zero regression output: predictions are anchor boxes of moderate size
    let mut model = small_model(2);
    for name in ["rpn.reg_adjust.weight", "rpn.reg_adjust.bias"] {
        let t = model.params.get_mut(name).unwrap();
        *t = Tensor::zeros(t.shape());
    }
    let spec = spec_for(4, true);
    let cfg = TrackerConfig::attack();
    let first = differentiable_rollout(
        &model,
        cfg,
        &frames,
        &gt,
        &spec,
        &spec.texture,
        RolloutMode::Detached,
    )
    .unwrap();
    assert!(first.loss > 0.0);
    // every prediction stays inside the frame, so clipping is inactive
    let mut own = vec![gt[0]];
    own.extend(first.predictions.iter().copied());
    let again = differentiable_rollout(
        &model,
        cfg,
        &frames,
        &own,
        &spec,
        &spec.texture,
        RolloutMode::Detached,
    )
    .unwrap();
    assert_eq!(again.predictions, first.predictions);
    assert!(again.loss < 1e-9, "{}", again.loss);
}

#[test]
fn full_unroll_is_limited_in_length() {
    let (frames, gt) = sequence(11, 4);
    let model = small_model(2);
    let spec = spec_for(11, true);
    assert!(differentiable_rollout(
        &model,
        TrackerConfig::attack(),
        &frames,
        &gt,
        &spec,
        &spec.texture,
        RolloutMode::FullUnroll
    )
    .is_err());
}
