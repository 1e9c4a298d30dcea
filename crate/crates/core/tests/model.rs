use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skelevision_core::autograd::check::{directional_derivative, relative_error};
use skelevision_core::autograd::{Graph, Tensor};
use skelevision_core::geometry::BBox;
use skelevision_core::model::{is_keypoint_param, BackboneVariant, HeadDepth, Model, ModelConfig};
use skelevision_core::tracking::{crop_context, CropRole, Tracker, TrackerConfig};

fn image(rng: &mut ChaCha8Rng, side: usize) -> Tensor {
    Tensor::from_fn(&[3, side, side], |_| rng.gen_range(0.0..1.0))
}

fn config(variant: BackboneVariant, depth: HeadDepth, channels: usize) -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.backbone.variant = variant;
    cfg.backbone.channels = channels;
    cfg.keypoint_head.depth = depth;
    cfg
}

#[test]
fn shape_contracts_hold_for_every_variant() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (z, x) = (image(&mut rng, 127), image(&mut rng, 255));
    for variant in [BackboneVariant::Tiny, BackboneVariant::PaperAlexnet] {
        for depth in [HeadDepth::Shallow, HeadDepth::Deep] {
            let cfg = config(variant, depth, 32);
            let c = cfg.backbone.out_channels();
            let m = cfg.anchors.ratios.len();
            assert_eq!(m, 5);
            let model = Model::init(cfg, 0).unwrap();
            let mut g = Graph::new();
            let b = model.bind(&mut g, |_| false);
            let zv = g.constant(z.clone());
            let xv = g.constant(x.clone());
            let fz = b.backbone(&mut g, zv).unwrap();
            let fx = b.backbone(&mut g, xv).unwrap();
            assert_eq!(g.value(fz).shape(), [c, 6, 6]);
            assert_eq!(g.value(fx).shape(), [c, 22, 22]);
            let out = b.rpn(&mut g, fz, fx).unwrap();
            assert_eq!(g.value(out.cls).shape(), [2 * m, 17, 17]);
            assert_eq!(g.value(out.reg).shape(), [4 * m, 17, 17]);
            let k = b.keypoint_head(&mut g, fz).unwrap();
            assert_eq!(g.value(k).shape(), [17, 127, 127], "{variant:?} {depth:?}");
        }
    }
}

#[test]
fn deep_head_has_about_twice_the_parameters() {
    let count = |depth| {
        Model::init(config(BackboneVariant::Tiny, depth, 32), 0)
            .unwrap()
            .param_count(is_keypoint_param)
    };
    let ratio = count(HeadDepth::Deep) as f64 / count(HeadDepth::Shallow) as f64;
    assert!((1.5..=2.5).contains(&ratio), "{ratio}");
}

#[test]
fn template_and_detection_paths_share_the_backbone() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = Model::init(config(BackboneVariant::Tiny, HeadDepth::Shallow, 8), 3).unwrap();
    let frame = image(&mut rng, 160);
    let gt = BBox::new(80.0, 75.0, 30.0, 44.0).unwrap();
    let (patch, _) = crop_context(&frame, &gt, CropRole::Template).unwrap();

    let mut g = Graph::new();
    let b = model.bind(&mut g, |_| true);
    let p = g.constant(patch.clone());
    let a = b.backbone(&mut g, p).unwrap();
    let q = g.constant(patch);
    let again = b.backbone(&mut g, q).unwrap();
    assert_eq!(g.value(a), g.value(again));

    let kernels = b.rpn_kernels(&mut g, a).unwrap();
    let state = Tracker::new(&model, TrackerConfig::default())
        .unwrap()
        .init(&frame, &gt)
        .unwrap();
    assert_eq!(&state.kernel_cls, g.value(kernels.cls));
    assert_eq!(&state.kernel_reg, g.value(kernels.reg));
}

/// Random linear functional of the network outputs, differentiated with
/// respect to the input pixels.
#[test]
fn outputs_are_differentiable_in_the_pixels() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = Model::init(config(BackboneVariant::Tiny, HeadDepth::Shallow, 8), 5).unwrap();
    let z = image(&mut rng, 127);
    let x = image(&mut rng, 255);
    let wc = Tensor::from_fn(&[10, 17, 17], |_| rng.gen_range(-1.0..1.0));
    let wr = Tensor::from_fn(&[20, 17, 17], |_| rng.gen_range(-1.0..1.0));
    let wk = Tensor::from_fn(&[17, 127, 127], |_| rng.gen_range(-1.0..1.0));
    let eval = |z: &Tensor, x: &Tensor, grads: bool| {
        let mut g = Graph::new();
        let b = model.bind(&mut g, |_| false);
        let (zv, xv) = (g.param(z.clone()), g.param(x.clone()));
        let fz = b.backbone(&mut g, zv).unwrap();
        let fx = b.backbone(&mut g, xv).unwrap();
        let out = b.rpn(&mut g, fz, fx).unwrap();
        let k = b.keypoint_head(&mut g, fz).unwrap();
        let mut terms = Vec::new();
        for (v, w) in [(out.cls, &wc), (out.reg, &wr), (k, &wk)] {
            let w = g.constant(w.clone());
            let p = g.mul(v, w).unwrap();
            terms.push(g.sum(p));
        }
        let s = g.concat(&terms);
        let loss = g.sum(s);
        let value = g.value(loss).item();
        let grads = grads.then(|| {
            let gr = g.backward(loss).unwrap();
            (gr.get(zv).unwrap().clone(), gr.get(xv).unwrap().clone())
        });
        (value, grads)
    };
    let (_, grads) = eval(&z, &x, true);
    let (gz, gx) = grads.unwrap();
    for _ in 0..3 {
        let dz = Tensor::from_fn(z.shape(), |_| rng.gen_range(-1.0..1.0));
        let dx = Tensor::from_fn(x.shape(), |_| rng.gen_range(-1.0..1.0));
        let numeric_z = directional_derivative(&z, &dz, 1e-6, |t| eval(t, &x, false).0);
        let numeric_x = directional_derivative(&x, &dx, 1e-6, |t| eval(&z, t, false).0);
        let dot = |a: &Tensor, b: &Tensor| {
            a.data()
                .iter()
                .zip(b.data())
                .map(|(p, q)| p * q)
                .sum::<f64>()
        };
        let err = relative_error(
            &[dot(&gz, &dz), dot(&gx, &dx)],
            &[numeric_z, numeric_x],
            1e-8,
        );
        assert!(err <= 1e-3, "relative error {err}");
    }
}
