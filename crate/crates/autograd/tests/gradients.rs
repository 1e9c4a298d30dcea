use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skelevision_autograd::check::{numeric_gradient, relative_error};
use skelevision_autograd::{Graph, Tensor, Var};

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Checks d(sum(out * probe))/d(input[k]) for every input against finite
/// differences. `build` receives the graph and the leaf vars.
fn check(inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let probe_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).shape().to_vec()
    };
    let probe = random(&mut rng, &probe_shape);
    let objective = |g: &mut Graph, out: Var| {
        let p = g.constant(probe.clone());
        let prod = g.mul(out, p).unwrap();
        g.sum(prod)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars);
    let loss = objective(&mut g, out);
    let grads = g.backward(loss).unwrap();

    for (k, input) in inputs.iter().enumerate() {
        let numeric = numeric_gradient(input, 1e-6, |x| {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(i, t)| g.param(if i == k { x.clone() } else { t.clone() }))
                .collect();
            let out = build(&mut g, &vars);
            let loss = objective(&mut g, out);
            g.value(loss).item()
        });
        let analytic = grads.get(vars[k]).expect("gradient present");
        let err = relative_error(analytic.data(), numeric.data(), 1e-8);
        assert!(err < 1e-6, "input {k}: relative error {err}");
    }
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, &[2, 3]);
    let b = random(&mut rng, &[2, 3]);
    check(vec![a, b], |g, v| {
        let s = g.add(v[0], v[1]).unwrap();
        let d = g.sub(s, v[1]).unwrap();
        let m = g.mul(d, v[1]).unwrap();
        let e = g.exp(m);
        let sc = g.scale(e, -1.5);
        let o = g.offset(sc, 0.25);
        let ab = g.abs(o);
        g.relu(ab)
    });
}

#[test]
fn gather_concat_reshape_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[5]);
    check(vec![a, b], |g, v| {
        let picked = g.gather(v[0], &[0, 5, 5, 11]).unwrap();
        let cat = g.concat(&[picked, v[1]]);
        let r = g.reshape(cat, &[3, 3]).unwrap();
        let s = g.sum(r);
        let s2 = g.reshape(s, &[1]).unwrap();
        g.concat(&[s2, cat])
    });
}

#[test]
fn conv2d_with_stride_and_padding() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[2, 7, 6]);
    let w = random(&mut rng, &[3, 2, 3, 3]);
    let b = random(&mut rng, &[3]);
    check(vec![x, w, b], |g, v| {
        g.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap()
    });
}

#[test]
fn conv2d_kernel_as_variable_cross_correlation() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, &[2, 6, 6]);
    let z = random(&mut rng, &[4, 4, 4]);
    check(vec![x, z], |g, v| {
        let k = g.reshape(v[1], &[2, 2, 4, 4]).unwrap();
        g.conv2d(v[0], k, None, 1, 0).unwrap()
    });
}

#[test]
fn conv_transpose2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[3, 3, 3]);
    let w = random(&mut rng, &[3, 2, 4, 4]);
    let b = random(&mut rng, &[2]);
    check(vec![x, w, b], |g, v| {
        let out = g.conv_transpose2d(v[0], v[1], Some(v[2]), 2).unwrap();
        assert_eq!(g.value(out).shape(), &[2, 8, 8]);
        out
    });
}

#[test]
fn max_pool() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&mut rng, &[2, 7, 7]);
    check(vec![x], |g, v| g.max_pool2d(v[0], 3, 2).unwrap());
}

#[test]
fn separable_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&mut rng, &[2, 4, 5]);
    let rows = Rc::new(random(&mut rng, &[6, 4]));
    let cols = Rc::new(random(&mut rng, &[3, 5]));
    check(vec![x], move |g, v| {
        g.separable(v[0], rows.clone(), cols.clone()).unwrap()
    });
}

#[test]
fn conv_transpose_matches_scatter_definition() {
    // out[o, i*s + a, j*s + b] += x[c, i, j] * w[c, o, a, b]
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&mut rng, &[2, 3, 4]);
    let w = random(&mut rng, &[2, 3, 3, 3]);
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let out = g.conv_transpose2d(xv, wv, None, 2).unwrap();
    let (oh, ow) = (2 * 2 + 3, 3 * 2 + 3);
    let mut want = vec![0.0; 3 * oh * ow];
    for c in 0..2 {
        for i in 0..3 {
            for j in 0..4 {
                for o in 0..3 {
                    for a in 0..3 {
                        for b in 0..3 {
                            want[(o * oh + i * 2 + a) * ow + j * 2 + b] += x.data()
                                [(c * 3 + i) * 4 + j]
                                * w.data()[((c * 3 + o) * 3 + a) * 3 + b];
                        }
                    }
                }
            }
        }
    }
    let got = g.value(out);
    assert_eq!(got.shape(), &[3, oh, ow]);
    for (a, b) in got.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_vec(vec![1.0, 2.0]));
    let b = g.param(Tensor::from_vec(vec![3.0, 4.0]));
    let m = g.mul(a, b).unwrap();
    let s = g.sum(m);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(a).is_none());
    assert_eq!(grads.get(b).unwrap().data(), &[1.0, 2.0]);
}

#[test]
fn shape_errors_are_reported() {
    let mut g = Graph::new();
    let a = g.param(Tensor::zeros(&[2, 3]));
    let b = g.param(Tensor::zeros(&[3, 2]));
    assert!(g.add(a, b).is_err());
    let x = g.param(Tensor::zeros(&[3, 5, 5]));
    let w = g.param(Tensor::zeros(&[4, 2, 3, 3]));
    assert!(g.conv2d(x, w, None, 1, 0).is_err());
    assert!(g.backward(a).is_err());
}
