//! Finite-difference utilities for checking hand-written and reverse-mode
//! gradients. Nothing here touches the [`Graph`](crate::Graph).

use crate::Tensor;

/// Central-difference gradient of `f` at `x`.
pub fn numeric_gradient(x: &Tensor, eps: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    grad
}

/// Central-difference directional derivative of `f` at `x` along `dir`.
pub fn directional_derivative(
    x: &Tensor,
    dir: &Tensor,
    eps: f64,
    mut f: impl FnMut(&Tensor) -> f64,
) -> f64 {
    let step = |s: f64| {
        let data = x
            .data()
            .iter()
            .zip(dir.data())
            .map(|(a, d)| a + s * d)
            .collect();
        Tensor::new(x.shape(), data).expect("matching shapes")
    };
    (f(&step(eps)) - f(&step(-eps))) / (2.0 * eps)
}

/// `|a - b| / max(|a|, |b|, floor)` computed over whole vectors with the
/// Euclidean norm.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}
