//! Central finite-difference gradient checking.
//!
//! The checker only ever evaluates the forward function, so it is independent
//! of every backward rule it is used to verify.

use crate::tensor::Tensor;

/// Numerical gradient of `f` at `x` by central differences with step `h`.
pub fn numeric_gradient(x: &Tensor, h: f32, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        // The realised step can differ from 2h after f32 rounding.
        let step = (orig + h) as f64 - (orig - h) as f64;
        out.push(((plus - minus) / step) as f32);
    }
    Tensor::new(x.shape(), out).expect("same shape")
}

/// `||a - b|| / max(||a||, ||b||)` in the Euclidean norm; 0 when both vanish.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let norm = |t: &Tensor| t.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
