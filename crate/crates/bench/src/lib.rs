//! Shared fixtures for the criterion benchmarks: deterministic random
//! tensors and a ready-made model so each bench measures only its kernel.

use adaseg_core::rngutil::derive_rng;
use adaseg_core::Tensor;
use rand::Rng;

/// A `[h, w, c]` tensor of uniform values in `[lo, hi)`, deterministic in the
/// label.
pub fn random_tensor(label: &str, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let mut rng = derive_rng(0xbe9c, label);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("valid shape")
}

/// A `[h, w, k]` probability map: positive entries normalized over the class
/// axis.
pub fn random_probmap(label: &str, h: usize, w: usize, k: usize) -> Tensor {
    let raw = random_tensor(label, &[h, w, k], 0.05, 1.0);
    let mut data = raw.data().to_vec();
    for px in 0..h * w {
        let s: f64 = data[px * k..(px + 1) * k].iter().sum();
        for v in &mut data[px * k..(px + 1) * k] {
            *v /= s;
        }
    }
    Tensor::new(vec![h, w, k], data).expect("valid shape")
}
