#![allow(dead_code)]

use calfat::data::{gen_synthetic, synthetic_means, ClientDataset, Dataset};
use calfat::nn::{mlp_shapes, Model};
use calfat::seed;
use rand::Rng;

/// Central difference of `f` at `x` along every coordinate.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, with 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn random_vec<R: Rng>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Random MLP `d -> hidden… -> c` keyed by `seed`.
pub fn random_mlp(seed_base: u64, dims: &[usize]) -> Model {
    let mut rng = seed::rng(seed_base, &[]);
    let mut m = Model::he_init(mlp_shapes(dims), &mut rng).unwrap();
    // non-zero biases exercise the bias gradients too
    for p in m.params_mut().iter_mut().filter(|p| **p == 0.0) {
        *p = rng.random_range(-0.1..0.1);
    }
    m
}

/// Small `classes`-way Gaussian dataset in `[0, 1]^dim`.
pub fn toy_dataset(classes: usize, dim: usize, per_class: usize, seed_base: u64) -> Dataset {
    let means = synthetic_means(classes, dim, 0.5, 0.2, seed_base);
    gen_synthetic(classes, dim, per_class, &means, 0.05, seed::derive(seed_base, &[1])).unwrap()
}

/// Exactly balanced client: `per_class` samples of every class.
pub fn balanced_client(id: usize, classes: usize, dim: usize, per_class: usize, seed_base: u64) -> ClientDataset {
    ClientDataset::from_dataset(id, toy_dataset(classes, dim, per_class, seed_base))
}

pub fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}
