#![allow(dead_code)]

use droplin::linalg::Matrix;
use droplin::network::{random_init, Architecture, InputMoment, WeightStack};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_shape_simple_fn((rows, cols), || rng.sample::<f64, _>(StandardNormal))
}

pub fn gaussian_vec(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// `k` hidden layers, every width drawn from `1..=max_width`.
pub fn random_arch(k: usize, max_width: usize, rng: &mut impl Rng) -> Architecture {
    Architecture::new((0..k + 2).map(|_| rng.random_range(1..=max_width)).collect()).unwrap()
}

pub fn random_stack(arch: &Architecture, rng: &mut impl Rng) -> WeightStack {
    random_init(arch, 1.0, rng.random()).unwrap()
}

/// `A A^T / n + 0.1 I`, comfortably positive definite.
pub fn random_moment(n: usize, rng: &mut impl Rng) -> InputMoment {
    let a = gaussian(n, n, rng);
    let c = a.dot(&a.t()) / n as f64 + Matrix::eye(n) * 0.1;
    InputMoment::new(c).unwrap()
}

/// Identity or a random moment with equal odds.
pub fn random_moment_or_identity(n: usize, rng: &mut impl Rng) -> InputMoment {
    if rng.random_bool(0.5) {
        InputMoment::identity(n)
    } else {
        random_moment(n, rng)
    }
}

/// Haar-ish orthogonal matrix from Gram-Schmidt on a Gaussian matrix.
pub fn random_orthogonal(n: usize, rng: &mut impl Rng) -> Matrix {
    let mut q = gaussian(n, n, rng);
    for j in 0..n {
        for p in 0..j {
            let dot = q.column(j).dot(&q.column(p));
            let prev = q.column(p).to_owned();
            q.column_mut(j).scaled_add(-dot, &prev);
        }
        let norm = q.column(j).dot(&q.column(j)).sqrt();
        q.column_mut(j).mapv_inplace(|v| v / norm);
    }
    q
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}
