//! Independent numerics for checking the DMD path.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;

pub fn eig_oracle(rows: &[Vec<f64>]) -> Vec<Complex64> {
    let n = rows.len();
    let m = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
    m.complex_eigenvalues().iter().copied().collect()
}

/// Largest distance in a greedy nearest-neighbour pairing, or infinity on
/// a length mismatch.
pub fn multiset_distance(expected: &[Complex64], got: &[Complex64]) -> f64 {
    if expected.len() != got.len() {
        return f64::INFINITY;
    }
    let mut used = vec![false; got.len()];
    let mut worst: f64 = 0.0;
    for e in expected {
        let (j, d) = got
            .iter()
            .enumerate()
            .filter(|(j, _)| !used[*j])
            .map(|(j, g)| (j, (g - e).norm()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        used[j] = true;
        worst = worst.max(d);
    }
    worst
}

pub fn mat_vec(rows: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    rows.iter().map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

pub fn trajectory(rows: &[Vec<f64>], x0: Vec<f64>, m: usize) -> Vec<Vec<f64>> {
    let mut out = vec![x0];
    while out.len() < m {
        let next = mat_vec(rows, out.last().unwrap());
        out.push(next);
    }
    out
}

/// `V D V⁻¹` with D holding well separated real eigenvalues and 2×2
/// rotation-scaling blocks, V a perturbed identity.
pub fn random_diagonalizable<R: Rng>(rng: &mut R, n: usize) -> Vec<Vec<f64>> {
    let mut d = DMatrix::<f64>::zeros(n, n);
    let mut i = 0;
    let mut used: Vec<f64> = Vec::new();
    let mut fresh_modulus = |rng: &mut R| loop {
        let r = rng.gen_range(0.5..1.2);
        if used.iter().all(|u| (u - r).abs() > 0.08) {
            used.push(r);
            return r;
        }
    };
    while i < n {
        if i + 1 < n && rng.gen_bool(0.4) {
            let r = fresh_modulus(rng);
            let th = rng.gen_range(0.3..2.5);
            let (a, b) = (r * f64::cos(th), r * f64::sin(th));
            d[(i, i)] = a;
            d[(i, i + 1)] = -b;
            d[(i + 1, i)] = b;
            d[(i + 1, i + 1)] = a;
            i += 2;
        } else {
            let r = fresh_modulus(rng);
            d[(i, i)] = if rng.gen_bool(0.2) { -r } else { r };
            i += 1;
        }
    }
    let v = DMatrix::<f64>::identity(n, n) + DMatrix::from_fn(n, n, |_, _| rng.gen_range(-0.3..0.3));
    let a = &v * d * v.try_inverse().expect("perturbed identity is invertible");
    (0..n).map(|i| (0..n).map(|j| a[(i, j)]).collect()).collect()
}

pub fn random_vector<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(0.5..1.5) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect()
}

/// 3-point diffusion update `I + μ tridiag(1, −2, 1)`.
pub fn diffusion_matrix(n: usize, mu: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| match i.abs_diff(j) {
                    0 => 1.0 - 2.0 * mu,
                    1 => mu,
                    _ => 0.0,
                })
                .collect()
        })
        .collect()
}
