#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sgame::{uniform_design, Bounds, Data, Matrix, Params};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Single Gaussian regression y = b0 + bᵀx + N(0, var).
pub fn linear_truth(b0: f64, b: &[f64], var: f64) -> Params {
    let bounds = Bounds::new(1.0, 20.0, 1e-3, 1e3, 1).unwrap();
    let mut psi = Params::zeros(b.len(), 1, bounds);
    psi.experts.intercepts[(0, 0)] = b0;
    psi.experts.slopes[0].row_mut(0).copy_from_slice(b);
    psi.experts.covariances[0] = Matrix::from_diag(&[var]);
    psi
}

/// Two well-separated experts with x-dependent gates, q = 1.
pub fn two_expert_truth(p: usize, var: f64) -> Params {
    let bounds = Bounds::new(2.0, 6.0, 0.5 / var.max(0.5), 2.0 / var, 2).unwrap();
    let mut psi = Params::zeros(p, 1, bounds);
    psi.gating.intercepts[0] = 0.5;
    psi.gating.slopes[(0, 0)] = -1.0;
    psi.experts.intercepts[(0, 0)] = -2.0;
    psi.experts.intercepts[(1, 0)] = 2.0;
    psi.experts.slopes[0][(0, 0)] = 1.5;
    psi.experts.slopes[1][(0, 1.min(p - 1))] = -1.0;
    for k in 0..2 {
        psi.experts.covariances[k] = Matrix::from_diag(&[var]);
    }
    psi.check_bounds().unwrap();
    psi
}

pub fn simulate(psi: &Params, n: usize, seed: u64) -> Data {
    let mut r = rng(seed);
    let x = uniform_design(n, psi.p(), &mut r);
    Data::simulate(psi, x, &mut r).unwrap()
}

/// Least squares with intercept through the normal equations, via nalgebra.
pub fn ols(data: &Data, weights: Option<&[f64]>) -> Vec<f64> {
    let (n, p) = (data.n(), data.p());
    let mut xtx = nalgebra::DMatrix::<f64>::zeros(p + 1, p + 1);
    let mut xty = nalgebra::DVector::<f64>::zeros(p + 1);
    for i in 0..n {
        let w = weights.map_or(1.0, |w| w[i]);
        let row: Vec<f64> = std::iter::once(1.0).chain(data.x(i).iter().copied()).collect();
        for a in 0..=p {
            xty[a] += w * row[a] * data.y(i)[0];
            for b in 0..=p {
                xtx[(a, b)] += w * row[a] * row[b];
            }
        }
    }
    xtx.lu().solve(&xty).unwrap().iter().copied().collect()
}
