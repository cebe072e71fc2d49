//! Independent oracles shared by the integration and acceptance tests.
//!
//! Nothing here calls the filtering code under test: path likelihoods come
//! from the dense joint Gaussian of all latent and observed variables, and
//! small posteriors from brute-force quadrature.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use slds_ep::model::{ObservationSequence, SldsModel};

fn log_gauss(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let chol = cov.clone().cholesky().expect("covariance is SPD");
    let r = x - mean;
    let sol = chol.solve(&r);
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    -0.5 * (r.len() as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + r.dot(&sol))
}

/// Mean and covariance of the stacked `(z_0..z_{T−1}, y_0..y_{T−1})` along a
/// switch path, built from the linear map of the initial state and the noises.
pub fn joint_gaussian(
    model: &SldsModel,
    path: &[usize],
) -> (DVector<f64>, DMatrix<f64>) {
    let m = model.switch_prior.len();
    let n = model.initial_mean[0].len();
    let d = model.emission[0].nrows();
    let len = path.len();
    // sources: x_0, w_1..w_{T−1}, v_0..v_{T−1}
    let src = n * len + d * len;
    let mut src_cov = DMatrix::zeros(src, src);
    src_cov
        .view_mut((0, 0), (n, n))
        .copy_from(&model.initial_cov[path[0]]);
    for t in 1..len {
        let q = &model.dynamics_noise[path[t - 1] * m + path[t]];
        src_cov.view_mut((n * t, n * t), (n, n)).copy_from(q);
    }
    for t in 0..len {
        let o = n * len + d * t;
        src_cov
            .view_mut((o, o), (d, d))
            .copy_from(&model.observation_noise[path[t]]);
    }
    // z_t = A_t z_{t−1} + w_t, so each row block of z is a running product
    let mut g = DMatrix::zeros(n * len + d * len, src);
    g.view_mut((0, 0), (n, n)).copy_from(&DMatrix::identity(n, n));
    let mut mean = DVector::zeros(n * len + d * len);
    mean.rows_mut(0, n).copy_from(&model.initial_mean[path[0]]);
    for t in 1..len {
        let a = &model.dynamics[path[t - 1] * m + path[t]];
        let prev = g.view((n * (t - 1), 0), (n, src)).into_owned();
        g.view_mut((n * t, 0), (n, src)).copy_from(&(a * prev));
        g.view_mut((n * t, n * t), (n, n)).copy_from(&DMatrix::identity(n, n));
        let pm = mean.rows(n * (t - 1), n).into_owned();
        mean.rows_mut(n * t, n).copy_from(&(a * pm));
    }
    for t in 0..len {
        let c = &model.emission[path[t]];
        let zrow = g.view((n * t, 0), (n, src)).into_owned();
        let o = n * len + d * t;
        g.view_mut((o, 0), (d, src)).copy_from(&(c * zrow));
        g.view_mut((o, o), (d, d)).copy_from(&DMatrix::identity(d, d));
        let zm = mean.rows(n * t, n).into_owned();
        mean.rows_mut(o, d).copy_from(&(c * zm));
    }
    let cov = &g * src_cov * g.transpose();
    (mean, (&cov + cov.transpose()) * 0.5)
}

/// `log p(s = path) + log p(y | s = path)` from the dense joint Gaussian.
pub fn path_log_weight(model: &SldsModel, obs: &ObservationSequence, path: &[usize]) -> f64 {
    let n = model.initial_mean[0].len();
    let len = path.len();
    let (mean, cov) = joint_gaussian(model, path);
    let ny = cov.nrows() - n * len;
    let y = DVector::from_iterator(ny, obs.0.iter().flat_map(|v| v.iter().copied()));
    let my = mean.rows(n * len, ny).into_owned();
    let cy = cov.view((n * len, n * len), (ny, ny)).into_owned();
    let mut prior = model.switch_prior[path[0]].ln();
    for t in 1..len {
        prior += model.switch_transition[(path[t - 1], path[t])].ln();
    }
    prior + log_gauss(&y, &my, &cy)
}

/// Conditional mean and covariance of all latents given `y` along a path.
pub fn path_smoothed(
    model: &SldsModel,
    obs: &ObservationSequence,
    path: &[usize],
) -> (DVector<f64>, DMatrix<f64>) {
    let n = model.initial_mean[0].len();
    let len = path.len();
    let (mean, cov) = joint_gaussian(model, path);
    let nz = n * len;
    let ny = cov.nrows() - nz;
    let y = DVector::from_iterator(ny, obs.0.iter().flat_map(|v| v.iter().copied()));
    let czz = cov.view((0, 0), (nz, nz)).into_owned();
    let czy = cov.view((0, nz), (nz, ny)).into_owned();
    let cyy = cov.view((nz, nz), (ny, ny)).into_owned();
    let chol = cyy.cholesky().expect("SPD");
    let gain = chol.solve(&czy.transpose()).transpose();
    let m = mean.rows(0, nz) + &gain * (y - mean.rows(nz, ny));
    let c = czz - &gain * czy.transpose();
    (m, c)
}

/// Exact switch weight, conditional mean and variance per slice and state,
/// plus the log evidence, for a model with `N = 1` and `T = 2`, by
/// trapezoidal quadrature of the unnormalized density over `(z_0, z_1)`.
pub struct Quadrature {
    /// `[t][j] = (weight, mean, variance)`.
    pub slices: Vec<Vec<(f64, f64, f64)>>,
    pub log_likelihood: f64,
}

fn log_normal_1d(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (x - mean).powi(2) / var)
}

pub fn quadrature_posterior(model: &SldsModel, obs: &ObservationSequence) -> Quadrature {
    let m = model.switch_prior.len();
    assert_eq!(model.initial_mean[0].len(), 1, "scalar latent only");
    assert_eq!(obs.len(), 2, "two slices only");
    // log N(y_t; c z, R) = a + b z − ½ k z² expanded once per slice and state
    let emit: Vec<Vec<(f64, f64, f64)>> = (0..2)
        .map(|t| {
            (0..m)
                .map(|s| {
                    let c = model.emission[s].column(0).into_owned();
                    let r_inv = model.observation_noise[s].clone().try_inverse().expect("SPD");
                    let y = &obs.0[t];
                    let zero = DVector::zeros(y.len());
                    let a = log_gauss(y, &zero, &model.observation_noise[s]);
                    (a, (c.transpose() * &r_inv * y)[0], (c.transpose() * &r_inv * &c)[0])
                })
                .collect()
        })
        .collect();
    let log_density = |i: usize, j: usize, z0: f64, z1: f64| {
        let mut lp = model.switch_prior[i].ln() + model.switch_transition[(i, j)].ln();
        lp += log_normal_1d(z0, model.initial_mean[i][0], model.initial_cov[i][(0, 0)]);
        lp += log_normal_1d(
            z1,
            model.dynamics[i * m + j][(0, 0)] * z0,
            model.dynamics_noise[i * m + j][(0, 0)],
        );
        for (t, (s, z)) in [(i, z0), (j, z1)].into_iter().enumerate() {
            let (a, b, k) = emit[t][s];
            lp += a + b * z - 0.5 * k * z * z;
        }
        lp
    };
    // raw moments [mass, E z0, E z0², E z1, E z1²] per switch pair
    let integrate = |i: usize, j: usize, lo: [f64; 2], hi: [f64; 2], k: usize, shift: f64| {
        let h = [(hi[0] - lo[0]) / k as f64, (hi[1] - lo[1]) / k as f64];
        let mut acc = [0.0f64; 5];
        for a in 0..=k {
            let z0 = lo[0] + a as f64 * h[0];
            let wa = if a == 0 || a == k { 0.5 } else { 1.0 };
            for b in 0..=k {
                let z1 = lo[1] + b as f64 * h[1];
                let wb = if b == 0 || b == k { 0.5 } else { 1.0 };
                let p = wa * wb * (log_density(i, j, z0, z1) - shift).exp();
                acc[0] += p;
                acc[1] += p * z0;
                acc[2] += p * z0 * z0;
                acc[3] += p * z1;
                acc[4] += p * z1 * z1;
            }
        }
        acc.map(|v| v * h[0] * h[1])
    };
    let mut pairs = Vec::new();
    for i in 0..m {
        for j in 0..m {
            // locate the mass on a coarse wide grid, then zoom in twice
            let shift = (0..=400)
                .flat_map(|a| (0..=400).map(move |b| (a, b)))
                .map(|(a, b)| log_density(i, j, -60.0 + 0.3 * a as f64, -60.0 + 0.3 * b as f64))
                .fold(f64::NEG_INFINITY, f64::max);
            let (mut lo, mut hi) = ([-60.0; 2], [60.0; 2]);
            let mut c = integrate(i, j, lo, hi, 400, shift);
            for _ in 0..3 {
                for (k, o) in [(0, 1), (1, 3)] {
                    let mu = c[o] / c[0];
                    let sd = (c[o + 1] / c[0] - mu * mu).max(0.0).sqrt();
                    lo[k] = mu - 12.0 * sd;
                    hi[k] = mu + 12.0 * sd;
                }
                c = integrate(i, j, lo, hi, 600, shift);
            }
            pairs.push((i, j, c, shift));
        }
    }
    let top = pairs.iter().map(|p| p.3).fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = pairs.iter().map(|p| p.2[0] * (p.3 - top).exp()).sum();
    let mut slices = vec![vec![(0.0, 0.0, 0.0); m]; 2];
    let mut raw = vec![vec![[0.0f64; 3]; m]; 2];
    for (i, j, c, shift) in &pairs {
        let scale = (shift - top).exp() / total;
        for (t, s, k) in [(0, *i, 1), (1, *j, 3)] {
            raw[t][s][0] += c[0] * scale;
            raw[t][s][1] += c[k] * scale;
            raw[t][s][2] += c[k + 1] * scale;
        }
    }
    for t in 0..2 {
        for j in 0..m {
            let [w, s1, s2] = raw[t][j];
            let mean = s1 / w;
            slices[t][j] = (w, mean, s2 / w - mean * mean);
        }
    }
    Quadrature {
        slices,
        log_likelihood: top + total.ln(),
    }
}

/// Every switch path of length `len` over `m` states.
pub fn all_paths(m: usize, len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..m).map(move |j| {
                    let mut q = p.clone();
                    q.push(j);
                    q
                })
            })
            .collect();
    }
    out
}
