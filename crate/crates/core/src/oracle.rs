//! Exact posterior by enumerating every switch path.
//!
//! Given a path the model is linear-Gaussian, so a Kalman filter plus RTS
//! smoother yields the path evidence and smoothed marginals. The exact
//! single-slice posterior is the evidence-weighted mixture over paths,
//! collapsed per switch state.

use nalgebra::{DMatrix, DVector};

use crate::cg::{collapse, kl, logsumexp, CgMoments};
use crate::error::{Error, Result};
use crate::gaussian::{cholesky, chol_log_det, symmetrize, GaussMoments};
use crate::model::{ObservationSequence, SldsModel};

/// Largest number of paths [`exact_beliefs`] will enumerate.
pub const MAX_PATHS: u128 = 1_000_000;

/// Smoothed marginals and evidence for one fixed switch path.
#[derive(Debug, Clone)]
pub struct PathPosterior {
    /// `log p(s_{0:T−1}) + log p(y | s)`.
    pub log_weight: f64,
    pub means: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
}

/// Kalman filter and RTS smoother along a fixed switch path.
pub fn kalman_smooth_path(
    model: &SldsModel,
    obs: &ObservationSequence,
    path: &[usize],
) -> Result<PathPosterior> {
    let len = obs.len();
    if path.len() != len {
        return Err(Error::DimensionMismatch {
            expected: len,
            found: path.len(),
        });
    }
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let mut log_weight = model.switch_prior[path[0]].ln();
    let mut filt_m: Vec<DVector<f64>> = Vec::with_capacity(len);
    let mut filt_p: Vec<DMatrix<f64>> = Vec::with_capacity(len);
    let mut pred_m: Vec<DVector<f64>> = Vec::with_capacity(len);
    let mut pred_p: Vec<DMatrix<f64>> = Vec::with_capacity(len);

    for t in 0..len {
        let j = path[t];
        let (m, p) = if t == 0 {
            (model.initial_mean[j].clone(), model.initial_cov[j].clone())
        } else {
            let i = path[t - 1];
            log_weight += model.switch_transition[(i, j)].ln();
            let a = model.a(i, j);
            (
                a * &filt_m[t - 1],
                symmetrize(&(a * &filt_p[t - 1] * a.transpose() + model.q(i, j))),
            )
        };
        let c = &model.emission[j];
        let s = symmetrize(&(c * &p * c.transpose() + &model.observation_noise[j]));
        let chol = cholesky(&s).ok_or(Error::SingularCovariance {
            eigenvalue: crate::gaussian::min_eigenvalue(&s),
        })?;
        let innov = &obs.0[t] - c * &m;
        let pct = &p * c.transpose();
        let gain = chol.solve(&pct.transpose()).transpose();
        log_weight += -0.5 * (innov.dot(&chol.solve(&innov)) + s.nrows() as f64 * ln2pi + chol_log_det(&chol));
        // Joseph form keeps the update symmetric positive definite.
        let ikc = DMatrix::identity(p.nrows(), p.nrows()) - &gain * c;
        let upd = symmetrize(
            &(&ikc * &p * ikc.transpose() + &gain * &model.observation_noise[j] * gain.transpose()),
        );
        filt_m.push(&m + &gain * innov);
        filt_p.push(upd);
        pred_m.push(m);
        pred_p.push(p);
    }

    let mut means = filt_m.clone();
    let mut covariances = filt_p.clone();
    for t in (0..len.saturating_sub(1)).rev() {
        let a = model.a(path[t], path[t + 1]);
        let chol = cholesky(&pred_p[t + 1]).ok_or(Error::SingularCovariance {
            eigenvalue: crate::gaussian::min_eigenvalue(&pred_p[t + 1]),
        })?;
        let gain = chol.solve(&(a * &filt_p[t])).transpose();
        means[t] = &filt_m[t] + &gain * (&means[t + 1] - &pred_m[t + 1]);
        covariances[t] = symmetrize(
            &(&filt_p[t] + &gain * (&covariances[t + 1] - &pred_p[t + 1]) * gain.transpose()),
        );
    }

    Ok(PathPosterior {
        log_weight,
        means,
        covariances,
    })
}

/// Order in which switch paths are visited. Results must not depend on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PathOrder {
    /// `s_0` is the most significant digit.
    #[default]
    Lexicographic,
    /// `s_{T−1}` is the most significant digit.
    Reversed,
}

#[derive(Debug, Clone)]
pub struct ExactPosterior {
    /// Collapsed exact posterior at each slice.
    pub beliefs: Vec<CgMoments>,
    pub log_likelihood: f64,
}

fn path_count(m: usize, len: usize) -> u128 {
    (m as u128).checked_pow(len as u32).unwrap_or(u128::MAX)
}

fn decode(mut index: u128, m: usize, len: usize, order: PathOrder) -> Vec<usize> {
    let mut path = vec![0; len];
    for k in (0..len).rev() {
        let slot = match order {
            PathOrder::Lexicographic => k,
            PathOrder::Reversed => len - 1 - k,
        };
        path[slot] = (index % m as u128) as usize;
        index /= m as u128;
    }
    path
}

pub fn exact_beliefs(model: &SldsModel, obs: &ObservationSequence) -> Result<ExactPosterior> {
    exact_beliefs_ordered(model, obs, PathOrder::default())
}

pub fn exact_beliefs_ordered(
    model: &SldsModel,
    obs: &ObservationSequence,
    order: PathOrder,
) -> Result<ExactPosterior> {
    model.validate()?;
    model.validate_observations(obs)?;
    let m = model.dims().switches;
    let len = obs.len();
    let paths = path_count(m, len);
    if paths > MAX_PATHS {
        return Err(Error::EnumerationGuard {
            paths,
            limit: MAX_PATHS,
        });
    }
    let mut mix: Vec<Vec<Vec<GaussMoments>>> = vec![vec![Vec::new(); m]; len];
    let mut log_weights = Vec::with_capacity(paths as usize);
    for index in 0..paths {
        let path = decode(index, m, len, order);
        let post = kalman_smooth_path(model, obs, &path)?;
        log_weights.push(post.log_weight);
        for (t, (mean, cov)) in post.means.into_iter().zip(post.covariances).enumerate() {
            mix[t][path[t]].push(GaussMoments {
                log_weight: post.log_weight,
                mean,
                covariance: cov,
            });
        }
    }
    let log_likelihood = logsumexp(log_weights);
    let beliefs = mix
        .iter()
        .map(|per_state| {
            let mut q = collapse(per_state)?;
            q.log_mass -= log_likelihood;
            Ok(q)
        })
        .collect::<Result<_>>()?;
    Ok(ExactPosterior {
        beliefs,
        log_likelihood,
    })
}

pub fn exact_log_likelihood(model: &SldsModel, obs: &ObservationSequence) -> Result<f64> {
    Ok(exact_beliefs(model, obs)?.log_likelihood)
}

/// `Σ_t KL(exact_t ‖ approx_t)`.
pub fn belief_kl_total(exact: &[CgMoments], approx: &[CgMoments]) -> Result<f64> {
    if exact.len() != approx.len() {
        return Err(Error::DimensionMismatch {
            expected: exact.len(),
            found: approx.len(),
        });
    }
    exact.iter().zip(approx).map(|(p, q)| kl(p, q)).sum()
}
