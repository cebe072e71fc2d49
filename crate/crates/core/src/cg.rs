//! The conditional Gaussian exponential family over a switch `s ∈ {0..M}` and
//! a continuous vector `z ∈ ℝᴺ`.
//!
//! Sufficient statistics are the state indicators, `1[s=j]·z` and
//! `1[s=j]·zzᵀ`. Canonical parameters ([`CgCanonical`]) are one Gaussian
//! potential per state; the link function maps them to expected sufficient
//! statistics ([`CgStats`]), and moment form ([`CgMoments`]) is the usual
//! weights/means/covariances parametrization of the same point.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::{cholesky, min_eigenvalue, symmetrize, GaussCanonical, GaussMoments, Sign};

/// Smallest state weight `link_inverse` accepts.
pub const MIN_STATE_WEIGHT: f64 = 1e-250;

pub(crate) fn logsumexp(values: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + values.into_iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Canonical parameters: one (possibly improper) Gaussian potential per state.
#[derive(Debug, Clone, PartialEq)]
pub struct CgCanonical {
    states: Vec<GaussCanonical>,
}

/// Moment form. State log-weights are normalized; `log_mass` keeps the total
/// mass of whatever was normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct CgMoments {
    pub log_mass: f64,
    pub states: Vec<GaussMoments>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateStats {
    /// `P(s = j)`
    pub mass: f64,
    /// `E[1[s=j] z]`
    pub first: DVector<f64>,
    /// `E[1[s=j] zzᵀ]`
    pub second: DMatrix<f64>,
}

/// Expected sufficient statistics of a normalized CG distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct CgStats {
    pub log_mass: f64,
    pub states: Vec<StateStats>,
}

impl CgCanonical {
    pub fn new(states: Vec<GaussCanonical>) -> Result<Self> {
        if let Some(first) = states.first() {
            let n = first.dim();
            if let Some(bad) = states.iter().find(|s| s.dim() != n) {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: bad.dim(),
                });
            }
        }
        Ok(Self { states })
    }

    /// All-zero canonical parameters, the constant message.
    pub fn unit(m: usize, n: usize) -> Self {
        Self {
            states: vec![GaussCanonical::unit(n); m],
        }
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, GaussCanonical::dim)
    }

    pub fn states(&self) -> &[GaussCanonical] {
        &self.states
    }

    pub fn state(&self, j: usize) -> &GaussCanonical {
        &self.states[j]
    }

    fn check_shape(&self, other: &Self) -> Result<()> {
        if self.num_states() != other.num_states() {
            return Err(Error::DimensionMismatch {
                expected: self.num_states(),
                found: other.num_states(),
            });
        }
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: other.dim(),
            });
        }
        Ok(())
    }

    /// `self + factor · other`, state by state.
    pub fn add_scaled(&self, other: &Self, factor: f64) -> Result<Self> {
        self.check_shape(other)?;
        let states = self
            .states
            .iter()
            .zip(&other.states)
            .map(|(a, b)| a.add_scaled(b, factor))
            .collect::<Result<_>>()?;
        Ok(Self { states })
    }

    pub fn combine(&self, other: &Self, sign: Sign) -> Result<Self> {
        self.add_scaled(other, match sign {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        })
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            states: self.states.iter().map(|s| s.scaled(factor)).collect(),
        }
    }

    /// `self + step · (target − self)`.
    pub fn lerp(&self, target: &Self, step: f64) -> Result<Self> {
        Ok(self.scaled(1.0 - step).add_scaled(target, step)?)
    }

    /// Moment form of the normalized distribution. Fails if any state is
    /// improper.
    pub fn to_moments(&self) -> Result<CgMoments> {
        let mut states = Vec::with_capacity(self.states.len());
        for (j, s) in self.states.iter().enumerate() {
            let m = s.to_moments().map_err(|e| match e {
                Error::ImproperPotential { eigenvalue, .. } => Error::ImproperPotential {
                    eigenvalue,
                    state: Some(j),
                },
                other => other,
            })?;
            states.push(m);
        }
        let log_mass = logsumexp(states.iter().map(|s| s.log_weight));
        for s in &mut states {
            s.log_weight -= log_mass;
        }
        Ok(CgMoments { log_mass, states })
    }

    /// Log of the total mass `log Σ_j ∫ exp(γ_jᵀ f)`.
    pub fn log_partition(&self) -> Result<f64> {
        let mut masses = Vec::with_capacity(self.states.len());
        for (j, s) in self.states.iter().enumerate() {
            masses.push(s.log_mass().map_err(|e| match e {
                Error::ImproperPotential { eigenvalue, .. } => Error::ImproperPotential {
                    eigenvalue,
                    state: Some(j),
                },
                other => other,
            })?);
        }
        Ok(logsumexp(masses))
    }

    /// Largest absolute difference of canonical parameters, relative to the
    /// parameter magnitude (floored at 1).
    pub fn max_relative_difference(&self, other: &Self) -> f64 {
        let mut worst: f64 = 0.0;
        for (a, b) in self.states.iter().zip(&other.states) {
            let rel = |x: f64, y: f64| (x - y).abs() / x.abs().max(y.abs()).max(1.0);
            worst = worst.max(rel(a.scale(), b.scale()));
            for (x, y) in a.shift().iter().zip(b.shift().iter()) {
                worst = worst.max(rel(*x, *y));
            }
            for (x, y) in a.precision().iter().zip(b.precision().iter()) {
                worst = worst.max(rel(*x, *y));
            }
        }
        worst
    }
}

impl CgMoments {
    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, GaussMoments::dim)
    }

    pub fn weight(&self, j: usize) -> f64 {
        self.states[j].log_weight.exp()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.log_weight.exp()).collect()
    }

    /// Canonical parameters of the normalized distribution (`log_mass` is
    /// dropped). This is the inverse link.
    pub fn to_canonical(&self) -> Result<CgCanonical> {
        let mut states = Vec::with_capacity(self.states.len());
        for (j, s) in self.states.iter().enumerate() {
            if !(s.log_weight >= MIN_STATE_WEIGHT.ln()) {
                return Err(Error::WeightUnderflow {
                    state: j,
                    log_weight: s.log_weight,
                });
            }
            states.push(s.to_canonical()?);
        }
        Ok(CgCanonical { states })
    }

    pub fn to_stats(&self) -> CgStats {
        let states = self
            .states
            .iter()
            .map(|s| {
                let p = s.log_weight.exp();
                StateStats {
                    mass: p,
                    first: &s.mean * p,
                    second: (&s.covariance + &s.mean * s.mean.transpose()) * p,
                }
            })
            .collect();
        CgStats {
            log_mass: self.log_mass,
            states,
        }
    }

    /// Check the moment-form invariants: normalized weights, SPD covariances.
    pub fn validate(&self) -> Result<()> {
        let total: f64 = self.weights().iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidModel(format!(
                "belief weights sum to {total}"
            )));
        }
        for s in &self.states {
            if cholesky(&s.covariance).is_none() {
                return Err(Error::SingularCovariance {
                    eigenvalue: min_eigenvalue(&s.covariance),
                });
            }
        }
        Ok(())
    }

    /// Largest absolute difference over weights, means and covariances.
    pub fn max_abs_difference(&self, other: &Self) -> f64 {
        let mut worst: f64 = 0.0;
        for (a, b) in self.states.iter().zip(&other.states) {
            worst = worst.max((a.log_weight.exp() - b.log_weight.exp()).abs());
            worst = worst.max((&a.mean - &b.mean).amax());
            worst = worst.max((&a.covariance - &b.covariance).amax());
        }
        worst
    }
}

impl CgStats {
    /// Recover moment form; fails when a state's implied covariance is not
    /// positive definite.
    pub fn to_moments(&self) -> Result<CgMoments> {
        let total: f64 = self.states.iter().map(|s| s.mass).sum();
        let mut states = Vec::with_capacity(self.states.len());
        for (j, s) in self.states.iter().enumerate() {
            if !(s.mass > 0.0) {
                return Err(Error::WeightUnderflow {
                    state: j,
                    log_weight: f64::NEG_INFINITY,
                });
            }
            let mean = &s.first / s.mass;
            let cov = symmetrize(&(&s.second / s.mass - &mean * mean.transpose()));
            if cholesky(&cov).is_none() {
                return Err(Error::SingularCovariance {
                    eigenvalue: min_eigenvalue(&cov),
                });
            }
            states.push(GaussMoments {
                log_weight: (s.mass / total).ln(),
                mean,
                covariance: cov,
            });
        }
        Ok(CgMoments {
            log_mass: self.log_mass + total.ln(),
            states,
        })
    }

    /// `(1 − w)·self + w·other`, the statistics of a mixture.
    pub fn blend(&self, other: &Self, w: f64) -> Self {
        let states = self
            .states
            .iter()
            .zip(&other.states)
            .map(|(a, b)| StateStats {
                mass: (1.0 - w) * a.mass + w * b.mass,
                first: &a.first * (1.0 - w) + &b.first * w,
                second: &a.second * (1.0 - w) + &b.second * w,
            })
            .collect();
        Self {
            log_mass: (1.0 - w) * self.log_mass + w * other.log_mass,
            states,
        }
    }

    /// Sup-norm distance between statistics.
    pub fn max_abs_difference(&self, other: &Self) -> f64 {
        let mut worst: f64 = 0.0;
        for (a, b) in self.states.iter().zip(&other.states) {
            worst = worst.max((a.mass - b.mass).abs());
            worst = worst.max((&a.first - &b.first).amax());
            worst = worst.max((&a.second - &b.second).amax());
        }
        worst
    }
}

/// The link function: canonical parameters to expected sufficient statistics.
pub fn link(c: &CgCanonical) -> Result<CgStats> {
    Ok(c.to_moments()?.to_stats())
}

/// Inverse link: expected sufficient statistics to normalized canonical
/// parameters.
pub fn link_inverse(stats: &CgStats) -> Result<CgCanonical> {
    let mut m = stats.to_moments()?;
    m.log_mass = 0.0;
    m.to_canonical()
}

/// KL projection of per-state Gaussian mixtures onto the CG family.
///
/// `mix[j]` lists the weighted components (log weight, mean, covariance) that
/// belong to switch state `j`. Weights are unnormalized; their total is
/// returned as `log_mass`.
pub fn collapse(mix: &[Vec<GaussMoments>]) -> Result<CgMoments> {
    let mut states = Vec::with_capacity(mix.len());
    for (j, comps) in mix.iter().enumerate() {
        let lse = logsumexp(comps.iter().map(|c| c.log_weight));
        if !(lse > f64::NEG_INFINITY) {
            return Err(Error::StateVanished { state: j });
        }
        let n = comps[0].dim();
        let rel: Vec<f64> = comps.iter().map(|c| (c.log_weight - lse).exp()).collect();
        let mut mean = DVector::zeros(n);
        for (r, c) in rel.iter().zip(comps) {
            mean += &c.mean * *r;
        }
        let mut cov = DMatrix::zeros(n, n);
        for (r, c) in rel.iter().zip(comps) {
            let d = &c.mean - &mean;
            cov += (&c.covariance + &d * d.transpose()) * *r;
        }
        let cov = symmetrize(&cov);
        if cholesky(&cov).is_none() {
            return Err(Error::SingularCovariance {
                eigenvalue: min_eigenvalue(&cov),
            });
        }
        states.push(GaussMoments {
            log_weight: lse,
            mean,
            covariance: cov,
        });
    }
    let log_mass = logsumexp(states.iter().map(|s| s.log_weight));
    for s in &mut states {
        s.log_weight -= log_mass;
    }
    Ok(CgMoments { log_mass, states })
}

/// Divide a belief by a message (per-state canonical subtraction). The result
/// may be improper.
pub fn divide(q: &CgCanonical, msg: &CgCanonical) -> Result<CgCanonical> {
    q.combine(msg, Sign::Minus)
}

/// `KL(p ‖ q)` between two CG distributions in moment form.
///
/// Returns `+∞` when `q` puts zero weight on a state that `p` does not.
pub fn kl(p: &CgMoments, q: &CgMoments) -> Result<f64> {
    if p.num_states() != q.num_states() {
        return Err(Error::DimensionMismatch {
            expected: p.num_states(),
            found: q.num_states(),
        });
    }
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            found: q.dim(),
        });
    }
    let n = p.dim() as f64;
    let mut total = 0.0;
    for (a, b) in p.states.iter().zip(&q.states) {
        let pj = a.log_weight.exp();
        if pj == 0.0 {
            continue;
        }
        if b.log_weight == f64::NEG_INFINITY {
            return Ok(f64::INFINITY);
        }
        let chol_w = cholesky(&b.covariance).ok_or_else(|| Error::SingularCovariance {
            eigenvalue: min_eigenvalue(&b.covariance),
        })?;
        let chol_v = cholesky(&a.covariance).ok_or_else(|| Error::SingularCovariance {
            eigenvalue: min_eigenvalue(&a.covariance),
        })?;
        let trace = chol_w.solve(&a.covariance).trace();
        let d = &a.mean - &b.mean;
        let maha = d.dot(&chol_w.solve(&d));
        let log_det_w = crate::gaussian::chol_log_det(&chol_w);
        let log_det_v = crate::gaussian::chol_log_det(&chol_v);
        let gauss = 0.5 * (trace + maha - n + log_det_w - log_det_v);
        total += pj * (a.log_weight - b.log_weight + gauss);
    }
    Ok(total.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;
    use std::f64::consts::PI;

    fn gm(lw: f64, m: f64, v: f64) -> GaussMoments {
        GaussMoments::new(lw, dvector![m], dmatrix![v]).unwrap()
    }

    fn cg1(states: &[(f64, f64, f64)]) -> CgCanonical {
        CgCanonical::new(
            states
                .iter()
                .map(|&(g, h, k)| GaussCanonical::new(g, dvector![h], dmatrix![k]).unwrap())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn link_of_standard_normal() {
        let s = link(&cg1(&[(0.0, 0.0, 1.0)])).unwrap();
        assert_relative_eq!(s.states[0].mass, 1.0);
        assert_relative_eq!(s.states[0].first[0], 0.0);
        assert_relative_eq!(s.states[0].second[(0, 0)], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn link_of_shifted_normal() {
        let s = link(&cg1(&[(0.0, 2.0, 2.0)])).unwrap();
        assert_relative_eq!(s.states[0].mass, 1.0);
        assert_relative_eq!(s.states[0].first[0], 1.0, epsilon = 1e-15);
        assert_relative_eq!(s.states[0].second[(0, 0)], 1.5, epsilon = 1e-15);
    }

    #[test]
    fn link_matches_quadrature_for_two_states() {
        let c = cg1(&[(0.3, 1.0, 2.0), (-0.2, -0.5, 0.7)]);
        let s = link(&c).unwrap();
        let h = 1e-3;
        let mut raw = [[0.0; 3]; 2];
        for (j, st) in c.states().iter().enumerate() {
            for k in -20000..=20000 {
                let z = k as f64 * h;
                let d = st.log_value(&dvector![z]).exp() * h;
                raw[j][0] += d;
                raw[j][1] += d * z;
                raw[j][2] += d * z * z;
            }
        }
        let total = raw[0][0] + raw[1][0];
        for j in 0..2 {
            assert!((s.states[j].mass - raw[j][0] / total).abs() < 1e-8);
            assert!((s.states[j].first[0] - raw[j][1] / total).abs() < 1e-8);
            assert!((s.states[j].second[(0, 0)] - raw[j][2] / total).abs() < 1e-8);
        }
        assert!((s.log_mass - total.ln()).abs() < 1e-8);
    }

    #[test]
    fn improper_state_is_named() {
        let c = cg1(&[(0.0, 0.0, 1.0), (0.0, 0.0, -0.5)]);
        assert!(matches!(
            link(&c),
            Err(Error::ImproperPotential { state: Some(1), .. })
        ));
    }

    #[test]
    fn inverse_link_of_standard_normal() {
        let stats = CgStats {
            log_mass: 0.0,
            states: vec![StateStats {
                mass: 1.0,
                first: dvector![0.0],
                second: dmatrix![1.0],
            }],
        };
        let c = link_inverse(&stats).unwrap();
        assert_relative_eq!(c.state(0).scale(), -0.5 * (2.0 * PI).ln(), epsilon = 1e-15);
        assert_relative_eq!(c.state(0).shift()[0], 0.0);
        assert_relative_eq!(c.state(0).precision()[(0, 0)], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn tiny_weight_underflows() {
        let m = CgMoments {
            log_mass: 0.0,
            states: vec![gm(0.0, 0.0, 1.0), gm((1e-300f64).ln(), 0.0, 1.0)],
        };
        assert!(matches!(
            m.to_canonical(),
            Err(Error::WeightUnderflow { state: 1, .. })
        ));
    }

    #[test]
    fn single_component_collapse_is_identity() {
        let mix = vec![vec![gm(0.2f64.ln(), 1.0, 2.0)], vec![gm(0.8f64.ln(), -1.0, 0.5)]];
        let q = collapse(&mix).unwrap();
        assert_relative_eq!(q.weight(0), 0.2, epsilon = 1e-15);
        assert_relative_eq!(q.states[1].mean[0], -1.0);
        assert_relative_eq!(q.states[1].covariance[(0, 0)], 0.5);
        assert_relative_eq!(q.log_mass, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn two_component_collapse_matches_monte_carlo() {
        let q = collapse(&[vec![gm(0.5f64.ln(), 0.0, 1.0), gm(0.5f64.ln(), 2.0, 1.0)]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 1_000_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let centre = if rng.random::<bool>() { 2.0 } else { 0.0 };
            let z: f64 = centre + rng.sample::<f64, _>(StandardNormal);
            s1 += z;
            s2 += z * z;
        }
        let mean = s1 / n as f64;
        let var = s2 / n as f64 - mean * mean;
        // mixture variance 2, fourth central moment 3·1 + 6·1 + 1 = 10 → var of sample var ≈ (10 − 4)/n
        let se_mean = (2.0 / n as f64).sqrt();
        let se_var = (6.0 / n as f64).sqrt();
        assert!((q.states[0].mean[0] - mean).abs() < 3.0 * se_mean);
        assert!((q.states[0].covariance[(0, 0)] - var).abs() < 3.0 * se_var);
        assert_relative_eq!(q.states[0].mean[0], 1.0, epsilon = 1e-15);
        assert_relative_eq!(q.states[0].covariance[(0, 0)], 2.0, epsilon = 1e-15);
    }

    #[test]
    fn identical_components_collapse_to_themselves() {
        let q = collapse(&[
            vec![gm(0.3f64.ln(), 0.5, 1.5), gm(0.7f64.ln(), 0.5, 1.5)],
            vec![gm(1.0f64.ln(), 0.0, 1.0)],
        ])
        .unwrap();
        assert_relative_eq!(q.states[0].mean[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(q.states[0].covariance[(0, 0)], 1.5, epsilon = 1e-15);
        assert_relative_eq!(q.weight(0), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn empty_state_vanishes() {
        let mix = vec![vec![gm(0.0, 0.0, 1.0)], vec![gm(f64::NEG_INFINITY, 0.0, 1.0)]];
        assert!(matches!(collapse(&mix), Err(Error::StateVanished { state: 1 })));
        let mix = vec![vec![gm(0.0, 0.0, 1.0)], vec![]];
        assert!(matches!(collapse(&mix), Err(Error::StateVanished { state: 1 })));
    }

    #[test]
    fn dividing_by_unit_is_identity() {
        let q = cg1(&[(0.1, 0.3, 2.0), (0.0, -1.0, 1.0)]);
        assert_eq!(divide(&q, &CgCanonical::unit(2, 1)).unwrap(), q);
    }

    #[test]
    fn division_cancels_product() {
        let a = cg1(&[(0.1, 0.3, 2.0), (0.0, -1.0, 1.0)]);
        let b = cg1(&[(0.5, 0.1, 0.5), (-2.0, 4.0, -1.0)]);
        let back = divide(&a.combine(&b, Sign::Plus).unwrap(), &b).unwrap();
        assert!(back.max_relative_difference(&a) < 1e-15);
    }

    #[test]
    fn improper_quotient_is_allowed() {
        let q = cg1(&[(0.0, 0.0, 1.0)]);
        let msg = cg1(&[(0.0, 0.0, 1.5)]);
        let alpha = divide(&q, &msg).unwrap();
        assert_relative_eq!(alpha.state(0).precision()[(0, 0)], -0.5);
    }

    #[test]
    fn kl_of_identical_is_zero() {
        let p = CgMoments {
            log_mass: 0.0,
            states: vec![gm(0.4f64.ln(), 1.0, 2.0), gm(0.6f64.ln(), -1.0, 0.3)],
        };
        assert!(kl(&p, &p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn kl_reduces_to_discrete() {
        let p = CgMoments {
            log_mass: 0.0,
            states: vec![gm(0.5f64.ln(), 0.0, 1.0), gm(0.5f64.ln(), 0.0, 1.0)],
        };
        let q = CgMoments {
            log_mass: 0.0,
            states: vec![gm(0.25f64.ln(), 0.0, 1.0), gm(0.75f64.ln(), 0.0, 1.0)],
        };
        let expected = 0.5 * 2.0f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert_relative_eq!(kl(&p, &q).unwrap(), expected, epsilon = 1e-15);
        assert_relative_eq!(expected, 0.1438, epsilon = 1e-4);
    }

    #[test]
    fn kl_between_gaussians() {
        let p = CgMoments { log_mass: 0.0, states: vec![gm(0.0, 0.0, 1.0)] };
        let q = CgMoments { log_mass: 0.0, states: vec![gm(0.0, 1.0, 2.0)] };
        assert_relative_eq!(kl(&p, &q).unwrap(), 0.5 * 2.0f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn kl_infinite_on_missing_support() {
        let p = CgMoments {
            log_mass: 0.0,
            states: vec![gm(0.5f64.ln(), 0.0, 1.0), gm(0.5f64.ln(), 0.0, 1.0)],
        };
        let q = CgMoments {
            log_mass: 0.0,
            states: vec![gm(0.0, 0.0, 1.0), gm(f64::NEG_INFINITY, 0.0, 1.0)],
        };
        assert_eq!(kl(&p, &q).unwrap(), f64::INFINITY);
    }

    /// `−E_mix[log q]` by quadrature over each state's 1-D mixture density.
    fn cross_entropy_by_quadrature(mix: &[Vec<GaussMoments>], q: &CgMoments) -> f64 {
        let total = logsumexp(mix.iter().flatten().map(|c| c.log_weight));
        let h = 2e-3;
        let mut ce = 0.0;
        for (j, comps) in mix.iter().enumerate() {
            let qs = &q.states[j];
            let (mq, vq) = (qs.mean[0], qs.covariance[(0, 0)]);
            for k in -15000..=15000 {
                let z = k as f64 * h;
                let dens: f64 = comps
                    .iter()
                    .map(|c| {
                        let (m, v) = (c.mean[0], c.covariance[(0, 0)]);
                        (c.log_weight - total - 0.5 * (2.0 * PI * v).ln()
                            - 0.5 * (z - m).powi(2) / v)
                            .exp()
                    })
                    .sum();
                let log_q = qs.log_weight - 0.5 * (2.0 * PI * vq).ln() - 0.5 * (z - mq).powi(2) / vq;
                ce -= dens * log_q * h;
            }
        }
        ce
    }

    #[test]
    fn collapse_is_a_local_kl_minimizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..3 {
            let mix: Vec<Vec<GaussMoments>> = (0..2)
                .map(|_| {
                    (0..3)
                        .map(|_| {
                            gm(
                                rng.random_range(-1.0..0.0),
                                rng.random_range(-2.0..2.0),
                                rng.random_range(0.3..1.5),
                            )
                        })
                        .collect()
                })
                .collect();
            let q = collapse(&mix).unwrap();
            let best = cross_entropy_by_quadrature(&mix, &q);
            for _ in 0..100 {
                let mut pert = q.clone();
                let dw: f64 = 1e-2 * rng.sample::<f64, _>(StandardNormal);
                pert.states[0].log_weight = (q.weight(0) + dw).clamp(1e-6, 1.0 - 1e-6).ln();
                pert.states[1].log_weight = (1.0 - pert.states[0].log_weight.exp()).ln();
                for s in &mut pert.states {
                    s.mean[0] += 1e-2 * rng.sample::<f64, _>(StandardNormal);
                    s.covariance[(0, 0)] *= 1.0 + 1e-2 * rng.sample::<f64, _>(StandardNormal);
                }
                assert!(cross_entropy_by_quadrature(&mix, &pert) >= best - 1e-12);
            }
        }
    }

    fn proper_moments(m: usize, n: usize) -> impl Strategy<Value = CgMoments> {
        proptest::collection::vec(
            (
                0.05..1.0f64,
                proptest::collection::vec(-3.0..3.0f64, n),
                proptest::collection::vec(-1.0..1.0f64, n * n),
            ),
            m,
        )
        .prop_map(move |states| {
            let total: f64 = states.iter().map(|s| s.0).sum();
            CgMoments {
                log_mass: 0.0,
                states: states
                    .into_iter()
                    .map(|(w, mean, l)| {
                        let l = DMatrix::from_vec(n, n, l);
                        GaussMoments::new(
                            (w / total).ln(),
                            DVector::from_vec(mean),
                            &l * l.transpose() + DMatrix::identity(n, n) * 0.2,
                        )
                        .unwrap()
                    })
                    .collect(),
            }
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn link_round_trip(m in proper_moments(3, 2)) {
            let stats = m.to_stats();
            let back = link(&link_inverse(&stats).unwrap()).unwrap();
            let scale = stats.states.iter().map(|s| s.second.amax().max(s.first.amax())).fold(1.0, f64::max);
            prop_assert!(back.max_abs_difference(&stats) <= 1e-9 * scale);
        }
    }

    proptest! {
        #[test]
        fn collapse_conserves_mass(
            comps in proptest::collection::vec((-5.0..2.0f64, -2.0..2.0f64, 0.1..2.0f64), 2..6)
        ) {
            let mix: Vec<Vec<GaussMoments>> = vec![
                comps.iter().step_by(2).map(|&(w, m, v)| gm(w, m, v)).collect(),
                comps.iter().skip(1).step_by(2).map(|&(w, m, v)| gm(w, m, v)).collect(),
            ];
            let q = collapse(&mix).unwrap();
            let total: f64 = comps.iter().map(|c| c.0.exp()).sum();
            let out: f64 = q.weights().iter().sum::<f64>() * q.log_mass.exp();
            prop_assert!((out - total).abs() <= 1e-10 * total);
        }

        #[test]
        fn kl_is_nonnegative(p in proper_moments(2, 2), q in proper_moments(2, 2)) {
            let d = kl(&p, &q).unwrap();
            prop_assert!(d >= 0.0);
            prop_assert!(kl(&p, &p).unwrap() < 1e-12);
        }
    }
}
