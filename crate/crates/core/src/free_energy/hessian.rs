//! Numerical Hessians of the saddle objective around a fixed point.
//!
//! Coordinates are the flat canonical coordinates of every `γ_t` and `δ_t`
//! with the scale of switch state 0 dropped per slice: a common shift of all
//! scales of `γ_t` or `δ_t` leaves `F` unchanged, so keeping it would add an
//! exact zero eigenvalue.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::{coordinate_len, evaluate_dual, flatten, grad_delta, grad_gamma, saddle_residual, unflatten, SaddleState};
use crate::engine::Chain;
use crate::error::{Error, Result};
use crate::gaussian::symmetrize;

/// Largest constraint residual accepted as a fixed point.
pub const FIXED_POINT_LIMIT: f64 = 1e-6;
/// Tolerance on the smallest eigenvalue of `H*` for the local-minimum flag.
pub const MINIMUM_TOL: f64 = 1e-6;
pub const DEFAULT_STEP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct HessianReport {
    /// Ascending eigenvalues.
    pub gamma_gamma: Vec<f64>,
    pub delta_delta: Vec<f64>,
    /// `H* = H_γγ − H_γδ H_δδ⁻¹ H_δγ`.
    pub schur: Vec<f64>,
    /// `H_γγ ≻ 0` and `H_δδ ≺ 0`.
    pub descent_ascent_stable: bool,
    /// `H* ⪰ −MINIMUM_TOL`.
    pub local_minimum: bool,
}

impl HessianReport {
    pub fn max_delta_delta(&self) -> f64 {
        self.delta_delta.last().copied().unwrap_or(f64::NEG_INFINITY)
    }

    pub fn min_schur(&self) -> f64 {
        self.schur.first().copied().unwrap_or(f64::INFINITY)
    }
}

fn sorted_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    if m.is_empty() {
        return Vec::new();
    }
    let mut ev: Vec<f64> = SymmetricEigen::new(symmetrize(m)).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Eigenvalues and classification from the three Hessian blocks.
pub fn hessian_report(
    h_gg: &DMatrix<f64>,
    h_gd: &DMatrix<f64>,
    h_dd: &DMatrix<f64>,
) -> Result<HessianReport> {
    let h_dd = symmetrize(h_dd);
    let schur = if h_dd.is_empty() {
        symmetrize(h_gg)
    } else {
        let inv = h_dd
            .clone()
            .try_inverse()
            .ok_or(Error::SingularCovariance { eigenvalue: 0.0 })?;
        symmetrize(&(h_gg - h_gd * inv * h_gd.transpose()))
    };
    let gamma_gamma = sorted_eigenvalues(h_gg);
    let delta_delta = sorted_eigenvalues(&h_dd);
    let schur = sorted_eigenvalues(&schur);
    let descent_ascent_stable = gamma_gamma.first().is_none_or(|&v| v > 0.0)
        && delta_delta.last().is_none_or(|&v| v < 0.0);
    let local_minimum = schur.first().is_none_or(|&v| v >= -MINIMUM_TOL);
    Ok(HessianReport {
        gamma_gamma,
        delta_delta,
        schur,
        descent_ascent_stable,
        local_minimum,
    })
}

/// Central second differences of a scalar function, Richardson-extrapolated
/// once.
fn second_differences(f: &dyn Fn(&DVector<f64>) -> f64, x: &DVector<f64>, h: f64) -> DMatrix<f64> {
    let n = x.len();
    let at = |h: f64| {
        let mut out = DMatrix::zeros(n, n);
        let fx = f(x);
        for i in 0..n {
            for j in i..n {
                let eval = |si: f64, sj: f64| {
                    let mut y = x.clone();
                    y[i] += si;
                    y[j] += sj;
                    f(&y)
                };
                let v = if i == j {
                    (eval(h, 0.0) - 2.0 * fx + eval(-h, 0.0)) / (h * h)
                } else {
                    (eval(h, h) - eval(h, -h) - eval(-h, h) + eval(-h, -h)) / (4.0 * h * h)
                };
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        out
    };
    (at(h / 2.0) * 4.0 - at(h)) / 3.0
}

/// Hessian blocks of a function of `(γ, δ)` given as plain vectors.
pub fn toy_hessian_blocks(
    f: impl Fn(&DVector<f64>, &DVector<f64>) -> f64,
    gamma: &DVector<f64>,
    delta: &DVector<f64>,
    step: f64,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let (ng, nd) = (gamma.len(), delta.len());
    let mut x = DVector::zeros(ng + nd);
    x.rows_mut(0, ng).copy_from(gamma);
    x.rows_mut(ng, nd).copy_from(delta);
    let joint = |z: &DVector<f64>| f(&z.rows(0, ng).into_owned(), &z.rows(ng, nd).into_owned());
    let h = second_differences(&joint, &x, step);
    (
        h.view((0, 0), (ng, ng)).into_owned(),
        h.view((0, ng), (ng, nd)).into_owned(),
        h.view((ng, ng), (nd, nd)).into_owned(),
    )
}

struct Reduced {
    switches: usize,
    latent: usize,
    slices: usize,
}

impl Reduced {
    fn per_slice(&self) -> usize {
        coordinate_len(self.switches, self.latent) - 1
    }

    fn half(&self) -> usize {
        self.slices * self.per_slice()
    }

    fn encode(&self, s: &SaddleState) -> DVector<f64> {
        let mut v = Vec::with_capacity(2 * self.half());
        for c in s.gamma.iter().chain(&s.delta) {
            v.extend_from_slice(&flatten(c)[1..]);
        }
        DVector::from_vec(v)
    }

    fn decode(&self, v: &DVector<f64>, template: &SaddleState) -> Result<SaddleState> {
        let k = self.per_slice();
        let rebuild = |idx: usize, c: &crate::cg::CgCanonical| {
            let mut full = vec![flatten(c)[0]];
            full.extend(v.rows(idx * k, k).iter());
            unflatten(&full, self.switches, self.latent)
        };
        let gamma = template
            .gamma
            .iter()
            .enumerate()
            .map(|(t, c)| rebuild(t, c))
            .collect::<Result<_>>()?;
        let delta = template
            .delta
            .iter()
            .enumerate()
            .map(|(t, c)| rebuild(self.slices + t, c))
            .collect::<Result<_>>()?;
        Ok(SaddleState { gamma, delta })
    }

    fn gradient(&self, chain: &Chain, s: &SaddleState) -> Result<DVector<f64>> {
        let eval = evaluate_dual(chain, s)?;
        let mut v = Vec::with_capacity(2 * self.half());
        for g in grad_gamma(&eval, s)?.iter().chain(&grad_delta(&eval)) {
            v.extend_from_slice(&g[1..]);
        }
        Ok(DVector::from_vec(v))
    }
}

/// Hessian blocks of `F = F0 + F1` at `point` from central differences of the
/// analytic gradient (Richardson-extrapolated once).
pub fn saddle_hessian_blocks(
    chain: &Chain,
    point: &SaddleState,
    step: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let red = Reduced {
        switches: chain.switches(),
        latent: chain.latent(),
        slices: point.len(),
    };
    let x = red.encode(point);
    let n = x.len();
    let column = |k: usize, h: f64| -> Result<DVector<f64>> {
        let mut plus = x.clone();
        plus[k] += h;
        let mut minus = x.clone();
        minus[k] -= h;
        let gp = red.gradient(chain, &red.decode(&plus, point)?)?;
        let gm = red.gradient(chain, &red.decode(&minus, point)?)?;
        Ok((gp - gm) / (2.0 * h))
    };
    let mut hess = DMatrix::zeros(n, n);
    for k in 0..n {
        let col = (column(k, step / 2.0)? * 4.0 - column(k, step)?) / 3.0;
        hess.set_column(k, &col);
    }
    let hess = symmetrize(&hess);
    let m = red.half();
    Ok((
        hess.view((0, 0), (m, m)).into_owned(),
        hess.view((0, m), (m, m)).into_owned(),
        hess.view((m, m), (m, m)).into_owned(),
    ))
}

/// Hessian eigen-structure at a fixed point of the saddle problem.
pub fn hessian_diagnostics(chain: &Chain, point: &SaddleState) -> Result<HessianReport> {
    let eval = evaluate_dual(chain, point)?;
    let residual = saddle_residual(&eval, point)?;
    if !(residual <= FIXED_POINT_LIMIT) {
        return Err(Error::NotAFixedPoint {
            residual,
            limit: FIXED_POINT_LIMIT,
        });
    }
    let (gg, gd, dd) = saddle_hessian_blocks(chain, point, DEFAULT_STEP)?;
    hessian_report(&gg, &gd, &dd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{run_ep, EpConfig};
    use crate::free_energy::{dual_f1, f0};
    use crate::model::random_instance;
    use nalgebra::dvector;

    #[test]
    fn toy_saddle_is_a_minimum_but_unstable() {
        let f = |g: &DVector<f64>, d: &DVector<f64>| -g[0] * g[0] - d[0] * d[0] + 4.0 * g[0] * d[0];
        let (gg, gd, dd) = toy_hessian_blocks(f, &dvector![0.3], &dvector![-0.2], 1e-4);
        assert!((gg[(0, 0)] + 2.0).abs() < 1e-3);
        assert!((dd[(0, 0)] + 2.0).abs() < 1e-3);
        let r = hessian_report(&gg, &gd, &dd).unwrap();
        assert!((r.schur[0] - 6.0).abs() < 1e-3);
        assert!(r.local_minimum);
        assert!(!r.descent_ascent_stable);
    }

    #[test]
    fn gradient_differences_match_value_differences() {
        let (model, obs) = random_instance(2, 1, 1, 3, 4).unwrap();
        let chain = Chain::new(&model, &obs).unwrap();
        let rec = run_ep(&chain, &EpConfig::default());
        let point = SaddleState::from_messages(&rec.final_state).unwrap();
        let (gg, gd, dd) = saddle_hessian_blocks(&chain, &point, 1e-4).unwrap();
        let red = Reduced {
            switches: 2,
            latent: 1,
            slices: point.len(),
        };
        let x = red.encode(&point);
        let value = |z: &DVector<f64>| {
            let s = red.decode(z, &point).unwrap();
            f0(&s.gamma) + dual_f1(&chain, &s)
        };
        let h = second_differences(&value, &x, 1e-3);
        let m = red.half();
        let scale = h.amax().max(1.0);
        assert!((h.view((0, 0), (m, m)) - &gg).amax() < 1e-4 * scale);
        assert!((h.view((0, m), (m, m)) - &gd).amax() < 1e-4 * scale);
        assert!((h.view((m, m), (m, m)) - &dd).amax() < 1e-4 * scale);
    }

    #[test]
    fn non_fixed_point_is_rejected() {
        let (model, obs) = random_instance(2, 2, 2, 3, 4).unwrap();
        let chain = Chain::new(&model, &obs).unwrap();
        let rec = run_ep(&chain, &EpConfig::default());
        let mut point = SaddleState::from_messages(&rec.final_state).unwrap();
        point.delta[0] = point.delta[0].scaled(1.5);
        assert!(matches!(
            hessian_diagnostics(&chain, &point),
            Err(Error::NotAFixedPoint { .. })
        ));
    }

    #[test]
    fn converged_ep_point_is_a_minimum_with_concave_dual() {
        let (model, obs) = random_instance(2, 2, 2, 4, 3).unwrap();
        let chain = Chain::new(&model, &obs).unwrap();
        let rec = run_ep(&chain, &EpConfig::default());
        assert!(rec.status.is_converged());
        let point = SaddleState::from_messages(&rec.final_state).unwrap();
        let r = hessian_diagnostics(&chain, &point).unwrap();
        assert!(r.max_delta_delta() < 1e-8, "{:?}", r.delta_delta);
        assert!(r.min_schur() >= -1e-6, "{:?}", r.schur);
    }
}
