//! Switching linear dynamical system definition and its chain potentials.
//!
//! Switch states are indexed `0..M`, time slices `0..T`. The potential of
//! slice `t ≥ 1` couples `(s_{t−1}, z_{t−1})` with `(s_t, z_t)`:
//!
//! ```text
//! ψ_t(i, j, z_{t−1}, z_t) = Π_ij · N(z_t; A_ij z_{t−1}, Q_ij) · N(y_t; C_j z_t, R_j)
//! ```
//!
//! and slice 0 carries the prior `π_j · N(z_0; m0_j, V0_j) · N(y_0; C_j z_0, R_j)`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::cg::CgMoments;
use crate::error::{Error, Result};
use crate::gaussian::{cholesky, min_eigenvalue, GaussCanonical, GaussMoments};

const STOCHASTIC_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct SldsModel {
    /// `π`, length M.
    pub switch_prior: DVector<f64>,
    /// `Π[(i, j)] = P(s_t = j | s_{t−1} = i)`.
    pub switch_transition: DMatrix<f64>,
    /// `A_ij`, stored at `i * M + j`.
    pub dynamics: Vec<DMatrix<f64>>,
    /// `Q_ij`, stored at `i * M + j`.
    pub dynamics_noise: Vec<DMatrix<f64>>,
    /// `C_j`, D×N.
    pub emission: Vec<DMatrix<f64>>,
    /// `R_j`, D×D.
    pub observation_noise: Vec<DMatrix<f64>>,
    pub initial_mean: Vec<DVector<f64>>,
    pub initial_cov: Vec<DMatrix<f64>>,
}

/// Observations `y_0..y_{T−1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSequence(pub Vec<DVector<f64>>);

impl ObservationSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub switches: usize,
    pub latent: usize,
    pub observed: usize,
}

/// The chain potential of one time slice with the evidence absorbed.
#[derive(Debug, Clone, PartialEq)]
pub enum TwoSlicePotential {
    /// Slice 0: one potential over `z_0` per switch state.
    Initial { per_state: Vec<GaussCanonical> },
    /// Slice t ≥ 1: one potential over `(z_{t−1}, z_t)` per pair `(i, j)`,
    /// stored at `i * M + j`; `log Π_ij` is folded into the scale.
    Transition {
        switches: usize,
        per_pair: Vec<GaussCanonical>,
    },
}

impl TwoSlicePotential {
    /// `log ψ` at a point. `prev` is ignored for slice 0.
    pub fn log_value(
        &self,
        prev: Option<(usize, &DVector<f64>)>,
        next: (usize, &DVector<f64>),
    ) -> f64 {
        match self {
            TwoSlicePotential::Initial { per_state } => per_state[next.0].log_value(next.1),
            TwoSlicePotential::Transition { switches, per_pair } => {
                let (i, zp) = prev.expect("transition potential needs the previous slice");
                let n = zp.len();
                let mut z = DVector::zeros(2 * n);
                z.rows_mut(0, n).copy_from(zp);
                z.rows_mut(n, n).copy_from(next.1);
                per_pair[i * switches + next.0].log_value(&z)
            }
        }
    }
}

fn check_spd(name: &str, m: &DMatrix<f64>) -> Result<()> {
    if cholesky(m).is_none() {
        return Err(Error::InvalidModel(format!(
            "{name} is not symmetric positive definite (smallest eigenvalue {:.3e})",
            min_eigenvalue(m)
        )));
    }
    if (m - m.transpose()).amax() > 1e-12 * m.amax() {
        return Err(Error::InvalidModel(format!("{name} is not symmetric")));
    }
    Ok(())
}

fn check_shape(name: &str, m: &DMatrix<f64>, rows: usize, cols: usize) -> Result<()> {
    if m.nrows() != rows || m.ncols() != cols {
        return Err(Error::InvalidModel(format!(
            "{name} has shape {}x{}, expected {rows}x{cols}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

impl SldsModel {
    pub fn dims(&self) -> Dims {
        Dims {
            switches: self.switch_prior.len(),
            latent: self.initial_mean.first().map_or(0, |m| m.len()),
            observed: self.observation_noise.first().map_or(0, |r| r.nrows()),
        }
    }

    pub fn a(&self, i: usize, j: usize) -> &DMatrix<f64> {
        &self.dynamics[i * self.switch_prior.len() + j]
    }

    pub fn q(&self, i: usize, j: usize) -> &DMatrix<f64> {
        &self.dynamics_noise[i * self.switch_prior.len() + j]
    }

    /// Check shapes, stochasticity of `π` and `Π`, and definiteness of every
    /// covariance.
    pub fn validate(&self) -> Result<()> {
        let Dims {
            switches: m,
            latent: n,
            observed: d,
        } = self.dims();
        if m == 0 || n == 0 || d == 0 {
            return Err(Error::InvalidModel("empty dimension".into()));
        }
        let all_finite = |x: &DMatrix<f64>| x.iter().all(|v| v.is_finite());
        if self.switch_prior.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidModel("switch prior has a negative or non-finite entry".into()));
        }
        let sum: f64 = self.switch_prior.sum();
        if (sum - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::InvalidModel(format!("switch prior sums to {sum}")));
        }
        check_shape("switch transition", &self.switch_transition, m, m)?;
        for (i, row) in self.switch_transition.row_iter().enumerate() {
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::InvalidModel(format!(
                    "switch transition row {i} has a negative or non-finite entry"
                )));
            }
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::InvalidModel(format!(
                    "switch transition row {i} sums to {sum}"
                )));
            }
        }
        let counts = [
            ("dynamics", self.dynamics.len(), m * m),
            ("dynamics noise", self.dynamics_noise.len(), m * m),
            ("emission", self.emission.len(), m),
            ("observation noise", self.observation_noise.len(), m),
            ("initial mean", self.initial_mean.len(), m),
            ("initial covariance", self.initial_cov.len(), m),
        ];
        for (name, found, expected) in counts {
            if found != expected {
                return Err(Error::InvalidModel(format!(
                    "{name} has {found} entries, expected {expected}"
                )));
            }
        }
        for i in 0..m {
            for j in 0..m {
                let a = self.a(i, j);
                check_shape(&format!("dynamics[{i}][{j}]"), a, n, n)?;
                let q = self.q(i, j);
                check_shape(&format!("dynamics noise[{i}][{j}]"), q, n, n)?;
                if !all_finite(a) || !all_finite(q) {
                    return Err(Error::InvalidModel(format!(
                        "non-finite dynamics for pair ({i}, {j})"
                    )));
                }
                check_spd(&format!("dynamics noise[{i}][{j}]"), q)?;
            }
        }
        for j in 0..m {
            check_shape(&format!("emission[{j}]"), &self.emission[j], d, n)?;
            check_shape(&format!("observation noise[{j}]"), &self.observation_noise[j], d, d)?;
            if self.initial_mean[j].len() != n || self.initial_mean[j].iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidModel(format!("initial mean[{j}] is malformed")));
            }
            check_shape(&format!("initial covariance[{j}]"), &self.initial_cov[j], n, n)?;
            if !all_finite(&self.emission[j]) {
                return Err(Error::InvalidModel(format!("non-finite emission[{j}]")));
            }
            check_spd(&format!("observation noise[{j}]"), &self.observation_noise[j])?;
            check_spd(&format!("initial covariance[{j}]"), &self.initial_cov[j])?;
        }
        Ok(())
    }

    /// Check that `obs` is a non-empty sequence of length-D finite vectors.
    pub fn validate_observations(&self, obs: &ObservationSequence) -> Result<()> {
        if obs.is_empty() {
            return Err(Error::InvalidModel("observation sequence is empty".into()));
        }
        let d = self.dims().observed;
        for (t, y) in obs.0.iter().enumerate() {
            if y.len() != d {
                return Err(Error::InvalidModel(format!(
                    "observation {t} has length {}, expected {d}",
                    y.len()
                )));
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidModel(format!("observation {t} is not finite")));
            }
        }
        Ok(())
    }

    /// Emission factor `N(y; C_j z, R_j)` as a canonical potential over z.
    fn emission_potential(&self, j: usize, y: &DVector<f64>) -> Result<GaussCanonical> {
        let c = &self.emission[j];
        let r = &self.observation_noise[j];
        let chol = cholesky(r).ok_or_else(|| {
            Error::InvalidModel(format!("observation noise[{j}] is not positive definite"))
        })?;
        let r_inv_y = chol.solve(y);
        let r_inv_c = chol.solve(c);
        let d = y.len() as f64;
        let scale = -0.5 * y.dot(&r_inv_y)
            - 0.5 * d * (2.0 * std::f64::consts::PI).ln()
            - 0.5 * crate::gaussian::chol_log_det(&chol);
        GaussCanonical::new(scale, c.transpose() * r_inv_y, c.transpose() * r_inv_c)
    }

    /// The slice-`t` potential with observation `y` absorbed (`t` counts from 0).
    pub fn build_potential(&self, t: usize, y: &DVector<f64>) -> Result<TwoSlicePotential> {
        let Dims {
            switches: m,
            latent: n,
            observed: d,
        } = self.dims();
        if y.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: y.len(),
            });
        }
        if t == 0 {
            let per_state = (0..m)
                .map(|j| {
                    let prior = GaussMoments::new(
                        self.switch_prior[j].ln(),
                        self.initial_mean[j].clone(),
                        self.initial_cov[j].clone(),
                    )?
                    .to_canonical()?;
                    prior.add_scaled(&self.emission_potential(j, y)?, 1.0)
                })
                .collect::<Result<_>>()?;
            return Ok(TwoSlicePotential::Initial { per_state });
        }
        let emissions: Vec<GaussCanonical> = (0..m)
            .map(|j| self.emission_potential(j, y))
            .collect::<Result<_>>()?;
        let mut per_pair = Vec::with_capacity(m * m);
        for i in 0..m {
            for j in 0..m {
                let a = self.a(i, j);
                let chol = cholesky(self.q(i, j)).ok_or_else(|| {
                    Error::InvalidModel(format!("dynamics noise[{i}][{j}] is not positive definite"))
                })?;
                let p = chol.inverse();
                let pa = &p * a;
                let mut precision = DMatrix::zeros(2 * n, 2 * n);
                precision
                    .view_mut((0, 0), (n, n))
                    .copy_from(&(a.transpose() * &pa));
                precision
                    .view_mut((0, n), (n, n))
                    .copy_from(&(-pa.transpose()));
                precision.view_mut((n, 0), (n, n)).copy_from(&(-&pa));
                precision.view_mut((n, n), (n, n)).copy_from(&p);
                let scale = self.switch_transition[(i, j)].ln()
                    - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
                    - 0.5 * crate::gaussian::chol_log_det(&chol);
                let dyn_pot = GaussCanonical::new(scale, DVector::zeros(2 * n), precision)?;
                per_pair.push(dyn_pot.add_scaled(&emissions[j].embed(2 * n, n), 1.0)?);
            }
        }
        Ok(TwoSlicePotential::Transition {
            switches: m,
            per_pair,
        })
    }

    /// Potentials for every slice of `obs`.
    pub fn potentials(&self, obs: &ObservationSequence) -> Result<Vec<TwoSlicePotential>> {
        obs.0
            .iter()
            .enumerate()
            .map(|(t, y)| self.build_potential(t, y))
            .collect()
    }

    /// Log density `log N(z; A_ij z_prev, Q_ij)` evaluated directly.
    pub fn log_transition_density(
        &self,
        i: usize,
        j: usize,
        z_prev: &DVector<f64>,
        z: &DVector<f64>,
    ) -> f64 {
        log_normal(z, &(self.a(i, j) * z_prev), self.q(i, j))
    }
}

/// `log N(x; mean, cov)` via Cholesky; panics on a non-SPD covariance.
pub fn log_normal(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let chol = cholesky(cov).expect("covariance must be positive definite");
    let d = x - mean;
    -0.5 * (d.dot(&chol.solve(&d))
        + x.len() as f64 * (2.0 * std::f64::consts::PI).ln()
        + crate::gaussian::chol_log_det(&chol))
}

fn dirichlet_ones(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let draws: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|x| x / total).collect()
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let l = normal_matrix(rng, n, n);
    let s = &l * l.transpose() + DMatrix::identity(n, n) * 0.1;
    (&s + s.transpose()) * 0.5
}

fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

fn sample_normal(rng: &mut ChaCha8Rng, mean: &DVector<f64>, cov: &DMatrix<f64>) -> DVector<f64> {
    let l = cholesky(cov).expect("sampling covariance must be SPD").l();
    let e = DVector::from_fn(mean.len(), |_, _| StandardNormal.sample(rng));
    mean + l * e
}

fn sample_index(rng: &mut ChaCha8Rng, probs: impl Iterator<Item = f64>) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (k, p) in probs.enumerate() {
        acc += p;
        last = k;
        if u < acc {
            return k;
        }
    }
    last
}

/// Draw a random stable SLDS and an observation sequence sampled from it.
///
/// Deterministic in `seed`. Switch distributions are symmetric Dirichlet(1);
/// each `A_ij` is a standard normal matrix rescaled to spectral radius
/// `0.95·u`, `u ~ U(0.5, 1)`; covariances are `LLᵀ + 0.1·I` with standard
/// normal `L`.
pub fn random_instance(
    switches: usize,
    latent: usize,
    observed: usize,
    length: usize,
    seed: u64,
) -> Result<(SldsModel, ObservationSequence)> {
    if switches == 0 || latent == 0 || observed == 0 || length == 0 {
        return Err(Error::InvalidModel(
            "all dimensions and the sequence length must be at least 1".into(),
        ));
    }
    let (m, n, d) = (switches, latent, observed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let switch_prior = DVector::from_vec(dirichlet_ones(&mut rng, m));
    let mut switch_transition = DMatrix::zeros(m, m);
    for i in 0..m {
        for (j, p) in dirichlet_ones(&mut rng, m).into_iter().enumerate() {
            switch_transition[(i, j)] = p;
        }
    }
    let radius = Uniform::new(0.5, 1.0).expect("valid range");
    let mut dynamics = Vec::with_capacity(m * m);
    let mut dynamics_noise = Vec::with_capacity(m * m);
    for _ in 0..m * m {
        let a = normal_matrix(&mut rng, n, n);
        let target = 0.95 * radius.sample(&mut rng);
        let rho = spectral_radius(&a);
        dynamics.push(if rho > 0.0 { a * (target / rho) } else { a });
        dynamics_noise.push(random_spd(&mut rng, n));
    }
    let mut emission = Vec::with_capacity(m);
    let mut observation_noise = Vec::with_capacity(m);
    let mut initial_mean = Vec::with_capacity(m);
    let mut initial_cov = Vec::with_capacity(m);
    for _ in 0..m {
        emission.push(normal_matrix(&mut rng, d, n));
        observation_noise.push(random_spd(&mut rng, d));
        initial_mean.push(DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng)));
        initial_cov.push(random_spd(&mut rng, n));
    }
    let model = SldsModel {
        switch_prior,
        switch_transition,
        dynamics,
        dynamics_noise,
        emission,
        observation_noise,
        initial_mean,
        initial_cov,
    };

    let mut obs = Vec::with_capacity(length);
    let mut s = sample_index(&mut rng, model.switch_prior.iter().copied());
    let mut z = sample_normal(&mut rng, &model.initial_mean[s], &model.initial_cov[s]);
    for t in 0..length {
        if t > 0 {
            let next = sample_index(&mut rng, model.switch_transition.row(s).iter().copied());
            let mean = model.a(s, next) * &z;
            z = sample_normal(&mut rng, &mean, model.q(s, next));
            s = next;
        }
        let mean = &model.emission[s] * &z;
        obs.push(sample_normal(&mut rng, &mean, &model.observation_noise[s]));
    }
    Ok((model, ObservationSequence(obs)))
}

// ---------------------------------------------------------------------------
// Instance documents

pub const INSTANCE_FORMAT: &str = "slds-instance";
pub const INSTANCE_VERSION: u32 = 1;

type Rows = Vec<Vec<f64>>;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceDoc {
    format: String,
    version: u32,
    switches: usize,
    latent_dim: usize,
    observation_dim: usize,
    length: usize,
    switch_prior: Vec<f64>,
    switch_transition: Rows,
    dynamics: Vec<Vec<Rows>>,
    dynamics_noise: Vec<Vec<Rows>>,
    emission: Vec<Rows>,
    observation_noise: Vec<Rows>,
    initial_mean: Vec<Vec<f64>>,
    initial_cov: Vec<Rows>,
    observations: Vec<Vec<f64>>,
}

fn to_rows(m: &DMatrix<f64>) -> Rows {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(field: &str, rows: &Rows, nrows: usize, ncols: usize) -> Result<DMatrix<f64>> {
    if rows.len() != nrows {
        return Err(Error::Parse(format!(
            "field `{field}`: expected {nrows} rows, found {}",
            rows.len()
        )));
    }
    for (r, row) in rows.iter().enumerate() {
        if row.len() != ncols {
            return Err(Error::Parse(format!(
                "field `{field}` row {r}: expected {ncols} columns, found {}",
                row.len()
            )));
        }
    }
    Ok(DMatrix::from_fn(nrows, ncols, |r, c| rows[r][c]))
}

fn from_vec(field: &str, v: &[f64], len: usize) -> Result<DVector<f64>> {
    if v.len() != len {
        return Err(Error::Parse(format!(
            "field `{field}`: expected length {len}, found {}",
            v.len()
        )));
    }
    Ok(DVector::from_column_slice(v))
}

fn expect_len<T>(field: &str, v: &[T], len: usize) -> Result<()> {
    if v.len() != len {
        return Err(Error::Parse(format!(
            "field `{field}`: expected {len} entries, found {}",
            v.len()
        )));
    }
    Ok(())
}

/// Serialize a model and its observations as a versioned JSON document.
/// Matrices are arrays of rows; floats are written in shortest round-trip form.
pub fn serialize_instance(model: &SldsModel, obs: &ObservationSequence) -> String {
    let Dims {
        switches: m,
        latent: n,
        observed: d,
    } = model.dims();
    let pairs = |v: &[DMatrix<f64>]| -> Vec<Vec<Rows>> {
        (0..m)
            .map(|i| (0..m).map(|j| to_rows(&v[i * m + j])).collect())
            .collect()
    };
    let doc = InstanceDoc {
        format: INSTANCE_FORMAT.into(),
        version: INSTANCE_VERSION,
        switches: m,
        latent_dim: n,
        observation_dim: d,
        length: obs.len(),
        switch_prior: model.switch_prior.iter().copied().collect(),
        switch_transition: to_rows(&model.switch_transition),
        dynamics: pairs(&model.dynamics),
        dynamics_noise: pairs(&model.dynamics_noise),
        emission: model.emission.iter().map(to_rows).collect(),
        observation_noise: model.observation_noise.iter().map(to_rows).collect(),
        initial_mean: model
            .initial_mean
            .iter()
            .map(|v| v.iter().copied().collect())
            .collect(),
        initial_cov: model.initial_cov.iter().map(to_rows).collect(),
        observations: obs.0.iter().map(|v| v.iter().copied().collect()).collect(),
    };
    serde_json::to_string_pretty(&doc).expect("instance documents always serialize")
}

/// Parse and validate an instance document.
pub fn parse_instance(text: &str) -> Result<(SldsModel, ObservationSequence)> {
    let doc: InstanceDoc = serde_json::from_str(text).map_err(|e| {
        Error::Parse(format!("line {} column {}: {e}", e.line(), e.column()))
    })?;
    if doc.format != INSTANCE_FORMAT {
        return Err(Error::Parse(format!(
            "field `format`: expected \"{INSTANCE_FORMAT}\", found \"{}\"",
            doc.format
        )));
    }
    if doc.version != INSTANCE_VERSION {
        return Err(Error::Parse(format!(
            "field `version`: unsupported version {}",
            doc.version
        )));
    }
    let (m, n, d, t) = (doc.switches, doc.latent_dim, doc.observation_dim, doc.length);
    let switch_prior = from_vec("switch_prior", &doc.switch_prior, m)?;
    let switch_transition = from_rows("switch_transition", &doc.switch_transition, m, m)?;
    let pairs = |field: &str, v: &[Vec<Rows>]| -> Result<Vec<DMatrix<f64>>> {
        expect_len(field, v, m)?;
        let mut out = Vec::with_capacity(m * m);
        for (i, row) in v.iter().enumerate() {
            expect_len(&format!("{field}[{i}]"), row, m)?;
            for (j, rows) in row.iter().enumerate() {
                out.push(from_rows(&format!("{field}[{i}][{j}]"), rows, n, n)?);
            }
        }
        Ok(out)
    };
    let dynamics = pairs("dynamics", &doc.dynamics)?;
    let dynamics_noise = pairs("dynamics_noise", &doc.dynamics_noise)?;
    let per_state = |field: &str, v: &[Rows], r: usize, c: usize| -> Result<Vec<DMatrix<f64>>> {
        expect_len(field, v, m)?;
        v.iter()
            .enumerate()
            .map(|(j, rows)| from_rows(&format!("{field}[{j}]"), rows, r, c))
            .collect()
    };
    let emission = per_state("emission", &doc.emission, d, n)?;
    let observation_noise = per_state("observation_noise", &doc.observation_noise, d, d)?;
    let initial_cov = per_state("initial_cov", &doc.initial_cov, n, n)?;
    expect_len("initial_mean", &doc.initial_mean, m)?;
    let initial_mean = doc
        .initial_mean
        .iter()
        .enumerate()
        .map(|(j, v)| from_vec(&format!("initial_mean[{j}]"), v, n))
        .collect::<Result<_>>()?;
    expect_len("observations", &doc.observations, t)?;
    let observations = doc
        .observations
        .iter()
        .enumerate()
        .map(|(k, v)| from_vec(&format!("observations[{k}]"), v, d))
        .collect::<Result<_>>()?;
    let model = SldsModel {
        switch_prior,
        switch_transition,
        dynamics,
        dynamics_noise,
        emission,
        observation_noise,
        initial_mean,
        initial_cov,
    };
    model.validate()?;
    let obs = ObservationSequence(observations);
    model.validate_observations(&obs)?;
    Ok((model, obs))
}

pub const BELIEFS_FORMAT: &str = "slds-beliefs";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BeliefState {
    log_weight: f64,
    mean: Vec<f64>,
    covariance: Rows,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BeliefSlice {
    log_mass: f64,
    states: Vec<BeliefState>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BeliefsDoc {
    format: String,
    version: u32,
    slices: Vec<BeliefSlice>,
}

/// Serialize per-slice CG beliefs in the same float and matrix conventions
/// as instance documents.
pub fn serialize_beliefs(beliefs: &[CgMoments]) -> String {
    let doc = BeliefsDoc {
        format: BELIEFS_FORMAT.into(),
        version: INSTANCE_VERSION,
        slices: beliefs
            .iter()
            .map(|q| BeliefSlice {
                log_mass: q.log_mass,
                states: q
                    .states
                    .iter()
                    .map(|s| BeliefState {
                        log_weight: s.log_weight,
                        mean: s.mean.iter().copied().collect(),
                        covariance: to_rows(&s.covariance),
                    })
                    .collect(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&doc).expect("belief documents always serialize")
}

pub fn parse_beliefs(text: &str) -> Result<Vec<CgMoments>> {
    let doc: BeliefsDoc = serde_json::from_str(text).map_err(|e| {
        Error::Parse(format!("line {} column {}: {e}", e.line(), e.column()))
    })?;
    if doc.format != BELIEFS_FORMAT || doc.version != INSTANCE_VERSION {
        return Err(Error::Parse(format!(
            "unsupported belief document {} v{}",
            doc.format, doc.version
        )));
    }
    doc.slices
        .iter()
        .enumerate()
        .map(|(t, slice)| {
            let states = slice
                .states
                .iter()
                .enumerate()
                .map(|(j, s)| {
                    let n = s.mean.len();
                    Ok(GaussMoments {
                        log_weight: s.log_weight,
                        mean: from_vec(&format!("slices[{t}].states[{j}].mean"), &s.mean, n)?,
                        covariance: from_rows(
                            &format!("slices[{t}].states[{j}].covariance"),
                            &s.covariance,
                            n,
                            n,
                        )?,
                    })
                })
                .collect::<Result<_>>()?;
            let q = CgMoments {
                log_mass: slice.log_mass,
                states,
            };
            q.validate()?;
            Ok(q)
        })
        .collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector};

    pub(crate) fn scalar_model() -> SldsModel {
        SldsModel {
            switch_prior: dvector![1.0],
            switch_transition: dmatrix![1.0],
            dynamics: vec![dmatrix![1.0]],
            dynamics_noise: vec![dmatrix![1.0]],
            emission: vec![dmatrix![1.0]],
            observation_noise: vec![dmatrix![1.0]],
            initial_mean: vec![dvector![0.0]],
            initial_cov: vec![dmatrix![1.0]],
        }
    }

    #[test]
    fn scalar_random_walk_potential() {
        let pot = scalar_model().build_potential(1, &dvector![0.0]).unwrap();
        let TwoSlicePotential::Transition { per_pair, .. } = pot else {
            panic!("expected a transition potential");
        };
        // ½(z_t − z_{t−1})² + ½z_t²
        assert_relative_eq!(per_pair[0].precision().clone(), dmatrix![1.0, -1.0; -1.0, 2.0]);
        assert_eq!(per_pair[0].shift().clone(), dvector![0.0, 0.0]);
    }

    fn direct_log_psi(
        model: &SldsModel,
        t: usize,
        y: &DVector<f64>,
        prev: Option<(usize, &DVector<f64>)>,
        next: (usize, &DVector<f64>),
    ) -> f64 {
        let (j, z) = next;
        let emission = log_normal(y, &(&model.emission[j] * z), &model.observation_noise[j]);
        if t == 0 {
            model.switch_prior[j].ln()
                + log_normal(z, &model.initial_mean[j], &model.initial_cov[j])
                + emission
        } else {
            let (i, zp) = prev.unwrap();
            model.switch_transition[(i, j)].ln()
                + model.log_transition_density(i, j, zp, z)
                + emission
        }
    }

    #[test]
    fn potential_matches_density_product() {
        let (model, obs) = random_instance(3, 2, 3, 4, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let rand_vec = |rng: &mut ChaCha8Rng, k: usize| {
            DVector::from_fn(k, |_, _| 2.0 * rng.sample::<f64, _>(StandardNormal))
        };
        for _ in 0..100 {
            let y = rand_vec(&mut rng, 3);
            let zp = rand_vec(&mut rng, 2);
            let z = rand_vec(&mut rng, 2);
            let i = rng.random_range(0..3);
            let j = rng.random_range(0..3);
            let pot = model.build_potential(2, &y).unwrap();
            let direct = direct_log_psi(&model, 2, &y, Some((i, &zp)), (j, &z));
            let got = pot.log_value(Some((i, &zp)), (j, &z));
            assert!((got - direct).abs() <= 1e-10 * direct.abs().max(1.0));
        }
        let pot = model.build_potential(0, &obs.0[0]).unwrap();
        for _ in 0..100 {
            let z = rand_vec(&mut rng, 2);
            let j = rng.random_range(0..3);
            let direct = direct_log_psi(&model, 0, &obs.0[0], None, (j, &z));
            let got = pot.log_value(None, (j, &z));
            assert!((got - direct).abs() <= 1e-10 * direct.abs().max(1.0));
        }
    }

    #[test]
    fn single_state_prior_potential_is_pointwise_exact() {
        let model = scalar_model();
        let y = dvector![0.7];
        let pot = model.build_potential(0, &y).unwrap();
        for k in -10..=10 {
            let z = dvector![k as f64 * 0.37];
            let direct = direct_log_psi(&model, 0, &y, None, (0, &z));
            assert!((pot.log_value(None, (0, &z)) - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn transition_mass_is_one_step_evidence() {
        // with a proper Gaussian on z_{t−1}, integrating α·ψ_t gives p(y_t | past)
        let model = scalar_model();
        let y = dvector![0.4];
        let pot = model.build_potential(1, &y).unwrap();
        let TwoSlicePotential::Transition { per_pair, .. } = pot else { unreachable!() };
        let prev = GaussMoments::new(0.0, dvector![0.3], dmatrix![0.8]).unwrap().to_canonical().unwrap();
        let joint = per_pair[0].add_scaled(&prev.embed(2, 0), 1.0).unwrap();
        // predictive: z_t ~ N(0.3, 1.8), y ~ N(0.3, 2.8)
        let expected = log_normal(&y, &dvector![0.3], &dmatrix![2.8]);
        assert!((joint.log_mass().unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn build_potential_rejects_wrong_observation_length() {
        assert!(scalar_model().build_potential(1, &dvector![0.0, 1.0]).is_err());
    }

    #[test]
    fn generator_is_deterministic() {
        let a = random_instance(3, 3, 4, 5, 42).unwrap();
        let b = random_instance(3, 3, 4, 5, 42).unwrap();
        assert_eq!(a, b);
        let c = random_instance(3, 3, 4, 5, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn generated_instances_are_valid() {
        for seed in 0..1000 {
            let m = 1 + (seed % 4) as usize;
            let n = 1 + (seed / 4 % 4) as usize;
            let (model, obs) = random_instance(m, n, 2 + (seed % 3) as usize, 3, seed).unwrap();
            model.validate().unwrap();
            model.validate_observations(&obs).unwrap();
            for a in &model.dynamics {
                assert!(spectral_radius(a) < 0.95 + 1e-12);
            }
        }
    }

    #[test]
    fn three_switch_dims_accepted() {
        let (model, obs) = random_instance(3, 3, 4, 5, 0).unwrap();
        assert_eq!(
            model.dims(),
            Dims {
                switches: 3,
                latent: 3,
                observed: 4
            }
        );
        assert_eq!(obs.len(), 5);
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(random_instance(0, 1, 1, 1, 0).is_err());
        assert!(random_instance(1, 1, 1, 0, 0).is_err());
    }

    #[test]
    fn document_round_trip_is_exact() {
        for seed in 0..20 {
            let (model, obs) = random_instance(2 + seed % 3, 2, 3, 4, seed as u64).unwrap();
            let text = serialize_instance(&model, &obs);
            let (m2, o2) = parse_instance(&text).unwrap();
            assert_eq!(model, m2);
            assert_eq!(obs, o2);
        }
    }

    #[test]
    fn belief_round_trip_is_exact() {
        let (model, obs) = random_instance(3, 2, 2, 4, 5).unwrap();
        let exact = crate::oracle::exact_beliefs(&model, &obs).unwrap();
        let back = parse_beliefs(&serialize_beliefs(&exact.beliefs)).unwrap();
        assert_eq!(back, exact.beliefs);
    }

    fn doc_value(seed: u64) -> serde_json::Value {
        let (model, obs) = random_instance(2, 2, 2, 3, seed).unwrap();
        serde_json::from_str(&serialize_instance(&model, &obs)).unwrap()
    }

    #[test]
    fn non_stochastic_row_names_the_row() {
        let mut v = doc_value(1);
        v["switch_transition"][1] = serde_json::json!([0.5, 0.4]);
        let err = parse_instance(&v.to_string()).unwrap_err();
        assert!(err.to_string().contains("row 1"), "{err}");
    }

    #[test]
    fn missing_field_is_a_schema_error() {
        let mut v = doc_value(2);
        v.as_object_mut().unwrap().remove("observation_noise");
        let err = parse_instance(&v.to_string()).unwrap_err();
        assert!(matches!(err, Error::Parse(_)));
        assert!(err.to_string().contains("observation_noise"), "{err}");
    }

    #[test]
    fn malformed_document_reports_line() {
        let err = parse_instance("{\n  \"format\": \"slds-instance\",\n  \"version\": 1,\n  oops\n}")
            .unwrap_err();
        assert!(err.to_string().contains("line 4"), "{err}");
    }

    #[test]
    fn dimension_inconsistency_rejected() {
        let mut v = doc_value(3);
        v["emission"][0] = serde_json::json!([[1.0, 0.0]]);
        let err = parse_instance(&v.to_string()).unwrap_err();
        assert!(err.to_string().contains("emission[0]"), "{err}");
    }

    #[test]
    fn unknown_version_rejected() {
        let mut v = doc_value(4);
        v["version"] = serde_json::json!(7);
        assert!(parse_instance(&v.to_string()).is_err());
    }
}
