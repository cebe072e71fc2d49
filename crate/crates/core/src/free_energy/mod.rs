//! Bethe free energy, its dual and the convergent double-loop minimizer.
//!
//! The saddle variables live on the inner slices `t = 0..T−2`: `γ_t` is the
//! sum of the messages meeting at `x_t`, `δ_t` their difference, so that
//! `α_t = ½(γ_t + δ_t)` and `β_t = ½(γ_t − δ_t)`. The objective is
//! `F(γ, δ) = F0(γ) + F1(γ, δ)`, minimized over `γ` and maximized over `δ`.

pub mod hessian;

use crate::cg::{collapse, link, CgCanonical, CgMoments, CgStats};
use crate::engine::{
    backward_update, belief_distance, beliefs, floored_canonical, forward_pass, forward_update,
    log_likelihood_estimate,
    slice_marginals, two_slice_marginal, Chain, EpRunRecord, IterationRecord, MessageState,
    RunStatus, TwoSliceCg,
};
use crate::error::{Error, Result};
use crate::gaussian::{GaussCanonical, GaussMoments};
use crate::model::TwoSlicePotential;
use nalgebra::{DMatrix, DVector};

pub use hessian::{hessian_diagnostics, hessian_report, toy_hessian_blocks, HessianReport};

/// Saddle-point variables `(γ, δ)` for `t = 0..T−2`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaddleState {
    pub gamma: Vec<CgCanonical>,
    pub delta: Vec<CgCanonical>,
}

impl SaddleState {
    pub fn zeros(chain: &Chain) -> Self {
        let unit = CgCanonical::unit(chain.switches(), chain.latent());
        let k = chain.len().saturating_sub(1);
        Self {
            gamma: vec![unit.clone(); k],
            delta: vec![unit; k],
        }
    }

    /// `γ_t = α_t + β_t`, `δ_t = α_t − β_t`.
    pub fn from_messages(state: &MessageState) -> Result<Self> {
        let mut gamma = Vec::with_capacity(state.backward.len());
        let mut delta = Vec::with_capacity(state.backward.len());
        for (a, b) in state.forward.iter().zip(&state.backward) {
            gamma.push(a.add_scaled(b, 1.0)?);
            delta.push(a.add_scaled(b, -1.0)?);
        }
        Ok(Self { gamma, delta })
    }

    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }

    pub fn alpha(&self, t: usize) -> Result<CgCanonical> {
        Ok(self.gamma[t].add_scaled(&self.delta[t], 1.0)?.scaled(0.5))
    }

    pub fn beta(&self, t: usize) -> Result<CgCanonical> {
        Ok(self.gamma[t].add_scaled(&self.delta[t], -1.0)?.scaled(0.5))
    }

    /// Message state with the reconstructed `α, β`. The last forward message
    /// does not enter the dual and is left at zero.
    pub fn to_messages(&self, chain: &Chain) -> Result<MessageState> {
        let mut state = MessageState::zeros(chain);
        for t in 0..self.len() {
            state.forward[t] = self.alpha(t)?;
            state.backward[t] = self.beta(t)?;
        }
        Ok(state)
    }
}

/// Everything the dual needs at one point: the two-slice marginals and the
/// moments they induce at each inner slice.
#[derive(Debug, Clone)]
pub struct DualEvaluation {
    pub f1: f64,
    pub log_z: Vec<f64>,
    pub slices: Vec<TwoSliceCg>,
    /// `⟨f(x_t)⟩_{p̂_t}`, t = 0..T−2.
    pub forward_stats: Vec<CgStats>,
    /// `⟨f(x_t)⟩_{p̂_{t+1}}`, t = 0..T−2.
    pub backward_stats: Vec<CgStats>,
    /// The same projections in moment form.
    pub forward_moments: Vec<CgMoments>,
    pub backward_moments: Vec<CgMoments>,
}

pub fn evaluate_dual(chain: &Chain, saddle: &SaddleState) -> Result<DualEvaluation> {
    let messages = saddle.to_messages(chain)?;
    let slices = slice_marginals(&messages, chain)?;
    let log_z: Vec<f64> = slices.iter().map(|p| p.log_normalizer).collect();
    let mut forward_moments = Vec::with_capacity(saddle.len());
    let mut backward_moments = Vec::with_capacity(saddle.len());
    for t in 0..saddle.len() {
        forward_moments.push(slices[t].project_next()?);
        backward_moments.push(slices[t + 1].project_prev()?);
    }
    Ok(DualEvaluation {
        f1: -log_z.iter().sum::<f64>(),
        log_z,
        slices,
        forward_stats: forward_moments.iter().map(CgMoments::to_stats).collect(),
        backward_stats: backward_moments.iter().map(CgMoments::to_stats).collect(),
        forward_moments,
        backward_moments,
    })
}

/// `F1(γ, δ) = −Σ_t log Z_t`; `−∞` outside the domain where every two-slice
/// product is normalizable.
pub fn dual_f1(chain: &Chain, saddle: &SaddleState) -> f64 {
    let Ok(messages) = saddle.to_messages(chain) else {
        return f64::NEG_INFINITY;
    };
    let mut total = 0.0;
    for t in 0..chain.len() {
        match two_slice_marginal(
            t,
            messages.incoming_forward(t),
            chain.potential(t),
            messages.incoming_backward(t),
        ) {
            Ok(p) => total -= p.log_normalizer,
            Err(_) => return f64::NEG_INFINITY,
        }
    }
    total
}

/// `F0(γ) = Σ_t log ∫ exp(γ_tᵀ f)`; `+∞` when some `γ_t` is not normalizable.
pub fn f0(gamma: &[CgCanonical]) -> f64 {
    gamma
        .iter()
        .map(|g| g.log_partition().unwrap_or(f64::INFINITY))
        .sum()
}

/// Number of canonical coordinates of one CG potential: per state the
/// scale, the shift and the upper triangle of the precision.
pub fn coordinate_len(switches: usize, latent: usize) -> usize {
    switches * (1 + latent + latent * (latent + 1) / 2)
}

/// Canonical parameters as a flat coordinate vector.
pub fn flatten(c: &CgCanonical) -> Vec<f64> {
    let n = c.dim();
    let mut out = Vec::with_capacity(coordinate_len(c.num_states(), n));
    for s in c.states() {
        out.push(s.scale());
        out.extend(s.shift().iter());
        for a in 0..n {
            for b in a..n {
                out.push(s.precision()[(a, b)]);
            }
        }
    }
    out
}

pub fn unflatten(v: &[f64], switches: usize, latent: usize) -> Result<CgCanonical> {
    let n = latent;
    let per = coordinate_len(1, n);
    if v.len() != switches * per {
        return Err(Error::DimensionMismatch {
            expected: switches * per,
            found: v.len(),
        });
    }
    let states = v
        .chunks(per)
        .map(|c| {
            let mut k = DMatrix::zeros(n, n);
            let mut idx = 1 + n;
            for a in 0..n {
                for b in a..n {
                    k[(a, b)] = c[idx];
                    k[(b, a)] = c[idx];
                    idx += 1;
                }
            }
            GaussCanonical::new(c[0], DVector::from_column_slice(&c[1..1 + n]), k)
        })
        .collect::<Result<_>>()?;
    CgCanonical::new(states)
}

/// Derivative of `θᵀ⟨f⟩` with respect to the flat coordinates of `θ`.
pub fn stats_gradient(s: &CgStats) -> Vec<f64> {
    let mut out = Vec::new();
    for st in &s.states {
        let n = st.first.len();
        out.push(st.mass);
        out.extend(st.first.iter());
        for a in 0..n {
            for b in a..n {
                out.push(if a == b {
                    -0.5 * st.second[(a, a)]
                } else {
                    -st.second[(a, b)]
                });
            }
        }
    }
    out
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// `∂F1/∂δ_t = ½(⟨f(x_t)⟩_{p̂_t} − ⟨f(x_t)⟩_{p̂_{t+1}})` per slice, in flat
/// coordinates.
pub fn grad_delta(eval: &DualEvaluation) -> Vec<Vec<f64>> {
    eval.forward_stats
        .iter()
        .zip(&eval.backward_stats)
        .map(|(f, b)| {
            stats_gradient(f)
                .iter()
                .zip(stats_gradient(b))
                .map(|(x, y)| 0.5 * (x - y))
                .collect()
        })
        .collect()
}

/// `∂F/∂γ_t = g(γ_t) − ½(⟨f(x_t)⟩_{p̂_t} + ⟨f(x_t)⟩_{p̂_{t+1}})`.
pub fn grad_gamma(eval: &DualEvaluation, saddle: &SaddleState) -> Result<Vec<Vec<f64>>> {
    eval.forward_stats
        .iter()
        .zip(&eval.backward_stats)
        .zip(&saddle.gamma)
        .map(|((f, b), g)| {
            let own = stats_gradient(&link(g)?);
            Ok(own
                .iter()
                .zip(stats_gradient(f))
                .zip(stats_gradient(b))
                .map(|((o, x), y)| o - 0.5 * (x + y))
                .collect())
        })
        .collect()
}

/// Largest violation of the forward-equals-backward constraints and of their
/// agreement with `g(γ_t)`.
pub fn saddle_residual(eval: &DualEvaluation, saddle: &SaddleState) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for ((f, b), g) in eval
        .forward_stats
        .iter()
        .zip(&eval.backward_stats)
        .zip(&saddle.gamma)
    {
        let q = link(g)?;
        worst = worst
            .max(f.max_abs_difference(b))
            .max(f.max_abs_difference(&q))
            .max(b.max_abs_difference(&q));
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerConfig {
    /// Stop once the δ-gradient sup-norm is at most this.
    pub tol: f64,
    pub max_iters: usize,
    pub min_step: f64,
}

impl Default for InnerConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iters: 10_000,
            min_step: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct InnerOutcome {
    pub delta: Vec<CgCanonical>,
    pub evaluation: DualEvaluation,
    /// F1 at the start and after every sweep over the slices.
    pub trace: Vec<f64>,
    /// Step size of every accepted block update.
    pub steps: Vec<f64>,
}

/// `∂F1/∂δ_t` from the two slices that share `x_t`.
fn block_gradient(current: &TwoSliceCg, next: &TwoSliceCg) -> Result<Vec<f64>> {
    let f = stats_gradient(&current.project_next()?.to_stats());
    let b = stats_gradient(&next.project_prev()?.to_stats());
    Ok(f.iter().zip(b).map(|(x, y)| 0.5 * (x - y)).collect())
}

fn total_f1(slices: &[TwoSliceCg]) -> f64 {
    -slices.iter().map(|p| p.log_normalizer).sum::<f64>()
}

/// Maximize `F1(γ, ·)` by damped fixed-point steps
/// `δ_t ← δ_t + ε_t(α̃_t − β̃_t − δ_t)`, one slice at a time.
///
/// Each block step only moves `Z_t` and `Z_{t+1}`, so acceptance compares
/// those two normalizers. When the change is below their rounding level the
/// step is accepted iff the directional derivative at the trial point is
/// still nonnegative, which by concavity implies no decrease.
///
/// Stops when the gradient sup-norm is at most `config.tol`, or when a
/// sweep accepts no step because every block's attainable gain is below
/// that rounding level.
pub fn inner_loop(
    chain: &Chain,
    gamma: &[CgCanonical],
    delta0: Vec<CgCanonical>,
    config: &InnerConfig,
) -> Result<InnerOutcome> {
    let mut point = SaddleState {
        gamma: gamma.to_vec(),
        delta: delta0,
    };
    let mut messages = point.to_messages(chain)?;
    let mut slices = slice_marginals(&messages, chain)?;
    let mut trace = vec![total_f1(&slices)];
    let mut steps = Vec::new();
    let mut block_step = vec![1.0_f64; point.len()];

    let mut resolved = false;
    for _ in 0..config.max_iters {
        let mut grad: f64 = 0.0;
        for t in 0..point.len() {
            grad = grad.max(sup_norm(&block_gradient(&slices[t], &slices[t + 1])?));
        }
        if grad <= config.tol || resolved {
            let evaluation = evaluate_dual(chain, &point)?;
            return Ok(InnerOutcome {
                delta: point.delta,
                evaluation,
                trace,
                steps,
            });
        }
        resolved = true;
        for t in 0..point.len() {
            let g0 = block_gradient(&slices[t], &slices[t + 1])?;
            if sup_norm(&g0) <= config.tol {
                continue;
            }
            let target = forward_update(&slices[t], Some(&point.beta(t)?))?
                .add_scaled(&backward_update(&slices[t + 1], &point.alpha(t)?)?, -1.0)?;
            let direction: Vec<f64> = flatten(&target)
                .iter()
                .zip(flatten(&point.delta[t]))
                .map(|(a, b)| a - b)
                .collect();
            let before = slices[t].log_normalizer + slices[t + 1].log_normalizer;
            let slack = 1e-14
                * (slices[t].log_normalizer.abs() + slices[t + 1].log_normalizer.abs()).max(1.0);
            // Along `direction`, F1 gains at most `s · bound` up to step s.
            let bound: f64 = g0.iter().zip(&direction).map(|(g, d)| g * d).sum();
            loop {
                let step = block_step[t];
                let delta_t = point.delta[t].lerp(&target, step)?;
                // Ok(Some(..)) accepts; Ok(None) is a rejection decided by the
                // directional derivative alone, Err one decided by F1.
                let trial = (|| -> Result<Option<_>> {
                    let a = point.gamma[t].add_scaled(&delta_t, 1.0)?.scaled(0.5);
                    let b = point.gamma[t].add_scaled(&delta_t, -1.0)?.scaled(0.5);
                    let pt = two_slice_marginal(
                        t,
                        messages.incoming_forward(t),
                        chain.potential(t),
                        Some(&b),
                    )?;
                    let pn = two_slice_marginal(
                        t + 1,
                        Some(&a),
                        chain.potential(t + 1),
                        messages.incoming_backward(t + 1),
                    )?;
                    let gain = before - (pt.log_normalizer + pn.log_normalizer);
                    if gain > slack {
                        return Ok(Some((a, b, pt, pn)));
                    }
                    if gain < -slack {
                        return Err(Error::InnerStall { step, f1: gain });
                    }
                    let slope: f64 = block_gradient(&pt, &pn)?
                        .iter()
                        .zip(&direction)
                        .map(|(g, d)| g * d)
                        .sum();
                    Ok((slope >= 0.0).then_some((a, b, pt, pn)))
                })();
                let decisive = trial.is_err();
                if let Ok(Some((a, b, pt, pn))) = trial {
                    point.delta[t] = delta_t;
                    messages.forward[t] = a;
                    messages.backward[t] = b;
                    slices[t] = pt;
                    slices[t + 1] = pn;
                    steps.push(step);
                    block_step[t] = (1.5 * step).min(1.0);
                    resolved = false;
                    break;
                }
                block_step[t] = 0.5 * step;
                // A rejection at s puts the maximum along the line below s,
                // so the block cannot gain more than F1 can resolve.
                if step * bound <= slack && (decisive || block_step[t] < config.min_step) {
                    break;
                }
                if block_step[t] < config.min_step {
                    return Err(Error::InnerStall {
                        step: block_step[t],
                        f1: total_f1(&slices),
                    });
                }
            }
        }
        trace.push(total_f1(&slices));
    }
    Err(Error::InnerStall {
        step: block_step.iter().copied().fold(1.0, f64::min),
        f1: total_f1(&slices),
    })
}

/// `γ_t ← g⁻¹(½[⟨f(x_t)⟩_{p̂_t} + ⟨f(x_t)⟩_{p̂_{t+1}}])`.
pub fn outer_step(eval: &DualEvaluation) -> Result<Vec<CgCanonical>> {
    eval.forward_moments
        .iter()
        .zip(&eval.backward_moments)
        .enumerate()
        .map(|(t, (f, b))| {
            // equal-weight mixture of the two projections, kept in log domain
            let half = 0.5_f64.ln();
            let mix: Vec<Vec<GaussMoments>> = f
                .states
                .iter()
                .zip(&b.states)
                .map(|(x, y)| {
                    let mut x = x.clone();
                    let mut y = y.clone();
                    x.log_weight += half;
                    y.log_weight += half;
                    vec![x, y]
                })
                .collect();
            collapse(&mix)
                .and_then(|q| floored_canonical(&q))
                .map_err(|e| Error::OuterProjectionFailure {
                    t,
                    reason: e.to_string(),
                })
        })
        .collect()
}

/// `E_p[log ψ]` for one component of a two-slice marginal.
fn expected_log_potential(psi: &GaussCanonical, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let k = psi.precision();
    psi.scale() + psi.shift().dot(mean)
        - 0.5 * ((k * cov).trace() + mean.dot(&(k * mean)))
}

/// Entropy of a CG distribution with its switch label observed.
fn labeled_entropy<'a>(
    parts: impl Iterator<Item = &'a crate::gaussian::GaussMoments>,
) -> Result<f64> {
    let mut h = 0.0;
    for c in parts {
        let w = c.log_weight.exp();
        if w > 0.0 {
            h += w * (c.entropy()? - c.log_weight);
        }
    }
    Ok(h)
}

/// `Σ_t E_{p̂_t}[log p̂_t − log ψ_t] − Σ_{t<T−1} E_{q_t}[log q_t]`.
///
/// `q` holds at least the `T−1` inner beliefs; extra entries are ignored.
pub fn bethe_free_energy(chain: &Chain, slices: &[TwoSliceCg], q: &[CgMoments]) -> Result<f64> {
    if slices.len() != chain.len() {
        return Err(Error::DimensionMismatch {
            expected: chain.len(),
            found: slices.len(),
        });
    }
    let inner = chain.len().saturating_sub(1);
    if q.len() < inner {
        return Err(Error::DimensionMismatch {
            expected: inner,
            found: q.len(),
        });
    }
    let mut f = 0.0;
    for p in slices {
        f -= labeled_entropy(p.components.iter().map(|c| &c.moments))?;
        for c in &p.components {
            let w = c.moments.log_weight.exp();
            if w == 0.0 {
                continue;
            }
            let psi = match chain.potential(p.t) {
                TwoSlicePotential::Initial { per_state } => &per_state[c.next],
                TwoSlicePotential::Transition { switches, per_pair } => {
                    &per_pair[c.prev.unwrap_or(0) * switches + c.next]
                }
            };
            f -= w * expected_log_potential(psi, &c.moments.mean, &c.moments.covariance);
        }
    }
    for qt in &q[..inner] {
        f += labeled_entropy(qt.states.iter())?;
    }
    Ok(f)
}

/// Bethe free energy of the marginals implied by an EP message state.
pub fn message_free_energy(state: &MessageState, chain: &Chain) -> Result<f64> {
    let slices = slice_marginals(state, chain)?;
    bethe_free_energy(chain, &slices, &beliefs(state)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FreeEnergyReport {
    pub outer_iteration: usize,
    /// Bethe free energy of the inner-loop marginals and the outer-step
    /// beliefs.
    pub bethe: f64,
    pub f0: f64,
    /// `F1(γ, δ*)`.
    pub f1: f64,
    pub log_z: Vec<f64>,
    pub residual: f64,
    /// Accepted inner steps and the smallest step size used.
    pub inner_steps: usize,
    pub min_inner_step: f64,
}

impl FreeEnergyReport {
    /// `F0 + F1`, the saddle objective maximized over δ.
    pub fn objective(&self) -> f64 {
        self.f0 + self.f1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoubleLoopConfig {
    /// Outer stop: sup-norm change of the γ-beliefs in moment space.
    pub tol: f64,
    pub max_outer: usize,
    pub inner: InnerConfig,
}

impl Default for DoubleLoopConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_outer: 500,
            inner: InnerConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DoubleLoopRecord {
    pub run: EpRunRecord,
    pub reports: Vec<FreeEnergyReport>,
    pub saddle: SaddleState,
}

fn status_of(err: Error) -> RunStatus {
    match err {
        e @ Error::InnerStall { .. } => RunStatus::InnerStall(e.to_string()),
        e @ Error::OuterProjectionFailure { .. } => RunStatus::OuterProjectionFailure(e.to_string()),
        e => RunStatus::ImproperFailure(e.to_string()),
    }
}

/// Alternate full inner maximizations over δ with outer steps on γ.
///
/// `γ = δ = 0` lies outside the domain of `F1` whenever the bare transition
/// potentials are not normalizable (fewer observed than latent dimensions),
/// so the run starts from the messages of one undamped forward pass:
/// `α_t` filtered, `β_t = 0`.
pub fn double_loop(chain: &Chain, config: &DoubleLoopConfig) -> DoubleLoopRecord {
    double_loop_observed(chain, config, |_, _| {})
}

/// [`double_loop`] calling `observe` after every outer step.
pub fn double_loop_observed<F>(chain: &Chain, config: &DoubleLoopConfig, mut observe: F) -> DoubleLoopRecord
where
    F: FnMut(&IterationRecord, &FreeEnergyReport),
{
    let mut iterations = Vec::new();
    let mut reports = Vec::new();
    let mut status = RunStatus::MaxIters;
    let mut final_state = MessageState::zeros(chain);

    let mut filtered = MessageState::zeros(chain);
    let mut saddle = match forward_pass(&mut filtered, chain, 1.0)
        .and_then(|_| SaddleState::from_messages(&filtered))
    {
        Ok(s) => s,
        Err(e) => {
            return DoubleLoopRecord {
                run: EpRunRecord {
                    status: status_of(e),
                    damping: 1.0,
                    iterations,
                    first_forward_beliefs: None,
                    final_state,
                },
                reports,
                saddle: SaddleState::zeros(chain),
            };
        }
    };

    for k in 1..=config.max_outer {
        let step = (|| -> Result<_> {
            // A γ change can push the warm start outside the domain; the
            // symmetric split δ = 0 is always inside.
            let start = if dual_f1(chain, &saddle) > f64::NEG_INFINITY {
                saddle.delta.clone()
            } else {
                SaddleState::zeros(chain).delta
            };
            let inner = inner_loop(chain, &saddle.gamma, start, &config.inner)?;
            let gamma_new = outer_step(&inner.evaluation)?;
            Ok((inner, gamma_new))
        })();
        let (inner, gamma_new) = match step {
            Ok(v) => v,
            Err(e) => {
                status = status_of(e);
                break;
            }
        };
        let at_optimum = SaddleState {
            gamma: saddle.gamma.clone(),
            delta: inner.delta.clone(),
        };
        let summary = (|| -> Result<_> {
            let mut q: Vec<CgMoments> = gamma_new
                .iter()
                .map(|g| g.to_moments())
                .collect::<Result<_>>()?;
            q.push(inner.evaluation.slices[chain.len() - 1].project_next()?);
            let bethe = bethe_free_energy(chain, &inner.evaluation.slices, &q)?;
            let residual = saddle_residual(&inner.evaluation, &at_optimum)
                .unwrap_or(f64::INFINITY);
            let old_q: Option<Vec<CgMoments>> =
                saddle.gamma.iter().map(|g| g.to_moments().ok()).collect();
            let change = match old_q {
                Some(old) => belief_distance(&old, &q[..old.len()]),
                None => f64::INFINITY,
            };
            Ok((q, bethe, residual, change))
        })();
        let (q, bethe, residual, change) = match summary {
            Ok(v) => v,
            Err(e) => {
                status = RunStatus::OuterProjectionFailure(e.to_string());
                break;
            }
        };
        reports.push(FreeEnergyReport {
            outer_iteration: k,
            bethe,
            f0: f0(&saddle.gamma),
            f1: inner.evaluation.f1,
            log_z: inner.evaluation.log_z.clone(),
            residual,
            inner_steps: inner.steps.len(),
            min_inner_step: inner.steps.iter().copied().fold(1.0, f64::min),
        });
        let mut messages = match at_optimum.to_messages(chain) {
            Ok(m) => m,
            Err(e) => {
                status = status_of(e);
                break;
            }
        };
        let last = chain.len() - 1;
        if let Ok(a) = forward_update(&inner.evaluation.slices[last], None) {
            messages.forward[last] = a;
        }
        messages.iteration = k;
        iterations.push(IterationRecord {
            iteration: k,
            beliefs: q,
            max_change: change,
            log_likelihood: log_likelihood_estimate(&messages, chain).unwrap_or(f64::NAN),
        });
        observe(iterations.last().unwrap(), reports.last().unwrap());
        final_state = messages;
        saddle = SaddleState {
            gamma: gamma_new,
            delta: inner.delta,
        };
        if change <= config.tol {
            status = RunStatus::Converged;
            break;
        }
    }

    DoubleLoopRecord {
        run: EpRunRecord {
            status,
            damping: 1.0,
            iterations,
            first_forward_beliefs: None,
            final_state,
        },
        reports,
        saddle,
    }
}
