//! Collapse-product message passing on the SLDS chain.
//!
//! Slice `t` holds the potential `ψ_t`. The forward message `α_t` flows from
//! `ψ_t` into `x_t`, the backward message `β_t` from `ψ_{t+1}` back into
//! `x_t`; `β_{T−1}` is the unit potential and there is no `α_{−1}`. The belief
//! at `x_t` is `α_t · β_t`.
//!
//! One update multiplies the local potential with both incoming messages,
//! collapses the resulting mixture onto the CG family at the target slice and
//! divides out the message that came from there.

use std::collections::VecDeque;
use std::fmt;

use crate::cg::{collapse, logsumexp, CgCanonical, CgMoments, MIN_STATE_WEIGHT};
use crate::error::{Error, Result};
use crate::gaussian::{GaussCanonical, GaussMoments};
use crate::model::{ObservationSequence, SldsModel, TwoSlicePotential};

/// A model with its evidence absorbed into per-slice potentials.
#[derive(Debug, Clone)]
pub struct Chain {
    switches: usize,
    latent: usize,
    potentials: Vec<TwoSlicePotential>,
}

impl Chain {
    pub fn new(model: &SldsModel, obs: &ObservationSequence) -> Result<Self> {
        model.validate()?;
        model.validate_observations(obs)?;
        let dims = model.dims();
        Ok(Self {
            switches: dims.switches,
            latent: dims.latent,
            potentials: model.potentials(obs)?,
        })
    }

    pub fn len(&self) -> usize {
        self.potentials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.potentials.is_empty()
    }

    pub fn switches(&self) -> usize {
        self.switches
    }

    pub fn latent(&self) -> usize {
        self.latent
    }

    pub fn potential(&self, t: usize) -> &TwoSlicePotential {
        &self.potentials[t]
    }
}

/// Forward and backward messages of one EP run.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageState {
    /// `α_0..α_{T−1}`.
    pub forward: Vec<CgCanonical>,
    /// `β_0..β_{T−2}`; `β_{T−1}` is implicitly the unit potential.
    pub backward: Vec<CgCanonical>,
    pub iteration: usize,
}

impl MessageState {
    /// All canonical parameters zero.
    pub fn zeros(chain: &Chain) -> Self {
        let unit = CgCanonical::unit(chain.switches, chain.latent);
        Self {
            forward: vec![unit.clone(); chain.len()],
            backward: vec![unit; chain.len().saturating_sub(1)],
            iteration: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    /// Message from slice `t` back to `x_{t−1}` as seen by slice `t` (`None`
    /// at t = 0).
    pub fn incoming_forward(&self, t: usize) -> Option<&CgCanonical> {
        t.checked_sub(1).map(|p| &self.forward[p])
    }

    /// `β_t`, `None` for the last slice.
    pub fn incoming_backward(&self, t: usize) -> Option<&CgCanonical> {
        self.backward.get(t)
    }

    /// Canonical parameters of the belief at `x_t`.
    pub fn belief_canonical(&self, t: usize) -> Result<CgCanonical> {
        match self.incoming_backward(t) {
            Some(b) => self.forward[t].add_scaled(b, 1.0),
            None => Ok(self.forward[t].clone()),
        }
    }
}

/// One component `(i, j)` of a two-slice marginal. `prev` is `None` at t = 0.
#[derive(Debug, Clone, PartialEq)]
pub struct PairComponent {
    pub prev: Option<usize>,
    pub next: usize,
    /// Normalized log weight, joint mean and covariance over
    /// `(z_{t−1}, z_t)` (or `z_0` alone at t = 0).
    pub moments: GaussMoments,
}

/// `p̂_t ∝ α_{t−1} ψ_t β_t`: M² weighted joint Gaussians (M at t = 0).
#[derive(Debug, Clone, PartialEq)]
pub struct TwoSliceCg {
    pub t: usize,
    pub switches: usize,
    pub latent: usize,
    pub components: Vec<PairComponent>,
    /// `log Z_t`, the log mass of the product before normalization.
    pub log_normalizer: f64,
}

impl TwoSliceCg {
    fn project(&self, onto_next: bool) -> Result<CgMoments> {
        let n = self.latent;
        let mut mix: Vec<Vec<GaussMoments>> = vec![Vec::new(); self.switches];
        for c in &self.components {
            let (state, block) = match (onto_next, c.prev) {
                (true, None) => (c.next, c.moments.clone()),
                (true, Some(_)) => (c.next, c.moments.block(n, n)),
                (false, Some(i)) => (i, c.moments.block(0, n)),
                (false, None) => {
                    return Err(Error::IndexOutOfRange { t: 0, len: 0 });
                }
            };
            mix[state].push(block);
        }
        let mut q = collapse(&mix)?;
        q.log_mass += self.log_normalizer;
        Ok(q)
    }

    /// Collapse onto `x_t`; `log_mass` is `log Z_t`.
    pub fn project_next(&self) -> Result<CgMoments> {
        self.project(true)
    }

    /// Collapse onto `x_{t−1}`; undefined at t = 0.
    pub fn project_prev(&self) -> Result<CgMoments> {
        self.project(false)
    }
}

/// Multiply `α_{t−1}`, `ψ_t` and `β_t` and convert each component to moments.
pub fn two_slice_marginal(
    t: usize,
    prev: Option<&CgCanonical>,
    potential: &TwoSlicePotential,
    next: Option<&CgCanonical>,
) -> Result<TwoSliceCg> {
    let improper = |prev, next, p: &GaussCanonical| Error::ImproperTwoSlice {
        t,
        prev,
        next,
        eigenvalue: crate::gaussian::min_eigenvalue(p.precision()),
    };
    let mut components = Vec::new();
    let (switches, latent) = match potential {
        TwoSlicePotential::Initial { per_state } => {
            let n = per_state[0].dim();
            for (j, psi) in per_state.iter().enumerate() {
                let joint = match next {
                    Some(b) => psi.add_scaled(b.state(j), 1.0)?,
                    None => psi.clone(),
                };
                let moments = joint.to_moments().map_err(|_| improper(None, j, &joint))?;
                components.push(PairComponent {
                    prev: None,
                    next: j,
                    moments,
                });
            }
            (per_state.len(), n)
        }
        TwoSlicePotential::Transition { switches, per_pair } => {
            let m = *switches;
            let n = per_pair[0].dim() / 2;
            let alpha = prev.ok_or(Error::IndexOutOfRange { t, len: 0 })?;
            let alpha_emb: Vec<GaussCanonical> =
                alpha.states().iter().map(|a| a.embed(2 * n, 0)).collect();
            let beta_emb: Option<Vec<GaussCanonical>> =
                next.map(|b| b.states().iter().map(|s| s.embed(2 * n, n)).collect());
            for i in 0..m {
                for j in 0..m {
                    let mut joint = per_pair[i * m + j].add_scaled(&alpha_emb[i], 1.0)?;
                    if let Some(b) = &beta_emb {
                        joint = joint.add_scaled(&b[j], 1.0)?;
                    }
                    let moments = joint
                        .to_moments()
                        .map_err(|_| improper(Some(i), j, &joint))?;
                    components.push(PairComponent {
                        prev: Some(i),
                        next: j,
                        moments,
                    });
                }
            }
            (m, n)
        }
    };
    let log_normalizer = logsumexp(components.iter().map(|c| c.moments.log_weight));
    for c in &mut components {
        c.moments.log_weight -= log_normalizer;
    }
    Ok(TwoSliceCg {
        t,
        switches,
        latent,
        components,
        log_normalizer,
    })
}

/// Inverse link with switch-state weights floored at [`MIN_STATE_WEIGHT`].
///
/// States whose posterior weight underflows the floor still get a message;
/// the floor perturbs beliefs by at most that weight.
pub fn floored_canonical(q: &CgMoments) -> Result<CgCanonical> {
    let floor = MIN_STATE_WEIGHT.ln();
    let mut q = q.clone();
    for s in &mut q.states {
        s.log_weight = s.log_weight.max(floor);
    }
    q.to_canonical()
}

/// `α̃_t = g⁻¹(⟨f(x_t)⟩_{p̂_t}) − β_t`.
pub fn forward_update(p: &TwoSliceCg, beta: Option<&CgCanonical>) -> Result<CgCanonical> {
    let q = floored_canonical(&p.project_next()?)?;
    match beta {
        Some(b) => q.add_scaled(b, -1.0),
        None => Ok(q),
    }
}

/// `β̃_{t−1} = g⁻¹(⟨f(x_{t−1})⟩_{p̂_t}) − α_{t−1}`.
pub fn backward_update(p: &TwoSliceCg, alpha: &CgCanonical) -> Result<CgCanonical> {
    floored_canonical(&p.project_prev()?)?.add_scaled(alpha, -1.0)
}

/// Two-slice marginal of slice `t` under the messages in `state`.
pub fn slice_marginal(state: &MessageState, chain: &Chain, t: usize) -> Result<TwoSliceCg> {
    two_slice_marginal(
        t,
        state.incoming_forward(t),
        chain.potential(t),
        state.incoming_backward(t),
    )
}

/// All `T` two-slice marginals.
pub fn slice_marginals(state: &MessageState, chain: &Chain) -> Result<Vec<TwoSliceCg>> {
    (0..chain.len())
        .map(|t| slice_marginal(state, chain, t))
        .collect()
}

/// Forward half-sweep with damping `step`, returning `log Z_t` for each slice.
pub fn forward_pass(state: &mut MessageState, chain: &Chain, step: f64) -> Result<Vec<f64>> {
    let mut log_z = Vec::with_capacity(chain.len());
    for t in 0..chain.len() {
        let p = slice_marginal(state, chain, t)?;
        log_z.push(p.log_normalizer);
        let target = forward_update(&p, state.incoming_backward(t))?;
        state.forward[t] = state.forward[t].lerp(&target, step)?;
    }
    Ok(log_z)
}

/// Backward half-sweep with damping `step`.
pub fn backward_pass(state: &mut MessageState, chain: &Chain, step: f64) -> Result<()> {
    for t in (1..chain.len()).rev() {
        let p = slice_marginal(state, chain, t)?;
        let target = backward_update(&p, &state.forward[t - 1])?;
        state.backward[t - 1] = state.backward[t - 1].lerp(&target, step)?;
    }
    Ok(())
}

/// One forward pass followed by one backward pass; each message moves a
/// fraction `step` of the way to its full update in canonical parameters.
pub fn ep_sweep(state: &MessageState, chain: &Chain, step: f64) -> Result<MessageState> {
    let mut next = state.clone();
    forward_pass(&mut next, chain, step)?;
    backward_pass(&mut next, chain, step)?;
    next.iteration += 1;
    Ok(next)
}

/// Beliefs `q_t ∝ α_t β_t` in moment form.
pub fn beliefs(state: &MessageState) -> Result<Vec<CgMoments>> {
    (0..state.len())
        .map(|t| state.belief_canonical(t)?.to_moments())
        .collect()
}

/// Sup-norm distance between two belief sequences in expected sufficient
/// statistics `(p_j, p_j m_j, p_j(V_j + m_j m_jᵀ))`.
pub fn belief_distance(a: &[CgMoments], b: &[CgMoments]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.to_stats().max_abs_difference(&y.to_stats()))
        .fold(0.0, f64::max)
}

/// Beliefs after a single undamped forward pass from zero messages.
pub fn gpb2_filter(chain: &Chain) -> Result<Vec<CgMoments>> {
    let mut state = MessageState::zeros(chain);
    forward_pass(&mut state, chain, 1.0)?;
    beliefs(&state)
}

/// Log-likelihood estimate from an undamped forward pass starting at `state`.
///
/// Each `α_t + β_t` produced by the pass has unit mass, so the estimate is
/// `Σ_t log Z_t`; exact when M = 1.
pub fn log_likelihood_estimate(state: &MessageState, chain: &Chain) -> Result<f64> {
    let mut scratch = state.clone();
    Ok(forward_pass(&mut scratch, chain, 1.0)?.iter().sum())
}

/// Largest violation of the expectation constraints
/// `⟨f(x_t)⟩_{p̂_t} = ⟨f(x_t)⟩_{q_t} = ⟨f(x_t)⟩_{p̂_{t+1}}`, in sufficient
/// statistics.
pub fn constraint_residual(state: &MessageState, chain: &Chain) -> Result<f64> {
    let slices = slice_marginals(state, chain)?;
    let qs = beliefs(state)?;
    let mut worst: f64 = 0.0;
    for t in 0..chain.len() {
        let fwd = slices[t].project_next()?.to_stats();
        let q = qs[t].to_stats();
        worst = worst.max(fwd.max_abs_difference(&q));
        if t + 1 < chain.len() {
            let bwd = slices[t + 1].project_prev()?.to_stats();
            worst = worst.max(fwd.max_abs_difference(&bwd));
            worst = worst.max(bwd.max_abs_difference(&q));
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpConfig {
    /// Damping step ε ∈ (0, 1]; 1 is undamped EP.
    pub damping: f64,
    pub max_iters: usize,
    /// Convergence threshold on the sup-norm belief change per sweep.
    pub tol: f64,
    /// Longest limit-cycle period looked for.
    pub cycle_window: usize,
}

impl Default for EpConfig {
    fn default() -> Self {
        Self {
            damping: 1.0,
            max_iters: 200,
            tol: 1e-8,
            cycle_window: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Converged,
    LimitCycle { period: usize },
    MaxIters,
    ImproperFailure(String),
    InnerStall(String),
    OuterProjectionFailure(String),
}

impl RunStatus {
    pub fn is_converged(&self) -> bool {
        matches!(self, RunStatus::Converged)
    }
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunStatus::Converged => f.write_str("converged"),
            RunStatus::LimitCycle { period } => write!(f, "limit_cycle:{period}"),
            RunStatus::MaxIters => f.write_str("max_iters"),
            RunStatus::ImproperFailure(_) => f.write_str("improper_failure"),
            RunStatus::InnerStall(_) => f.write_str("inner_stall"),
            RunStatus::OuterProjectionFailure(_) => f.write_str("outer_projection_failure"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub beliefs: Vec<CgMoments>,
    /// Sup-norm belief change from the previous sweep (∞ on the first).
    pub max_change: f64,
    pub log_likelihood: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpRunRecord {
    pub status: RunStatus,
    pub damping: f64,
    pub iterations: Vec<IterationRecord>,
    /// Beliefs after the forward half of the first sweep.
    pub first_forward_beliefs: Option<Vec<CgMoments>>,
    pub final_state: MessageState,
}

impl EpRunRecord {
    pub fn final_beliefs(&self) -> Option<&[CgMoments]> {
        self.iterations.last().map(|r| r.beliefs.as_slice())
    }
}

/// Iterate damped sweeps from zero messages until convergence, a detected
/// limit cycle, the iteration budget, or an improper two-slice marginal.
pub fn run_ep(chain: &Chain, config: &EpConfig) -> EpRunRecord {
    run_ep_from(MessageState::zeros(chain), chain, config)
}

pub fn run_ep_from(initial: MessageState, chain: &Chain, config: &EpConfig) -> EpRunRecord {
    run_ep_observed(initial, chain, config, |_, _| {})
}

/// [`run_ep_from`] calling `observe` after every completed sweep.
pub fn run_ep_observed<F>(
    initial: MessageState,
    chain: &Chain,
    config: &EpConfig,
    mut observe: F,
) -> EpRunRecord
where
    F: FnMut(&IterationRecord, &MessageState),
{
    let mut state = initial;
    let mut iterations = Vec::new();
    let mut first_forward_beliefs = None;
    let mut history: VecDeque<Vec<CgMoments>> = VecDeque::with_capacity(config.cycle_window + 1);
    let mut status = RunStatus::MaxIters;

    for it in 1..=config.max_iters {
        let step = (|| -> Result<MessageState> {
            let mut next = state.clone();
            forward_pass(&mut next, chain, config.damping)?;
            if it == 1 {
                first_forward_beliefs = beliefs(&next).ok();
            }
            backward_pass(&mut next, chain, config.damping)?;
            next.iteration += 1;
            Ok(next)
        })();
        let snapshot = step.and_then(|next| Ok((beliefs(&next)?, next)));
        let (current, next) = match snapshot {
            Ok(v) => v,
            Err(e) => {
                status = RunStatus::ImproperFailure(e.to_string());
                break;
            }
        };
        state = next;
        let log_likelihood = log_likelihood_estimate(&state, chain).unwrap_or(f64::NAN);
        let max_change = history
            .back()
            .map_or(f64::INFINITY, |prev| belief_distance(prev, &current));
        iterations.push(IterationRecord {
            iteration: it,
            beliefs: current.clone(),
            max_change,
            log_likelihood,
        });
        observe(iterations.last().unwrap(), &state);
        if max_change < config.tol {
            status = RunStatus::Converged;
            break;
        }
        let cycle = (2..=config.cycle_window.min(history.len())).find(|&lag| {
            belief_distance(&history[history.len() - lag], &current) < config.tol
        });
        if let Some(period) = cycle {
            status = RunStatus::LimitCycle { period };
            break;
        }
        history.push_back(current);
        if history.len() > config.cycle_window {
            history.pop_front();
        }
    }

    EpRunRecord {
        status,
        damping: config.damping,
        iterations,
        first_forward_beliefs,
        final_state: state,
    }
}
