use std::fmt::Write as _;

use slds_ep::engine::{run_ep, run_ep_from, Chain, EpConfig, RunStatus};
use slds_ep::free_energy::{double_loop, hessian_diagnostics, DoubleLoopConfig, HessianReport, SaddleState};
use slds_ep::model::{ObservationSequence, SldsModel};
use slds_ep::oracle::exact_beliefs;

use crate::config::Method;

fn fmt_vec(v: impl IntoIterator<Item = f64>) -> String {
    let parts: Vec<String> = v.into_iter().map(|x| format!("{x:.6e}")).collect();
    format!("[{}]", parts.join(", "))
}

pub fn oracle_report(model: &SldsModel, obs: &ObservationSequence) -> anyhow::Result<String> {
    let exact = exact_beliefs(model, obs)?;
    let mut s = String::new();
    writeln!(s, "log_likelihood {:.12e}", exact.log_likelihood)?;
    for (t, q) in exact.beliefs.iter().enumerate() {
        writeln!(s, "t {t}")?;
        for (j, st) in q.states.iter().enumerate() {
            writeln!(s, "  state {j} weight {:.12e}", st.log_weight.exp())?;
            writeln!(s, "    mean {}", fmt_vec(st.mean.iter().copied()))?;
            for r in 0..st.covariance.nrows() {
                let lead = if r == 0 { "    cov  " } else { "         " };
                writeln!(s, "{lead}{}", fmt_vec(st.covariance.row(r).iter().copied()))?;
            }
        }
    }
    Ok(s)
}

#[derive(Debug, Clone)]
pub struct DiagOutcome {
    pub status: RunStatus,
    pub hessian: Option<HessianReport>,
    /// Why no Hessian was computed.
    pub note: Option<String>,
}

/// Run `method` to a fixed point and report the saddle Hessian there.
/// EP runs are followed by `extra_sweeps` sweeps at damping 0.1.
pub fn diagnose(
    model: &SldsModel,
    obs: &ObservationSequence,
    method: Method,
    damping: f64,
    extra_sweeps: usize,
) -> anyhow::Result<DiagOutcome> {
    let chain = Chain::new(model, obs)?;
    let (status, point) = match method {
        Method::Ep => {
            let rec = run_ep(
                &chain,
                &EpConfig {
                    damping,
                    ..EpConfig::default()
                },
            );
            if !rec.status.is_converged() {
                return Ok(DiagOutcome {
                    status: rec.status,
                    hessian: None,
                    note: Some("no fixed point reached".into()),
                });
            }
            let mut state = rec.final_state;
            if extra_sweeps > 0 {
                let held = run_ep_from(
                    state,
                    &chain,
                    &EpConfig {
                        damping: 0.1,
                        max_iters: extra_sweeps,
                        tol: 0.0,
                        ..EpConfig::default()
                    },
                );
                if let RunStatus::ImproperFailure(e) = &held.status {
                    return Ok(DiagOutcome {
                        status: held.status.clone(),
                        hessian: None,
                        note: Some(e.clone()),
                    });
                }
                state = held.final_state;
            }
            (rec.status, SaddleState::from_messages(&state)?)
        }
        Method::DoubleLoop => {
            let rec = double_loop(&chain, &DoubleLoopConfig::default());
            if !rec.run.status.is_converged() {
                return Ok(DiagOutcome {
                    status: rec.run.status,
                    hessian: None,
                    note: Some("no fixed point reached".into()),
                });
            }
            (rec.run.status, rec.saddle)
        }
        Method::Gpb2 => anyhow::bail!("gpb2 has no fixed point to diagnose"),
    };
    match hessian_diagnostics(&chain, &point) {
        Ok(h) => Ok(DiagOutcome {
            status,
            hessian: Some(h),
            note: None,
        }),
        Err(e) => Ok(DiagOutcome {
            status,
            hessian: None,
            note: Some(e.to_string()),
        }),
    }
}

pub fn diag_report(d: &DiagOutcome) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "status {}", d.status);
    if let Some(note) = &d.note {
        let _ = writeln!(s, "note {note}");
    }
    if let Some(h) = &d.hessian {
        let _ = writeln!(s, "H_gamma_gamma eigenvalues {}", fmt_vec(h.gamma_gamma.iter().copied()));
        let _ = writeln!(s, "H_delta_delta eigenvalues {}", fmt_vec(h.delta_delta.iter().copied()));
        let _ = writeln!(s, "H_star eigenvalues {}", fmt_vec(h.schur.iter().copied()));
        let _ = writeln!(s, "max H_delta_delta {:.6e}", h.max_delta_delta());
        let _ = writeln!(s, "min H_star {:.6e}", h.min_schur());
        let _ = writeln!(s, "descent_ascent_stable {}", h.descent_ascent_stable);
        let _ = writeln!(s, "local_minimum {}", h.local_minimum);
    }
    s
}
