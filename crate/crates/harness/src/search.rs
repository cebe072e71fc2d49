//! Search for instances on which undamped EP does not settle.

use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::Path;

use anyhow::Context;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use slds_ep::engine::{run_ep, Chain, EpConfig, EpRunRecord, RunStatus};
use slds_ep::model::serialize_instance;
use slds_ep::oracle::{belief_kl_total, exact_beliefs};

use crate::config::{check_shape, Shape};
use crate::instances::{seeded, seeded_id};

/// Number of trailing iterations inspected for oscillation.
pub const OSCILLATION_WINDOW: usize = 20;
/// KL is used for the oscillation test only up to this many switch paths.
pub const KL_PATH_LIMIT: u128 = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flagged {
    pub instance_id: String,
    pub seed: u64,
    pub status: String,
    /// Limit-cycle period, when one was detected.
    pub period: Option<usize>,
    /// Range of the tracked quantity over the last iterations.
    pub oscillation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub shape: Shape,
    pub seeds: (u64, u64),
    pub budget: usize,
    pub examined: usize,
    pub converged: usize,
    pub improper: usize,
    pub flagged: Vec<Flagged>,
}

impl SearchSummary {
    pub fn frequency(&self) -> f64 {
        self.flagged.len() as f64 / self.examined.max(1) as f64
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "dims {} seeds {}..{} budget {}",
            self.shape.tag(),
            self.seeds.0,
            self.seeds.1,
            self.budget
        );
        let _ = writeln!(
            s,
            "examined {} converged {} improper {} difficult {} ({:.1}%)",
            self.examined,
            self.converged,
            self.improper,
            self.flagged.len(),
            100.0 * self.frequency()
        );
        if self.flagged.is_empty() {
            let _ = writeln!(s, "no difficult instances found");
        }
        for f in &self.flagged {
            let _ = write!(s, "{} {}", f.instance_id, f.status);
            if let Some(p) = f.period {
                let _ = write!(s, " period {p}");
            }
            if let Some(o) = f.oscillation {
                let _ = write!(s, " oscillation {o:.3e}");
            }
            let _ = writeln!(s);
        }
        s
    }
}

fn range(values: &[f64]) -> f64 {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    hi - lo
}

/// Range of the last [`OSCILLATION_WINDOW`] KL values against the exact
/// beliefs, or of the log-likelihood estimates when enumeration is too large.
fn oscillation(rec: &EpRunRecord, exact: Option<&[slds_ep::cg::CgMoments]>) -> Option<f64> {
    let n = rec.iterations.len();
    if n < OSCILLATION_WINDOW {
        return None;
    }
    let tail = &rec.iterations[n - OSCILLATION_WINDOW..];
    let values: Vec<f64> = match exact {
        Some(x) => tail
            .iter()
            .map(|r| belief_kl_total(x, &r.beliefs))
            .collect::<Result<_, _>>()
            .ok()?,
        None => tail.iter().map(|r| r.log_likelihood).collect(),
    };
    Some(range(&values))
}

/// Classify one undamped EP run.
pub fn classify(rec: &EpRunRecord, exact: Option<&[slds_ep::cg::CgMoments]>, tol: f64) -> Option<(Option<usize>, Option<f64>)> {
    match rec.status {
        RunStatus::LimitCycle { period } => Some((Some(period), oscillation(rec, exact))),
        RunStatus::MaxIters => {
            let o = oscillation(rec, exact)?;
            (o > 10.0 * tol).then_some((None, Some(o)))
        }
        _ => None,
    }
}

/// Run undamped EP with `budget` sweeps on every seed; keep instances that
/// end in a limit cycle, or exhaust the budget while still oscillating.
/// Flagged instances and `summary.json` are written to `out` when given.
pub fn search_difficult(
    shape: &Shape,
    seeds: Range<u64>,
    budget: usize,
    tol: f64,
    out: Option<&Path>,
) -> anyhow::Result<SearchSummary> {
    check_shape(shape)?;
    anyhow::ensure!(budget >= 1, "budget must be at least 1");
    let config = EpConfig {
        damping: 1.0,
        max_iters: budget,
        tol,
        ..EpConfig::default()
    };
    let outcomes: Vec<(u64, RunStatus, Option<(Option<usize>, Option<f64>)>)> = seeds
        .clone()
        .into_par_iter()
        .map(|seed| {
            let inst = seeded(shape, seed)?;
            let chain = Chain::new(&inst.model, &inst.obs)?;
            let rec = run_ep(&chain, &config);
            let exact = if shape.paths() <= KL_PATH_LIMIT {
                exact_beliefs(&inst.model, &inst.obs).ok()
            } else {
                None
            };
            let flag = classify(&rec, exact.as_ref().map(|e| e.beliefs.as_slice()), tol);
            Ok((seed, rec.status, flag))
        })
        .collect::<anyhow::Result<_>>()?;

    let mut summary = SearchSummary {
        shape: *shape,
        seeds: (seeds.start, seeds.end),
        budget,
        examined: outcomes.len(),
        converged: 0,
        improper: 0,
        flagged: Vec::new(),
    };
    for (seed, status, flag) in outcomes {
        match status {
            RunStatus::Converged => summary.converged += 1,
            RunStatus::ImproperFailure(_) => summary.improper += 1,
            _ => {}
        }
        if let Some((period, osc)) = flag {
            summary.flagged.push(Flagged {
                instance_id: seeded_id(shape, seed),
                seed,
                status: status.to_string(),
                period,
                oscillation: osc,
            });
        }
    }

    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for f in &summary.flagged {
            let inst = seeded(shape, f.seed)?;
            fs::write(
                dir.join(format!("{}.json", f.instance_id)),
                serialize_instance(&inst.model, &inst.obs),
            )?;
        }
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
        fs::write(dir.join("summary.txt"), summary.to_text())?;
    }
    Ok(summary)
}
