//! Suite runs: every method on every instance, one CSV row per iteration.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use slds_ep::cg::CgMoments;
use slds_ep::engine::{
    gpb2_filter, run_ep_observed, Chain, EpConfig, EpRunRecord, MessageState, RunStatus,
};
use slds_ep::free_energy::{double_loop_observed, message_free_energy, DoubleLoopConfig, InnerConfig};
use slds_ep::model::{serialize_beliefs, serialize_instance};
use slds_ep::oracle::{belief_kl_total, exact_beliefs, ExactPosterior, MAX_PATHS};

use crate::config::{ExperimentConfig, Method};
use crate::instances::{self, Instance};

/// Column order is the CSV header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub instance_id: String,
    pub method: Method,
    /// Damping actually used; empty for gpb2 and double_loop.
    pub epsilon: Option<f64>,
    /// 1-based sweep or outer step; 0 when the run failed before the first.
    pub iteration: usize,
    pub kl_total: Option<f64>,
    pub free_energy: Option<f64>,
    /// Final status of the run the row belongs to.
    pub status: String,
    /// Elapsed time from the start of the run to the end of this iteration.
    pub wall_time_ms: Option<f64>,
}

/// One method applied to one instance.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub instance_id: String,
    pub method: Method,
    /// Requested damping for ep runs.
    pub requested_epsilon: Option<f64>,
    pub epsilon: Option<f64>,
    pub status: RunStatus,
    pub iterations: usize,
    pub final_kl: Option<f64>,
    pub beliefs_file: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub rows: Vec<ResultRow>,
    pub runs: Vec<RunSummary>,
    pub csv_path: PathBuf,
}

struct Trace {
    beliefs: Vec<Vec<CgMoments>>,
    free_energy: Vec<Option<f64>>,
    elapsed_ms: Vec<f64>,
}

impl Trace {
    fn new() -> Self {
        Self {
            beliefs: Vec::new(),
            free_energy: Vec::new(),
            elapsed_ms: Vec::new(),
        }
    }
}

struct MethodRun {
    method: Method,
    order: usize,
    requested_epsilon: Option<f64>,
    epsilon: Option<f64>,
    status: RunStatus,
    trace: Trace,
}

fn ep_config(cfg: &ExperimentConfig, damping: f64) -> EpConfig {
    EpConfig {
        damping,
        max_iters: cfg.max_iters,
        tol: cfg.tol,
        ..EpConfig::default()
    }
}

/// Damped EP with the restart policy: an improper two-slice marginal halves
/// ε and restarts from zero messages, up to `retries` times.
pub fn ep_with_retries(chain: &Chain, config: &EpConfig, retries: usize) -> (EpRunRecord, Vec<Option<f64>>, Vec<f64>) {
    let mut cfg = *config;
    let mut attempt = 0;
    loop {
        let start = Instant::now();
        let mut free_energy = Vec::new();
        let mut elapsed = Vec::new();
        let rec = run_ep_observed(MessageState::zeros(chain), chain, &cfg, |_, state| {
            free_energy.push(message_free_energy(state, chain).ok());
            elapsed.push(start.elapsed().as_secs_f64() * 1e3);
        });
        if matches!(rec.status, RunStatus::ImproperFailure(_)) && attempt < retries {
            attempt += 1;
            cfg.damping /= 2.0;
            continue;
        }
        return (rec, free_energy, elapsed);
    }
}

fn run_method(
    chain: &Chain,
    cfg: &ExperimentConfig,
    method: Method,
    order: usize,
    damping: Option<f64>,
) -> MethodRun {
    let mut trace = Trace::new();
    let (status, epsilon) = match method {
        Method::Gpb2 => {
            let start = Instant::now();
            let status = match gpb2_filter(chain) {
                Ok(b) => {
                    trace.beliefs.push(b);
                    trace.free_energy.push(None);
                    trace.elapsed_ms.push(start.elapsed().as_secs_f64() * 1e3);
                    RunStatus::Converged
                }
                Err(e) => RunStatus::ImproperFailure(e.to_string()),
            };
            (status, None)
        }
        Method::Ep => {
            let eps = damping.expect("ep runs carry a damping value");
            let (rec, fe, elapsed) = ep_with_retries(chain, &ep_config(cfg, eps), cfg.retries);
            trace.beliefs = rec.iterations.into_iter().map(|r| r.beliefs).collect();
            trace.free_energy = fe;
            trace.elapsed_ms = elapsed;
            (rec.status, Some(rec.damping))
        }
        Method::DoubleLoop => {
            let config = DoubleLoopConfig {
                tol: cfg.tol,
                max_outer: cfg.max_outer,
                inner: InnerConfig {
                    tol: cfg.inner_tol,
                    ..InnerConfig::default()
                },
            };
            let start = Instant::now();
            let mut fe = Vec::new();
            let mut elapsed = Vec::new();
            let rec = double_loop_observed(chain, &config, |_, report| {
                fe.push(Some(report.bethe));
                elapsed.push(start.elapsed().as_secs_f64() * 1e3);
            });
            trace.beliefs = rec.run.iterations.into_iter().map(|r| r.beliefs).collect();
            trace.free_energy = fe;
            trace.elapsed_ms = elapsed;
            (rec.run.status, None)
        }
    };
    MethodRun {
        method,
        order,
        requested_epsilon: damping,
        epsilon,
        status,
        trace,
    }
}

fn beliefs_file_name(id: &str, method: Method, requested: Option<f64>) -> String {
    match requested {
        Some(e) => format!("{id}__{method}_eps{e}.json"),
        None => format!("{id}__{method}.json"),
    }
}

struct InstanceResult {
    rows: Vec<(usize, ResultRow)>,
    runs: Vec<RunSummary>,
}

fn run_instance(inst: &Instance, cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<InstanceResult> {
    fs::write(
        out.join("instances").join(format!("{}.json", inst.id)),
        serialize_instance(&inst.model, &inst.obs),
    )?;
    let shape = inst.shape();
    let exact: Option<ExactPosterior> = if shape.paths() <= MAX_PATHS {
        exact_beliefs(&inst.model, &inst.obs).ok()
    } else {
        None
    };
    let every_iteration = shape.paths() <= cfg.kl_path_limit as u128;
    let kl_of = |b: &[CgMoments]| -> Option<f64> {
        exact
            .as_ref()
            .and_then(|x| belief_kl_total(&x.beliefs, b).ok())
    };

    let mut plan: Vec<(Method, Option<f64>)> = Vec::new();
    for &m in &cfg.methods {
        if m == Method::Ep {
            plan.extend(cfg.damping.iter().map(|&e| (m, Some(e))));
        } else {
            plan.push((m, None));
        }
    }

    let chain = Chain::new(&inst.model, &inst.obs);
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for (order, (method, damping)) in plan.into_iter().enumerate() {
        let run = match &chain {
            Ok(c) => run_method(c, cfg, method, order, damping),
            Err(e) => MethodRun {
                method,
                order,
                requested_epsilon: damping,
                epsilon: damping,
                status: RunStatus::ImproperFailure(e.to_string()),
                trace: Trace::new(),
            },
        };
        let status = run.status.to_string();
        let n = run.trace.beliefs.len();
        let mut final_kl = None;
        for k in 0..n {
            let last = k + 1 == n;
            let kl = if every_iteration || last {
                kl_of(&run.trace.beliefs[k])
            } else {
                None
            };
            if last {
                final_kl = kl;
            }
            rows.push((
                run.order,
                ResultRow {
                    instance_id: inst.id.clone(),
                    method: run.method,
                    epsilon: run.epsilon,
                    iteration: k + 1,
                    kl_total: kl,
                    free_energy: run.trace.free_energy.get(k).copied().flatten(),
                    status: status.clone(),
                    wall_time_ms: cfg.timing.then(|| run.trace.elapsed_ms[k]),
                },
            ));
        }
        if n == 0 {
            rows.push((
                run.order,
                ResultRow {
                    instance_id: inst.id.clone(),
                    method: run.method,
                    epsilon: run.epsilon,
                    iteration: 0,
                    kl_total: None,
                    free_energy: None,
                    status: status.clone(),
                    wall_time_ms: None,
                },
            ));
        }
        let beliefs_file = match run.trace.beliefs.last() {
            Some(b) => {
                let path = out
                    .join("beliefs")
                    .join(beliefs_file_name(&inst.id, run.method, run.requested_epsilon));
                fs::write(&path, serialize_beliefs(b))?;
                Some(path)
            }
            None => None,
        };
        runs.push(RunSummary {
            instance_id: inst.id.clone(),
            method: run.method,
            requested_epsilon: run.requested_epsilon,
            epsilon: run.epsilon,
            status: run.status,
            iterations: n,
            final_kl,
            beliefs_file,
        });
    }
    Ok(InstanceResult { rows, runs })
}

/// Run the configured methods on every instance and write
/// `results.csv`, `instances/<id>.json` and `beliefs/<id>__<run>.json`
/// under the output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> anyhow::Result<ExperimentOutput> {
    cfg.validate()?;
    let list = instances::load(&cfg.source)?;
    let out = cfg.out.as_path();
    fs::create_dir_all(out.join("instances"))
        .with_context(|| format!("creating {}", out.display()))?;
    fs::create_dir_all(out.join("beliefs"))?;

    let threads = cfg
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
    let results: Vec<InstanceResult> = pool.install(|| {
        list.par_iter()
            .map(|inst| run_instance(inst, cfg, out))
            .collect::<anyhow::Result<_>>()
    })?;

    let mut keyed = Vec::new();
    let mut runs = Vec::new();
    for r in results {
        keyed.extend(r.rows);
        runs.extend(r.runs);
    }
    keyed.sort_by(|(oa, a), (ob, b)| {
        (&a.instance_id, a.method.name(), oa, a.iteration)
            .cmp(&(&b.instance_id, b.method.name(), ob, b.iteration))
    });
    runs.sort_by(|a, b| (&a.instance_id, a.method.name()).cmp(&(&b.instance_id, b.method.name())));
    let rows: Vec<ResultRow> = keyed.into_iter().map(|(_, r)| r).collect();

    let csv_path = out.join("results.csv");
    write_rows(&csv_path, &rows)?;
    Ok(ExperimentOutput {
        rows,
        runs,
        csv_path,
    })
}

pub fn write_rows(path: &Path, rows: &[ResultRow]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows(path: &Path) -> anyhow::Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    r.deserialize()
        .map(|row| row.map_err(anyhow::Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beliefs_file_names_are_distinct() {
        let a = beliefs_file_name("x", Method::Ep, Some(1.0));
        let b = beliefs_file_name("x", Method::Ep, Some(0.5));
        assert_ne!(a, b);
        assert_eq!(beliefs_file_name("x", Method::Gpb2, None), "x__gpb2.json");
    }

    #[test]
    fn csv_round_trip_keeps_empty_fields() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![ResultRow {
            instance_id: "a".into(),
            method: Method::DoubleLoop,
            epsilon: None,
            iteration: 3,
            kl_total: Some(0.25),
            free_energy: None,
            status: "limit_cycle:2".into(),
            wall_time_ms: None,
        }];
        let path = dir.path().join("r.csv");
        write_rows(&path, &rows).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(
            "instance_id,method,epsilon,iteration,kl_total,free_energy,status,wall_time_ms\n"
        ));
        assert!(text.contains("a,double_loop,,3,0.25,,limit_cycle:2,\n"));
        assert_eq!(read_rows(&path).unwrap(), rows);
    }
}
