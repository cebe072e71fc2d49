use std::fmt;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, ensure, Context};
use serde::{Deserialize, Serialize};
use slds_ep::oracle::MAX_PATHS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Gpb2,
    Ep,
    DoubleLoop,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Gpb2 => "gpb2",
            Method::Ep => "ep",
            Method::DoubleLoop => "double_loop",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        match s.trim() {
            "gpb2" => Ok(Method::Gpb2),
            "ep" => Ok(Method::Ep),
            "double_loop" | "double-loop" => Ok(Method::DoubleLoop),
            other => bail!("unknown method `{other}` (expected gpb2, ep or double_loop)"),
        }
    }
}

/// Instance shape: switch states, latent and observed dimension, length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub switches: usize,
    pub latent: usize,
    pub observed: usize,
    pub length: usize,
}

impl Shape {
    pub fn paths(&self) -> u128 {
        (self.switches as u128)
            .checked_pow(self.length as u32)
            .unwrap_or(u128::MAX)
    }

    pub fn tag(&self) -> String {
        format!(
            "m{}n{}d{}t{}",
            self.switches, self.latent, self.observed, self.length
        )
    }
}

impl FromStr for Shape {
    type Err = anyhow::Error;

    /// `M,N,D,T`.
    fn from_str(s: &str) -> anyhow::Result<Self> {
        let v: Vec<usize> = s
            .split(',')
            .map(|x| x.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .with_context(|| format!("dims `{s}` must be four integers M,N,D,T"))?;
        ensure!(v.len() == 4, "dims `{s}` must be four integers M,N,D,T");
        Ok(Shape {
            switches: v[0],
            latent: v[1],
            observed: v[2],
            length: v[3],
        })
    }
}

/// Half-open seed range written `A..B`.
pub fn parse_seed_range(s: &str) -> anyhow::Result<Range<u64>> {
    let (a, b) = s
        .split_once("..")
        .with_context(|| format!("seed range `{s}` must look like A..B"))?;
    let a: u64 = a.trim().parse().with_context(|| format!("bad seed range `{s}`"))?;
    let b: u64 = b.trim().parse().with_context(|| format!("bad seed range `{s}`"))?;
    ensure!(a < b, "seed range `{s}` is empty");
    Ok(a..b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InstanceSource {
    /// `random_instance(shape, seed)` for every seed in `first..last`.
    Seeds {
        shape: Shape,
        first: u64,
        last: u64,
    },
    /// `count` instances with shapes drawn from M ∈ {2,3,4}, N, D ∈ {2,3,4},
    /// T ∈ {3,4,5}.
    Suite { count: usize, seed: u64 },
    Files { paths: Vec<PathBuf> },
}

fn default_damping() -> Vec<f64> {
    vec![1.0]
}
fn default_tol() -> f64 {
    1e-8
}
fn default_max_iters() -> usize {
    200
}
fn default_max_outer() -> usize {
    500
}
fn default_inner_tol() -> f64 {
    1e-10
}
fn default_retries() -> usize {
    3
}
fn default_kl_path_limit() -> u64 {
    4096
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub methods: Vec<Method>,
    /// Damping values for `ep`; other methods ignore them.
    #[serde(default = "default_damping")]
    pub damping: Vec<f64>,
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// EP sweep budget.
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    /// Double-loop outer budget.
    #[serde(default = "default_max_outer")]
    pub max_outer: usize,
    #[serde(default = "default_inner_tol")]
    pub inner_tol: f64,
    /// How many times an improper EP run is restarted with ε halved.
    #[serde(default = "default_retries")]
    pub retries: usize,
    /// KL is tracked every iteration only when `M^T` is at most this.
    #[serde(default = "default_kl_path_limit")]
    pub kl_path_limit: u64,
    pub source: InstanceSource,
    pub out: PathBuf,
    /// Worker threads; `None` uses the available parallelism.
    #[serde(default)]
    pub threads: Option<usize>,
    /// Write `wall_time_ms`. Off gives byte-identical reruns.
    #[serde(default = "default_true")]
    pub timing: bool,
}

impl ExperimentConfig {
    pub fn new(methods: Vec<Method>, source: InstanceSource, out: impl Into<PathBuf>) -> Self {
        Self {
            methods,
            damping: default_damping(),
            tol: default_tol(),
            max_iters: default_max_iters(),
            max_outer: default_max_outer(),
            inner_tol: default_inner_tol(),
            retries: default_retries(),
            kl_path_limit: default_kl_path_limit(),
            source,
            out: out.into(),
            threads: None,
            timing: true,
        }
    }

    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let cfg: Self = toml::from_str(text).context("invalid experiment config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        ensure!(!self.methods.is_empty(), "at least one method is required");
        if self.methods.contains(&Method::Ep) {
            ensure!(!self.damping.is_empty(), "ep needs at least one damping value");
        }
        for &e in &self.damping {
            ensure!(e > 0.0 && e <= 1.0, "damping {e} outside (0, 1]");
        }
        ensure!(self.tol > 0.0, "tol must be positive");
        ensure!(self.inner_tol > 0.0, "inner_tol must be positive");
        ensure!(self.max_iters >= 1, "max_iters must be at least 1");
        ensure!(self.max_outer >= 1, "max_outer must be at least 1");
        ensure!(self.threads != Some(0), "threads must be at least 1");
        match &self.source {
            InstanceSource::Seeds { shape, first, last } => {
                check_shape(shape)?;
                ensure!(first < last, "seed range {first}..{last} is empty");
            }
            InstanceSource::Suite { count, .. } => ensure!(*count >= 1, "suite count must be at least 1"),
            InstanceSource::Files { paths } => ensure!(!paths.is_empty(), "no instance files given"),
        }
        Ok(())
    }
}

pub fn check_shape(shape: &Shape) -> anyhow::Result<()> {
    ensure!(
        shape.switches >= 1 && shape.latent >= 1 && shape.observed >= 1 && shape.length >= 1,
        "dims {} must all be at least 1",
        shape.tag()
    );
    ensure!(
        shape.paths() <= MAX_PATHS,
        "dims {}: {} switch paths exceed the oracle limit {MAX_PATHS}",
        shape.tag(),
        shape.paths()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_cli_forms() {
        let s: Shape = "3,3,4,5".parse().unwrap();
        assert_eq!((s.switches, s.latent, s.observed, s.length), (3, 3, 4, 5));
        assert!("3,3,4".parse::<Shape>().is_err());
        assert_eq!(parse_seed_range("2..7").unwrap(), 2..7);
        assert!(parse_seed_range("7..7").is_err());
        assert_eq!("double_loop".parse::<Method>().unwrap(), Method::DoubleLoop);
        assert!("bp".parse::<Method>().is_err());
    }

    #[test]
    fn toml_defaults_and_guard() {
        let cfg = ExperimentConfig::from_toml(
            r#"
            methods = ["gpb2", "ep"]
            damping = [1.0, 0.5]
            out = "out"
            [source]
            kind = "seeds"
            shape = { switches = 3, latent = 3, observed = 4, length = 5 }
            first = 0
            last = 4
            "#,
        )
        .unwrap();
        assert_eq!(cfg.max_iters, 200);
        assert!(cfg.timing);
        let too_big = r#"
            methods = ["ep"]
            out = "out"
            [source]
            kind = "seeds"
            shape = { switches = 4, latent = 1, observed = 1, length = 11 }
            first = 0
            last = 1
        "#;
        assert!(ExperimentConfig::from_toml(too_big).is_err());
        assert!(ExperimentConfig::from_toml("methods = []\nout = \"o\"\n[source]\nkind = \"suite\"\ncount = 1\nseed = 0\n").is_err());
    }
}
