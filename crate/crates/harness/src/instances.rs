use anyhow::Context;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slds_ep::model::{parse_instance, random_instance, ObservationSequence, SldsModel};

use crate::config::{InstanceSource, Shape};

#[derive(Debug, Clone)]
pub struct Instance {
    pub id: String,
    pub model: SldsModel,
    pub obs: ObservationSequence,
}

impl Instance {
    pub fn shape(&self) -> Shape {
        let d = self.model.dims();
        Shape {
            switches: d.switches,
            latent: d.latent,
            observed: d.observed,
            length: self.obs.len(),
        }
    }
}

pub fn seeded_id(shape: &Shape, seed: u64) -> String {
    format!("{}-s{seed:06}", shape.tag())
}

pub fn seeded(shape: &Shape, seed: u64) -> anyhow::Result<Instance> {
    let (model, obs) = random_instance(
        shape.switches,
        shape.latent,
        shape.observed,
        shape.length,
        seed,
    )?;
    Ok(Instance {
        id: seeded_id(shape, seed),
        model,
        obs,
    })
}

/// Shapes and seeds of a mixed suite, deterministic in `seed`.
pub fn suite_members(count: usize, seed: u64) -> Vec<(Shape, u64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let shape = Shape {
                switches: rng.random_range(2..=4),
                latent: rng.random_range(2..=4),
                observed: rng.random_range(2..=4),
                length: rng.random_range(3..=5),
            };
            (shape, rng.random_range(0..1_000_000))
        })
        .collect()
}

pub fn load(source: &InstanceSource) -> anyhow::Result<Vec<Instance>> {
    match source {
        InstanceSource::Seeds { shape, first, last } => {
            (*first..*last).map(|s| seeded(shape, s)).collect()
        }
        InstanceSource::Suite { count, seed } => suite_members(*count, *seed)
            .into_iter()
            .enumerate()
            .map(|(k, (shape, s))| {
                let mut inst = seeded(&shape, s)?;
                inst.id = format!("suite{k:03}-{}", inst.id);
                Ok(inst)
            })
            .collect(),
        InstanceSource::Files { paths } => paths
            .iter()
            .map(|p| {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading {}", p.display()))?;
                let (model, obs) =
                    parse_instance(&text).with_context(|| format!("in {}", p.display()))?;
                let id = p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| p.display().to_string());
                Ok(Instance { id, model, obs })
            })
            .collect(),
    }
}
