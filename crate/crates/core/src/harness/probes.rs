use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SCHEMA_VERSION;
use crate::error::{PndError, Result};
use crate::toy::{PlantedWorld, SyntheticScene};

/// How absent objects are picked for negative probes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Random,
    Popular,
    Adversarial,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Random, Strategy::Popular, Strategy::Adversarial];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Popular => "popular",
            Strategy::Adversarial => "adversarial",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = PndError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "random" => Ok(Strategy::Random),
            "popular" => Ok(Strategy::Popular),
            "adversarial" => Ok(Strategy::Adversarial),
            other => Err(PndError::config(format!("unknown strategy '{other}'"))),
        }
    }
}

/// One yes/no question about one scene.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Probe {
    pub scene_index: usize,
    pub object: usize,
    pub strategy: Strategy,
    pub ground_truth: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSet {
    pub schema_version: u32,
    pub strategy: Strategy,
    pub seed: u64,
    pub probes: Vec<Probe>,
    /// Scene visits that could not supply the needed probe polarity.
    pub skipped: usize,
}

/// Number of scenes each object appears in.
pub fn object_frequency(world: &PlantedWorld, scenes: &[SyntheticScene]) -> Vec<usize> {
    let mut freq = vec![0; world.n_objects()];
    for scene in scenes {
        for k in scene.present_set() {
            freq[k] += 1;
        }
    }
    freq
}

/// Absent objects eligible as negatives for `scene`, in preference order.
pub fn negative_candidates(
    world: &PlantedWorld,
    scene: &SyntheticScene,
    strategy: Strategy,
    frequency: &[usize],
    top_k: usize,
) -> Vec<usize> {
    let present = scene.present_set();
    let mut absent: Vec<usize> = (0..world.n_objects()).filter(|k| !present.contains(k)).collect();
    match strategy {
        Strategy::Random => absent,
        Strategy::Popular => {
            absent.sort_by(|&a, &b| frequency[b].cmp(&frequency[a]).then(a.cmp(&b)));
            absent.truncate(top_k);
            absent
        }
        Strategy::Adversarial => {
            if present.is_empty() {
                return Vec::new();
            }
            let pull = |k: usize| {
                present
                    .iter()
                    .map(|&p| world.cooccurrence[p][k])
                    .fold(f64::NEG_INFINITY, f64::max)
            };
            absent.sort_by(|&a, &b| pull(b).total_cmp(&pull(a)).then(a.cmp(&b)));
            absent.truncate(top_k);
            absent
        }
    }
}

/// Balanced probe set: even slots are positives, odd slots negatives, so
/// the split is exactly even (one extra positive when `n` is odd). Scenes
/// are visited in a seeded order; a scene that cannot supply the needed
/// polarity is skipped and counted.
pub fn gen_probes(
    world: &PlantedWorld,
    scenes: &[SyntheticScene],
    strategy: Strategy,
    n: usize,
    seed: u64,
    top_k: usize,
) -> Result<ProbeSet> {
    if n == 0 {
        return Err(PndError::config("probe count must be >= 1"));
    }
    if scenes.is_empty() {
        return Err(PndError::input("scene corpus is empty"));
    }
    if top_k == 0 {
        return Err(PndError::config("adversarial_k must be >= 1"));
    }
    for scene in scenes {
        scene.validate(world)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frequency = object_frequency(world, scenes);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    order.shuffle(&mut rng);

    let mut probes = Vec::with_capacity(n);
    let mut skipped = 0;
    let mut cursor = 0;
    for slot in 0..n {
        let positive = slot % 2 == 0;
        let mut misses = 0;
        loop {
            if misses == scenes.len() {
                return Err(PndError::input(format!(
                    "no scene can supply a {} probe for strategy {strategy}",
                    if positive { "positive" } else { "negative" }
                )));
            }
            let scene_index = order[cursor % order.len()];
            cursor += 1;
            let scene = &scenes[scene_index];
            let pool: Vec<usize> = if positive {
                scene.present_set().into_iter().collect()
            } else {
                negative_candidates(world, scene, strategy, &frequency, top_k)
            };
            match pool.choose(&mut rng) {
                Some(&object) => {
                    probes.push(Probe {
                        scene_index,
                        object,
                        strategy,
                        ground_truth: positive,
                    });
                    break;
                }
                None => {
                    skipped += 1;
                    misses += 1;
                }
            }
        }
    }
    if skipped > 0 {
        log::warn!("{strategy}: skipped {skipped} scene visits without a usable object");
    }
    Ok(ProbeSet {
        schema_version: SCHEMA_VERSION,
        strategy,
        seed,
        probes,
        skipped,
    })
}
