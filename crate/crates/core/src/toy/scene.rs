use std::collections::BTreeSet;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::world::PlantedWorld;
use crate::augment::VisualFeatures;
use crate::error::{PndError, Result};
use crate::matrix::Matrix;

/// A square grid of cells, each holding an object id or background (`None`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub grid_side: usize,
    pub cells: Vec<Option<usize>>,
}

impl SyntheticScene {
    pub fn empty(grid_side: usize) -> Self {
        Self {
            grid_side,
            cells: vec![None; grid_side * grid_side],
        }
    }

    pub fn with_objects(grid_side: usize, placements: &[(usize, usize)]) -> Result<Self> {
        let mut scene = Self::empty(grid_side);
        for &(cell, object) in placements {
            let slot = scene
                .cells
                .get_mut(cell)
                .ok_or_else(|| PndError::input(format!("cell {cell} outside a {grid_side}x{grid_side} grid")))?;
            *slot = Some(object);
        }
        Ok(scene)
    }

    /// Distinct object ids in the grid. Always derived from the cells, so it
    /// cannot drift out of sync.
    pub fn present_set(&self) -> BTreeSet<usize> {
        self.cells.iter().flatten().copied().collect()
    }

    pub fn contains(&self, object: usize) -> bool {
        self.cells.contains(&Some(object))
    }

    pub fn cell_count(&self, object: usize) -> usize {
        self.cells.iter().filter(|&&c| c == Some(object)).count()
    }

    /// Object covering the most cells; ties go to the lowest id.
    pub fn dominant_object(&self) -> Option<usize> {
        self.present_set()
            .into_iter()
            .max_by(|&a, &b| self.cell_count(a).cmp(&self.cell_count(b)).then(b.cmp(&a)))
    }

    pub fn validate(&self, world: &PlantedWorld) -> Result<()> {
        if self.grid_side != world.grid_side || self.cells.len() != self.grid_side * self.grid_side {
            return Err(PndError::shape(format!(
                "scene grid {}x{} ({} cells) does not match world grid {}",
                self.grid_side,
                self.grid_side,
                self.cells.len(),
                world.grid_side
            )));
        }
        if let Some(bad) = self.cells.iter().flatten().find(|&&id| id >= world.n_objects()) {
            return Err(PndError::input(format!("unknown object id {bad}")));
        }
        Ok(())
    }
}

/// Ground truth for "is `object` present?".
pub fn oracle_answer(world: &PlantedWorld, scene: &SyntheticScene, object: usize) -> Result<bool> {
    if object >= world.n_objects() {
        return Err(PndError::input(format!("unknown object id {object}")));
    }
    Ok(scene.contains(object))
}

/// Stand-in vision encoder: embedding row plus isotropic Gaussian jitter of
/// scale `world.encoder_sigma`. Each patch uses its own noise stream.
pub fn encode_scene(world: &PlantedWorld, scene: &SyntheticScene, seed: u64) -> Result<VisualFeatures> {
    scene.validate(world)?;
    let d = world.d_feat();
    let sigma = world.encoder_sigma;
    let mut values = Matrix::zeros(scene.cells.len(), d);
    for (j, cell) in scene.cells.iter().enumerate() {
        let base = match cell {
            Some(id) => world.embedding(*id),
            None => &world.background_embedding,
        };
        let row = values.row_mut(j);
        if sigma == 0.0 {
            row.copy_from_slice(base);
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(j as u64);
        for (o, &b) in row.iter_mut().zip(base) {
            let eps: f64 = StandardNormal.sample(&mut rng);
            *o = b + sigma * eps;
        }
    }
    VisualFeatures::original(scene.grid_side, values)
}

/// How random scenes are composed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    /// Inclusive range of objects drawn from the scene's main clique.
    pub main_objects: (usize, usize),
    /// Chance of one extra object from another clique.
    pub distractor_prob: f64,
    /// Inclusive range of cells per object.
    pub cells_per_object: (usize, usize),
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            main_objects: (1, 3),
            distractor_prob: 0.35,
            cells_per_object: (1, 4),
        }
    }
}

fn draw_weighted(candidates: &[usize], weights: &[f64], rng: &mut ChaCha8Rng) -> Option<usize> {
    let w: Vec<f64> = candidates.iter().map(|&c| weights[c]).collect();
    let dist = WeightedIndex::new(&w).ok()?;
    Some(candidates[dist.sample(rng)])
}

/// Draws one scene: a main clique chosen by total popularity, a few of its
/// objects by popularity, and occasionally a distractor from elsewhere.
pub fn sample_scene(world: &PlantedWorld, params: &SceneParams, rng: &mut ChaCha8Rng) -> SyntheticScene {
    let n = world.n_objects();
    let n_cliques = world.cliques.iter().max().map_or(1, |m| m + 1);
    let clique_weight: Vec<f64> = (0..n_cliques)
        .map(|c| (0..n).filter(|&k| world.cliques[k] == c).map(|k| world.popularity[k]).sum())
        .collect();
    let clique = WeightedIndex::new(&clique_weight).map_or(0, |d| d.sample(rng));

    let mut pool: Vec<usize> = (0..n).filter(|&k| world.cliques[k] == clique).collect();
    let (lo, hi) = params.main_objects;
    let want = rng.random_range(lo.max(1)..=hi.max(lo.max(1))).min(pool.len());
    let mut chosen = Vec::with_capacity(want + 1);
    for _ in 0..want {
        let Some(pick) = draw_weighted(&pool, &world.popularity, rng) else {
            break;
        };
        pool.retain(|&k| k != pick);
        chosen.push(pick);
    }
    if rng.random_bool(params.distractor_prob.clamp(0.0, 1.0)) {
        let others: Vec<usize> = (0..n).filter(|&k| world.cliques[k] != clique).collect();
        if let Some(pick) = draw_weighted(&others, &world.popularity, rng) {
            chosen.push(pick);
        }
    }

    let mut free: Vec<usize> = (0..world.grid_side * world.grid_side).collect();
    free.shuffle(rng);
    let mut scene = SyntheticScene::empty(world.grid_side);
    let (c_lo, c_hi) = params.cells_per_object;
    for object in chosen {
        let cells = rng.random_range(c_lo.max(1)..=c_hi.max(c_lo.max(1)));
        for _ in 0..cells {
            match free.pop() {
                Some(cell) => scene.cells[cell] = Some(object),
                None => break,
            }
        }
    }
    scene
}

/// `n` scenes from one seeded stream.
pub fn generate_corpus(world: &PlantedWorld, params: &SceneParams, n: usize, seed: u64) -> Vec<SyntheticScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| sample_scene(world, params, &mut rng)).collect()
}
