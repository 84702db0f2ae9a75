use serde::{Deserialize, Serialize};

use super::model::question_prompt;
use super::scene::{encode_scene, SyntheticScene};
use super::world::{PlantedWorld, WorldParams};
use crate::decoder::{DecodeConfig, PndSession};
use crate::error::Result;

/// A scene showing only `anchor` on which baseline greedy decoding answers
/// "yes" to "is `object` present?".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HallucinationCase {
    pub world: WorldParams,
    pub anchor: usize,
    pub object: usize,
    pub scene: SyntheticScene,
    pub feature_seed: u64,
    pub p_yes: f64,
    pub p_no: f64,
}

impl HallucinationCase {
    pub fn prompt(&self, world: &PlantedWorld) -> Vec<usize> {
        question_prompt(world, Some(self.anchor), self.object)
    }
}

/// Cells the anchor occupies in every candidate scene.
const ANCHOR_CELLS: [usize; 2] = [14, 15];

/// `(P(yes), P(no))` after one decode step.
pub fn answer_probabilities(
    world: &PlantedWorld,
    scene: &SyntheticScene,
    prompt: &[usize],
    feature_seed: u64,
    config: &DecodeConfig,
) -> Result<(f64, f64)> {
    let features = encode_scene(world, scene, feature_seed)?;
    let mut session = PndSession::new(world, &features, prompt, config)?;
    let out = session.step()?;
    let v = world.vocab();
    Ok((out.probabilities[v.yes()], out.probabilities[v.no()]))
}

/// Tries each `(w_prior, w_vis)` pair in order and, within a world, object
/// pairs by decreasing co-occurrence. Returns the first instance where the
/// baseline answers "yes" about an absent object.
pub fn search_hallucination(base: &WorldParams, weights: &[(f64, f64)]) -> Result<Option<HallucinationCase>> {
    let baseline = DecodeConfig::baseline();
    for &(w_prior, w_vis) in weights {
        let params = WorldParams {
            w_prior,
            w_vis,
            ..base.clone()
        };
        let world = PlantedWorld::generate(&params)?;
        let n = world.n_objects();
        let mut pairs: Vec<(usize, usize)> = (0..n)
            .flat_map(|a| (0..n).filter(move |&b| b != a).map(move |b| (a, b)))
            .collect();
        pairs.sort_by(|&(a1, b1), &(a2, b2)| {
            world.cooccurrence[a2][b2]
                .total_cmp(&world.cooccurrence[a1][b1])
                .then((a1, b1).cmp(&(a2, b2)))
        });
        for (anchor, object) in pairs {
            let placements: Vec<(usize, usize)> = ANCHOR_CELLS
                .iter()
                .filter(|&&c| c < world.grid_side * world.grid_side)
                .map(|&c| (c, anchor))
                .collect();
            let scene = SyntheticScene::with_objects(world.grid_side, &placements)?;
            let prompt = question_prompt(&world, Some(anchor), object);
            let (p_yes, p_no) = answer_probabilities(&world, &scene, &prompt, 0, &baseline)?;
            if p_yes > p_no {
                return Ok(Some(HallucinationCase {
                    world: params,
                    anchor,
                    object,
                    scene,
                    feature_seed: 0,
                    p_yes,
                    p_no,
                }));
            }
        }
    }
    Ok(None)
}

/// Weight pairs searched by default: growing prior pull at fixed evidence.
pub fn default_weight_grid() -> Vec<(f64, f64)> {
    [0.5, 1.0, 1.5, 2.0, 3.0].iter().map(|&p| (p, 2.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pure_evidence_never_hallucinates() {
        let base = WorldParams::default();
        assert_eq!(search_hallucination(&base, &[(0.0, 2.0)]).unwrap(), None);
    }

    #[test]
    fn found_case_is_a_correlated_absent_object() {
        let case = search_hallucination(&WorldParams::default(), &default_weight_grid())
            .unwrap()
            .expect("the default world admits a planted hallucination");
        let world = PlantedWorld::generate(&case.world).unwrap();
        assert!(!case.scene.contains(case.object));
        assert_eq!(case.scene.present_set().into_iter().collect::<Vec<_>>(), vec![case.anchor]);
        assert!(world.same_clique(case.anchor, case.object));
        assert!(case.p_yes > case.p_no);
    }
}
