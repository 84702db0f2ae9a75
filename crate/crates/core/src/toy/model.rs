use super::world::{PlantedWorld, Vocab};
use crate::augment::VisualFeatures;
use crate::decoder::{TokenId, VisionLanguageModel};
use crate::error::{PndError, Result};
use crate::matrix::{dot, Matrix};
use crate::salience::{compute_attention, AttentionMap};

/// Logit of tokens that only occur in prompts; low enough never to survive
/// the plausibility filter.
pub const PROMPT_ONLY_LOGIT: f64 = -30.0;

/// Prior probability of continuations the language model considers
/// ungrammatical at the current position.
pub const PRIOR_FLOOR: f64 = 1e-4;

/// Matched-filter score of one patch for one object: projection onto the
/// embedding minus `residual_penalty` times the off-axis energy.
pub fn patch_score(world: &PlantedWorld, object: usize, patch: &[f64]) -> f64 {
    let e = world.embedding(object);
    let along = dot(e, patch);
    if world.residual_penalty == 0.0 {
        return along;
    }
    let residual = patch
        .iter()
        .zip(e)
        .map(|(&v, &ek)| (v - along * ek).powi(2))
        .sum::<f64>()
        .sqrt();
    along - world.residual_penalty * residual
}

/// `sum_i b_i * max_j score(object, V[j])`.
pub fn evidence(world: &PlantedWorld, object: usize, features: &VisualFeatures) -> f64 {
    let best = (0..features.n_patches())
        .map(|j| patch_score(world, object, features.patch(j)))
        .fold(f64::NEG_INFINITY, f64::max);
    world.layer_budgets.iter().map(|b| b * best).sum()
}

pub fn object_evidence(world: &PlantedWorld, features: &VisualFeatures) -> Vec<f64> {
    (0..world.n_objects()).map(|y| evidence(world, y, features)).collect()
}

/// Position and id of the object asked about (`ASK` followed by an object).
pub fn question_object(vocab: Vocab, context: &[TokenId]) -> Option<(usize, TokenId)> {
    context
        .windows(2)
        .position(|w| w[0] == vocab.ask() && vocab.is_object(w[1]))
        .map(|i| (i + 1, context[i + 1]))
}

/// `[BOS, anchor?, ASK, object]`.
pub fn question_prompt(world: &PlantedWorld, anchor: Option<usize>, object: usize) -> Vec<TokenId> {
    let v = world.vocab();
    let mut p = vec![v.bos()];
    p.extend(anchor);
    p.extend([v.ask(), object]);
    p
}

/// `[BOS, DESCRIBE]`.
pub fn caption_prompt(world: &PlantedWorld) -> Vec<TokenId> {
    let v = world.vocab();
    vec![v.bos(), v.describe()]
}

fn last_object(vocab: Vocab, tokens: &[TokenId]) -> Option<usize> {
    tokens.iter().rev().copied().find(|&t| vocab.is_object(t))
}

/// Mixes the context-dependent prior with precomputed per-object evidence.
fn assemble_logits(world: &PlantedWorld, context: &[TokenId], evidence: &[f64]) -> Vec<f64> {
    let v = world.vocab();
    let n = world.n_objects();
    let floor = PRIOR_FLOOR.ln();
    let budget: f64 = world.layer_budgets.iter().sum();
    let reference = world.evidence_reference * budget;
    let question = question_object(v, context);

    let mut prior = vec![floor; v.size()];
    match question {
        Some((pos, object)) if pos + 1 == context.len() => {
            let anchor = last_object(v, &context[..pos - 1]);
            prior[v.yes()] = world.prior_log_prob(anchor, object);
            prior[v.no()] = world.no_prior.ln();
        }
        Some(_) => prior[v.eos()] = 0.0,
        None => {
            let recent = last_object(v, context);
            for (y, p) in prior.iter_mut().enumerate().take(n) {
                if !context.contains(&y) {
                    *p = world.prior_log_prob(recent, y);
                }
            }
            prior[v.eos()] = world.eos_prior.ln();
        }
    }

    let mut vis = vec![0.0; v.size()];
    vis[..n].copy_from_slice(evidence);
    vis[v.yes()] = question.map_or(0.0, |(_, object)| evidence[object]);
    vis[v.no()] = reference;
    vis[v.eos()] = reference;

    (0..v.size())
        .map(|t| {
            if v.is_prompt_only(t) {
                PROMPT_ONLY_LOGIT
            } else {
                world.w_prior * prior[t] + world.w_vis * vis[t]
            }
        })
        .collect()
}

fn check_tokens(world: &PlantedWorld, tokens: &[TokenId]) -> Result<()> {
    let size = world.vocab().size();
    if let Some(bad) = tokens.iter().find(|&&t| t >= size) {
        return Err(PndError::input(format!("token {bad} outside vocabulary of {size}")));
    }
    Ok(())
}

fn check_features(world: &PlantedWorld, features: &VisualFeatures) -> Result<()> {
    if features.d_feat() != world.d_feat() {
        return Err(PndError::shape(format!(
            "features have dim {}, world expects {}",
            features.d_feat(),
            world.d_feat()
        )));
    }
    Ok(())
}

/// Prior plus evidence for every vocabulary entry.
pub fn next_token_logits(world: &PlantedWorld, context: &[TokenId], features: &VisualFeatures) -> Result<Vec<f64>> {
    if context.is_empty() {
        return Err(PndError::input("context must not be empty"));
    }
    check_tokens(world, context)?;
    check_features(world, features)?;
    Ok(assemble_logits(world, context, &object_evidence(world, features)))
}

/// Tokens whose embeddings query the image: the asked-about object, else the
/// prompt's objects, else a generic objectness query.
pub fn salience_queries(world: &PlantedWorld, prompt: &[TokenId]) -> Vec<TokenId> {
    let v = world.vocab();
    if let Some((_, object)) = question_object(v, prompt) {
        return vec![object];
    }
    let objects: Vec<TokenId> = prompt.iter().copied().filter(|&t| v.is_object(t)).collect();
    if objects.is_empty() {
        vec![v.describe()]
    } else {
        objects
    }
}

/// Object tokens query with their embedding; anything else with the
/// normalized sum of all object embeddings.
fn query_embedding(world: &PlantedWorld, token: TokenId) -> Vec<f64> {
    if world.vocab().is_object(token) {
        return world.embedding(token).to_vec();
    }
    let mut q = vec![0.0; world.d_feat()];
    for row in world.object_embeddings.iter_rows() {
        for (a, b) in q.iter_mut().zip(row) {
            *a += b;
        }
    }
    let norm = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        q.iter_mut().for_each(|x| *x /= norm);
    }
    q
}

/// Per-layer text-to-patch attention. Layer `i` projects the patch features
/// through its own fixed key matrix before the scaled dot product.
pub fn layer_attention(world: &PlantedWorld, query_tokens: &[TokenId], features: &VisualFeatures) -> Result<Vec<AttentionMap>> {
    if query_tokens.is_empty() {
        return Err(PndError::input("need at least one query token"));
    }
    check_tokens(world, query_tokens)?;
    check_features(world, features)?;
    let d = world.d_feat();
    let rows: Vec<Vec<f64>> = query_tokens.iter().map(|&t| query_embedding(world, t)).collect();
    let queries = Matrix::from_rows(&rows)?;
    let scale = (d as f64).sqrt();
    (0..world.n_layers())
        .map(|layer| {
            let w = world.key_projection(layer);
            let mut keys = Matrix::zeros(features.n_patches(), d);
            for j in 0..features.n_patches() {
                let patch = features.patch(j);
                for (r, k) in keys.row_mut(j).iter_mut().enumerate() {
                    *k = dot(w.row(r), patch);
                }
            }
            compute_attention(layer, &queries, &keys, scale)
        })
        .collect()
}

/// Decode state: the token prefix plus the evidence of every object under
/// this stream's visual view, which never changes during a generation.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyState {
    tokens: Vec<TokenId>,
    evidence: Vec<f64>,
}

impl ToyState {
    pub fn evidence(&self) -> &[f64] {
        &self.evidence
    }
}

impl VisionLanguageModel for PlantedWorld {
    type State = ToyState;

    fn vocab_size(&self) -> usize {
        self.vocab().size()
    }

    fn stop_token(&self) -> Option<TokenId> {
        Some(self.vocab().eos())
    }

    fn cross_attention(&self, prompt: &[TokenId], features: &VisualFeatures) -> Result<Vec<AttentionMap>> {
        layer_attention(self, &salience_queries(self, prompt), features)
    }

    fn start(&self, features: &VisualFeatures, prompt: &[TokenId]) -> Result<ToyState> {
        if prompt.is_empty() {
            return Err(PndError::input("prompt must not be empty"));
        }
        check_tokens(self, prompt)?;
        check_features(self, features)?;
        Ok(ToyState {
            tokens: prompt.to_vec(),
            evidence: object_evidence(self, features),
        })
    }

    fn logits(&self, state: &ToyState) -> Vec<f64> {
        assemble_logits(self, &state.tokens, &state.evidence)
    }

    fn advance(&self, state: &mut ToyState, token: TokenId) {
        state.tokens.push(token);
    }

    fn tokens<'s>(&self, state: &'s ToyState) -> &'s [TokenId] {
        &state.tokens
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::ddpm_corrupt;
    use crate::toy::scene::{encode_scene, generate_corpus, SceneParams, SyntheticScene};
    use crate::toy::world::WorldParams;

    fn world_with(f: impl FnOnce(&mut WorldParams)) -> PlantedWorld {
        let mut p = WorldParams::default();
        f(&mut p);
        PlantedWorld::generate(&p).unwrap()
    }

    #[test]
    fn pure_prior_ignores_the_image() {
        let world = world_with(|p| p.w_vis = 0.0);
        let scenes = generate_corpus(&world, &SceneParams::default(), 5, 2);
        let v = encode_scene(&world, &scenes[0], 0).unwrap();
        let corrupted = ddpm_corrupt(&v, 0.1, 5).unwrap();
        let other = encode_scene(&world, &scenes[4], 9).unwrap();
        for ctx in [question_prompt(&world, Some(2), 3), caption_prompt(&world), vec![world.vocab().bos(), 4, 7]] {
            let base = next_token_logits(&world, &ctx, &v).unwrap();
            assert_eq!(base, next_token_logits(&world, &ctx, &corrupted).unwrap());
            assert_eq!(base, next_token_logits(&world, &ctx, &other).unwrap());
        }
    }

    #[test]
    fn pure_evidence_ignores_the_continuation() {
        let world = world_with(|p| p.w_prior = 0.0);
        let scene = generate_corpus(&world, &SceneParams::default(), 1, 6).remove(0);
        let v = encode_scene(&world, &scene, 1).unwrap();
        let vocab = world.vocab();
        for prompt in [question_prompt(&world, Some(0), 5), caption_prompt(&world)] {
            let base = next_token_logits(&world, &prompt, &v).unwrap();
            for tail in [vec![vocab.yes()], vec![3, 1, 7], vec![vocab.no(), vocab.eos()]] {
                let ctx: Vec<TokenId> = prompt.iter().chain(&tail).copied().collect();
                assert_eq!(next_token_logits(&world, &ctx, &v).unwrap(), base);
            }
        }
    }

    #[test]
    fn pure_evidence_picks_the_only_object() {
        let world = world_with(|p| {
            p.w_prior = 0.0;
            p.encoder_sigma = 0.0;
        });
        for k in 0..world.n_objects() {
            let scene = SyntheticScene::with_objects(6, &[(17, k)]).unwrap();
            let v = encode_scene(&world, &scene, 0).unwrap();
            let l = next_token_logits(&world, &caption_prompt(&world), &v).unwrap();
            let arg = crate::decoder::top_k(&l, 1)[0].0;
            assert_eq!(arg, k);
        }
    }

    /// Everything recomputed with explicit loops from the world's tables.
    fn double_loop_oracle(world: &PlantedWorld, ctx: &[TokenId], v: &VisualFeatures) -> Vec<f64> {
        let n = world.n_objects();
        let vocab = world.vocab();
        let mut ev = vec![0.0; n];
        for y in 0..n {
            let mut best = f64::NEG_INFINITY;
            for j in 0..v.n_patches() {
                let mut along = 0.0;
                for c in 0..world.d_feat() {
                    along += world.object_embeddings.get(y, c) * v.patch(j)[c];
                }
                let mut r2 = 0.0;
                for c in 0..world.d_feat() {
                    let diff = v.patch(j)[c] - along * world.object_embeddings.get(y, c);
                    r2 += diff * diff;
                }
                let s = along - world.residual_penalty * r2.sqrt();
                if s > best {
                    best = s;
                }
            }
            for b in &world.layer_budgets {
                ev[y] += b * best;
            }
        }
        // Caption context: most recent object drives the prior.
        let recent = ctx.iter().rev().find(|&&t| t < n).copied();
        let mut out = Vec::new();
        for t in 0..vocab.size() {
            let l = if t < n {
                let prior = if ctx.contains(&t) {
                    PRIOR_FLOOR.ln()
                } else {
                    match recent {
                        Some(a) => {
                            let mut z = 0.0;
                            for k in 0..n {
                                z += world.cooccurrence[a][k];
                            }
                            (world.cooccurrence[a][t] / z).ln()
                        }
                        None => (1.0 / n as f64).ln(),
                    }
                };
                world.w_prior * prior + world.w_vis * ev[t]
            } else if t == vocab.eos() {
                let budget: f64 = world.layer_budgets.iter().sum();
                world.w_prior * world.eos_prior.ln() + world.w_vis * world.evidence_reference * budget
            } else if t == vocab.no() {
                let budget: f64 = world.layer_budgets.iter().sum();
                world.w_prior * PRIOR_FLOOR.ln() + world.w_vis * world.evidence_reference * budget
            } else if t == vocab.yes() {
                world.w_prior * PRIOR_FLOOR.ln()
            } else {
                PROMPT_ONLY_LOGIT
            };
            out.push(l);
        }
        out
    }

    #[test]
    fn small_world_matches_double_loop_oracle() {
        let world = world_with(|p| {
            p.n_objects = 3;
            p.n_cliques = 1;
            p.grid_side = 2;
            p.d_feat = 8;
            p.evidence_reference = 0.3;
        });
        let scene = SyntheticScene::with_objects(2, &[(0, 1), (3, 2)]).unwrap();
        let v = encode_scene(&world, &scene, 4).unwrap();
        for ctx in [caption_prompt(&world), vec![world.vocab().bos(), world.vocab().describe(), 2], vec![world.vocab().bos(), 0, 1]] {
            let got = next_token_logits(&world, &ctx, &v).unwrap();
            let want = double_loop_oracle(&world, &ctx, &v);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "{got:?} vs {want:?}");
            }
        }
    }

    #[test]
    fn question_mode_prior() {
        let world = PlantedWorld::default_world();
        let vocab = world.vocab();
        let v = encode_scene(&world, &SyntheticScene::with_objects(6, &[(0, 0)]).unwrap(), 0).unwrap();
        let l = next_token_logits(&world, &question_prompt(&world, Some(0), 1), &v).unwrap();
        let ev = evidence(&world, 1, &v);
        let expected_yes = world.w_prior * world.prior_log_prob(Some(0), 1) + world.w_vis * ev;
        assert!((l[vocab.yes()] - expected_yes).abs() < 1e-12);
        assert!((l[vocab.no()] - world.w_prior * world.no_prior.ln()).abs() < 1e-12);
        // After answering, ending is the only likely continuation.
        let mut ctx = question_prompt(&world, Some(0), 1);
        ctx.push(vocab.yes());
        let l = next_token_logits(&world, &ctx, &v).unwrap();
        assert_eq!(crate::decoder::top_k(&l, 1)[0].0, vocab.eos());
    }

    #[test]
    fn single_patch_attention_is_one() {
        let world = world_with(|p| p.grid_side = 1);
        let scene = SyntheticScene::with_objects(1, &[(0, 4)]).unwrap();
        let v = encode_scene(&world, &scene, 0).unwrap();
        for map in layer_attention(&world, &[4, 7], &v).unwrap() {
            assert_eq!(map.row(0), &[1.0]);
            assert_eq!(map.row(1), &[1.0]);
        }
    }

    #[test]
    fn matching_patch_gets_the_most_attention() {
        let world = PlantedWorld::default_world();
        let d = world.d_feat();
        let q = world.embedding(5).to_vec();
        let mut rows = vec![q.clone()];
        // Orthogonal complement rows, by Gram-Schmidt against q.
        let mut k = 0;
        while rows.len() < 36 {
            let mut r = vec![0.0; d];
            r[k % d] = 1.0;
            r[(k * 7 + 3) % d] += 0.5;
            let along = dot(&r, &q);
            r.iter_mut().zip(&q).for_each(|(x, qi)| *x -= along * qi);
            let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.iter_mut().for_each(|x| *x /= norm);
            assert!(dot(&r, &q).abs() < 1e-12);
            rows.push(r);
            k += 1;
        }
        let v = VisualFeatures::original(6, Matrix::from_rows(&rows).unwrap()).unwrap();
        for map in layer_attention(&world, &[5], &v).unwrap() {
            let row = map.row(0);
            assert!(row[1..].iter().all(|&a| a < row[0]), "layer {}", map.layer_index);
        }
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let world = PlantedWorld::default_world();
        for (i, scene) in generate_corpus(&world, &SceneParams::default(), 20, 11).iter().enumerate() {
            let v = encode_scene(&world, scene, i as u64).unwrap();
            let maps = layer_attention(&world, &[0, 3, world.vocab().describe()], &v).unwrap();
            assert_eq!(maps.len(), 3);
            for map in maps {
                for q in 0..map.n_queries() {
                    let s: f64 = map.row(q).iter().sum();
                    assert!((s - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn bad_inputs() {
        let world = PlantedWorld::default_world();
        let v = encode_scene(&world, &SyntheticScene::empty(6), 0).unwrap();
        assert!(next_token_logits(&world, &[], &v).is_err());
        assert!(next_token_logits(&world, &[99], &v).is_err());
        assert!(layer_attention(&world, &[], &v).is_err());
        let small = world_with(|p| p.d_feat = 8);
        assert!(matches!(next_token_logits(&small, &[0], &v), Err(PndError::Shape(_))));
    }

    #[test]
    fn cached_state_matches_standalone_logits() {
        let world = PlantedWorld::default_world();
        let scene = generate_corpus(&world, &SceneParams::default(), 1, 0).remove(0);
        let v = encode_scene(&world, &scene, 3).unwrap();
        let prompt = caption_prompt(&world);
        let mut state = world.start(&v, &prompt).unwrap();
        for t in [2, 5, world.vocab().eos()] {
            assert_eq!(world.logits(&state), next_token_logits(&world, world.tokens(&state), &v).unwrap());
            world.advance(&mut state, t);
        }
    }
}
