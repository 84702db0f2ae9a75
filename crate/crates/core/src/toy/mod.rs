//! A planted vision-language model whose logits split exactly into a
//! co-occurrence prior and a visual evidence term, so hallucinations have a
//! computable ground truth.

mod model;
mod scene;
mod search;
mod world;

pub use model::{
    caption_prompt, evidence, layer_attention, next_token_logits, object_evidence, patch_score,
    question_object, question_prompt, salience_queries, ToyState, PRIOR_FLOOR, PROMPT_ONLY_LOGIT,
};
pub use scene::{encode_scene, generate_corpus, oracle_answer, sample_scene, SceneParams, SyntheticScene};
pub use search::{answer_probabilities, default_weight_grid, search_hallucination, HallucinationCase};
pub use world::{PlantedWorld, Vocab, WorldParams, DEFAULT_LAYER_BUDGETS, WORLD_SCHEMA_VERSION};
