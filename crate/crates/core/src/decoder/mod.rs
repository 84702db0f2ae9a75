//! Three-stream contrastive decoding.
//!
//! A session keeps one incremental decode state per visual view (original,
//! positive, negative). Every step queries all three, contrasts the logits,
//! drops candidates that are implausible under the original stream, and
//! appends the chosen token to all three states so their prefixes never
//! diverge.

mod config;
mod logits;

use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{
    parse_key_values, DecodeConfig, Selection, DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_GAMMA,
    DEFAULT_MAX_TOKENS,
};
pub use logits::{
    check_beta, contrast_logits, contrast_weighted, finalize_distribution,
    finalize_with_temperature, plausibility_filter, top_k, FilteredLogits, LogitTriple,
};

use crate::augment::{enhance_positive, negative_view, VisualFeatures};
use crate::error::{PndError, Result};
use crate::salience::{summarize, AttentionMap, SalienceSummary};

pub type TokenId = usize;

/// Entries kept per stream in a trace record.
pub const TRACE_TOP_K: usize = 5;

const NOISE_SEED_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

/// Seed of the negative view's corruption noise for a run seeded `seed`.
/// Kept apart from the sampling stream so the two never share state.
pub fn negative_noise_seed(seed: u64) -> u64 {
    seed ^ NOISE_SEED_SALT
}

/// What the decoder needs from a vision-language model.
pub trait VisionLanguageModel {
    /// Incremental decode state (token prefix plus whatever the model caches).
    type State: Clone;

    fn vocab_size(&self) -> usize;

    /// Token that ends generation, if the model has one.
    fn stop_token(&self) -> Option<TokenId>;

    /// Per-layer text-to-patch attention for the given prompt.
    fn cross_attention(&self, prompt: &[TokenId], features: &VisualFeatures) -> Result<Vec<AttentionMap>>;

    fn start(&self, features: &VisualFeatures, prompt: &[TokenId]) -> Result<Self::State>;

    fn logits(&self, state: &Self::State) -> Vec<f64>;

    fn advance(&self, state: &mut Self::State, token: TokenId);

    fn tokens<'s>(&self, state: &'s Self::State) -> &'s [TokenId];
}

/// One decode state per visual view.
#[derive(Debug, Clone)]
pub struct DecodeStreams<S> {
    pub orig: S,
    pub pos: S,
    pub neg: S,
}

/// Trace entry for one emitted token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub token: TokenId,
    pub top_orig: Vec<(TokenId, f64)>,
    pub top_pos: Vec<(TokenId, f64)>,
    pub top_neg: Vec<(TokenId, f64)>,
    pub survivors: usize,
    pub top_probs: Vec<(TokenId, f64)>,
}

/// Full per-step output; the trace record is a summary of it.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub token: TokenId,
    pub triple: LogitTriple,
    pub filtered: FilteredLogits,
    pub probabilities: Vec<f64>,
    pub record: StepRecord,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub records: Vec<StepRecord>,
}

impl DecodeTrace {
    /// One JSON object per line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

fn choose(filtered: &FilteredLogits, probs: &[f64], selection: Selection, rng: &mut ChaCha8Rng) -> Result<TokenId> {
    match selection {
        Selection::Greedy => filtered
            .argmax()
            .ok_or_else(|| PndError::Invariant("no surviving candidate".into())),
        Selection::Temperature(_) => {
            let dist = WeightedIndex::new(probs)
                .map_err(|e| PndError::Invariant(format!("bad sampling weights: {e}")))?;
            Ok(dist.sample(rng))
        }
    }
}

/// One contrastive step over the three streams.
pub fn decode_step<M: VisionLanguageModel>(
    model: &M,
    streams: &mut DecodeStreams<M::State>,
    config: &DecodeConfig,
    step_index: usize,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutput> {
    {
        let prefix = model.tokens(&streams.orig);
        if prefix != model.tokens(&streams.pos) || prefix != model.tokens(&streams.neg) {
            return Err(PndError::Invariant("decode streams hold different prefixes".into()));
        }
    }
    let triple = LogitTriple::new(
        model.logits(&streams.orig),
        model.logits(&streams.pos),
        model.logits(&streams.neg),
        step_index,
    )?;
    let orig_weight = if config.use_original { 1.0 } else { 0.0 };
    let contrasted = contrast_weighted(&triple, orig_weight, config.alpha, config.gamma)?;
    let filtered = plausibility_filter(&contrasted, &triple.l_orig, config.beta)?;
    let probabilities = match config.selection {
        Selection::Greedy => finalize_distribution(&filtered)?,
        Selection::Temperature(t) => finalize_with_temperature(&filtered, t)?,
    };
    let token = choose(&filtered, &probabilities, config.selection, rng)?;

    model.advance(&mut streams.orig, token);
    model.advance(&mut streams.pos, token);
    model.advance(&mut streams.neg, token);

    let record = StepRecord {
        step: step_index,
        token,
        top_orig: top_k(&triple.l_orig, TRACE_TOP_K),
        top_pos: top_k(&triple.l_pos, TRACE_TOP_K),
        top_neg: top_k(&triple.l_neg, TRACE_TOP_K),
        survivors: filtered.survivor_count(),
        top_probs: top_k(&probabilities, TRACE_TOP_K),
    };
    Ok(StepOutput {
        token,
        triple,
        filtered,
        probabilities,
        record,
    })
}

/// A generation in progress. The augmented views are built once, up front.
pub struct PndSession<'m, M: VisionLanguageModel> {
    model: &'m M,
    config: DecodeConfig,
    streams: DecodeStreams<M::State>,
    salience: SalienceSummary,
    rng: ChaCha8Rng,
    steps: usize,
}

impl<'m, M: VisionLanguageModel> PndSession<'m, M> {
    pub fn new(model: &'m M, features: &VisualFeatures, prompt: &[TokenId], config: &DecodeConfig) -> Result<Self> {
        config.validate()?;
        if prompt.is_empty() {
            return Err(PndError::input("prompt must not be empty"));
        }
        let maps = model.cross_attention(prompt, features)?;
        let salience = summarize(&maps, config.layers.as_deref(), config.tau)?;
        let positive = enhance_positive(features, &salience.fused, config.lambda)?;
        let alpha_bar = config.schedule.alpha_bar_at(config.noise_step)?;
        let negative = negative_view(features, &salience.mask, alpha_bar, negative_noise_seed(config.seed))?;
        let streams = DecodeStreams {
            orig: model.start(features, prompt)?,
            pos: model.start(&positive, prompt)?,
            neg: model.start(&negative, prompt)?,
        };
        Ok(Self {
            model,
            config: config.clone(),
            streams,
            salience,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            steps: 0,
        })
    }

    pub fn step(&mut self) -> Result<StepOutput> {
        let out = decode_step(self.model, &mut self.streams, &self.config, self.steps, &mut self.rng)?;
        self.steps += 1;
        Ok(out)
    }

    pub fn salience(&self) -> &SalienceSummary {
        &self.salience
    }

    pub fn streams(&self) -> &DecodeStreams<M::State> {
        &self.streams
    }

    pub fn steps_taken(&self) -> usize {
        self.steps
    }
}

/// Result of [`generate`].
#[derive(Debug, Clone)]
pub struct Generation {
    pub tokens: Vec<TokenId>,
    pub trace: DecodeTrace,
    pub stopped: bool,
}

/// Decodes until the stop token or `max_tokens`. The stop token, when
/// emitted, is the last element of `tokens`.
pub fn generate<M: VisionLanguageModel>(
    model: &M,
    features: &VisualFeatures,
    prompt: &[TokenId],
    config: &DecodeConfig,
) -> Result<Generation> {
    let mut session = PndSession::new(model, features, prompt, config)?;
    let stop = model.stop_token();
    let mut tokens = Vec::new();
    let mut trace = DecodeTrace::default();
    let mut stopped = false;
    while tokens.len() < config.max_tokens {
        let out = session.step()?;
        tokens.push(out.token);
        trace.records.push(out.record);
        if Some(out.token) == stop {
            stopped = true;
            break;
        }
    }
    Ok(Generation {
        tokens,
        trace,
        stopped,
    })
}
