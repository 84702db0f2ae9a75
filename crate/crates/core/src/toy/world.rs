use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::decoder::TokenId;
use crate::error::{PndError, Result};
use crate::matrix::Matrix;

/// Visual attention budgets of early, middle and late layers.
pub const DEFAULT_LAYER_BUDGETS: [f64; 3] = [0.137, 0.062, 0.049];

const DEFAULT_LABELS: [&str; 12] = [
    "dog", "frisbee", "leash", "ball", "fork", "knife", "plate", "cup", "car", "road", "traffic light",
    "bicycle",
];

/// Knobs for [`PlantedWorld::generate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldParams {
    pub n_objects: usize,
    pub n_cliques: usize,
    pub grid_side: usize,
    pub d_feat: usize,
    pub w_prior: f64,
    pub w_vis: f64,
    pub layer_budgets: Vec<f64>,
    /// Per-layer strength of the random key projection `I + mix * G / sqrt(d)`.
    pub layer_key_mix: Vec<f64>,
    /// Weight of the off-axis residual in the patch score; 0 gives a plain
    /// dot product.
    pub residual_penalty: f64,
    /// Prior probability mass the language model gives to "no".
    pub no_prior: f64,
    /// Prior probability mass the language model gives to ending a caption.
    pub eos_prior: f64,
    /// Patch score credited to "no" and end-of-caption.
    pub evidence_reference: f64,
    pub encoder_sigma: f64,
    pub within_clique: (f64, f64),
    pub across_clique: (f64, f64),
    pub popularity: (f64, f64),
    pub seed: u64,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            n_objects: 12,
            n_cliques: 3,
            grid_side: 6,
            d_feat: 32,
            w_prior: 1.0,
            w_vis: 2.0,
            layer_budgets: DEFAULT_LAYER_BUDGETS.to_vec(),
            layer_key_mix: vec![0.2, 0.35, 0.5],
            residual_penalty: 1.0,
            no_prior: 0.08,
            eos_prior: 0.08,
            evidence_reference: 0.0,
            encoder_sigma: 0.05,
            within_clique: (0.3, 0.9),
            across_clique: (0.02, 0.15),
            popularity: (0.1, 1.0),
            seed: 7,
        }
    }
}

/// Token ids: objects occupy `0..n_objects`, the special tokens follow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    pub n_objects: usize,
}

impl Vocab {
    pub fn yes(&self) -> TokenId {
        self.n_objects
    }
    pub fn no(&self) -> TokenId {
        self.n_objects + 1
    }
    pub fn eos(&self) -> TokenId {
        self.n_objects + 2
    }
    pub fn bos(&self) -> TokenId {
        self.n_objects + 3
    }
    /// "is there ..." question marker.
    pub fn ask(&self) -> TokenId {
        self.n_objects + 4
    }
    /// Captioning instruction.
    pub fn describe(&self) -> TokenId {
        self.n_objects + 5
    }
    pub fn size(&self) -> usize {
        self.n_objects + 6
    }
    pub fn is_object(&self, t: TokenId) -> bool {
        t < self.n_objects
    }
    /// Tokens that only ever appear in prompts.
    pub fn is_prompt_only(&self, t: TokenId) -> bool {
        t == self.bos() || t == self.ask() || t == self.describe()
    }
}

/// A transparent vision-language model whose logits split exactly into a
/// co-occurrence language prior and a visual evidence term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WorldFile", into = "WorldFile")]
pub struct PlantedWorld {
    pub labels: Vec<String>,
    pub cliques: Vec<usize>,
    pub popularity: Vec<f64>,
    pub cooccurrence: Vec<Vec<f64>>,
    pub object_embeddings: Matrix,
    pub background_embedding: Vec<f64>,
    pub w_prior: f64,
    pub w_vis: f64,
    pub layer_budgets: Vec<f64>,
    pub layer_key_mix: Vec<f64>,
    pub residual_penalty: f64,
    pub no_prior: f64,
    pub eos_prior: f64,
    pub evidence_reference: f64,
    pub encoder_sigma: f64,
    pub grid_side: usize,
    pub seed: u64,
    /// Derived from `seed` and `layer_key_mix`; not serialized.
    key_projections: Vec<Matrix>,
}

#[derive(Serialize, Deserialize)]
struct WorldFile {
    schema_version: u32,
    labels: Vec<String>,
    cliques: Vec<usize>,
    popularity: Vec<f64>,
    cooccurrence: Vec<Vec<f64>>,
    object_embeddings: Vec<Vec<f64>>,
    background_embedding: Vec<f64>,
    w_prior: f64,
    w_vis: f64,
    layer_budgets: Vec<f64>,
    layer_key_mix: Vec<f64>,
    residual_penalty: f64,
    no_prior: f64,
    eos_prior: f64,
    evidence_reference: f64,
    encoder_sigma: f64,
    grid_side: usize,
    seed: u64,
}

pub const WORLD_SCHEMA_VERSION: u32 = 1;

impl From<PlantedWorld> for WorldFile {
    fn from(w: PlantedWorld) -> Self {
        WorldFile {
            schema_version: WORLD_SCHEMA_VERSION,
            object_embeddings: w.object_embeddings.iter_rows().map(<[f64]>::to_vec).collect(),
            labels: w.labels,
            cliques: w.cliques,
            popularity: w.popularity,
            cooccurrence: w.cooccurrence,
            background_embedding: w.background_embedding,
            w_prior: w.w_prior,
            w_vis: w.w_vis,
            layer_budgets: w.layer_budgets,
            layer_key_mix: w.layer_key_mix,
            residual_penalty: w.residual_penalty,
            no_prior: w.no_prior,
            eos_prior: w.eos_prior,
            evidence_reference: w.evidence_reference,
            encoder_sigma: w.encoder_sigma,
            grid_side: w.grid_side,
            seed: w.seed,
        }
    }
}

impl TryFrom<WorldFile> for PlantedWorld {
    type Error = PndError;

    fn try_from(f: WorldFile) -> Result<Self> {
        if f.schema_version != WORLD_SCHEMA_VERSION {
            return Err(PndError::input(format!(
                "unsupported world schema version {}",
                f.schema_version
            )));
        }
        let embeddings = Matrix::from_rows(&f.object_embeddings)?;
        let mut world = PlantedWorld {
            labels: f.labels,
            cliques: f.cliques,
            popularity: f.popularity,
            cooccurrence: f.cooccurrence,
            object_embeddings: embeddings,
            background_embedding: f.background_embedding,
            w_prior: f.w_prior,
            w_vis: f.w_vis,
            layer_budgets: f.layer_budgets,
            layer_key_mix: f.layer_key_mix,
            residual_penalty: f.residual_penalty,
            no_prior: f.no_prior,
            eos_prior: f.eos_prior,
            evidence_reference: f.evidence_reference,
            encoder_sigma: f.encoder_sigma,
            grid_side: f.grid_side,
            seed: f.seed,
            key_projections: Vec::new(),
        };
        world.rebuild_projections();
        world.validate()?;
        Ok(world)
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut *rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

impl PlantedWorld {
    pub fn generate(params: &WorldParams) -> Result<Self> {
        let n = params.n_objects;
        if n == 0 || params.n_cliques == 0 || params.n_cliques > n {
            return Err(PndError::config("need 1 <= n_cliques <= n_objects"));
        }
        if params.layer_key_mix.len() != params.layer_budgets.len() {
            return Err(PndError::config("layer_key_mix and layer_budgets differ in length"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

        let labels = (0..n)
            .map(|k| match (n == DEFAULT_LABELS.len(), DEFAULT_LABELS.get(k)) {
                (true, Some(label)) => (*label).to_string(),
                _ => format!("object_{k}"),
            })
            .collect();
        let cliques: Vec<usize> = (0..n).map(|k| k * params.n_cliques / n).collect();
        let (p_lo, p_hi) = params.popularity;
        let popularity: Vec<f64> = (0..n)
            .map(|_| if p_lo < p_hi { rng.random_range(p_lo..=p_hi) } else { p_lo })
            .collect();

        let mut cooccurrence = vec![vec![0.0; n]; n];
        for i in 0..n {
            cooccurrence[i][i] = 1.0;
            for j in (i + 1)..n {
                let (lo, hi) = if cliques[i] == cliques[j] {
                    params.within_clique
                } else {
                    params.across_clique
                };
                let base = if lo < hi { rng.random_range(lo..=hi) } else { lo };
                let c = base * (popularity[i] * popularity[j]).sqrt();
                cooccurrence[i][j] = c;
                cooccurrence[j][i] = c;
            }
        }

        let rows: Vec<Vec<f64>> = (0..n).map(|_| unit_vector(&mut rng, params.d_feat)).collect();
        let object_embeddings = Matrix::from_rows(&rows)?;
        let background_embedding = unit_vector(&mut rng, params.d_feat);

        let mut world = PlantedWorld {
            labels,
            cliques,
            popularity,
            cooccurrence,
            object_embeddings,
            background_embedding,
            w_prior: params.w_prior,
            w_vis: params.w_vis,
            layer_budgets: params.layer_budgets.clone(),
            layer_key_mix: params.layer_key_mix.clone(),
            residual_penalty: params.residual_penalty,
            no_prior: params.no_prior,
            eos_prior: params.eos_prior,
            evidence_reference: params.evidence_reference,
            encoder_sigma: params.encoder_sigma,
            grid_side: params.grid_side,
            seed: params.seed,
            key_projections: Vec::new(),
        };
        world.rebuild_projections();
        world.validate()?;
        Ok(world)
    }

    /// The default twelve-object, three-clique world.
    pub fn default_world() -> Self {
        Self::generate(&WorldParams::default()).expect("default world parameters are valid")
    }

    fn rebuild_projections(&mut self) {
        let d = self.d_feat();
        self.key_projections = self
            .layer_key_mix
            .iter()
            .enumerate()
            .map(|(layer, &mix)| {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(1000 + layer as u64);
                let scale = mix / (d as f64).sqrt();
                let mut data = Vec::with_capacity(d * d);
                for r in 0..d {
                    for c in 0..d {
                        let g: f64 = StandardNormal.sample(&mut rng);
                        data.push(if r == c { 1.0 } else { 0.0 } + scale * g);
                    }
                }
                Matrix::new(d, d, data).expect("square projection")
            })
            .collect();
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_objects();
        let d = self.d_feat();
        if n == 0 || d == 0 || self.grid_side == 0 {
            return Err(PndError::input("world needs objects, features and a grid"));
        }
        if self.labels.len() != n || self.cliques.len() != n || self.popularity.len() != n {
            return Err(PndError::shape("per-object tables disagree on object count"));
        }
        if self.cooccurrence.len() != n || self.cooccurrence.iter().any(|r| r.len() != n) {
            return Err(PndError::shape("co-occurrence must be n_objects x n_objects"));
        }
        for i in 0..n {
            if self.cooccurrence[i][i] != 1.0 {
                return Err(PndError::input("co-occurrence diagonal must be 1"));
            }
            for j in 0..n {
                let c = self.cooccurrence[i][j];
                if !(c.is_finite() && c >= 0.0) || c != self.cooccurrence[j][i] {
                    return Err(PndError::input("co-occurrence must be symmetric and non-negative"));
                }
            }
        }
        for (k, row) in self.object_embeddings.iter_rows().enumerate() {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(PndError::input(format!("embedding {k} has norm {norm}")));
            }
        }
        if self.background_embedding.len() != d {
            return Err(PndError::shape("background embedding dimension"));
        }
        if self.layer_budgets.is_empty() || self.layer_budgets.len() != self.layer_key_mix.len() {
            return Err(PndError::input("need one budget and one key mix per layer"));
        }
        if self.layer_budgets.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(PndError::input("layer budgets must lie in (0, 1)"));
        }
        if self.layer_budgets.windows(2).any(|w| w[1] > w[0]) {
            return Err(PndError::input("layer budgets must be non-increasing"));
        }
        if !(self.w_prior >= 0.0 && self.w_vis >= 0.0) {
            return Err(PndError::input("mixing weights must be non-negative"));
        }
        if !(self.no_prior > 0.0 && self.eos_prior > 0.0) {
            return Err(PndError::input("reference priors must be positive"));
        }
        if !(self.encoder_sigma >= 0.0 && self.residual_penalty >= 0.0) {
            return Err(PndError::input("encoder sigma and residual penalty must be >= 0"));
        }
        Ok(())
    }

    pub fn n_objects(&self) -> usize {
        self.object_embeddings.rows()
    }

    pub fn d_feat(&self) -> usize {
        self.object_embeddings.cols()
    }

    pub fn n_layers(&self) -> usize {
        self.layer_budgets.len()
    }

    pub fn vocab(&self) -> Vocab {
        Vocab {
            n_objects: self.n_objects(),
        }
    }

    pub fn embedding(&self, object: usize) -> &[f64] {
        self.object_embeddings.row(object)
    }

    pub(crate) fn key_projection(&self, layer: usize) -> &Matrix {
        &self.key_projections[layer]
    }

    /// `ln(C[a][y] / sum_k C[a][k])`, uniform when there is no context object.
    pub fn prior_log_prob(&self, context_object: Option<usize>, y: usize) -> f64 {
        match context_object {
            None => -(self.n_objects() as f64).ln(),
            Some(a) => {
                let row = &self.cooccurrence[a];
                (row[y] / row.iter().sum::<f64>()).ln()
            }
        }
    }

    pub fn label(&self, token: TokenId) -> String {
        let v = self.vocab();
        match token {
            t if v.is_object(t) => self.labels[t].clone(),
            t if t == v.yes() => "yes".into(),
            t if t == v.no() => "no".into(),
            t if t == v.eos() => "<eos>".into(),
            t if t == v.bos() => "<bos>".into(),
            t if t == v.ask() => "is there".into(),
            t if t == v.describe() => "describe".into(),
            t => format!("<unk:{t}>"),
        }
    }

    /// Same-clique test used by the adversarial probe checks.
    pub fn same_clique(&self, a: usize, b: usize) -> bool {
        self.cliques[a] == self.cliques[b]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_world_invariants() {
        let w = PlantedWorld::default_world();
        assert_eq!(w.n_objects(), 12);
        assert_eq!(w.d_feat(), 32);
        assert_eq!(w.layer_budgets, DEFAULT_LAYER_BUDGETS.to_vec());
        w.validate().unwrap();
        assert_eq!(w.cliques, vec![0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2]);
        // Every within-clique pair co-occurs more than every cross-clique pair
        // once popularity is factored out.
        for i in 0..12 {
            for j in 0..12 {
                if i != j {
                    let base = w.cooccurrence[i][j] / (w.popularity[i] * w.popularity[j]).sqrt();
                    if w.same_clique(i, j) {
                        assert!(base >= 0.3 - 1e-12);
                    } else {
                        assert!(base <= 0.15 + 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn json_round_trip_rebuilds_projections() {
        let w = PlantedWorld::default_world();
        let text = serde_json::to_string(&w).unwrap();
        let back: PlantedWorld = serde_json::from_str(&text).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.key_projection(2), w.key_projection(2));
    }

    #[test]
    fn invalid_worlds_are_rejected() {
        let mut w = PlantedWorld::default_world();
        w.layer_budgets = vec![0.05, 0.1, 0.2];
        assert!(w.validate().is_err());
        let mut w = PlantedWorld::default_world();
        w.cooccurrence[0][1] += 0.1;
        assert!(w.validate().is_err());
    }

    #[test]
    fn vocab_layout() {
        let v = PlantedWorld::default_world().vocab();
        assert_eq!(v.size(), 18);
        assert!(v.is_object(11) && !v.is_object(v.yes()));
        assert!(v.is_prompt_only(v.ask()) && !v.is_prompt_only(v.eos()));
    }
}
