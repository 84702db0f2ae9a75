use std::io::Write;
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{HarnessConfig, SweepGrid};
use super::metrics::{chair_metrics, score_binary, BinaryMetrics, ChairMetrics};
use super::probes::{gen_probes, Probe, ProbeSet, Strategy};
use super::SCHEMA_VERSION;
use crate::augment::VisualFeatures;
use crate::decoder::{DecodeConfig, PndSession, TokenId};
use crate::error::{PndError, Result};
use crate::toy::{caption_prompt, encode_scene, generate_corpus, question_prompt, PlantedWorld, SyntheticScene};

/// splitmix64 step: decorrelated child seeds from one base seed.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const FEATURE_STREAM: u64 = 0xFEA7;

/// One probe's answer together with the "yes" logit of every stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutcome {
    pub answer: bool,
    pub p_yes: f64,
    pub p_no: f64,
    pub yes_orig: f64,
    pub yes_pos: f64,
    pub yes_neg: f64,
}

/// A world, its scene corpus and the encoded features of every scene.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub world: PlantedWorld,
    pub scenes: Vec<SyntheticScene>,
    features: Vec<VisualFeatures>,
}

impl Benchmark {
    pub fn new(world: PlantedWorld, scenes: Vec<SyntheticScene>, feature_seed: u64) -> Result<Self> {
        let features = scenes
            .iter()
            .enumerate()
            .map(|(i, s)| encode_scene(&world, s, derive_seed(feature_seed, i as u64)))
            .collect::<Result<_>>()?;
        Ok(Self {
            world,
            scenes,
            features,
        })
    }

    pub fn from_config(cfg: &HarnessConfig) -> Result<Self> {
        cfg.validate()?;
        let world = cfg.build_world()?;
        let scenes = generate_corpus(&world, &cfg.scenes, cfg.n_scenes, cfg.scene_seed);
        Self::new(world, scenes, derive_seed(cfg.scene_seed, FEATURE_STREAM))
    }

    pub fn features(&self, scene_index: usize) -> &VisualFeatures {
        &self.features[scene_index]
    }

    pub fn probe_sets(&self, cfg: &HarnessConfig) -> Result<Vec<ProbeSet>> {
        cfg.strategies
            .iter()
            .map(|&s| {
                let seed = derive_seed(cfg.probe_seed, s as u64);
                gen_probes(&self.world, &self.scenes, s, cfg.n_probes, seed, cfg.top_k)
            })
            .collect()
    }

    /// The question mentions the scene's most prominent other object before
    /// asking, which is what gives the co-occurrence prior its pull.
    pub fn probe_prompt(&self, probe: &Probe) -> Vec<TokenId> {
        let scene = &self.scenes[probe.scene_index];
        let anchor = scene
            .present_set()
            .into_iter()
            .filter(|&k| k != probe.object)
            .max_by(|&a, &b| scene.cell_count(a).cmp(&scene.cell_count(b)).then(b.cmp(&a)));
        question_prompt(&self.world, anchor, probe.object)
    }

    fn check_probe(&self, probe: &Probe) -> Result<()> {
        if probe.scene_index >= self.scenes.len() || probe.object >= self.world.n_objects() {
            return Err(PndError::input(format!(
                "probe refers to scene {} / object {} outside the corpus",
                probe.scene_index, probe.object
            )));
        }
        Ok(())
    }

    /// One decode step on the probe's question; "yes" wins only when strictly
    /// more probable than "no".
    pub fn answer(&self, probe: &Probe, config: &DecodeConfig, probe_index: usize) -> Result<ProbeOutcome> {
        self.check_probe(probe)?;
        let cfg = DecodeConfig {
            seed: derive_seed(config.seed, probe_index as u64),
            ..config.clone()
        };
        let prompt = self.probe_prompt(probe);
        let mut session = PndSession::new(&self.world, self.features(probe.scene_index), &prompt, &cfg)?;
        let out = session.step()?;
        let vocab = self.world.vocab();
        let (yes, no) = (vocab.yes(), vocab.no());
        Ok(ProbeOutcome {
            answer: out.probabilities[yes] > out.probabilities[no],
            p_yes: out.probabilities[yes],
            p_no: out.probabilities[no],
            yes_orig: out.triple.l_orig[yes],
            yes_pos: out.triple.l_pos[yes],
            yes_neg: out.triple.l_neg[yes],
        })
    }

    /// Answers every probe in parallel; results keep the probe order.
    pub fn evaluate(&self, probes: &[Probe], config: &DecodeConfig) -> Result<Vec<ProbeOutcome>> {
        config.validate()?;
        probes
            .par_iter()
            .enumerate()
            .map(|(i, p)| self.answer(p, config, i))
            .collect()
    }

    pub fn score(&self, probes: &[Probe], config: &DecodeConfig) -> Result<BinaryMetrics> {
        let outcomes = self.evaluate(probes, config)?;
        let answers: Vec<bool> = outcomes.iter().map(|o| o.answer).collect();
        let truths: Vec<bool> = probes.iter().map(|p| p.ground_truth).collect();
        score_binary(&answers, &truths)
    }

    /// Scripted captioning: decode from the describe prompt until end of
    /// caption or `max_tokens`, keeping object tokens whose final probability
    /// reaches `threshold`.
    pub fn describe(&self, scene_index: usize, config: &DecodeConfig, threshold: f64) -> Result<Vec<usize>> {
        if scene_index >= self.scenes.len() {
            return Err(PndError::input(format!("scene {scene_index} outside the corpus")));
        }
        let cfg = DecodeConfig {
            seed: derive_seed(config.seed, scene_index as u64),
            ..config.clone()
        };
        let prompt = caption_prompt(&self.world);
        let mut session = PndSession::new(&self.world, self.features(scene_index), &prompt, &cfg)?;
        let vocab = self.world.vocab();
        let mut mentions = Vec::new();
        for _ in 0..cfg.max_tokens {
            let out = session.step()?;
            if out.token == vocab.eos() {
                break;
            }
            if vocab.is_object(out.token) && out.probabilities[out.token] >= threshold {
                mentions.push(out.token);
            }
        }
        Ok(mentions)
    }

    /// Captions the first `n` scenes and scores them.
    pub fn caption_metrics(&self, n: usize, config: &DecodeConfig, threshold: f64) -> Result<ChairMetrics> {
        let n = n.min(self.scenes.len());
        let captions = (0..n)
            .into_par_iter()
            .map(|i| self.describe(i, config, threshold))
            .collect::<Result<Vec<_>>>()?;
        chair_metrics(&captions, &self.scenes[..n])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyResult {
    pub strategy: Strategy,
    pub probes: usize,
    pub skipped: usize,
    pub metrics: BinaryMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    /// Seconds since the Unix epoch. Ignore when comparing reports.
    pub generated_at: u64,
    pub world_seed: u64,
    pub scene_seed: u64,
    pub probe_seed: u64,
    pub config: DecodeConfig,
    pub probe_count: usize,
    pub strategies: Vec<StrategyResult>,
    pub chair: Option<ChairMetrics>,
    pub caption_threshold: f64,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn run_eval(bench: &Benchmark, cfg: &HarnessConfig, probe_sets: &[ProbeSet], config: &DecodeConfig) -> Result<EvalReport> {
    let strategies = probe_sets
        .iter()
        .map(|set| {
            Ok(StrategyResult {
                strategy: set.strategy,
                probes: set.probes.len(),
                skipped: set.skipped,
                metrics: bench.score(&set.probes, config)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let chair = if cfg.n_captions > 0 {
        Some(bench.caption_metrics(cfg.n_captions, config, cfg.caption_threshold)?)
    } else {
        None
    };
    Ok(EvalReport {
        schema_version: SCHEMA_VERSION,
        generated_at: unix_now(),
        world_seed: bench.world.seed,
        scene_seed: cfg.scene_seed,
        probe_seed: cfg.probe_seed,
        config: config.clone(),
        probe_count: probe_sets.iter().map(|s| s.probes.len()).sum(),
        strategies,
        chair,
        caption_threshold: cfg.caption_threshold,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub alpha: f64,
    pub gamma: f64,
    pub use_original: bool,
    pub accuracy: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub strategy: Strategy,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

/// Baseline, positive only, negative only, both paths without the original
/// stream, and the full contrast.
pub fn ablation_configs(base: &DecodeConfig) -> Vec<(&'static str, DecodeConfig)> {
    vec![
        ("baseline", DecodeConfig { alpha: 0.0, gamma: 0.0, use_original: true, ..base.clone() }),
        ("positive_only", DecodeConfig { gamma: 0.0, use_original: true, ..base.clone() }),
        ("negative_only", DecodeConfig { alpha: 0.0, use_original: true, ..base.clone() }),
        ("without_original", DecodeConfig { use_original: false, ..base.clone() }),
        ("full", DecodeConfig { use_original: true, ..base.clone() }),
    ]
}

pub fn run_ablation(bench: &Benchmark, probes: &ProbeSet, base: &DecodeConfig) -> Result<AblationTable> {
    if probes.probes.is_empty() {
        return Err(PndError::input("ablation needs probes"));
    }
    let rows = ablation_configs(base)
        .into_iter()
        .map(|(name, cfg)| {
            let m = bench.score(&probes.probes, &cfg)?;
            Ok(AblationRow {
                name: name.to_string(),
                alpha: cfg.alpha,
                gamma: cfg.gamma,
                use_original: cfg.use_original,
                accuracy: m.accuracy,
                f1: m.f1,
            })
        })
        .collect::<Result<_>>()?;
    Ok(AblationTable {
        strategy: probes.strategy,
        rows,
    })
}

/// How strongly the "yes" logit reacts to corrupting the evidence patches,
/// split by whether the image supports the answer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    /// Mean |l_orig - l_neg| of "yes" on probes whose object is present.
    pub supported_mean: f64,
    /// The same on absent-object probes the baseline wrongly answers "yes".
    pub prior_mean: f64,
    pub ratio: f64,
    pub n_supported: usize,
    pub n_prior: usize,
}

pub fn sensitivity_asymmetry(bench: &Benchmark, probes: &[Probe], config: &DecodeConfig) -> Result<SensitivityReport> {
    let baseline = DecodeConfig {
        alpha: 0.0,
        gamma: 0.0,
        use_original: true,
        ..config.clone()
    };
    let outcomes = bench.evaluate(probes, &baseline)?;
    let (mut sup, mut n_sup, mut pri, mut n_pri) = (0.0, 0, 0.0, 0);
    for (p, o) in probes.iter().zip(&outcomes) {
        let gap = (o.yes_orig - o.yes_neg).abs();
        if p.ground_truth {
            sup += gap;
            n_sup += 1;
        } else if o.answer {
            pri += gap;
            n_pri += 1;
        }
    }
    if n_sup == 0 || n_pri == 0 {
        return Err(PndError::input(format!(
            "need supported and hallucinated answers, got {n_sup} and {n_pri}"
        )));
    }
    let supported_mean = sup / n_sup as f64;
    let prior_mean = pri / n_pri as f64;
    Ok(SensitivityReport {
        supported_mean,
        prior_mean,
        ratio: supported_mean / prior_mean,
        n_supported: n_sup,
        n_prior: n_pri,
    })
}

/// One CSV line: a strategy scored under one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub strategy: Strategy,
    pub alpha: f64,
    pub gamma: f64,
    pub beta: f64,
    pub tau: f64,
    pub lambda_: f64,
    pub noise_step: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl SummaryRow {
    pub fn new(strategy: Strategy, cfg: &DecodeConfig, m: &BinaryMetrics) -> Self {
        Self {
            strategy,
            alpha: cfg.alpha,
            gamma: cfg.gamma,
            beta: cfg.beta,
            tau: cfg.tau,
            lambda_: cfg.lambda,
            noise_step: cfg.noise_step,
            accuracy: m.accuracy,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
        }
    }
}

pub fn summary_rows(report: &EvalReport) -> Vec<SummaryRow> {
    report
        .strategies
        .iter()
        .map(|s| SummaryRow::new(s.strategy, &report.config, &s.metrics))
        .collect()
}

pub fn write_csv<W: Write>(rows: &[SummaryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn axis<T: Copy>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

/// Every configuration of the grid, in row-major order (alpha outermost).
pub fn grid_configs(base: &DecodeConfig, grid: &SweepGrid) -> Vec<DecodeConfig> {
    let mut out = Vec::new();
    for &alpha in &axis(&grid.alpha, base.alpha) {
        for &gamma in &axis(&grid.gamma, base.gamma) {
            for &beta in &axis(&grid.beta, base.beta) {
                for &tau in &axis(&grid.tau, base.tau) {
                    for &lambda in &axis(&grid.lambda, base.lambda) {
                        for &noise_step in &axis(&grid.noise_step, base.noise_step) {
                            out.push(DecodeConfig {
                                alpha,
                                gamma,
                                beta,
                                tau,
                                lambda,
                                noise_step,
                                ..base.clone()
                            });
                        }
                    }
                }
            }
        }
    }
    out
}

/// Strategies times grid configurations, one row each.
pub fn run_sweep(bench: &Benchmark, probe_sets: &[ProbeSet], base: &DecodeConfig, grid: &SweepGrid) -> Result<Vec<SummaryRow>> {
    let configs = grid_configs(base, grid);
    for c in &configs {
        c.validate()?;
    }
    let mut rows = Vec::with_capacity(configs.len() * probe_sets.len());
    for set in probe_sets {
        for c in &configs {
            rows.push(SummaryRow::new(set.strategy, c, &bench.score(&set.probes, c)?));
        }
    }
    Ok(rows)
}
