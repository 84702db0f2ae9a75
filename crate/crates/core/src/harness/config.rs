use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::probes::Strategy;
use crate::decoder::{parse_key_values, DecodeConfig};
use crate::error::{PndError, Result};
use crate::toy::{PlantedWorld, SceneParams, WorldParams};

/// Default number of strongest candidates adversarial and popular sampling
/// choose from.
pub const DEFAULT_TOP_K: usize = 3;

/// Final probability an object token needs to count as a caption mention.
pub const DEFAULT_CAPTION_THRESHOLD: f64 = 0.3;

/// Everything a benchmark run needs besides the decoder settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessConfig {
    pub world: WorldParams,
    /// Load the world from this JSON file instead of generating it.
    pub world_file: Option<PathBuf>,
    pub scenes: SceneParams,
    pub n_scenes: usize,
    pub scene_seed: u64,
    pub n_probes: usize,
    pub probe_seed: u64,
    pub top_k: usize,
    pub strategies: Vec<Strategy>,
    pub n_captions: usize,
    pub caption_threshold: f64,
    pub decode: DecodeConfig,
    pub grid: SweepGrid,
}

/// Values swept by `pnd sweep`; an empty axis means "the base value only".
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub alpha: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub tau: Vec<f64>,
    pub lambda: Vec<f64>,
    pub noise_step: Vec<usize>,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            world: WorldParams::default(),
            world_file: None,
            scenes: SceneParams::default(),
            n_scenes: 500,
            scene_seed: 1,
            n_probes: 1000,
            probe_seed: 2,
            top_k: DEFAULT_TOP_K,
            strategies: Strategy::ALL.to_vec(),
            n_captions: 200,
            caption_threshold: DEFAULT_CAPTION_THRESHOLD,
            decode: DecodeConfig::default(),
            grid: SweepGrid::default(),
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| PndError::config(format!("cannot parse '{value}' for {key}")))
}

fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(key, s))
        .collect()
}

fn pair<T: std::str::FromStr>(key: &str, value: &str) -> Result<(T, T)> {
    let (a, b) = value
        .split_once(',')
        .ok_or_else(|| PndError::config(format!("{key} expects 'low,high'")))?;
    Ok((num(key, a)?, num(key, b)?))
}

impl HarnessConfig {
    pub fn from_key_values(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_key_values(text)? {
            cfg.apply(&k, &v)?;
        }
        Ok(cfg)
    }

    /// Applies one setting; unknown keys are a config error.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        if self.decode.apply(key, value)? {
            return Ok(());
        }
        let w = &mut self.world;
        match key {
            "world_seed" => w.seed = num(key, value)?,
            "world_file" => self.world_file = Some(PathBuf::from(value)),
            "n_objects" => w.n_objects = num(key, value)?,
            "n_cliques" => w.n_cliques = num(key, value)?,
            "grid_side" => w.grid_side = num(key, value)?,
            "d_feat" => w.d_feat = num(key, value)?,
            "w_prior" => w.w_prior = num(key, value)?,
            "w_vis" => w.w_vis = num(key, value)?,
            "layer_budgets" => w.layer_budgets = list(key, value)?,
            "layer_key_mix" => w.layer_key_mix = list(key, value)?,
            "residual_penalty" => w.residual_penalty = num(key, value)?,
            "no_prior" => w.no_prior = num(key, value)?,
            "eos_prior" => w.eos_prior = num(key, value)?,
            "evidence_reference" => w.evidence_reference = num(key, value)?,
            "encoder_sigma" => w.encoder_sigma = num(key, value)?,
            "within_clique" => w.within_clique = pair(key, value)?,
            "across_clique" => w.across_clique = pair(key, value)?,
            "popularity" => w.popularity = pair(key, value)?,
            "main_objects" => self.scenes.main_objects = pair(key, value)?,
            "cells_per_object" => self.scenes.cells_per_object = pair(key, value)?,
            "distractor_prob" => self.scenes.distractor_prob = num(key, value)?,
            "n_scenes" => self.n_scenes = num(key, value)?,
            "scene_seed" => self.scene_seed = num(key, value)?,
            "n_probes" => self.n_probes = num(key, value)?,
            "probe_seed" => self.probe_seed = num(key, value)?,
            "top_k" | "adversarial_k" => self.top_k = num(key, value)?,
            "strategies" => {
                self.strategies = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(str::parse)
                    .collect::<Result<_>>()?
            }
            "n_captions" => self.n_captions = num(key, value)?,
            "caption_threshold" => self.caption_threshold = num(key, value)?,
            "grid.alpha" => self.grid.alpha = list(key, value)?,
            "grid.gamma" => self.grid.gamma = list(key, value)?,
            "grid.beta" => self.grid.beta = list(key, value)?,
            "grid.tau" => self.grid.tau = list(key, value)?,
            "grid.lambda" => self.grid.lambda = list(key, value)?,
            "grid.noise_step" => self.grid.noise_step = list(key, value)?,
            _ => return Err(PndError::config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.decode.validate()?;
        if self.n_scenes == 0 || self.n_probes == 0 {
            return Err(PndError::config("n_scenes and n_probes must be >= 1"));
        }
        if self.top_k == 0 {
            return Err(PndError::config("top_k must be >= 1"));
        }
        if self.strategies.is_empty() {
            return Err(PndError::config("need at least one strategy"));
        }
        if !(0.0..=1.0).contains(&self.caption_threshold) {
            return Err(PndError::config("caption_threshold must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.scenes.distractor_prob) {
            return Err(PndError::config("distractor_prob must lie in [0, 1]"));
        }
        Ok(())
    }

    /// The configured world, loaded or generated. Bad world parameters are
    /// reported as config errors.
    pub fn build_world(&self) -> Result<PlantedWorld> {
        match &self.world_file {
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                Ok(serde_json::from_str(&text)?)
            }
            None => PlantedWorld::generate(&self.world).map_err(|e| match e {
                PndError::Input(m) | PndError::Shape(m) => PndError::Config(m),
                other => other,
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_mixed_keys() {
        let cfg = HarnessConfig::from_key_values(
            "alpha=0.5\nw_prior=2\nstrategies=random,adversarial\ngrid.gamma=0,0.5,1\nwithin_clique=0.4,0.8\n",
        )
        .unwrap();
        assert_eq!(cfg.decode.alpha, 0.5);
        assert_eq!(cfg.world.w_prior, 2.0);
        assert_eq!(cfg.strategies, vec![Strategy::Random, Strategy::Adversarial]);
        assert_eq!(cfg.grid.gamma, vec![0.0, 0.5, 1.0]);
        assert_eq!(cfg.world.within_clique, (0.4, 0.8));
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_and_malformed_keys_are_config_errors() {
        assert!(HarnessConfig::from_key_values("bogus=1").unwrap_err().is_config());
        assert!(HarnessConfig::from_key_values("n_probes=many").unwrap_err().is_config());
        assert!(HarnessConfig::from_key_values("strategies=hard").unwrap_err().is_config());
    }

    #[test]
    fn invalid_world_is_a_config_error() {
        let mut cfg = HarnessConfig::default();
        cfg.apply("n_cliques", "40").unwrap();
        assert!(cfg.build_world().unwrap_err().is_config());
    }
}
