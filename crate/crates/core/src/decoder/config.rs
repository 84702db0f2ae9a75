use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::{NoiseSchedule, DEFAULT_LAMBDA, DEFAULT_NOISE_STEP};
use crate::error::{PndError, Result};
use crate::salience::DEFAULT_TAU;

pub const DEFAULT_ALPHA: f64 = 1.0;
pub const DEFAULT_GAMMA: f64 = 1.0;
pub const DEFAULT_BETA: f64 = 0.1;
pub const DEFAULT_MAX_TOKENS: usize = 16;

/// How the next token is chosen from the final distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "temperature")]
pub enum Selection {
    Greedy,
    Temperature(f64),
}

impl fmt::Display for Selection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Selection::Greedy => write!(f, "greedy"),
            Selection::Temperature(t) => write!(f, "temperature:{t}"),
        }
    }
}

impl FromStr for Selection {
    type Err = PndError;

    /// `greedy`, or `temperature:<t>` with `t > 0`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "greedy" {
            return Ok(Selection::Greedy);
        }
        if let Some(t) = s.strip_prefix("temperature:") {
            let t: f64 = t
                .trim()
                .parse()
                .map_err(|_| PndError::config(format!("bad temperature in '{s}'")))?;
            if !(t.is_finite() && t > 0.0) {
                return Err(PndError::config(format!("temperature must be > 0, got {t}")));
            }
            return Ok(Selection::Temperature(t));
        }
        Err(PndError::config(format!(
            "selection must be 'greedy' or 'temperature:<t>', got '{s}'"
        )))
    }
}

/// Hyperparameters of one decoding run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub beta: f64,
    pub lambda: f64,
    pub tau: f64,
    pub noise_step: usize,
    pub max_tokens: usize,
    pub selection: Selection,
    pub seed: u64,
    pub schedule: NoiseSchedule,
    /// When false the original stream is left out of the contrast (it still
    /// drives the plausibility filter).
    pub use_original: bool,
    /// Attention layers to fuse; all of them when `None`.
    pub layers: Option<Vec<usize>>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            gamma: DEFAULT_GAMMA,
            beta: DEFAULT_BETA,
            lambda: DEFAULT_LAMBDA,
            tau: DEFAULT_TAU,
            noise_step: DEFAULT_NOISE_STEP,
            max_tokens: DEFAULT_MAX_TOKENS,
            selection: Selection::Greedy,
            seed: 0,
            schedule: NoiseSchedule::default(),
            use_original: true,
            layers: None,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| PndError::config(format!("cannot parse '{value}' for {key}")))
}

impl DecodeConfig {
    /// Plain greedy decoding on the original view only.
    pub fn baseline() -> Self {
        Self {
            alpha: 0.0,
            gamma: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("gamma", self.gamma), ("lambda", self.lambda)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(PndError::config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        super::logits::check_beta(self.beta)?;
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(PndError::config(format!("tau must lie in [0, 1], got {}", self.tau)));
        }
        if self.max_tokens == 0 {
            return Err(PndError::config("max_tokens must be >= 1"));
        }
        self.schedule.alpha_bar_at(self.noise_step)?;
        if let Some(layers) = &self.layers {
            if layers.is_empty() {
                return Err(PndError::config("layer list must not be empty"));
            }
        }
        Ok(())
    }

    /// Applies one `key=value` setting. Returns `Ok(false)` for keys this
    /// struct does not own so callers can chain several consumers.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "alpha" => self.alpha = parse_num(key, value)?,
            "gamma" => self.gamma = parse_num(key, value)?,
            "beta" => self.beta = parse_num(key, value)?,
            "lambda" => self.lambda = parse_num(key, value)?,
            "tau" => self.tau = parse_num(key, value)?,
            "noise_step" => self.noise_step = parse_num(key, value)?,
            "max_tokens" => self.max_tokens = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "selection" => self.selection = value.parse()?,
            "use_original" => self.use_original = parse_num(key, value)?,
            "layers" => {
                let layers = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse_num(key, s))
                    .collect::<Result<Vec<usize>>>()?;
                self.layers = Some(layers);
            }
            "schedule_steps" | "beta_start" | "beta_end" => {
                let (mut n, mut lo, mut hi) =
                    (self.schedule.num_steps, self.schedule.beta_start, self.schedule.beta_end);
                match key {
                    "schedule_steps" => n = parse_num(key, value)?,
                    "beta_start" => lo = parse_num(key, value)?,
                    _ => hi = parse_num(key, value)?,
                }
                self.schedule = crate::augment::build_schedule(n, lo, hi)?;
            }
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Splits a `key=value` text file into pairs. Blank lines and lines starting
/// with `#` are skipped.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            PndError::config(format!("line {}: expected key=value, got '{line}'", lineno + 1))
        })?;
        let key = key.trim();
        if key.is_empty() {
            return Err(PndError::config(format!("line {}: empty key", lineno + 1)));
        }
        out.push((key.to_string(), value.trim().to_string()));
    }
    Ok(out)
}
