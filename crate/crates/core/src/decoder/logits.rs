//! Per-step logit arithmetic: contrast, plausibility filter, final softmax.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, PndError, Result};

/// The three per-step logit vectors, one per visual view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitTriple {
    pub l_orig: Vec<f64>,
    pub l_pos: Vec<f64>,
    pub l_neg: Vec<f64>,
    pub step_index: usize,
}

impl LogitTriple {
    pub fn new(l_orig: Vec<f64>, l_pos: Vec<f64>, l_neg: Vec<f64>, step_index: usize) -> Result<Self> {
        if l_orig.len() != l_pos.len() || l_orig.len() != l_neg.len() {
            return Err(PndError::shape(format!(
                "logit lengths differ: {} / {} / {}",
                l_orig.len(),
                l_pos.len(),
                l_neg.len()
            )));
        }
        if l_orig.is_empty() {
            return Err(PndError::input("empty vocabulary"));
        }
        ensure_finite(&l_orig, "l_orig")?;
        ensure_finite(&l_pos, "l_pos")?;
        ensure_finite(&l_neg, "l_neg")?;
        Ok(Self {
            l_orig,
            l_pos,
            l_neg,
            step_index,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.l_orig.len()
    }
}

/// `l_orig + alpha * l_pos - gamma * l_neg`.
pub fn contrast_logits(triple: &LogitTriple, alpha: f64, gamma: f64) -> Result<Vec<f64>> {
    contrast_weighted(triple, 1.0, alpha, gamma)
}

/// Contrast with an explicit weight on the original stream; a weight of 0
/// gives the positive-minus-negative ablation.
pub fn contrast_weighted(triple: &LogitTriple, orig_weight: f64, alpha: f64, gamma: f64) -> Result<Vec<f64>> {
    if !(alpha >= 0.0 && gamma >= 0.0 && alpha.is_finite() && gamma.is_finite()) {
        return Err(PndError::config(format!(
            "alpha and gamma must be finite and >= 0, got {alpha}, {gamma}"
        )));
    }
    if triple.l_orig.len() != triple.l_pos.len() || triple.l_orig.len() != triple.l_neg.len() {
        return Err(PndError::shape("logit lengths differ"));
    }
    let out = triple
        .l_orig
        .iter()
        .zip(&triple.l_pos)
        .zip(&triple.l_neg)
        .map(|((&o, &p), &n)| orig_weight * o + alpha * p - gamma * n)
        .collect();
    Ok(out)
}

/// Contrasted logits restricted to the candidates that are plausible under
/// the original stream.
#[derive(Debug, Clone, PartialEq)]
pub struct FilteredLogits {
    pub logits: Vec<f64>,
    pub survivors: Vec<bool>,
    pub threshold: f64,
}

impl FilteredLogits {
    pub fn survivor_count(&self) -> usize {
        self.survivors.iter().filter(|&&s| s).count()
    }

    /// Highest surviving logit; ties go to the lowest index.
    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (j, (&l, &keep)) in self.logits.iter().zip(&self.survivors).enumerate() {
            if keep && best.is_none_or(|b| l > self.logits[b]) {
                best = Some(j);
            }
        }
        best
    }
}

pub fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(PndError::config(format!("beta must lie in (0, 1], got {beta}")));
    }
    Ok(())
}

/// Keeps candidate `j` iff `l_orig[j] >= ln(beta) + max(l_orig)`. Excluded
/// candidates leave the support entirely rather than being zeroed.
pub fn plausibility_filter(l_pnd: &[f64], l_orig: &[f64], beta: f64) -> Result<FilteredLogits> {
    check_beta(beta)?;
    if l_pnd.len() != l_orig.len() {
        return Err(PndError::shape("contrasted and original logits differ in length"));
    }
    if l_orig.is_empty() {
        return Err(PndError::input("empty vocabulary"));
    }
    let max = l_orig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let threshold = beta.ln() + max;
    let survivors = l_orig.iter().map(|&l| l >= threshold).collect();
    Ok(FilteredLogits {
        logits: l_pnd.to_vec(),
        survivors,
        threshold,
    })
}

/// Softmax over the survivors at temperature 1; excluded entries get 0.
pub fn finalize_distribution(filtered: &FilteredLogits) -> Result<Vec<f64>> {
    finalize_with_temperature(filtered, 1.0)
}

pub fn finalize_with_temperature(filtered: &FilteredLogits, temperature: f64) -> Result<Vec<f64>> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(PndError::config(format!("temperature must be > 0, got {temperature}")));
    }
    let max = filtered
        .logits
        .iter()
        .zip(&filtered.survivors)
        .filter(|(_, &keep)| keep)
        .map(|(&l, _)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(PndError::Invariant("plausibility filter left no candidates".into()));
    }
    let mut probs: Vec<f64> = filtered
        .logits
        .iter()
        .zip(&filtered.survivors)
        .map(|(&l, &keep)| if keep { ((l - max) / temperature).exp() } else { 0.0 })
        .collect();
    let total: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= total;
    }
    Ok(probs)
}

/// Indices and values of the `k` largest entries, ties by lowest index.
pub fn top_k(values: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.into_iter().take(k).map(|i| (i, values[i])).collect()
}
