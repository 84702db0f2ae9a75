//! Cross-modal attention maps and the salience reductions built on them.
//!
//! A per-layer [`AttentionMap`] (text queries over visual patches) is pooled
//! over its query rows, min-max normalized per layer, and then reduced two
//! ways: the layer mean gives the fused map that drives feature
//! amplification, the layer minimum gives the consensus map that is
//! thresholded into an [`EvidenceMask`] for targeted corruption.
//!
//! Maps are flattened row-major over a square patch grid.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, PndError, Result};
use crate::matrix::{dot, Matrix};

/// Default mask threshold.
pub const DEFAULT_TAU: f64 = 0.5;

/// Row-stochastic attention of `n_queries` text tokens over `n_patches` patches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub layer_index: usize,
    weights: Matrix,
}

impl AttentionMap {
    /// Wraps an existing query x patch matrix after checking that every row
    /// is a probability distribution.
    pub fn new(layer_index: usize, weights: Matrix) -> Result<Self> {
        if weights.rows() == 0 || weights.cols() == 0 {
            return Err(PndError::input("attention map must be non-empty"));
        }
        ensure_finite(weights.as_slice(), "attention map")?;
        for (i, row) in weights.iter_rows().enumerate() {
            if row.iter().any(|&w| w < 0.0) {
                return Err(PndError::input(format!("attention row {i} has a negative entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(PndError::input(format!("attention row {i} sums to {sum}")));
            }
        }
        Ok(Self {
            layer_index,
            weights,
        })
    }

    pub fn n_queries(&self) -> usize {
        self.weights.rows()
    }

    pub fn n_patches(&self) -> usize {
        self.weights.cols()
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn row(&self, query: usize) -> &[f64] {
        self.weights.row(query)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SalienceKind {
    Normalized,
    Fused,
    Consensus,
}

/// Per-patch salience in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSalience {
    pub kind: SalienceKind,
    /// Side of the square patch grid, absent when the length is not a square.
    pub grid_side: Option<usize>,
    pub values: Vec<f64>,
}

impl PatchSalience {
    fn build(kind: SalienceKind, values: Vec<f64>) -> Self {
        Self {
            kind,
            grid_side: square_side(values.len()),
            values,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Boolean evidence mask produced by thresholding a consensus map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceMask {
    pub kind: MaskKind,
    pub grid_side: Option<usize>,
    pub values: Vec<bool>,
    pub threshold_used: f64,
}

/// Serialization tag for masks so they share the salience JSON layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Mask,
}

impl EvidenceMask {
    /// Builds a mask directly from booleans (threshold recorded as given).
    pub fn from_bools(values: Vec<bool>, threshold_used: f64) -> Self {
        Self {
            kind: MaskKind::Mask,
            grid_side: square_side(values.len()),
            values,
            threshold_used,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&m| m).count()
    }

    pub fn is_set(&self, patch: usize) -> bool {
        self.values[patch]
    }
}

pub(crate) fn square_side(n: usize) -> Option<usize> {
    let side = (n as f64).sqrt().round() as usize;
    (side * side == n && n > 0).then_some(side)
}

/// Numerically stable softmax of one row.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Scaled dot-product attention `softmax(Q K^T / dim_scale)` row by row.
pub fn compute_attention(
    layer_index: usize,
    queries: &Matrix,
    keys: &Matrix,
    dim_scale: f64,
) -> Result<AttentionMap> {
    if queries.cols() == 0 {
        return Err(PndError::shape("query dimension must be positive"));
    }
    if queries.cols() != keys.cols() {
        return Err(PndError::shape(format!(
            "query dim {} != key dim {}",
            queries.cols(),
            keys.cols()
        )));
    }
    if queries.rows() == 0 || keys.rows() == 0 {
        return Err(PndError::input("attention needs at least one query and one key"));
    }
    if !(dim_scale.is_finite() && dim_scale > 0.0) {
        return Err(PndError::input(format!("dim_scale must be positive, got {dim_scale}")));
    }
    ensure_finite(queries.as_slice(), "queries")?;
    ensure_finite(keys.as_slice(), "keys")?;

    let mut data = Vec::with_capacity(queries.rows() * keys.rows());
    for q in queries.iter_rows() {
        let scores: Vec<f64> = keys.iter_rows().map(|k| dot(q, k) / dim_scale).collect();
        data.extend(softmax(&scores));
    }
    let weights = Matrix::new(queries.rows(), keys.rows(), data)?;
    Ok(AttentionMap {
        layer_index,
        weights,
    })
}

/// Mean over the query axis: one probability vector over patches.
pub fn pool_over_queries(map: &AttentionMap) -> Result<Vec<f64>> {
    let n_q = map.n_queries();
    if n_q == 0 || map.n_patches() == 0 {
        return Err(PndError::input("cannot pool an empty attention map"));
    }
    let mut pooled = vec![0.0; map.n_patches()];
    for row in map.weights.iter_rows() {
        for (acc, w) in pooled.iter_mut().zip(row) {
            *acc += w;
        }
    }
    for v in &mut pooled {
        *v /= n_q as f64;
    }
    Ok(pooled)
}

/// Min-max scaling to `[0, 1]`. A constant vector carries no localization
/// signal and maps to all zeros.
pub fn normalize_map(pooled: &[f64]) -> Result<PatchSalience> {
    ensure_finite(pooled, "pooled attention")?;
    if pooled.is_empty() {
        return Err(PndError::input("cannot normalize an empty map"));
    }
    let (min, max) = pooled
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = max - min;
    let values = if range > 0.0 {
        pooled
            .iter()
            .map(|v| ((v - min) / range).clamp(0.0, 1.0))
            .collect()
    } else {
        vec![0.0; pooled.len()]
    };
    Ok(PatchSalience::build(SalienceKind::Normalized, values))
}

fn check_stack(maps: &[PatchSalience]) -> Result<usize> {
    let first = maps
        .first()
        .ok_or_else(|| PndError::input("need at least one salience map"))?;
    let n = first.len();
    if let Some(bad) = maps.iter().find(|m| m.len() != n) {
        return Err(PndError::shape(format!(
            "salience maps have lengths {n} and {}",
            bad.len()
        )));
    }
    Ok(n)
}

/// Layer-mean of normalized maps.
pub fn fuse_maps(maps: &[PatchSalience]) -> Result<PatchSalience> {
    let n = check_stack(maps)?;
    let layers = maps.len() as f64;
    let values = (0..n)
        .map(|j| {
            let sum: f64 = maps.iter().map(|m| m.values[j]).sum();
            (sum / layers).clamp(0.0, 1.0)
        })
        .collect();
    Ok(PatchSalience::build(SalienceKind::Fused, values))
}

/// Elementwise minimum across normalized maps.
pub fn consensus_map(maps: &[PatchSalience]) -> Result<PatchSalience> {
    let n = check_stack(maps)?;
    let values = (0..n)
        .map(|j| {
            maps.iter()
                .map(|m| m.values[j])
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    Ok(PatchSalience::build(SalienceKind::Consensus, values))
}

/// `mask[j] = consensus[j] >= tau`.
pub fn threshold_mask(consensus: &PatchSalience, tau: f64) -> Result<EvidenceMask> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(PndError::config(format!("tau must lie in [0, 1], got {tau}")));
    }
    if consensus.kind != SalienceKind::Consensus {
        return Err(PndError::input(format!(
            "threshold_mask expects a consensus map, got {:?}",
            consensus.kind
        )));
    }
    let values = consensus.values.iter().map(|&c| c >= tau).collect();
    Ok(EvidenceMask {
        kind: MaskKind::Mask,
        grid_side: consensus.grid_side,
        values,
        threshold_used: tau,
    })
}

/// Bilinear resampling between square grids, corner-aligned: output cell
/// `(r, c)` samples the source at `(r, c) * (g1 - 1) / (g2 - 1)`. A 1x1
/// target samples the source centre.
pub fn resample_map(map: &[f64], target_side: usize) -> Result<Vec<f64>> {
    let src_side = square_side(map.len())
        .ok_or_else(|| PndError::shape(format!("length {} is not a square grid", map.len())))?;
    if target_side == 0 {
        return Err(PndError::shape("target grid must be at least 1x1"));
    }
    ensure_finite(map, "salience map")?;
    if src_side == target_side {
        return Ok(map.to_vec());
    }

    let coord = |i: usize| -> f64 {
        if target_side == 1 {
            (src_side - 1) as f64 / 2.0
        } else {
            i as f64 * (src_side - 1) as f64 / (target_side - 1) as f64
        }
    };
    let at = |r: usize, c: usize| map[r * src_side + c];

    let mut out = Vec::with_capacity(target_side * target_side);
    for r in 0..target_side {
        let y = coord(r);
        let y0 = (y.floor() as usize).min(src_side - 1);
        let y1 = (y0 + 1).min(src_side - 1);
        let wy = y - y0 as f64;
        for c in 0..target_side {
            let x = coord(c);
            let x0 = (x.floor() as usize).min(src_side - 1);
            let x1 = (x0 + 1).min(src_side - 1);
            let wx = x - x0 as f64;
            let top = at(y0, x0) * (1.0 - wx) + at(y0, x1) * wx;
            let bottom = at(y1, x0) * (1.0 - wx) + at(y1, x1) * wx;
            out.push(top * (1.0 - wy) + bottom * wy);
        }
    }
    Ok(out)
}

/// Everything the two visual pathways need from one attention extraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SalienceSummary {
    pub per_layer: Vec<PatchSalience>,
    pub fused: PatchSalience,
    pub consensus: PatchSalience,
    pub mask: EvidenceMask,
}

/// Runs pool -> normalize -> fuse/consensus -> threshold over the selected
/// layers (all layers when `layers` is `None`).
pub fn summarize(
    maps: &[AttentionMap],
    layers: Option<&[usize]>,
    tau: f64,
) -> Result<SalienceSummary> {
    let selected: Vec<&AttentionMap> = match layers {
        None => maps.iter().collect(),
        Some(wanted) => wanted
            .iter()
            .map(|&l| {
                maps.iter()
                    .find(|m| m.layer_index == l)
                    .ok_or_else(|| PndError::config(format!("layer {l} not available")))
            })
            .collect::<Result<_>>()?,
    };
    if selected.is_empty() {
        return Err(PndError::input("no attention layers selected"));
    }
    let n_patches = selected[0].n_patches();
    if selected.iter().any(|m| m.n_patches() != n_patches) {
        return Err(PndError::shape("attention layers disagree on patch count"));
    }
    let per_layer = selected
        .iter()
        .map(|m| normalize_map(&pool_over_queries(m)?))
        .collect::<Result<Vec<_>>>()?;
    let fused = fuse_maps(&per_layer)?;
    let consensus = consensus_map(&per_layer)?;
    let mask = threshold_mask(&consensus, tau)?;
    Ok(SalienceSummary {
        per_layer,
        fused,
        consensus,
        mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn consensus(values: Vec<f64>) -> PatchSalience {
        PatchSalience::build(SalienceKind::Consensus, values)
    }

    fn normalized(values: Vec<f64>) -> PatchSalience {
        PatchSalience::build(SalienceKind::Normalized, values)
    }

    #[test]
    fn zero_query_gives_uniform_row() {
        let q = Matrix::new(1, 3, vec![0.0; 3]).unwrap();
        let k = Matrix::new(4, 3, (0..12).map(|i| i as f64).collect()).unwrap();
        let map = compute_attention(0, &q, &k, 3f64.sqrt()).unwrap();
        for &w in map.row(0) {
            assert!((w - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_of_zero_and_ln3() {
        let q = Matrix::new(1, 1, vec![1.0]).unwrap();
        let k = Matrix::new(2, 1, vec![0.0, 3f64.ln()]).unwrap();
        let map = compute_attention(0, &q, &k, 1.0).unwrap();
        assert!((map.row(0)[0] - 0.25).abs() < 1e-12);
        assert!((map.row(0)[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn attention_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
        let k: Vec<f64> = (0..20).map(|_| rng.random_range(-2.0..2.0)).collect();
        let qm = Matrix::new(3, 4, q.clone()).unwrap();
        let km = Matrix::new(5, 4, k.clone()).unwrap();
        let map = compute_attention(0, &qm, &km, 2.0).unwrap();
        for i in 0..3 {
            let mut raw = [0.0f64; 5];
            for (j, slot) in raw.iter_mut().enumerate() {
                let mut s = 0.0;
                for d in 0..4 {
                    s += q[i * 4 + d] * k[j * 4 + d];
                }
                *slot = (s / 2.0).exp();
            }
            let z: f64 = raw.iter().sum();
            for j in 0..5 {
                assert!((map.row(i)[j] - raw[j] / z).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn attention_rejects_bad_input() {
        let q = Matrix::new(1, 2, vec![0.0, 1.0]).unwrap();
        let k = Matrix::new(2, 3, vec![0.0; 6]).unwrap();
        assert!(matches!(compute_attention(0, &q, &k, 1.0), Err(PndError::Shape(_))));
        let q = Matrix::new(1, 3, vec![0.0, f64::NAN, 1.0]).unwrap();
        assert!(matches!(compute_attention(0, &q, &k, 1.0), Err(PndError::Input(_))));
    }

    #[test]
    fn pooling_examples() {
        let single = AttentionMap::new(0, Matrix::new(1, 2, vec![0.3, 0.7]).unwrap()).unwrap();
        assert_eq!(pool_over_queries(&single).unwrap(), vec![0.3, 0.7]);

        let two = AttentionMap::new(0, Matrix::new(2, 2, vec![0.2, 0.8, 0.6, 0.4]).unwrap()).unwrap();
        let pooled = pool_over_queries(&two).unwrap();
        assert!((pooled[0] - 0.4).abs() < 1e-15);
        assert!((pooled[1] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn pooling_matches_column_average_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q: Vec<f64> = (0..6 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..9 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let map = compute_attention(
            0,
            &Matrix::new(6, 3, q).unwrap(),
            &Matrix::new(9, 3, k).unwrap(),
            3f64.sqrt(),
        )
        .unwrap();
        let pooled = pool_over_queries(&map).unwrap();
        for j in 0..9 {
            let mut col = 0.0;
            for i in 0..6 {
                col += map.weights().get(i, j);
            }
            assert!((pooled[j] - col / 6.0).abs() < 1e-12);
        }
        assert!((pooled.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn normalize_examples() {
        let out = normalize_map(&[0.1, 0.3, 0.5]).unwrap();
        let expected = [0.0, 0.5, 1.0];
        for (a, b) in out.values.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(normalize_map(&[0.25; 4]).unwrap().values, vec![0.0; 4]);
        assert!(normalize_map(&[0.1, f64::INFINITY]).is_err());
    }

    #[test]
    fn normalize_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v: Vec<f64> = (0..36).map(|_| rng.random_range(0.0..0.2)).collect();
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let out = normalize_map(&v).unwrap();
        assert_eq!(out.grid_side, Some(6));
        for (x, y) in v.iter().zip(&out.values) {
            assert!(((x - lo) / (hi - lo) - y).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_examples() {
        let m = normalized(vec![0.2, 0.9, 0.0]);
        assert_eq!(fuse_maps(std::slice::from_ref(&m)).unwrap().values, m.values);
        let out = fuse_maps(&[normalized(vec![1.0, 0.0]), normalized(vec![0.0, 1.0])]).unwrap();
        assert_eq!(out.values, vec![0.5, 0.5]);
        assert!(matches!(fuse_maps(&[]), Err(PndError::Input(_))));
        assert!(matches!(
            fuse_maps(&[normalized(vec![1.0]), normalized(vec![0.0, 1.0])]),
            Err(PndError::Shape(_))
        ));
    }

    #[test]
    fn fuse_matches_accumulate_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let maps: Vec<PatchSalience> = (0..5)
            .map(|_| normalized((0..16).map(|_| rng.random_range(0.0..1.0)).collect()))
            .collect();
        let fused = fuse_maps(&maps).unwrap();
        for j in 0..16 {
            let mut acc = 0.0;
            for m in &maps {
                acc += m.values[j];
            }
            assert!((fused.values[j] - acc / 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn consensus_examples() {
        let m = normalized(vec![0.3, 0.7]);
        assert_eq!(consensus_map(&[m.clone(), m.clone()]).unwrap().values, m.values);
        let out = consensus_map(&[normalized(vec![0.2, 0.8]), normalized(vec![0.6, 0.4])]).unwrap();
        assert_eq!(out.values, vec![0.2, 0.4]);
    }

    #[test]
    fn consensus_matches_fold_min_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let maps: Vec<PatchSalience> = (0..4)
            .map(|_| normalized((0..25).map(|_| rng.random_range(0.0..1.0)).collect()))
            .collect();
        let out = consensus_map(&maps).unwrap();
        for j in 0..25 {
            let mut lo = maps[0].values[j];
            for m in &maps[1..] {
                if m.values[j] < lo {
                    lo = m.values[j];
                }
            }
            assert_eq!(out.values[j], lo);
        }
    }

    #[test]
    fn threshold_examples() {
        let c = consensus(vec![0.0, 0.1, 0.5, 0.9]);
        assert!(threshold_mask(&c, 0.0).unwrap().values.iter().all(|&m| m));
        let c = consensus(vec![0.1, 0.5, 0.9]);
        assert_eq!(threshold_mask(&c, 0.5).unwrap().values, vec![false, true, true]);
        assert!(matches!(threshold_mask(&c, 1.5), Err(PndError::Config(_))));
        assert!(matches!(threshold_mask(&c, -0.1), Err(PndError::Config(_))));
    }

    #[test]
    fn threshold_sweep_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let c = consensus((0..49).map(|_| rng.random_range(0.0..1.0)).collect());
        let mut last = usize::MAX;
        for step in 0..=20 {
            let tau = step as f64 / 20.0;
            let mask = threshold_mask(&c, tau).unwrap();
            let oracle = c.values.iter().filter(|&&v| v >= tau).count();
            assert_eq!(mask.count(), oracle);
            assert!(mask.count() <= last);
            last = mask.count();
        }
    }

    #[test]
    fn resample_identity_and_constant() {
        let v: Vec<f64> = (0..9).map(|i| i as f64 / 8.0).collect();
        let out = resample_map(&v, 3).unwrap();
        assert!(v.iter().zip(&out).all(|(a, b)| a.to_bits() == b.to_bits()));
        for target in [1, 2, 5, 7] {
            let out = resample_map(&[0.4; 9], target).unwrap();
            assert_eq!(out.len(), target * target);
            assert!(out.iter().all(|&x| (x - 0.4).abs() < 1e-15));
        }
        assert!(matches!(resample_map(&[0.0; 5], 2), Err(PndError::Shape(_))));
    }

    #[test]
    fn resample_two_by_two_to_four_by_four() {
        // Rows (0, 0) and (1, 1); corner-aligned sampling puts output row r
        // at source y = r/3, so every cell of row r equals r/3.
        let out = resample_map(&[0.0, 0.0, 1.0, 1.0], 4).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let expected = r as f64 / 3.0;
                assert!((out[r * 4 + c] - expected).abs() < 1e-15, "cell ({r},{c})");
            }
        }
    }

    #[test]
    fn json_layout() {
        let mask = threshold_mask(&consensus(vec![0.1, 0.9, 0.5, 0.2]), 0.5).unwrap();
        let json = serde_json::to_value(&mask).unwrap();
        assert_eq!(json["kind"], "mask");
        assert_eq!(json["grid_side"], 2);
        assert_eq!(json["threshold_used"], 0.5);
        let fused = fuse_maps(&[normalized(vec![0.0, 1.0, 0.5, 0.5])]).unwrap();
        let json = serde_json::to_value(&fused).unwrap();
        assert_eq!(json["kind"], "fused");
        assert!(json.get("threshold_used").is_none());
    }
}
