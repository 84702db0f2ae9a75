use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{PndError, Result};
use crate::toy::SyntheticScene;

/// Confusion-matrix metrics with "yes" as the positive class. Rates are
/// percentages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

fn pct(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

/// Harmonic mean of two percentages; 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

pub fn score_binary(answers: &[bool], truths: &[bool]) -> Result<BinaryMetrics> {
    if answers.len() != truths.len() {
        return Err(PndError::input(format!(
            "{} answers for {} ground truths",
            answers.len(),
            truths.len()
        )));
    }
    if answers.is_empty() {
        return Err(PndError::input("nothing to score"));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&a, &t) in answers.iter().zip(truths) {
        match (a, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let precision = pct(tp, tp + fp);
    let recall = pct(tp, tp + fn_);
    Ok(BinaryMetrics {
        accuracy: pct(tp + tn, answers.len()),
        precision,
        recall,
        f1: f1_score(precision, recall),
        tp,
        fp,
        tn,
        fn_,
    })
}

/// Caption hallucination rates, as percentages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChairMetrics {
    pub chair_s: f64,
    pub chair_i: f64,
    pub recall: f64,
}

/// Mentions are deduplicated per caption. A caption without mentions adds
/// nothing to the instance denominator and is never counted as hallucinated.
pub fn chair_metrics(captions: &[Vec<usize>], scenes: &[SyntheticScene]) -> Result<ChairMetrics> {
    if captions.len() != scenes.len() {
        return Err(PndError::input(format!(
            "{} captions for {} scenes",
            captions.len(),
            scenes.len()
        )));
    }
    let mut hallucinated_captions = 0;
    let mut mentions = 0;
    let mut hallucinated_mentions = 0;
    let mut present_total = 0;
    let mut present_covered = 0;
    for (caption, scene) in captions.iter().zip(scenes) {
        let mentioned: BTreeSet<usize> = caption.iter().copied().collect();
        let present = scene.present_set();
        let absent = mentioned.difference(&present).count();
        mentions += mentioned.len();
        hallucinated_mentions += absent;
        if absent > 0 {
            hallucinated_captions += 1;
        }
        present_total += present.len();
        present_covered += mentioned.intersection(&present).count();
    }
    Ok(ChairMetrics {
        chair_s: pct(hallucinated_captions, captions.len()),
        chair_i: pct(hallucinated_mentions, mentions),
        recall: pct(present_covered, present_total),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn published_f1() {
        assert!((f1_score(82.77, 72.06) - 77.04).abs() < 0.01);
    }

    #[test]
    fn perfect_answers() {
        let truths = [true, false, true, false];
        let m = score_binary(&truths, &truths).unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (100.0, 100.0, 100.0, 100.0));
    }

    #[test]
    fn mismatched_lengths() {
        assert!(matches!(score_binary(&[true], &[true, false]), Err(PndError::Input(_))));
    }

    #[test]
    fn random_vectors_match_counter_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let a: Vec<bool> = (0..200).map(|_| rng.random_bool(0.5)).collect();
            let t: Vec<bool> = (0..200).map(|_| rng.random_bool(0.5)).collect();
            let m = score_binary(&a, &t).unwrap();
            let mut c = [[0usize; 2]; 2];
            for i in 0..200 {
                c[a[i] as usize][t[i] as usize] += 1;
            }
            let (tp, fp, tn, fn_) = (c[1][1], c[1][0], c[0][0], c[0][1]);
            assert_eq!((m.tp, m.fp, m.tn, m.fn_), (tp, fp, tn, fn_));
            assert_eq!(m.accuracy, 100.0 * (tp + tn) as f64 / 200.0);
            let p = 100.0 * tp as f64 / (tp + fp) as f64;
            let r = 100.0 * tp as f64 / (tp + fn_) as f64;
            assert_eq!(m.precision, p);
            assert_eq!(m.recall, r);
            assert_eq!(m.f1, 2.0 * p * r / (p + r));
        }
    }

    #[test]
    fn chair_examples() {
        let scenes = vec![
            SyntheticScene::with_objects(2, &[(0, 1), (1, 2)]).unwrap(),
            SyntheticScene::with_objects(2, &[(3, 0)]).unwrap(),
        ];
        let perfect = chair_metrics(&[vec![1, 2], vec![0]], &scenes).unwrap();
        assert_eq!((perfect.chair_s, perfect.chair_i, perfect.recall), (0.0, 0.0, 100.0));

        let one = chair_metrics(&[vec![1, 3]], &scenes[..1]).unwrap();
        assert_eq!((one.chair_s, one.chair_i), (100.0, 50.0));

        let silent = chair_metrics(&[vec![], vec![]], &scenes).unwrap();
        assert_eq!((silent.chair_s, silent.chair_i, silent.recall), (0.0, 0.0, 0.0));
    }
}
