//! Evaluation metrics: per-residue accuracy, macro F1 and Spearman rank
//! correlation.

use std::collections::BTreeSet;

use crate::error::{HomaError, Result};
use crate::tokenizer::IGNORE_INDEX;

fn scored_pairs<'a>(preds: &'a [usize], labels: &'a [i64]) -> Result<Vec<(usize, usize)>> {
    if preds.len() != labels.len() {
        return Err(HomaError::Metric(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let pairs: Vec<(usize, usize)> = preds
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l != IGNORE_INDEX)
        .map(|(&p, &l)| {
            usize::try_from(l)
                .map(|l| (p, l))
                .map_err(|_| HomaError::Metric(format!("negative label {l}")))
        })
        .collect::<Result<_>>()?;
    if pairs.is_empty() {
        return Err(HomaError::Metric("every position is masked".into()));
    }
    Ok(pairs)
}

/// Fraction of non-ignored positions whose prediction equals the label.
pub fn q3_accuracy(preds: &[usize], labels: &[i64]) -> Result<f64> {
    let pairs = scored_pairs(preds, labels)?;
    let correct = pairs.iter().filter(|(p, l)| p == l).count();
    Ok(correct as f64 / pairs.len() as f64)
}

/// Unweighted mean of per-class F1 over every class that occurs in either
/// the labels or the predictions.
pub fn macro_f1(preds: &[usize], labels: &[i64]) -> Result<f64> {
    let pairs = scored_pairs(preds, labels)?;
    let classes: BTreeSet<usize> = pairs.iter().flat_map(|&(p, l)| [p, l]).collect();
    let mut total = 0.0;
    for &c in &classes {
        let tp = pairs.iter().filter(|&&(p, l)| p == c && l == c).count();
        let fp = pairs.iter().filter(|&&(p, l)| p == c && l != c).count();
        let fn_ = pairs.iter().filter(|&&(p, l)| p != c && l == c).count();
        total += 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
    }
    Ok(total / classes.len() as f64)
}

/// 1-based ranks with ties sharing the mean of the ranks they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && x[order[j]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(HomaError::Metric(format!(
            "correlation needs two equal-length series of at least 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(HomaError::Metric("correlation of a constant series".into()));
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(HomaError::Metric("non-finite value in rank correlation".into()));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Fraction of exact matches.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(HomaError::Metric(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / preds.len() as f64)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn perfect_predictions() {
        let labels = [0i64, 1, 2, 2, IGNORE_INDEX];
        let preds = [0usize, 1, 2, 2, 1];
        assert_eq!(q3_accuracy(&preds, &labels).unwrap(), 1.0);
        assert_eq!(macro_f1(&preds, &labels).unwrap(), 1.0);
        assert!((spearman(&[1.0, 5.0, 2.0], &[0.1, 0.9, 0.3]).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn anti_monotone() {
        assert!((spearman(&[1., 2., 3.], &[3., 2., 1.]).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn tied_ranks() {
        assert_eq!(average_ranks(&[1., 2., 2., 4.]), vec![1.0, 2.5, 2.5, 4.0]);
        // ranks (1, 2.5, 2.5, 4) against (1, 2, 3, 4)
        let want = 4.5 / (4.5f64.sqrt() * 5.0f64.sqrt());
        assert!((spearman(&[1., 2., 2., 4.], &[1., 2., 3., 4.]).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn hand_f1() {
        // class 0: tp 1 fp 1 fn 0 -> 2/3; class 1: tp 0 fp 0 fn 1 -> 0
        let f = macro_f1(&[0, 0], &[0, 1]).unwrap();
        assert!((f - 1.0 / 3.0).abs() < 1e-15);
        // class 2 only predicted still counts
        let g = macro_f1(&[2, 0], &[0, 0]).unwrap();
        assert!((g - (2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        assert!(q3_accuracy(&[0, 1], &[IGNORE_INDEX, IGNORE_INDEX]).is_err());
        assert!(macro_f1(&[0], &[0, 1]).is_err());
        assert!(spearman(&[1., 1., 1.], &[1., 2., 3.]).is_err());
        assert!(spearman(&[1.], &[1.]).is_err());
        assert!(accuracy(&[], &[]).is_err());
    }

    proptest! {
        #[test]
        fn spearman_bounded_and_symmetric(x in proptest::collection::vec(-5i32..5, 3..30), seed in 0u64..100) {
            let y: Vec<f64> = x.iter().enumerate().map(|(i, &v)| ((i as u64 * 31 + seed) % 7) as f64 + v as f64 * 0.1).collect();
            let x: Vec<f64> = x.iter().map(|&v| v as f64).collect();
            if let (Ok(a), Ok(b)) = (spearman(&x, &y), spearman(&y, &x)) {
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&a));
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn q3_ignores_masked(preds in proptest::collection::vec(0usize..3, 1..40)) {
            let labels: Vec<i64> = preds.iter().enumerate().map(|(i, &p)| if i % 3 == 0 { IGNORE_INDEX } else { p as i64 }).collect();
            if labels.iter().any(|&l| l != IGNORE_INDEX) {
                prop_assert_eq!(q3_accuracy(&preds, &labels).unwrap(), 1.0);
            }
        }
    }
}
