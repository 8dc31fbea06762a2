//! Synthetic triple-detection task: does any triple of positions hold
//! symbols summing to zero modulo the alphabet size.

use crate::error::{HomaError, Result};
use crate::tensor::Rng;
use crate::tokenizer::{LabeledExample, Record, RESIDUES};

/// Symbol `v` is encoded as token id `v + MATCH3_SYMBOL_OFFSET`, i.e. the
/// `v`-th residue letter.
pub const MATCH3_SYMBOL_OFFSET: usize = 5;

const MAX_ATTEMPTS: usize = 100_000;

/// True iff distinct positions `i, j, k` exist with
/// `v_i + v_j + v_k = 0 (mod m)`.
pub fn has_zero_triple(values: &[usize], m: usize) -> bool {
    let mut count = vec![0usize; m];
    for &v in values {
        count[v % m] += 1;
    }
    for a in 0..m {
        for b in a..m {
            let c = (3 * m - a - b) % m;
            if c < b {
                continue;
            }
            let mut need = vec![0usize; m];
            need[a] += 1;
            need[b] += 1;
            need[c] += 1;
            if (0..m).all(|s| count[s] >= need[s]) {
                return true;
            }
        }
    }
    false
}

/// A random non-empty symbol subset, then every position uniform over it.
/// Uniform sequences over the whole alphabet are almost always positive, so
/// restricting the support is what makes negatives reachable.
fn candidate(len: usize, m: usize, rng: &mut Rng) -> Vec<usize> {
    let mut symbols: Vec<usize> = (0..m).collect();
    rng.shuffle(&mut symbols);
    let k = 1 + rng.below(m);
    let support = &symbols[..k];
    (0..len).map(|_| support[rng.below(k)]).collect()
}

/// Rewrites one position `p` of a negative sequence. For a positive it gets
/// the symbol completing a zero triple with two neighbours at distance at
/// most 3; for a negative it gets a random symbol. Both classes thus differ
/// from a shared negative background by a single substitution.
fn mutate(base: &[usize], m: usize, positive: bool, rng: &mut Rng) -> Vec<usize> {
    let len = base.len();
    let mut v = base.to_vec();
    let p = rng.below(len);
    let lo = p.saturating_sub(3);
    let hi = (p + 3).min(len - 1);
    let near = |exclude: &[usize], rng: &mut Rng| loop {
        let j = lo + rng.below(hi - lo + 1);
        if !exclude.contains(&j) {
            break j;
        }
    };
    v[p] = if positive {
        let j = near(&[p], rng);
        let k = near(&[p, j], rng);
        (2 * m - v[j] - v[k]) % m
    } else {
        rng.below(m)
    };
    v
}

/// `n` labeled sequences of length `len` over `vocab_size` symbols with
/// alternating target labels, then shuffled. Each sequence is a random
/// negative with one substituted position, resampled until its label
/// matches. Targets are class indices (0 or 1).
pub fn make_match3_dataset(
    n: usize,
    len: usize,
    vocab_size: usize,
    seed: u64,
) -> Result<Vec<LabeledExample>> {
    if len < 3 {
        return Err(HomaError::invalid(format!("match3 needs L >= 3, got {len}")));
    }
    if vocab_size == 0 || vocab_size > RESIDUES.len() {
        return Err(HomaError::invalid(format!(
            "match3 vocabulary must be in 1..={}, got {vocab_size}",
            RESIDUES.len()
        )));
    }
    let infeasible = |kind: &str| {
        HomaError::invalid(format!(
            "cannot balance match3 at L={len}, vocab={vocab_size}: no {kind} example found"
        ))
    };
    let letters: Vec<char> = RESIDUES.chars().collect();
    let mut rng = Rng::with_stream(seed, 5);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let want = i % 2 == 0;
        let mut found = None;
        for _ in 0..MAX_ATTEMPTS {
            let base = candidate(len, vocab_size, &mut rng);
            if has_zero_triple(&base, vocab_size) {
                continue;
            }
            let v = mutate(&base, vocab_size, want, &mut rng);
            if has_zero_triple(&v, vocab_size) == want {
                found = Some(v);
                break;
            }
        }
        let values = found.ok_or_else(|| infeasible(if want { "positive" } else { "negative" }))?;
        let record = Record {
            seq: values.iter().map(|&v| letters[v]).collect(),
            labels: None,
            target: Some(f64::from(u8::from(want))),
        };
        out.push(LabeledExample::from_record(record, len)?);
    }
    rng.shuffle(&mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::tokenizer::Target;

    fn brute(values: &[usize], m: usize) -> bool {
        let n = values.len();
        for i in 0..n {
            for j in i + 1..n {
                for k in j + 1..n {
                    if (values[i] + values[j] + values[k]).is_multiple_of(m) {
                        return true;
                    }
                }
            }
        }
        false
    }

    #[test]
    fn hand_cases() {
        assert!(has_zero_triple(&[1, 2, 5], 8));
        assert!(has_zero_triple(&[0, 0, 0, 0], 8));
        assert!(!has_zero_triple(&[1, 1, 1, 1], 8));
        assert!(!has_zero_triple(&[0, 0], 8));
        assert!(has_zero_triple(&[4, 2, 2], 8));
    }

    #[test]
    fn dataset_is_balanced_and_labeled() {
        let data = make_match3_dataset(1000, 16, 8, 3).unwrap();
        let pos = data
            .iter()
            .filter(|e| e.target == Target::Scalar(1.0))
            .count();
        assert!((450..=550).contains(&pos));
        for e in &data {
            let values: Vec<usize> = e.encoded.ids.iter().map(|&id| id - MATCH3_SYMBOL_OFFSET).collect();
            assert_eq!(e.encoded.ids.len(), 16);
            assert_eq!(Target::Scalar(f64::from(u8::from(brute(&values, 8)))), e.target);
        }
    }

    #[test]
    fn determinism() {
        assert_eq!(
            make_match3_dataset(20, 10, 8, 1).unwrap(),
            make_match3_dataset(20, 10, 8, 1).unwrap()
        );
    }

    #[test]
    fn infeasible_and_invalid() {
        assert!(make_match3_dataset(4, 2, 8, 0).is_err());
        assert!(make_match3_dataset(4, 5, 1, 0).is_err());
        assert!(make_match3_dataset(4, 5, 26, 0).is_err());
    }

    proptest! {
        #[test]
        fn counting_matches_enumeration(values in proptest::collection::vec(0usize..6, 0..12), m in 1usize..7) {
            let v: Vec<usize> = values.iter().map(|x| x % m).collect();
            prop_assert_eq!(has_zero_triple(&v, m), brute(&v, m));
        }
    }
}
