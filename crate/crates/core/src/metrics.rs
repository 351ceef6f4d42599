//! Attack-quality metrics.
//!
//! The headline number is token-wise attack accuracy: each sequence
//! contributes the fraction of its positions recovered exactly, and
//! sequences are averaged with equal weight regardless of length. A
//! token-weighted variant (every token counted equally across the corpus)
//! is provided for comparison, and exact-match rate counts sequences
//! recovered perfectly end to end.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("truth has {truth} tokens but recovery has {recovered}")]
    LengthMismatch { truth: usize, recovered: usize },
    #[error("empty sequence contributes no tokens")]
    EmptySequence,
    #[error("no records to aggregate")]
    NoRecords,
}

/// Per-sequence comparison of ground truth against a recovery.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchRecord {
    pub truth: Vec<u32>,
    pub recovered: Vec<u32>,
}

impl MatchRecord {
    pub fn new(truth: Vec<u32>, recovered: Vec<u32>) -> Result<Self, MetricsError> {
        if truth.is_empty() {
            return Err(MetricsError::EmptySequence);
        }
        if truth.len() != recovered.len() {
            return Err(MetricsError::LengthMismatch {
                truth: truth.len(),
                recovered: recovered.len(),
            });
        }
        Ok(MatchRecord { truth, recovered })
    }

    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }

    /// Number of positions recovered exactly.
    pub fn hits(&self) -> usize {
        self.truth
            .iter()
            .zip(&self.recovered)
            .filter(|(t, r)| t == r)
            .count()
    }

    /// Fraction of positions recovered exactly.
    pub fn token_accuracy(&self) -> f64 {
        self.hits() as f64 / self.len() as f64
    }

    pub fn is_exact(&self) -> bool {
        self.truth == self.recovered
    }
}

/// Mean over sequences of per-sequence token accuracy (each sequence
/// weighted equally).
pub fn attack_accuracy(records: &[MatchRecord]) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::NoRecords);
    }
    let sum: f64 = records.iter().map(|r| r.token_accuracy()).sum();
    Ok(sum / records.len() as f64)
}

/// Fraction of correctly recovered tokens with every token weighted equally,
/// so long sequences influence the average more.
pub fn attack_accuracy_token_weighted(records: &[MatchRecord]) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::NoRecords);
    }
    let hits: usize = records.iter().map(|r| r.hits()).sum();
    let total: usize = records.iter().map(|r| r.len()).sum();
    Ok(hits as f64 / total as f64)
}

/// Fraction of sequences recovered perfectly.
pub fn exact_match_rate(records: &[MatchRecord]) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::NoRecords);
    }
    let exact = records.iter().filter(|r| r.is_exact()).count();
    Ok(exact as f64 / records.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn rec(truth: &[u32], recovered: &[u32]) -> MatchRecord {
        MatchRecord::new(truth.to_vec(), recovered.to_vec()).unwrap()
    }

    #[test]
    fn hand_computed_example() {
        // 3/4 and 1/2 average to 0.625 under per-sequence weighting...
        let records = vec![rec(&[1, 2, 3, 4], &[1, 2, 3, 9]), rec(&[5, 6], &[5, 7])];
        assert_eq!(attack_accuracy(&records).unwrap(), 0.625);
        // ...and to 4/6 under token weighting.
        let tw = attack_accuracy_token_weighted(&records).unwrap();
        assert!((tw - 4.0 / 6.0).abs() < 1e-12);
        assert_eq!(exact_match_rate(&records).unwrap(), 0.0);
    }

    #[test]
    fn perfect_and_zero_recovery() {
        let perfect = vec![rec(&[1, 2], &[1, 2]), rec(&[3], &[3])];
        assert_eq!(attack_accuracy(&perfect).unwrap(), 1.0);
        assert_eq!(exact_match_rate(&perfect).unwrap(), 1.0);
        let none = vec![rec(&[1, 2], &[2, 1])];
        assert_eq!(attack_accuracy(&none).unwrap(), 0.0);
    }

    #[test]
    fn validation_errors() {
        assert_eq!(
            MatchRecord::new(vec![1], vec![1, 2]),
            Err(MetricsError::LengthMismatch {
                truth: 1,
                recovered: 2
            })
        );
        assert_eq!(
            MatchRecord::new(vec![], vec![]),
            Err(MetricsError::EmptySequence)
        );
        assert_eq!(attack_accuracy(&[]), Err(MetricsError::NoRecords));
        assert_eq!(exact_match_rate(&[]), Err(MetricsError::NoRecords));
    }

    #[test]
    fn weightings_agree_on_equal_lengths() {
        // With equal-length sequences the two averages must coincide.
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..50 {
            let records: Vec<MatchRecord> = (0..6)
                .map(|_| {
                    let truth: Vec<u32> = (0..10).map(|_| rng.random_range(0..4)).collect();
                    let recovered: Vec<u32> =
                        truth.iter().map(|&t| if rng.random_bool(0.7) { t } else { 99 }).collect();
                    MatchRecord::new(truth, recovered).unwrap()
                })
                .collect();
            let a = attack_accuracy(&records).unwrap();
            let b = attack_accuracy_token_weighted(&records).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bounds_hold_on_random_records() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        for _ in 0..100 {
            let records: Vec<MatchRecord> = (0..4)
                .map(|_| {
                    let n = rng.random_range(1..12usize);
                    let truth: Vec<u32> = (0..n).map(|_| rng.random_range(0..6)).collect();
                    let recovered: Vec<u32> = (0..n).map(|_| rng.random_range(0..6)).collect();
                    MatchRecord::new(truth, recovered).unwrap()
                })
                .collect();
            for f in [attack_accuracy, attack_accuracy_token_weighted, exact_match_rate] {
                let v = f(&records).unwrap();
                assert!((0.0..=1.0).contains(&v));
            }
            // exact-match rate can never exceed token accuracy
            assert!(
                exact_match_rate(&records).unwrap() <= attack_accuracy(&records).unwrap() + 1e-12
            );
        }
    }
}
