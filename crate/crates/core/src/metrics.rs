//! Classification metrics. Every reported value is an exact rational number
//! rounded once to `f64`, so algebraic identities (weighted recall equals
//! accuracy) hold bit-for-bit.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};

use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<u64>>,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub macro_avg: Averages,
    pub weighted: Averages,
}

pub fn confusion_matrix(labels: &[usize], preds: &[usize], classes: usize) -> Result<Vec<Vec<u64>>> {
    if labels.len() != preds.len() {
        return Err(CoreError::Data(format!("{} labels vs {} predictions", labels.len(), preds.len())));
    }
    let mut m = vec![vec![0u64; classes]; classes];
    for (&t, &p) in labels.iter().zip(preds) {
        if t >= classes || p >= classes {
            return Err(CoreError::Data(format!("class index out of range for {classes} classes")));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

fn ratio(n: u64, d: u64) -> BigRational {
    if d == 0 {
        BigRational::zero()
    } else {
        BigRational::new(BigInt::from(n), BigInt::from(d))
    }
}

fn to_f64(r: &BigRational) -> f64 {
    r.to_f64().expect("bounded metric value")
}

pub fn metrics_from_confusion(confusion: &[Vec<u64>]) -> Result<Metrics> {
    let k = confusion.len();
    if k == 0 || confusion.iter().any(|r| r.len() != k) {
        return Err(CoreError::Data("confusion matrix must be square and non-empty".into()));
    }
    let total: u64 = confusion.iter().flatten().sum();
    let trace: u64 = (0..k).map(|i| confusion[i][i]).sum();
    let mut per_class = Vec::with_capacity(k);
    let mut sums = [BigRational::zero(), BigRational::zero(), BigRational::zero()];
    let mut wsums = [BigRational::zero(), BigRational::zero(), BigRational::zero()];
    for c in 0..k {
        let tp = confusion[c][c];
        let support: u64 = confusion[c].iter().sum();
        let predicted: u64 = (0..k).map(|r| confusion[r][c]).sum();
        let (fp, fn_) = (predicted - tp, support - tp);
        // Harmonic mean of P and R reduces to 2TP / (2TP + FP + FN).
        let vals = [ratio(tp, predicted), ratio(tp, support), ratio(2 * tp, 2 * tp + fp + fn_)];
        let w = BigRational::from_integer(BigInt::from(support));
        for i in 0..3 {
            sums[i] += &vals[i];
            wsums[i] += &vals[i] * &w;
        }
        per_class.push(ClassMetrics {
            precision: to_f64(&vals[0]),
            recall: to_f64(&vals[1]),
            f1: to_f64(&vals[2]),
            support,
        });
    }
    let kk = BigRational::from_integer(BigInt::from(k));
    let tt = BigRational::from_integer(BigInt::from(total));
    let avg = |s: &[BigRational; 3], d: &BigRational| {
        if d.is_zero() {
            Averages {
                precision: 0.0,
                recall: 0.0,
                f1: 0.0,
            }
        } else {
            Averages {
                precision: to_f64(&(&s[0] / d)),
                recall: to_f64(&(&s[1] / d)),
                f1: to_f64(&(&s[2] / d)),
            }
        }
    };
    Ok(Metrics {
        confusion: confusion.to_vec(),
        accuracy: to_f64(&ratio(trace, total)),
        per_class,
        macro_avg: avg(&sums, &kk),
        weighted: avg(&wsums, &tt),
    })
}

pub fn metrics_from_predictions(labels: &[usize], preds: &[usize], classes: usize) -> Result<Metrics> {
    metrics_from_confusion(&confusion_matrix(labels, preds, classes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let m = metrics_from_predictions(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert!(m.per_class.iter().all(|c| c.f1 == 1.0));
        assert_eq!(m.macro_avg.f1, 1.0);
    }

    #[test]
    fn all_predicted_class_zero() {
        let m = metrics_from_confusion(&[vec![5, 0], vec![5, 0]]).unwrap();
        let (c0, c1) = (&m.per_class[0], &m.per_class[1]);
        assert_eq!((c0.precision, c0.recall), (0.5, 1.0));
        assert_eq!(c0.f1, 2.0 / 3.0);
        assert_eq!((c1.precision, c1.recall, c1.f1), (0.0, 0.0, 0.0));
        assert_eq!(m.accuracy, 0.5);
    }

    #[test]
    fn rational_rounding_matches_division() {
        for n in 0..60u64 {
            for d in 1..60u64 {
                if n <= d {
                    assert_eq!(to_f64(&ratio(n, d)), n as f64 / d as f64, "{n}/{d}");
                }
            }
        }
    }

    #[test]
    fn weighted_recall_is_accuracy() {
        let m = metrics_from_confusion(&[vec![7, 2, 1], vec![3, 11, 0], vec![4, 4, 17]]).unwrap();
        assert_eq!(m.weighted.recall, m.accuracy);
        assert_eq!(m.accuracy, 35.0 / 49.0);
    }

    #[test]
    fn rejects_mismatch() {
        assert!(metrics_from_predictions(&[0, 1], &[0], 2).is_err());
        assert!(metrics_from_predictions(&[0, 2], &[0, 1], 2).is_err());
        assert!(metrics_from_confusion(&[vec![1, 2]]).is_err());
    }
}
