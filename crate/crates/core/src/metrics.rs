use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary confusion counts with the machine-generated class as positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        ConfusionCounts { tp, fp, tn, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Tallies confusion counts from parallel label/prediction slices.
pub fn confusion(labels: &[u8], predictions: &[u8]) -> Result<ConfusionCounts> {
    if labels.is_empty() {
        return Err(Error::EmptyInput {
            what: "prediction set".into(),
        });
    }
    if labels.len() != predictions.len() {
        return Err(Error::LengthMismatch {
            left: labels.len(),
            right: predictions.len(),
        });
    }
    let mut c = ConfusionCounts::new(0, 0, 0, 0);
    for (&label, &pred) in labels.iter().zip(predictions) {
        for value in [label, pred] {
            if value > 1 {
                return Err(Error::InvalidLabel { value });
            }
        }
        match (label, pred) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fn_ += 1,
            (0, 1) => c.fp += 1,
            (0, 0) => c.tn += 1,
            _ => unreachable!("values validated above"),
        }
    }
    Ok(c)
}

pub fn accuracy(c: &ConfusionCounts) -> Result<f64> {
    let total = c.total();
    if total == 0 {
        return Err(Error::UndefinedMetric {
            metric: "accuracy",
            reason: "no samples".into(),
        });
    }
    Ok((c.tp + c.tn) as f64 / total as f64)
}

pub fn tpr(c: &ConfusionCounts) -> Result<f64> {
    let positives = c.tp + c.fn_;
    if positives == 0 {
        return Err(Error::UndefinedMetric {
            metric: "tpr",
            reason: "no positive samples".into(),
        });
    }
    Ok(c.tp as f64 / positives as f64)
}

pub fn fpr(c: &ConfusionCounts) -> Result<f64> {
    let negatives = c.fp + c.tn;
    if negatives == 0 {
        return Err(Error::UndefinedMetric {
            metric: "fpr",
            reason: "no negative samples".into(),
        });
    }
    Ok(c.fp as f64 / negatives as f64)
}

/// Matthews correlation coefficient.
///
/// Numerator and the product under the square root are computed in exact
/// integer arithmetic (u128) and rounded to f64 once each, so the result is
/// correct to f64 precision for any realistic counts. When any of the four
/// sum factors is zero the denominator vanishes; the conventional value 0 is
/// returned with the flag set.
pub fn mcc_with_flag(c: &ConfusionCounts) -> (f64, bool) {
    let (tp, fp, tn, fn_) = (c.tp as u128, c.fp as u128, c.tn as u128, c.fn_ as u128);
    let factors = [tp + fp, tp + fn_, tn + fp, tn + fn_];
    if factors.contains(&0) {
        return (0.0, true);
    }
    let exact = || -> Option<f64> {
        let pos = tp.checked_mul(tn)?;
        let neg = fp.checked_mul(fn_)?;
        let denom_sq = factors[0]
            .checked_mul(factors[1])?
            .checked_mul(factors[2])?
            .checked_mul(factors[3])?;
        let num = if pos >= neg {
            (pos - neg) as f64
        } else {
            -((neg - pos) as f64)
        };
        Some(num / (denom_sq as f64).sqrt())
    };
    // u128 can only overflow for counts beyond ~2^31 each; fall back to plain
    // float arithmetic there, where exactness is unattainable anyway.
    let value = exact().unwrap_or_else(|| {
        let num = tp as f64 * tn as f64 - fp as f64 * fn_ as f64;
        let denom = factors.iter().map(|&f| f as f64).product::<f64>();
        num / denom.sqrt()
    });
    (value.clamp(-1.0, 1.0), false)
}

pub fn mcc(c: &ConfusionCounts) -> f64 {
    mcc_with_flag(c).0
}

/// Flag recorded when the MCC denominator had a zero factor.
pub const FLAG_MCC_ZERO_DENOMINATOR: &str = "mcc_zero_denominator";

/// One evaluated cell: accuracy as a percentage plus the three rates, with
/// any degeneracy flags. Values are stored unrounded; rounding happens only
/// at render time via the `*_string` accessors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub accuracy_pct: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub mcc: f64,
    pub flags: Vec<String>,
}

impl MetricsRow {
    pub fn from_counts(c: &ConfusionCounts) -> Result<MetricsRow> {
        let (mcc, degenerate) = mcc_with_flag(c);
        let mut flags = Vec::new();
        if degenerate {
            flags.push(FLAG_MCC_ZERO_DENOMINATOR.to_string());
        }
        Ok(MetricsRow {
            accuracy_pct: accuracy(c)? * 100.0,
            tpr: tpr(c)?,
            fpr: fpr(c)?,
            mcc,
            flags,
        })
    }

    pub fn accuracy_string(&self) -> String {
        format_fixed(self.accuracy_pct, 2)
    }

    pub fn tpr_string(&self) -> String {
        format_fixed(self.tpr, 3)
    }

    pub fn fpr_string(&self) -> String {
        format_fixed(self.fpr, 3)
    }

    pub fn mcc_string(&self) -> String {
        format_fixed(self.mcc, 3)
    }
}

/// Fixed-decimal rendering with ties rounded half away from zero
/// (0.0005 -> "0.001", -0.0005 -> "-0.001"), unlike Rust's default
/// round-half-to-even formatting.
pub fn format_fixed(value: f64, decimals: usize) -> String {
    let scale = 10f64.powi(decimals as i32);
    let scaled = value * scale;
    let rounded = if scaled >= 0.0 {
        (scaled + 0.5).floor()
    } else {
        (scaled - 0.5).ceil()
    };
    // `+ 0.0` folds a possible -0.0 into +0.0 before rendering.
    format!("{:.*}", decimals, rounded / scale + 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_from_parallel_slices() {
        let c = confusion(&[1, 1, 0, 0], &[1, 0, 1, 0]).unwrap();
        assert_eq!(c, ConfusionCounts::new(1, 1, 1, 1));
    }

    #[test]
    fn confusion_rejects_bad_input() {
        assert!(matches!(
            confusion(&[], &[]),
            Err(Error::EmptyInput { .. })
        ));
        assert!(matches!(
            confusion(&[1, 0], &[1]),
            Err(Error::LengthMismatch { left: 2, right: 1 })
        ));
        assert!(matches!(
            confusion(&[2], &[1]),
            Err(Error::InvalidLabel { value: 2 })
        ));
    }

    #[test]
    fn rates_on_a_known_table() {
        // 45 of 50 positives caught, 5 of 50 negatives false-alarmed.
        let c = ConfusionCounts::new(45, 5, 45, 5);
        assert!((accuracy(&c).unwrap() - 0.9).abs() < 1e-15);
        assert!((tpr(&c).unwrap() - 0.9).abs() < 1e-15);
        assert!((fpr(&c).unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn rates_are_undefined_without_their_denominator() {
        let empty = ConfusionCounts::new(0, 0, 0, 0);
        assert!(matches!(
            accuracy(&empty),
            Err(Error::UndefinedMetric { metric: "accuracy", .. })
        ));
        let no_positives = ConfusionCounts::new(0, 3, 7, 0);
        assert!(matches!(
            tpr(&no_positives),
            Err(Error::UndefinedMetric { metric: "tpr", .. })
        ));
        let no_negatives = ConfusionCounts::new(3, 0, 0, 7);
        assert!(matches!(
            fpr(&no_negatives),
            Err(Error::UndefinedMetric { metric: "fpr", .. })
        ));
    }

    #[test]
    fn mcc_of_perfect_and_inverted_classifiers() {
        let perfect = ConfusionCounts::new(50, 0, 50, 0);
        assert_eq!(mcc(&perfect), 1.0);
        let inverted = ConfusionCounts::new(0, 50, 0, 50);
        assert_eq!(mcc(&inverted), -1.0);
    }

    #[test]
    fn mcc_matches_a_hand_expanded_case() {
        // Every intermediate below is a small exact integer:
        //   numerator  90*80 - 20*10            = 7000
        //   radicand   110 * 100 * 100 * 90     = 99_000_000
        let c = ConfusionCounts::new(90, 20, 80, 10);
        let expected = 7000.0 / 99_000_000_f64.sqrt();
        assert!((mcc(&c) - expected).abs() < 1e-15);
        assert_eq!(format_fixed(mcc(&c), 3), "0.704");
    }

    #[test]
    fn mcc_zero_denominator_is_flagged_not_crashed() {
        // Predict-everything-positive leaves tn + fn = 0.
        let c = ConfusionCounts::new(10, 10, 0, 0);
        assert_eq!(mcc_with_flag(&c), (0.0, true));
        let row = MetricsRow::from_counts(&c).unwrap();
        assert_eq!(row.flags, vec![FLAG_MCC_ZERO_DENOMINATOR.to_string()]);
    }

    #[test]
    fn mcc_survives_huge_counts_via_float_fallback() {
        let c = ConfusionCounts::new(u64::MAX / 2, 1, u64::MAX / 2, 1);
        let value = mcc(&c);
        assert!(value.is_finite());
        assert!(value > 0.99 && value <= 1.0);
    }

    #[test]
    fn metrics_row_round_trips_through_json() {
        let row = MetricsRow::from_counts(&ConfusionCounts::new(90, 20, 80, 10)).unwrap();
        let json = serde_json::to_string(&row).unwrap();
        assert!(json.starts_with("{\"accuracy_pct\":"));
        let back: MetricsRow = serde_json::from_str(&json).unwrap();
        assert_eq!(back, row);
    }

    #[test]
    fn fixed_formatting_rounds_half_away_from_zero() {
        assert_eq!(format_fixed(0.0004, 3), "0.000");
        assert_eq!(format_fixed(0.0005, 3), "0.001");
        assert_eq!(format_fixed(-0.0005, 3), "-0.001");
        assert_eq!(format_fixed(0.125, 2), "0.13");
        assert_eq!(format_fixed(-0.125, 2), "-0.13");
        assert_eq!(format_fixed(-0.0004, 3), "0.000");
        assert_eq!(format_fixed(100.0, 2), "100.00");
        assert_eq!(format_fixed(97.77, 2), "97.77");
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn mcc_is_bounded(tp in 0u64..1000, fp in 0u64..1000, tn in 0u64..1000, fn_ in 0u64..1000) {
                let value = mcc(&ConfusionCounts::new(tp, fp, tn, fn_));
                prop_assert!((-1.0..=1.0).contains(&value));
            }

            #[test]
            fn mcc_is_symmetric_under_class_relabeling(tp in 0u64..1000, fp in 0u64..1000, tn in 0u64..1000, fn_ in 0u64..1000) {
                // Swapping which class is called positive swaps tp<->tn and
                // fp<->fn and must not change the correlation.
                let a = mcc(&ConfusionCounts::new(tp, fp, tn, fn_));
                let b = mcc(&ConfusionCounts::new(tn, fn_, tp, fp));
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }

            #[test]
            fn mcc_negates_when_predictions_flip(tp in 0u64..1000, fp in 0u64..1000, tn in 0u64..1000, fn_ in 0u64..1000) {
                let c = ConfusionCounts::new(tp, fp, tn, fn_);
                let (value, degenerate) = mcc_with_flag(&c);
                let flipped = ConfusionCounts::new(fn_, tn, fp, tp);
                let (neg, neg_degenerate) = mcc_with_flag(&flipped);
                prop_assert_eq!(degenerate, neg_degenerate);
                if !degenerate {
                    prop_assert!((value + neg).abs() < 1e-12);
                }
            }

            #[test]
            fn mcc_is_scale_invariant(tp in 1u64..200, fp in 1u64..200, tn in 1u64..200, fn_ in 1u64..200, k in 1u64..500) {
                let a = mcc(&ConfusionCounts::new(tp, fp, tn, fn_));
                let b = mcc(&ConfusionCounts::new(tp * k, fp * k, tn * k, fn_ * k));
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
