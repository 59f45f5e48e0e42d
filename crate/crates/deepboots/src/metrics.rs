//! The seven evaluation metrics, bit-exact to their defining formulas.
//!
//! All functions take equally sized slices of ground truth `y` and
//! predictions `y_hat` and reduce over every element. Multivariate results
//! are aggregated by the caller (per feature, then averaged).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("length mismatch: y has {y}, y_hat has {y_hat}")]
    LengthMismatch { y: usize, y_hat: usize },
    #[error("empty input")]
    Empty,
    #[error("{metric} undefined: ground truth is zero at index {index}")]
    ZeroTruth { metric: &'static str, index: usize },
    #[error("smape undefined: |y| + |y_hat| is zero at index {index}")]
    ZeroPair { index: usize },
    #[error("mase undefined: seasonal naive denominator is zero (constant series)")]
    ConstantSeries,
    #[error("mase needs more than m={m} observations, got {n}")]
    TooShortForSeason { m: usize, n: usize },
    #[error("quantile level {0} outside (0, 1)")]
    BadQuantile(f64),
}

fn check(y: &[f64], y_hat: &[f64]) -> Result<(), MetricError> {
    if y.len() != y_hat.len() {
        return Err(MetricError::LengthMismatch {
            y: y.len(),
            y_hat: y_hat.len(),
        });
    }
    if y.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(())
}

/// Mean squared error: (1/N) Σ (yᵢ − ŷᵢ)².
pub fn mse(y: &[f64], y_hat: &[f64]) -> Result<f64, MetricError> {
    check(y, y_hat)?;
    let s: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / y.len() as f64)
}

/// Mean absolute error: (1/N) Σ |yᵢ − ŷᵢ|.
pub fn mae(y: &[f64], y_hat: &[f64]) -> Result<f64, MetricError> {
    check(y, y_hat)?;
    let s: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).sum();
    Ok(s / y.len() as f64)
}

/// Median with the even-length convention: mean of the two central order
/// statistics.
fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Root median square percentage error: √(Median(((yᵢ − ŷᵢ)/yᵢ)²)).
pub fn rmsp(y: &[f64], y_hat: &[f64]) -> Result<f64, MetricError> {
    check(y, y_hat)?;
    let mut sq = Vec::with_capacity(y.len());
    for (i, (a, b)) in y.iter().zip(y_hat).enumerate() {
        if *a == 0.0 {
            return Err(MetricError::ZeroTruth {
                metric: "rmsp",
                index: i,
            });
        }
        let r = (a - b) / a;
        sq.push(r * r);
    }
    Ok(median(sq).sqrt())
}

/// Mean absolute percentage error: (1/N) Σ |yᵢ − ŷᵢ| / |yᵢ|.
pub fn mape(y: &[f64], y_hat: &[f64]) -> Result<f64, MetricError> {
    check(y, y_hat)?;
    let mut s = 0.0;
    for (i, (a, b)) in y.iter().zip(y_hat).enumerate() {
        if *a == 0.0 {
            return Err(MetricError::ZeroTruth {
                metric: "mape",
                index: i,
            });
        }
        s += (a - b).abs() / a.abs();
    }
    Ok(s / y.len() as f64)
}

/// Symmetric MAPE: (2/N) Σ |yᵢ − ŷᵢ| / (|yᵢ| + |ŷᵢ|). Bounded by 2.
pub fn smape(y: &[f64], y_hat: &[f64]) -> Result<f64, MetricError> {
    check(y, y_hat)?;
    let mut s = 0.0;
    for (i, (a, b)) in y.iter().zip(y_hat).enumerate() {
        let denom = a.abs() + b.abs();
        if denom == 0.0 {
            return Err(MetricError::ZeroPair { index: i });
        }
        s += (a - b).abs() / denom;
    }
    Ok(2.0 * s / y.len() as f64)
}

/// Mean absolute scaled error with seasonality m:
/// ((1/N) Σ |yᵢ − ŷᵢ|) / ((1/(N−m)) Σ_{i=m+1}^{N} |yᵢ − yᵢ₋ₘ|).
pub fn mase(y: &[f64], y_hat: &[f64], m: usize) -> Result<f64, MetricError> {
    check(y, y_hat)?;
    let n = y.len();
    if n <= m || m == 0 {
        return Err(MetricError::TooShortForSeason { m, n });
    }
    let num: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / n as f64;
    let den: f64 =
        (m..n).map(|i| (y[i] - y[i - m]).abs()).sum::<f64>() / (n - m) as f64;
    if den == 0.0 {
        return Err(MetricError::ConstantSeries);
    }
    Ok(num / den)
}

/// Pinball loss at level q:
/// (1/N) Σ [ŷ ≥ y](1−q)|y−ŷ| + [ŷ < y]q|y−ŷ|.
pub fn quantile_loss(y: &[f64], y_hat: &[f64], q: f64) -> Result<f64, MetricError> {
    check(y, y_hat)?;
    if !(0.0..=1.0).contains(&q) || q == 0.0 || q == 1.0 {
        return Err(MetricError::BadQuantile(q));
    }
    let mut s = 0.0;
    for (a, b) in y.iter().zip(y_hat) {
        let e = (a - b).abs();
        s += if b >= a { (1.0 - q) * e } else { q * e };
    }
    Ok(s / y.len() as f64)
}

/// A requested metric with its parameters, parseable from CLI tokens like
/// `mse`, `mase:24` or `quantile:0.75`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MetricSpec {
    Mse,
    Mae,
    Rmsp,
    Mape,
    Smape,
    Mase(usize),
    Quantile(f64),
}

impl MetricSpec {
    pub fn parse(token: &str) -> Result<Self, String> {
        let (name, arg) = match token.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (token, None),
        };
        match (name, arg) {
            ("mse", None) => Ok(MetricSpec::Mse),
            ("mae", None) => Ok(MetricSpec::Mae),
            ("rmsp", None) => Ok(MetricSpec::Rmsp),
            ("mape", None) => Ok(MetricSpec::Mape),
            ("smape", None) => Ok(MetricSpec::Smape),
            ("mase", a) => {
                let m = a.unwrap_or("1")
                    .parse::<usize>()
                    .map_err(|_| format!("bad seasonality in {token:?}"))?;
                Ok(MetricSpec::Mase(m))
            }
            ("quantile", Some(a)) => {
                let q = a
                    .parse::<f64>()
                    .map_err(|_| format!("bad quantile level in {token:?}"))?;
                Ok(MetricSpec::Quantile(q))
            }
            _ => Err(format!("unknown metric {token:?}")),
        }
    }

    /// The report key, e.g. `quantile_0.75`.
    pub fn key(&self) -> String {
        match self {
            MetricSpec::Mse => "mse".into(),
            MetricSpec::Mae => "mae".into(),
            MetricSpec::Rmsp => "rmsp".into(),
            MetricSpec::Mape => "mape".into(),
            MetricSpec::Smape => "smape".into(),
            MetricSpec::Mase(m) => format!("mase_{m}"),
            MetricSpec::Quantile(q) => format!("quantile_{q}"),
        }
    }

    pub fn compute(&self, y: &[f64], y_hat: &[f64]) -> Result<f64, MetricError> {
        match self {
            MetricSpec::Mse => mse(y, y_hat),
            MetricSpec::Mae => mae(y, y_hat),
            MetricSpec::Rmsp => rmsp(y, y_hat),
            MetricSpec::Mape => mape(y, y_hat),
            MetricSpec::Smape => smape(y, y_hat),
            MetricSpec::Mase(m) => mase(y, y_hat, *m),
            MetricSpec::Quantile(q) => quantile_loss(y, y_hat, *q),
        }
    }
}

/// Named metric values over N elements. Serializes to JSON with stable
/// (sorted) key order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub values: BTreeMap<String, f64>,
    pub elements: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hand_computed_values() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 3.0]).unwrap(), 0.5);
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 3.0]).unwrap(), 0.5);
        // Median of squared relative errors {1, 0, 0} is 0.
        assert_eq!(rmsp(&[1.0, 2.0, 4.0], &[2.0, 2.0, 4.0]).unwrap(), 0.0);
        // Even length: median of {1, 0.25} = 0.625.
        let r = rmsp(&[1.0, 2.0], &[2.0, 3.0]).unwrap();
        assert!((r - 0.625f64.sqrt()).abs() < 1e-15);
        assert_eq!(mape(&[1.0], &[3.0]).unwrap(), 2.0);
        assert_eq!(smape(&[1.0], &[3.0]).unwrap(), 1.0);
        // |errors| sum 1 over 4, naive denominator 1.
        let m = mase(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 5.0], 1).unwrap();
        assert!((m - 0.25).abs() < 1e-15);
        assert_eq!(quantile_loss(&[0.0], &[1.0], 0.75).unwrap(), 0.25);
    }

    #[test]
    fn perfect_predictions_score_zero() {
        let y = [1.5, -2.0, 3.25];
        for v in [
            mse(&y, &y).unwrap(),
            mae(&y, &y).unwrap(),
            rmsp(&y, &y).unwrap(),
            mape(&y, &y).unwrap(),
            smape(&y, &y).unwrap(),
            mase(&y, &y, 1).unwrap(),
            quantile_loss(&y, &y, 0.25).unwrap(),
        ] {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn error_conditions_name_their_cause() {
        assert!(matches!(
            rmsp(&[0.0], &[1.0]),
            Err(MetricError::ZeroTruth { index: 0, .. })
        ));
        assert!(matches!(
            mape(&[1.0, 0.0], &[1.0, 1.0]),
            Err(MetricError::ZeroTruth { index: 1, .. })
        ));
        assert!(matches!(
            smape(&[0.0], &[0.0]),
            Err(MetricError::ZeroPair { index: 0 })
        ));
        assert!(matches!(
            mase(&[2.0, 2.0, 2.0], &[1.0, 1.0, 1.0], 1),
            Err(MetricError::ConstantSeries)
        ));
        assert!(matches!(
            quantile_loss(&[1.0], &[1.0], 1.5),
            Err(MetricError::BadQuantile(_))
        ));
        assert!(matches!(mse(&[1.0], &[1.0, 2.0]), Err(MetricError::LengthMismatch { .. })));
    }

    #[test]
    fn homogeneity_and_invariances() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y: Vec<f64> = (0..50).map(|_| rng.gen_range(0.5..3.0)).collect();
        let yh: Vec<f64> = y.iter().map(|v| v + rng.gen_range(-0.3..0.3)).collect();
        let y2: Vec<f64> = y.iter().zip(&yh).map(|(a, b)| a + (a - b)).collect();
        // Doubling errors: MSE ×4, MAE ×2.
        let yh2: Vec<f64> = y.iter().zip(&yh).map(|(a, b)| a - 2.0 * (a - b)).collect();
        let _ = y2;
        assert!(
            (mse(&y, &yh2).unwrap() - 4.0 * mse(&y, &yh).unwrap()).abs() < 1e-12
        );
        assert!(
            (mae(&y, &yh2).unwrap() - 2.0 * mae(&y, &yh).unwrap()).abs() < 1e-12
        );
        // MASE scale invariance.
        let ys: Vec<f64> = y.iter().map(|v| v * 7.0).collect();
        let yhs: Vec<f64> = yh.iter().map(|v| v * 7.0).collect();
        assert!(
            (mase(&y, &yh, 1).unwrap() - mase(&ys, &yhs, 1).unwrap()).abs() < 1e-12
        );
        // Median quantile loss is half the MAE.
        assert!(
            (quantile_loss(&y, &yh, 0.5).unwrap() - 0.5 * mae(&y, &yh).unwrap()).abs()
                < 1e-15
        );
        // sMAPE is bounded by 2.
        assert!(smape(&y, &yh).unwrap() <= 2.0);
    }

    #[test]
    fn metrics_are_permutation_invariant() {
        let y = [3.0, 1.0, 2.0, 5.0];
        let yh = [2.5, 1.5, 2.0, 4.0];
        let yp = [1.0, 2.0, 3.0, 5.0];
        let yhp = [1.5, 2.0, 2.5, 4.0];
        assert_eq!(mse(&y, &yh).unwrap(), mse(&yp, &yhp).unwrap());
        assert_eq!(mae(&y, &yh).unwrap(), mae(&yp, &yhp).unwrap());
        assert_eq!(rmsp(&y, &yh).unwrap(), rmsp(&yp, &yhp).unwrap());
        assert_eq!(smape(&y, &yh).unwrap(), smape(&yp, &yhp).unwrap());
    }

    #[test]
    fn spec_tokens_parse_and_key() {
        assert_eq!(MetricSpec::parse("mse").unwrap(), MetricSpec::Mse);
        assert_eq!(MetricSpec::parse("mase:24").unwrap(), MetricSpec::Mase(24));
        assert_eq!(MetricSpec::parse("mase").unwrap(), MetricSpec::Mase(1));
        let q = MetricSpec::parse("quantile:0.75").unwrap();
        assert_eq!(q.key(), "quantile_0.75");
        assert!(MetricSpec::parse("nope").is_err());
        assert!(MetricSpec::parse("quantile").is_err());
    }
}
