//! Numerical checks of the bias/variance and ensemble-variance results the
//! architecture is built on: the error decomposition identity, variance
//! reduction by averaging, the distribution-shift MSE gap, the ambiguity
//! identities (uniform and alternating weights), and the block-ensemble
//! variance bound with its subtraction-versus-addition comparison.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("weights sum to {sum}, expected 1 within 1e-12")]
    WeightSum { sum: f64 },
    #[error("negative weight {weight} at position {index}")]
    NegativeWeight { weight: f64, index: usize },
    #[error("weight/prediction length mismatch: {weights} vs {preds}")]
    LengthMismatch { weights: usize, preds: usize },
    #[error("covariance structure is not positive semidefinite: {detail}")]
    NotPsd { detail: String },
    #[error("alternating aggregation needs an even block count, got {0}")]
    OddBlocks(usize),
    #[error("{0}")]
    Invalid(String),
}

/// Both sides of the error-decomposition identity evaluated on a sample of
/// estimator draws: mean squared deviation from the target plus noise
/// variance on the left, variance + bias² + noise variance on the right.
/// The two agree to floating-point accuracy because the split is algebraic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiasVarianceDecomposition {
    pub variance: f64,
    pub bias_squared: f64,
    pub lhs: f64,
    pub rhs: f64,
}

pub fn bias_variance_decompose(
    samples: &[f64],
    y_true: f64,
    noise_sigma2: f64,
) -> Result<BiasVarianceDecomposition, TheoryError> {
    if samples.len() < 2 {
        return Err(TheoryError::TooFewSamples {
            need: 2,
            got: samples.len(),
        });
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let variance = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    let bias_squared = (mean - y_true) * (mean - y_true);
    let lhs = samples.iter().map(|s| (s - y_true) * (s - y_true)).sum::<f64>() / n + noise_sigma2;
    let rhs = variance + bias_squared + noise_sigma2;
    Ok(BiasVarianceDecomposition {
        variance,
        bias_squared,
        lhs,
        rhs,
    })
}

/// Residual of the weighted-ensemble error identity
/// (y − f)² = Σ wₗ(y − gₗ)² − Σ wₗ(f − gₗ)² with f = Σ wₗ gₗ,
/// together with the ambiguity term Σ wₗ(f − gₗ)².
pub fn ambiguity_identity_residual(
    y: f64,
    preds: &[f64],
    weights: &[f64],
) -> Result<(f64, f64), TheoryError> {
    if weights.len() != preds.len() {
        return Err(TheoryError::LengthMismatch {
            weights: weights.len(),
            preds: preds.len(),
        });
    }
    for (i, &w) in weights.iter().enumerate() {
        if w < 0.0 {
            return Err(TheoryError::NegativeWeight { weight: w, index: i });
        }
    }
    signed_identity_residual(y, preds, weights)
}

/// The same identity without the non-negativity requirement; it holds for
/// any weights summing to 1, which is what the alternating scheme relies on.
fn signed_identity_residual(
    y: f64,
    preds: &[f64],
    weights: &[f64],
) -> Result<(f64, f64), TheoryError> {
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-12 {
        return Err(TheoryError::WeightSum { sum });
    }
    let f: f64 = preds.iter().zip(weights).map(|(g, w)| w * g).sum();
    let weighted_err: f64 = preds
        .iter()
        .zip(weights)
        .map(|(g, w)| w * (y - g) * (y - g))
        .sum();
    let ambiguity: f64 = preds
        .iter()
        .zip(weights)
        .map(|(g, w)| w * (f - g) * (f - g))
        .sum();
    let lhs = (y - f) * (y - f);
    Ok(((lhs - (weighted_err - ambiguity)).abs(), ambiguity))
}

/// Signs of the alternating aggregation for L blocks: the newest block
/// (index L−1) enters positively and earlier blocks alternate, matching the
/// telescoped output stream O_L = Σ (−1)^(L−l) Ôₗ.
pub fn alternating_signs(l: usize) -> Vec<f64> {
    (0..l)
        .map(|i| if (l - 1 - i) % 2 == 0 { 1.0 } else { -1.0 })
        .collect()
}

/// Residual of the alternating-weight error identity: weights sₗ·αₗ with
/// the alternating sign pattern must sum to 1; then the two-term expansion
/// of the squared ensemble error is exact.
pub fn alternating_identity_residual(
    y: f64,
    preds: &[f64],
    alphas: &[f64],
) -> Result<f64, TheoryError> {
    if alphas.len() != preds.len() {
        return Err(TheoryError::LengthMismatch {
            weights: alphas.len(),
            preds: preds.len(),
        });
    }
    let signs = alternating_signs(alphas.len());
    let weights: Vec<f64> = alphas.iter().zip(&signs).map(|(a, s)| a * s).collect();
    signed_identity_residual(y, preds, &weights).map(|(r, _)| r)
}

/// Monte-Carlo comparison of a single estimator draw against the mean of N
/// i.i.d. draws: bias is conserved, variance shrinks by 1/N.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleBiasVar {
    pub bias_ratio: f64,
    pub var_ratio: f64,
    pub single_variance: f64,
    pub ensemble_variance: f64,
    /// Standard error of `var_ratio` under the Gaussian sampling model.
    pub var_ratio_se: f64,
}

pub fn ensemble_bias_var(
    n: usize,
    bias: f64,
    sigma: f64,
    trials: usize,
    seed: u64,
) -> Result<EnsembleBiasVar, TheoryError> {
    if n < 1 || trials < 2 {
        return Err(TheoryError::TooFewSamples {
            need: 2,
            got: trials,
        });
    }
    let truth = 1.0;
    let dist = Normal::new(truth + bias, sigma).map_err(|e| TheoryError::Invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut singles = Vec::with_capacity(trials);
    let mut means = Vec::with_capacity(trials);
    for _ in 0..trials {
        let draws: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
        singles.push(draws[0]);
        means.push(draws.iter().sum::<f64>() / n as f64);
    }
    let stats = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64;
        (m, var)
    };
    let (m_s, v_s) = stats(&singles);
    let (m_e, v_e) = stats(&means);
    // Relative standard error of a Gaussian variance estimate is
    // √(2/(n−1)); the ratio of an independent-ish pair roughly doubles it.
    let rel_se = (2.0 / (trials - 1) as f64).sqrt();
    Ok(EnsembleBiasVar {
        bias_ratio: if bias == 0.0 {
            1.0
        } else {
            (m_e - truth) / (m_s - truth)
        },
        var_ratio: v_e / v_s,
        single_variance: v_s,
        ensemble_variance: v_e,
        var_ratio_se: (v_e / v_s) * rel_se * 2.0f64.sqrt(),
    })
}

/// Closed-form MSE gap between a stale single model and the L-member
/// ensemble after a variance shift: ((L−1)(1−α)/L)·c²·σₜ².
pub fn mse_gap(l: usize, alpha: f64, c2: f64, sigma_t2: f64) -> f64 {
    if l == 0 {
        return 0.0;
    }
    ((l - 1) as f64) * (1.0 - alpha) / l as f64 * c2 * sigma_t2
}

/// Companion simulation for the gap: learner errors are jointly Gaussian
/// with variance c²σₜ² and pairwise correlation α. Returns the empirical
/// MSE of one learner and of the L-average.
pub fn drift_mse_sim(
    l: usize,
    alpha: f64,
    c2: f64,
    sigma_t2: f64,
    trials: usize,
    seed: u64,
) -> Result<(f64, f64), TheoryError> {
    let var = c2 * sigma_t2;
    let cov = equicorrelated_cholesky(l, var, alpha * var)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut mse_single = 0.0;
    let mut mse_ens = 0.0;
    for _ in 0..trials {
        let e = sample_correlated(&cov, &mut rng, &normal);
        mse_single += e[0] * e[0];
        let mean = e.iter().sum::<f64>() / l as f64;
        mse_ens += mean * mean;
    }
    Ok((mse_single / trials as f64, mse_ens / trials as f64))
}

/// Monte-Carlo configuration for the block-ensemble variance comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleSimConfig {
    pub blocks: usize,
    pub alpha: f64,
    /// Per-block estimate variance ν.
    pub nu: f64,
    /// Covariance μ between blocks of the same parity; blocks of opposite
    /// parity share μ/2, matching the derivation's variance bookkeeping for
    /// the subtracted combination.
    pub mu: f64,
    pub trials: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockVarianceReport {
    /// Empirical variance of the alternating (subtractive) combination.
    pub empirical_var: f64,
    /// Empirical variance of the all-plus combination on the same draws.
    pub empirical_add_var: f64,
    /// Closed form for the alternating combination:
    /// (2/ħ)α²ν + (2(ħ−1)/ħ)α²μ − α²μ.
    pub closed_form: f64,
    /// The stated variance bound for subtraction: (4/L)α²(ν + μ).
    pub subtract_bound: f64,
    /// The stated approximate variance under addition: (4/L)α²ν + 3α²μ.
    pub add_formula: f64,
    /// Standard error of `empirical_var`.
    pub std_error: f64,
}

/// Lower-triangular Cholesky factor of the L×L matrix with diagonal `var`
/// and constant off-diagonal `cov`; errors if the matrix is not PSD.
fn equicorrelated_cholesky(l: usize, var: f64, cov: f64) -> Result<Vec<Vec<f64>>, TheoryError> {
    let mut a = vec![vec![0.0; l]; l];
    for i in 0..l {
        for j in 0..l {
            a[i][j] = if i == j { var } else { cov };
        }
    }
    cholesky(a)
}

fn cholesky(mut a: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>, TheoryError> {
    let l = a.len();
    for i in 0..l {
        for j in 0..=i {
            let mut s = a[i][j];
            for k in 0..j {
                s -= a[i][k] * a[j][k];
            }
            if i == j {
                if s < -1e-12 {
                    return Err(TheoryError::NotPsd {
                        detail: format!("pivot {i} is {s}"),
                    });
                }
                a[i][j] = s.max(0.0).sqrt();
            } else {
                a[i][j] = if a[j][j].abs() < 1e-300 { 0.0 } else { s / a[j][j] };
            }
        }
        for j in i + 1..l {
            a[i][j] = 0.0;
        }
    }
    Ok(a)
}

fn sample_correlated(
    chol: &[Vec<f64>],
    rng: &mut ChaCha8Rng,
    normal: &Normal<f64>,
) -> Vec<f64> {
    let l = chol.len();
    let z: Vec<f64> = (0..l).map(|_| normal.sample(rng)).collect();
    (0..l)
        .map(|i| (0..=i).map(|k| chol[i][k] * z[k]).sum())
        .collect()
}

/// Simulate the two block-combination rules on shared draws. Blocks are
/// jointly Gaussian with variance ν; same-parity pairs covary by μ and
/// opposite-parity pairs by μ/2. The alternating estimate is
/// (α/ħ)(Σ g_odd − Σ g_even) with ħ = L/2; the additive one replaces the
/// minus with a plus.
pub fn block_variance_sim(config: &EnsembleSimConfig) -> Result<BlockVarianceReport, TheoryError> {
    let l = config.blocks;
    if l < 2 || l % 2 != 0 {
        return Err(TheoryError::OddBlocks(l));
    }
    if config.trials < 2 {
        return Err(TheoryError::TooFewSamples {
            need: 2,
            got: config.trials,
        });
    }
    let (nu, mu, alpha) = (config.nu, config.mu, config.alpha);
    let half = (l / 2) as f64;

    // Full L×L covariance: parity decides μ vs μ/2.
    let mut cov = vec![vec![0.0; l]; l];
    for i in 0..l {
        for j in 0..l {
            cov[i][j] = if i == j {
                nu
            } else if i % 2 == j % 2 {
                mu
            } else {
                mu / 2.0
            };
        }
    }
    let chol = cholesky(cov)?;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut alt = Vec::with_capacity(config.trials);
    let mut add = Vec::with_capacity(config.trials);
    for _ in 0..config.trials {
        let g = sample_correlated(&chol, &mut rng, &normal);
        let mut s_alt = 0.0;
        let mut s_add = 0.0;
        for (i, &gi) in g.iter().enumerate() {
            // Odd positions (1-based) carry +, even carry − under
            // alternation; 0-based index parity is inverted.
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            s_alt += sign * gi;
            s_add += gi;
        }
        alt.push(alpha / half * s_alt);
        add.push(alpha / half * s_add);
    }
    let variance = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
    };
    let empirical_var = variance(&alt);
    let empirical_add_var = variance(&add);
    let a2 = alpha * alpha;
    let closed_form =
        2.0 / half * a2 * nu + 2.0 * (half - 1.0) / half * a2 * mu - a2 * mu;
    let subtract_bound = 4.0 / l as f64 * a2 * (nu + mu);
    let add_formula = 4.0 / l as f64 * a2 * nu + 3.0 * a2 * mu;
    let std_error = empirical_var * (2.0 / (config.trials - 1) as f64).sqrt();
    Ok(BlockVarianceReport {
        empirical_var,
        empirical_add_var,
        closed_form,
        subtract_bound,
        add_formula,
        std_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn decomposition_is_exact_and_handles_degenerate_estimators() {
        // Constant estimator: zero variance, bias² = (c − y)².
        let d = bias_variance_decompose(&[3.0, 3.0, 3.0], 1.0, 0.25).unwrap();
        assert_eq!(d.variance, 0.0);
        assert_eq!(d.bias_squared, 4.0);
        assert!((d.lhs - d.rhs).abs() < 1e-12);

        // Unbiased Gaussian estimator recovers its variance.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let normal = Normal::new(2.0, 0.7).unwrap();
        let samples: Vec<f64> = (0..100_000).map(|_| normal.sample(&mut rng)).collect();
        let d = bias_variance_decompose(&samples, 2.0, 0.0).unwrap();
        assert!((d.variance - 0.49).abs() < 0.49 * 0.03, "{}", d.variance);
        assert!((d.lhs - d.rhs).abs() < 1e-10);
    }

    #[test]
    fn ambiguity_identity_is_exact_for_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let l = rng.gen_range(1..=6);
            let preds: Vec<f64> = (0..l).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let raw: Vec<f64> = (0..l).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            let weights: Vec<f64> = raw.iter().map(|w| w / s).collect();
            let y = rng.gen_range(-5.0..5.0);
            let (res, amb) = ambiguity_identity_residual(y, &preds, &weights).unwrap();
            assert!(res < 1e-12, "residual {res}");
            assert!(amb >= 0.0);
        }
    }

    #[test]
    fn ambiguity_degenerate_cases() {
        let (res, amb) = ambiguity_identity_residual(2.0, &[5.0], &[1.0]).unwrap();
        assert_eq!(res, 0.0);
        assert_eq!(amb, 0.0);
        // Identical predictions → zero disagreement.
        let (_, amb) =
            ambiguity_identity_residual(1.0, &[4.0, 4.0, 4.0], &[0.2, 0.3, 0.5]).unwrap();
        assert_eq!(amb, 0.0);
        assert!(matches!(
            ambiguity_identity_residual(0.0, &[1.0, 2.0], &[0.4, 0.4]),
            Err(TheoryError::WeightSum { .. })
        ));
        assert!(matches!(
            ambiguity_identity_residual(0.0, &[1.0, 2.0], &[1.5, -0.5]),
            Err(TheoryError::NegativeWeight { .. })
        ));
    }

    #[test]
    fn alternating_identity_holds_under_the_sum_constraint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // L=2: signs are (−, +), so α₁ − α₀ must be 1.
        for _ in 0..1000 {
            let a0 = rng.gen_range(0.0..2.0);
            let alphas = [a0, a0 + 1.0];
            let preds = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
            let y = rng.gen_range(-3.0..3.0);
            let res = alternating_identity_residual(y, &preds, &alphas).unwrap();
            assert!(res < 1e-12, "residual {res}");
        }
        // L=1 reduces to the plain identity with weight 1.
        assert!(alternating_identity_residual(0.7, &[0.3], &[1.0]).unwrap() < 1e-12);
        // Zero predictions and target: both sides vanish.
        assert_eq!(
            alternating_identity_residual(0.0, &[0.0, 0.0], &[1.0, 2.0]).unwrap(),
            0.0
        );
        assert!(matches!(
            alternating_identity_residual(0.0, &[1.0, 2.0], &[1.0, 1.0]),
            Err(TheoryError::WeightSum { .. })
        ));
    }

    #[test]
    fn averaging_preserves_bias_and_divides_variance() {
        let r = ensemble_bias_var(4, 0.5, 1.0, 100_000, 4).unwrap();
        assert!((r.var_ratio - 0.25).abs() < 0.02, "{}", r.var_ratio);
        assert!((r.bias_ratio - 1.0).abs() < 0.02, "{}", r.bias_ratio);
        let r1 = ensemble_bias_var(1, 0.0, 1.0, 10_000, 5).unwrap();
        assert_eq!(r1.var_ratio, 1.0);
    }

    #[test]
    fn gap_formula_values_and_nonnegativity() {
        assert_eq!(mse_gap(1, 0.3, 1.0, 1.0), 0.0);
        assert_eq!(mse_gap(4, 1.0, 2.0, 3.0), 0.0);
        assert!((mse_gap(2, 0.5, 1.0, 1.0) - 0.25).abs() < 1e-15);
        for l in 1..=8 {
            for ai in 0..=10 {
                let gap = mse_gap(l, ai as f64 / 10.0, 1.7, 0.9);
                assert!(gap >= 0.0);
            }
        }
    }

    #[test]
    fn drift_simulation_matches_the_gap() {
        let (l, alpha, c2, st2) = (4usize, 0.3, 1.0, 1.0);
        let (single, ens) = drift_mse_sim(l, alpha, c2, st2, 200_000, 6).unwrap();
        let gap = mse_gap(l, alpha, c2, st2);
        assert!(single > ens);
        assert!(((single - ens) - gap).abs() < 0.05, "{} vs {gap}", single - ens);
    }

    #[test]
    fn block_variance_matches_the_closed_form_chain() {
        // Independent blocks: empirical ≈ 2ν for L=2.
        let r = block_variance_sim(&EnsembleSimConfig {
            blocks: 2,
            alpha: 1.0,
            nu: 1.0,
            mu: 0.0,
            trials: 1_000_000,
            seed: 7,
        })
        .unwrap();
        assert!((r.empirical_var - 2.0).abs() < 0.01, "{}", r.empirical_var);
        assert!((r.closed_form - 2.0).abs() < 1e-15);

        // Correlated case pinning the full bracket.
        let r = block_variance_sim(&EnsembleSimConfig {
            blocks: 2,
            alpha: 1.0,
            nu: 1.0,
            mu: 0.5,
            trials: 1_000_000,
            seed: 8,
        })
        .unwrap();
        assert!((r.empirical_var - 1.5).abs() < 3.0 * r.std_error, "{}", r.empirical_var);
        assert_eq!(r.subtract_bound, 3.0);
        assert_eq!(r.add_formula, 3.5);
        assert!(r.empirical_var < r.subtract_bound);
        assert!(r.subtract_bound < r.add_formula);
    }

    #[test]
    fn subtraction_beats_addition_for_positive_correlation() {
        for seed in 0..10 {
            let r = block_variance_sim(&EnsembleSimConfig {
                blocks: 4,
                alpha: 0.8,
                nu: 1.0,
                mu: 0.4,
                trials: 50_000,
                seed,
            })
            .unwrap();
            assert!(
                r.empirical_var < r.empirical_add_var,
                "seed {seed}: {} !< {}",
                r.empirical_var,
                r.empirical_add_var
            );
        }
    }

    #[test]
    fn invalid_covariances_are_rejected() {
        assert!(matches!(
            block_variance_sim(&EnsembleSimConfig {
                blocks: 2,
                alpha: 1.0,
                nu: 1.0,
                mu: 3.0,
                trials: 100,
                seed: 0,
            }),
            Err(TheoryError::NotPsd { .. })
        ));
        assert!(matches!(
            block_variance_sim(&EnsembleSimConfig {
                blocks: 3,
                alpha: 1.0,
                nu: 1.0,
                mu: 0.0,
                trials: 100,
                seed: 0,
            }),
            Err(TheoryError::OddBlocks(3))
        ));
    }
}
