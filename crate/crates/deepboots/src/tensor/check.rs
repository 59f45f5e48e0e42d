//! Central-difference gradient checking for any scalar function of leaf
//! tensors.

use super::{Result, Tensor};

/// Worst disagreement between analytic and numeric gradients for one leaf.
#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    /// Index of the leaf in the order passed to [`finite_diff_check`].
    pub leaf: usize,
    /// Flat element index of the worst entry.
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// `|analytic − numeric| / max(|analytic|, |numeric|)`, or the absolute
    /// difference when both are below 1e-6.
    pub rel_err: f64,
}

fn disagreement(a: f64, n: f64) -> f64 {
    let denom = a.abs().max(n.abs());
    if denom < 1e-6 {
        (a - n).abs()
    } else {
        (a - n).abs() / denom
    }
}

/// Compare the analytic gradient of `f` against central differences with
/// step `h`, perturbing every element of every leaf.
///
/// `f` receives the current leaf values and must build a fresh graph, run
/// backward, and return the scalar loss together with one gradient per leaf.
/// Returns one report per leaf; the caller judges the tolerances.
pub fn finite_diff_check<F>(leaves: &[Tensor], h: f64, mut f: F) -> Result<Vec<FiniteDiffReport>>
where
    F: FnMut(&[Tensor]) -> Result<(f64, Vec<Tensor>)>,
{
    let (_, grads) = f(leaves)?;
    assert_eq!(
        grads.len(),
        leaves.len(),
        "one gradient expected per leaf"
    );
    let mut reports = Vec::with_capacity(leaves.len());
    for (li, leaf) in leaves.iter().enumerate() {
        let mut worst = FiniteDiffReport {
            leaf: li,
            element: 0,
            analytic: 0.0,
            numeric: 0.0,
            rel_err: 0.0,
        };
        for ei in 0..leaf.len() {
            let mut plus = leaves.to_vec();
            plus[li].data_mut()[ei] += h;
            let (lp, _) = f(&plus)?;
            let mut minus = leaves.to_vec();
            minus[li].data_mut()[ei] -= h;
            let (lm, _) = f(&minus)?;
            let numeric = (lp - lm) / (2.0 * h);
            let analytic = grads[li].data()[ei];
            let err = disagreement(analytic, numeric);
            if err > worst.rel_err {
                worst = FiniteDiffReport {
                    leaf: li,
                    element: ei,
                    analytic,
                    numeric,
                    rel_err: err,
                };
            }
        }
        reports.push(worst);
    }
    Ok(reports)
}
