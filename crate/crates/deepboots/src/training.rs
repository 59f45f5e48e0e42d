//! Adam optimization of MSE in normalized space, early stopping, and raw-
//! space evaluation.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{bind_model, forward_in_graph, ModelConfig, ModelParams};
use crate::data::{instance_denormalize, WindowBatch};
use crate::metrics::{MetricError, MetricReport, MetricSpec};
use crate::tensor::{Graph, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("gradient for {name} is not finite at step {step}")]
    BadGradient { name: String, step: usize },
    #[error("loss diverged (not finite) at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("{0} set is empty")]
    EmptySet(&'static str),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// Global-norm gradient clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 32,
            max_epochs: 10,
            patience: 3,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            clip_norm: Some(5.0),
            seed: 0,
        }
    }
}

/// First and second Adam moments, one tensor per parameter in `visit` order.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    /// Completed steps (t in the bias-correction terms).
    pub steps: usize,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let mut m = Vec::new();
        params.visit(&mut |t| m.push(Tensor::zeros(t.shape())));
        AdamState {
            v: m.clone(),
            m,
            steps: 0,
        }
    }
}

/// One Adam update. `grads` must follow the parameter `visit` order; a
/// non-finite gradient aborts with the offending parameter's name.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[Tensor],
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<(), TrainError> {
    let names = params.param_names();
    for (g, name) in grads.iter().zip(&names) {
        if !g.is_finite() {
            return Err(TrainError::BadGradient {
                name: name.clone(),
                step: state.steps + 1,
            });
        }
    }
    // Optional global-norm clip across all parameters.
    let mut scale = 1.0;
    if let Some(max_norm) = config.clip_norm {
        let sq: f64 = grads
            .iter()
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum();
        let norm = sq.sqrt();
        if norm > max_norm {
            scale = max_norm / norm;
        }
    }

    state.steps += 1;
    let t = state.steps as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    let mut idx = 0;
    params.visit_mut(&mut |p| {
        let g = &grads[idx];
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        for i in 0..p.len() {
            let gi = g.data()[i] * scale;
            m.data_mut()[i] = config.beta1 * m.data()[i] + (1.0 - config.beta1) * gi;
            v.data_mut()[i] = config.beta2 * v.data()[i] + (1.0 - config.beta2) * gi * gi;
            let m_hat = m.data()[i] / bc1;
            let v_hat = v.data()[i] / bc2;
            p.data_mut()[i] -=
                config.learning_rate * m_hat / (v_hat.sqrt() + config.adam_epsilon);
        }
        idx += 1;
    });
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based index of the epoch whose parameters were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn best_val_loss(&self) -> f64 {
        self.epochs[self.best_epoch - 1].val_loss
    }

    /// CSV with columns epoch, train_loss, val_loss, seconds.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,seconds\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{}\n",
                e.epoch, e.train_loss, e.val_loss, e.seconds
            ));
        }
        out
    }
}

/// Normalize targets with the stats of their own input window, matching the
/// space the model is supervised in.
fn normalized_targets(batch: &WindowBatch, stats: &crate::data::NormStats) -> Tensor {
    let (b, o, d) = (
        batch.targets.shape()[0],
        batch.targets.shape()[1],
        batch.targets.shape()[2],
    );
    let mut z = vec![0.0; batch.targets.len()];
    for bi in 0..b {
        for ti in 0..o {
            for di in 0..d {
                let k = bi * o * d + ti * d + di;
                z[k] = (batch.targets.data()[k] - stats.mean.data()[bi * d + di])
                    / stats.std.data()[bi * d + di];
            }
        }
    }
    Tensor::new(vec![b, o, d], z).expect("shape preserved")
}

/// Mean squared error of the model on `batches` in normalized space, with
/// dropout off.
pub fn validation_loss(
    params: &ModelParams,
    model_config: &ModelConfig,
    batches: &[WindowBatch],
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for batch in batches {
        let mut g = Graph::inference();
        let bound = bind_model(&mut g, params, model_config);
        let art = forward_in_graph(&mut g, &bound, model_config, &batch.inputs, false)?;
        let target = normalized_targets(batch, &art.stats);
        let pred = g.value(art.prediction);
        total += pred
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        count += pred.len();
    }
    if count == 0 {
        return Err(TrainError::EmptySet("validation"));
    }
    Ok(total / count as f64)
}

/// Train with Adam on normalized-space MSE; keep the parameters of the best
/// validation epoch; stop once validation fails to improve for `patience`
/// epochs.
pub fn train(
    params: &mut ModelParams,
    model_config: &ModelConfig,
    train_batches: &[WindowBatch],
    val_batches: &[WindowBatch],
    config: &TrainConfig,
) -> Result<TrainHistory, TrainError> {
    if train_batches.is_empty() {
        return Err(TrainError::EmptySet("training"));
    }
    if val_batches.is_empty() {
        return Err(TrainError::EmptySet("validation"));
    }
    let mut state = AdamState::new(params);
    let mut history = Vec::new();
    let mut best_epoch = 0usize;
    let mut best_val = f64::INFINITY;
    let mut best_params: Option<ModelParams> = None;
    let mut since_best = 0usize;
    let mut stopped_early = false;

    for epoch in 1..=config.max_epochs {
        let start = Instant::now();
        let mut epoch_loss = 0.0;
        for (step, batch) in train_batches.iter().enumerate() {
            // A fresh dropout stream per (seed, epoch, step) keeps the run
            // reproducible without repeating masks across steps.
            let mask_seed = config
                .seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add((epoch * train_batches.len() + step) as u64);
            let mut g = Graph::new(true, mask_seed);
            let bound = bind_model(&mut g, params, model_config);
            let art = forward_in_graph(&mut g, &bound, model_config, &batch.inputs, false)?;
            let target = g.leaf(normalized_targets(batch, &art.stats));
            let diff = g.sub(art.prediction, target)?;
            let sq = g.mul(diff, diff)?;
            let loss = g.mean_all(sq);
            let loss_val = g.value(loss).item()?;
            if !loss_val.is_finite() {
                return Err(TrainError::Diverged { epoch });
            }
            epoch_loss += loss_val;
            g.backward(loss)?;
            let grads: Vec<Tensor> = bound
                .ids
                .iter()
                .map(|&id| {
                    g.grad(id)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(g.value(id).shape()))
                })
                .collect();
            adam_step(params, &grads, &mut state, config)?;
        }
        let train_loss = epoch_loss / train_batches.len() as f64;
        let val_loss = validation_loss(params, model_config, val_batches)?;
        if !val_loss.is_finite() {
            return Err(TrainError::Diverged { epoch });
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            seconds: start.elapsed().as_secs_f64(),
        });
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_params = Some(params.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                stopped_early = true;
                break;
            }
        }
    }
    if let Some(best) = best_params {
        *params = best;
    }
    Ok(TrainHistory {
        epochs: history,
        best_epoch,
        stopped_early,
    })
}

/// Evaluate on raw (denormalized) predictions versus raw targets, computing
/// each metric per feature and averaging across features.
pub fn evaluate(
    params: &ModelParams,
    model_config: &ModelConfig,
    batches: &[WindowBatch],
    metrics: &[MetricSpec],
) -> Result<MetricReport, TrainError> {
    if batches.is_empty() {
        return Err(TrainError::EmptySet("test"));
    }
    let d = model_config.features;
    let mut truth: Vec<Vec<f64>> = vec![Vec::new(); d];
    let mut preds: Vec<Vec<f64>> = vec![Vec::new(); d];
    for batch in batches {
        let mut g = Graph::inference();
        let bound = bind_model(&mut g, params, model_config);
        let art = forward_in_graph(&mut g, &bound, model_config, &batch.inputs, false)?;
        let y_hat = instance_denormalize(g.value(art.prediction), &art.stats)
            .map_err(|e| TensorError::Invalid(e.to_string()))?;
        let (b, o) = (batch.targets.shape()[0], batch.targets.shape()[1]);
        for bi in 0..b {
            for ti in 0..o {
                for di in 0..d {
                    let k = bi * o * d + ti * d + di;
                    truth[di].push(batch.targets.data()[k]);
                    preds[di].push(y_hat.data()[k]);
                }
            }
        }
    }
    let mut values = BTreeMap::new();
    for spec in metrics {
        let mut sum = 0.0;
        for di in 0..d {
            sum += spec.compute(&truth[di], &preds[di])?;
        }
        values.insert(spec.key(), sum / d as f64);
    }
    Ok(MetricReport {
        values,
        elements: truth.iter().map(Vec::len).sum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{init_params, zero_params, AttentionKind};
    use crate::data::{instance_normalize, make_windows, window_starts, SeriesDataset};

    fn tiny_config() -> ModelConfig {
        let mut c = ModelConfig::new(8, 4, 2).with_blocks(2);
        c.embed = 8;
        c.block_out = 4;
        c.heads = 2;
        c.dropout = 0.1;
        c
    }

    fn synthetic_dataset(t: usize) -> SeriesDataset {
        let values: Vec<f64> = (0..t)
            .flat_map(|i| {
                let x = i as f64;
                [(x * 0.31).sin() + 0.01 * x, (x * 0.17).cos() * 2.0]
            })
            .collect();
        SeriesDataset::from_values(values, 2, vec!["a".into(), "b".into()], "synthetic".into())
    }

    fn batches(ds: &SeriesDataset, shuffle: Option<u64>) -> Vec<WindowBatch> {
        let starts = window_starts(ds.len(), 8, 4, 1, shuffle).unwrap();
        make_windows(ds, &starts, 8, 4, 8)
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let c = tiny_config();
        let mut p = init_params(&c, 1).unwrap();
        let before = {
            let mut v = Vec::new();
            p.visit(&mut |t| v.extend_from_slice(t.data()));
            v
        };
        let grads: Vec<Tensor> = {
            let mut g = Vec::new();
            p.visit(&mut |t| g.push(Tensor::zeros(t.shape())));
            g
        };
        let mut state = AdamState::new(&p);
        adam_step(&mut p, &grads, &mut state, &TrainConfig::default()).unwrap();
        let mut after = Vec::new();
        p.visit(&mut |t| after.extend_from_slice(t.data()));
        assert_eq!(before, after);
    }

    #[test]
    fn first_step_moves_by_learning_rate_times_sign() {
        let c = tiny_config();
        let mut p = init_params(&c, 2).unwrap();
        let first_before = p.embed.weight.data()[0];
        let mut grads: Vec<Tensor> = {
            let mut g = Vec::new();
            p.visit(&mut |t| g.push(Tensor::zeros(t.shape())));
            g
        };
        grads[0].data_mut()[0] = 0.37;
        let cfg = TrainConfig {
            clip_norm: None,
            ..TrainConfig::default()
        };
        let mut state = AdamState::new(&p);
        adam_step(&mut p, &grads, &mut state, &cfg).unwrap();
        // Bias-corrected first step: m̂/√v̂ = g/|g|, so the update is
        // −lr·sign(g) up to epsilon.
        let delta = p.embed.weight.data()[0] - first_before;
        assert!((delta + cfg.learning_rate).abs() < 1e-9, "delta={delta}");
    }

    #[test]
    fn nan_gradient_is_rejected_by_name() {
        let c = tiny_config();
        let mut p = init_params(&c, 3).unwrap();
        let mut grads: Vec<Tensor> = {
            let mut g = Vec::new();
            p.visit(&mut |t| g.push(Tensor::zeros(t.shape())));
            g
        };
        grads[1].data_mut()[0] = f64::NAN;
        let mut state = AdamState::new(&p);
        let err = adam_step(&mut p, &grads, &mut state, &TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("embed.bias"), "{err}");
    }

    #[test]
    fn training_improves_validation_loss_and_respects_caps() {
        let c = tiny_config();
        let mut p = init_params(&c, 4).unwrap();
        let ds = synthetic_dataset(220);
        let train_b = batches(&ds, Some(1));
        let val_b = batches(&synthetic_dataset(60), None);
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            max_epochs: 4,
            seed: 4,
            ..TrainConfig::default()
        };
        let before = validation_loss(&p, &c, &val_b).unwrap();
        let hist = train(&mut p, &c, &train_b, &val_b, &cfg).unwrap();
        assert!(hist.epochs.len() <= 4);
        assert!(hist.best_epoch >= 1);
        let after = validation_loss(&p, &c, &val_b).unwrap();
        assert!(after < before, "val {before} -> {after}");
        // Restored parameters achieve exactly the recorded best loss.
        assert!((after - hist.best_val_loss()).abs() < 1e-12);
    }

    #[test]
    fn training_is_bitwise_reproducible() {
        let c = tiny_config();
        let ds = synthetic_dataset(120);
        let train_b = batches(&ds, Some(2));
        let val_b = batches(&synthetic_dataset(40), None);
        let cfg = TrainConfig {
            max_epochs: 2,
            seed: 9,
            ..TrainConfig::default()
        };
        let run = || {
            let mut p = init_params(&c, 9).unwrap();
            train(&mut p, &c, &train_b, &val_b, &cfg).unwrap();
            let mut v = Vec::new();
            p.visit(&mut |t| v.extend(t.data().iter().map(|x| x.to_bits())));
            v
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn evaluate_zero_model_matches_mean_baseline() {
        let c = tiny_config();
        let p = zero_params(&c).unwrap();
        let ds = synthetic_dataset(80);
        let test_b = batches(&ds, None);
        let report = evaluate(&p, &c, &test_b, &[MetricSpec::Mse, MetricSpec::Mae]).unwrap();
        // The zero model predicts the input-window mean; compute the same
        // baseline directly.
        let mut per_feature = vec![(0.0, 0usize); 2];
        for b in &test_b {
            let (_, stats) = instance_normalize(&b.inputs);
            let (bsz, o, d) = (b.targets.shape()[0], b.targets.shape()[1], 2);
            for bi in 0..bsz {
                for ti in 0..o {
                    for di in 0..d {
                        let e = b.targets.data()[bi * o * d + ti * d + di]
                            - stats.mean.data()[bi * d + di];
                        per_feature[di].0 += e * e;
                        per_feature[di].1 += 1;
                    }
                }
            }
        }
        let want: f64 = per_feature.iter().map(|(s, n)| s / *n as f64).sum::<f64>() / 2.0;
        assert!((report.values["mse"] - want).abs() < 1e-9);
        assert!(report.values.contains_key("mae"));
    }

    #[test]
    fn evaluate_perfect_model_on_its_own_outputs_is_zero() {
        let mut c = tiny_config();
        c.dropout = 0.0;
        c.attention_kind = AttentionKind::Frequency;
        let p = init_params(&c, 5).unwrap();
        let ds = synthetic_dataset(60);
        let mut test_b = batches(&ds, None);
        // Replace targets by the model's own predictions.
        for b in &mut test_b {
            let (y, _, _) = crate::backbone::model_forward(&p, &c, &b.inputs, false).unwrap();
            b.targets = y;
        }
        let report = evaluate(&p, &c, &test_b, &[MetricSpec::Mse, MetricSpec::Mae]).unwrap();
        assert!(report.values["mse"] < 1e-20);
        assert!(report.values["mae"] < 1e-10);
    }
}
