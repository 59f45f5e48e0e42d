//! Implementations of the five subcommands.

use std::error::Error;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use serde_json::json;

use deepboots::backbone::{
    decompose as decompose_model, init_params, AttentionKind, Checkpoint, ModelConfig,
};
use deepboots::data::{
    chronological_split, load_csv, make_windows, window_starts, SeriesDataset, WindowBatch,
};
use deepboots::metrics::MetricSpec;
use deepboots::theory;
use deepboots::training::{evaluate, train as train_model, TrainConfig};

use crate::manifest::{fingerprint_file, resolve_out_dir, RunManifest};
use crate::variants::parse_variant_list;
use crate::{
    AblateArgs, AggFlag, AttentionFlag, DecomposeArgs, EvalArgs, GatingFlag, ModelFlags,
    TheoryArgs, TheoryCheck, TrainArgs, TrainFlags,
};

type CmdResult = Result<ExitCode, Box<dyn Error>>;

const SPLIT: (f64, f64, f64) = (0.6, 0.2, 0.2);

fn usage_error(msg: &str) -> CmdResult {
    eprintln!("error: {msg}");
    Ok(ExitCode::from(2))
}

impl ModelFlags {
    fn to_config(&self, features: usize) -> ModelConfig {
        let mut c = ModelConfig::new(self.input_len, self.pred_len, features)
            .with_blocks(self.blocks);
        c.embed = self.embed;
        c.heads = self.heads;
        c.dropout = self.dropout;
        c.attention_kind = match self.attention {
            AttentionFlag::Full => AttentionKind::Full,
            AttentionFlag::Freq => AttentionKind::Frequency,
        };
        c.input_agg = match self.input_agg {
            AggFlag::Sub => deepboots::backbone::Aggregation::Subtract,
            AggFlag::Add => deepboots::backbone::Aggregation::Add,
        };
        c.output_agg = match self.output_agg {
            AggFlag::Sub => deepboots::backbone::Aggregation::Subtract,
            AggFlag::Add => deepboots::backbone::Aggregation::Add,
        };
        c.gating = matches!(self.gating, GatingFlag::On);
        c
    }
}

impl TrainFlags {
    fn to_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            batch_size: self.batch,
            max_epochs: self.epochs,
            patience: self.patience,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

struct Splits {
    train: SeriesDataset,
    val: SeriesDataset,
    test: SeriesDataset,
}

fn load_splits(path: &Path, input_len: usize, pred_len: usize) -> Result<Splits, Box<dyn Error>> {
    let ds = load_csv(path, None)?;
    if ds.dropped_rows > 0 {
        eprintln!("note: dropped {} rows with missing values", ds.dropped_rows);
    }
    let (train, val, test) = chronological_split(&ds, SPLIT, input_len + pred_len)?;
    Ok(Splits { train, val, test })
}

fn batches(
    ds: &SeriesDataset,
    input_len: usize,
    pred_len: usize,
    batch: usize,
    shuffle_seed: Option<u64>,
) -> Result<Vec<WindowBatch>, Box<dyn Error>> {
    let starts = window_starts(ds.len(), input_len, pred_len, 1, shuffle_seed)?;
    Ok(make_windows(ds, &starts, input_len, pred_len, batch))
}

pub fn train(args: TrainArgs) -> CmdResult {
    let started = Instant::now();
    let out_dir = resolve_out_dir(args.out)?;
    let splits = load_splits(&args.data, args.model.input_len, args.model.pred_len)?;
    let config = args.model.to_config(splits.train.num_features());
    config.validate()?;
    let train_cfg = args.train.to_config();

    let train_b = batches(
        &splits.train,
        config.input_len,
        config.horizon,
        train_cfg.batch_size,
        Some(train_cfg.seed),
    )?;
    let val_b = batches(
        &splits.val,
        config.input_len,
        config.horizon,
        train_cfg.batch_size,
        None,
    )?;

    let mut params = init_params(&config, train_cfg.seed)?;
    let history = train_model(&mut params, &config, &train_b, &val_b, &train_cfg)?;

    let ckpt_path = out_dir.join("checkpoint.json");
    Checkpoint {
        config: config.clone(),
        params,
    }
    .save(&ckpt_path)?;
    let hist_path = out_dir.join("history.csv");
    std::fs::write(&hist_path, history.to_csv())?;

    println!(
        "trained {} epochs (best {}, val loss {:.6}{})",
        history.epochs.len(),
        history.best_epoch,
        history.best_val_loss(),
        if history.stopped_early {
            ", stopped early"
        } else {
            ""
        }
    );
    println!("checkpoint: {}", ckpt_path.display());

    RunManifest {
        command: "train".into(),
        config: json!({
            "model": config,
            "training": train_cfg,
            "split": SPLIT,
            "data": args.data.display().to_string(),
        }),
        seed: train_cfg.seed,
        dataset_fingerprint: Some(fingerprint_file(&args.data)?),
        artifacts: vec![
            ckpt_path.display().to_string(),
            hist_path.display().to_string(),
        ],
        wall_seconds: started.elapsed().as_secs_f64(),
    }
    .write(&out_dir)?;
    Ok(ExitCode::SUCCESS)
}

pub fn eval(args: EvalArgs) -> CmdResult {
    let started = Instant::now();
    let out_dir = resolve_out_dir(args.out)?;
    let mut specs = Vec::new();
    for token in args.metrics.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        match MetricSpec::parse(token) {
            Ok(s) => specs.push(s),
            Err(e) => return usage_error(&e),
        }
    }
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let splits = load_splits(&args.data, ckpt.config.input_len, ckpt.config.horizon)?;
    if splits.test.num_features() != ckpt.config.features {
        return Err(format!(
            "checkpoint expects {} features, dataset has {}",
            ckpt.config.features,
            splits.test.num_features()
        )
        .into());
    }
    let test_b = batches(&splits.test, ckpt.config.input_len, ckpt.config.horizon, 32, None)?;
    let report = evaluate(&ckpt.params, &ckpt.config, &test_b, &specs)?;
    let report_json = serde_json::to_string_pretty(&report)?;
    println!("{report_json}");
    let report_path = out_dir.join("metrics.json");
    std::fs::write(&report_path, &report_json)?;

    RunManifest {
        command: "eval".into(),
        config: json!({
            "checkpoint": args.checkpoint.display().to_string(),
            "metrics": args.metrics,
            "split": SPLIT,
            "data": args.data.display().to_string(),
        }),
        seed: 0,
        dataset_fingerprint: Some(fingerprint_file(&args.data)?),
        artifacts: vec![report_path.display().to_string()],
        wall_seconds: started.elapsed().as_secs_f64(),
    }
    .write(&out_dir)?;
    Ok(ExitCode::SUCCESS)
}

pub fn decompose(args: DecomposeArgs) -> CmdResult {
    let started = Instant::now();
    let out_dir = resolve_out_dir(args.out)?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let cfg = &ckpt.config;
    let splits = load_splits(&args.data, cfg.input_len, cfg.horizon)?;
    let starts = window_starts(splits.test.len(), cfg.input_len, cfg.horizon, 1, None)?;
    if args.window_index >= starts.len() {
        return Err(format!(
            "window index {} out of range: test split has {} windows",
            args.window_index,
            starts.len()
        )
        .into());
    }
    let window = make_windows(
        &splits.test,
        &starts[args.window_index..=args.window_index],
        cfg.input_len,
        cfg.horizon,
        1,
    )
    .remove(0);

    let d = decompose_model(&ckpt.params, cfg, &window.inputs)?;
    let l = d.contributions.len();

    // Spread the affine offset (instance mean, projection bias) evenly over
    // the blocks so the written files sum to the prediction alone.
    let share = 1.0 / l as f64;
    let mut sums = vec![0.0; d.prediction.len()];
    let mut files = Vec::new();
    for (bi, contr) in d.contributions.iter().enumerate() {
        let mut csv = String::from("timestep,feature,contribution\n");
        for ti in 0..cfg.horizon {
            for di in 0..cfg.features {
                let k = ti * cfg.features + di;
                let v = contr.data()[k] + share * d.offset.data()[k];
                sums[k] += v;
                csv.push_str(&format!("{ti},{},{v}\n", splits.test.feature_names[di]));
            }
        }
        let path = out_dir.join(format!("block_{}.csv", bi + 1));
        std::fs::write(&path, csv)?;
        files.push(path.display().to_string());
    }
    let worst = sums
        .iter()
        .zip(d.prediction.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    if worst > 1e-9 {
        return Err(format!(
            "contribution sum deviates from the prediction by {worst} (> 1e-9)"
        )
        .into());
    }

    let mut residual_csv = String::from("feature,channel,value\n");
    let e = cfg.embed;
    for di in 0..cfg.features {
        for ei in 0..e {
            residual_csv.push_str(&format!(
                "{},{ei},{}\n",
                splits.test.feature_names[di],
                d.residual.data()[di * e + ei]
            ));
        }
    }
    let residual_path = out_dir.join("residual.csv");
    std::fs::write(&residual_path, residual_csv)?;
    files.push(residual_path.display().to_string());

    println!(
        "wrote {l} block contribution files + residual (max sum deviation {worst:.2e})"
    );
    RunManifest {
        command: "decompose".into(),
        config: json!({
            "checkpoint": args.checkpoint.display().to_string(),
            "window_index": args.window_index,
            "split": SPLIT,
            "data": args.data.display().to_string(),
        }),
        seed: 0,
        dataset_fingerprint: Some(fingerprint_file(&args.data)?),
        artifacts: files,
        wall_seconds: started.elapsed().as_secs_f64(),
    }
    .write(&out_dir)?;
    Ok(ExitCode::SUCCESS)
}

pub fn ablate(args: AblateArgs) -> CmdResult {
    let started = Instant::now();
    let out_dir = resolve_out_dir(args.out)?;
    let variants = match parse_variant_list(&args.variants) {
        Ok(v) if !v.is_empty() => v,
        Ok(_) => return usage_error("no variants given"),
        Err(e) => return usage_error(&e),
    };
    if args.seeds == 0 {
        return usage_error("--seeds must be at least 1");
    }
    let splits = load_splits(&args.data, args.model.input_len, args.model.pred_len)?;
    let base_config = args.model.to_config(splits.train.num_features());
    let base_train = args.train.to_config();

    let mut rows = Vec::new();
    for (label, variant) in &variants {
        let mut mses = Vec::new();
        let mut maes = Vec::new();
        for s in 0..args.seeds as u64 {
            let mut config = base_config.clone();
            variant.apply(&mut config);
            config.validate()?;
            let train_cfg = TrainConfig {
                seed: base_train.seed + s,
                ..base_train.clone()
            };
            let train_b = batches(
                &splits.train,
                config.input_len,
                config.horizon,
                train_cfg.batch_size,
                Some(train_cfg.seed),
            )?;
            let val_b = batches(
                &splits.val,
                config.input_len,
                config.horizon,
                train_cfg.batch_size,
                None,
            )?;
            let test_b = batches(
                &splits.test,
                config.input_len,
                config.horizon,
                train_cfg.batch_size,
                None,
            )?;
            let mut params = init_params(&config, train_cfg.seed)?;
            train_model(&mut params, &config, &train_b, &val_b, &train_cfg)?;
            let report = evaluate(
                &params,
                &config,
                &test_b,
                &[MetricSpec::Mse, MetricSpec::Mae],
            )?;
            mses.push(report.values["mse"]);
            maes.push(report.values["mae"]);
            eprintln!(
                "{label} seed {}: mse {:.6} mae {:.6}",
                train_cfg.seed, report.values["mse"], report.values["mae"]
            );
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let spread = |v: &[f64]| {
            v.iter().fold(f64::MIN, |m, &x| m.max(x)) - v.iter().fold(f64::MAX, |m, &x| m.min(x))
        };
        rows.push(json!({
            "variant": label,
            "seeds": args.seeds,
            "mse": { "values": mses, "mean": mean(&mses), "spread": spread(&mses) },
            "mae": { "values": maes, "mean": mean(&maes), "spread": spread(&maes) },
        }));
    }
    let report = json!({ "variants": rows });
    let report_json = serde_json::to_string_pretty(&report)?;
    println!("{report_json}");
    let path = out_dir.join("ablation.json");
    std::fs::write(&path, &report_json)?;

    RunManifest {
        command: "ablate".into(),
        config: json!({
            "model": base_config,
            "training": base_train,
            "variants": args.variants,
            "seeds": args.seeds,
            "split": SPLIT,
            "data": args.data.display().to_string(),
        }),
        seed: base_train.seed,
        dataset_fingerprint: Some(fingerprint_file(&args.data)?),
        artifacts: vec![path.display().to_string()],
        wall_seconds: started.elapsed().as_secs_f64(),
    }
    .write(&out_dir)?;
    Ok(ExitCode::SUCCESS)
}

/// One named theory check with its verdict.
fn outcome(name: &str, inputs: serde_json::Value, results: serde_json::Value, pass: bool) -> serde_json::Value {
    json!({ "check": name, "inputs": inputs, "results": results, "pass": pass })
}

pub fn theory(args: TheoryArgs) -> CmdResult {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    let started = Instant::now();
    let out_dir = resolve_out_dir(args.out)?;
    let mut outcomes = Vec::new();
    let want =
        |c: TheoryCheck| matches!(args.check, TheoryCheck::All) || args.check == c;

    if want(TheoryCheck::Decomposition) {
        // Error decomposition: sample a biased Gaussian estimator and check
        // the algebraic split of expected squared error.
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        let samples: Vec<f64> = (0..args.trials.max(2))
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                1.8 + 0.6 * z
            })
            .collect();
        let d = theory::bias_variance_decompose(&samples, 1.5, 0.25)?;
        let residual = (d.lhs - d.rhs).abs();
        let pass = residual < 1e-9;
        outcomes.push(outcome(
            "decomposition",
            json!({ "trials": samples.len(), "y_true": 1.5, "noise_sigma2": 0.25 }),
            json!({
                "variance": d.variance, "bias_squared": d.bias_squared,
                "lhs": d.lhs, "rhs": d.rhs, "residual": residual,
            }),
            pass,
        ));
    }

    if want(TheoryCheck::Averaging) {
        let r = theory::ensemble_bias_var(args.n, 0.5, 1.0, args.trials.max(10_000), args.seed)?;
        let tol = (0.02f64).max(5.0 * (2.0 / args.trials.max(10_000) as f64).sqrt());
        let pass = (r.var_ratio - 1.0 / args.n as f64).abs() <= tol
            && (r.bias_ratio - 1.0).abs() <= tol;
        outcomes.push(outcome(
            "averaging",
            json!({ "ensemble_size": args.n, "trials": args.trials, "tolerance": tol }),
            serde_json::to_value(&r)?,
            pass,
        ));
    }

    if want(TheoryCheck::DriftGap) {
        let exact = theory::mse_gap(2, 0.5, 1.0, 1.0);
        let mut grid_ok = true;
        for l in 1..=10usize {
            for a in 0..10 {
                for c in 1..=10 {
                    if theory::mse_gap(l, a as f64 / 9.0, c as f64 / 2.0, 1.3) < 0.0 {
                        grid_ok = false;
                    }
                }
            }
        }
        let (single, ens) =
            theory::drift_mse_sim(4, 0.3, 1.0, 1.0, args.trials.max(10_000), args.seed)?;
        let gap = theory::mse_gap(4, 0.3, 1.0, 1.0);
        let tol = 20.0 / (args.trials.max(10_000) as f64).sqrt();
        let pass = (exact - 0.25).abs() < 1e-15
            && grid_ok
            && single > ens
            && ((single - ens) - gap).abs() < tol;
        outcomes.push(outcome(
            "drift_gap",
            json!({ "trials": args.trials, "sim": { "L": 4, "alpha": 0.3 } }),
            json!({
                "gap_2_0.5_1_1": exact, "grid_nonnegative": grid_ok,
                "sim_single_mse": single, "sim_ensemble_mse": ens, "sim_gap": single - ens,
                "closed_form_gap": gap,
            }),
            pass,
        ));
    }

    if want(TheoryCheck::Ambiguity) {
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        let n = args.trials.max(10_000);
        let mut max_residual = 0.0f64;
        let mut min_ambiguity = f64::INFINITY;
        for _ in 0..n {
            let l = rng.gen_range(1..=6);
            let preds: Vec<f64> = (0..l).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let raw: Vec<f64> = (0..l).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            let weights: Vec<f64> = raw.iter().map(|w| w / s).collect();
            let y = rng.gen_range(-5.0..5.0);
            let (res, amb) = theory::ambiguity_identity_residual(y, &preds, &weights)?;
            max_residual = max_residual.max(res);
            min_ambiguity = min_ambiguity.min(amb);
        }
        let pass = max_residual < 1e-12 && min_ambiguity >= 0.0;
        outcomes.push(outcome(
            "ambiguity",
            json!({ "instances": n }),
            json!({ "max_residual": max_residual, "min_ambiguity": min_ambiguity }),
            pass,
        ));
    }

    if want(TheoryCheck::Alternating) {
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed.wrapping_add(1));
        let n = args.trials.max(10_000);
        let mut max_residual = 0.0f64;
        for _ in 0..n {
            let l = rng.gen_range(1..=6);
            let signs = theory::alternating_signs(l);
            // Rescale random magnitudes so the signed weights sum to 1.
            // Divisors are kept away from zero: the identity is exact, but
            // huge weights amplify cancellation past the 1e-12 gate.
            let alphas = loop {
                let raw: Vec<f64> = (0..l).map(|_| rng.gen_range(0.05..1.0)).collect();
                let t: f64 = raw.iter().zip(&signs).map(|(a, s)| a * s).sum();
                if t.abs() > 0.5 {
                    break raw.iter().map(|a| a / t).collect::<Vec<f64>>();
                }
            };
            let preds: Vec<f64> = (0..l).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let y = rng.gen_range(-2.0..2.0);
            let res = theory::alternating_identity_residual(y, &preds, &alphas)?;
            max_residual = max_residual.max(res);
        }
        let pass = max_residual < 1e-12;
        outcomes.push(outcome(
            "alternating",
            json!({ "instances": n }),
            json!({ "max_residual": max_residual }),
            pass,
        ));
    }

    if want(TheoryCheck::BlockVariance) {
        let r = theory::block_variance_sim(&theory::EnsembleSimConfig {
            blocks: args.l,
            alpha: args.alpha,
            nu: args.nu,
            mu: args.mu,
            trials: args.trials.max(10_000),
            seed: args.seed,
        })?;
        let within = (r.empirical_var - r.closed_form).abs() <= 3.0 * r.std_error;
        let ordered = args.mu <= 0.0
            || (r.empirical_var < r.subtract_bound
                && r.subtract_bound < r.add_formula
                && r.empirical_var < r.empirical_add_var);
        let pass = within && ordered;
        outcomes.push(outcome(
            "block_variance",
            json!({
                "L": args.l, "alpha": args.alpha, "nu": args.nu, "mu": args.mu,
                "trials": args.trials,
            }),
            serde_json::to_value(&r)?,
            pass,
        ));
    }

    let all_pass = outcomes
        .iter()
        .all(|o| o["pass"].as_bool().unwrap_or(false));
    let report = json!({ "checks": outcomes, "pass": all_pass });
    let report_json = serde_json::to_string_pretty(&report)?;
    println!("{report_json}");
    let path = out_dir.join("theory.json");
    std::fs::write(&path, &report_json)?;

    RunManifest {
        command: "theory".into(),
        config: json!({
            "check": format!("{:?}", args.check),
            "trials": args.trials, "n": args.n, "l": args.l,
            "alpha": args.alpha, "nu": args.nu, "mu": args.mu,
        }),
        seed: args.seed,
        dataset_fingerprint: None,
        artifacts: vec![path.display().to_string()],
        wall_seconds: started.elapsed().as_secs_f64(),
    }
    .write(&out_dir)?;
    Ok(if all_pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}
