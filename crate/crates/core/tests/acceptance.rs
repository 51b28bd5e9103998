//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::io::Write;
use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use san_core::aggregation::{fixed_cardinality, pool, PoolKind, SmoothMaxMode};
use san_core::data::{
    gen_synthetic_sets, load_idx, resize_image, write_idx, write_metrics_csv, ResizeMethod, SyntheticTask,
};
use san_core::gradcheck::{finite_diff_gradient, relative_error};
use san_core::pipeline::AdamConfig;
use san_core::theory::{
    covering_grid, expand, injectivity_check, integer_subsets, maxlimit_convergence_check, random_relu_layer,
    recover_1d_set, relu_profile, COLLISION_THRESHOLD,
};
use san_core::{
    evaluate, train, Activation, AggregatorKind, Error, FeatureSet, Graph, LabeledDataset, Model, ModelSpec, Sample,
    SanLayer, Split, Tensor, TrainConfig,
};

type Check = fn() -> Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

fn random_set(rng: &mut ChaCha8Rng, n: usize, k: usize) -> FeatureSet {
    let data = (0..n * k).map(|_| rng.random_range(-2.0..2.0)).collect();
    FeatureSet::new(n, k, data).unwrap()
}

fn random_layer(rng: &mut ChaCha8Rng, m: usize, k: usize, activation: Activation) -> SanLayer {
    SanLayer::init(m, k, activation, rng).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn permutation_invariance() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let activations = [Activation::Relu, Activation::Tanh, Activation::Sigmoid];
    let mut worst = 0.0f64;
    for case in 0..1000 {
        let n = rng.random_range(1..=64);
        let k = rng.random_range(1..=32);
        let set = random_set(&mut rng, n, k);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let shuffled = set.permuted(&perm).unwrap();

        let m = rng.random_range(1..=16);
        let layer = random_layer(&mut rng, m, k, activations[case % 3]);
        let a = layer.aggregate(&set).unwrap();
        let b = layer.aggregate(&shuffled).unwrap();
        ensure!(
            a.len() == m,
            "case {case}: SAN output has length {}, expected {m}",
            a.len()
        );
        worst = worst.max(max_abs_diff(&a, &b));
        for kind in [PoolKind::Max, PoolKind::Avg, PoolKind::Sum] {
            worst = worst.max(max_abs_diff(&pool(&set, kind), &pool(&shuffled, kind)));
        }
        ensure!(
            worst <= 1e-9,
            "case {case}: aggregate changed by {worst:e} under permutation"
        );
    }

    let aggregators = [
        AggregatorKind::San {
            outputs: 12,
            activation: Activation::Relu,
        },
        AggregatorKind::MaxPool,
        AggregatorKind::AvgPool,
        AggregatorKind::SumPool,
    ];
    let mut model_worst = 0.0f64;
    for (i, agg) in aggregators.into_iter().enumerate() {
        let spec = ModelSpec::set_classifier(3, vec![8, 8], agg, vec![6], 4);
        let model = Model::new(spec, i as u64).map_err(|e| e.to_string())?;
        for _ in 0..25 {
            let n = rng.random_range(1..=64);
            let set = random_set(&mut rng, n, 3);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let a = model.forward(&Sample::Set(set.clone())).unwrap();
            let b = model.forward(&Sample::Set(set.permuted(&perm).unwrap())).unwrap();
            model_worst = model_worst.max(max_abs_diff(&a, &b));
        }
    }
    ensure!(
        model_worst <= 1e-9,
        "model output changed by {model_worst:e} under permutation"
    );
    Ok(format!(
        "1000 sets, max deviation {worst:.1e}; 100 model inputs, max deviation {model_worst:.1e}"
    ))
}

const H: f64 = 1e-5;
const KINK_MARGIN: f64 = 1e-3;
const GRAD_TOL: f64 = 1e-4;

fn worst_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| relative_error(a, b))
        .fold(0.0, f64::max)
}

/// Gradient of `sum_m c_m e_m` with respect to V, b and the elements, or
/// `None` if some preactivation is too close to the ReLU kink.
fn san_case(rng: &mut ChaCha8Rng) -> Option<f64> {
    let n = rng.random_range(1..=8);
    let k = rng.random_range(1..=5);
    let m = rng.random_range(1..=6);
    let set = random_set(rng, n, k).to_tensor();
    let layer = random_layer(rng, m, k, Activation::Relu);
    let weights = layer.weights().clone();
    let bias = Tensor::vector((0..m).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap();
    let coeffs = Tensor::new(vec![m, 1], (0..m).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();

    let loss = |x: &Tensor, v: &Tensor, b: &Tensor, track: bool| {
        let mut g = Graph::new();
        let (xi, vi, bi) = if track {
            (g.param(x.clone()), g.param(v.clone()), g.param(b.clone()))
        } else {
            (g.constant(x.clone()), g.constant(v.clone()), g.constant(b.clone()))
        };
        let e = san_core::aggregation::san_aggregate_node(&mut g, xi, vi, bi, Activation::Relu).unwrap();
        let e = g.reshape(e, vec![1, m]).unwrap();
        let c = g.constant(coeffs.clone());
        let s = g.matmul(e, c).unwrap();
        let s = g.reshape(s, vec![1]).unwrap();
        (g, [xi, vi, bi], s)
    };

    let (mut g, ids, out) = loss(&set, &weights, &bias, true);
    if g.min_abs_relu_input().is_some_and(|d| d < KINK_MARGIN) {
        return None;
    }
    g.backward(out).unwrap();
    let value = |x: &Tensor, v: &Tensor, b: &Tensor| {
        let (g, _, s) = loss(x, v, b, false);
        Ok(g.value(s).data()[0])
    };
    let fx = finite_diff_gradient(|x| value(x, &weights, &bias), &set, H).unwrap();
    let fv = finite_diff_gradient(|v| value(&set, v, &bias), &weights, H).unwrap();
    let fb = finite_diff_gradient(|b| value(&set, &weights, b), &bias, H).unwrap();
    let errs = [
        worst_error(g.grad(ids[0]).unwrap(), fx.data()),
        worst_error(g.grad(ids[1]).unwrap(), fv.data()),
        worst_error(g.grad(ids[2]).unwrap(), fb.data()),
    ];
    Some(errs.into_iter().fold(0.0, f64::max))
}

/// Cross-entropy gradient of a 2-layer MLP + SAN + dense head model for
/// every parameter tensor.
fn model_case(rng: &mut ChaCha8Rng, seed: u64) -> Option<f64> {
    let spec = ModelSpec::set_classifier(
        3,
        vec![6, 5],
        AggregatorKind::San {
            outputs: 4,
            activation: Activation::Relu,
        },
        vec![],
        3,
    );
    let model = Model::new(spec, seed).unwrap();
    let sample = Sample::Set(random_set(rng, 5, 3));
    let label = rng.random_range(0..3);
    let batch = [(&sample, label)];
    if model.min_relu_margin(&batch).unwrap().is_some_and(|d| d < KINK_MARGIN) {
        return None;
    }
    let (_, grads) = model.loss_and_grads(&batch).unwrap();
    let mut worst = 0.0f64;
    for (i, analytic) in grads.iter().enumerate() {
        let numeric = finite_diff_gradient(
            |p| {
                let mut probe = model.clone();
                probe.set_param(i, p.clone())?;
                probe.loss(&batch)
            },
            &model.params()[i],
            H,
        )
        .unwrap();
        worst = worst.max(worst_error(analytic, numeric.data()));
    }
    Some(worst)
}

fn gradient_suite() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut san_done, mut model_done, mut rejected) = (0, 0, 0);
    let mut worst = 0.0f64;
    let mut seed = 0;
    while san_done < 50 || model_done < 50 {
        seed += 1;
        let result = if san_done < 50 {
            san_case(&mut rng)
        } else {
            model_case(&mut rng, seed)
        };
        match result {
            None => rejected += 1,
            Some(err) => {
                ensure!(err < GRAD_TOL, "case {seed}: relative gradient error {err:e}");
                worst = worst.max(err);
                if san_done < 50 {
                    san_done += 1;
                } else {
                    model_done += 1;
                }
            }
        }
        ensure!(rejected < 1000, "too many draws rejected near ReLU kinks");
    }
    Ok(format!(
        "50 SAN + 50 model cases, max relative error {worst:.1e}, {rejected} draws rejected near kinks"
    ))
}

fn injectivity() -> Result<String, String> {
    let universe = integer_subsets(9, 2).map_err(|e| e.to_string())?;
    ensure!(universe.len() == 45, "universe has {} sets", universe.len());
    let seed = 7;
    let mut counts = Vec::new();
    for m in [4, 16, 64] {
        let report = injectivity_check(&universe, m, seed).map_err(|e| e.to_string())?;
        ensure!(
            report.pairs_tested == 990,
            "M={m}: {} pairs tested",
            report.pairs_tested
        );

        // brute-force oracle over the same neurons
        let layer = random_relu_layer(m, 1, 9.0, seed).unwrap();
        let embeddings: Vec<Vec<f64>> = universe.iter().map(|s| layer.aggregate(s).unwrap()).collect();
        let mut oracle = 0;
        for i in 0..45 {
            for j in i + 1..45 {
                let d: f64 = embeddings[i]
                    .iter()
                    .zip(&embeddings[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                if d < COLLISION_THRESHOLD {
                    oracle += 1;
                }
            }
        }
        ensure!(
            oracle == report.collisions,
            "M={m}: report says {} collisions, brute force finds {oracle}",
            report.collisions
        );
        counts.push(report.collisions);
    }
    ensure!(
        counts.windows(2).all(|w| w[1] <= w[0]),
        "collisions not monotone in M: {counts:?}"
    );
    ensure!(counts[2] == 0, "{} collisions at M=64", counts[2]);
    Ok(format!("collisions at M=4,16,64: {counts:?}"))
}

fn max_limit() -> Result<String, String> {
    let values: Vec<f64> = (1..=10).map(f64::from).collect();
    let schedule = [2.0, 10.0, 50.0, 256.0];
    let power = maxlimit_convergence_check(&values, &schedule, SmoothMaxMode::Power).map_err(|e| e.to_string())?;
    for pt in &power {
        let oracle = values.iter().map(|v| v.powf(pt.p)).sum::<f64>().powf(1.0 / pt.p) - 10.0;
        ensure!(
            (pt.error - oracle).abs() <= 1e-9 * oracle.max(1.0),
            "p={}: error {} vs direct evaluation {oracle}",
            pt.p,
            pt.error
        );
        let bound = 10.0 * (10f64.powf(1.0 / pt.p) - 1.0);
        ensure!(pt.error <= bound, "p={}: error {} above bound {bound}", pt.p, pt.error);
    }
    ensure!(
        power.windows(2).all(|w| w[1].error < w[0].error),
        "power errors not decreasing"
    );
    let rel256 = power[3].error / 10.0;
    ensure!(rel256 <= 0.009035044841447348, "relative error {rel256} at p=256");

    let lse = maxlimit_convergence_check(&values, &schedule, SmoothMaxMode::LogSumExp).map_err(|e| e.to_string())?;
    for pt in &lse {
        ensure!(
            pt.error <= 10f64.ln() / pt.p,
            "LSE p={}: error {} above ln(10)/p",
            pt.p,
            pt.error
        );
    }
    Ok(format!(
        "power errors {:.3e} {:.3e} {:.3e} {:.3e}; relative {:.2e} at p=256",
        power[0].error, power[1].error, power[2].error, power[3].error, rel256
    ))
}

fn profile_recovery() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = 0.25;
    let mut with_repeats = 0;
    for case in 0..50 {
        let n = rng.random_range(1..=6);
        let mut set: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(-16..=16)) * h).collect();
        set.sort_by(f64::total_cmp);
        if set.windows(2).any(|w| w[0] == w[1]) {
            with_repeats += 1;
        }
        let grid = covering_grid(&set, h).map_err(|e| e.to_string())?;
        let profile = relu_profile(&set, 1.0, &grid).map_err(|e| e.to_string())?;
        let recovered = recover_1d_set(&profile, h).map_err(|e| e.to_string())?;
        let mut estimate = expand(&recovered);
        estimate.sort_by(f64::total_cmp);
        ensure!(
            estimate.len() == set.len(),
            "case {case}: recovered {} elements from {set:?}",
            estimate.len()
        );
        for (e, s) in estimate.iter().zip(&set) {
            ensure!((e - s).abs() <= h, "case {case}: element {s} recovered as {e}");
        }
        let again = relu_profile(&estimate, 1.0, &grid).map_err(|e| e.to_string())?;
        let gap = max_abs_diff(&again.values, &profile.values);
        ensure!(gap <= 2.0 * h * n as f64, "case {case}: reprofiled curve off by {gap}");
    }
    Ok(format!("50 sets ({with_repeats} with repeated elements) recovered"))
}

fn blob_config(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        optimizer: AdamConfig {
            lr: 1e-2,
            ..Default::default()
        },
        batch_size: 16,
        epochs,
        seed,
        validation_fraction: 0.2,
    }
}

fn san_blob_spec() -> ModelSpec {
    ModelSpec::set_classifier(
        2,
        vec![8],
        AggregatorKind::San {
            outputs: 16,
            activation: Activation::Relu,
        },
        vec![],
        2,
    )
}

fn blob_data(n_range: (usize, usize), count: usize, seed: u64) -> LabeledDataset {
    gen_synthetic_sets(&SyntheticTask::two_blobs(0.5, n_range), count, seed).unwrap()
}

fn varied_cardinality() -> Result<String, String> {
    let train_set = blob_data((5, 20), 200, 10);
    let mut model = Model::new(san_blob_spec(), 11).map_err(|e| e.to_string())?;
    train(&mut model, &train_set, &blob_config(10, 12)).map_err(|e| e.to_string())?;

    let test_set = blob_data((5, 20), 200, 13);
    let acc = evaluate(&model, &test_set).map_err(|e| e.to_string())?.accuracy;
    ensure!(acc >= 0.95, "in-range test accuracy {acc}");
    let mut out_of_range = Vec::new();
    for n in [1, 4, 50] {
        let ds = blob_data((n, n), 50, 14 + n as u64);
        let e = evaluate(&model, &ds).map_err(|e| format!("n={n}: {e}"))?;
        out_of_range.push(format!("n={n}: {:.2}", e.accuracy));
    }

    let sets: Vec<&FeatureSet> = train_set
        .samples()
        .iter()
        .map(|(s, _)| match s {
            Sample::Set(f) => f,
            Sample::Image(_) => unreachable!(),
        })
        .collect();
    let err = fixed_cardinality(sets.iter().copied()).expect_err("blob sets vary in size");
    ensure!(
        matches!(err, Error::Contract(_)),
        "expected a contract error, got {err}"
    );

    let first_n = train_set.samples()[0].0.cardinality();
    let flatten = ModelSpec {
        cardinality: Some(first_n),
        ..ModelSpec::set_classifier(2, vec![8], AggregatorKind::Flatten, vec![], 2)
    };
    let mut flat_model = Model::new(flatten, 11).map_err(|e| e.to_string())?;
    match train(&mut flat_model, &train_set, &blob_config(1, 12)) {
        Err(Error::Contract(msg)) if msg.contains("sample") => {}
        other => {
            return Err(format!(
                "flatten training should fail with a contract error, got {other:?}"
            ))
        }
    }
    Ok(format!(
        "test accuracy {acc:.3}; {}; flatten rejected",
        out_of_range.join(", ")
    ))
}

fn training_sanity() -> Result<String, String> {
    let data = blob_data((5, 20), 200, 20);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut files = Vec::new();
    let mut last = None;
    for run in 0..2 {
        let mut model = Model::new(san_blob_spec(), 21).map_err(|e| e.to_string())?;
        let metrics = train(&mut model, &data, &blob_config(20, 22)).map_err(|e| e.to_string())?;
        let path = dir.path().join(format!("metrics{run}.csv"));
        write_metrics_csv(&metrics, &path).map_err(|e| e.to_string())?;
        files.push(std::fs::read(&path).map_err(|e| e.to_string())?);
        last = Some((model, metrics));
    }
    ensure!(files[0] == files[1], "metrics files differ between identical runs");
    let (_, metrics) = last.unwrap();
    let train_rows: Vec<_> = metrics.iter().filter(|r| r.split == Split::Train).collect();
    ensure!(train_rows.len() == 20, "{} train rows", train_rows.len());
    let first_hit = train_rows.iter().find(|r| r.accuracy >= 0.99).map(|r| r.epoch);
    let Some(epoch) = first_hit else {
        return Err(format!(
            "train accuracy stayed below 0.99 (final {})",
            train_rows[19].accuracy
        ));
    };
    ensure!(
        train_rows[19].loss < train_rows[0].loss,
        "loss did not fall: {} -> {}",
        train_rows[0].loss,
        train_rows[19].loss
    );
    Ok(format!(
        "train accuracy >= 0.99 from epoch {epoch}, final {:.3}; metrics files identical",
        train_rows[19].accuracy
    ))
}

fn idx_and_resize() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let (rows, cols) = (5, 7);
    let images: Vec<Vec<u8>> = (0..6)
        .map(|_| (0..rows * cols).map(|_| rng.random()).collect())
        .collect();
    let labels: Vec<u8> = (0..6).map(|i| (i % 3) as u8).collect();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (ip, lp) = (dir.path().join("img.idx"), dir.path().join("lbl.idx"));
    write_idx(&ip, &lp, rows, cols, &images, &labels).map_err(|e| e.to_string())?;
    let ds = load_idx(&ip, &lp).map_err(|e| e.to_string())?;
    ensure!(
        ds.len() == 6 && ds.classes() == 3,
        "reloaded {} samples, {} classes",
        ds.len(),
        ds.classes()
    );
    for (i, ((sample, label), raw)) in ds.samples().iter().zip(&images).enumerate() {
        let Sample::Image(t) = sample else {
            return Err(format!("sample {i} is not an image"));
        };
        ensure!(t.shape() == [rows, cols, 1], "sample {i} has shape {:?}", t.shape());
        ensure!(*label == labels[i] as usize, "sample {i} label {label}");
        for (v, &b) in t.data().iter().zip(raw) {
            ensure!(*v == f64::from(b) / 255.0, "sample {i}: pixel {v} vs byte {b}");
        }
    }

    let methods = [ResizeMethod::Bilinear, ResizeMethod::Bicubic];
    let Sample::Image(img) = &ds.samples()[0].0 else {
        unreachable!()
    };
    let constant = Tensor::new(vec![4, 6, 2], vec![0.3; 48]).unwrap();
    for m in methods {
        ensure!(
            resize_image(img, rows, cols, m).unwrap() == *img,
            "{m:?}: identity resize changed the image"
        );
        for (nh, nw) in [(1, 1), (3, 9), (8, 5), (17, 23)] {
            let out = resize_image(&constant, nh, nw, m).unwrap();
            ensure!(
                out.data().iter().all(|&v| v == 0.3),
                "{m:?}: constant image changed at {nh}x{nw}"
            );
        }
    }
    Ok("6 images round-tripped exactly; identity and constant resizes exact".into())
}

fn main() {
    let criteria: [(&str, Check, Duration); 8] = [
        (
            "1 permutation invariance",
            permutation_invariance,
            Duration::from_secs(10),
        ),
        ("2 gradient suite", gradient_suite, Duration::from_secs(60)),
        ("3 empirical injectivity", injectivity, Duration::from_secs(5)),
        ("4 max limit", max_limit, Duration::from_secs(1)),
        ("5 profile recovery", profile_recovery, Duration::from_secs(5)),
        ("6 varied cardinality", varied_cardinality, Duration::from_secs(300)),
        ("7 training sanity", training_sanity, Duration::from_secs(120)),
        ("8 idx round trip and resize", idx_and_resize, Duration::from_secs(1)),
    ];
    // keep the default hook quiet so a failing criterion prints a single line
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    let mut out = std::io::stdout().lock();
    for (name, check, budget) in criteria {
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(msg)
        });
        let elapsed = start.elapsed();
        let result = match result {
            Ok(detail) if elapsed > budget => Err(format!("{detail}; took {elapsed:.2?}, budget {budget:?}")),
            other => other,
        };
        match result {
            Ok(detail) => writeln!(out, "PASS  criterion {name} ({elapsed:.2?}): {detail}").unwrap(),
            Err(detail) => {
                failed += 1;
                writeln!(out, "FAIL  criterion {name} ({elapsed:.2?}): {detail}").unwrap();
            }
        }
    }
    writeln!(out, "{} of 8 acceptance criteria passed", 8 - failed).unwrap();
    drop(out);
    if failed > 0 {
        std::process::exit(1);
    }
}
