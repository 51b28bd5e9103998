use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use san_core::aggregation::SmoothMaxMode;
use san_core::data::{
    gen_synthetic_sets, load_idx, resize_dataset, resize_dataset_random, write_collisions_csv, write_metrics_csv,
    write_profile_csv, ResizeMethod, SyntheticTask,
};
use san_core::gradcheck::model_gradient_error;
use san_core::pipeline::{AdamConfig, Extractor, Head, InputKind};
use san_core::theory::{
    covering_grid, expand, injectivity_check, integer_subsets, maxlimit_convergence_check, recover_1d_set, relu_profile,
};
use san_core::{
    evaluate, train, Activation, AggregatorKind, FeatureSet, LabeledDataset, MetricsRecord, Model, ModelSpec,
    PositionalMode, Sample, Split, TrainConfig,
};

use crate::config::RunConfig;
use crate::error::CliError;

const GRAD_TOLERANCE: f64 = 1e-4;
const KINK_MARGIN: f64 = 1e-3;

fn output_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir: PathBuf = cfg.require("output_dir")?;
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_summary(dir: &Path, text: &str) -> Result<(), CliError> {
    fs::write(dir.join("summary.txt"), text)?;
    Ok(())
}

/// `san`, `max`, `avg`, `sum`, `flatten` or `conv1x1`.
fn aggregator(cfg: &RunConfig) -> Result<AggregatorKind, CliError> {
    let name: String = cfg.require("aggregator")?;
    Ok(match name.as_str() {
        "san" => AggregatorKind::San {
            outputs: cfg.get_or("san_outputs", 64)?,
            activation: cfg.get_or("activation", Activation::Relu)?,
        },
        "max" => AggregatorKind::MaxPool,
        "avg" => AggregatorKind::AvgPool,
        "sum" => AggregatorKind::SumPool,
        "flatten" => AggregatorKind::Flatten,
        "conv1x1" => AggregatorKind::Conv1x1,
        other => {
            return Err(CliError::Config(format!(
                "invalid value `{other}` for `aggregator`: expected san, max, avg, sum, flatten or conv1x1"
            )))
        }
    })
}

fn widths(text: &str) -> Result<Vec<usize>, String> {
    text.split(',')
        .map(|w| w.trim().parse::<usize>().map_err(|e| format!("bad width `{w}`: {e}")))
        .collect()
}

/// `identity`, `mlp:16,16` or `conv:8,16` (3x3 kernels).
fn extractor(cfg: &RunConfig, image: bool) -> Result<Extractor, CliError> {
    let default = if image { "conv:8,16" } else { "mlp:16" };
    let text = cfg.raw("extractor").unwrap_or(default);
    let bad = |why: String| CliError::Config(format!("invalid value `{text}` for `extractor`: {why}"));
    if text == "identity" {
        return Ok(Extractor::Identity);
    }
    match text.split_once(':') {
        Some(("mlp", w)) => Ok(Extractor::Mlp {
            widths: widths(w).map_err(bad)?,
        }),
        Some(("conv", w)) => Ok(Extractor::Conv {
            channels: widths(w).map_err(bad)?,
            kernel: 3,
        }),
        _ => Err(bad("expected identity, mlp:<widths> or conv:<channels>".into())),
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Part {
    Train,
    Test,
}

struct DataSource {
    kind: String,
    seed: u64,
}

impl DataSource {
    fn new(cfg: &RunConfig) -> Result<Self, CliError> {
        let kind: String = cfg.require("dataset")?;
        if !["blobs", "ring", "idx"].contains(&kind.as_str()) {
            return Err(CliError::Config(format!(
                "invalid value `{kind}` for `dataset`: expected blobs, ring or idx"
            )));
        }
        Ok(Self {
            kind,
            seed: cfg.get_or("seed", 0)?,
        })
    }

    fn is_image(&self) -> bool {
        self.kind == "idx"
    }

    fn task(&self, cfg: &RunConfig, n_range: (usize, usize)) -> Result<SyntheticTask, CliError> {
        Ok(match self.kind.as_str() {
            "blobs" => {
                let spread = cfg.get_or("spread", 0.5)?;
                let classes: usize = cfg.get_or("classes", 2)?;
                if classes == 2 {
                    SyntheticTask::two_blobs(spread, n_range)
                } else {
                    // centers evenly spaced on a circle through (-2, -2)
                    let r = 8f64.sqrt();
                    let centers = (0..classes)
                        .map(|c| {
                            let a = 1.25 * std::f64::consts::PI + std::f64::consts::TAU * c as f64 / classes as f64;
                            vec![r * a.cos(), r * a.sin()]
                        })
                        .collect();
                    SyntheticTask::BlobSets {
                        centers,
                        spread,
                        n_range,
                    }
                }
            }
            _ => SyntheticTask::RingVsBlob { n_range },
        })
    }

    fn n_range(cfg: &RunConfig) -> Result<(usize, usize), CliError> {
        Ok((cfg.get_or("n_min", 5)?, cfg.get_or("n_max", 20)?))
    }

    fn load(&self, cfg: &RunConfig, part: Part) -> Result<Option<LabeledDataset>, CliError> {
        if self.is_image() {
            let (images, labels) = match part {
                Part::Train => ("train_images", "train_labels"),
                Part::Test => ("test_images", "test_labels"),
            };
            let (Some(ip), Some(lp)) = (cfg.get::<PathBuf>(images)?, cfg.get::<PathBuf>(labels)?) else {
                if part == Part::Train {
                    return Err(CliError::Config(format!("idx dataset needs `{images}` and `{labels}`")));
                }
                return Ok(None);
            };
            let ds = load_idx(&ip, &lp)
                .map_err(|e| CliError::Dataset(format!("{} / {}: {e}", ip.display(), lp.display())))?;
            if part == Part::Train {
                if let Some(sizes) = cfg.list::<usize>("resize_sizes")? {
                    let method = cfg.get_or("resize_method", ResizeMethod::Bicubic)?;
                    return Ok(Some(
                        resize_dataset_random(&ds, &sizes, method, self.seed).map_err(CliError::dataset)?,
                    ));
                }
            }
            return Ok(Some(ds));
        }
        let task = self.task(cfg, Self::n_range(cfg)?)?;
        let (count, seed) = match part {
            Part::Train => (cfg.get_or("count", 200)?, self.seed),
            Part::Test => (cfg.get_or("test_count", 200)?, self.seed.wrapping_add(1)),
        };
        gen_synthetic_sets(&task, count, seed)
            .map(Some)
            .map_err(CliError::dataset)
    }

    /// The test data at one evaluation size: images resized to `size x size`,
    /// synthetic sets drawn with exactly `size` elements.
    fn at_size(&self, cfg: &RunConfig, test: &LabeledDataset, size: usize) -> Result<LabeledDataset, CliError> {
        if self.is_image() {
            let method = cfg.get_or("resize_method", ResizeMethod::Bicubic)?;
            return resize_dataset(test, size, method).map_err(CliError::dataset);
        }
        let task = self.task(cfg, (size, size))?;
        gen_synthetic_sets(&task, test.len(), self.seed.wrapping_add(1 + size as u64)).map_err(CliError::dataset)
    }
}

/// `size,samples,loss,accuracy` rows for every entry of `eval_sizes`.
fn size_rows(
    cfg: &RunConfig,
    source: &DataSource,
    model: &Model,
    test: &LabeledDataset,
    summary: &mut String,
) -> Result<String, CliError> {
    let mut rows = String::new();
    for size in cfg.list_or::<usize>("eval_sizes", Vec::new())? {
        let ds = source.at_size(cfg, test, size)?;
        let e = evaluate(model, &ds)?;
        writeln!(rows, "{size},{},{:.6},{:.6}", ds.len(), e.loss, e.accuracy).unwrap();
        writeln!(summary, "accuracy at size {size}: {:.4}", e.accuracy).unwrap();
    }
    Ok(rows)
}

const EVAL_HEADER: &str = "size,samples,loss,accuracy\n";

pub fn run_train(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = output_dir(cfg)?;
    let source = DataSource::new(cfg)?;
    let agg = aggregator(cfg)?;
    let image = source.is_image();
    let extractor = extractor(cfg, image)?;
    let default_positional = if image {
        PositionalMode::Normalized2d
    } else {
        PositionalMode::None
    };
    let positional = cfg.get_or("positional", default_positional)?;
    let head_hidden = cfg.list_or("head_hidden", Vec::new())?;
    let train_cfg = TrainConfig {
        optimizer: AdamConfig {
            lr: cfg.get_or("lr", 1e-3)?,
            ..AdamConfig::default()
        },
        batch_size: cfg.get_or("batch_size", 32)?,
        epochs: cfg.get_or("epochs", 10)?,
        seed: source.seed,
        validation_fraction: cfg.get_or("validation_fraction", 0.1)?,
    };

    let data = source.load(cfg, Part::Train)?.expect("training data is required");
    let test = source.load(cfg, Part::Test)?;
    let classes = cfg
        .get_or("classes", 0)?
        .max(data.classes())
        .max(test.as_ref().map_or(0, LabeledDataset::classes));
    let input = match &data.samples()[0].0 {
        Sample::Image(t) => InputKind::Image { channels: t.shape()[2] },
        Sample::Set(s) => InputKind::Set { dim: s.dim() },
    };
    let mut spec = ModelSpec {
        input,
        extractor,
        positional,
        aggregator: agg,
        head: Head::Dense { hidden: head_hidden },
        classes,
        cardinality: None,
    };
    if !agg.accepts_variable_cardinality() {
        spec.cardinality = Some(spec.feature_cardinality(&data.samples()[0].0)?);
    }
    let mut model = Model::new(spec, source.seed)?;
    let mut metrics = train(&mut model, &data, &train_cfg)?;

    let mut summary = String::new();
    writeln!(summary, "aggregator: {}", agg.name()).unwrap();
    writeln!(summary, "parameters: {}", model.param_count()).unwrap();
    writeln!(summary, "training samples: {}", data.len()).unwrap();
    for split in [Split::Train, Split::Valid] {
        if let Some(r) = metrics.iter().rev().find(|r| r.split == split) {
            writeln!(
                summary,
                "final {} accuracy: {:.4} (loss {:.6})",
                split.as_str(),
                r.accuracy,
                r.loss
            )
            .unwrap();
        }
    }
    if let Some(test) = &test {
        let e = evaluate(&model, test)?;
        metrics.push(MetricsRecord {
            epoch: train_cfg.epochs,
            split: Split::Test,
            loss: e.loss,
            accuracy: e.accuracy,
        });
        writeln!(summary, "test accuracy: {:.4} (loss {:.6})", e.accuracy, e.loss).unwrap();
        if cfg.raw("eval_sizes").is_some() {
            let rows = size_rows(cfg, &source, &model, test, &mut summary)?;
            fs::write(dir.join("eval.csv"), format!("{EVAL_HEADER}{rows}"))?;
        }
    }

    write_metrics_csv(&metrics, dir.join("metrics.csv"))?;
    let json = serde_json::to_string(&model).map_err(|e| CliError::Run(e.to_string()))?;
    fs::write(dir.join("model.json"), json)?;
    write_summary(&dir, &summary)
}

pub fn run_eval(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = output_dir(cfg)?;
    let model_path: PathBuf = cfg.require("model")?;
    let text = fs::read_to_string(&model_path)
        .map_err(|e| CliError::Run(format!("cannot read model {}: {e}", model_path.display())))?;
    let model: Model = serde_json::from_str(&text)
        .map_err(|e| CliError::Run(format!("cannot parse model {}: {e}", model_path.display())))?;
    let source = DataSource::new(cfg)?;
    let test = source
        .load(cfg, Part::Test)?
        .ok_or_else(|| CliError::Config("eval needs `test_images` and `test_labels`".into()))?;

    let e = evaluate(&model, &test)?;
    let mut summary = format!("test accuracy: {:.4} (loss {:.6})\n", e.accuracy, e.loss);
    let rows = size_rows(cfg, &source, &model, &test, &mut summary)?;
    fs::write(
        dir.join("eval.csv"),
        format!(
            "{EVAL_HEADER}native,{},{:.6},{:.6}\n{rows}",
            test.len(),
            e.loss,
            e.accuracy
        ),
    )?;
    write_summary(&dir, &summary)
}

pub fn run_gradcheck(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = output_dir(cfg)?;
    let cases: usize = cfg.get_or("cases", 100)?;
    let h: f64 = cfg.get_or("h", 1e-5)?;
    let seed: u64 = cfg.get_or("seed", 0)?;
    let san = AggregatorKind::San {
        outputs: 4,
        activation: Activation::Relu,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut csv = String::from("case,kind,max_relative_error\n");
    let (mut done, mut rejected, mut worst) = (0, 0, 0.0f64);
    let mut draw = 0u64;
    while done < cases {
        draw += 1;
        if rejected > 100 * cases.max(1) {
            return Err(CliError::Run("too many draws rejected near ReLU kinks".into()));
        }
        let (kind, widths) = if done % 2 == 0 {
            ("san", vec![])
        } else {
            ("model", vec![6, 5])
        };
        let spec = ModelSpec::set_classifier(3, widths, san, vec![], 3);
        let model = Model::new(spec, seed.wrapping_add(draw))?;
        let data = (0..15).map(|_| rng.random_range(-2.0..2.0)).collect();
        let sample = Sample::Set(FeatureSet::new(5, 3, data)?);
        let label = rng.random_range(0..3);
        let batch = [(&sample, label)];
        if model.min_relu_margin(&batch)?.is_some_and(|m| m < KINK_MARGIN) {
            rejected += 1;
            continue;
        }
        let err = model_gradient_error(&model, &batch, h)?;
        writeln!(csv, "{done},{kind},{err:.6e}").unwrap();
        worst = worst.max(err);
        done += 1;
    }
    fs::write(dir.join("gradcheck.csv"), csv)?;
    let verdict = if worst < GRAD_TOLERANCE { "PASS" } else { "FAIL" };
    write_summary(
        &dir,
        &format!(
            "gradient check {verdict}: max relative error {worst:.3e} over {cases} cases \
             (tolerance {GRAD_TOLERANCE:e}, {rejected} draws rejected near ReLU kinks)\n"
        ),
    )?;
    if verdict == "FAIL" {
        return Err(CliError::Run(format!(
            "gradient check failed: max relative error {worst:.3e}"
        )));
    }
    Ok(())
}

pub fn run_injectivity(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = output_dir(cfg)?;
    let max: usize = cfg.get_or("universe_max", 9)?;
    let size: usize = cfg.get_or("set_size", 2)?;
    let neurons: Vec<usize> = cfg.list_or("neurons", vec![4, 16, 64])?;
    let seed: u64 = cfg.get_or("seed", 0)?;
    let universe = integer_subsets(max, size)?;
    let reports = neurons
        .iter()
        .map(|&m| injectivity_check(&universe, m, seed))
        .collect::<san_core::Result<Vec<_>>>()?;
    write_collisions_csv(&reports, dir.join("collisions.csv"))?;

    let mut summary = format!(
        "universe: {} subsets of size {size} drawn from 0..={max}\n",
        universe.len()
    );
    for r in &reports {
        writeln!(
            summary,
            "M={}: {} collisions in {} pairs, min distance {:.6e}",
            r.neurons, r.collisions, r.pairs_tested, r.min_pair_distance
        )
        .unwrap();
    }
    write_summary(&dir, &summary)
}

fn smooth_max_modes(cfg: &RunConfig) -> Result<Vec<SmoothMaxMode>, CliError> {
    Ok(match cfg.raw("mode").unwrap_or("both") {
        "power" => vec![SmoothMaxMode::Power],
        "lse" => vec![SmoothMaxMode::LogSumExp],
        "both" => vec![SmoothMaxMode::Power, SmoothMaxMode::LogSumExp],
        other => {
            return Err(CliError::Config(format!(
                "invalid value `{other}` for `mode`: expected power, lse or both"
            )))
        }
    })
}

pub fn run_maxlimit(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = output_dir(cfg)?;
    let values: Vec<f64> = cfg.list_or("values", (1..=10).map(f64::from).collect())?;
    let schedule: Vec<f64> = cfg.list_or("p_schedule", vec![2.0, 10.0, 50.0, 256.0])?;
    let mut csv = String::from("mode,p,value,error,bound\n");
    let mut summary = String::new();
    let mut violations = 0;
    for mode in smooth_max_modes(cfg)? {
        let name = match mode {
            SmoothMaxMode::Power => "power",
            SmoothMaxMode::LogSumExp => "lse",
        };
        for pt in maxlimit_convergence_check(&values, &schedule, mode)? {
            let ok = pt.error <= pt.bound;
            violations += usize::from(!ok);
            writeln!(
                csv,
                "{name},{},{:.12e},{:.12e},{:.12e}",
                pt.p, pt.value, pt.error, pt.bound
            )
            .unwrap();
            writeln!(
                summary,
                "{name} p={}: max error {:.6e} (bound {:.6e}{})",
                pt.p,
                pt.error,
                pt.bound,
                if ok { "" } else { ", VIOLATED" }
            )
            .unwrap();
        }
    }
    fs::write(dir.join("maxlimit.csv"), csv)?;
    write_summary(&dir, &summary)?;
    if violations > 0 {
        return Err(CliError::Run(format!(
            "{violations} smooth-max errors exceed their bound"
        )));
    }
    Ok(())
}

pub fn run_profile(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = output_dir(cfg)?;
    let set: Vec<f64> = cfg
        .list("profile_set")?
        .ok_or_else(|| CliError::Config("missing required key `profile_set`".into()))?;
    let v: f64 = cfg.get_or("direction", 1.0)?;
    let step: f64 = cfg.get_or("grid_step", 0.25)?;
    let projected: Vec<f64> = set.iter().map(|s| v * s).collect();
    let grid = covering_grid(&projected, step)?;
    let profile = relu_profile(&set, v, &grid)?;
    write_profile_csv(&profile, dir.join("profile.csv"))?;

    let mut summary = format!(
        "profile of {} elements on {} grid points, step {step}\nconvex: {}\n",
        set.len(),
        grid.len(),
        profile.is_convex(1e-9)
    );
    if v != 0.0 {
        let recovered = recover_1d_set(&profile, step)?;
        let elems: Vec<String> = recovered
            .iter()
            .map(|e| format!("{} x{}", e.value, e.multiplicity))
            .collect();
        writeln!(summary, "recovered: {}", elems.join(", ")).unwrap();
        writeln!(summary, "recovered count: {}", expand(&recovered).len()).unwrap();
    } else {
        writeln!(summary, "zero direction: the set is invisible in this profile").unwrap();
    }
    write_summary(&dir, &summary)
}
