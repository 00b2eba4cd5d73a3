//! Command implementations behind the thin clap layer in `main`.

use std::fs;
use std::path::{Path, PathBuf};

use caproj::bench::{sigma_trajectory, SigmaBenchReport};
use caproj::data::DataError;
use caproj::gradcheck::{run_all, GradCheckConfig};
use caproj::heads::{Head, HeadKind};
use caproj::model::{Model, ModelIoError};
use caproj::train::{
    build_dataset, compare_heads, evaluate, train, HeadSpec, RunRecord, TrainConfig, TrainError,
};
use serde_json::json;

use crate::config::{train_config_from, write_resolved, KvConfig};
use crate::viz::{write_csv, write_svg, ScatterPoint};

/// Exit code 1: the inputs were invalid. Exit code 2: the run itself failed.
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match &e {
            TrainError::Config(_)
            | TrainError::Data(DataError::InvalidInput(_))
            | TrainError::Data(DataError::Csv { .. })
            | TrainError::Data(DataError::Idx { .. })
            | TrainError::Data(DataError::Io { .. })
            | TrainError::EmptyEvalSet
            | TrainError::NoTestSet => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<ModelIoError> for CliError {
    fn from(e: ModelIoError) -> Self {
        match &e {
            ModelIoError::Format { .. }
            | ModelIoError::UnsupportedVersion(_)
            | ModelIoError::Inconsistent(_) => CliError::Validation(e.to_string()),
            ModelIoError::Io { .. } => CliError::Runtime(e.to_string()),
        }
    }
}

fn write_out(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

/// Loads and resolves a config file plus `--set` overrides.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<TrainConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
    let mut kv = KvConfig::parse(&text).map_err(CliError::Validation)?;
    for spec in overrides {
        kv.apply_override(spec).map_err(CliError::Validation)?;
    }
    let config = train_config_from(&mut kv).map_err(CliError::Validation)?;
    kv.finish().map_err(CliError::Validation)?;
    config.validate()?;
    Ok(config)
}

fn prepare_out_dir(out: &Path, config: &TrainConfig) -> Result<(), CliError> {
    fs::create_dir_all(out)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))?;
    write_out(&out.join("config.txt"), &write_resolved(config))
}

fn records_jsonl(record: &RunRecord) -> String {
    let mut lines = Vec::with_capacity(record.epochs.len() + 1);
    for e in &record.epochs {
        lines.push(
            json!({
                "record": "epoch",
                "epoch": e.epoch,
                "train_loss": e.train_loss,
                "train_error": e.train_error,
                "val_error": e.val_error,
                "mean_step_seconds": e.mean_step_seconds,
            })
            .to_string(),
        );
    }
    lines.push(
        json!({
            "record": "summary",
            "final_test_error": record.final_test_error,
            "steps": record.steps,
            "mean_step_seconds": record.mean_step_seconds,
            "eps_fallbacks": record.eps_fallbacks,
            "sigma_reinits": record.sigma_reinits,
        })
        .to_string(),
    );
    lines.join("\n") + "\n"
}

pub fn cmd_train(config_path: &Path, overrides: &[String], out: &Path) -> Result<(), CliError> {
    let config = load_config(config_path, overrides)?;
    prepare_out_dir(out, &config)?;
    let data = build_dataset(&config)?;
    let outcome = train(&config, &data)?;
    write_out(&out.join("records.jsonl"), &records_jsonl(&outcome.record))?;
    outcome.model.save(&out.join("model.bin"))?;
    let last = outcome.record.epochs.last().expect("at least one epoch");
    println!(
        "trained {} epochs: train loss {:.6}, train error {:.4}{}{}",
        config.epochs,
        last.train_loss,
        last.train_error,
        match last.val_error {
            Some(v) => format!(", val error {v:.4}"),
            None => String::new(),
        },
        match outcome.record.final_test_error {
            Some(t) => format!(", test error {t}"),
            None => String::new(),
        },
    );
    println!("results in {}", out.display());
    Ok(())
}

pub fn cmd_eval(
    model_path: &Path,
    config_path: &Path,
    overrides: &[String],
    split: &str,
) -> Result<(), CliError> {
    let config = load_config(config_path, overrides)?;
    let model = Model::load(model_path)?;
    let data = build_dataset(&config)?;
    let samples = match split {
        "test" => &data.test,
        "train" => &data.train,
        "validation" => &data.validation,
        other => {
            return Err(CliError::Validation(format!(
                "split {other:?} is not one of test, train, validation"
            )))
        }
    };
    let report = evaluate(&model, samples)?;
    let per_class: Vec<serde_json::Value> = report
        .per_class
        .iter()
        .map(|c| json!({"correct": c.correct, "total": c.total, "accuracy": c.accuracy()}))
        .collect();
    println!(
        "{}",
        json!({
            "split": split,
            "samples": samples.len(),
            "error_rate": report.error_rate,
            "per_class": per_class,
        })
    );
    Ok(())
}

fn parse_head_specs(raw: &str) -> Result<Vec<HeadSpec>, CliError> {
    raw.split(',')
        .map(|item| {
            let item = item.trim();
            let (name, dim) = match item.split_once(':') {
                Some((n, d)) => (
                    n.trim(),
                    d.trim().parse::<usize>().map_err(|_| {
                        CliError::Validation(format!("head spec {item:?}: bad dimension"))
                    })?,
                ),
                None => (item, 0),
            };
            let kind = match name {
                "capsule" => HeadKind::Capsule,
                "group_neuron" => HeadKind::GroupNeuron,
                "linear" => HeadKind::Linear,
                other => {
                    return Err(CliError::Validation(format!(
                        "head spec {other:?} is not one of capsule, group_neuron, linear"
                    )))
                }
            };
            if kind != HeadKind::Linear && dim == 0 {
                return Err(CliError::Validation(format!(
                    "head spec {item:?} needs a dimension, e.g. capsule:4"
                )));
            }
            Ok(HeadSpec {
                kind,
                capsule_dim: dim,
            })
        })
        .collect()
}

fn parse_u64_list(raw: &str) -> Result<Vec<u64>, CliError> {
    raw.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| CliError::Validation(format!("seed {v:?} is not an integer")))
        })
        .collect()
}

pub fn cmd_compare(
    config_path: &Path,
    overrides: &[String],
    heads: &str,
    seeds: &str,
    out: &Path,
) -> Result<(), CliError> {
    let config = load_config(config_path, overrides)?;
    let specs = parse_head_specs(heads)?;
    let seeds = parse_u64_list(seeds)?;
    prepare_out_dir(out, &config)?;
    let table = compare_heads(&config, &specs, &seeds)?;
    let json = serde_json::to_string_pretty(&table)
        .map_err(|e| CliError::Runtime(format!("cannot serialize table: {e}")))?;
    write_out(&out.join("comparison.json"), &json)?;
    println!(
        "{:<20} {:>10} {:>10} {:>12} {:>14}",
        "head", "mean err", "std err", "ms/step", "overhead"
    );
    for row in &table.rows {
        println!(
            "{:<20} {:>10.4} {:>10.4} {:>12.3} {:>14}",
            row.label,
            row.mean_error,
            row.std_error,
            row.mean_step_seconds * 1e3,
            match row.overhead_vs_linear {
                Some(o) => format!("{:+.1}%", o * 100.0),
                None => "-".to_string(),
            }
        );
    }
    println!("table in {}", out.join("comparison.json").display());
    Ok(())
}

fn parse_dims_grid(raw: &str) -> Result<Vec<(usize, usize)>, CliError> {
    raw.split(',')
        .map(|item| {
            let (d, c) = item
                .trim()
                .split_once(':')
                .ok_or_else(|| CliError::Validation(format!("dims entry {item:?} must be d:c")))?;
            let d = d.trim().parse().map_err(|_| {
                CliError::Validation(format!("dims entry {item:?}: d is not an integer"))
            })?;
            let c = c.trim().parse().map_err(|_| {
                CliError::Validation(format!("dims entry {item:?}: c is not an integer"))
            })?;
            Ok((d, c))
        })
        .collect()
}

pub fn cmd_gradcheck(
    trials: usize,
    seed: u64,
    tolerance: f64,
    dims: Option<&str>,
) -> Result<(), CliError> {
    if trials == 0 {
        return Err(CliError::Validation("trials must be >= 1".into()));
    }
    let mut cfg = GradCheckConfig {
        trials,
        seed,
        tolerance,
        ..GradCheckConfig::default()
    };
    if let Some(raw) = dims {
        cfg.dims = parse_dims_grid(raw)?;
        for &(d, c) in &cfg.dims {
            if c >= d {
                return Err(CliError::Validation(format!(
                    "dims entry {d}:{c} needs c < d"
                )));
            }
        }
    }
    let reports = run_all(&cfg).map_err(CliError::from)?;
    let mut all_pass = true;
    for r in &reports {
        let status = if r.pass() { "pass" } else { "FAIL" };
        println!(
            "{status}  {:<24} {} cases, {} comparisons, max rel err {:.3e} (tol {:.0e})",
            r.suite, r.cases, r.comparisons, r.max_rel_err, r.tolerance
        );
        if let Some(w) = &r.worst {
            println!(
                "      worst: d={} c={} seed={} {} analytic {:.6e} vs numeric {:.6e}",
                w.d, w.c, w.seed, w.param, w.analytic, w.numeric
            );
        }
        all_pass &= r.pass();
    }
    if all_pass {
        Ok(())
    } else {
        Err(CliError::Runtime(
            "gradient check failed; failing (d, c, seed) printed above".into(),
        ))
    }
}

pub fn cmd_visualize(
    model_path: &Path,
    config_path: &Path,
    overrides: &[String],
    classes: Option<&str>,
    out: &Path,
) -> Result<(), CliError> {
    let config = load_config(config_path, overrides)?;
    let model = Model::load(model_path)?;
    let head = match &model.head {
        Head::Capsule(h) => h,
        _ => {
            return Err(CliError::Validation(
                "visualize needs a capsule-head model".into(),
            ))
        }
    };
    if head.capsule_dim() != 2 {
        return Err(CliError::Validation(format!(
            "visualize needs 2-dimensional capsules for plotting, model has c={}",
            head.capsule_dim()
        )));
    }
    let data = build_dataset(&config)?;
    if data.test.is_empty() {
        return Err(CliError::Validation("dataset has no test samples".into()));
    }
    let selected: Vec<usize> = match classes {
        Some(raw) => parse_u64_list(raw)?.into_iter().map(|v| v as usize).collect(),
        None => (0..head.num_classes()).collect(),
    };
    for &class in &selected {
        if class >= head.num_classes() {
            return Err(CliError::Validation(format!(
                "class {class} out of range for {} classes",
                head.num_classes()
            )));
        }
    }
    fs::create_dir_all(out)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))?;

    // Project every test sample's feature vector into each selected subspace.
    let mut features = Vec::with_capacity(data.test.len());
    for (x, y) in &data.test {
        let f = model
            .backbone
            .features(x)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        features.push((f, *y));
    }
    for &class in &selected {
        let subspace = &head.subspaces()[class];
        let mut points = Vec::with_capacity(features.len());
        for (f, y) in &features {
            let coords = subspace
                .visualize_coords(f)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            let score = head
                .forward(f)
                .map_err(|e| CliError::Runtime(e.to_string()))?
                .scores()[class];
            let length = coords.norm2();
            if (length - score).abs() > 1e-8 * score.max(1.0) {
                return Err(CliError::Runtime(format!(
                    "projected length {length} disagrees with head score {score} for class {class}"
                )));
            }
            points.push(ScatterPoint {
                x: coords.get(0),
                y: coords.get(1),
                own_class: *y == class,
                length,
            });
        }
        let csv_path = out.join(format!("subspace_{class}.csv"));
        write_csv(&points, &csv_path)
            .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", csv_path.display())))?;
        let svg_path = out.join(format!("subspace_{class}.svg"));
        write_svg(&points, &format!("subspace {class}"), &svg_path)
            .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", svg_path.display())))?;
    }
    println!(
        "wrote {} subspace scatter pairs to {}",
        selected.len(),
        out.display()
    );
    Ok(())
}

pub fn cmd_bench_sigma(
    steps: usize,
    seed: u64,
    drift: f64,
    dims: Option<&str>,
    out: Option<&PathBuf>,
) -> Result<(), CliError> {
    if steps == 0 {
        return Err(CliError::Validation("steps must be >= 1".into()));
    }
    if !(drift.is_finite() && drift >= 0.0) {
        return Err(CliError::Validation("drift must be finite and >= 0".into()));
    }
    let entries = match dims {
        Some(raw) => {
            let grid = parse_dims_grid(raw)?;
            let mut entries = Vec::with_capacity(grid.len());
            for (d, c) in grid {
                if c >= d {
                    return Err(CliError::Validation(format!("dims entry {d}:{c} needs c < d")));
                }
                entries.push(
                    sigma_trajectory(d, c, steps, seed, drift, None)
                        .map_err(|e| CliError::Runtime(e.to_string()))?,
                );
            }
            SigmaBenchReport { drift, entries }
        }
        None => caproj::bench::default_grid(steps, seed, drift)
            .map_err(|e| CliError::Runtime(e.to_string()))?,
    };
    println!(
        "{:>5} {:>3} {:>14} {:>14} {:>9} {:>13} {:>9} {:>8}",
        "d", "c", "exact us/step", "hyper us/step", "ratio", "max residual", "eps-falls", "reinits"
    );
    for e in &entries.entries {
        let ratio = if e.exact_seconds_per_step > 0.0 {
            e.hyper_seconds_per_step / e.exact_seconds_per_step
        } else {
            f64::NAN
        };
        println!(
            "{:>5} {:>3} {:>14.2} {:>14.2} {:>9.2} {:>13.2e} {:>9} {:>8}",
            e.d,
            e.c,
            e.exact_seconds_per_step * 1e6,
            e.hyper_seconds_per_step * 1e6,
            ratio,
            e.max_residual,
            e.eps_fallbacks,
            e.divergence_reinits
        );
    }
    if let Some(path) = out {
        let json = serde_json::to_string_pretty(&entries)
            .map_err(|e| CliError::Runtime(format!("cannot serialize report: {e}")))?;
        write_out(path, &json)?;
        println!("report in {}", path.display());
    }
    Ok(())
}
