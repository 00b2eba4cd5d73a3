//! Flat key-value experiment configs.
//!
//! One `key = value` pair per line, `#` starts a comment line, every key
//! optional with the library defaults, unknown or duplicate keys rejected.
//! `--set key=value` overrides are applied before typed parsing. The resolved
//! config (every effective value) is written back out in the same format so a
//! run can be reproduced from its output directory alone.

use std::collections::BTreeMap;
use std::str::FromStr;

use caproj::capsule::SigmaMode;
use caproj::data::{IsotropicConfig, SynthConfig};
use caproj::heads::HeadKind;
use caproj::train::{default_schedule, DatasetSpec, TrainConfig};

/// Raw parsed keys with consumption tracking for unknown-key rejection.
pub struct KvConfig {
    entries: BTreeMap<String, String>,
    consumed: std::collections::BTreeSet<String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected 'key = value', got {raw:?}", idx + 1))?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(format!("line {}: empty key", idx + 1));
            }
            if entries.insert(key.clone(), value).is_some() {
                return Err(format!("line {}: duplicate key {key:?}", idx + 1));
            }
        }
        Ok(Self {
            entries,
            consumed: Default::default(),
        })
    }

    /// Applies a `key=value` override, replacing any file value.
    pub fn apply_override(&mut self, spec: &str) -> Result<(), String> {
        let (key, value) = spec
            .split_once('=')
            .ok_or_else(|| format!("override {spec:?} must look like key=value"))?;
        self.entries
            .insert(key.trim().to_string(), value.trim().to_string());
        Ok(())
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.consumed.insert(key.to_string());
        self.entries.get(key).cloned()
    }

    fn parsed<T: FromStr>(&mut self, key: &str, default: T) -> Result<T, String> {
        match self.take(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|_| format!("key {key:?}: cannot parse {raw:?}")),
        }
    }

    fn required(&mut self, key: &str) -> Result<String, String> {
        self.take(key)
            .ok_or_else(|| format!("key {key:?} is required for this dataset kind"))
    }

    /// Errors if any key was never consumed by the typed parse.
    pub fn finish(self) -> Result<(), String> {
        let unknown: Vec<&String> = self
            .entries
            .keys()
            .filter(|k| !self.consumed.contains(*k))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(format!(
                "unknown config keys: {}",
                unknown
                    .iter()
                    .map(|k| format!("{k:?}"))
                    .collect::<Vec<_>>()
                    .join(", ")
            ))
        }
    }
}

fn parse_schedule(raw: &str) -> Result<Vec<(usize, f64)>, String> {
    let raw = raw.trim();
    if raw.is_empty() || raw == "none" {
        return Ok(Vec::new());
    }
    raw.split(',')
        .map(|pair| {
            let (epoch, mult) = pair
                .split_once(':')
                .ok_or_else(|| format!("lr_schedule entry {pair:?} must be epoch:multiplier"))?;
            let epoch = epoch
                .trim()
                .parse()
                .map_err(|_| format!("lr_schedule epoch {epoch:?} is not an integer"))?;
            let mult = mult
                .trim()
                .parse()
                .map_err(|_| format!("lr_schedule multiplier {mult:?} is not a number"))?;
            Ok((epoch, mult))
        })
        .collect()
}

fn parse_dims_list(raw: &str) -> Result<Vec<usize>, String> {
    raw.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| format!("hidden dim {v:?} is not an integer"))
        })
        .collect()
}

/// Builds a full `TrainConfig` from the parsed keys, consuming everything a
/// valid config may contain.
pub fn train_config_from(kv: &mut KvConfig) -> Result<TrainConfig, String> {
    let defaults = TrainConfig::default();
    let seed = kv.parsed("seed", defaults.seed)?;
    let epochs = kv.parsed("epochs", defaults.epochs)?;
    let batch_size = kv.parsed("batch_size", defaults.batch_size)?;
    let learning_rate = kv.parsed("learning_rate", defaults.learning_rate)?;
    let momentum = kv.parsed("momentum", defaults.momentum)?;
    let lr_schedule = match kv.take("lr_schedule") {
        Some(raw) => parse_schedule(&raw)?,
        None => default_schedule(epochs),
    };
    let head_kind = match kv.take("head").as_deref() {
        None => defaults.head_kind,
        Some("capsule") => HeadKind::Capsule,
        Some("linear") => HeadKind::Linear,
        Some("group_neuron") => HeadKind::GroupNeuron,
        Some(other) => {
            return Err(format!(
                "key \"head\": {other:?} is not one of capsule, linear, group_neuron"
            ))
        }
    };
    let capsule_dim = kv.parsed("capsule_dim", defaults.capsule_dim)?;
    let sigma_mode = match kv.take("sigma_mode").as_deref() {
        None => defaults.sigma_mode,
        Some("exact") => SigmaMode::Exact,
        Some("hyper_power") => SigmaMode::HyperPower,
        Some(other) => {
            return Err(format!(
                "key \"sigma_mode\": {other:?} is not one of exact, hyper_power"
            ))
        }
    };
    let eps = kv.parsed("eps", defaults.eps)?;
    let sigma_reinit_every = kv.parsed("sigma_reinit_every", defaults.sigma_reinit_every)?;
    let feature_dim = kv.parsed("feature_dim", defaults.feature_dim)?;
    let hidden_dims = match kv.take("hidden_dims") {
        Some(raw) => parse_dims_list(&raw)?,
        None => defaults.hidden_dims.clone(),
    };
    let normalize = kv.parsed("normalize", defaults.normalize)?;
    let val_fraction = kv.parsed("val_fraction", defaults.val_fraction)?;

    let default_synth = SynthConfig::default();
    let dataset = match kv.take("dataset").as_deref().unwrap_or("synth_lowrank") {
        "synth_lowrank" => DatasetSpec::SynthLowRank(SynthConfig {
            num_classes: kv.parsed("data.classes", default_synth.num_classes)?,
            dim: kv.parsed("data.dim", default_synth.dim)?,
            subspace_rank: kv.parsed("data.rank", default_synth.subspace_rank)?,
            train_per_class: kv.parsed("data.train_per_class", default_synth.train_per_class)?,
            test_per_class: kv.parsed("data.test_per_class", default_synth.test_per_class)?,
            spread: kv.parsed("data.spread", default_synth.spread)?,
        }),
        "synth_isotropic" => {
            let d = IsotropicConfig::default();
            DatasetSpec::SynthIsotropic(IsotropicConfig {
                num_classes: kv.parsed("data.classes", d.num_classes)?,
                dim: kv.parsed("data.dim", d.dim)?,
                train_per_class: kv.parsed("data.train_per_class", d.train_per_class)?,
                test_per_class: kv.parsed("data.test_per_class", d.test_per_class)?,
                spread: kv.parsed("data.spread", d.spread)?,
            })
        }
        "csv" => DatasetSpec::Csv {
            path: kv.required("data.path")?,
            label_column: kv
                .take("data.label_column")
                .unwrap_or_else(|| "label".to_string()),
        },
        "idx" => DatasetSpec::Idx {
            images: kv.required("data.images")?,
            labels: kv.required("data.labels")?,
        },
        other => {
            return Err(format!(
                "key \"dataset\": {other:?} is not one of synth_lowrank, synth_isotropic, csv, idx"
            ))
        }
    };

    Ok(TrainConfig {
        seed,
        epochs,
        batch_size,
        learning_rate,
        momentum,
        lr_schedule,
        head_kind,
        capsule_dim,
        sigma_mode,
        eps,
        hidden_dims,
        feature_dim,
        dataset,
        normalize,
        val_fraction,
        sigma_reinit_every,
    })
}

/// Renders the fully-resolved config in the flat format.
pub fn write_resolved(config: &TrainConfig) -> String {
    let mut out = String::new();
    let mut push = |k: &str, v: String| {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(&v);
        out.push('\n');
    };
    push("seed", config.seed.to_string());
    push("epochs", config.epochs.to_string());
    push("batch_size", config.batch_size.to_string());
    push("learning_rate", config.learning_rate.to_string());
    push("momentum", config.momentum.to_string());
    push(
        "lr_schedule",
        if config.lr_schedule.is_empty() {
            "none".to_string()
        } else {
            config
                .lr_schedule
                .iter()
                .map(|(e, m)| format!("{e}:{m}"))
                .collect::<Vec<_>>()
                .join(",")
        },
    );
    push("head", config.head_kind.to_string());
    push("capsule_dim", config.capsule_dim.to_string());
    push(
        "sigma_mode",
        match config.sigma_mode {
            SigmaMode::Exact => "exact".to_string(),
            SigmaMode::HyperPower => "hyper_power".to_string(),
        },
    );
    push("eps", config.eps.to_string());
    push("sigma_reinit_every", config.sigma_reinit_every.to_string());
    push("feature_dim", config.feature_dim.to_string());
    push(
        "hidden_dims",
        config
            .hidden_dims
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    push("normalize", config.normalize.to_string());
    push("val_fraction", config.val_fraction.to_string());
    match &config.dataset {
        DatasetSpec::SynthLowRank(c) => {
            push("dataset", "synth_lowrank".to_string());
            push("data.classes", c.num_classes.to_string());
            push("data.dim", c.dim.to_string());
            push("data.rank", c.subspace_rank.to_string());
            push("data.train_per_class", c.train_per_class.to_string());
            push("data.test_per_class", c.test_per_class.to_string());
            push("data.spread", c.spread.to_string());
        }
        DatasetSpec::SynthIsotropic(c) => {
            push("dataset", "synth_isotropic".to_string());
            push("data.classes", c.num_classes.to_string());
            push("data.dim", c.dim.to_string());
            push("data.train_per_class", c.train_per_class.to_string());
            push("data.test_per_class", c.test_per_class.to_string());
            push("data.spread", c.spread.to_string());
        }
        DatasetSpec::Csv { path, label_column } => {
            push("dataset", "csv".to_string());
            push("data.path", path.clone());
            push("data.label_column", label_column.clone());
        }
        DatasetSpec::Idx { images, labels } => {
            push("dataset", "idx".to_string());
            push("data.images", images.clone());
            push("data.labels", labels.clone());
        }
    }
    out
}
