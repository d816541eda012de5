//! Run configuration: a preset, overlaid by a TOML file, overlaid by
//! `--set key=value` pairs, overlaid by dedicated flags.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use meshmotion::datagen::{ActionClass, DatasetSpec};
use meshmotion::model::ModelConfig;
use meshmotion::params::AdamConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Small model and short schedules; minutes on one core.
    Desk,
    /// Full-size model and long schedules.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Class names; empty means all.
    pub classes: Vec<String>,
    pub per_class: usize,
    pub t_min: usize,
    pub t_max: usize,
    /// Train, test, val.
    pub ratios: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            classes: Vec::new(),
            per_class: 10,
            t_min: 16,
            t_max: 32,
            ratios: [0.7, 0.15, 0.15],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Joint Shuffle draws per run.
    pub count: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { count: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fine-tuning only: stop once train top-1 reaches this.
    pub target_accuracy: Option<f64>,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 32,
            lr: 1e-4,
            target_accuracy: None,
        }
    }
}

impl StageConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    /// Drives data generation, shuffling, masks and batch order.
    pub seed: u64,
    pub data: DataConfig,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
    pub pretrain: StageConfig,
    pub finetune: StageConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Full => Self {
                preset,
                seed: 0,
                data: DataConfig::default(),
                augment: AugmentConfig::default(),
                model: ModelConfig::default(),
                pretrain: StageConfig {
                    epochs: 200,
                    batch_size: 32,
                    lr: 1e-4,
                    target_accuracy: None,
                },
                finetune: StageConfig {
                    epochs: 50,
                    batch_size: 64,
                    lr: 1e-4,
                    target_accuracy: None,
                },
            },
            Preset::Desk => Self {
                preset,
                seed: 0,
                data: DataConfig {
                    t_min: 8,
                    t_max: 16,
                    ..Default::default()
                },
                augment: AugmentConfig::default(),
                model: ModelConfig {
                    c: 16,
                    k: 8,
                    d_g: 16,
                    d_e: 16,
                    d_a: 16,
                    kernel_hidden: 8,
                    head_hidden: 32,
                    decoder_hidden: 32,
                    frames: Some(8),
                    ..Default::default()
                },
                // short schedules need a larger step than the full preset
                pretrain: StageConfig {
                    epochs: 20,
                    batch_size: 32,
                    lr: 1e-3,
                    target_accuracy: None,
                },
                finetune: StageConfig {
                    epochs: 30,
                    batch_size: 16,
                    lr: 1e-3,
                    target_accuracy: None,
                },
            },
        }
    }

    /// Layers `file` and then `overrides` over the chosen preset. A preset
    /// given on the command line beats one named in the file.
    pub fn load(preset: Option<Preset>, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let file_table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
                toml::from_str::<toml::Table>(&text).with_context(|| format!("parsing config {}", path.display()))?
            }
            None => toml::Table::new(),
        };
        let from_file = match file_table.get("preset") {
            Some(v) => Some(
                v.clone()
                    .try_into::<Preset>()
                    .with_context(|| format!("preset: expected \"desk\" or \"full\", found {v}"))?,
            ),
            None => None,
        };
        let chosen = preset.or(from_file).unwrap_or(Preset::Desk);
        let mut table = toml::Table::try_from(Self::preset(chosen)).context("serializing preset")?;
        merge(&mut table, file_table);
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        table.insert("preset".into(), toml::Value::String(preset_name(chosen).into()));
        let cfg: Self = toml::Value::Table(table).try_into().context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        let sum: f64 = d.ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || d.ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
            bail!("data.ratios: {:?} must lie in [0, 1] and sum to 1 (sum is {sum})", d.ratios);
        }
        if d.t_min < 2 || d.t_min > d.t_max {
            bail!("data.t_min / data.t_max: need 2 <= t_min <= t_max, got {} and {}", d.t_min, d.t_max);
        }
        self.classes()?;
        for (name, stage) in [("pretrain", &self.pretrain), ("finetune", &self.finetune)] {
            if stage.batch_size == 0 {
                bail!("{name}.batch_size must be >= 1");
            }
            if !(stage.lr > 0.0 && stage.lr.is_finite()) {
                bail!("{name}.lr must be positive, got {}", stage.lr);
            }
        }
        self.model.validate().map_err(|e| anyhow::anyhow!("model: {e}"))?;
        Ok(())
    }

    pub fn classes(&self) -> Result<Vec<ActionClass>> {
        if self.data.classes.is_empty() {
            return Ok(ActionClass::ALL.to_vec());
        }
        self.data
            .classes
            .iter()
            .map(|name| {
                ActionClass::ALL
                    .into_iter()
                    .find(|c| c.name() == name)
                    .with_context(|| format!("data.classes: unknown class {name:?}"))
            })
            .collect()
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        Ok(DatasetSpec {
            classes: self.classes()?,
            per_class: self.data.per_class,
            t_range: (self.data.t_min, self.data.t_max),
            ratios: self.data.ratios,
            seed: self.seed,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn preset_name(p: Preset) -> &'static str {
    match p {
        Preset::Desk => "desk",
        Preset::Full => "full",
    }
}

/// Recursive table merge; scalars and arrays in `over` replace `base`.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// `a.b.c=value`; the value is read as a TOML literal, or as a bare string
/// when it does not parse as one.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .with_context(|| format!("override {spec:?} is not key=value"))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let keys: Vec<&str> = path.trim().split('.').collect();
    let (last, parents) = keys.split_last().expect("split yields one item");
    let mut cur = table;
    for k in parents {
        cur = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .with_context(|| format!("override {spec:?}: {k} is not a table"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
