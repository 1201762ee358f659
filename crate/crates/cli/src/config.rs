//! Run configuration: one TOML file with `data`, `model`, `train`, `eval` and
//! `synth` sections plus a single top-level `seed`.

use std::fs;
use std::path::{Path, PathBuf};

use radiogen_core::data::{CohortConfig, SplitFractions};
use radiogen_core::eval::EvalConfig;
use radiogen_core::model::ModelConfig;
use radiogen_core::synth::PlantSpec;
use radiogen_core::train::TrainConfig;
use radiogen_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

const SECTIONS: [&str; 5] = ["data", "model", "train", "eval", "synth"];
pub const DEFAULT_PATIENTS: usize = 120;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub raw_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cohort_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report_dir: Option<PathBuf>,
    pub input_size: usize,
    pub min_tumor_voxels: usize,
    pub max_slices: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        let c = CohortConfig::default();
        DataConfig {
            raw_dir: None,
            cohort_dir: None,
            checkpoint_dir: None,
            report_dir: None,
            input_size: c.input_size,
            min_tumor_voxels: c.min_tumor_voxels,
            max_slices: c.max_slices,
        }
    }
}

/// Fully resolved configuration. Component seeds all equal `seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitFractions,
    pub eval: EvalConfig,
    pub synth: PlantSpec,
    pub n_patients: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::from_table(Table::new()).expect("defaults resolve")
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub alpha: Option<f64>,
}

fn take_section(root: &mut Table, name: &str) -> Result<Table> {
    match root.remove(name) {
        None => Ok(Table::new()),
        Some(Value::Table(t)) => Ok(t),
        Some(_) => Err(Error::config(format!("`{name}` must be a table"))),
    }
}

fn forbid(table: &Table, section: &str, key: &str, hint: &str) -> Result<()> {
    if table.contains_key(key) {
        return Err(Error::config(format!("[{section}] may not set `{key}`; {hint}")));
    }
    Ok(())
}

/// Deserialize a section after injecting the shared seed.
fn seeded<T: DeserializeOwned>(mut table: Table, section: &str, seed: u64) -> Result<T> {
    forbid(&table, section, "seed", "use the top-level `seed`")?;
    table.insert("seed".into(), Value::Integer(seed as i64));
    T::deserialize(table).map_err(|e| Error::config(format!("[{section}]: {e}")))
}

fn to_table<T: Serialize>(value: &T) -> Table {
    Table::try_from(value).expect("config serializes to a table")
}

impl RunConfig {
    pub fn from_table(mut root: Table) -> Result<Self> {
        if let Some(key) = root.keys().find(|k| *k != "seed" && !SECTIONS.contains(&k.as_str())) {
            return Err(Error::config(format!("unknown top-level key `{key}`")));
        }
        let seed = match root.remove("seed") {
            None => 0,
            Some(Value::Integer(s)) if s >= 0 => s as u64,
            Some(v) => return Err(Error::config(format!("seed must be a non-negative integer, got {v}"))),
        };
        let data: DataConfig = take_section(&mut root, "data")?
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(format!("[data]: {e}")))?;

        let mut model = take_section(&mut root, "model")?;
        forbid(&model, "model", "input_size", "set `data.input_size`")?;
        model.insert("input_size".into(), Value::Integer(data.input_size as i64));
        let model: ModelConfig = seeded(model, "model", seed)?;

        let mut train = take_section(&mut root, "train")?;
        let split = match train.remove("split") {
            None => SplitFractions::default(),
            Some(v) => v
                .try_into()
                .map_err(|e: toml::de::Error| Error::config(format!("[train.split]: {e}")))?,
        };
        let train: TrainConfig = seeded(train, "train", seed)?;

        let eval: EvalConfig = seeded(take_section(&mut root, "eval")?, "eval", seed)?;

        let mut synth = take_section(&mut root, "synth")?;
        let n_patients = match synth.remove("n_patients") {
            None => DEFAULT_PATIENTS,
            Some(Value::Integer(n)) if n >= 0 => n as usize,
            Some(v) => return Err(Error::config(format!("synth.n_patients must be a count, got {v}"))),
        };
        let synth: PlantSpec = seeded(synth, "synth", seed)?;

        let cfg = RunConfig {
            seed,
            data,
            model,
            train,
            split,
            eval,
            synth,
            n_patients,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        self.eval.validate()?;
        self.synth.validate()?;
        // gene_count is checked against the cohort at training time
        ModelConfig { gene_count: self.model.gene_count.max(1), ..self.model.clone() }.validate()?;
        if self.data.max_slices == 0 {
            return Err(Error::config("data.max_slices must be positive"));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let root: Table = text.parse().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        Self::from_table(root)
    }

    /// Load `path` (or defaults when `None`) and apply command-line overrides.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut root = match path {
            None => Table::new(),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::config(format!("cannot read config {}: {e}", p.display())))?;
                text.parse()
                    .map_err(|e: toml::de::Error| Error::config(format!("{}: {e}", p.display())))?
            }
        };
        if let Some(seed) = overrides.seed {
            root.insert("seed".into(), Value::Integer(seed as i64));
        }
        if let Some(alpha) = overrides.alpha {
            let mut eval = take_section(&mut root, "eval")?;
            eval.insert("alpha".into(), Value::Float(alpha));
            root.insert("eval".into(), Value::Table(eval));
        }
        Self::from_table(root)
    }

    pub fn cohort(&self) -> CohortConfig {
        CohortConfig {
            input_size: self.data.input_size,
            min_tumor_voxels: self.data.min_tumor_voxels,
            max_slices: self.data.max_slices,
            split: self.split,
            seed: self.seed,
        }
    }

    /// The resolved configuration in file layout, as echoed into manifests.
    pub fn to_table(&self) -> Table {
        let strip = |mut t: Table, keys: &[&str]| {
            for k in keys {
                t.remove(*k);
            }
            Value::Table(t)
        };
        let mut train = to_table(&self.train);
        train.insert("split".into(), Value::Table(to_table(&self.split)));
        let mut synth = to_table(&self.synth);
        synth.insert("n_patients".into(), Value::Integer(self.n_patients as i64));
        let mut root = Table::new();
        root.insert("seed".into(), Value::Integer(self.seed as i64));
        root.insert("data".into(), Value::Table(to_table(&self.data)));
        root.insert("model".into(), strip(to_table(&self.model), &["seed", "input_size"]));
        root.insert("train".into(), strip(train, &["seed"]));
        root.insert("eval".into(), strip(to_table(&self.eval), &["seed"]));
        root.insert("synth".into(), strip(synth, &["seed"]));
        root
    }
}
