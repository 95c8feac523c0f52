use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalbench::EvalConfig;
use crate::objectives::ObjectiveTag;
use crate::synthworld::{derive_seed, WorldConfig};
use crate::training::TrainConfig;

/// Environment variables starting with this override config keys;
/// `__` separates nesting levels, e.g. `REWARDBENCH_TRAIN__EPOCHS=2`.
pub const ENV_PREFIX: &str = "REWARDBENCH_";

/// Name of the untrained reference model.
pub const BASELINE: &str = "baseline";

/// A model column of the experiment: the untrained encoder or one objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Baseline,
    Trained(ObjectiveTag),
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Baseline => BASELINE,
            Objective::Trained(t) => t.as_str(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        if s == BASELINE {
            return Ok(Objective::Baseline);
        }
        s.parse().map(Objective::Trained).map_err(|_| {
            Error::Config(format!(
                "unknown objective '{s}'; expected {BASELINE} or one of {}",
                ObjectiveTag::ALL.map(|t| t.as_str()).join(", ")
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Suite seed; every other seed is derived from it.
    pub seed: u64,
    pub out: PathBuf,
    /// Worker threads for training and scoring.
    pub jobs: usize,
    /// Model columns, in report order.
    pub objectives: Vec<String>,
    pub world: WorldConfig,
    pub train: TrainConfig,
    /// Per-objective tables merged over `train`.
    pub overrides: BTreeMap<String, toml::Table>,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut objectives = vec![BASELINE.to_string()];
        objectives.extend(ObjectiveTag::ALL.map(|t| t.as_str().to_string()));
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            jobs: 1,
            objectives,
            world: WorldConfig::default(),
            train: TrainConfig::default(),
            overrides: BTreeMap::new(),
            eval: EvalConfig::default(),
        }
    }
}

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

fn to_table<T: Serialize>(v: &T) -> Result<toml::Table> {
    toml::Table::try_from(v).map_err(|e| Error::Config(e.to_string()))
}

/// A TOML literal if `raw` parses as one, else the raw string.
fn env_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty key path");
    let mut t = table;
    for p in parents {
        let entry = t
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("'{p}' is not a table in {}", path.join("."))))?;
    }
    t.insert(last.clone(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Defaults, then the file at `path`, then `REWARDBENCH_*` entries of `env`.
    pub fn load<I>(path: Option<&Path>, env: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut table = to_table(&Self::default())?;
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)?;
            let file: toml::Table = text
                .parse()
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            merge(&mut table, file);
        }
        let mut vars: Vec<(String, String)> = env
            .into_iter()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX) && k.len() > ENV_PREFIX.len())
            .collect();
        vars.sort();
        for (k, v) in vars {
            let path: Vec<String> = k[ENV_PREFIX.len()..]
                .split("__")
                .map(str::to_ascii_lowercase)
                .collect();
            if path.iter().any(String::is_empty) {
                return Err(Error::Config(format!("malformed override variable {k}")));
            }
            set_path(&mut table, &path, env_value(&v))?;
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        if self.eval.n_pairs == 0 || self.eval.n_expert_trajectories == 0 {
            return Err(Error::Config(
                "eval needs at least one pair and one expert trajectory".into(),
            ));
        }
        if self.eval.n_expert_trajectories > self.world.expert_per_heldout_task {
            return Err(Error::Config(format!(
                "eval wants {} expert trajectories per task, the world generates {}",
                self.eval.n_expert_trajectories, self.world.expert_per_heldout_task
            )));
        }
        self.world.validate()?;
        let objectives = self.objectives()?;
        if objectives.is_empty() {
            return Err(Error::Config("no objectives configured".into()));
        }
        for name in self.overrides.keys() {
            if !matches!(Objective::parse(name)?, Objective::Trained(_)) {
                return Err(Error::Config(format!(
                    "'{name}' is not trained; it takes no overrides"
                )));
            }
        }
        for o in objectives {
            if let Objective::Trained(tag) = o {
                self.train_config(tag)?.validate(tag)?;
            }
        }
        Ok(())
    }

    /// Configured model columns, parsed; duplicates are rejected.
    pub fn objectives(&self) -> Result<Vec<Objective>> {
        let mut out: Vec<Objective> = Vec::with_capacity(self.objectives.len());
        for s in &self.objectives {
            let o = Objective::parse(s)?;
            if out.contains(&o) {
                return Err(Error::Config(format!("objective '{s}' listed twice")));
            }
            out.push(o);
        }
        Ok(out)
    }

    /// `train` with the objective's overrides applied.
    pub fn train_config(&self, tag: ObjectiveTag) -> Result<TrainConfig> {
        let Some(over) = self.overrides.get(tag.as_str()) else {
            return Ok(self.train.clone());
        };
        let mut t = to_table(&self.train)?;
        merge(&mut t, over.clone());
        toml::Value::Table(t)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("overrides.{tag}: {e}")))
    }

    /// Initialization seed shared by the baseline and every trained model.
    pub fn model_seed(&self) -> u64 {
        derive_seed(self.seed, &[0x1417])
    }

    /// Seed of the dataset, split and batch order of one objective.
    pub fn train_seed(&self, tag: ObjectiveTag) -> u64 {
        let k = ObjectiveTag::ALL
            .iter()
            .position(|&t| t == tag)
            .expect("tag in ALL");
        derive_seed(self.seed, &[0x7a, k as u64])
    }

    pub fn eval_seed(&self) -> u64 {
        derive_seed(self.seed, &[0xe7a1])
    }
}
