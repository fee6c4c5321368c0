//! Experiment files: TOML with run keys at the top level, optional
//! `[arms.<name>]` overrides, and an optional `[grid]` of value lists.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use structreg::trainer::{RunConfig, TrainError};
use thiserror::Error;
use toml::{Table, Value};

/// Keys every arm must end up with after merging.
pub const REQUIRED_KEYS: [&str; 4] = ["dataset", "transform", "beta", "w_s_max"];

/// Keys an arm or grid may not override; arms must see identical data,
/// splits and initialization so comparisons stay paired.
pub const SHARED_KEYS: [&str; 16] = [
    "seed",
    "data_seed",
    "split_seed",
    "dataset",
    "n_train",
    "n_test",
    "noise_sd",
    "blob_centers",
    "blob_sd",
    "train_path",
    "test_path",
    "n_labeled",
    "validation_frac",
    "rescale",
    "rescale_lo",
    "rescale_hi",
];

const EXPERIMENT_KEYS: [&str; 5] = ["name", "seeds", "reference", "arms", "grid"];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{path}{}: key `{key}`: {message}", line.map(|l| format!(":{l}")).unwrap_or_default())]
    Key {
        path: String,
        key: String,
        line: Option<usize>,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Arm {
    pub name: String,
    /// Merged base + arm keys, before grid values and seeds are applied.
    pub table: Table,
    pub config: RunConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Experiment {
    pub name: String,
    pub seeds: Vec<u64>,
    pub reference: Option<String>,
    pub arms: Vec<Arm>,
    pub grid: BTreeMap<String, Vec<Value>>,
    source: String,
    path: String,
}

/// Line (1-based) of `key = ...` inside `[section]` (`None` for the top level).
pub fn find_key_line(source: &str, section: Option<&str>, key: &str) -> Option<usize> {
    let mut current: Option<String> = None;
    for (i, raw) in source.lines().enumerate() {
        let line = raw.trim();
        if let Some(h) = line.strip_prefix('[') {
            let name = h.trim_start_matches('[').split(']').next().unwrap_or("").trim();
            current = Some(name.replace(' ', ""));
            continue;
        }
        if current.as_deref() != section {
            continue;
        }
        if let Some((k, _)) = line.split_once('=') {
            if k.trim().trim_matches('"') == key {
                return Some(i + 1);
            }
        }
    }
    None
}

impl Experiment {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let source = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut exp = Self::parse(&source, &path.display().to_string())?;
        let base = path.parent().unwrap_or(Path::new("."));
        for arm in &mut exp.arms {
            for p in [&mut arm.config.train_path, &mut arm.config.test_path]
                .into_iter()
                .flatten()
            {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
            for key in ["train_path", "test_path"] {
                if let Some(Value::String(s)) = arm.table.get(key) {
                    let p = PathBuf::from(s);
                    if p.is_relative() {
                        let joined = base.join(p).display().to_string();
                        arm.table.insert(key.into(), Value::String(joined));
                    }
                }
            }
        }
        Ok(exp)
    }

    pub fn parse(source: &str, path: &str) -> Result<Self, ConfigError> {
        let mut root: Table = source.parse().map_err(|e: toml::de::Error| ConfigError::Parse {
            path: path.into(),
            message: e.to_string().trim_end().to_string(),
        })?;
        let key_err = |section: Option<&str>, key: &str, message: String| ConfigError::Key {
            path: path.into(),
            key: key.into(),
            line: find_key_line(source, section, key),
            message,
        };

        let name = match root.remove("name") {
            None => "experiment".to_string(),
            Some(Value::String(s)) => s,
            Some(_) => return Err(key_err(None, "name", "expected a string".into())),
        };
        let seeds = match root.remove("seeds") {
            None => None,
            Some(Value::Array(a)) => Some(
                a.iter()
                    .map(|v| v.as_integer().filter(|&i| i >= 0).map(|i| i as u64))
                    .collect::<Option<Vec<u64>>>()
                    .filter(|s| !s.is_empty())
                    .ok_or_else(|| key_err(None, "seeds", "expected a non-empty list of non-negative integers".into()))?,
            ),
            Some(_) => return Err(key_err(None, "seeds", "expected a list".into())),
        };
        let reference = match root.remove("reference") {
            None => None,
            Some(Value::String(s)) => Some(s),
            Some(_) => return Err(key_err(None, "reference", "expected an arm name".into())),
        };
        let arm_tables = match root.remove("arms") {
            None => Table::new(),
            Some(Value::Table(t)) => t,
            Some(_) => return Err(key_err(None, "arms", "expected a table of arms".into())),
        };
        let grid = match root.remove("grid") {
            None => BTreeMap::new(),
            Some(Value::Table(t)) => {
                let mut g = BTreeMap::new();
                for (k, v) in t {
                    let vals = match v {
                        Value::Array(a) if !a.is_empty() => a,
                        _ => return Err(key_err(Some("grid"), &k, "expected a non-empty list".into())),
                    };
                    if SHARED_KEYS.contains(&k.as_str()) {
                        return Err(key_err(Some("grid"), &k, "data, split and seed keys cannot be searched over".into()));
                    }
                    for v in &vals {
                        let mut probe = Table::new();
                        probe.insert(k.clone(), v.clone());
                        check_keys(&probe).map_err(|(_, m)| key_err(Some("grid"), &k, m))?;
                    }
                    g.insert(k, vals);
                }
                g
            }
            Some(_) => return Err(key_err(None, "grid", "expected a table".into())),
        };
        debug_assert!(EXPERIMENT_KEYS.iter().all(|k| !root.contains_key(*k)));

        check_keys(&root).map_err(|(k, m)| key_err(None, &k, m))?;
        let seeds = seeds.unwrap_or_else(|| {
            vec![root.get("seed").and_then(Value::as_integer).unwrap_or(0) as u64]
        });

        let mut arms = Vec::new();
        let named: Vec<(String, Table)> = if arm_tables.is_empty() {
            vec![("default".to_string(), Table::new())]
        } else {
            let mut v = Vec::new();
            for (n, t) in arm_tables {
                match t {
                    Value::Table(t) => v.push((n, t)),
                    _ => return Err(key_err(None, &n, "arm must be a table".into())),
                }
            }
            v
        };
        for (arm_name, overrides) in named {
            let section = format!("arms.{arm_name}");
            for k in SHARED_KEYS {
                if overrides.contains_key(k) {
                    return Err(key_err(
                        Some(&section),
                        k,
                        "arms must share data, split and seeds for paired comparison".into(),
                    ));
                }
            }
            check_keys(&overrides).map_err(|(k, m)| key_err(Some(&section), &k, m))?;
            let mut table = root.clone();
            table.extend(overrides);
            for k in REQUIRED_KEYS {
                if !table.contains_key(k) {
                    return Err(ConfigError::Key {
                        path: path.into(),
                        key: k.into(),
                        line: None,
                        message: format!("required key missing for arm `{arm_name}`"),
                    });
                }
            }
            let config = to_config(&table).map_err(|(k, m)| {
                let sec = if find_key_line(source, Some(&section), &k).is_some() {
                    Some(section.as_str())
                } else {
                    None
                };
                key_err(sec, &k, m)
            })?;
            arms.push(Arm {
                name: arm_name,
                table,
                config,
            });
        }
        if let Some(r) = &reference {
            if !arms.iter().any(|a| &a.name == r) {
                return Err(key_err(None, "reference", format!("no arm named `{r}`")));
            }
        }
        Ok(Self {
            name,
            seeds,
            reference,
            arms,
            grid,
            source: source.into(),
            path: path.into(),
        })
    }

    /// Config for one arm at one seed, with optional grid values applied.
    pub fn resolve(&self, arm: &Arm, point: &[(String, Value)], seed: u64) -> Result<RunConfig, ConfigError> {
        let mut table = arm.table.clone();
        for (k, v) in point {
            table.insert(k.clone(), v.clone());
        }
        let mut cfg = to_config(&table).map_err(|(k, m)| ConfigError::Key {
            path: self.path.clone(),
            key: k,
            line: None,
            message: m,
        })?;
        cfg.seed = seed;
        cfg.train_path = arm.config.train_path.clone();
        cfg.test_path = arm.config.test_path.clone();
        Ok(cfg)
    }

    /// Maps a validation failure back to the key's line in the file.
    pub fn locate(&self, arm: &Arm, err: TrainError) -> ConfigError {
        match err {
            TrainError::Config { key, message } => {
                let section = format!("arms.{}", arm.name);
                let line = find_key_line(&self.source, Some(&section), key)
                    .or_else(|| find_key_line(&self.source, None, key))
                    .or_else(|| find_key_line(&self.source, Some("grid"), key));
                ConfigError::Key {
                    path: self.path.clone(),
                    key: key.into(),
                    line,
                    message,
                }
            }
            other => ConfigError::Parse {
                path: self.path.clone(),
                message: other.to_string(),
            },
        }
    }

    /// Cartesian product of the grid, in key order; a single empty point if no grid.
    pub fn grid_points(&self) -> Vec<Vec<(String, Value)>> {
        let mut points = vec![Vec::new()];
        for (k, vals) in &self.grid {
            points = points
                .into_iter()
                .flat_map(|p| {
                    vals.iter().map(move |v| {
                        let mut q = p.clone();
                        q.push((k.clone(), v.clone()));
                        q
                    })
                })
                .collect();
        }
        points
    }

    pub fn arm(&self, name: &str) -> Option<&Arm> {
        self.arms.iter().find(|a| a.name == name)
    }
}

/// Deserializes key by key so an error can name the offending key.
fn check_keys(table: &Table) -> Result<(), (String, String)> {
    for (k, v) in table {
        let mut one = Table::new();
        one.insert(k.clone(), v.clone());
        if let Err(e) = deserialize_table(one) {
            return Err((k.clone(), e));
        }
    }
    Ok(())
}

fn to_config(table: &Table) -> Result<RunConfig, (String, String)> {
    check_keys(table)?;
    deserialize_table(table.clone()).map_err(|e| ("config".into(), e))
}

fn deserialize_table(t: Table) -> Result<RunConfig, String> {
    Value::Table(t)
        .try_into::<RunConfig>()
        .map_err(|e| e.to_string().trim_end().to_string())
}

pub fn point_label(point: &[(String, Value)]) -> String {
    if point.is_empty() {
        return "base".into();
    }
    point
        .iter()
        .map(|(k, v)| format!("{k}-{}", v.to_string().trim_matches('"')))
        .collect::<Vec<_>>()
        .join("_")
}
