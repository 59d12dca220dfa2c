//! TOML study files: one experiment template plus the list of methods to run.
//!
//! ```toml
//! schema_version = 1
//! cycles = 6
//! seeds = [0, 1, 2]
//! output_dir = "runs/demo"
//!
//! [dataset]
//! kind = "synthetic"
//! seed = 0
//! volumes = 30
//! slices_per_volume = 12
//! size = [64, 64]
//! class_count = 2
//!
//! [[methods]]
//! strategy = "stochastic_batch"
//! scorer = "entropy"
//! ```
//!
//! Any value can be overridden with a dotted path such as `train.epochs=10`.

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::error::{CoreError, Result};
use crate::experiment::ExperimentConfig;
use crate::selection::Strategy;
use crate::uncertainty::ScorerKind;

pub const CONFIG_SCHEMA_VERSION: i64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub strategy: Strategy,
    #[serde(default)]
    pub scorer: Option<ScorerKind>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyConfig {
    pub base: ExperimentConfig,
    /// Empty means the single method given by `base.selection` and `base.scorer`.
    pub methods: Vec<MethodSpec>,
}

impl StudyConfig {
    /// One experiment config per method.
    pub fn experiments(&self) -> Vec<ExperimentConfig> {
        if self.methods.is_empty() {
            return vec![self.base.clone()];
        }
        self.methods
            .iter()
            .map(|m| {
                let mut c = self.base.clone();
                c.selection.strategy = m.strategy;
                c.scorer = m.scorer.or(self.base.scorer);
                c
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.experiments().iter().try_for_each(|e| e.validate())
    }
}

/// Parses a raw override value as a TOML literal, falling back to a plain string.
fn parse_literal(raw: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Sets `path` (dot separated) in `root`, creating intermediate tables.
pub fn apply_override(root: &mut Value, path: &str, raw: &str) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CoreError::Config(format!("bad override path {path:?}")));
    }
    let mut node = root;
    for k in &keys[..keys.len() - 1] {
        let table = node.as_table_mut().ok_or_else(|| CoreError::Config(format!("{path}: {k} is not a table")))?;
        node = table.entry(k.to_string()).or_insert_with(|| Value::Table(Default::default()));
    }
    let table = node.as_table_mut().ok_or_else(|| CoreError::Config(format!("{path}: parent is not a table")))?;
    table.insert(keys[keys.len() - 1].to_string(), parse_literal(raw));
    Ok(())
}

/// Splits `key=value` override flags.
pub fn parse_override(flag: &str) -> Result<(String, String)> {
    let (k, v) = flag.split_once('=').ok_or_else(|| CoreError::Config(format!("override {flag:?} is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

pub fn parse_study(text: &str, overrides: &[(String, String)]) -> Result<StudyConfig> {
    let mut root: Value = toml::from_str::<toml::Table>(text).map(Value::Table).map_err(|e| CoreError::Config(e.to_string()))?;
    for (k, v) in overrides {
        apply_override(&mut root, k, v)?;
    }
    let table = root.as_table_mut().expect("document is a table");
    match table.remove("schema_version") {
        Some(Value::Integer(CONFIG_SCHEMA_VERSION)) => {}
        Some(v) => return Err(CoreError::Config(format!("schema_version {v} is not supported (expected {CONFIG_SCHEMA_VERSION})"))),
        None => return Err(CoreError::Config("schema_version is missing".into())),
    }
    let methods = match table.remove("methods") {
        Some(v) => v.try_into::<Vec<MethodSpec>>().map_err(|e| CoreError::Config(format!("methods: {e}")))?,
        None => Vec::new(),
    };
    let base: ExperimentConfig = root.try_into().map_err(|e| CoreError::Config(e.to_string()))?;
    let study = StudyConfig { base, methods };
    study.validate()?;
    Ok(study)
}

#[cfg(test)]
mod tests {
    use super::*;

    const DOC: &str = r#"
schema_version = 1
cycles = 2
seeds = [0, 1]
output_dir = "out"

[dataset]
kind = "synthetic"
seed = 0
volumes = 5
slices_per_volume = 4
size = [16, 16]
class_count = 2

[selection]
budget = 2

[[methods]]
strategy = "random"

[[methods]]
strategy = "stochastic_batch"
scorer = "entropy"
"#;

    #[test]
    fn parses_methods_and_overrides() {
        let s = parse_study(DOC, &[("train.epochs".into(), "3".into()), ("train.warmup_epochs".into(), "1".into()), ("seeds".into(), "[4]".into())]).unwrap();
        let e = s.experiments();
        assert_eq!(e.len(), 2);
        assert_eq!(e[1].method(), "entropy+sb");
        assert_eq!(e[0].train.epochs, 3);
        assert_eq!(e[0].seeds, vec![4]);
    }

    #[test]
    fn field_errors_name_the_field() {
        let bad = DOC.replace("budget = 2", "budgt = 2");
        let err = parse_study(&bad, &[]).unwrap_err().to_string();
        assert!(err.contains("budgt"), "{err}");
        assert!(parse_study(&DOC.replace("schema_version = 1", "schema_version = 9"), &[]).is_err());
        let no_scorer = DOC.replace("scorer = \"entropy\"", "");
        assert!(parse_study(&no_scorer, &[]).is_err());
    }
}
