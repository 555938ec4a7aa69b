use crate::CliError;
use cesaa_core::data::SyntheticSpec;
use cesaa_core::train::{AblationVariant, GroupKey, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

/// Everything a command needs, resolved from the TOML file plus overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
    pub sweep: SweepConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Used when `train_csv` is absent.
    pub synthetic: SyntheticSpec,
    pub train_csv: Option<PathBuf>,
    /// Without it, every `test_every`-th training row is held out.
    pub test_csv: Option<PathBuf>,
    pub test_every: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synthetic: SyntheticSpec::default(),
            train_csv: None,
            test_csv: None,
            test_every: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub group_key: GroupKey,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            group_key: GroupKey::User,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub variants: Vec<AblationVariant>,
    pub seeds: Vec<u64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            variants: AblationVariant::ALL.to_vec(),
            seeds: vec![0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub ks: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            ks: vec![1, 2, 3, 4],
        }
    }
}

impl RunConfig {
    /// Reads `path` (or starts from defaults), applies `key=value`
    /// overrides, then validates.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut tree = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let config: RunConfig = toml::Value::Table(tree)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate()?;
        if self.data.train_csv.is_none() {
            self.data.synthetic.validate()?;
        }
        if self.data.test_every < 2 {
            return Err(CliError::Config(
                "data.test_every must be at least 2".into(),
            ));
        }
        if self.ablate.variants.is_empty() || self.ablate.seeds.is_empty() {
            return Err(CliError::Config(
                "ablate needs at least one variant and seed".into(),
            ));
        }
        if let Some(&k) = self
            .sweep
            .ks
            .iter()
            .find(|&&k| k == 0 || k > self.train.n_experts)
        {
            return Err(CliError::Config(format!(
                "sweep.ks entry {k} outside 1..={}",
                self.train.n_experts
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        crate::hex(&Sha256::digest(
            serde_json::to_vec(self).expect("config serialises"),
        ))
    }
}

/// `a.b.c=value`; the value is read as TOML and falls back to a bare string.
fn apply_override(tree: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {spec:?} is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!(
            "override key {key:?} is malformed"
        )));
    }
    let value = parse_value(raw.trim());
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut node = tree;
    for part in parents {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override {key}: {part} is not a table")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn empty_config_is_defaults() {
        let c = RunConfig::resolve(None, &[]).unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn overrides_are_typed() {
        let c = RunConfig::resolve(
            None,
            &[
                "train.alpha=0.5".into(),
                "train.hidden=[8, 4]".into(),
                "train.variant=CESAAas".into(),
                "eval.group_key=query".into(),
                "data.synthetic.conflict=1.0".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.train.alpha, 0.5);
        assert_eq!(c.train.hidden, vec![8, 4]);
        assert_eq!(c.train.variant, AblationVariant::CesaaNoBoth);
        assert_eq!(c.eval.group_key, GroupKey::Query);
        assert_eq!(c.data.synthetic.conflict, 1.0);
    }

    #[test]
    fn unknown_keys_and_bad_values_fail() {
        for o in [
            "train.alpah=1",
            "nope=1",
            "train.alpha=-1",
            "train.top_k=9",
            "train",
        ] {
            assert!(
                matches!(
                    RunConfig::resolve(None, &[o.into()]),
                    Err(CliError::Config(_))
                ),
                "{o}"
            );
        }
    }

    #[test]
    fn file_then_override() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "[train]\nepochs = 2\nseed = 4\n[sweep]\nks = [1, 2]").unwrap();
        let c = RunConfig::resolve(Some(f.path()), &["train.seed=9".into()]).unwrap();
        assert_eq!((c.train.epochs, c.train.seed), (2, 9));
        assert_eq!(c.sweep.ks, vec![1, 2]);
    }

    #[test]
    fn digest_is_stable_and_sensitive() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.train.seed = 1;
        assert_eq!(a.digest(), RunConfig::default().digest());
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
    }
}
