//! Run configuration: one TOML file per run, every table closed to unknown keys.

use std::path::{Path, PathBuf};

use maskdiff_core::trainer::TrainConfig;
use maskdiff_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Overrides `output.dir` when set.
pub const OUT_DIR_ENV: &str = "MASKDIFF_OUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    /// Learned embedding of `t`, sized by `train.steps`.
    #[serde(default)]
    pub time_embedding: bool,
}

fn default_hidden() -> usize {
    32
}

fn default_blocks() -> usize {
    2
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
            blocks: default_blocks(),
            time_embedding: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train: PathBuf,
    pub heldout: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Steps between checkpoint saves; 0 saves only at the end.
    #[serde(default)]
    pub checkpoint_every: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_mc_draws")]
    pub mc_draws: usize,
}

fn default_mc_draws() -> usize {
    16
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            mc_draws: default_mc_draws(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelSection,
    pub train: TrainConfig,
    pub data: DataSection,
    pub output: OutputSection,
    #[serde(default)]
    pub eval: EvalSection,
}

impl RunConfig {
    /// Reads `path`, applies `key=value` overrides (dotted keys, TOML values;
    /// bare words are taken as strings), then the output-dir variable, then
    /// validates. Relative data paths resolve against the config's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml(&text, overrides)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.data.train = base.join(&cfg.data.train);
        cfg.data.heldout = cfg.data.heldout.map(|h| base.join(h));
        if let Some(dir) = std::env::var_os(OUT_DIR_ENV) {
            cfg.output.dir = PathBuf::from(dir);
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Value =
            toml::from_str(text).map_err(|e| Error::Config(one_line(&e.to_string())))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(one_line(&e.to_string())))?;
        cfg.train.validate()?;
        if cfg.model.hidden < 2 {
            return Err(Error::Config("model.hidden must be at least 2".into()));
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("override `{spec}` is not key=value")))?;
    let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut parts: Vec<&str> = key.trim().split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty());
    let last = last.ok_or_else(|| Error::Usage(format!("empty override key in `{spec}`")))?;
    let mut node = root;
    for p in parts {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{key}` does not name a table entry")))?;
        node = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    node.as_table_mut()
        .ok_or_else(|| Error::Config(format!("`{key}` does not name a table entry")))?
        .insert(last.to_string(), parsed);
    Ok(())
}
