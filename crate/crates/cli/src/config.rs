//! Flat `key = value` run configuration.

use std::path::{Path, PathBuf};

use densemath::model::ModelConfig;
use densemath::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{origin}:{line}: {msg}")]
pub struct ConfigError {
    pub origin: String,
    pub line: usize,
    pub msg: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Toy,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    /// The preset's own depth: 2 for `toy`, 16 for `full`.
    Preset,
    Depth(usize),
    /// No high-resolution branch: a single-scale model.
    Off,
}

/// Everything a run needs. Every field has a default; relative paths in a
/// config file are resolved against the file's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub preset: Preset,
    pub branch: Branch,
    pub train_dir: PathBuf,
    pub valid_dir: PathBuf,
    pub output_dir: PathBuf,
    pub size_cap: Option<usize>,
    pub beam: usize,
    pub length_normalize: bool,
    pub members: Vec<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            preset: Preset::Toy,
            branch: Branch::Preset,
            train_dir: PathBuf::from("data/train"),
            valid_dir: PathBuf::from("data/valid"),
            output_dir: PathBuf::from("runs"),
            size_cap: Some(densemath::data::DEFAULT_SIZE_CAP),
            beam: 10,
            length_normalize: false,
            members: Vec::new(),
        }
    }
}

pub const KEYS: &[&str] = &[
    "model",
    "branch_depth",
    "batch_size",
    "max_epochs",
    "rho",
    "epsilon",
    "clip",
    "weight_decay",
    "dropout",
    "seed",
    "validate_every",
    "max_len",
    "train_dir",
    "valid_dir",
    "output_dir",
    "size_cap",
    "beam",
    "length_normalize",
    "members",
];

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("`{key}` expects a number, got `{value}`"))
}

fn flag(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(format!("`{key}` expects true or false, got `{value}`")),
    }
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str, base: &Path) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| ConfigError {
                origin: origin.to_string(),
                line: i + 1,
                msg,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            cfg.set(key.trim(), value.trim(), base).map_err(err)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            origin: path.display().to_string(),
            line: 0,
            msg: format!("cannot read config: {e}"),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        RunConfig::parse(&text, &path.display().to_string(), base)
    }

    /// Applies `key=value` overrides given on the command line.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), ConfigError> {
        for (i, o) in overrides.iter().enumerate() {
            let err = |msg: String| ConfigError {
                origin: "--set".into(),
                line: i + 1,
                msg,
            };
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| err(format!("expected KEY=VALUE, got `{o}`")))?;
            self.set(key.trim(), value.trim(), Path::new("")).map_err(err)?;
        }
        Ok(())
    }

    fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<(), String> {
        let path = |v: &str| base.join(v);
        let t = &mut self.train;
        match key {
            "model" => {
                self.preset = match value {
                    "toy" => Preset::Toy,
                    "full" => Preset::Full,
                    _ => return Err(format!("`model` must be toy or full, got `{value}`")),
                }
            }
            "branch_depth" => {
                self.branch = match value {
                    "off" | "none" => Branch::Off,
                    v => Branch::Depth(num(key, v)?),
                }
            }
            "batch_size" => t.batch_size = num(key, value)?,
            "max_epochs" => t.max_epochs = num(key, value)?,
            "rho" => t.rho = num(key, value)?,
            "epsilon" => t.epsilon = num(key, value)?,
            "clip" => t.clip = num(key, value)?,
            "weight_decay" => t.weight_decay = num(key, value)?,
            "dropout" => t.dropout = num(key, value)?,
            "seed" => t.seed = num(key, value)?,
            "validate_every" => t.validate_every = num(key, value)?,
            "max_len" => t.max_len = num(key, value)?,
            "train_dir" => self.train_dir = path(value),
            "valid_dir" => self.valid_dir = path(value),
            "output_dir" => self.output_dir = path(value),
            "size_cap" => {
                self.size_cap = match value {
                    "off" | "none" => None,
                    v => Some(num(key, v)?),
                }
            }
            "beam" => self.beam = num(key, value)?,
            "length_normalize" => self.length_normalize = flag(key, value)?,
            "members" => {
                self.members = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(path)
                    .collect()
            }
            _ => return Err(format!("unknown key `{key}` (known keys: {})", KEYS.join(", "))),
        }
        Ok(())
    }

    /// The architecture this run trains.
    pub fn model_config(&self) -> ModelConfig {
        let mut cfg = match self.preset {
            Preset::Toy => ModelConfig::toy(),
            Preset::Full => ModelConfig::full(),
        };
        match self.branch {
            Branch::Preset => {}
            Branch::Depth(d) => cfg.encoder = cfg.encoder.with_branch_depth(d),
            Branch::Off => cfg.encoder.multi_scale = false,
        }
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_apply_to_an_empty_file() {
        let cfg = RunConfig::parse("# nothing\n\n", "t", Path::new(".")).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn keys_and_comments_parse() {
        let text = "seed = 7  # trailing\nbranch_depth = off\ntrain_dir = corpus\nmembers = a.ckpt, b.ckpt\nlength_normalize = yes\n";
        let cfg = RunConfig::parse(text, "t", Path::new("/base")).unwrap();
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.branch, Branch::Off);
        assert!(!cfg.model_config().encoder.multi_scale);
        assert_eq!(cfg.train_dir, PathBuf::from("/base/corpus"));
        assert_eq!(cfg.members, vec![PathBuf::from("/base/a.ckpt"), PathBuf::from("/base/b.ckpt")]);
        assert!(cfg.length_normalize);
    }

    #[test]
    fn every_listed_key_is_accepted() {
        let mut cfg = RunConfig::default();
        for key in KEYS {
            let value = match *key {
                "model" => "full",
                "length_normalize" => "false",
                "dropout" | "rho" | "epsilon" | "clip" | "weight_decay" => "0.5",
                _ => "4",
            };
            cfg.set(key, value, Path::new("")).unwrap();
        }
    }

    #[test]
    fn diagnostics_name_the_line() {
        let err = RunConfig::parse("seed = 1\nlearning_rate = 3\n", "toy.cfg", Path::new(".")).unwrap_err();
        assert_eq!(err.line, 2);
        assert!(err.to_string().starts_with("toy.cfg:2: unknown key `learning_rate`"));
        let err = RunConfig::parse("batch_size = many", "c", Path::new(".")).unwrap_err();
        assert!(err.msg.contains("batch_size"));
        assert!(RunConfig::parse("just words", "c", Path::new(".")).is_err());
    }

    #[test]
    fn branch_depth_defaults_to_the_preset() {
        let full = RunConfig::parse("model = full", "c", Path::new(".")).unwrap();
        assert_eq!(full.model_config(), ModelConfig::full());
        let toy = RunConfig::parse("branch_depth = 4", "c", Path::new(".")).unwrap();
        assert_eq!(toy.model_config().encoder.branch.depth, 4);
        assert_eq!(RunConfig::default().model_config(), ModelConfig::toy());
    }

    #[test]
    fn overrides_use_the_same_keys() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&["max_epochs=3".into()]).unwrap();
        assert_eq!(cfg.train.max_epochs, 3);
        assert!(cfg.apply_overrides(&["nope=1".into()]).is_err());
    }
}
