//! Run configuration: built-in defaults, then an optional `key = value`
//! file, then command-line flags.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use amil_core::bags::TilingSpec;
use amil_core::model::PoolingMode;
use amil_core::training::{OptimizerKind, TrainConfig};
use amil_core::Error;

pub const KEYS: [&str; 14] = [
    "data",
    "labels",
    "out",
    "learning_rate",
    "epochs",
    "seed",
    "pooling",
    "optimizer",
    "weight_decay",
    "augment",
    "patch_size",
    "stride",
    "attention_dim",
    "timing",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    /// Defaults to `labels.csv` under `data`.
    pub labels: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub pooling: PoolingMode,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub augment: bool,
    pub patch_size: usize,
    /// Defaults to `patch_size`.
    pub stride: Option<usize>,
    pub attention_dim: usize,
    /// Record wall time in the metrics CSV (makes it run-dependent).
    pub timing: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RunConfig {
            data: None,
            labels: None,
            out: None,
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            seed: t.seed,
            pooling: t.pooling,
            optimizer: t.optimizer,
            weight_decay: t.weight_decay,
            augment: t.augment,
            patch_size: t.tiling.patch_size,
            stride: None,
            attention_dim: t.attention_dim,
            timing: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, Error> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, Error> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid value {value:?} for {key} (expected true or false)"))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), Error> {
        match key {
            "data" => self.data = Some(PathBuf::from(value)),
            "labels" => self.labels = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "pooling" => self.pooling = value.parse()?,
            "optimizer" => self.optimizer = value.parse()?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "augment" => self.augment = parse_bool(key, value)?,
            "patch_size" => self.patch_size = parse(key, value)?,
            "stride" => self.stride = Some(parse(key, value)?),
            "attention_dim" => self.attention_dim = parse(key, value)?,
            "timing" => self.timing = parse_bool(key, value)?,
            _ => {
                return Err(Error::Config(format!(
                    "unknown key {key:?}; known keys are {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Apply a `key = value` file. Blank lines and `#` comments are ignored;
    /// unknown or repeated keys are errors. Relative paths resolve against
    /// the file's directory.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), Error> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{}:{}: expected `key = value`", path.display(), n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.contains(&key) {
                return Err(Error::Config(format!("{}:{}: {key} set twice", path.display(), n + 1)));
            }
            seen.push(key);
            self.set(key, value)
                .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), n + 1)))?;
            if matches!(key, "data" | "labels" | "out") {
                let slot = match key {
                    "data" => &mut self.data,
                    "labels" => &mut self.labels,
                    _ => &mut self.out,
                };
                if let Some(p) = slot.as_mut().filter(|p| p.is_relative()) {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(())
    }

    pub fn tiling(&self) -> Result<TilingSpec, Error> {
        TilingSpec::new(self.patch_size, self.stride.unwrap_or(self.patch_size))
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn train_config(&self) -> Result<TrainConfig, Error> {
        let config = TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            seed: self.seed,
            pooling: self.pooling,
            augment: self.augment,
            optimizer: self.optimizer,
            weight_decay: self.weight_decay,
            tiling: self.tiling()?,
            attention_dim: self.attention_dim,
        };
        config.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_values_and_comments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        fs::write(
            &path,
            "# recipe\nlearning_rate = 0.01\nepochs=3  # short\n\npooling = mean\ndata = images\naugment = true\n",
        )
        .unwrap();
        let mut c = RunConfig::default();
        c.apply_file(&path).unwrap();
        assert_eq!(c.learning_rate, 0.01);
        assert_eq!(c.epochs, 3);
        assert_eq!(c.pooling, PoolingMode::Mean);
        assert!(c.augment);
        assert_eq!(c.data, Some(dir.path().join("images")));
    }

    #[test]
    fn unknown_repeated_and_malformed_lines_fail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        for text in ["batch_size = 4\n", "epochs = 2\nepochs = 3\n", "epochs 2\n", "epochs = two\n"] {
            fs::write(&path, text).unwrap();
            let err = RunConfig::default().apply_file(&path).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{text:?}: {err}");
        }
    }

    #[test]
    fn defaults_follow_the_training_recipe() {
        let c = RunConfig::default().train_config().unwrap();
        assert_eq!(c.learning_rate, 0.001);
        assert_eq!(c.tiling, TilingSpec::new(28, 28).unwrap());
    }
}
