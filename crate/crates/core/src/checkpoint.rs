//! Checkpoints: a plain-text manifest plus a sidecar of little-endian `f32`.
//!
//! For a checkpoint prefix `out/best` the files are `out/best.manifest` and
//! `out/best.bin`. The manifest looks like
//!
//! ```text
//! amil-checkpoint 1
//! meta pooling attention
//! tensor extractor.conv1.weight 20x3x5x5 0
//! tensor extractor.conv1.bias 20 1500
//! ```
//!
//! Tensor offsets count `f32` elements from the start of the sidecar, and
//! tensors are stored back to back in manifest order.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{AmilModel, ModelConfig, PARAM_NAMES};
use crate::tensor::{Real, Tensor};

const MAGIC: &str = "amil-checkpoint 1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    meta: Vec<(String, String)>,
    tensors: Vec<(String, Tensor<f32>)>,
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s: OsString = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn manifest_path(prefix: &Path) -> PathBuf {
    with_suffix(prefix, ".manifest")
}

pub fn data_path(prefix: &Path) -> PathBuf {
    with_suffix(prefix, ".bin")
}

fn check_token(kind: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(char::is_whitespace) {
        return Err(Error::Checkpoint(format!("{kind} {s:?} must be a non-empty token without whitespace")));
    }
    Ok(())
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) -> Result<()> {
        let value = value.to_string();
        check_token("meta key", key)?;
        check_token("meta value", &value)?;
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
        Ok(())
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Parse a required meta value.
    pub fn meta_parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self
            .meta(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing meta entry {key:?}")))?;
        raw.parse()
            .map_err(|_| Error::Checkpoint(format!("bad value {raw:?} for meta entry {key:?}")))
    }

    pub fn push_tensor<T: Real>(&mut self, name: &str, tensor: &Tensor<T>) -> Result<()> {
        check_token("tensor name", name)?;
        if self.tensor(name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name:?}")));
        }
        self.tensors.push((name.to_string(), tensor.cast().with_requires_grad(false)));
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require_tensor(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensor(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn save(&self, prefix: &Path) -> Result<()> {
        let mut manifest = format!("{MAGIC}\n");
        for (k, v) in &self.meta {
            manifest.push_str(&format!("meta {k} {v}\n"));
        }
        let mut bytes = Vec::new();
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            let shape = if shape.is_empty() { "scalar".to_string() } else { shape.join("x") };
            manifest.push_str(&format!("tensor {name} {shape} {offset}\n"));
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            offset += t.len();
        }
        if let Some(dir) = prefix.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let (mpath, dpath) = (manifest_path(prefix), data_path(prefix));
        fs::write(&dpath, bytes).map_err(|e| Error::io(&dpath, e))?;
        fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
        Ok(())
    }

    pub fn load(prefix: &Path) -> Result<Self> {
        let (mpath, dpath) = (manifest_path(prefix), data_path(prefix));
        let manifest = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let bytes = fs::read(&dpath).map_err(|e| Error::io(&dpath, e))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::Checkpoint(format!("{}: size is not a multiple of 4", dpath.display())));
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();

        let mut lines = manifest.lines();
        if lines.next() != Some(MAGIC) {
            return Err(Error::Checkpoint(format!("{}: not a checkpoint manifest", mpath.display())));
        }
        let bad = |n: usize, msg: &str| Error::Checkpoint(format!("{}:{}: {msg}", mpath.display(), n + 2));
        let mut ckpt = Checkpoint::new();
        let mut expected_offset = 0usize;
        for (n, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields.as_slice() {
                [] => {}
                ["meta", k, v] => ckpt.set_meta(k, v)?,
                ["tensor", name, shape, offset] => {
                    let shape: Vec<usize> = if *shape == "scalar" {
                        Vec::new()
                    } else {
                        shape
                            .split('x')
                            .map(|d| d.parse().map_err(|_| bad(n, "bad shape")))
                            .collect::<Result<_>>()?
                    };
                    let offset: usize = offset.parse().map_err(|_| bad(n, "bad offset"))?;
                    if offset != expected_offset {
                        return Err(bad(n, "tensors must be stored contiguously in manifest order"));
                    }
                    let len: usize = shape.iter().product();
                    let data = values
                        .get(offset..offset + len)
                        .ok_or_else(|| bad(n, "tensor extends past the end of the data file"))?;
                    ckpt.push_tensor(name, &Tensor::new(shape, data.to_vec())?)?;
                    expected_offset += len;
                }
                _ => return Err(bad(n, "unrecognised manifest line")),
            }
        }
        if expected_offset != values.len() {
            return Err(Error::Checkpoint(format!(
                "{}: holds {} values but the manifest lists {expected_offset}",
                dpath.display(),
                values.len()
            )));
        }
        Ok(ckpt)
    }

    /// Record a model's architecture and parameters under `prefix.` names.
    pub fn put_model<T: Real>(&mut self, prefix: &str, model: &AmilModel<T>) -> Result<()> {
        let c = &model.config;
        if prefix.is_empty() {
            self.set_meta("patch_size", c.patch_size)?;
            self.set_meta("conv1_channels", c.conv1_channels)?;
            self.set_meta("conv2_channels", c.conv2_channels)?;
            self.set_meta("kernel", c.kernel)?;
            self.set_meta("pool", c.pool)?;
            self.set_meta("feature_dim", c.feature_dim)?;
            self.set_meta("attention_dim", c.attention_dim)?;
            self.set_meta("pooling", c.pooling)?;
        }
        for (name, t) in PARAM_NAMES.iter().zip(model.params()) {
            self.push_tensor(&format!("{prefix}{name}"), t)?;
        }
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            patch_size: self.meta_parse("patch_size")?,
            conv1_channels: self.meta_parse("conv1_channels")?,
            conv2_channels: self.meta_parse("conv2_channels")?,
            kernel: self.meta_parse("kernel")?,
            pool: self.meta_parse("pool")?,
            feature_dim: self.meta_parse("feature_dim")?,
            attention_dim: self.meta_parse("attention_dim")?,
            pooling: self.meta_parse("pooling")?,
        })
    }

    /// Rebuild the model stored under `prefix.` names.
    pub fn get_model<T: Real>(&self, prefix: &str) -> Result<AmilModel<T>> {
        let config = self.model_config()?;
        let params = PARAM_NAMES
            .iter()
            .map(|name| self.require_tensor(&format!("{prefix}{name}")).map(|t| t.cast()))
            .collect::<Result<Vec<_>>>()?;
        AmilModel::from_params(config, params).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

impl<T: Real> AmilModel<T> {
    pub fn save(&self, prefix: &Path) -> Result<()> {
        let mut ckpt = Checkpoint::new();
        ckpt.put_model("", self)?;
        ckpt.save(prefix)
    }

    pub fn load(prefix: &Path) -> Result<Self> {
        Checkpoint::load(prefix)?.get_model("")
    }
}
