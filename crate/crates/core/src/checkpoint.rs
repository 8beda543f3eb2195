//! Checkpoint files: safetensors with a versioned metadata header.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::safetensors::Load;
use candle_core::{Device, Tensor};
use safetensors::SafeTensors;

use crate::codec::{CodecConfig, KlAutoencoder, LatentCodec};
use crate::denoiser::{ConditionalUnet, DenoiserConfig};
use crate::error::{Error, Result};
use crate::refine::{Refiner, RefinerConfig};

pub const FORMAT: &str = "harmony-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// What the weights belong to, e.g. `codec`, `denoiser`, `refiner`.
    pub kind: String,
    /// Model configuration as JSON.
    pub config: String,
    pub step: u64,
    /// Additional string metadata.
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(kind: &str, config: &impl serde::Serialize, step: u64) -> Result<Self> {
        Ok(Self {
            kind: kind.to_string(),
            config: serde_json::to_string(config)?,
            step,
            meta: BTreeMap::new(),
            tensors: BTreeMap::new(),
        })
    }

    /// Adds tensors under `prefix.`.
    pub fn with_tensors(mut self, prefix: &str, tensors: Vec<(String, Tensor)>) -> Self {
        for (k, v) in tensors {
            self.tensors.insert(format!("{prefix}.{k}"), v);
        }
        self
    }

    /// Tensors stored under `prefix.`, with the prefix stripped.
    pub fn group(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        let p = format!("{prefix}.");
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    pub fn config_as<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_str(&self.config)?)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut meta: HashMap<String, String> = self.meta.clone().into_iter().collect();
        meta.insert("format".into(), FORMAT.into());
        meta.insert("version".into(), VERSION.to_string());
        meta.insert("kind".into(), self.kind.clone());
        meta.insert("config".into(), self.config.clone());
        meta.insert("step".into(), self.step.to_string());
        let tensors: Vec<(&String, &Tensor)> = self.tensors.iter().collect();
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        // Write then rename so a crash never leaves a truncated checkpoint.
        let tmp = path.with_extension("tmp");
        safetensors::serialize_to_file(tensors, Some(meta), &tmp).map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, device: &Device) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let (_, header) =
            SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let mut meta: BTreeMap<String, String> = header.metadata().clone().unwrap_or_default().into_iter().collect();
        let mut take = |key: &str| {
            meta.remove(key)
                .ok_or_else(|| Error::Checkpoint(format!("{}: missing `{key}` header", path.display())))
        };
        if take("format")? != FORMAT {
            return Err(Error::Checkpoint(format!(
                "{} is not a harmony checkpoint",
                path.display()
            )));
        }
        let version: u32 = take("version")?
            .parse()
            .map_err(|_| Error::Checkpoint("unreadable version".into()))?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {version} is not supported (expected {VERSION})"
            )));
        }
        let kind = take("kind")?;
        let config = take("config")?;
        let step = take("step")?
            .parse()
            .map_err(|_| Error::Checkpoint("unreadable step".into()))?;
        let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            tensors.insert(name, view.load(device)?);
        }
        Ok(Self {
            kind,
            config,
            step,
            meta,
            tensors,
        })
    }
}

/// Codec weights and scaling factor.
pub fn save_codec(codec: &KlAutoencoder, path: impl AsRef<Path>) -> Result<()> {
    let mut ck = Checkpoint::new("codec", codec.config(), 0)?.with_tensors("model", codec.params().tensors());
    ck.meta
        .insert("scaling_factor".into(), codec.scaling_factor().to_string());
    ck.save(path)
}

pub fn load_codec(path: impl AsRef<Path>, device: &Device) -> Result<KlAutoencoder> {
    let ck = Checkpoint::load(path, device)?;
    ck.expect_kind("codec")?;
    let mut codec = KlAutoencoder::new(ck.config_as::<CodecConfig>()?, 0, device)?;
    codec.params().load(&ck.group("model"))?;
    let s: f64 = ck
        .meta
        .get("scaling_factor")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Checkpoint("missing scaling_factor".into()))?;
    codec.set_scaling_factor(s)?;
    Ok(codec)
}

/// Inference weights of a denoiser (normally the EMA copy).
pub fn save_denoiser(unet: &ConditionalUnet, step: u64, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::new("denoiser", unet.config(), step)?
        .with_tensors("model", unet.params().tensors())
        .save(path)
}

pub fn load_denoiser(path: impl AsRef<Path>, device: &Device) -> Result<ConditionalUnet> {
    let ck = Checkpoint::load(path, device)?;
    ck.expect_kind("denoiser")?;
    let unet = ConditionalUnet::new(ck.config_as::<DenoiserConfig>()?, 0, device)?;
    unet.params().load(&ck.group("model"))?;
    Ok(unet)
}

pub fn save_refiner(refiner: &Refiner, step: u64, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::new("refiner", refiner.config(), step)?
        .with_tensors("model", refiner.params().tensors())
        .save(path)
}

pub fn load_refiner(path: impl AsRef<Path>, device: &Device) -> Result<Refiner> {
    let ck = Checkpoint::load(path, device)?;
    ck.expect_kind("refiner")?;
    let r = Refiner::new(ck.config_as::<RefinerConfig>()?, 0, device)?;
    r.params().load(&ck.group("model"))?;
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::new(&[[1.5f32, -2.0], [0.25, 8.0]], &Device::Cpu).unwrap();
        let mut ck = Checkpoint::new("codec", &vec![1, 2, 3], 42)
            .unwrap()
            .with_tensors("model", vec![("w".into(), t.clone())]);
        ck.meta.insert("scaling_factor".into(), "0.5".into());
        let p = dir.path().join("a.safetensors");
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p, &Device::Cpu).unwrap();
        assert_eq!(back.kind, "codec");
        assert_eq!(back.step, 42);
        assert_eq!(back.config_as::<Vec<i32>>().unwrap(), vec![1, 2, 3]);
        assert_eq!(back.meta["scaling_factor"], "0.5");
        let w = &back.group("model")["w"];
        assert_eq!(w.to_vec2::<f32>().unwrap(), t.to_vec2::<f32>().unwrap());
        assert!(back.expect_kind("refiner").is_err());
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("plain.safetensors");
        let t = Tensor::zeros(2, candle_core::DType::F32, &Device::Cpu).unwrap();
        candle_core::safetensors::save(&HashMap::from([("x", t)]), &p).unwrap();
        assert!(matches!(Checkpoint::load(&p, &Device::Cpu), Err(Error::Checkpoint(_))));
        std::fs::write(&p, b"garbage").unwrap();
        assert!(matches!(Checkpoint::load(&p, &Device::Cpu), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn model_helpers_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut codec = KlAutoencoder::new(CodecConfig::toy(), 5, &Device::Cpu).unwrap();
        codec.set_scaling_factor(0.7).unwrap();
        save_codec(&codec, dir.path().join("c.safetensors")).unwrap();
        let back = load_codec(dir.path().join("c.safetensors"), &Device::Cpu).unwrap();
        assert_eq!(back.scaling_factor(), 0.7);
        let d = crate::vars::max_abs_diff(&codec.params().tensors(), &back.params().tensors()).unwrap();
        assert_eq!(d, 0.0);
        assert!(load_denoiser(dir.path().join("c.safetensors"), &Device::Cpu).is_err());

        let r = Refiner::new(RefinerConfig::toy(), 1, &Device::Cpu).unwrap();
        save_refiner(&r, 3, dir.path().join("r.safetensors")).unwrap();
        let rb = load_refiner(dir.path().join("r.safetensors"), &Device::Cpu).unwrap();
        assert_eq!(
            crate::vars::max_abs_diff(&r.params().tensors(), &rb.params().tensors()).unwrap(),
            0.0
        );
    }
}
