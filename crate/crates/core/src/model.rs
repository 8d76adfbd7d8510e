//! The full model (stylizers, priors, transformation sampler, denoiser) and
//! its single-file checkpoint container.
//!
//! Container layout: 8-byte magic, `u32` format version, `u64` header length
//! (all little-endian), a JSON header, then every array as raw
//! little-endian `f32` in header order.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::kernel::DiffusionSchedule;
use crate::nn::{ParamId, ParamStore, Tensor};
use crate::sampler::TransformSampler;
use crate::stylizer::Stylizer;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PARTGEN\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Where a checkpoint came from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: u8,
    pub epoch: usize,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Clone, Debug)]
pub struct PartGen {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub stylizer: Stylizer,
    pub sampler: TransformSampler,
    pub denoiser: Denoiser,
    pub schedule: DiffusionSchedule,
    pub provenance: Provenance,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    model: ModelConfig,
    provenance: Provenance,
    arrays: Vec<ArrayEntry>,
}

impl PartGen {
    /// Freshly initialized model; weights depend only on `config` and `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let schedule = DiffusionSchedule::linear(config.steps, config.alpha_start, config.alpha_end)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.stylizer.latent_dim;
        let stylizer = Stylizer::new(&mut store, config.m, &config.stylizer, &mut rng);
        let sampler = TransformSampler::new(&mut store, config.m, d, &config.sampler, &mut rng)?;
        let denoiser = Denoiser::new(&mut store, config.m, d, &config.denoiser, &mut rng);
        Ok(Self { config, store, stylizer, sampler, denoiser, schedule, provenance: Provenance { seed, ..Default::default() } })
    }

    pub fn m(&self) -> usize {
        self.config.m
    }

    fn trainable(&self, prefix: &str) -> Vec<ParamId> {
        let buffers = self.stylizer.buffer_ids();
        self.store.ids_with_prefix(prefix).into_iter().filter(|id| !buffers.contains(id)).collect()
    }

    /// Encoder and prior weights (not the running statistics).
    pub fn stylizer_params(&self) -> Vec<ParamId> {
        self.trainable("stylizer.")
    }

    pub fn sampler_params(&self) -> Vec<ParamId> {
        self.trainable("sampler.")
    }

    pub fn denoiser_params(&self) -> Vec<ParamId> {
        self.trainable("denoiser.")
    }

    /// Rounds the weights to what the checkpoint stores, so the in-memory
    /// model and a reloaded one behave identically.
    pub fn quantize(&mut self) {
        self.store.quantize_f32();
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let arrays: Vec<ArrayEntry> =
            self.store.iter().map(|(name, t)| ArrayEntry { name: name.to_string(), rows: t.rows, cols: t.cols }).collect();
        let header = Header { version: CHECKPOINT_VERSION, model: self.config.clone(), provenance: self.provenance.clone(), arrays };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + 4 * self.store.num_scalars());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.store.iter() {
            for &v in &t.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        if header.version != version {
            return Err(bad("header version disagrees with preamble"));
        }
        let mut model = Self::new(header.model, 0)?;
        model.provenance = header.provenance;
        if header.arrays.len() != model.store.len() {
            return Err(bad(&format!("expected {} arrays, found {}", model.store.len(), header.arrays.len())));
        }
        let mut offset = 20 + hlen;
        for entry in &header.arrays {
            let id = model.store.id(&entry.name).ok_or_else(|| bad(&format!("unknown array {}", entry.name)))?;
            let t = model.store.get(id);
            if (t.rows, t.cols) != (entry.rows, entry.cols) {
                return Err(bad(&format!("array {} has shape {}x{}, expected {}x{}", entry.name, entry.rows, entry.cols, t.rows, t.cols)));
            }
            let n = entry.rows * entry.cols;
            let raw = bytes.get(offset..offset + 4 * n).ok_or_else(|| bad("truncated array data"))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
            *model.store.get_mut(id) = Tensor::from_vec(entry.rows, entry.cols, data);
            offset += 4 * n;
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after array data"));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile { path: path.to_path_buf() });
        }
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Profile;

    #[test]
    fn round_trip_is_byte_stable() {
        let mut model = PartGen::new(ModelConfig::box_furniture(Profile::Smoke), 3).unwrap();
        model.provenance.epoch = 7;
        model.quantize();
        let bytes = model.to_bytes().unwrap();
        let back = PartGen::from_bytes(&bytes).unwrap();
        assert_eq!(back.store, model.store);
        assert_eq!(back.provenance, model.provenance);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_bad_containers() {
        let model = PartGen::new(ModelConfig::box_furniture(Profile::Smoke), 3).unwrap();
        let bytes = model.to_bytes().unwrap();
        let mut wrong_version = bytes.clone();
        wrong_version[8] = 9;
        assert!(matches!(PartGen::from_bytes(&wrong_version), Err(Error::VersionMismatch { found: 9, .. })));
        assert!(PartGen::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        assert!(PartGen::from_bytes(b"nonsense").is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(PartGen::from_bytes(&extra).is_err());
    }

    #[test]
    fn parameter_groups_partition_the_weights() {
        let model = PartGen::new(ModelConfig::box_furniture(Profile::Smoke), 1).unwrap();
        let groups = [model.stylizer_params(), model.sampler_params(), model.denoiser_params()];
        let total: usize = groups.iter().map(Vec::len).sum();
        assert_eq!(total + model.stylizer.buffer_ids().len(), model.store.len());
    }
}
