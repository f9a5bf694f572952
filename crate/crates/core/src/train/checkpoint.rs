//! Checkpoint directory: `manifest.json` plus `params.bin` (little-endian f32).

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::ParamStore;

const FORMAT: &str = "brnlab-checkpoint";
const VERSION: u32 = 1;

/// Position of the training RNG: seed, stream and word offset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    /// Word position, decimal string since it is 128-bit.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng, seed: u64) -> Self {
        Self { seed, stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::validation("rng state", format!("bad word position `{}`", self.word_pos)))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArrayRecord {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
    bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    arrays: Vec<ArrayRecord>,
    model_config: ModelConfig,
    train_config: Option<TrainConfig>,
    epoch: usize,
    rng: RngState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub params: ParamStore<f32>,
    pub train_config: Option<TrainConfig>,
    pub epoch: usize,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn new(model: &Model, params: &ParamStore<f32>, train_config: Option<TrainConfig>, epoch: usize, rng: RngState) -> Self {
        Self { model: model.clone(), params: params.clone(), train_config, epoch, rng }
    }
}

pub fn save_checkpoint(ck: &Checkpoint, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bin = Vec::with_capacity(ck.params.num_scalars() * 4);
    let mut arrays = Vec::with_capacity(ck.params.len());
    for e in ck.params.entries() {
        let offset = bin.len();
        for v in &e.data {
            bin.extend_from_slice(&v.to_le_bytes());
        }
        arrays.push(ArrayRecord {
            name: e.name.clone(),
            shape: e.shape.clone(),
            dtype: "f32".into(),
            offset,
            bytes: bin.len() - offset,
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        arrays,
        model_config: ck.model.config.clone(),
        train_config: ck.train_config.clone(),
        epoch: ck.epoch,
        rng: ck.rng.clone(),
    };
    let bin_path = dir.join("params.bin");
    fs::write(&bin_path, &bin).map_err(|e| Error::io(&bin_path, e))?;
    let man_path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&man_path, text).map_err(|e| Error::io(&man_path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let man_path = dir.join("manifest.json");
    let text = fs::read_to_string(&man_path).map_err(|e| Error::io(&man_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let fmt_err = |field: &'static str, reason: String| Error::Format { path: man_path.clone(), field, reason };
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(fmt_err("version", format!("{} v{}", manifest.format, manifest.version)));
    }
    let bin_path = dir.join("params.bin");
    let bin = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let (model, mut params) = Model::new::<f32>(manifest.model_config.clone(), 0)?;
    if params.len() != manifest.arrays.len() {
        return Err(fmt_err("arrays", format!("{} arrays, model has {}", manifest.arrays.len(), params.len())));
    }
    for (entry, rec) in params.entries_mut().iter_mut().zip(&manifest.arrays) {
        if entry.name != rec.name || entry.shape != rec.shape || rec.dtype != "f32" {
            return Err(fmt_err("arrays", format!("{} {:?} does not match model array {} {:?}", rec.name, rec.shape, entry.name, entry.shape)));
        }
        let end = rec.offset + rec.bytes;
        if rec.bytes != entry.data.len() * 4 || end > bin.len() {
            return Err(Error::Format { path: bin_path.clone(), field: "payload", reason: format!("{} needs bytes {}..{end}", rec.name, rec.offset) });
        }
        for (v, chunk) in entry.data.iter_mut().zip(bin[rec.offset..end].chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        }
    }
    Ok(Checkpoint { model, params, train_config: manifest.train_config, epoch: manifest.epoch, rng: manifest.rng })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelPreset;
    use crate::nn::ScaleTimeTensor;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};

    #[test]
    fn round_trip_is_bit_identical() {
        let cfg = ModelConfig::preset(ModelPreset::Brn, 3, 2, 4);
        let (model, mut params) = Model::new::<f32>(cfg, 5).unwrap();
        // Perturb so that the stored values differ from a fresh init.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for e in params.entries_mut() {
            e.data.iter_mut().for_each(|v| *v += rng.random_range(-0.01f32..0.01));
        }
        let mut train_rng = ChaCha8Rng::seed_from_u64(9);
        let _: u64 = train_rng.random();
        let ck = Checkpoint::new(&model, &params, None, 3, RngState::capture(&train_rng, 9));
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&ck, dir.path()).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, ck);
        let x = ScaleTimeTensor::new(1, 64, Array2::from_shape_fn((64, 3), |(i, j)| ((i + 2 * j) as f32).sin())).unwrap();
        let a = model.predict(&params, &x).unwrap();
        let b = back.model.predict(&back.params, &x).unwrap();
        assert_eq!(a, b);
        let mut restored = back.rng.restore().unwrap();
        assert_eq!(restored.random::<u64>(), train_rng.random::<u64>());
    }

    #[test]
    fn truncated_payload_rejected() {
        let (model, params) = Model::new::<f32>(ModelConfig::preset(ModelPreset::Baseline, 3, 2, 4), 0).unwrap();
        let ck = Checkpoint::new(&model, &params, None, 0, RngState::capture(&ChaCha8Rng::from_seed([0; 32]), 0));
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&ck, dir.path()).unwrap();
        let bin = dir.path().join("params.bin");
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 4]).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Format { field: "payload", .. }), "{err}");
    }
}
