//! Checkpoint archive: the magic `PSEGCKPT`, a little-endian `u64` manifest
//! length, a JSON manifest, then every parameter as little-endian `f32`.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::ClassSpec;
use crate::error::{Error, Result};
use crate::model::{Model, TEXT_PREFIX};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::text::Vocab;

const MAGIC: &[u8; 8] = b"PSEGCKPT";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
    /// Byte offset into the data section.
    pub offset: usize,
}

/// Enough to resume a ChaCha stream exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let seed = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        RngState { seed, stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = || Error::Checkpoint("bad rng state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ModelConfig,
    pub classes: Vec<ClassSpec>,
    pub vocab: Vocab,
    pub epoch: usize,
    pub rng: RngState,
    pub arrays: Vec<ArrayEntry>,
}

pub struct Loaded {
    pub model: Model,
    pub epoch: usize,
    pub rng: ChaCha8Rng,
}

/// Serialises `params` (which must match `model`'s layout) with the model's
/// config, classes and vocabulary.
pub fn to_bytes(model: &Model, params: &ParamStore, epoch: usize, rng: &ChaCha8Rng) -> Result<Vec<u8>> {
    let mut arrays = Vec::with_capacity(params.len());
    let mut data = Vec::new();
    for (_, p) in params.iter() {
        let (r, c) = p.value.shape();
        arrays.push(ArrayEntry { name: p.name.clone(), shape: [r, c], dtype: "f32le".into(), offset: data.len() });
        for &v in p.value.data() {
            data.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        config: model.config.clone(),
        classes: model.classes.clone(),
        vocab: model.vocab.clone(),
        epoch,
        rng: RngState::capture(rng),
        arrays,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn vocab_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_file_name("vocab.json")
}

/// Writes the archive and `vocab.json` next to it.
pub fn save(path: &Path, model: &Model, params: &ParamStore, epoch: usize, rng: &ChaCha8Rng) -> Result<()> {
    let bytes = to_bytes(model, params, epoch, rng)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    let vp = vocab_path(path);
    let json = serde_json::to_string_pretty(&model.vocab)? + "\n";
    std::fs::write(&vp, json).map_err(|e| Error::io(&vp, e))
}

/// Splits an archive into its manifest and decoded arrays.
pub fn parse(bytes: &[u8]) -> Result<(Manifest, Vec<(String, Tensor)>)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("missing PSEGCKPT header".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + len).ok_or_else(|| Error::Checkpoint("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(body)?;
    let data = &bytes[16 + len..];
    let mut arrays = Vec::with_capacity(manifest.arrays.len());
    for a in &manifest.arrays {
        if a.dtype != "f32le" {
            return Err(Error::Checkpoint(format!("{}: unsupported dtype {}", a.name, a.dtype)));
        }
        let n = a.shape[0] * a.shape[1];
        let raw = data
            .get(a.offset..a.offset + 4 * n)
            .ok_or_else(|| Error::Checkpoint(format!("{}: data out of range", a.name)))?;
        let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
        arrays.push((a.name.clone(), Tensor::from_vec(a.shape[0], a.shape[1], values)));
    }
    Ok((manifest, arrays))
}

fn assign(store: &mut ParamStore, arrays: Vec<(String, Tensor)>, filter: impl Fn(&str) -> bool) -> Result<usize> {
    let mut n = 0;
    for (name, value) in arrays {
        if !filter(&name) {
            continue;
        }
        let id = store.id(&name).ok_or_else(|| Error::Checkpoint(format!("unexpected array {name}")))?;
        if store.get(id).shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: stored shape {:?}, model expects {:?}",
                value.shape(),
                store.get(id).shape()
            )));
        }
        store.set(id, value);
        n += 1;
    }
    Ok(n)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Loaded> {
    let (manifest, arrays) = parse(bytes)?;
    let mut model = Model::with_vocab(&manifest.config, &manifest.classes, manifest.vocab.clone())?;
    let n = assign(&mut model.store, arrays, |_| true)?;
    if n != model.store.len() {
        return Err(Error::Checkpoint(format!("{n} arrays for a model with {} parameters", model.store.len())));
    }
    model.clear_text_cache()?;
    Ok(Loaded { model, epoch: manifest.epoch, rng: manifest.rng.restore()? })
}

pub fn load(path: &Path) -> Result<Loaded> {
    if !path.is_file() {
        return Err(Error::CheckpointNotFound(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Replaces the text encoder's weights with those in an archive of the same
/// format, e.g. ported from a pretrained encoder. Returns the number of
/// arrays loaded.
pub fn load_text_weights(model: &mut Model, path: &Path) -> Result<usize> {
    if !path.is_file() {
        return Err(Error::CheckpointNotFound(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, arrays) = parse(&bytes)?;
    let prefix = format!("{TEXT_PREFIX}.");
    let n = assign(&mut model.store, arrays, |name| name.starts_with(&prefix))?;
    model.clear_text_cache()?;
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::default_classes;
    use rand::{Rng, SeedableRng};

    fn tiny() -> Model {
        let cfg = ModelConfig {
            image_size: 32,
            patch_size: 8,
            feature_dim: 8,
            encoder_layers: 3,
            num_heads: 2,
            text_layers: 1,
            decoder_blocks: 1,
            rec_decoder_layers: 1,
            num_classes: 2,
            ..Default::default()
        };
        Model::new(&cfg, &default_classes(2).unwrap()).unwrap()
    }

    #[test]
    fn roundtrip_reproduces_predictions_bit_for_bit() {
        let mut m = tiny();
        // move parameters off their initial values
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ids: Vec<_> = m.store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let mut t = m.store.get(id).clone();
            for v in t.data_mut() {
                *v += rng.random_range(-0.01..0.01);
            }
            m.store.set(id, t);
        }
        m.clear_text_cache().unwrap();
        let train_rng = crate::train::training_rng(9);
        let bytes = to_bytes(&m, &m.store, 4, &train_rng).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.epoch, 4);
        assert_eq!(back.rng, train_rng);
        let img = Tensor::from_vec(1024, 3, (0..3072).map(|i| (i % 17) as f64 / 17.0).collect());
        assert_eq!(back.model.predict(&img).unwrap(), m.predict(&img).unwrap());
        assert_eq!(to_bytes(&back.model, &back.model.store, 4, &back.rng).unwrap(), bytes);
    }

    #[test]
    fn missing_and_corrupt_archives() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("none.ckpt");
        assert!(matches!(load(&p), Err(Error::CheckpointNotFound(_))));
        assert!(from_bytes(b"NOTACKPT\0\0\0\0\0\0\0\0").is_err());
        let m = tiny();
        let mut bytes = to_bytes(&m, &m.store, 0, &crate::train::training_rng(0)).unwrap();
        bytes.truncate(bytes.len() - 4);
        assert!(from_bytes(&bytes).is_err());
    }

    #[test]
    fn save_writes_vocab_alongside() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.ckpt");
        let m = tiny();
        save(&p, &m, &m.store, 1, &crate::train::training_rng(0)).unwrap();
        let vocab: std::collections::BTreeMap<String, u32> =
            serde_json::from_str(&std::fs::read_to_string(vocab_path(&p)).unwrap()).unwrap();
        assert_eq!(vocab["[CLS]"], 0);
        assert_eq!(vocab.len(), m.vocab.len());
        assert!(load(&p).is_ok());
    }

    #[test]
    fn text_weight_hook_replaces_only_text_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("text.ckpt");
        let mut donor = tiny();
        let ids: Vec<_> = donor.store.ids_with_prefix("text.").collect();
        for id in ids {
            let t = donor.store.get(id).map(|v| v * 0.5);
            donor.store.set(id, t);
        }
        donor.clear_text_cache().unwrap();
        save(&p, &donor, &donor.store, 0, &crate::train::training_rng(0)).unwrap();
        let mut m = tiny();
        let others = m.store.fingerprint(|p| !p.name.starts_with("text."));
        let n = load_text_weights(&mut m, &p).unwrap();
        assert_eq!(n, donor.store.ids_with_prefix("text.").count());
        assert_eq!(m.text_fingerprint(), donor.text_fingerprint());
        assert_eq!(m.store.fingerprint(|p| !p.name.starts_with("text.")), others);
        assert_eq!(m.bundles[0].features, donor.bundles[0].features);
    }
}
