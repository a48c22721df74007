//! Checkpoint container.
//!
//! Layout: 8-byte magic `STYLEAM\x01`, little-endian `u64` manifest length,
//! the UTF-8 JSON manifest, then one little-endian `f32` payload holding every
//! tensor back to back in manifest order. Manifest offsets are byte offsets
//! into the payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backbone::BackboneMode;
use super::model::Model;
use super::optim::{Adam, AdamConfig, AdamSlot};
use super::params::ParamKind;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"STYLEAM\x01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Source-only training finished.
    Pretrain,
    /// Adaptation finished.
    Uda,
    /// Externally supplied weights.
    Imported,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    pub offset: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adam_step: Option<u64>,
}

/// Serialized ChaCha stream position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = |what: &str| Error::Checkpoint(format!("malformed rng state: {what}"));
        let bytes = hex::decode(&self.seed).map_err(|_| bad("seed"))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| bad("seed length"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad("word position"))?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub mode: BackboneMode,
    pub stage_widths: Vec<usize>,
    pub discriminator_input: Option<usize>,
    pub phase: Phase,
    pub epoch: usize,
    pub config_digest: String,
    #[serde(default)]
    pub config: Option<serde_json::Value>,
    #[serde(default)]
    pub rng: Option<RngState>,
    #[serde(default)]
    pub adam: Option<AdamConfigRecord>,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfigRecord {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<AdamConfig> for AdamConfigRecord {
    fn from(c: AdamConfig) -> Self {
        Self {
            lr: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
            weight_decay: c.weight_decay,
        }
    }
}

impl From<AdamConfigRecord> for AdamConfig {
    fn from(c: AdamConfigRecord) -> Self {
        Self {
            lr: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
            weight_decay: c.weight_decay,
        }
    }
}

/// Metadata stored next to the tensors.
#[derive(Clone, Debug)]
pub struct CheckpointMeta {
    pub phase: Phase,
    pub epoch: usize,
    pub config_digest: String,
    pub config: Option<serde_json::Value>,
    pub rng: Option<RngState>,
}

/// In-memory checkpoint: manifest plus decoded tensors.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: Vec<Tensor<f32>>,
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, adam: Option<&Adam<f32>>, meta: CheckpointMeta) -> Self {
        let mut entries = Vec::new();
        let mut tensors = Vec::new();
        let mut offset = 0u64;
        let mut push = |name: String, kind, t: &Tensor<f32>, step| {
            entries.push(TensorEntry {
                name,
                kind,
                shape: t.shape().to_vec(),
                offset,
                adam_step: step,
            });
            offset += 4 * t.len() as u64;
            tensors.push(t.clone());
        };
        for e in model.store.entries() {
            let kind = match e.kind {
                ParamKind::Trainable => TensorKind::Param,
                ParamKind::Buffer => TensorKind::Buffer,
            };
            push(e.name.clone(), kind, &e.value, None);
        }
        if let Some(adam) = adam {
            for (i, slot) in adam.slots().iter().enumerate() {
                if let Some(slot) = slot {
                    let name = &model.store.entries()[i].name;
                    push(name.clone(), TensorKind::AdamM, &slot.m, Some(slot.step));
                    push(name.clone(), TensorKind::AdamV, &slot.v, Some(slot.step));
                }
            }
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            mode: model.mode(),
            stage_widths: model.backbone.widths().to_vec(),
            discriminator_input: model.disc.as_ref().map(|d| d.in_dim()),
            phase: meta.phase,
            epoch: meta.epoch,
            config_digest: meta.config_digest,
            config: meta.config,
            rng: meta.rng,
            adam: adam.map(|a| a.config.into()),
            tensors: entries,
            payload_bytes: offset,
        };
        Self { manifest, tensors }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec_pretty(&self.manifest)
            .map_err(|e| Error::Checkpoint(format!("manifest encoding: {e}")))?;
        let mut out = Vec::with_capacity(16 + manifest.len() + self.manifest.payload_bytes as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(msg);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16 + len)
            .ok_or_else(|| bad("truncated manifest".into()))?;
        let manifest: Manifest =
            serde_json::from_slice(body).map_err(|e| bad(format!("manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(bad(format!(
                "unsupported format version {}",
                manifest.format_version
            )));
        }
        let payload = &bytes[16 + len..];
        if payload.len() as u64 != manifest.payload_bytes {
            return Err(bad(format!(
                "payload has {} bytes, manifest declares {}",
                payload.len(),
                manifest.payload_bytes
            )));
        }
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let chunk = payload
                .get(start..start + 4 * n)
                .ok_or_else(|| bad(format!("tensor `{}` exceeds payload", e.name)))?;
            let data = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            tensors.push(Tensor::new(&e.shape, data)?);
        }
        Ok(Self { manifest, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    fn tensors_of(&self, kind: TensorKind) -> impl Iterator<Item = (&TensorEntry, &Tensor<f32>)> {
        self.manifest
            .tensors
            .iter()
            .zip(&self.tensors)
            .filter(move |(e, _)| e.kind == kind)
    }

    /// Rebuilds the model this checkpoint was taken from.
    pub fn to_model(&self) -> Result<Model<f32>> {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Model::new(self.manifest.mode, self.manifest.discriminator_input, &mut rng);
        if model.backbone.widths() != self.manifest.stage_widths.as_slice() {
            return Err(Error::Checkpoint(format!(
                "stage widths {:?} do not match {:?} backbone",
                self.manifest.stage_widths, self.manifest.mode
            )));
        }
        let loaded = self.load_into(&mut model, "")?;
        if loaded != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint covers {} of {} model tensors",
                loaded,
                model.store.len()
            )));
        }
        Ok(model)
    }

    /// Copies every parameter and buffer whose name starts with `prefix` into
    /// `model`. Returns how many tensors were copied.
    pub fn load_into(&self, model: &mut Model<f32>, prefix: &str) -> Result<usize> {
        let mut n = 0;
        for kind in [TensorKind::Param, TensorKind::Buffer] {
            for (e, t) in self.tensors_of(kind) {
                if !e.name.starts_with(prefix) {
                    continue;
                }
                model
                    .store
                    .set(&e.name, t.clone())
                    .map_err(|err| Error::Checkpoint(err.to_string()))?;
                n += 1;
            }
        }
        Ok(n)
    }

    /// Optimizer state, if one was saved.
    pub fn to_adam(&self, model: &Model<f32>) -> Result<Option<Adam<f32>>> {
        let Some(cfg) = self.manifest.adam else {
            return Ok(None);
        };
        let mut adam = Adam::new(cfg.into());
        let moments: Vec<_> = self.tensors_of(TensorKind::AdamM).collect();
        let seconds: Vec<_> = self.tensors_of(TensorKind::AdamV).collect();
        for ((em, m), (ev, v)) in moments.into_iter().zip(seconds) {
            let id = model
                .store
                .find(&em.name)
                .filter(|_| em.name == ev.name)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state for unknown `{}`", em.name)))?;
            adam.set_slot(
                id.index(),
                AdamSlot {
                    m: m.clone(),
                    v: v.clone(),
                    step: em.adam_step.unwrap_or(0),
                },
            );
        }
        Ok(Some(adam))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            phase: Phase::Pretrain,
            epoch: 5,
            config_digest: "abc".into(),
            config: None,
            rng: None,
        }
    }

    #[test]
    fn bytes_round_trip_restores_every_tensor() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = Model::<f32>::new(BackboneMode::Toy, Some(256), &mut rng);
        let ckpt = Checkpoint::from_model(&model, None, meta());
        let back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
        assert_eq!(back.manifest, ckpt.manifest);
        let restored = back.to_model().unwrap();
        for (a, b) in model.store.entries().iter().zip(restored.store.entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn payload_offsets_are_contiguous_little_endian_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = Model::<f32>::new(BackboneMode::Toy, None, &mut rng);
        let ckpt = Checkpoint::from_model(&model, None, meta());
        let bytes = ckpt.to_bytes().unwrap();
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let payload = &bytes[16 + mlen..];
        let first = &ckpt.manifest.tensors[1];
        let expect = ckpt.tensors[1].data()[0];
        let got = f32::from_le_bytes(payload[first.offset as usize..][..4].try_into().unwrap());
        assert_eq!(got, expect);
        let mut end = 0;
        for (e, t) in ckpt.manifest.tensors.iter().zip(&ckpt.tensors) {
            assert_eq!(e.offset, end);
            end += 4 * t.len() as u64;
        }
        assert_eq!(end, ckpt.manifest.payload_bytes);
    }

    #[test]
    fn rejects_corrupt_files() {
        assert!(Checkpoint::from_bytes(b"garbage").is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = Model::<f32>::new(BackboneMode::Toy, None, &mut rng);
        let mut bytes = Checkpoint::from_model(&model, None, meta()).to_bytes().unwrap();
        bytes.pop();
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn rng_state_round_trips_mid_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..17 {
            rng.next_u32();
        }
        let mut restored = RngState::capture(&rng).restore().unwrap();
        assert_eq!(rng.next_u64(), restored.next_u64());
    }
}
