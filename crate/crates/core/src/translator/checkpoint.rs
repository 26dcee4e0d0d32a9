use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{build_translator, TranslatorConfig, TranslatorModel};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::nn::params::{read_u32, read_u64, take};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"M2L1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Position of the training RNG.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Model snapshot plus everything needed to resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: TranslatorModel,
    /// Generator and critic optimizer states, opaque.
    pub optimizer_state: Vec<u8>,
    pub epoch: usize,
    pub rng_state: RngState,
    pub format_version: u32,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        let config = serde_json::to_string(&self.model.config).expect("config serializes");
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(config.as_bytes());
        out.extend_from_slice(&(self.model.trained_epochs as u64).to_le_bytes());
        out.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        out.extend_from_slice(&self.rng_state.seed);
        out.extend_from_slice(&self.rng_state.stream.to_le_bytes());
        out.extend_from_slice(&self.rng_state.word_pos.to_le_bytes());
        self.model.store.write_f32(&mut out);
        out.extend_from_slice(&(self.optimizer_state.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.optimizer_state);
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let b = &mut bytes;
        if take(b, 4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a translator checkpoint (bad magic)".into()));
        }
        let format_version = read_u32(b)?;
        if format_version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {format_version}")));
        }
        let n = read_u32(b)? as usize;
        let text = std::str::from_utf8(take(b, n)?).map_err(|e| Error::Format(format!("config text: {e}")))?;
        let config: TranslatorConfig =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("config text: {e}")))?;
        let mut model = build_translator(&config)?;
        model.trained_epochs = read_u64(b)? as usize;
        let epoch = read_u64(b)? as usize;
        let seed: [u8; 32] = take(b, 32)?.try_into().unwrap();
        let stream = read_u64(b)?;
        let word_pos = u128::from_le_bytes(take(b, 16)?.try_into().unwrap());
        model.store.read_f32(b)?;
        let n = read_u64(b)? as usize;
        let optimizer_state = take(b, n)?.to_vec();
        if !b.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes in checkpoint", b.len())));
        }
        if !model.store.all_finite() {
            return Err(Error::Format("checkpoint holds non-finite parameters".into()));
        }
        Ok(Checkpoint {
            model,
            optimizer_state,
            epoch,
            rng_state: RngState {
                seed,
                stream,
                word_pos,
            },
            format_version,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
