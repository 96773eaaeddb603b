//! Binary checkpoint format.
//!
//! Layout, all integers and floats little-endian:
//! magic `CATN`, `u32` version, `u64`-prefixed UTF-8 config echo, `u64`
//! global step, RNG state (32-byte seed, `u64` stream, `u128` word position),
//! `u64` Adam step, then a tensor directory (`u64` count; per tensor a
//! `u32`-prefixed name, `u8` trainable flag, `u8` moment flag, `u32` rank and
//! `u64` dims) followed by each tensor's values and, when flagged, its Adam
//! moments.

use std::path::{Path, PathBuf};

use numgrad::{Tensor, TensorMap};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CatError, Result};
use crate::kv::KeyValues;
use crate::model::{Model, ModelConfig};
use crate::train::{Adam, TrainConfig, TrainState};

pub const MAGIC: &[u8; 4] = b"CATN";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Dataset the run was trained on, if known.
    pub data_dir: Option<PathBuf>,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn model(&self) -> &Model {
        &self.state.model
    }

    /// The config echo: training keys, the full model config and the data path.
    pub fn echo(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        self.config.write_kv(&mut kv);
        self.state.model.config.write_kv(&mut kv);
        if let Some(d) = &self.data_dir {
            kv.set("data_dir", d.display());
        }
        kv
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&VERSION.to_le_bytes());
        let echo = self.echo().render();
        w.extend_from_slice(&(echo.len() as u64).to_le_bytes());
        w.extend_from_slice(echo.as_bytes());
        w.extend_from_slice(&self.state.step.to_le_bytes());
        let rng = &self.state.rng;
        w.extend_from_slice(&rng.get_seed());
        w.extend_from_slice(&rng.get_stream().to_le_bytes());
        w.extend_from_slice(&rng.get_word_pos().to_le_bytes());
        let adam = &self.state.adam;
        w.extend_from_slice(&adam.step.to_le_bytes());

        let params = &self.state.model.params;
        w.extend_from_slice(&(params.len() as u64).to_le_bytes());
        for (name, t) in params {
            w.extend_from_slice(&(name.len() as u32).to_le_bytes());
            w.extend_from_slice(name.as_bytes());
            w.push(t.requires_grad() as u8);
            w.push(adam.m.contains_key(name) as u8);
            w.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for d in t.shape() {
                w.extend_from_slice(&(*d as u64).to_le_bytes());
            }
        }
        let put = |w: &mut Vec<u8>, t: &Tensor| {
            for v in t.data() {
                w.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (name, t) in params {
            put(&mut w, t);
            if let (Some(m), Some(v)) = (adam.m.get(name), adam.v.get(name)) {
                put(&mut w, m);
                put(&mut w, v);
            }
        }
        w
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // write-then-rename keeps the previous checkpoint intact on failure
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| CatError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| CatError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CatError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(CatError::format(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CatError::Version { path: path.to_path_buf(), expected: VERSION, found: version });
        }
        let echo_len = r.u64()? as usize;
        let echo = std::str::from_utf8(r.take(echo_len)?).map_err(|_| CatError::format(path, "config echo is not UTF-8"))?;
        let kv = KeyValues::parse(echo).map_err(|e| CatError::format(path, e.to_string()))?;
        let config = TrainConfig::from_kv(&kv).map_err(|e| CatError::format(path, e.to_string()))?;
        let parts: usize = kv.require("model.parts").map_err(|e| CatError::format(path, e.to_string()))?;
        let frames: usize = kv.require("model.frames").map_err(|e| CatError::format(path, e.to_string()))?;
        let base = ModelConfig::preset(&config.preset, parts, frames).map_err(|e| CatError::format(path, e.to_string()))?;
        let model_config = ModelConfig::read_kv(&kv, base).map_err(|e| CatError::format(path, e.to_string()))?;
        let data_dir = kv.get_str("data_dir").map(PathBuf::from);

        let step = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        let mut adam = Adam { step: r.u64()?, ..Adam::default() };

        let count = r.u64()? as usize;
        let mut dir = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| CatError::format(path, "tensor name is not UTF-8"))?;
            let trainable = r.flag()?;
            let moments = r.flag()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            dir.push((name, trainable, moments, shape));
        }
        let mut params = TensorMap::new();
        for (name, trainable, moments, shape) in dir {
            let n: usize = shape.iter().product();
            let mut tensor = Tensor::new(shape.clone(), r.f64s(n)?).map_err(|e| CatError::format(path, e.to_string()))?;
            tensor.set_requires_grad(trainable);
            if moments {
                let m = Tensor::new(shape.clone(), r.f64s(n)?).map_err(|e| CatError::format(path, e.to_string()))?;
                let v = Tensor::new(shape, r.f64s(n)?).map_err(|e| CatError::format(path, e.to_string()))?;
                adam.m.insert(name.clone(), m);
                adam.v.insert(name.clone(), v);
            }
            params.insert(name, tensor);
        }
        if r.pos != bytes.len() {
            return Err(CatError::format(path, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let model = Model::from_params(model_config, params).map_err(|e| CatError::format(path, e.to_string()))?;
        Ok(Self { config, data_dir, state: TrainState { model, adam, step, rng } })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| CatError::format(self.path, format!("truncated at byte {} (wanted {n} more)", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn flag(&mut self) -> Result<bool> {
        match self.take(1)?[0] {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(CatError::format(self.path, format!("bad flag byte {b}"))),
        }
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| CatError::format(self.path, "tensor too large"))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}
