//! `ckpt-v1` checkpoint container.
//!
//! Layout: `CKPT`, u32 metadata length, metadata JSON, u32 tensor count, then
//! per tensor a u32 name length, the UTF-8 name and a `TTE1` tensor blob.
//! All integers are little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::tensor_io::{decode_tensor, encode_tensor};
use crate::corpus::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const FORMAT: &str = "ckpt-v1";
const MAGIC: &[u8; 4] = b"CKPT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub format: String,
    /// Which model family the parameters belong to (`asr`, `tte`, `lm`).
    pub model: String,
    pub config: Value,
    pub vocab: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: Metadata,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new<T: Scalar>(
        model: &str,
        config: &impl Serialize,
        vocab: &Vocabulary,
        store: &ParamStore<T>,
    ) -> Result<Self> {
        Ok(Self {
            meta: Metadata {
                format: FORMAT.into(),
                model: model.into(),
                config: serde_json::to_value(config).map_err(|e| Error::Format(e.to_string()))?,
                vocab: vocab.symbols().to_vec(),
            },
            tensors: store
                .named_values()
                .into_iter()
                .map(|(n, t)| (n, t.cast()))
                .collect(),
        })
    }

    pub fn config<C: for<'de> Deserialize<'de>>(&self) -> Result<C> {
        serde_json::from_value(self.meta.config.clone())
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))
    }

    pub fn vocab(&self) -> Result<Vocabulary> {
        Vocabulary::from_symbols(self.meta.vocab.clone())
    }

    pub fn expect_model(&self, model: &str) -> Result<()> {
        if self.meta.model != model {
            return Err(Error::Format(format!(
                "checkpoint holds a {} model, expected {model}",
                self.meta.model
            )));
        }
        Ok(())
    }

    /// Copies the stored tensors into `store` by name.
    pub fn restore<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let values: Vec<(String, Tensor<T>)> = self
            .tensors
            .iter()
            .map(|(n, t)| (n.clone(), t.cast()))
            .collect();
        store.load_values(&values)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            encode_tensor(t, &mut out)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            let s = bytes.get(*pos..*pos + n).ok_or_else(|| bad("truncated"))?;
            *pos += n;
            Ok(s)
        };
        let u32_at = |pos: &mut usize| -> Result<usize> {
            Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()) as usize)
        };
        if take(&mut pos, 4)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let n = u32_at(&mut pos)?;
        let meta: Metadata =
            serde_json::from_slice(take(&mut pos, n)?).map_err(|e| bad(&e.to_string()))?;
        if meta.format != FORMAT {
            return Err(bad(&format!("unsupported format {:?}", meta.format)));
        }
        let count = u32_at(&mut pos)?;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let n = u32_at(&mut pos)?;
            let name = std::str::from_utf8(take(&mut pos, n)?)
                .map_err(|_| bad("tensor name is not UTF-8"))?
                .to_string();
            let (t, used) = decode_tensor(&bytes[pos..])?;
            pos += used;
            tensors.push((name, t));
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_restore() {
        let mut store = ParamStore::<f32>::new();
        store.add("a.weight", Tensor::from_fn(2, 3, |r, c| (r * 3 + c) as f32 * 0.5));
        store.add_buffer("a.mean", Tensor::from_vec(1, 2, vec![1.0, -1.0]));
        let cfg = serde_json::json!({"units": 3});
        let ck = Checkpoint::new("asr", &cfg, &Vocabulary::default(), &store).unwrap();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        let mut fresh = ParamStore::<f32>::new();
        fresh.add("a.weight", Tensor::zeros(2, 3));
        fresh.add_buffer("a.mean", Tensor::zeros(1, 2));
        back.restore(&mut fresh).unwrap();
        assert_eq!(fresh.named_values(), store.named_values());
        assert_eq!(back.vocab().unwrap(), Vocabulary::default());
    }

    #[test]
    fn rejects_corruption() {
        let store = ParamStore::<f32>::new();
        let ck = Checkpoint::new("tte", &0, &Vocabulary::default(), &store).unwrap();
        let mut b = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
        b[0] = b'X';
        assert!(Checkpoint::from_bytes(&b).is_err());
    }
}
