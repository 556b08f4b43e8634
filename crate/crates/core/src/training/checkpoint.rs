//! Versioned little-endian checkpoint files.
//!
//! ```text
//! magic "SSMPFNCK" | version u32 | config JSON (u32 length + bytes)
//! | step u64 | seed u64
//! | manifest: count u32, then per tensor (sorted by name)
//!     name (u32 length + bytes) | rank u32 | dims u64… | offset u64
//! | blob: length u64, then f64 values
//! | optimizer: flag u8, then step u64 and the m and v blobs in manifest order
//! | FNV-1a 64 checksum of everything before it
//! ```
//!
//! Training randomness is a pure function of `(seed, step)`, so those two
//! numbers are the saved generator state.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::optim::AdamState;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamStore, PfnModel};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SSMPFNCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Parameters sorted by name.
    pub params: ParamStore,
    pub step: u64,
    pub seed: u64,
    /// Moments in the same order as `params`.
    pub optimizer: Option<AdamState>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn sorted_order(store: &ParamStore) -> Vec<usize> {
    let mut order: Vec<usize> = (0..store.len()).collect();
    order.sort_by(|&a, &b| store.names()[a].cmp(&store.names()[b]));
    order
}

impl Checkpoint {
    pub fn from_model(model: &PfnModel, step: u64, seed: u64, optimizer: Option<&AdamState>) -> Self {
        let order = sorted_order(model.params());
        let mut params = ParamStore::new();
        for &i in &order {
            params.insert(model.params().names()[i].clone(), model.params().tensors()[i].clone());
        }
        let optimizer = optimizer.map(|s| AdamState {
            step: s.step,
            m: order.iter().map(|&i| s.m[i].clone()).collect(),
            v: order.iter().map(|&i| s.v[i].clone()).collect(),
        });
        Checkpoint {
            config: model.config().clone(),
            params,
            step,
            seed,
            optimizer,
        }
    }

    /// Copies the parameters into `model`, whose configuration must match.
    pub fn restore_into(&self, model: &mut PfnModel) -> Result<()> {
        if &self.config != model.config() {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint config {} differs from model config {}",
                serde_json::to_string(&self.config)?,
                serde_json::to_string(model.config())?
            )));
        }
        model.params_mut().assign(&self.params)
    }

    /// A model built from the stored configuration, plus the optimizer
    /// state reordered to the model's parameter order.
    pub fn into_model(self) -> Result<(PfnModel, Option<AdamState>)> {
        let mut model = PfnModel::new(self.config.clone())?;
        self.restore_into(&mut model)?;
        let optimizer = self.optimizer.map(|s| {
            let mut m = vec![Tensor::scalar(0.0); s.m.len()];
            let mut v = m.clone();
            for ((name, mi), vi) in self.params.names().iter().zip(s.m).zip(s.v) {
                let idx = model.params().names().iter().position(|n| n == name).expect("names matched by assign");
                m[idx] = mi;
                v[idx] = vi;
            }
            AdamState { step: s.step, m, v }
        });
        Ok((model, optimizer))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let config = serde_json::to_vec(&self.config)?;
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(&config);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += t.len() as u64;
        }
        let write_blob = |out: &mut Vec<u8>, tensors: &[Tensor]| {
            for t in tensors {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        };
        out.extend_from_slice(&offset.to_le_bytes());
        write_blob(&mut out, self.params.tensors());
        match &self.optimizer {
            None => out.push(0),
            Some(s) => {
                out.push(1);
                out.extend_from_slice(&s.step.to_le_bytes());
                write_blob(&mut out, &s.m);
                write_blob(&mut out, &s.v);
            }
        }
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
        if bytes.len() < MAGIC.len() + 4 + 8 {
            return Err(corrupt("file too short"));
        }
        if &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let (body, sum) = bytes.split_at(bytes.len() - 8);
        if fnv1a(body) != u64::from_le_bytes(sum.try_into().expect("8 bytes")) {
            return Err(corrupt("checksum mismatch (truncated or modified file)"));
        }
        let mut r = Reader { buf: body, pos: 12 };
        let config_len = r.u32()? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(config_len)?)
            .map_err(|e| corrupt(&format!("config: {e}")))?;
        let step = r.u64()?;
        let seed = r.u64()?;
        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| corrupt("parameter name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let offset = r.u64()?;
            manifest.push((name, shape, offset));
        }
        let total = r.u64()?;
        let mut expected = 0u64;
        for (name, shape, offset) in &manifest {
            if *offset != expected {
                return Err(corrupt(&format!("manifest offset of `{name}` does not match the blob layout")));
            }
            expected += shape.iter().product::<usize>() as u64;
        }
        if expected != total {
            return Err(corrupt("manifest and blob lengths differ"));
        }
        let read_blob = |r: &mut Reader<'_>| -> Result<Vec<Tensor>> {
            manifest
                .iter()
                .map(|(_, shape, _)| {
                    let n: usize = shape.iter().product();
                    let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                    Tensor::new(shape.clone(), data)
                })
                .collect()
        };
        let tensors = read_blob(&mut r)?;
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = r.u64()?;
                let m = read_blob(&mut r)?;
                let v = read_blob(&mut r)?;
                Some(AdamState { step, m, v })
            }
            _ => return Err(corrupt("bad optimizer flag")),
        };
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        let mut params = ParamStore::new();
        for ((name, _, _), t) in manifest.into_iter().zip(tensors) {
            if params.by_name(&name).is_some() {
                return Err(corrupt(&format!("duplicate parameter `{name}`")));
            }
            params.insert(name, t);
        }
        Ok(Checkpoint {
            config,
            params,
            step,
            seed,
            optimizer,
        })
    }

    /// Writes to a temporary sibling file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = Path::new(&tmp);
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()
        };
        write().map_err(|e| Error::io(tmp, e))?;
        fs::rename(tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::CorruptCheckpoint("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::small;
    use crate::model::BackboneKind;
    use crate::testing::random_tensor;

    fn bits(t: &Tensor) -> Vec<u64> {
        t.data().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn round_trip_preserves_forward_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        for kind in BackboneKind::ALL {
            let m = small(kind, 2, 3);
            let mut st = AdamState::new(m.params());
            st.step = 4;
            st.m[1] = random_tensor(m.params().tensors()[1].shape(), 9);
            let path = dir.path().join(format!("{kind}.ckpt"));
            Checkpoint::from_model(&m, 17, 5, Some(&st)).save(&path).unwrap();
            let ck = Checkpoint::load(&path).unwrap();
            assert_eq!((ck.step, ck.seed), (17, 5));
            let (loaded, opt) = ck.into_model().unwrap();
            assert_eq!(opt.unwrap(), st);
            let x = random_tensor(&[7, 4], 1);
            let labels = [Some(0), Some(1), Some(2), Some(0), None, None, None];
            assert_eq!(bits(&m.logits(&x, &labels).unwrap()), bits(&loaded.logits(&x, &labels).unwrap()));
        }
    }

    #[test]
    fn bytes_deterministic() {
        let m = small(BackboneKind::Bidirectional, 1, 4);
        let a = Checkpoint::from_model(&m, 0, 0, None).to_bytes().unwrap();
        let b = Checkpoint::from_model(&m, 0, 0, None).to_bytes().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn truncation_is_detected() {
        let m = small(BackboneKind::Attention, 1, 5);
        let bytes = Checkpoint::from_model(&m, 0, 0, None).to_bytes().unwrap();
        for cut in [3, 11, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                Checkpoint::from_bytes(&bytes[..cut]),
                Err(Error::CorruptCheckpoint(_))
            ));
        }
        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn version_mismatch_is_refused() {
        let m = small(BackboneKind::Attention, 1, 6);
        let mut bytes = Checkpoint::from_model(&m, 0, 0, None).to_bytes().unwrap();
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::CheckpointVersion { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn cross_config_load_is_refused() {
        let m = small(BackboneKind::Unidirectional, 1, 7);
        let ck = Checkpoint::from_model(&m, 0, 0, None);
        let mut cfg = m.config().clone();
        cfg.embed_dim = 16;
        let mut other = PfnModel::new(cfg).unwrap();
        assert!(matches!(ck.restore_into(&mut other), Err(Error::ConfigMismatch(_))));
    }

    #[test]
    fn manifest_is_name_sorted() {
        let m = small(BackboneKind::Bidirectional, 2, 8);
        let ck = Checkpoint::from_model(&m, 0, 0, None);
        let names = ck.params.names();
        assert!(names.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(names.len(), m.params().len());
    }
}
