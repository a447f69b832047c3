//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! "DFCR"  u32 version  u32 len  config text (key = value lines)
//! u64 step  u32 records
//! per record: u32 len  name  u8 dtype  u8 rank  rank x u64 extent  payload
//! ```
//!
//! Records hold every parameter, then every batch-norm buffer as
//! `name.running_mean` and `name.running_var`.

use std::collections::HashMap;
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::real::{DType, Real};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DFCR";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CorruptCheckpoint(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|_| Error::CorruptCheckpoint(format!("{what} is not UTF-8")))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl<T: Real> Model<T> {
    /// Named tensors in checkpoint order: parameters, then buffers.
    fn records(&self) -> Vec<(String, &[usize], &[T])> {
        let mut out: Vec<(String, &[usize], &[T])> = self
            .params
            .iter()
            .map(|p| (p.name.clone(), p.value.shape(), p.value.data()))
            .collect();
        for b in &self.buffers {
            out.push((format!("{}.running_mean", b.name), &[], &b.stats.mean));
            out.push((format!("{}.running_var", b.name), &[], &b.stats.var));
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut out, &self.config.to_kv());
        out.extend_from_slice(&self.step.to_le_bytes());
        let records = self.records();
        out.extend_from_slice(&(records.len() as u32).to_le_bytes());
        for (name, shape, data) in records {
            let len = [data.len()];
            let shape = if shape.is_empty() { &len[..] } else { shape };
            put_str(&mut out, &name);
            out.push(T::DTYPE as u8);
            out.push(shape.len() as u8);
            for &e in shape {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in data {
                v.write_le(&mut out);
            }
        }
        out
    }

    /// Rebuild a model from checkpoint bytes. Payloads stored in another
    /// float width are converted.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::CorruptCheckpoint("bad magic".into()));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let text = r.string("config")?;
        let config = ModelConfig::from_kv(&text)
            .map_err(|e| Error::CorruptCheckpoint(format!("config: {e}")))?;
        let mut model = Model::<T>::new(config)?;
        model.step = r.u64("step")?;
        let count = r.u32("record count")? as usize;
        let expected: HashMap<String, Vec<usize>> = model
            .records()
            .into_iter()
            .map(|(n, s, d)| (n, if s.is_empty() { vec![d.len()] } else { s.to_vec() }))
            .collect();
        if count != expected.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "{count} records, model has {}",
                expected.len()
            )));
        }
        let mut loaded: HashMap<String, Vec<T>> = HashMap::new();
        for _ in 0..count {
            let name = r.string("record name")?;
            let dtype = DType::from_tag(r.u8("dtype")?)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("{name}: unknown dtype")))?;
            let rank = r.u8("rank")? as usize;
            let shape = (0..rank)
                .map(|_| r.u64("extent").map(|e| e as usize))
                .collect::<Result<Vec<_>>>()?;
            let want = expected
                .get(&name)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("unexpected record {name:?}")))?;
            if &shape != want {
                return Err(Error::CheckpointShape {
                    name,
                    found: shape,
                    expected: want.clone(),
                });
            }
            let n: usize = shape.iter().product();
            let payload = r.take(n * dtype.size(), &name)?;
            let values = match dtype {
                DType::F32 => payload.chunks(4).map(|c| T::c(f32::read_le(c) as f64)).collect(),
                DType::F64 => payload.chunks(8).map(|c| T::c(f64::read_le(c))).collect(),
            };
            if loaded.insert(name.clone(), values).is_some() {
                return Err(Error::CorruptCheckpoint(format!("duplicate record {name:?}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        let mut take = |name: &str| {
            loaded
                .remove(name)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("missing record {name:?}")))
        };
        for p in &mut model.params {
            p.value.data_mut().copy_from_slice(&take(&p.name)?);
        }
        for b in &mut model.buffers {
            b.stats.mean = take(&format!("{}.running_mean", b.name))?;
            b.stats.var = take(&format!("{}.running_var", b.name))?;
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use crate::tensor::Tensor;

    fn trained_like() -> Model<f32> {
        let mut m = Model::<f32>::new(ModelConfig::tiny()).unwrap();
        for (i, p) in m.params_mut().iter_mut().enumerate() {
            for (j, v) in p.value.data_mut().iter_mut().enumerate() {
                *v += (i * 31 + j) as f32 * 1e-3;
            }
        }
        let img = Tensor::full(&m.input_shape(2), 0.25f32);
        m.logits(&img, Mode::Train).unwrap();
        m.set_step(17);
        m
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let m = trained_like();
        let bytes = m.to_bytes();
        let back = Model::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.buffers(), m.buffers());
        assert_eq!(back.step(), 17);
        assert_eq!(back.config(), m.config());
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn widens_f32_payloads() {
        let m = trained_like();
        let wide = Model::<f64>::from_bytes(&m.to_bytes()).unwrap();
        for (a, b) in m.params().iter().zip(wide.params()) {
            assert!(a.value.data().iter().zip(b.value.data()).all(|(x, y)| *x as f64 == *y));
        }
    }

    #[test]
    fn distinct_errors() {
        let bytes = trained_like().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Model::<f32>::from_bytes(&bad), Err(Error::CorruptCheckpoint(_))));
        let mut bad = bytes.clone();
        bad[4..8].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(
            Model::<f32>::from_bytes(&bad),
            Err(Error::CheckpointVersion { found: 9, expected: 1 })
        ));
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                Model::<f32>::from_bytes(&bytes[..cut]),
                Err(Error::CorruptCheckpoint(_))
            ));
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(Model::<f32>::from_bytes(&long), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn shape_mismatch_names_the_parameter() {
        let bytes = trained_like().to_bytes();
        // First record is conv1.weight [2,1,3,3]; bump its leading extent.
        let cfg_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let rec = 12 + cfg_len + 8 + 4;
        let name_len = u32::from_le_bytes(bytes[rec..rec + 4].try_into().unwrap()) as usize;
        assert_eq!(&bytes[rec + 4..rec + 4 + name_len], b"conv1.weight");
        let ext = rec + 4 + name_len + 2;
        let mut bad = bytes.clone();
        bad[ext..ext + 8].copy_from_slice(&5u64.to_le_bytes());
        match Model::<f32>::from_bytes(&bad) {
            Err(Error::CheckpointShape { name, found, expected }) => {
                assert_eq!(name, "conv1.weight");
                assert_eq!(found, vec![5, 1, 3, 3]);
                assert_eq!(expected, vec![2, 1, 3, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/model.ckpt");
        let m = trained_like();
        m.save(&path).unwrap();
        assert_eq!(Model::<f32>::load(&path).unwrap().params(), m.params());
    }
}
