//! Binary checkpoint container.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! magic "BAMNETCK" | version | d | vocab count | vocab sizes... |
//! meta length | meta (UTF-8 JSON) | record count |
//! records: name length | name | rank | extents... | f32 values...
//! ```
//!
//! Batch-norm running statistics travel as ordinary records under the
//! `__bn__.` prefix; optimizer moments under `__adam__.`.

use std::io::{Read, Write};
use std::path::Path;

use super::array::Tensor;
use super::optim::AdamState;
use super::params::ParamStore;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"BAMNETCK";
pub const VERSION: u32 = 1;
pub const ADAM_PREFIX: &str = "__adam__";

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointHeader {
    pub d: u32,
    pub vocab_sizes: Vec<u32>,
    /// Free-form model description (hyperparameters), JSON.
    pub meta: String,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub records: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(
        header: CheckpointHeader,
        store: &ParamStore,
        adam: Option<&AdamState>,
    ) -> Self {
        let mut records: Vec<(String, Tensor)> = store
            .iter()
            .map(|(name, t)| (name.to_string(), t.value.clone()))
            .collect();
        if let Some(adam) = adam {
            for (name, id) in store.iter_ids() {
                if let Some(Some(m)) = adam.m.get(id.0) {
                    records.push((format!("{ADAM_PREFIX}.m.{name}"), m.clone()));
                }
                if let Some(Some(v)) = adam.v.get(id.0) {
                    records.push((format!("{ADAM_PREFIX}.v.{name}"), v.clone()));
                }
            }
            records.push((format!("{ADAM_PREFIX}.step"), Tensor::scalar(adam.t as f64)));
            records.push((format!("{ADAM_PREFIX}.lr"), Tensor::scalar(adam.lr)));
        }
        Checkpoint { header, records }
    }

    /// Copy every store-named record into `store`, checking shapes. Every
    /// tensor in the store must be present.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        let mut seen = 0;
        for (name, t) in &self.records {
            if name.starts_with(ADAM_PREFIX) {
                continue;
            }
            let id = store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{name}`")))?;
            store.set_value(id, t.clone())?;
            seen += 1;
        }
        if seen != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {seen} of {} model tensors",
                store.len()
            )));
        }
        Ok(())
    }

    /// Optimizer state, when the checkpoint carries one.
    pub fn adam_state(&self, store: &ParamStore) -> Option<AdamState> {
        let step = self.get(&format!("{ADAM_PREFIX}.step"))?;
        let lr = self.get(&format!("{ADAM_PREFIX}.lr"))?;
        let mut adam = AdamState::new(lr.data()[0]);
        adam.t = step.data()[0] as u64;
        adam.m = vec![None; store.len()];
        adam.v = vec![None; store.len()];
        for (name, id) in store.iter_ids() {
            adam.m[id.0] = self.get(&format!("{ADAM_PREFIX}.m.{name}")).cloned();
            adam.v[id.0] = self.get(&format!("{ADAM_PREFIX}.v.{name}")).cloned();
        }
        Some(adam)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let u32le = |w: &mut dyn Write, v: usize| -> Result<()> {
            let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} exceeds u32")))?;
            w.write_all(&v.to_le_bytes())?;
            Ok(())
        };
        w.write_all(MAGIC)?;
        u32le(w, VERSION as usize)?;
        u32le(w, self.header.d as usize)?;
        u32le(w, self.header.vocab_sizes.len())?;
        for v in &self.header.vocab_sizes {
            u32le(w, *v as usize)?;
        }
        u32le(w, self.header.meta.len())?;
        w.write_all(self.header.meta.as_bytes())?;
        u32le(w, self.records.len())?;
        for (name, t) in &self.records {
            u32le(w, name.len())?;
            w.write_all(name.as_bytes())?;
            u32le(w, t.rank())?;
            for e in t.shape() {
                u32le(w, *e)?;
            }
            let mut buf = Vec::with_capacity(t.numel() * 4);
            for v in t.data() {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        fn u32le(r: &mut dyn Read) -> Result<usize> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)
                .map_err(|e| Error::Checkpoint(format!("truncated: {e}")))?;
            Ok(u32::from_le_bytes(b) as usize)
        }
        fn string(r: &mut dyn Read, len: usize) -> Result<String> {
            let mut b = vec![0u8; len];
            r.read_exact(&mut b)
                .map_err(|e| Error::Checkpoint(format!("truncated: {e}")))?;
            String::from_utf8(b).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
        }
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("missing header".into()))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad format tag".into()));
        }
        let version = u32le(r)?;
        if version != VERSION as usize {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let d = u32le(r)? as u32;
        let nv = u32le(r)?;
        let vocab_sizes = (0..nv)
            .map(|_| u32le(r).map(|v| v as u32))
            .collect::<Result<_>>()?;
        let ml = u32le(r)?;
        let meta = string(r, ml)?;
        let nrec = u32le(r)?;
        let mut records = Vec::with_capacity(nrec);
        for _ in 0..nrec {
            let nl = u32le(r)?;
            let name = string(r, nl)?;
            let rank = u32le(r)?;
            let shape = (0..rank).map(|_| u32le(r)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let mut buf = vec![0u8; numel * 4];
            r.read_exact(&mut buf)
                .map_err(|e| Error::Checkpoint(format!("truncated tensor `{name}`: {e}")))?;
            let data = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            records.push((name, Tensor::new(shape, data)?));
        }
        Ok(Checkpoint {
            header: CheckpointHeader {
                d,
                vocab_sizes,
                meta,
            },
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_f32_values_and_adam() {
        let mut store = ParamStore::new(3);
        store.add_uniform("b.w", &[2, 3], 1.0).unwrap();
        store
            .add_buffer("__bn__.x.running_mean", Tensor::row(&[0.25, 0.5]))
            .unwrap();
        let id = store.add("a.bias", Tensor::row(&[1.5])).unwrap();
        store.accumulate_grad(id, &Tensor::row(&[0.3])).unwrap();
        store.zero_grad();
        let mut adam = AdamState::new(0.01);
        adam.step(&mut store).unwrap();

        let header = CheckpointHeader {
            d: 4,
            vocab_sizes: vec![10, 3],
            meta: "{}".into(),
        };
        let ck = Checkpoint::from_store(header.clone(), &store, Some(&adam));
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..8], MAGIC);

        let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.header, header);
        let mut fresh = ParamStore::new(99);
        fresh.add_uniform("b.w", &[2, 3], 1.0).unwrap();
        fresh
            .add_buffer("__bn__.x.running_mean", Tensor::zeros(&[1, 2]))
            .unwrap();
        fresh.add("a.bias", Tensor::row(&[0.0])).unwrap();
        back.load_into(&mut fresh).unwrap();
        for (name, t) in store.iter() {
            let f = fresh.by_name(name).unwrap();
            for (a, b) in t.value.data().iter().zip(f.value.data()) {
                assert_eq!(*a as f32, *b as f32);
            }
        }
        let adam2 = back.adam_state(&fresh).unwrap();
        assert_eq!(adam2.t, 1);
    }

    #[test]
    fn shape_mismatch_and_bad_magic_are_rejected() {
        let mut store = ParamStore::new(0);
        store.add("w", Tensor::zeros(&[2, 2])).unwrap();
        let ck = Checkpoint::from_store(
            CheckpointHeader {
                d: 2,
                vocab_sizes: vec![],
                meta: String::new(),
            },
            &store,
            None,
        );
        let mut other = ParamStore::new(0);
        other.add("w", Tensor::zeros(&[3, 2])).unwrap();
        assert!(ck.load_into(&mut other).is_err());
        assert!(Checkpoint::read_from(&mut &b"NOTACKPT...."[..]).is_err());
    }
}
