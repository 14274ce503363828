//! Binary checkpoint files: little-endian, magic "I2PK", format version,
//! then named f32 tensors. Optimizer state rides along as `<name>.m1`,
//! `<name>.m2` and `<name>.step` entries; run configuration is stored as a
//! JSON blob under `__meta.config_json` (one byte per f32 value).

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::params::ParamStore;
use super::tensor::TensorData;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"I2PK";
const FORMAT_VERSION: u32 = 1;
const META_KEY: &str = "__meta.config_json";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub tensors: Vec<(String, TensorData<f32>)>,
    pub meta_json: String,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&TensorData<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies parameter data and optimizer state into an already-built
    /// store. Every store parameter must be present with a matching shape,
    /// and no parameter tensors may be left over.
    pub fn apply_to(&self, store: &mut ParamStore<f32>) -> Result<()> {
        let mut used = vec![false; self.tensors.len()];
        let mut lookup = std::collections::HashMap::new();
        for (i, (name, _)) in self.tensors.iter().enumerate() {
            lookup.insert(name.as_str(), i);
        }
        let n = store.len();
        for pid in 0..n {
            let (name, shape) = {
                let p = store.get(pid);
                (p.name.clone(), p.shape.clone())
            };
            let idx = *lookup
                .get(name.as_str())
                .ok_or_else(|| Error::nn(format!("checkpoint missing parameter {name}")))?;
            let t = &self.tensors[idx].1;
            if t.shape != shape {
                return Err(Error::nn(format!(
                    "checkpoint parameter {name}: shape {:?} != expected {:?}",
                    t.shape, shape
                )));
            }
            used[idx] = true;
            let p = store.get_mut(pid);
            p.data.copy_from_slice(&t.data);
            for (suffix, dst) in [(".m1", 0), (".m2", 1)] {
                let key = format!("{name}{suffix}");
                let idx = *lookup
                    .get(key.as_str())
                    .ok_or_else(|| Error::nn(format!("checkpoint missing {key}")))?;
                used[idx] = true;
                let t = &self.tensors[idx].1;
                if t.data.len() != p.data.len() {
                    return Err(Error::nn(format!("checkpoint {key}: length mismatch")));
                }
                match dst {
                    0 => p.m1.copy_from_slice(&t.data),
                    _ => p.m2.copy_from_slice(&t.data),
                }
            }
            let key = format!("{name}.step");
            let idx = *lookup
                .get(key.as_str())
                .ok_or_else(|| Error::nn(format!("checkpoint missing {key}")))?;
            used[idx] = true;
            p.step = self.tensors[idx].1.data[0] as u64;
        }
        if let Some(i) = used.iter().position(|&u| !u) {
            return Err(Error::nn(format!(
                "checkpoint tensor {} does not match any model parameter",
                self.tensors[i].0
            )));
        }
        Ok(())
    }
}

fn push_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_checkpoint(store: &ParamStore<f32>, meta_json: &str, path: &Path) -> Result<()> {
    let mut body = Vec::new();
    let mut count: u32 = 0;
    for (_, p) in store.iter() {
        push_tensor(&mut body, &p.name, &p.shape, &p.data);
        push_tensor(&mut body, &format!("{}.m1", p.name), &p.shape, &p.m1);
        push_tensor(&mut body, &format!("{}.m2", p.name), &p.shape, &p.m2);
        push_tensor(&mut body, &format!("{}.step", p.name), &[1], &[p.step as f32]);
        count += 4;
    }
    let meta: Vec<f32> = meta_json.bytes().map(|b| b as f32).collect();
    push_tensor(&mut body, META_KEY, &[meta.len()], &meta);
    count += 1;

    let mut out = Vec::with_capacity(body.len() + 12);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&body);

    let mut f = std::fs::File::create(path).map_err(|e| Error::io("nn_core", path, e))?;
    f.write_all(&out).map_err(|e| Error::io("nn_core", path, e))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::nn("checkpoint truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io("nn_core", path, e))?;
    let mut r = Reader { buf: &bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::nn(format!("{}: bad checkpoint magic", path.display())));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::nn(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()?;
    let mut tensors = Vec::with_capacity(count as usize);
    let mut meta_json = String::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::nn("checkpoint tensor name is not UTF-8"))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4)?;
        let data: Vec<f32> =
            raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        if name == META_KEY {
            meta_json = data.iter().map(|&v| v as u8 as char).collect();
        } else {
            tensors.push((name, TensorData::new(shape, data)));
        }
    }
    Ok(Checkpoint { tensors, meta_json })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::AdamwConfig;
    use crate::nn::GradMap;

    fn demo_store() -> ParamStore<f32> {
        let mut store = ParamStore::new();
        store.add("a.weight", vec![2, 3], vec![0.5, -1.25, 3.0, 0.125, -0.75, 2.5]);
        store.add("a.bias", vec![3], vec![0.1, 0.2, 0.3]);
        store
    }

    #[test]
    fn round_trip_is_bit_exact_including_optimizer_state() {
        let mut store = demo_store();
        // put nontrivial optimizer state in place
        let mut gm = GradMap::zeros(store.len());
        gm.add_to(0, &[0.3, -0.2, 0.7, 0.0, 1.0, -1.0]);
        gm.add_to(1, &[0.01, 0.02, 0.03]);
        store.accumulate(&gm);
        store.adamw_step(&AdamwConfig::default()).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&store, "{\"k\":1}", &p1).unwrap();

        let ck = load_checkpoint(&p1).unwrap();
        assert_eq!(ck.meta_json, "{\"k\":1}");
        let mut store2 = demo_store();
        ck.apply_to(&mut store2).unwrap();
        save_checkpoint(&store2, &ck.meta_json, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(store2.get(0).step, 1);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let store = demo_store();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        save_checkpoint(&store, "", &p).unwrap();
        let ck = load_checkpoint(&p).unwrap();
        let mut other: ParamStore<f32> = ParamStore::new();
        other.add("a.weight", vec![3, 2], vec![0.0; 6]);
        other.add("a.bias", vec![3], vec![0.0; 3]);
        let err = ck.apply_to(&mut other).unwrap_err();
        assert!(err.to_string().contains("shape"), "{err}");
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ckpt");
        std::fs::write(&p, b"NOPE....").unwrap();
        assert!(load_checkpoint(&p).is_err());
    }
}
