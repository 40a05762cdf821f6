//! `AKCK` checkpoints: named `f32` tensors plus the model description
//! needed to rebuild the network.
//!
//! Layout (little-endian): magic `AKCK`, version `u32 = 1`, `u32` blob
//! count, then per blob `u16` name length, UTF-8 name, `u8` rank, `rank`
//! × `u32` dims and the `f32` payload. Model settings are stored as blobs
//! under `meta.*`.

use std::fs;
use std::path::Path;

use crate::backbone::Stage;
use crate::classifier::CompactAxis;
use crate::error::{Error, Result};
use crate::harness::config::stage_list;
use crate::model::ModelConfig;
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"AKCK";
pub const VERSION: u32 = 1;
const META: &str = "meta.";

pub fn encode(store: &ParamStore<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("blob name too long: {name}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Format(format!("rank too large: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in t.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore<f32>> {
    let mut pos = 0;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes
            .get(pos..pos + n)
            .ok_or_else(|| Error::Format(format!("truncated checkpoint at byte {pos}")))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != MAGIC {
        return Err(Error::Format("not an AKCK checkpoint (bad magic)".into()));
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
    let version = u32_at(take(4)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported AKCK version {version}")));
    }
    let count = u32_at(take(4)?);
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(take(len)?)
            .map_err(|_| Error::Format("blob name is not UTF-8".into()))?
            .to_string();
        let rank = take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u32_at(take(4)?) as usize);
        }
        let numel: usize = dims.iter().product();
        let data = take(4 * numel)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| Error::Format(format!("blob `{name}`: {e}")))?;
        store.insert(name, t);
    }
    if pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok(store)
}

pub fn save(path: &Path, store: &ParamStore<f32>) -> Result<()> {
    fs::write(path, encode(store)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore<f32>> {
    decode(&fs::read(path)?)
}

/// A trained model: which stage it belongs to, its architecture and
/// weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: u8,
    pub model: ModelConfig,
    pub params: ParamStore<f32>,
}

fn put(store: &mut ParamStore<f32>, key: &str, values: &[f64]) {
    let data = values.iter().map(|&v| v as f32).collect();
    store.insert(format!("{META}{key}"), Tensor::new([values.len()], data).expect("non-empty meta"));
}

fn get(store: &ParamStore<f32>, key: &str) -> Result<Vec<f64>> {
    let t = store
        .get(&format!("{META}{key}"))
        .map_err(|_| Error::Format(format!("checkpoint lacks `{META}{key}`")))?;
    // Shortest decimal form recovers values such as 0.3 exactly.
    Ok(t.data().iter().map(|v| v.to_string().parse().expect("float")).collect())
}

fn scalar(store: &ParamStore<f32>, key: &str) -> Result<f64> {
    Ok(get(store, key)?[0])
}

impl Checkpoint {
    pub fn to_store(&self) -> ParamStore<f32> {
        let mut s = self.params.clone();
        let m = &self.model;
        let b = |v: bool| if v { 1.0 } else { 0.0 };
        put(&mut s, "stage", &[self.stage as f64]);
        put(&mut s, "classes", &[m.classes as f64]);
        put(&mut s, "clip", &[m.clip_len as f64, m.height as f64, m.width as f64]);
        let split = Stage::ALL.iter().position(|&st| st == m.split).unwrap_or(0);
        put(&mut s, "split", &[split as f64]);
        put(&mut s, "alpha", &[m.alpha]);
        put(&mut s, "tau", &[m.tau.unwrap_or(0.0)]);
        put(&mut s, "flags", &[b(m.rank), b(m.transform), b(m.concat), b(m.keep_coords)]);
        put(&mut s, "reduction", &[m.reduction as f64]);
        put(&mut s, "compact_axis", &[b(m.compact_axis == CompactAxis::Height)]);
        put(&mut s, "shift", &[m.backbone.shift_fraction]);
        let ch: Vec<f64> = m.backbone.stages.iter().map(|st| st.out_channels as f64).collect();
        let sd: Vec<f64> = m.backbone.stages.iter().map(|st| st.stride as f64).collect();
        put(&mut s, "channels", &ch);
        put(&mut s, "strides", &sd);
        s
    }

    pub fn from_store(mut store: ParamStore<f32>) -> Result<Self> {
        let stage = scalar(&store, "stage")? as u8;
        let clip = get(&store, "clip")?;
        let flags = get(&store, "flags")?;
        if clip.len() != 3 || flags.len() != 4 {
            return Err(Error::Format("malformed checkpoint metadata".into()));
        }
        let mut model = ModelConfig {
            classes: scalar(&store, "classes")? as usize,
            clip_len: clip[0] as usize,
            height: clip[1] as usize,
            width: clip[2] as usize,
            split: *Stage::ALL
                .get(scalar(&store, "split")? as usize)
                .ok_or_else(|| Error::Format("bad split index".into()))?,
            alpha: scalar(&store, "alpha")?,
            rank: flags[0] != 0.0,
            transform: flags[1] != 0.0,
            concat: flags[2] != 0.0,
            keep_coords: flags[3] != 0.0,
            reduction: scalar(&store, "reduction")? as usize,
            compact_axis: if scalar(&store, "compact_axis")? != 0.0 {
                CompactAxis::Height
            } else {
                CompactAxis::Width
            },
            ..ModelConfig::default()
        };
        let tau = scalar(&store, "tau")?;
        model.tau = (tau != 0.0).then_some(tau);
        model.backbone.shift_fraction = scalar(&store, "shift")?;
        let ch: Vec<usize> = get(&store, "channels")?.iter().map(|&v| v as usize).collect();
        let sd: Vec<usize> = get(&store, "strides")?.iter().map(|&v| v as usize).collect();
        model.backbone.stages = stage_list(&ch, &sd).map_err(|e| Error::Format(e.to_string()))?;
        let meta: Vec<String> = store.names().filter(|n| n.starts_with(META)).map(String::from).collect();
        for n in meta {
            store.remove(&n);
        }
        Ok(Self {
            stage,
            model,
            params: store,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save(path, &self.to_store())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_store(load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_round_trip() {
        let mut s = ParamStore::new();
        s.insert("a.weight", Tensor::from_fn([2, 3, 1], |i| i as f32 - 2.5));
        s.insert("b.1d", Tensor::scalar(7.0f32));
        let bytes = encode(&s).unwrap();
        assert_eq!(&bytes[..4], b"AKCK");
        assert_eq!(decode(&bytes).unwrap(), s);
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
    }

    #[test]
    fn blob_layout() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new([2], vec![1.0f32, -2.0]).unwrap());
        let bytes = encode(&s).unwrap();
        let mut expected = b"AKCK".to_vec();
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u16.to_le_bytes());
        expected.push(b'w');
        expected.push(1);
        expected.extend(2u32.to_le_bytes());
        expected.extend(1.0f32.to_le_bytes());
        expected.extend((-2.0f32).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn model_metadata_round_trip() {
        let model = ModelConfig {
            alpha: 0.3,
            tau: Some(12.5),
            rank: false,
            ..ModelConfig::default()
        };
        let ck = Checkpoint {
            stage: 2,
            model,
            params: ParamStore::new(),
        };
        assert_eq!(Checkpoint::from_store(ck.to_store()).unwrap(), ck);
    }
}
