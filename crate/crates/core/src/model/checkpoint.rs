//! Binary checkpoint: `"LGCF"`, u32 version, u32-prefixed config text, then
//! one record per parameter (u32 name length, name, u8 dtype tag, u32 rank,
//! u32 dims, little-endian values) until end of file.

use std::path::Path;

use crate::binio::{len_u32, put_u32, read_file, write_file, Reader};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::tensor::{Precision, Tensor};

use super::config::ModelConfig;
use super::network::Model;

pub const MAGIC: &[u8; 4] = b"LGCF";
pub const VERSION: u32 = 1;

/// Best validation result seen during training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BestRecord {
    pub epoch: usize,
    pub val_oa: f64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub best: Option<BestRecord>,
    pub precision: Precision,
}

pub fn encode(model: &Model, precision: Precision, best: Option<BestRecord>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    let mut text = model.config.to_text();
    if let Some(b) = best {
        text.push_str(&format!("best_epoch = {}\nbest_val_oa = {:?}\n", b.epoch, b.val_oa));
    }
    put_u32(&mut out, len_u32(text.len(), "config length")?);
    out.extend_from_slice(text.as_bytes());
    for p in model.params.iter() {
        put_u32(&mut out, len_u32(p.name.len(), "name length")?);
        out.extend_from_slice(p.name.as_bytes());
        out.push(precision.tag());
        put_u32(&mut out, len_u32(p.value.rank(), "rank")?);
        for &d in p.value.shape() {
            put_u32(&mut out, len_u32(d, "dimension")?);
        }
        match precision {
            Precision::F32 => p
                .value
                .data()
                .iter()
                .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
            Precision::F64 => p
                .value
                .data()
                .iter()
                .for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes, path);
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.fail(format!("unsupported checkpoint version {version}")));
    }
    let n = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(n)?).map_err(|_| r.fail("config text is not UTF-8"))?;
    let mut kv = KvMap::parse(text).map_err(|e| Error::format(path, e.to_string()))?;
    let best_epoch: Option<usize> = kv.get("best_epoch")?;
    let best_oa: Option<f64> = kv.get("best_val_oa")?;
    let config = ModelConfig::from_kv(&mut kv)?;
    kv.finish()?;
    let best = match (best_epoch, best_oa) {
        (Some(epoch), Some(val_oa)) => Some(BestRecord { epoch, val_oa }),
        (None, None) => None,
        _ => return Err(r.fail("best_epoch and best_val_oa must appear together")),
    };

    let mut model = Model::build(&config)?;
    let mut seen = vec![false; model.params.len()];
    let mut precision = None;
    while !r.at_end() {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.fail("parameter name is not UTF-8"))?;
        let tag = r.u8()?;
        let dtype = Precision::from_tag(tag).ok_or_else(|| r.fail(format!("unknown dtype tag {tag}")))?;
        precision.get_or_insert(dtype);
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count = shape.iter().product();
        let data = match dtype {
            Precision::F32 => r.f32s(count)?,
            Precision::F64 => r.f64s(count)?,
        };
        let id = model
            .params
            .find(&name)
            .ok_or_else(|| r.fail(format!("parameter {name:?} does not exist in the configured model")))?;
        let slot = &mut seen[id.index()];
        if std::mem::replace(slot, true) {
            return Err(r.fail(format!("parameter {name:?} appears twice")));
        }
        let expected = model.params.value(id).shape().to_vec();
        if shape != expected {
            return Err(r.fail(format!("parameter {name:?} has shape {shape:?}, expected {expected:?}")));
        }
        *model.params.value_mut(id) = Tensor::new(&shape, data)?;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        let name = &model.params.iter().nth(i).unwrap().name;
        return Err(r.fail(format!("parameter {name:?} is missing")));
    }
    Ok(Checkpoint {
        model,
        best,
        precision: precision.unwrap_or_default(),
    })
}

pub fn save(path: &Path, model: &Model, precision: Precision, best: Option<BestRecord>) -> Result<()> {
    write_file(path, &encode(model, precision, best)?)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&read_file(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn perturbed() -> Model {
        let mut m = Model::build(&ModelConfig::toy(3, 1, 3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for p in m.params.iter_mut() {
            p.value = Tensor::randn(p.value.shape(), &mut rng);
        }
        m
    }

    #[test]
    fn f64_round_trip_is_bit_exact() {
        let m = perturbed();
        let best = Some(BestRecord {
            epoch: 3,
            val_oa: 0.1 + 0.2,
        });
        let bytes = encode(&m, Precision::F64, best).unwrap();
        assert_eq!(&bytes[..4], b"LGCF");
        let ck = decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(ck.best, best);
        assert_eq!(ck.precision, Precision::F64);
        for (a, b) in m.params.iter().zip(ck.model.params.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
        assert_eq!(encode(&ck.model, Precision::F64, best).unwrap(), bytes);
    }

    #[test]
    fn f32_storage_rounds_values() {
        let m = perturbed();
        let ck = decode(&encode(&m, Precision::F32, None).unwrap(), Path::new("mem")).unwrap();
        assert_eq!(ck.precision, Precision::F32);
        for (a, b) in m.params.iter().zip(ck.model.params.iter()) {
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert_eq!(*y, *x as f32 as f64);
            }
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let m = perturbed();
        let bytes = encode(&m, Precision::F64, None).unwrap();
        let p = Path::new("mem");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad, p).is_err());
        assert!(decode(&bytes[..bytes.len() - 3], p).is_err());
        // drop the last record entirely
        let last = m.params.iter().last().unwrap();
        let rec = 4 + last.name.len() + 1 + 4 + 4 * last.value.rank() + 8 * last.value.len();
        let err = decode(&bytes[..bytes.len() - rec], p).unwrap_err().to_string();
        assert!(err.contains("missing"), "{err}");
    }
}
