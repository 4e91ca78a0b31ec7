//! Binary checkpoint format.
//!
//! Layout: magic `APAM`, format version u16, record count u32, then per
//! record: name (u32 length + UTF-8 bytes), dtype tag u8, rank u8, dims
//! (u64 each), raw little-endian values. Round-trips bit-exactly.
//!
//! Model configuration scalars travel as `__cfg.*` records so a checkpoint
//! is self-describing.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{ApamError, Result};
use crate::real::{Dtype, Real};
use crate::tensor::Tensor;
use crate::textmodel::{EncoderParams, ModelConfig, Vocab};

const MAGIC: &[u8; 4] = b"APAM";
const VERSION: u16 = 1;

fn cfg_records(cfg: &ModelConfig) -> Vec<(String, f64)> {
    vec![
        ("__cfg.hash_buckets".into(), cfg.vocab.hash_buckets as f64),
        ("__cfg.lowercase".into(), if cfg.vocab.lowercase { 1.0 } else { 0.0 }),
        ("__cfg.embed_dim".into(), cfg.embed_dim as f64),
        ("__cfg.fc1_dim".into(), cfg.fc1_dim as f64),
        ("__cfg.fc2_dim".into(), cfg.fc2_dim as f64),
        ("__cfg.num_classes".into(), cfg.num_classes as f64),
        ("__cfg.dropout_p".into(), cfg.dropout_p),
    ]
}

fn cfg_from_records(records: &BTreeMap<String, Tensor<f64>>) -> Result<ModelConfig> {
    let get = |name: &str| -> Result<f64> {
        records
            .get(name)
            .map(|t| t.item())
            .ok_or_else(|| ApamError::Ingest(format!("checkpoint missing record {name}")))
    };
    Ok(ModelConfig {
        vocab: Vocab {
            hash_buckets: get("__cfg.hash_buckets")? as usize,
            lowercase: get("__cfg.lowercase")? != 0.0,
        },
        embed_dim: get("__cfg.embed_dim")? as usize,
        fc1_dim: get("__cfg.fc1_dim")? as usize,
        fc2_dim: get("__cfg.fc2_dim")? as usize,
        num_classes: get("__cfg.num_classes")? as usize,
        dropout_p: get("__cfg.dropout_p")?,
    })
}

fn write_record<W: Write, F: Real>(w: &mut W, name: &str, t: &Tensor<F>) -> Result<()> {
    w.write_u32::<LittleEndian>(name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    w.write_u8(F::DTYPE as u8)?;
    w.write_u8(t.rank() as u8)?;
    for &d in t.shape() {
        w.write_u64::<LittleEndian>(d as u64)?;
    }
    match F::DTYPE {
        Dtype::F32 => {
            for x in t.data() {
                w.write_f32::<LittleEndian>(x.as_f64() as f32)?;
            }
        }
        Dtype::F64 => {
            for x in t.data() {
                w.write_f64::<LittleEndian>(x.as_f64())?;
            }
        }
    }
    Ok(())
}

fn read_record<R: Read>(r: &mut R) -> Result<(String, Tensor<f64>)> {
    let name_len = r.read_u32::<LittleEndian>()? as usize;
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name)
        .map_err(|e| ApamError::Ingest(format!("bad record name: {e}")))?;
    let dtype = Dtype::from_tag(r.read_u8()?)
        .ok_or_else(|| ApamError::Ingest("unknown dtype tag".into()))?;
    let rank = r.read_u8()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.read_u64::<LittleEndian>()? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    match dtype {
        Dtype::F32 => {
            for _ in 0..numel {
                data.push(r.read_f32::<LittleEndian>()? as f64);
            }
        }
        Dtype::F64 => {
            for _ in 0..numel {
                data.push(r.read_f64::<LittleEndian>()?);
            }
        }
    }
    Ok((name, Tensor::new(data, shape)?))
}

pub fn save<F: Real>(params: &EncoderParams<F>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u16::<LittleEndian>(VERSION)?;
    let cfg = cfg_records(&params.cfg);
    w.write_u32::<LittleEndian>((cfg.len() + params.arrays().len()) as u32)?;
    // config scalars are always f64 so they survive any array dtype
    for (name, v) in &cfg {
        write_record(&mut w, name, &Tensor::<f64>::scalar(*v))?;
    }
    for (name, t) in params.arrays() {
        write_record(&mut w, name, t)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load<F: Real>(path: &Path) -> Result<EncoderParams<F>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ApamError::Ingest(format!(
            "not a checkpoint file: bad magic {magic:?}"
        )));
    }
    let version = r.read_u16::<LittleEndian>()?;
    if version != VERSION {
        return Err(ApamError::Ingest(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = r.read_u32::<LittleEndian>()? as usize;
    let mut cfg_recs: BTreeMap<String, Tensor<f64>> = BTreeMap::new();
    let mut arrays: BTreeMap<String, Tensor<F>> = BTreeMap::new();
    for _ in 0..count {
        let (name, t) = read_record(&mut r)?;
        if name.starts_with("__cfg.") {
            cfg_recs.insert(name, t);
        } else {
            // f32 → f64 → f32 is exact, so round-trips stay bitwise
            arrays.insert(name, t.cast());
        }
    }
    let cfg = cfg_from_records(&cfg_recs)?;
    Ok(EncoderParams::from_arrays(cfg, arrays))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ModelConfig {
            vocab: Vocab {
                hash_buckets: 32,
                lowercase: true,
            },
            embed_dim: 4,
            fc1_dim: 6,
            fc2_dim: 5,
            num_classes: 3,
            dropout_p: 0.1,
        };
        let params = EncoderParams::<f32>::init(cfg, 42);
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.apam");
        save(&params, &path).unwrap();
        let loaded = load::<f32>(&path).unwrap();
        assert_eq!(params, loaded);

        // a second save of the loaded params is byte-identical
        let path2 = dir.path().join("model2.apam");
        save(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("junk.apam");
        std::fs::write(&path, b"NOPE0000").unwrap();
        assert!(load::<f32>(&path).is_err());
    }

    #[test]
    fn headless_checkpoint_round_trips() {
        let params = EncoderParams::<f64>::init_encoder(
            ModelConfig {
                vocab: Vocab {
                    hash_buckets: 16,
                    lowercase: false,
                },
                embed_dim: 4,
                fc1_dim: 4,
                fc2_dim: 4,
                num_classes: 2,
                dropout_p: 0.0,
            },
            7,
        );
        let dir = tempdir().unwrap();
        let path = dir.path().join("enc.apam");
        save(&params, &path).unwrap();
        let loaded = load::<f64>(&path).unwrap();
        assert_eq!(params, loaded);
        assert!(!loaded.has_head());
    }
}
