//! Checkpoint files: magic "SMCK", version, the canonical config text, the
//! training cursor (step + base seed + vocabulary hash), then every named
//! array — parameters and optimizer moments — as rank/extents/f64-LE payload.

use super::config_file;
use super::{OptimizerState, TrainConfig, TrainError};
use crate::model::Parameters;
use crate::remi::Vocabulary;
use crate::tensor::Tensor;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"SMCK";
const VERSION: u32 = 1;

pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: Parameters,
    pub opt: OptimizerState,
    pub step: u64,
    pub vocab_hash: u64,
}

pub fn save_checkpoint(
    path: &Path,
    config: &TrainConfig,
    params: &Parameters,
    opt: &OptimizerState,
    step: u64,
) -> Result<(), TrainError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());

    let text = config_file::to_text(config);
    buf.extend_from_slice(&(text.len() as u64).to_le_bytes());
    buf.extend_from_slice(text.as_bytes());

    buf.extend_from_slice(&step.to_le_bytes());
    buf.extend_from_slice(&config.seed.to_le_bytes());
    buf.extend_from_slice(&opt.step.to_le_bytes());
    let vocab_hash = Vocabulary::new(config.vocab).config_hash();
    buf.extend_from_slice(&vocab_hash.to_le_bytes());

    let count = params.len() * 3;
    buf.extend_from_slice(&(count as u32).to_le_bytes());
    for (i, (name, tensor)) in params.iter().enumerate() {
        write_array(&mut buf, name, tensor);
        write_array(&mut buf, &format!("adam_m.{name}"), &opt.m[i]);
        write_array(&mut buf, &format!("adam_v.{name}"), &opt.v[i]);
    }

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };

    if r.take(4)? != MAGIC {
        return Err(TrainError::CheckpointFormat("bad magic (expected SMCK)".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(TrainError::CheckpointVersion(version));
    }
    let text_len = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
    let text = std::str::from_utf8(r.take(text_len)?)
        .map_err(|_| TrainError::CheckpointFormat("config block is not UTF-8".into()))?
        .to_string();
    let config = config_file::parse_config(&text)?;

    let step = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
    let seed = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
    let opt_step = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
    let vocab_hash = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
    if seed != config.seed {
        return Err(TrainError::CheckpointFormat("seed field disagrees with config block".into()));
    }
    let expected_hash = Vocabulary::new(config.vocab).config_hash();
    if vocab_hash != expected_hash {
        return Err(TrainError::VocabHashMismatch { expected: expected_hash, found: vocab_hash });
    }

    let count = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
    let mut arrays = std::collections::HashMap::new();
    for _ in 0..count {
        let (name, tensor) = read_array(&mut r)?;
        arrays.insert(name, tensor);
    }

    // reassemble in schema order, verifying shapes
    let schema = config.model.param_schema();
    let mut entries = Vec::with_capacity(schema.len());
    let mut m = Vec::with_capacity(schema.len());
    let mut v = Vec::with_capacity(schema.len());
    for (name, shape) in &schema {
        let take = |key: String| {
            arrays
                .get(&key)
                .cloned()
                .ok_or_else(|| TrainError::CheckpointFormat(format!("missing array {key}")))
        };
        let p = take(name.clone())?;
        if p.shape() != shape.as_slice() {
            return Err(TrainError::CheckpointFormat(format!(
                "array {name} has shape {:?}, schema wants {shape:?}",
                p.shape()
            )));
        }
        entries.push((name.clone(), p));
        m.push(take(format!("adam_m.{name}"))?);
        v.push(take(format!("adam_v.{name}"))?);
    }

    Ok(Checkpoint {
        config,
        params: Parameters::from_entries(entries),
        opt: OptimizerState { m, v, step: opt_step },
        step,
        vocab_hash,
    })
}

fn write_array(buf: &mut Vec<u8>, name: &str, tensor: &Tensor) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(tensor.shape().len() as u8);
    for &e in tensor.shape() {
        buf.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in tensor.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        if self.pos + n > self.bytes.len() {
            return Err(TrainError::CheckpointFormat("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

fn read_array(r: &mut Reader) -> Result<(String, Tensor), TrainError> {
    let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
    let name = std::str::from_utf8(r.take(name_len)?)
        .map_err(|_| TrainError::CheckpointFormat("array name is not UTF-8".into()))?
        .to_string();
    let rank = r.take(1)?[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    let raw = r.take(numel * 8)?;
    for chunk in raw.chunks_exact(8) {
        data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    Ok((name, Tensor::new(shape, data)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_parameters;

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.smck");
        let mut cfg = TrainConfig::desk();
        cfg.model.seq_len = 16;
        cfg.model.n_blocks = 1;
        let params = init_parameters(&cfg.model, 5).unwrap();
        let mut opt = OptimizerState::new(&params);
        opt.step = 12;
        for t in &mut opt.m {
            for v in t.data_mut() {
                *v = 0.125;
            }
        }
        save_checkpoint(&path, &cfg, &params, &opt, 34).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.step, 34);
        assert_eq!(ck.opt.step, 12);
        assert_eq!(ck.config, cfg);
        for ((na, ta), (nb, tb)) in params.iter().zip(ck.params.iter()) {
            assert_eq!(na, nb);
            // bitwise equality
            for (x, y) in ta.data().iter().zip(tb.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{na}");
            }
        }
        assert_eq!(ck.opt.m[0].data()[0], 0.125);
    }

    #[test]
    fn version_tamper_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.smck");
        let mut cfg = TrainConfig::desk();
        cfg.model.seq_len = 16;
        cfg.model.n_blocks = 1;
        let params = init_parameters(&cfg.model, 5).unwrap();
        let opt = OptimizerState::new(&params);
        save_checkpoint(&path, &cfg, &params, &opt, 0).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 3;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(TrainError::CheckpointVersion(3))
        ));
    }
}
