//! Checkpoint container: a flat binary file recording the config digest,
//! the optimizer step counter, and every named parameter array. Loading
//! against a model built from a different config digest is an error.

use std::collections::HashMap;
use std::io::{Read as _, Write as _};
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Result, X2Error};
use crate::model::SegModel;

const MAGIC: &[u8; 8] = b"X2SEGCKP";
const VERSION: u32 = 1;

#[derive(Debug)]
pub struct Checkpoint {
    pub digest: String,
    pub step: usize,
    pub params: HashMap<String, Tensor>,
}

fn io_err(path: &Path, e: std::io::Error) -> X2Error {
    X2Error::Data(format!("checkpoint {}: {e}", path.display()))
}

fn malformed(path: &Path, what: &str) -> X2Error {
    X2Error::Data(format!("checkpoint {}: malformed {what}", path.display()))
}

pub fn save(path: &Path, digest: &str, step: usize, model: &SegModel) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_err(path, e))?;
    }
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let d = digest.as_bytes();
    buf.extend_from_slice(&(d.len() as u32).to_le_bytes());
    buf.extend_from_slice(d);
    buf.extend_from_slice(&(step as u64).to_le_bytes());
    let named = model.named_vars("");
    buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, var) in named {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        buf.extend_from_slice(nb);
        let t = var.as_tensor();
        let dims = t.dims();
        buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for &d in dims {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        let data = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
        for x in data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| io_err(path, e))?;
    f.write_all(&buf).map_err(|e| io_err(path, e))?;
    f.sync_all().map_err(|e| io_err(path, e))?;
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))?;
    Ok(())
}

pub fn load(path: &Path, device: &Device) -> Result<Checkpoint> {
    let mut f = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(|e| io_err(path, e))?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > buf.len() {
            return Err(malformed(path, "truncation"));
        }
        let s = &buf[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let u32_at = |pos: &mut usize| -> Result<u32> {
        Ok(u32::from_le_bytes(take(pos, 4)?.try_into().expect("4 bytes")))
    };
    let u64_at = |pos: &mut usize| -> Result<u64> {
        Ok(u64::from_le_bytes(take(pos, 8)?.try_into().expect("8 bytes")))
    };
    if take(&mut pos, 8)? != MAGIC {
        return Err(malformed(path, "magic"));
    }
    let version = u32_at(&mut pos)?;
    if version != VERSION {
        return Err(X2Error::Data(format!(
            "checkpoint {}: version {version}, expected {VERSION}",
            path.display()
        )));
    }
    let dlen = u32_at(&mut pos)? as usize;
    let digest = String::from_utf8(take(&mut pos, dlen)?.to_vec())
        .map_err(|_| malformed(path, "digest"))?;
    let step = u64_at(&mut pos)? as usize;
    let count = u32_at(&mut pos)? as usize;
    let mut params = HashMap::with_capacity(count);
    for _ in 0..count {
        let nlen = u32_at(&mut pos)? as usize;
        let name = String::from_utf8(take(&mut pos, nlen)?.to_vec())
            .map_err(|_| malformed(path, "name"))?;
        let ndims = u32_at(&mut pos)? as usize;
        let mut dims = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            dims.push(u64_at(&mut pos)? as usize);
        }
        let n: usize = dims.iter().product();
        let raw = take(&mut pos, n * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        params.insert(name, Tensor::from_vec(data, dims, device)?);
    }
    if pos != buf.len() {
        return Err(malformed(path, "trailing bytes"));
    }
    Ok(Checkpoint { digest, step, params })
}

/// Copy checkpointed arrays into the model, enforcing digest equality and
/// an exact name census. `prefix` restricts restoration to a subset (for
/// the decoder-only warm start).
pub fn restore(model: &SegModel, ckpt: &Checkpoint, expected_digest: &str, prefix: &str) -> Result<()> {
    if ckpt.digest != expected_digest {
        return Err(X2Error::Config {
            key: "checkpoint.digest".into(),
            msg: format!("checkpoint digest {} does not match config digest {expected_digest}", ckpt.digest),
        });
    }
    let named = model.named_vars(prefix);
    for (name, var) in &named {
        let t = ckpt
            .params
            .get(name)
            .ok_or_else(|| X2Error::Data(format!("checkpoint missing parameter {name}")))?;
        if t.dims() != var.as_tensor().dims() {
            return Err(X2Error::Shape(format!(
                "checkpoint parameter {name}: {:?} vs model {:?}",
                t.dims(),
                var.as_tensor().dims()
            )));
        }
        var.set(&t.to_dtype(var.as_tensor().dtype())?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use candle_core::DType;

    fn tmpdir(tag: &str) -> std::path::PathBuf {
        let d = std::env::temp_dir().join(format!("x2seg_ckpt_{tag}_{}", std::process::id()));
        std::fs::create_dir_all(&d).unwrap();
        d
    }

    #[test]
    fn save_load_round_trip_restores_outputs() {
        let dev = Device::Cpu;
        let m = SegModel::new(ModelConfig::default(), DType::F32, &dev, 3).unwrap();
        let dir = tmpdir("rt");
        let path = dir.join("step_0.bin");
        save(&path, "digest-a", 42, &m).unwrap();
        let ckpt = load(&path, &dev).unwrap();
        assert_eq!(ckpt.step, 42);
        assert_eq!(ckpt.digest, "digest-a");
        let frames = Tensor::zeros((1, 3, 64, 64), DType::F32, &dev).unwrap();
        let before = m.decode_clip(&frames, &[]).unwrap()[0]
            .mask_logits
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        let m2 = SegModel::new(ModelConfig::default(), DType::F32, &dev, 99).unwrap();
        restore(&m2, &ckpt, "digest-a", "").unwrap();
        let after = m2.decode_clip(&frames, &[]).unwrap()[0]
            .mask_logits
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        assert_eq!(before, after);
        std::fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn digest_mismatch_is_an_error() {
        let dev = Device::Cpu;
        let m = SegModel::new(ModelConfig::default(), DType::F32, &dev, 0).unwrap();
        let dir = tmpdir("dg");
        let path = dir.join("c.bin");
        save(&path, "digest-a", 0, &m).unwrap();
        let ckpt = load(&path, &dev).unwrap();
        let err = restore(&m, &ckpt, "digest-b", "").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        std::fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn prefix_restore_touches_only_that_subset() {
        let dev = Device::Cpu;
        let src = SegModel::new(ModelConfig::default(), DType::F32, &dev, 1).unwrap();
        let dir = tmpdir("px");
        let path = dir.join("c.bin");
        save(&path, "d", 0, &src).unwrap();
        let ckpt = load(&path, &dev).unwrap();
        let dst = SegModel::new(ModelConfig::default(), DType::F32, &dev, 2).unwrap();
        let menc_before = dst.param_digest("menc.").unwrap();
        restore(&dst, &ckpt, "d", "dec.").unwrap();
        assert_eq!(dst.param_digest("dec.").unwrap(), src.param_digest("dec.").unwrap());
        assert_eq!(dst.param_digest("menc.").unwrap(), menc_before);
        std::fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn corrupt_files_are_data_errors() {
        let dir = tmpdir("bad");
        let path = dir.join("bad.bin");
        std::fs::write(&path, b"NOTACKPT").unwrap();
        let err = load(&path, &Device::Cpu).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        std::fs::remove_dir_all(dir).ok();
    }
}
