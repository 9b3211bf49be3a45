//! Versioned binary parameter container: a magic header, the architectural
//! config (JSON) plus its digest, then one record per parameter tensor with
//! raw little-endian doubles. Round-trips are bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use super::{init_params, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"AESTHCKP";
const VERSION: u32 = 1;

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.write_all(MAGIC)?;
    buf.write_all(&VERSION.to_le_bytes())?;

    let config_json = serde_json::to_string(&params.config)?;
    write_bytes(&mut buf, config_json.as_bytes())?;
    write_bytes(&mut buf, params.config.arch_digest().as_bytes())?;

    let pairs = params.named_pairs();
    buf.write_all(&(pairs.len() as u32).to_le_bytes())?;
    for (name, pair) in pairs {
        write_bytes(&mut buf, name.as_bytes())?;
        let shape = pair.value.shape();
        buf.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            buf.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in pair.value.data() {
            buf.write_all(&v.to_le_bytes())?;
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = std::fs::read(path)?;
    let mut r = &bytes[..];

    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".to_string()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let config_json = read_bytes(&mut r)?;
    let config: ModelConfig = serde_json::from_slice(&config_json)
        .map_err(|e| Error::Checkpoint(format!("bad config: {e}")))?;
    config.validate()?;
    let digest = String::from_utf8_lossy(&read_bytes(&mut r)?).into_owned();
    if digest != config.arch_digest() {
        return Err(Error::Checkpoint(
            "stored digest does not match the stored config".to_string(),
        ));
    }

    // shape template for the stored config
    let mut params = init_params(&config, 0)?;
    let count = read_u32(&mut r)? as usize;
    let expected = params.named_pairs().len();
    if count != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {count} tensors, model has {expected}"
        )));
    }
    for _ in 0..count {
        let name = String::from_utf8_lossy(&read_bytes(&mut r)?).into_owned();
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let mut b = [0u8; 8];
            read_exact(&mut r, &mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        let tensor = Tensor::new(shape, data)
            .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        if !tensor.is_finite() {
            return Err(Error::Checkpoint(format!("tensor {name} has non-finite values")));
        }
        let mut found = false;
        for (pname, pair) in params.named_pairs_mut() {
            if pname == name {
                if pair.value.shape() != tensor.shape() {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name} shape {:?} does not match config-derived {:?}",
                        tensor.shape(),
                        pair.value.shape()
                    )));
                }
                pair.value = tensor.clone();
                found = true;
                break;
            }
        }
        if !found {
            return Err(Error::Checkpoint(format!("unknown tensor {name}")));
        }
    }
    params.zero_grads();
    Ok(params)
}

fn write_bytes(buf: &mut Vec<u8>, bytes: &[u8]) -> Result<()> {
    buf.write_all(&(bytes.len() as u32).to_le_bytes())?;
    buf.write_all(bytes)?;
    Ok(())
}

fn read_exact(r: &mut &[u8], out: &mut [u8]) -> Result<()> {
    r.read_exact(out)
        .map_err(|_| Error::Checkpoint("unexpected end of file".to_string()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_bytes(r: &mut &[u8]) -> Result<Vec<u8>> {
    let len = read_u32(r)? as usize;
    if r.len() < len {
        return Err(Error::Checkpoint("unexpected end of file".to_string()));
    }
    let (head, tail) = r.split_at(len);
    let out = head.to_vec();
    *r = tail;
    Ok(out)
}
