//! `UNCK` checkpoint files.
//!
//! Layout (little-endian): magic `UNCK`, version `u32 = 1`, config text
//! (`u32` length + UTF-8 `key = value` lines), epoch `u32`, validation loss
//! `f64`, tensor count `u32`, then per tensor: name length `u32`, name,
//! rank `u32`, dims `u32 × rank`, payload `f32 × numel`.

use std::path::Path;

use voxelfill_tensor::Tensor;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::unet::{UNetConfig, UNetParams};

const MAGIC: &[u8; 4] = b"UNCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Settings the parameters were trained under.
    pub config: KeyValues,
    pub epoch: usize,
    pub val_loss: f64,
    pub params: UNetParams,
}

impl Checkpoint {
    pub fn unet_config(&self) -> Result<UNetConfig> {
        UNetConfig::from_kv(&self.config)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn checkpoint_to_bytes(c: &Checkpoint) -> Result<Vec<u8>> {
    if !c.val_loss.is_finite() {
        return Err(Error::Format(format!(
            "validation loss {} is not finite",
            c.val_loss
        )));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = c.config.to_string();
    put_u32(&mut out, text.len())?;
    out.extend_from_slice(text.as_bytes());
    put_u32(&mut out, c.epoch)?;
    out.extend_from_slice(&c.val_loss.to_le_bytes());
    put_u32(&mut out, c.params.len())?;
    for (name, t) in c.params.names().iter().zip(c.params.tensors()) {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "truncated checkpoint: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn text(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format("text is not UTF-8".into()))
    }
}

/// Decodes a checkpoint and checks its tensors against the stored config.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let config = KeyValues::parse(&r.text()?)?;
    let epoch = r.u32()?;
    let val_loss = r.f64()?;
    let count = r.u32()?;
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for _ in 0..count {
        names.push(r.text()?);
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
        let data = r
            .take(numel)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        tensors.push(Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let c = Checkpoint {
        config,
        epoch,
        val_loss,
        params: UNetParams::from_parts(names, tensors)?,
    };
    c.params.check_against(&c.unet_config()?)?;
    Ok(c)
}

pub fn save_checkpoint(path: impl AsRef<Path>, c: &Checkpoint) -> Result<()> {
    Ok(std::fs::write(path, checkpoint_to_bytes(c)?)?)
}

/// Loads a checkpoint; with `expected`, also requires its tensors to match
/// that architecture.
pub fn load_checkpoint(
    path: impl AsRef<Path>,
    expected: Option<&UNetConfig>,
) -> Result<Checkpoint> {
    let c = checkpoint_from_bytes(&std::fs::read(path)?)?;
    if let Some(cfg) = expected {
        c.params.check_against(cfg)?;
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unet::build_unet;

    fn sample(cfg: &UNetConfig) -> Checkpoint {
        let mut params = build_unet(cfg, 4).unwrap();
        for t in params.tensors_mut() {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
        Checkpoint {
            config: cfg.to_kv(),
            epoch: 17,
            val_loss: 0.125,
            params,
        }
    }

    #[test]
    fn roundtrip_is_exact() {
        let c = sample(&UNetConfig::tiny(2, 2));
        let bytes = checkpoint_to_bytes(&c).unwrap();
        let back = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(checkpoint_to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn truncation_and_magic() {
        let bytes = checkpoint_to_bytes(&sample(&UNetConfig::tiny(1, 1))).unwrap();
        for cut in [0, 3, 9, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(checkpoint_from_bytes(&bytes[..cut]), Err(Error::Format(_))),
                "{cut}"
            );
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(checkpoint_from_bytes(&bad), Err(Error::Format(_))));
        let mut bad = bytes;
        bad[4] = 2;
        assert!(matches!(checkpoint_from_bytes(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn architecture_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        save_checkpoint(&path, &sample(&UNetConfig::tiny(2, 1))).unwrap();
        assert!(load_checkpoint(&path, Some(&UNetConfig::tiny(2, 1))).is_ok());
        assert!(matches!(
            load_checkpoint(&path, Some(&UNetConfig::tiny(3, 1))),
            Err(Error::CorruptCheckpoint(_))
        ));
    }
}
