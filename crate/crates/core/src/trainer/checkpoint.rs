//! Binary checkpoint format.
//!
//! ```text
//! magic    b"MCSE"
//! version  u32 LE
//! count    u32 LE
//! count x record:
//!   name_len u16 LE, name (UTF-8)
//!   rank     u8
//!   dims     rank x u32 LE
//!   payload  prod(dims) x f64 LE
//! ```
//!
//! Record `config.encoder` carries the encoder hyperparameters as a rank-1
//! f64 vector; every other record is a weight, prefixed `online.` or
//! `target.`.

use std::path::Path;

use crate::encoder::{BranchParams, EncoderConfig, Param};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MCSE";
pub const VERSION: u32 = 1;
const CONFIG_RECORD: &str = "config.encoder";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: EncoderConfig,
    pub online: BranchParams,
    pub target: BranchParams,
}

fn config_values(c: &EncoderConfig) -> Vec<f64> {
    vec![
        c.vocab_size as f64,
        c.max_seq_len as f64,
        c.model_dim as f64,
        c.num_blocks as f64,
        c.num_heads as f64,
        c.ff_dim as f64,
        c.proj_layers as f64,
        c.pred_layers as f64,
        c.pred_dim as f64,
        c.dropout_prob,
    ]
}

fn config_from_values(v: &[f64]) -> Result<EncoderConfig> {
    let [vocab, seq, dim, blocks, heads, ff, proj, pred, pred_dim, dropout] = v[..] else {
        return Err(Error::Format(format!("{CONFIG_RECORD} has {} values, expected 10", v.len())));
    };
    let int = |x: f64| -> Result<usize> {
        if x >= 0.0 && x.fract() == 0.0 {
            Ok(x as usize)
        } else {
            Err(Error::Format(format!("{CONFIG_RECORD}: {x} is not a count")))
        }
    };
    Ok(EncoderConfig {
        vocab_size: int(vocab)?,
        max_seq_len: int(seq)?,
        model_dim: int(dim)?,
        num_blocks: int(blocks)?,
        num_heads: int(heads)?,
        ff_dim: int(ff)?,
        proj_layers: int(proj)?,
        pred_layers: int(pred)?,
        pred_dim: int(pred_dim)?,
        dropout_prob: dropout,
    })
}

fn put_record(out: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f64]) -> Result<()> {
    let name_len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name too long: {name}")))?;
    let rank = u8::try_from(shape.len()).map_err(|_| Error::Format(format!("rank too high: {name}")))?;
    out.extend_from_slice(&name_len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(rank);
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension too large: {name}")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = 1 + self.online.params().len() + self.target.params().len();
        out.extend_from_slice(&(count as u32).to_le_bytes());
        let cfg = config_values(&self.config);
        put_record(&mut out, CONFIG_RECORD, &[cfg.len()], &cfg)?;
        for (prefix, branch) in [("online.", &self.online), ("target.", &self.target)] {
            for p in branch.params() {
                put_record(&mut out, &format!("{prefix}{}", p.name), &p.shape, &p.values)?;
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut config = None;
        let mut online = Vec::new();
        let mut target = Vec::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("record name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let n: usize = shape.iter().product();
            let values: Vec<f64> = r
                .take(n.checked_mul(8).ok_or_else(|| Error::Format("payload overflow".into()))?)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if name == CONFIG_RECORD {
                config = Some(config_from_values(&values)?);
            } else if let Some(n) = name.strip_prefix("online.") {
                online.push(Param { name: n.to_string(), shape, values });
            } else if let Some(n) = name.strip_prefix("target.") {
                target.push(Param { name: n.to_string(), shape, values });
            } else {
                return Err(Error::Format(format!("unknown record {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let config = config.ok_or_else(|| Error::Format(format!("missing {CONFIG_RECORD}")))?;
        let online = BranchParams::from_named(&config, true, online)?;
        let target = BranchParams::from_named(&config, false, target)?;
        Ok(Self { config, online, target })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
