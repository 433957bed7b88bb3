//! Binary model checkpoints.
//!
//! Layout (little-endian): magic `ADBM`, `u32` version, `u32`-length-prefixed
//! architecture descriptor, schedule `(u32 N, f64 beta_start, f64 beta_end)`
//! (all zero for models without a schedule), a `u32` tensor count and that
//! many tensors (`u32` rank, `u32` dims, `f64` data), the EMA block in the
//! same form, then `u64` step counter and `u64` rng digest.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::{Architecture, Mlp, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ADBM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScheduleParams {
    pub num_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleParams {
    pub fn of(sched: &NoiseSchedule) -> Self {
        ScheduleParams {
            num_steps: sched.num_steps(),
            beta_start: sched.beta_start(),
            beta_end: sched.beta_end(),
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.num_steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub architecture: Architecture,
    pub schedule: Option<ScheduleParams>,
    pub params: Vec<Tensor>,
    /// Either empty or shaped like `params`.
    pub ema: Vec<Tensor>,
    pub step: u64,
    pub rng_digest: u64,
}

impl Checkpoint {
    /// Checkpoint whose parameter and EMA blocks both hold `net`.
    pub fn of_model(net: &Mlp, schedule: Option<&NoiseSchedule>, step: u64, rng_digest: u64) -> Self {
        Checkpoint {
            architecture: net.architecture().clone(),
            schedule: schedule.map(ScheduleParams::of),
            params: net.params().to_vec(),
            ema: net.params().to_vec(),
            step,
            rng_digest,
        }
    }

    /// The EMA weights if present, otherwise the raw parameters.
    pub fn model(&self) -> Result<Mlp> {
        let block = if self.ema.is_empty() { &self.params } else { &self.ema };
        Mlp::from_params(self.architecture.clone(), block.clone())
    }

    pub fn raw_model(&self) -> Result<Mlp> {
        Mlp::from_params(self.architecture.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let desc = self.architecture.descriptor();
        out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
        out.extend_from_slice(desc.as_bytes());
        let s = self.schedule.unwrap_or(ScheduleParams {
            num_steps: 0,
            beta_start: 0.0,
            beta_end: 0.0,
        });
        out.extend_from_slice(&(s.num_steps as u32).to_le_bytes());
        out.extend_from_slice(&s.beta_start.to_le_bytes());
        out.extend_from_slice(&s.beta_end.to_le_bytes());
        for block in [&self.params, &self.ema] {
            out.extend_from_slice(&(block.len() as u32).to_le_bytes());
            for t in block.iter() {
                out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
                for &d in t.shape() {
                    out.extend_from_slice(&(d as u32).to_le_bytes());
                }
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng_digest.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("four bytes");
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: magic,
            });
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let len = r.u32("descriptor length")? as usize;
        let desc = std::str::from_utf8(r.take(len, "descriptor")?)
            .map_err(|_| Error::Malformed("descriptor is not UTF-8".into()))?;
        let architecture = Architecture::parse(desc)?;
        let num_steps = r.u32("schedule")? as usize;
        let beta_start = r.f64("schedule")?;
        let beta_end = r.f64("schedule")?;
        let schedule = (num_steps > 0).then_some(ScheduleParams {
            num_steps,
            beta_start,
            beta_end,
        });
        let params = r.tensors("parameter block")?;
        let ema = r.tensors("ema block")?;
        let step = r.u64("step counter")?;
        let rng_digest = r.u64("rng digest")?;
        if r.pos != bytes.len() {
            return Err(Error::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let ckpt = Checkpoint {
            architecture,
            schedule,
            params,
            ema,
            step,
            rng_digest,
        };
        ckpt.check_shapes()?;
        Ok(ckpt)
    }

    fn check_shapes(&self) -> Result<()> {
        let expected = self.architecture.param_shapes();
        for block in [&self.params, &self.ema] {
            if block.is_empty() && std::ptr::eq(block, &self.ema) {
                continue;
            }
            let found: Vec<Vec<usize>> = block.iter().map(|t| t.shape().to_vec()).collect();
            if found != expected {
                return Err(Error::ArchitectureMismatch {
                    expected: format!("{} {:?}", self.architecture.descriptor(), expected),
                    found: format!("{found:?}"),
                });
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Loads and insists on a particular architecture.
    pub fn load_expecting(path: &Path, expected: &Architecture) -> Result<Self> {
        let ckpt = Self::load(path)?;
        if &ckpt.architecture != expected {
            return Err(Error::ArchitectureMismatch {
                expected: expected.descriptor(),
                found: ckpt.architecture.descriptor(),
            });
        }
        Ok(ckpt)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Malformed(format!("file truncated in {what} at byte {}", self.pos))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("eight bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("eight bytes")))
    }

    fn tensors(&mut self, what: &str) -> Result<Vec<Tensor>> {
        let count = self.u32(what)? as usize;
        let mut out = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let rank = self.u32(what)? as usize;
            if rank > 8 {
                return Err(Error::Malformed(format!("tensor rank {rank} in {what}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(self.u32(what)? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Malformed("tensor too large".into()))?, what)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes"))).collect();
            out.push(Tensor::new(shape, data).map_err(|e| Error::Malformed(format!("{what}: {e}")))?);
        }
        Ok(out)
    }
}
