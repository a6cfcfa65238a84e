//! Model checkpoints.
//!
//! Binary layout, all integers and floats little-endian:
//!
//! ```text
//! magic           8 bytes   "MDIFFCKP"
//! version         u32       1
//! vocab           u32
//! seq_len         u32
//! hidden          u32
//! blocks          u32
//! time_steps      u32       0 = no time embedding
//! fusion          u8        0 none, 1 concat, 2 add
//! schedule        u8        0 linear, 1 log-linear
//! steps           u32       T of the training schedule
//! tokens          u64       training tokens consumed
//! tensor_count    u32
//! per tensor:     name_len u16, name (UTF-8), rows u32, cols u32, rows·cols f64
//! has_optimizer   u8
//! if 1:           step u64, then per tensor its first moment, then per
//!                 tensor its second moment, each rows·cols f64
//! ```
//!
//! Nothing follows. `save` also writes `<path>.manifest`, a `key=value`
//! summary for humans; `load` ignores it.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use maskdiff_core::denoiser::{DenoiserConfig, DenoiserParams, FusionMode};
use maskdiff_core::diffusion::ScheduleKind;
use maskdiff_core::gradcore::Tensor;
use maskdiff_core::trainer::AdamState;
use maskdiff_core::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MDIFFCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: DenoiserParams,
    pub schedule: ScheduleKind,
    pub steps: usize,
    pub opt: Option<AdamState>,
    pub tokens: u64,
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::Io(io::Error::new(io::ErrorKind::InvalidData, msg.into()))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| invalid(format!("checkpoint truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| invalid("tensor too large"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn tensor_like(&mut self, shape: (usize, usize)) -> Result<Tensor> {
        let data = self.f64s(shape.0 * shape.1)?;
        Tensor::from_vec(shape.0, shape.1, data)
    }
}

fn put_f64s(out: &mut Vec<u8>, t: &Tensor) {
    for v in t.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn new(params: DenoiserParams, schedule: ScheduleKind, steps: usize) -> Self {
        Self {
            params,
            schedule,
            steps,
            opt: None,
            tokens: 0,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.params.config;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for v in [c.vocab, c.seq_len, c.hidden, c.blocks, c.time_steps.unwrap_or(0)] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.push(match self.params.fusion() {
            None => 0,
            Some(FusionMode::Concat) => 1,
            Some(FusionMode::Add) => 2,
        });
        out.push(match self.schedule {
            ScheduleKind::Linear => 0,
            ScheduleKind::LogLinear => 1,
        });
        out.extend_from_slice(&(self.steps as u32).to_le_bytes());
        out.extend_from_slice(&self.tokens.to_le_bytes());
        let named = self.params.named();
        out.extend_from_slice(&(named.len() as u32).to_le_bytes());
        for (name, t) in &named {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
            put_f64s(&mut out, t);
        }
        match &self.opt {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                out.extend_from_slice(&opt.step.to_le_bytes());
                for t in opt.first.iter().chain(&opt.second) {
                    put_f64s(&mut out, t);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).ok() != Some(&MAGIC[..]) {
            return Err(invalid("not a maskdiff checkpoint"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let config = DenoiserConfig {
            vocab: dims[0],
            seq_len: dims[1],
            hidden: dims[2],
            blocks: dims[3],
            time_steps: (dims[4] > 0).then_some(dims[4]),
        };
        let fusion = match r.u8()? {
            0 => None,
            1 => Some(FusionMode::Concat),
            2 => Some(FusionMode::Add),
            other => return Err(invalid(format!("unknown fusion code {other}"))),
        };
        let schedule = match r.u8()? {
            0 => ScheduleKind::Linear,
            1 => ScheduleKind::LogLinear,
            other => return Err(invalid(format!("unknown schedule code {other}"))),
        };
        let steps = r.u32()? as usize;
        let tokens = r.u64()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| invalid("tensor name is not UTF-8"))?;
            let shape = (r.u32()? as usize, r.u32()? as usize);
            tensors.push((name, r.tensor_like(shape)?));
        }
        let shapes: Vec<(usize, usize)> = tensors.iter().map(|(_, t)| t.shape()).collect();
        let params = DenoiserParams::from_named(config, fusion, tensors)?;
        let opt = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let first = shapes.iter().map(|&s| r.tensor_like(s)).collect::<Result<_>>()?;
                let second = shapes.iter().map(|&s| r.tensor_like(s)).collect::<Result<_>>()?;
                Some(AdamState { first, second, step })
            }
            other => return Err(invalid(format!("bad optimizer flag {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(invalid(format!(
                "{} unexpected bytes after checkpoint",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            params,
            schedule,
            steps,
            opt,
            tokens,
        })
    }

    pub fn manifest(&self) -> String {
        let c = &self.params.config;
        let mut out = format!(
            "format_version={FORMAT_VERSION}\nvocab={}\nseq_len={}\nhidden={}\nblocks={}\n\
             time_steps={}\nfusion={}\nschedule={:?}\nsteps={}\ntokens={}\noptimizer={}\n",
            c.vocab,
            c.seq_len,
            c.hidden,
            c.blocks,
            c.time_steps.map_or("none".into(), |t| t.to_string()),
            self.params
                .fusion()
                .map_or("none".into(), |f| format!("{f:?}").to_lowercase()),
            self.schedule,
            self.steps,
            self.tokens,
            self.opt.as_ref().map_or("none".into(), |o| format!("adam step {}", o.step)),
        );
        for (name, t) in self.params.named() {
            out.push_str(&format!("tensor.{name}={}x{}\n", t.rows(), t.cols()));
        }
        out
    }

    pub fn manifest_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".manifest");
        PathBuf::from(s)
    }

    /// Writes to a temporary file first so an interrupted save leaves the
    /// previous checkpoint intact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = PathBuf::from(tmp);
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        fs::write(Self::manifest_path(path), self.manifest())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
