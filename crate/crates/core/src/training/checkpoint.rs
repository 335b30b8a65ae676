//! Binary checkpoints.
//!
//! ```text
//! "FSRNNCKP"  u32 version  u64 header_len  header (TOML)
//! u32 count, then per tensor: name, u32 ndim, u64 dims, f64 values   parameters
//! u64 adam_t, then m and v tensors in parameter order                optimizer
//! 2 × (u64 seed, u64 stream, u128 word_pos)                           dropout, zoneout
//! u32 count, carried state tensors                                    model state
//! ```
//!
//! Integers and floats are little-endian. Values are stored as f64, which
//! holds f32 runs exactly, so loading and continuing is bit-identical.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::{ArchitectureSpec, ModelParams, ModelState};
use crate::cells::{LstmState, Noise};
use crate::data::{SplitRule, Vocab};
use crate::error::{Error, Result};
use crate::rng::{Rng, RngState};
use crate::tensor::{Scalar, Tensor};

use super::optim::{Adam, LrSchedule};
use super::trainer::{Progress, TrainConfig, Trainer};

pub const MAGIC: &[u8; 8] = b"FSRNNCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub spec: ArchitectureSpec,
    pub train: TrainConfig,
    pub progress: Progress,
    pub schedule: LrSchedule,
    #[serde(default)]
    pub vocab: Option<Vocab>,
    #[serde(default)]
    pub split: Option<SplitRule>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ModelParams<f64>,
    pub adam: Adam<f64>,
    pub rng: [RngState; 2],
    pub state: ModelState<f64>,
}

impl Checkpoint {
    pub fn from_trainer<T: Scalar>(t: &Trainer<T>, vocab: Option<Vocab>, split: Option<SplitRule>) -> Self {
        let to64 = |v: &Vec<Vec<T>>| -> Vec<Vec<f64>> {
            v.iter().map(|x| x.iter().map(|y| y.as_f64()).collect()).collect()
        };
        Self {
            header: CheckpointHeader {
                spec: t.params.spec.clone(),
                train: t.config.clone(),
                progress: t.progress.clone(),
                schedule: t.schedule.clone(),
                vocab,
                split,
            },
            params: t.params.cast(),
            adam: Adam {
                config: t.adam.config,
                t: t.adam.t,
                m: to64(&t.adam.m),
                v: to64(&t.adam.v),
            },
            rng: [t.noise.dropout.state(), t.noise.zoneout.state()],
            state: t.state.cast(),
        }
    }

    /// A checkpoint holding `params` alone, with fresh optimizer state.
    pub fn from_params<T: Scalar>(params: &ModelParams<T>, train: TrainConfig, vocab: Option<Vocab>) -> Self {
        Self::from_trainer(&Trainer::with_params(params.clone(), train), vocab, None)
    }

    pub fn into_trainer<T: Scalar>(self) -> Result<Trainer<T>> {
        let restore = |s: RngState| {
            Rng::restore(s).ok_or_else(|| Error::Checkpoint(format!("unknown RNG stream {}", s.stream)))
        };
        let noise = Noise {
            dropout: restore(self.rng[0])?,
            zoneout: restore(self.rng[1])?,
        };
        let from64 = |v: Vec<Vec<f64>>| -> Vec<Vec<T>> {
            v.into_iter().map(|x| x.into_iter().map(T::of).collect()).collect()
        };
        let params = self.params.cast::<T>();
        Ok(Trainer {
            adam: Adam {
                config: self.adam.config,
                t: self.adam.t,
                m: from64(self.adam.m),
                v: from64(self.adam.v),
            },
            schedule: self.header.schedule,
            noise,
            state: self.state.cast(),
            progress: self.header.progress,
            best: None,
            config: self.header.train,
            params,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = toml::to_string(&self.header)
            .map_err(|e| Error::Checkpoint(format!("header does not serialize: {e}")))?;
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.u64(header.len() as u64);
        w.0.extend_from_slice(header.as_bytes());

        let tensors = self.params.tensors();
        w.u32(tensors.len() as u32);
        for (name, t) in &tensors {
            w.tensor(name, t.shape(), t.data());
        }
        w.u64(self.adam.t);
        for (prefix, moments) in [("adam.m.", &self.adam.m), ("adam.v.", &self.adam.v)] {
            for ((name, t), m) in tensors.iter().zip(moments) {
                w.tensor(&format!("{prefix}{name}"), t.shape(), m);
            }
        }
        for s in &self.rng {
            w.u64(s.seed);
            w.u64(s.stream);
            w.0.extend_from_slice(&s.word_pos.to_le_bytes());
        }
        w.u32(2 * self.state.cells.len() as u32);
        for (i, s) in self.state.cells.iter().enumerate() {
            w.tensor(&format!("state{i}.h"), s.h.shape(), s.h.data());
            w.tensor(&format!("state{i}.c"), s.c.shape(), s.c.data());
        }
        Ok(w.0)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let len = r.u64()? as usize;
        let header = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("header is not UTF-8: {e}")))?;
        let header: CheckpointHeader =
            toml::from_str(header).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        header.spec.validate()?;

        let mut params = ModelParams::<f64>::init(&header.spec, 0)?;
        let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
        let count = r.u32()? as usize;
        if count != names.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {count}",
                names.len()
            )));
        }
        let mut sizes = Vec::with_capacity(count);
        for (name, slot) in names.iter().zip(params.tensors_mut()) {
            let t = r.tensor(name)?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            sizes.push(t.len());
            *slot = t;
        }
        let adam_t = r.u64()?;
        let mut moments = [Vec::new(), Vec::new()];
        for (prefix, out) in ["adam.m.", "adam.v."].iter().zip(&mut moments) {
            for (name, &n) in names.iter().zip(&sizes) {
                let t = r.tensor(&format!("{prefix}{name}"))?;
                if t.len() != n {
                    return Err(Error::Checkpoint(format!("{prefix}{name} has the wrong size")));
                }
                out.push(t.into_data());
            }
        }
        let mut rng = [RngState { seed: 0, stream: 0, word_pos: 0 }; 2];
        for s in &mut rng {
            s.seed = r.u64()?;
            s.stream = r.u64()?;
            s.word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        }
        let n = r.u32()? as usize;
        if n != 2 * header.spec.state_widths().len() {
            return Err(Error::Checkpoint(format!("unexpected state tensor count {n}")));
        }
        let mut cells = Vec::new();
        for i in 0..n / 2 {
            let h = r.tensor(&format!("state{i}.h"))?;
            let c = r.tensor(&format!("state{i}.c"))?;
            cells.push(LstmState { h, c });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after checkpoint".into()));
        }
        let [m, v] = moments;
        Ok(Self {
            adam: Adam {
                config: header.train.adam,
                t: adam_t,
                m,
                v,
            },
            header,
            params,
            rng,
            state: ModelState { cells },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, x: u32) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn u64(&mut self, x: u64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn tensor(&mut self, name: &str, shape: &[usize], data: &[f64]) {
        self.u32(name.len() as u32);
        self.0.extend_from_slice(name.as_bytes());
        self.u32(shape.len() as u32);
        for &d in shape {
            self.u64(d as u64);
        }
        for &x in data {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("checkpoint is truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn tensor(&mut self, expected: &str) -> Result<Tensor<f64>> {
        let len = self.u32()? as usize;
        let name = self.take(len)?;
        if name != expected.as_bytes() {
            return Err(Error::Checkpoint(format!(
                "expected tensor {expected}, found {}",
                String::from_utf8_lossy(name)
            )));
        }
        let ndim = self.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("{expected}: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::RegularizerConfig;
    use crate::data::batch_windows;
    use crate::training::optim::{AdamConfig, ScheduleKind};
    use crate::training::trainer::Precision;

    fn trainer() -> Trainer<f64> {
        let spec = ArchitectureSpec::fast_slow(2, 5, 4, 7, 3).with_regularization(RegularizerConfig {
            dropout_keep: 0.8,
            zoneout_cell: 0.3,
            zoneout_hidden: 0.1,
            training: true,
        });
        let config = TrainConfig {
            batch: 2,
            window: 4,
            epochs: 2,
            lr: 0.01,
            schedule: ScheduleKind::PlateauDiv10,
            adam: AdamConfig::default(),
            clip_norm: 1.0,
            seed: 9,
            precision: Precision::F64,
            valid_batch: Some(1),
            log_every: 0,
            checkpoint_every: 0,
        };
        Trainer::new(&spec, config).unwrap()
    }

    #[test]
    fn roundtrip_is_exact() {
        let mut t = trainer();
        let toks: Vec<usize> = (0..100).map(|i| (i * 3 + 1) % 7).collect();
        let s = batch_windows(&toks, 2, 4).unwrap();
        t.train_window(&s.window(0)).unwrap();
        let ckpt = Checkpoint::from_trainer(&t, None, None);
        let back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ckpt);

        let mut u: Trainer<f64> = back.into_trainer().unwrap();
        for w in 1..5 {
            let a = t.train_window(&s.window(w)).unwrap();
            let b = u.train_window(&s.window(w)).unwrap();
            assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        }
        assert_eq!(t.params, u.params);
    }

    #[test]
    fn corrupt_files_rejected() {
        let bytes = Checkpoint::from_trainer(&trainer(), None, None).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[8] = 7;
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }
}
