//! Checkpoint file (little-endian): `"THCK" | version u32 | config hash [8] |
//! config text | input shape | classes | freeze state | epoch, iteration, seed,
//! freeze_version | tensor records (name, rank, dims u64, f32 payload)`.

use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};
use thaw_core::nn::Model;
use thaw_core::plasticity::{FreezeState, Stage};
use thaw_core::Tensor;

use crate::TrainError;

pub const MAGIC: &[u8; 4] = b"THCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 8],
    /// Config the run was started from, so the architecture can be rebuilt.
    pub config_text: String,
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub freeze: FreezeState,
    pub epoch: u32,
    pub iteration: u64,
    pub seed: u64,
    pub freeze_version: u32,
    /// Parameters and batchnorm running statistics by name.
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    /// Copies every named tensor of `model`.
    pub fn tensors_of(model: &Model<f32>) -> Vec<(String, Tensor<f32>)> {
        model
            .named_state()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect()
    }

    /// Loads the weights into `model` and restores its freeze prefix. Every
    /// model tensor must be present with the same shape.
    pub fn restore_into(&self, model: &mut Model<f32>) -> Result<(), TrainError> {
        let names: Vec<String> = model.named_state().into_iter().map(|(n, _)| n).collect();
        if names.len() != self.tensors.len() {
            return Err(TrainError::Checkpoint(format!(
                "model has {} tensors, checkpoint has {}",
                names.len(),
                self.tensors.len()
            )));
        }
        for name in &names {
            let t = self
                .tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| TrainError::Checkpoint(format!("checkpoint lacks tensor {name}")))?;
            model
                .set_named_state(name, t.clone())
                .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        }
        model
            .set_frontmost_active(self.freeze.frontmost_active)
            .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let w = &mut out;
        w.extend_from_slice(MAGIC);
        put_u32(w, VERSION);
        w.extend_from_slice(&self.config_hash);
        put_str(w, &self.config_text);
        put_dims(w, &self.input_shape);
        put_u32(w, self.classes as u32);
        let f = &self.freeze;
        put_u32(w, f.frontmost_active as u32);
        put_u32(w, f.stale_counter as u32);
        w.push(match f.stage {
            Stage::Bootstrapping => 0,
            Stage::KnowledgeGuided => 1,
        });
        put_u32(w, f.window as u32);
        put_opt_f64(w, f.lr_at_frontmost_freeze);
        put_opt_f64(w, f.last_loss);
        put_u32(w, self.epoch);
        w.write_u64::<LittleEndian>(self.iteration)
            .expect("vec write");
        w.write_u64::<LittleEndian>(self.seed).expect("vec write");
        put_u32(w, self.freeze_version);
        put_u32(w, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_str(w, name);
            put_dims(w, t.shape());
            let start = w.len();
            w.resize(start + t.len() * 4, 0);
            LittleEndian::write_f32_into(t.data(), &mut w[start..]);
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self, TrainError> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(r.fail(0, "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.fail(4, format!("unsupported version {version}")));
        }
        let mut config_hash = [0u8; 8];
        config_hash.copy_from_slice(r.take(8)?);
        let config_text = r.string()?;
        let input_shape = r.dims()?;
        let classes = r.u32()? as usize;
        let frontmost_active = r.u32()? as usize;
        let stale_counter = r.u32()? as usize;
        let at = r.pos;
        let stage = match r.take(1)?[0] {
            0 => Stage::Bootstrapping,
            1 => Stage::KnowledgeGuided,
            s => return Err(r.fail(at, format!("bad stage {s}"))),
        };
        let window = r.u32()? as usize;
        let lr_at_frontmost_freeze = r.opt_f64()?;
        let last_loss = r.opt_f64()?;
        let epoch = r.u32()?;
        let iteration = r.u64()?;
        let seed = r.u64()?;
        let freeze_version = r.u32()?;
        let count = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = r.string()?;
            let shape = r.dims()?;
            let n: usize = shape.iter().product();
            let bytes = r.take(
                n.checked_mul(4)
                    .ok_or_else(|| r.fail(r.pos, "tensor too large"))?,
            )?;
            let mut data = vec![0f32; n];
            LittleEndian::read_f32_into(bytes, &mut data);
            let t = Tensor::new(shape, data).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
            tensors.push((name, t));
        }
        if r.pos != buf.len() {
            return Err(r.fail(r.pos, "trailing bytes"));
        }
        Ok(Checkpoint {
            config_hash,
            config_text,
            input_shape,
            classes,
            freeze: FreezeState {
                frontmost_active,
                stale_counter,
                stage,
                lr_at_frontmost_freeze,
                window,
                last_loss,
            },
            epoch,
            iteration,
            seed,
            freeze_version,
            tensors,
        })
    }
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.write_u32::<LittleEndian>(v).expect("vec write");
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    put_u32(w, s.len() as u32);
    w.extend_from_slice(s.as_bytes());
}

fn put_dims(w: &mut Vec<u8>, dims: &[usize]) {
    put_u32(w, dims.len() as u32);
    for &d in dims {
        w.write_u64::<LittleEndian>(d as u64).expect("vec write");
    }
}

fn put_opt_f64(w: &mut Vec<u8>, v: Option<f64>) {
    w.push(v.is_some() as u8);
    w.write_f64::<LittleEndian>(v.unwrap_or(0.0))
        .expect("vec write");
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, offset: usize, reason: impl Into<String>) -> TrainError {
        TrainError::Format {
            offset: offset as u64,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(self.pos, "truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        self.take(4).map(LittleEndian::read_u32)
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        self.take(8).map(LittleEndian::read_u64)
    }

    fn opt_f64(&mut self) -> Result<Option<f64>, TrainError> {
        let flag = self.take(1)?[0];
        let v = LittleEndian::read_f64(self.take(8)?);
        Ok((flag != 0).then_some(v))
    }

    fn string(&mut self) -> Result<String, TrainError> {
        let n = self.u32()? as usize;
        let at = self.pos;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.fail(at, "invalid utf-8"))
    }

    fn dims(&mut self) -> Result<Vec<usize>, TrainError> {
        let rank = self.u32()? as usize;
        if rank > 16 {
            return Err(self.fail(self.pos - 4, format!("implausible rank {rank}")));
        }
        (0..rank).map(|_| self.u64().map(|d| d as usize)).collect()
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<(), TrainError> {
    std::fs::write(path, checkpoint.encode())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    Checkpoint::decode(&std::fs::read(path)?)
}
