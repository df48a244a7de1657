//! Binary checkpoint format.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic            4 bytes  "PLCK"
//! version          u8       = 1
//! architecture     u8       0 = mlp, 1 = mini_transformer
//!   mlp:           u32 input_dim, u32 hidden_width, u32 hidden_layers, u32 classes
//!   transformer:   u32 input_dim, u32 d_model, u32 seq_len, u32 blocks, u32 classes
//! pruner           u8       0 = none, 1 = magnitude, 2 = movement, 3 = soft_movement, 4 = l0
//! gates flag       u8       1 if hard-concrete parameters follow
//!   gates:         f64 beta, f64 lower, f64 upper
//! step             u64
//! schedule flag    u8       1 if a schedule follows
//!   schedule:      f64 initial, f64 final, u64 warmup, u64 cooldown, u64 total
//! tensor count     u32
//! tensors          repeated: u32 name_len, name (UTF-8), u32 rows, u32 cols, rows·cols f64
//! ```
//!
//! Tensor names are `<layer>.weight`, `<layer>.score`, `<layer>.mask`,
//! optionally `<layer>.noise`, followed by the dense parameters under their
//! own names. Loading requires every expected tensor with its exact shape
//! and rejects trailing bytes.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::masking::{HardConcreteParams, Mask};
use crate::model::{Architecture, MlpConfig, Model, TransformerConfig};
use crate::pruners::PrunerKind;
use crate::schedule::SparsitySchedule;
use crate::tensor::Tensor2D;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PLCK";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub pruner: Option<PrunerKind>,
    pub step: u64,
    pub schedule: Option<SparsitySchedule>,
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Self {
            model,
            pruner: None,
            step: 0,
            schedule: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        let u32le = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        match self.model.architecture() {
            Architecture::Mlp(c) => {
                out.push(0);
                for v in [c.input_dim, c.hidden_width, c.hidden_layers, c.classes] {
                    u32le(&mut out, v);
                }
            }
            Architecture::MiniTransformer(c) => {
                out.push(1);
                for v in [c.input_dim, c.d_model, c.seq_len, c.blocks, c.classes] {
                    u32le(&mut out, v);
                }
            }
        }
        out.push(self.pruner.map_or(0, PrunerKind::tag));
        match &self.model.gates {
            Some(g) => {
                out.push(1);
                for v in [g.beta, g.lower, g.upper] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            None => out.push(0),
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        match &self.schedule {
            Some(s) => {
                out.push(1);
                out.extend_from_slice(&s.initial.to_le_bytes());
                out.extend_from_slice(&s.final_.to_le_bytes());
                for v in [s.warmup, s.cooldown, s.total] {
                    out.extend_from_slice(&(v as u64).to_le_bytes());
                }
            }
            None => out.push(0),
        }
        let tensors = named_tensors(&self.model);
        u32le(&mut out, tensors.len());
        for (name, t) in tensors {
            u32le(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            u32le(&mut out, t.rows());
            u32le(&mut out, t.cols());
            for v in t.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Loads a checkpoint and checks it was written for `expected`.
    pub fn load_for(path: impl AsRef<Path>, expected: &Architecture) -> Result<Self> {
        let ckpt = Self::load(path)?;
        let found = ckpt.model.architecture();
        if &found != expected {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint holds {found:?}, expected {expected:?}"
            )));
        }
        Ok(ckpt)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            path: origin.to_path_buf(),
        };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(r.error("bad magic header"));
        }
        let version = r.u8()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let arch = match r.u8()? {
            0 => Architecture::Mlp(MlpConfig {
                input_dim: r.u32()?,
                hidden_width: r.u32()?,
                hidden_layers: r.u32()?,
                classes: r.u32()?,
            }),
            1 => Architecture::MiniTransformer(TransformerConfig {
                input_dim: r.u32()?,
                d_model: r.u32()?,
                seq_len: r.u32()?,
                blocks: r.u32()?,
                classes: r.u32()?,
            }),
            other => return Err(r.error(&format!("unknown architecture tag {other}"))),
        };
        arch.validate()
            .map_err(|e| r.error(&format!("invalid architecture: {e}")))?;
        let pruner = match r.u8()? {
            0 => None,
            tag => Some(PrunerKind::from_tag(tag).ok_or_else(|| r.error(&format!("unknown pruner tag {tag}")))?),
        };
        let gates = match r.u8()? {
            0 => None,
            1 => Some(HardConcreteParams {
                beta: r.f64()?,
                lower: r.f64()?,
                upper: r.f64()?,
            }),
            other => return Err(r.error(&format!("bad gates flag {other}"))),
        };
        let step = r.u64()?;
        let schedule = match r.u8()? {
            0 => None,
            1 => Some(SparsitySchedule {
                initial: r.f64()?,
                final_: r.f64()?,
                warmup: r.u64()? as usize,
                cooldown: r.u64()? as usize,
                total: r.u64()? as usize,
            }),
            other => return Err(r.error(&format!("bad schedule flag {other}"))),
        };
        let count = r.u32()?;
        let mut tensors: Vec<(String, Tensor2D)> = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = r.u32()?;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| r.error("tensor name is not UTF-8"))?;
            let rows = r.u32()?;
            let cols = r.u32()?;
            let n = rows
                .checked_mul(cols)
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| r.error(&format!("tensor {name} overruns the file")))?;
            let mut values = Vec::with_capacity(n);
            for _ in 0..n {
                values.push(r.f64()?);
            }
            let t = Tensor2D::new(rows, cols, values)
                .map_err(|e| r.error(&format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        if r.remaining() != 0 {
            return Err(r.error("trailing bytes after last tensor"));
        }

        let mut model = Model::new(arch, 0)?;
        model.gates = gates;
        let mut lookup = |name: &str, shape: (usize, usize)| -> Result<Option<Tensor2D>> {
            match tensors.iter().position(|(n, _)| n == name) {
                None => Ok(None),
                Some(i) => {
                    let (_, t) = tensors.swap_remove(i);
                    if t.shape() != shape {
                        return Err(Error::ShapeMismatch(format!(
                            "tensor {name} has shape {:?}, model expects {shape:?}",
                            t.shape()
                        )));
                    }
                    Ok(Some(t))
                }
            }
        };
        let required = |t: Option<Tensor2D>, name: &str| {
            t.ok_or_else(|| Error::Parse {
                path: origin.to_path_buf(),
                reason: format!("missing tensor {name}"),
            })
        };
        for layer in &mut model.layers {
            let shape = layer.shape();
            let n = &layer.name;
            layer.weight = required(lookup(&format!("{n}.weight"), shape)?, &format!("{n}.weight"))?;
            layer.scores = required(lookup(&format!("{n}.score"), shape)?, &format!("{n}.score"))?;
            let mask = required(lookup(&format!("{n}.mask"), shape)?, &format!("{n}.mask"))?;
            layer.mask = Mask::new(mask)?;
            layer.noise = lookup(&format!("{n}.noise"), shape)?;
        }
        for p in &mut model.dense {
            p.value = required(lookup(&p.name, p.value.shape())?, &p.name)?;
        }
        if let Some((name, _)) = tensors.first() {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint has tensor {name} that the model does not know"
            )));
        }
        Ok(Self {
            model,
            pruner,
            step,
            schedule,
        })
    }
}

fn named_tensors(model: &Model) -> Vec<(String, &Tensor2D)> {
    let mut out = Vec::new();
    for l in &model.layers {
        out.push((format!("{}.weight", l.name), &l.weight));
        out.push((format!("{}.score", l.name), &l.scores));
        out.push((format!("{}.mask", l.name), l.mask.tensor()));
        if let Some(noise) = &l.noise {
            out.push((format!("{}.noise", l.name), noise));
        }
    }
    for p in &model.dense {
        out.push((p.name.clone(), &p.value));
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl<'a> Reader<'a> {
    fn error(&self, reason: &str) -> Error {
        Error::Parse {
            path: self.path.clone(),
            reason: format!("{reason} (at byte {})", self.pos),
        }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.error("unexpected end of file"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pruners::Mode;

    #[test]
    fn truncated_bytes_fail_to_parse() {
        let model = Model::new(Architecture::Mlp(MlpConfig::default()), 3).unwrap();
        let bytes = Checkpoint::new(model).to_bytes();
        for cut in [0, 3, 5, 40, bytes.len() / 2, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut], Path::new("x")).unwrap_err();
            assert!(matches!(err, Error::Parse { .. }), "cut {cut}: {err}");
        }
    }

    #[test]
    fn version_mismatch_is_distinct() {
        let model = Model::new(Architecture::Mlp(MlpConfig::default()), 3).unwrap();
        let mut bytes = Checkpoint::new(model).to_bytes();
        bytes[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes, Path::new("x")),
            Err(Error::Version { found: 9, .. })
        ));
    }

    #[test]
    fn bytes_round_trip_bitwise() {
        let mut model = Model::new(Architecture::MiniTransformer(TransformerConfig::default()), 5).unwrap();
        model.layers[2].scores = model.layers[2].weight.map(|v| v * 3.0 - 0.1);
        model.gates = Some(HardConcreteParams::default());
        let ckpt = Checkpoint {
            model,
            pruner: Some(PrunerKind::L0),
            step: 17,
            schedule: Some(SparsitySchedule::new(0.0, 0.9, 1, 2, 10).unwrap()),
        };
        let back = Checkpoint::from_bytes(&ckpt.to_bytes(), Path::new("x")).unwrap();
        assert_eq!(back, ckpt);
        let x = Tensor2D::from_fn(2, 32, |i, j| (i + j) as f64 * 0.01);
        let a = ckpt.model.logits(&x, Mode::Eval).unwrap();
        let b = back.model.logits(&x, Mode::Eval).unwrap();
        assert!(a.as_slice().iter().zip(b.as_slice()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
