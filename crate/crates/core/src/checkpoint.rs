//! Binary checkpoints of named tensors.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "MINNCKPT"  u32 version  u32 meta_len  meta (UTF-8)  u32 count
//! count × { u32 name_len  name  u8 kind (0 real, 1 complex)
//!           u32 rank  rank × u64 dim  values as f64 (complex: re, im) }
//! ```
//!
//! `meta` is free text; the harness stores the resolved experiment config
//! there so a checkpoint can rebuild its model.

use crate::align::SimApproximation;
use crate::elm::{ElmConfig, ElmModel};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{Data, Tensor, C64};
use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use std::io::{Cursor, Read};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"MINNCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: String,
    pub entries: Vec<(String, Tensor)>,
}

fn truncated(_: std::io::Error) -> Error {
    Error::Length("checkpoint ends early".into())
}

impl Checkpoint {
    pub fn new(meta: impl Into<String>) -> Self {
        Checkpoint { meta: meta.into(), entries: vec![] }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::Format(format!("checkpoint has no entry `{name}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        // Writes into a Vec cannot fail.
        out.write_u32::<LE>(VERSION).unwrap();
        out.write_u32::<LE>(self.meta.len() as u32).unwrap();
        out.extend_from_slice(self.meta.as_bytes());
        out.write_u32::<LE>(self.entries.len() as u32).unwrap();
        for (name, t) in &self.entries {
            out.write_u32::<LE>(name.len() as u32).unwrap();
            out.extend_from_slice(name.as_bytes());
            out.write_u8(u8::from(!t.is_real())).unwrap();
            out.write_u32::<LE>(t.shape().len() as u32).unwrap();
            for &d in t.shape() {
                out.write_u64::<LE>(d as u64).unwrap();
            }
            match t.data() {
                Data::Real(v) => v.iter().for_each(|x| out.write_f64::<LE>(*x).unwrap()),
                Data::Complex(v) => v.iter().for_each(|z| {
                    out.write_f64::<LE>(z.re).unwrap();
                    out.write_f64::<LE>(z.im).unwrap();
                }),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {:?}", String::from_utf8_lossy(&magic))));
        }
        let version = r.read_u32::<LE>().map_err(truncated)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let meta = read_string(&mut r)?;
        let count = r.read_u32::<LE>().map_err(truncated)?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let name = read_string(&mut r)?;
            let kind = r.read_u8().map_err(truncated)?;
            let rank = r.read_u32::<LE>().map_err(truncated)? as usize;
            if rank > 8 {
                return Err(Error::Format(format!("entry `{name}` has rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.read_u64::<LE>().map(|d| d as usize)).collect::<std::io::Result<Vec<_>>>().map_err(truncated)?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Format(format!("entry `{name}` is too large")))?;
            let width = if kind == 1 { 16 } else { 8 };
            let left = bytes.len() - r.position() as usize;
            if n.checked_mul(width).is_none_or(|need| need > left) {
                return Err(Error::Length(format!("entry `{name}` needs {n} values, {left} bytes remain")));
            }
            let t = match kind {
                0 => Tensor::real(&shape, (0..n).map(|_| r.read_f64::<LE>().unwrap()).collect())?,
                1 => Tensor::complex(
                    &shape,
                    (0..n).map(|_| C64::new(r.read_f64::<LE>().unwrap(), r.read_f64::<LE>().unwrap())).collect(),
                )?,
                k => return Err(Error::Format(format!("entry `{name}` has unknown kind {k}"))),
            };
            entries.push((name, t));
        }
        if (r.position() as usize) != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.position() as usize)));
        }
        Ok(Checkpoint { meta, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn from_params(params: &ParamSet, meta: impl Into<String>) -> Self {
        let mut c = Checkpoint::new(meta);
        for (n, t) in params.iter() {
            c.push(n, t.clone());
        }
        c
    }

    /// Overwrites every parameter from the entry of the same name.
    pub fn restore_params(&self, params: &mut ParamSet) -> Result<()> {
        for i in 0..params.len() {
            let name = params.name(i).to_string();
            let t = self.require(&name)?;
            if t.shape() != params.get(i).shape() || t.is_real() != params.get(i).is_real() {
                return Err(Error::shape("restore_params", t.shape(), params.get(i).shape()));
            }
            *params.get_mut(i) = t.clone();
        }
        Ok(())
    }

    /// Hidden matrix, readout and fit state of an ELM; the config goes in
    /// `meta` as TOML.
    pub fn from_elm(model: &ElmModel) -> Result<Self> {
        let meta = toml::to_string(model.config()).map_err(|e| Error::Config(e.to_string()))?;
        let mut c = Checkpoint::new(meta);
        c.push("elm.h", model.h.clone());
        let state = vec![model.ridge_lambda, model.noise_sigma2, model.classes as f64];
        c.push("elm.state", Tensor::real(&[3], state)?);
        if let Some(w) = &model.w {
            let rows = model.n_hidden();
            c.push("elm.w", Tensor::real(&[rows, w.len() / rows.max(1)], w.clone())?);
        }
        Ok(c)
    }

    pub fn to_elm(&self) -> Result<ElmModel> {
        let cfg: ElmConfig = toml::from_str(&self.meta).map_err(|e| Error::Format(format!("ELM config: {e}")))?;
        let state = self.require("elm.state")?.real_values("elm.state")?.to_vec();
        if state.len() != 3 {
            return Err(Error::Format("elm.state needs 3 values".into()));
        }
        let w = match self.get("elm.w") {
            Some(t) => Some(t.real_values("elm.w")?.to_vec()),
            None => None,
        };
        ElmModel::from_parts(cfg, self.require("elm.h")?.clone(), w, state[0], state[1], state[2] as usize)
    }

    /// Target matrix, fitted phases and receiver gain of an alignment.
    pub fn from_alignment(target: &Tensor, fit: &SimApproximation) -> Result<Self> {
        let mut c = Checkpoint::new(format!("error = {}\n", fit.error));
        c.push("align.target", target.clone());
        c.push("align.beta", Tensor::complex(&[1], vec![fit.beta])?);
        for (k, p) in fit.phases.iter().enumerate() {
            c.push(format!("align.phase{k}"), p.clone());
        }
        Ok(c)
    }

    /// Returns the target and the fitted phases and gain. The error history
    /// is not stored; only the final error survives.
    pub fn to_alignment(&self) -> Result<(Tensor, SimApproximation)> {
        let target = self.require("align.target")?.clone();
        let beta = self.require("align.beta")?.to_complex_vec().first().copied().ok_or_else(|| Error::Format("empty align.beta".into()))?;
        let phases: Vec<Tensor> = (0..).map_while(|k| self.get(&format!("align.phase{k}")).cloned()).collect();
        let error = self
            .meta
            .strip_prefix("error = ")
            .and_then(|s| s.trim().parse::<f64>().ok())
            .ok_or_else(|| Error::Format("alignment checkpoint lacks its error".into()))?;
        Ok((target, SimApproximation { phases, beta, error, history: vec![error] }))
    }
}

fn read_string(r: &mut Cursor<&[u8]>) -> Result<String> {
    let len = r.read_u32::<LE>().map_err(truncated)? as usize;
    let left = r.get_ref().len() - r.position() as usize;
    if len > left {
        return Err(Error::Length(format!("string of {len} bytes, {left} remain")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(truncated)?;
    String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
}
