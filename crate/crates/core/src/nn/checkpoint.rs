//! Binary checkpoint format for graph parameters.
//!
//! Layout, all little-endian:
//! - u32 parameter count
//! - per parameter: u32 name length, name bytes (UTF-8), u32 rank,
//!   u32 per dimension, then the float32 payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::nn::graph::Graph;
use crate::nn::tensor::Tensor;

pub fn save_checkpoint(path: &Path, params: &[(String, Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_u32::<LittleEndian>(params.len() as u32)?;
    for (name, t) in params {
        let bytes = name.as_bytes();
        w.write_u32::<LittleEndian>(bytes.len() as u32)?;
        w.write_all(bytes)?;
        w.write_u32::<LittleEndian>(t.shape().len() as u32)?;
        for &d in t.shape() {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        for &v in t.data() {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = BufReader::new(File::open(path)?);
    let count = r.read_u32::<LittleEndian>()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.read_u32::<LittleEndian>()? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Format("checkpoint parameter name is not UTF-8".into()))?;
        let rank = r.read_u32::<LittleEndian>()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u32::<LittleEndian>()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0f32; numel];
        r.read_f32_into::<LittleEndian>(&mut data)?;
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

impl Graph {
    pub fn save(&self, path: &Path) -> Result<()> {
        let params: Vec<(String, Tensor)> = self
            .params()
            .iter()
            .map(|p| {
                let mut t = p.value.clone();
                t.grad = None;
                (p.name.clone(), t)
            })
            .collect();
        save_checkpoint(path, &params)
    }

    /// Load parameters into this graph; every checkpoint entry must match an
    /// existing parameter in name and shape, and every parameter must be
    /// covered.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let entries = load_checkpoint(path)?;
        if entries.len() != self.params().len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, graph has {}",
                entries.len(),
                self.params().len()
            )));
        }
        for (name, t) in entries {
            let id = self
                .param_id(&name)
                .ok_or_else(|| Error::Format(format!("unknown parameter '{name}'")))?;
            if self.params()[id].value.shape() != t.shape() {
                return Err(Error::Shape(format!(
                    "parameter '{name}': checkpoint shape {:?} != graph shape {:?}",
                    t.shape(),
                    self.params()[id].value.shape()
                )));
            }
            self.set_param_data(&name, t.data())?;
        }
        Ok(())
    }
}
