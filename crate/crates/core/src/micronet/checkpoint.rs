//! Parameter checkpoints.
//!
//! Layout (little-endian): the magic `RFN1`, then for every layer in model
//! order `fan_in: u32`, `fan_out: u32`, `fan_in * fan_out` row-major `f64`
//! weights and `fan_out` `f64` biases, until end of file.

use std::io::{Read, Write};

use super::layer::Layered;
use super::tensor::Tensor2;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RFN1";

#[derive(Clone, Debug, PartialEq)]
pub struct LayerRecord {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn write_checkpoint<M: Layered + ?Sized, W: Write>(model: &M, mut w: W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    for l in model.layers() {
        w.write_all(&(l.fan_in() as u32).to_le_bytes())?;
        w.write_all(&(l.fan_out() as u32).to_le_bytes())?;
        for v in l.weights.as_slice().iter().chain(&l.bias) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<LayerRecord>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::MalformedFile("missing RFN1 magic".into()));
    }
    let mut pos = 4;
    let mut records = Vec::new();
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        let s = bytes
            .get(*pos..*pos + n)
            .ok_or_else(|| Error::MalformedFile("truncated checkpoint".into()))?;
        *pos += n;
        Ok(s)
    };
    while pos < bytes.len() {
        let fan_in = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let fan_out = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut read_f64s = |n: usize| -> Result<Vec<f64>> {
            let raw = take(&mut pos, n * 8)?;
            Ok(raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let weights = read_f64s(fan_in * fan_out)?;
        let bias = read_f64s(fan_out)?;
        records.push(LayerRecord {
            fan_in,
            fan_out,
            weights,
            bias,
        });
    }
    Ok(records)
}

/// Copies records into `model`, requiring an exact match of layer count and
/// every layer's shape.
pub fn load_into<M: Layered + ?Sized>(model: &mut M, records: &[LayerRecord]) -> Result<()> {
    let mut layers = model.layers_mut();
    if layers.len() != records.len() {
        return Err(Error::IncompatibleCheckpoint(format!(
            "model has {} layers, checkpoint has {}",
            layers.len(),
            records.len()
        )));
    }
    for (i, (l, rec)) in layers.iter_mut().zip(records).enumerate() {
        if l.fan_in() != rec.fan_in || l.fan_out() != rec.fan_out {
            return Err(Error::IncompatibleCheckpoint(format!(
                "layer {i} is {}x{}, checkpoint has {}x{}",
                l.fan_in(),
                l.fan_out(),
                rec.fan_in,
                rec.fan_out
            )));
        }
        if rec.weights.iter().chain(&rec.bias).any(|v| !v.is_finite()) {
            return Err(Error::MalformedFile(format!("layer {i} has non-finite parameters")));
        }
        l.weights = Tensor2::from_vec(rec.fan_in, rec.fan_out, rec.weights.clone())?;
        l.bias = rec.bias.clone();
    }
    Ok(())
}
