//! Binary serialization of gradient captures.
//!
//! Layout (all little-endian): magic `SPGC`, u32 version, u32 m, u32 n,
//! u8 protocol tag, a protocol parameter block (u32 batch size, u64 seed,
//! then per-protocol parameters in fixed order), u8 ground-truth flag,
//! then row-major f64 arrays: dW, db, layer W, layer bias, and when the
//! flag is set X, Z, dL/dZ.

use super::{GradientCapture, GroundTruth, Protocol};
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"SPGC";
const VERSION: u32 = 1;

const TAG_FEDSGD: u8 = 0;
const TAG_FEDAVG: u8 = 1;
const TAG_DPSGD: u8 = 2;

pub fn save_capture(capture: &GradientCapture, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_capture(capture, &mut w).map_err(|e| Error::io(path, e))
}

pub fn load_capture(path: &Path) -> Result<GradientCapture> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    read_capture(&bytes).map_err(|detail| Error::Format(format!("{}: {detail}", path.display())))
}

fn write_capture(capture: &GradientCapture, w: &mut impl Write) -> std::io::Result<()> {
    let m = capture.width() as u32;
    let n = capture.input_dim() as u32;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&m.to_le_bytes())?;
    w.write_all(&n.to_le_bytes())?;
    match &capture.protocol {
        Protocol::FedSgd => w.write_all(&[TAG_FEDSGD])?,
        Protocol::FedAvg { .. } => w.write_all(&[TAG_FEDAVG])?,
        Protocol::DpSgd { .. } => w.write_all(&[TAG_DPSGD])?,
    }
    w.write_all(&(capture.batch_size as u32).to_le_bytes())?;
    w.write_all(&capture.seed.to_le_bytes())?;
    match &capture.protocol {
        Protocol::FedSgd => {}
        Protocol::FedAvg {
            epochs,
            mini_batch,
            learning_rate,
        } => {
            w.write_all(&epochs.to_le_bytes())?;
            w.write_all(&mini_batch.to_le_bytes())?;
            w.write_all(&learning_rate.to_le_bytes())?;
        }
        Protocol::DpSgd { clip, noise_std } => {
            w.write_all(&clip.to_le_bytes())?;
            w.write_all(&noise_std.to_le_bytes())?;
        }
    }
    w.write_all(&[capture.truth.is_some() as u8])?;
    write_matrix(&capture.weight_gradient, w)?;
    write_vector(&capture.bias_gradient, w)?;
    write_matrix(&capture.layer_weight, w)?;
    write_vector(&capture.layer_bias, w)?;
    if let Some(truth) = &capture.truth {
        write_matrix(&truth.inputs, w)?;
        write_matrix(&truth.pre_activations, w)?;
        write_matrix(&truth.activation_gradient, w)?;
    }
    w.flush()
}

fn write_matrix(mat: &DMatrix<f64>, w: &mut impl Write) -> std::io::Result<()> {
    for i in 0..mat.nrows() {
        for j in 0..mat.ncols() {
            w.write_all(&mat[(i, j)].to_le_bytes())?;
        }
    }
    Ok(())
}

fn write_vector(v: &DVector<f64>, w: &mut impl Write) -> std::io::Result<()> {
    for x in v.iter() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize) -> std::result::Result<&'a [u8], String> {
        if self.pos + len > self.bytes.len() {
            return Err(format!(
                "truncated at byte {} (needed {len} more, {} available)",
                self.pos,
                self.bytes.len() - self.pos
            ));
        }
        let slice = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(slice)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> std::result::Result<DMatrix<f64>, String> {
        let raw = self.take(rows * cols * 8)?;
        Ok(DMatrix::from_fn(rows, cols, |i, j| {
            let at = (i * cols + j) * 8;
            f64::from_le_bytes(raw[at..at + 8].try_into().unwrap())
        }))
    }

    fn vector(&mut self, len: usize) -> std::result::Result<DVector<f64>, String> {
        let raw = self.take(len * 8)?;
        Ok(DVector::from_fn(len, |i, _| {
            f64::from_le_bytes(raw[i * 8..i * 8 + 8].try_into().unwrap())
        }))
    }
}

fn read_capture(bytes: &[u8]) -> std::result::Result<GradientCapture, String> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err("bad magic, not a gradient-capture file".into());
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(format!("unsupported capture version {version} (expected {VERSION})"));
    }
    let m = c.u32()? as usize;
    let n = c.u32()? as usize;
    let tag = c.u8()?;
    let batch_size = c.u32()? as usize;
    let seed = c.u64()?;
    let protocol = match tag {
        TAG_FEDSGD => Protocol::FedSgd,
        TAG_FEDAVG => Protocol::FedAvg {
            epochs: c.u32()?,
            mini_batch: c.u32()?,
            learning_rate: c.f64()?,
        },
        TAG_DPSGD => Protocol::DpSgd {
            clip: c.f64()?,
            noise_std: c.f64()?,
        },
        other => return Err(format!("unknown protocol tag {other}")),
    };
    let has_truth = match c.u8()? {
        0 => false,
        1 => true,
        other => return Err(format!("invalid ground-truth flag {other}")),
    };
    let weight_gradient = c.matrix(m, n)?;
    let bias_gradient = c.vector(m)?;
    let layer_weight = c.matrix(m, n)?;
    let layer_bias = c.vector(m)?;
    let truth = if has_truth {
        Some(GroundTruth {
            inputs: c.matrix(n, batch_size)?,
            pre_activations: c.matrix(m, batch_size)?,
            activation_gradient: c.matrix(m, batch_size)?,
        })
    } else {
        None
    };
    if c.pos != bytes.len() {
        return Err(format!(
            "{} trailing bytes after capture payload",
            bytes.len() - c.pos
        ));
    }
    Ok(GradientCapture {
        weight_gradient,
        bias_gradient,
        layer_weight,
        layer_bias,
        protocol,
        seed,
        batch_size,
        truth,
    })
}
