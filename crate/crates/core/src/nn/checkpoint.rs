//! Versioned binary model checkpoints.
//!
//! Parameters are stored as raw little-endian f64 bits, so a load returns
//! bit-identical values to what was saved.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Layer, LayeredModel};

const MAGIC: &[u8; 4] = b"SLNM";
const VERSION: u32 = 1;

const TAG_DENSE: u8 = 0;
const TAG_RELU: u8 = 1;
const TAG_CONV: u8 = 2;
const TAG_MAXPOOL: u8 = 3;
const TAG_BATCHNORM: u8 = 4;

pub fn save_model<W: Write>(model: &LayeredModel, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    write_dims(&mut w, &model.input_shape)?;
    w.write_all(&(model.layers.len() as u32).to_le_bytes())?;
    for layer in &model.layers {
        match layer {
            Layer::Dense { weight, bias } => {
                w.write_all(&[TAG_DENSE])?;
                write_tensor(&mut w, weight)?;
                write_tensor(&mut w, bias)?;
            }
            Layer::Relu => w.write_all(&[TAG_RELU])?,
            Layer::Conv2d { weight, bias, padding } => {
                w.write_all(&[TAG_CONV])?;
                w.write_all(&(*padding as u32).to_le_bytes())?;
                write_tensor(&mut w, weight)?;
                write_tensor(&mut w, bias)?;
            }
            Layer::MaxPool { size } => {
                w.write_all(&[TAG_MAXPOOL])?;
                w.write_all(&(*size as u32).to_le_bytes())?;
            }
            Layer::BatchNorm { gamma, beta, running_mean, running_var } => {
                w.write_all(&[TAG_BATCHNORM])?;
                write_tensor(&mut w, gamma)?;
                write_tensor(&mut w, beta)?;
                write_tensor(&mut w, running_mean)?;
                write_tensor(&mut w, running_var)?;
            }
        }
    }
    Ok(())
}

pub fn load_model<R: Read>(mut r: R) -> Result<LayeredModel> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Parse { what: "checkpoint", detail: "bad magic bytes".into() });
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Parse {
            what: "checkpoint",
            detail: format!("unsupported version {version}"),
        });
    }
    let input_shape = read_dims(&mut r)?;
    let k = read_u32(&mut r)? as usize;
    let mut layers = Vec::with_capacity(k);
    for _ in 0..k {
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        layers.push(match tag[0] {
            TAG_DENSE => Layer::Dense {
                weight: read_tensor(&mut r)?,
                bias: read_tensor(&mut r)?,
            },
            TAG_RELU => Layer::Relu,
            TAG_CONV => {
                let padding = read_u32(&mut r)? as usize;
                Layer::Conv2d {
                    padding,
                    weight: read_tensor(&mut r)?,
                    bias: read_tensor(&mut r)?,
                }
            }
            TAG_MAXPOOL => Layer::MaxPool { size: read_u32(&mut r)? as usize },
            TAG_BATCHNORM => Layer::BatchNorm {
                gamma: read_tensor(&mut r)?,
                beta: read_tensor(&mut r)?,
                running_mean: read_tensor(&mut r)?,
                running_var: read_tensor(&mut r)?,
            },
            other => {
                return Err(Error::Parse {
                    what: "checkpoint",
                    detail: format!("unknown layer tag {other}"),
                })
            }
        });
    }
    Ok(LayeredModel { input_shape, layers })
}

fn write_dims<W: Write>(w: &mut W, dims: &[usize]) -> Result<()> {
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    Ok(())
}

fn read_dims<R: Read>(r: &mut R) -> Result<Vec<usize>> {
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(Error::Parse { what: "checkpoint", detail: format!("implausible rank {rank}") });
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf)?;
        dims.push(u64::from_le_bytes(buf) as usize);
    }
    Ok(dims)
}

fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    write_dims(w, &t.shape)?;
    for &v in &t.data {
        w.write_all(&v.to_bits().to_le_bytes())?;
    }
    Ok(())
}

fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let shape = read_dims(r)?;
    let n: usize = shape.iter().product();
    if n > (1 << 28) {
        return Err(Error::Parse { what: "checkpoint", detail: format!("implausible tensor size {n}") });
    }
    let mut data = Vec::with_capacity(n);
    let mut buf = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut buf)?;
        data.push(f64::from_bits(u64::from_le_bytes(buf)));
    }
    Tensor::from_vec(&shape, data)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
