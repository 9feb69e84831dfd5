//! Parameter checkpoints: magic `SOMNN001`, `u32` layer count, then per layer a
//! kind byte, `u32` array count and for each array `u32` rank, `u32` dims and
//! `f32` values. Batch-norm running statistics are stored as extra arrays.
//! All integers little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::layers::Layer;
use super::network::Network;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SOMNN001";

fn kind(layer: &Layer) -> u8 {
    match layer {
        Layer::Dense(_) => 1,
        Layer::Conv2d(_) => 2,
        Layer::Relu => 3,
        Layer::Sigmoid => 4,
        Layer::BatchNorm(_) => 5,
        Layer::Flatten => 6,
        Layer::Residual(_) => 7,
    }
}

fn arrays(layer: &Layer, out: &mut Vec<(Vec<usize>, Vec<f64>)>) {
    match layer {
        Layer::Dense(d) => {
            out.push((d.w.dims.clone(), d.w.value.clone()));
            out.push((d.b.dims.clone(), d.b.value.clone()));
        }
        Layer::Conv2d(c) => {
            out.push((c.w.dims.clone(), c.w.value.clone()));
            out.push((c.b.dims.clone(), c.b.value.clone()));
        }
        Layer::BatchNorm(bn) => {
            let n = bn.running_mean.len();
            out.push((vec![n], bn.gamma.value.clone()));
            out.push((vec![n], bn.beta.value.clone()));
            out.push((vec![n], bn.running_mean.clone()));
            out.push((vec![n], bn.running_var.clone()));
        }
        Layer::Residual(inner) => {
            for l in inner.layers() {
                arrays(l, out);
            }
        }
        _ => {}
    }
}

fn targets(layer: &mut Layer) -> Vec<&mut Vec<f64>> {
    match layer {
        Layer::Dense(d) => vec![&mut d.w.value, &mut d.b.value],
        Layer::Conv2d(c) => vec![&mut c.w.value, &mut c.b.value],
        Layer::BatchNorm(bn) => {
            vec![
                &mut bn.gamma.value,
                &mut bn.beta.value,
                &mut bn.running_mean,
                &mut bn.running_var,
            ]
        }
        Layer::Residual(inner) => inner.layers_mut().iter_mut().flat_map(targets).collect(),
        _ => vec![],
    }
}

pub fn write_checkpoint<W: Write>(net: &Network, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(net.layers().len() as u32).to_le_bytes())?;
    for layer in net.layers() {
        let mut arr = Vec::new();
        arrays(layer, &mut arr);
        w.write_all(&[kind(layer)])?;
        w.write_all(&(arr.len() as u32).to_le_bytes())?;
        for (dims, values) in arr {
            w.write_all(&(dims.len() as u32).to_le_bytes())?;
            for d in dims {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in values {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

/// Load parameters into a network of the same architecture.
pub fn read_checkpoint<R: Read>(net: &mut Network, mut r: R) -> Result<()> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    if &magic != MAGIC {
        return Err(Error::Format("not a network checkpoint (bad magic)".into()));
    }
    let count = read_u32(&mut r)? as usize;
    if count != net.layers().len() {
        return Err(Error::Format(format!(
            "checkpoint has {count} layers, network has {}",
            net.layers().len()
        )));
    }
    // Decode fully before touching the network so a bad file leaves it intact.
    let mut staged = net.clone();
    for (i, layer) in staged.layers_mut().iter_mut().enumerate() {
        let mut k = [0u8; 1];
        r.read_exact(&mut k)
            .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
        if k[0] != kind(layer) {
            return Err(Error::Format(format!("layer {i} kind mismatch")));
        }
        let n_arrays = read_u32(&mut r)? as usize;
        let mut slots = targets(layer);
        if n_arrays != slots.len() {
            return Err(Error::Format(format!(
                "layer {i} has {n_arrays} arrays, expected {}",
                slots.len()
            )));
        }
        for slot in slots.iter_mut() {
            let rank = read_u32(&mut r)? as usize;
            if rank > 8 {
                return Err(Error::Format(format!("layer {i}: implausible rank {rank}")));
            }
            let mut len = 1usize;
            for _ in 0..rank {
                len = len.saturating_mul(read_u32(&mut r)? as usize);
            }
            if len != slot.len() {
                return Err(Error::Format(format!(
                    "layer {i}: array of {len} values, expected {}",
                    slot.len()
                )));
            }
            let mut b = [0u8; 4];
            for v in slot.iter_mut() {
                r.read_exact(&mut b)
                    .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
                *v = f32::from_le_bytes(b) as f64;
            }
        }
    }
    *net = staged;
    Ok(())
}

pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(net, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(net: &mut Network, path: &Path) -> Result<()> {
    read_checkpoint(net, BufReader::new(File::open(path)?))
}
