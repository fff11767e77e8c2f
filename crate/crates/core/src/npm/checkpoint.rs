//! Binary parameter checkpoints (little-endian).
//!
//! Layout:
//! ```text
//! magic      8 bytes  "SEMMACNP"
//! version    u32      1
//! num_ues    u32
//! ucm_dim    u32
//! dcm_dim    u32
//! activation u8       0 = tanh, 1 = relu
//! n_hidden   u32, then n_hidden x u32 hidden widths
//! obs_levels num_ues x u32
//! networks   uplink[0..L], bs, heads[0..L]; each:
//!            n_layers u32, then per layer:
//!            outputs u32, inputs u32,
//!            weights outputs*inputs x f64 (row-major), bias outputs x f64
//! ```

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{Activation, Dense, Mlp, NetworkShape, NpmParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SEMMACNP";
pub const CHECKPOINT_VERSION: u32 = 1;

fn ck(e: std::io::Error) -> Error {
    Error::Checkpoint(e.to_string())
}

fn write_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    w.write_u32::<LittleEndian>(v).map_err(ck)
}

fn read_u32<R: Read>(r: &mut R) -> Result<usize> {
    Ok(r.read_u32::<LittleEndian>().map_err(ck)? as usize)
}

pub fn write_checkpoint<W: Write>(params: &NpmParams, mut w: W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC).map_err(ck)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION).map_err(ck)?;
    let shape = &params.shape;
    write_u32(&mut w, params.num_ues())?;
    write_u32(&mut w, shape.ucm_dim)?;
    write_u32(&mut w, shape.dcm_dim)?;
    let act = match shape.activation {
        Activation::Tanh => 0,
        Activation::Relu => 1,
    };
    w.write_u8(act).map_err(ck)?;
    write_u32(&mut w, shape.hidden.len())?;
    for &h in &shape.hidden {
        write_u32(&mut w, h)?;
    }
    for &lv in &params.obs_levels {
        write_u32(&mut w, lv)?;
    }
    for net in params.networks() {
        write_u32(&mut w, net.layers.len())?;
        for layer in &net.layers {
            write_u32(&mut w, layer.outputs)?;
            write_u32(&mut w, layer.inputs)?;
            for &x in layer.weights.iter().chain(&layer.bias) {
                w.write_f64::<LittleEndian>(x).map_err(ck)?;
            }
        }
    }
    Ok(())
}

fn read_mlp<R: Read>(r: &mut R, activation: Activation) -> Result<Mlp> {
    let n_layers = read_u32(r)?;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let outputs = read_u32(r)?;
        let inputs = read_u32(r)?;
        let mut layer = Dense::zeros(inputs, outputs);
        for x in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
            *x = r.read_f64::<LittleEndian>().map_err(ck)?;
        }
        layers.push(layer);
    }
    Ok(Mlp { layers, activation })
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<NpmParams> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(ck)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(ck)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let l = read_u32(&mut r)?;
    let ucm_dim = read_u32(&mut r)?;
    let dcm_dim = read_u32(&mut r)?;
    let activation = match r.read_u8().map_err(ck)? {
        0 => Activation::Tanh,
        1 => Activation::Relu,
        other => return Err(Error::Checkpoint(format!("unknown activation code {other}"))),
    };
    let n_hidden = read_u32(&mut r)?;
    let hidden = (0..n_hidden).map(|_| read_u32(&mut r)).collect::<Result<Vec<_>>>()?;
    let obs_levels = (0..l).map(|_| read_u32(&mut r)).collect::<Result<Vec<_>>>()?;
    let uplink = (0..l).map(|_| read_mlp(&mut r, activation)).collect::<Result<Vec<_>>>()?;
    let bs = read_mlp(&mut r, activation)?;
    let heads = (0..l).map(|_| read_mlp(&mut r, activation)).collect::<Result<Vec<_>>>()?;
    let shape = NetworkShape {
        ucm_dim,
        dcm_dim,
        hidden,
        activation,
    };
    let params = NpmParams {
        shape,
        obs_levels,
        uplink,
        bs,
        heads,
    };
    if params.bs.input_dim() != params.shape.bs_input_dim(l) || params.bs.output_dim() != l * dcm_dim {
        return Err(Error::Checkpoint("BS network dimensions inconsistent with header".into()));
    }
    Ok(params)
}
