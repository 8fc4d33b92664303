//! Binary model files.
//!
//! Layout (all little-endian): magic `FMD1`, `u32` layer count, then per
//! layer `u32 inputs`, `u32 outputs`, `u8` activation (0 = ReLU,
//! 1 = identity), then every parameter as `f64` in [`Model::flatten`] order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Activation, LayerShape, Model};

const MAGIC: &[u8; 4] = b"FMD1";

pub fn encode_model(model: &Model) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 9 * model.shapes().len() + 8 * model.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(model.shapes().len() as u32).to_le_bytes());
    for s in model.shapes() {
        out.extend_from_slice(&(s.inputs as u32).to_le_bytes());
        out.extend_from_slice(&(s.outputs as u32).to_le_bytes());
        out.push(match s.activation {
            Activation::Relu => 0,
            Activation::Identity => 1,
        });
    }
    for p in model.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize, path: &Path) -> Result<&'a [u8]> {
    let end = *pos + n;
    if end > bytes.len() {
        return Err(Error::parse(path, format!("truncated model file at byte {}", *pos)));
    }
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

fn read_u32(bytes: &[u8], pos: &mut usize, path: &Path) -> Result<u32> {
    let b = take(bytes, pos, 4, path)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

/// `path` is only used in error messages.
pub fn decode_model(bytes: &[u8], path: &Path) -> Result<Model> {
    let mut pos = 0;
    if take(bytes, &mut pos, 4, path)? != MAGIC {
        return Err(Error::parse(path, "missing FMD1 magic"));
    }
    let layers = read_u32(bytes, &mut pos, path)? as usize;
    if layers == 0 {
        return Err(Error::parse(path, "model has no layers"));
    }
    let mut shapes = Vec::with_capacity(layers);
    for k in 0..layers {
        let inputs = read_u32(bytes, &mut pos, path)? as usize;
        let outputs = read_u32(bytes, &mut pos, path)? as usize;
        let activation = match take(bytes, &mut pos, 1, path)?[0] {
            0 => Activation::Relu,
            1 => Activation::Identity,
            t => return Err(Error::parse(path, format!("layer {k}: unknown activation tag {t}"))),
        };
        shapes.push(LayerShape {
            inputs,
            outputs,
            activation,
        });
    }
    let count: usize = shapes.iter().map(|s| s.param_count()).sum();
    let rest = &bytes[pos..];
    if rest.len() != 8 * count {
        return Err(Error::parse(
            path,
            format!("expected {count} parameters ({} bytes), found {} bytes", 8 * count, rest.len()),
        ));
    }
    let params = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Model::from_parts(shapes, params).map_err(|e| Error::parse(path, e.to_string()))
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, encode_model(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes, path)
}
