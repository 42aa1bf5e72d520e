//! Uncompressed raster files: 8-byte magic, `u32` channels, height, width,
//! `u32` dtype (1 = f32), then little-endian samples in CHW order.

use ndarray::Array3;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SARASTER";
pub const DTYPE_F32: u32 = 1;
const HEADER_LEN: usize = 8 + 4 * 4;

pub fn encode(img: &Array3<f32>) -> Vec<u8> {
    let (c, h, w) = img.dim();
    let mut out = Vec::with_capacity(HEADER_LEN + img.len() * 4);
    out.extend_from_slice(MAGIC);
    for v in [c as u32, h as u32, w as u32, DTYPE_F32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in img.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Array3<f32>, String> {
    if bytes.len() < HEADER_LEN {
        return Err(format!("raster truncated: {} bytes", bytes.len()));
    }
    if &bytes[..8] != MAGIC {
        return Err("bad raster magic".into());
    }
    let word =
        |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let (c, h, w, dtype) = (word(0), word(1), word(2), word(3));
    if dtype != DTYPE_F32 as usize {
        return Err(format!("unsupported raster dtype {dtype}"));
    }
    let n = c * h * w;
    if bytes.len() != HEADER_LEN + n * 4 {
        return Err(format!(
            "raster {c}x{h}x{w} expects {} bytes, found {}",
            HEADER_LEN + n * 4,
            bytes.len()
        ));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(Array3::from_shape_vec((c, h, w), data).expect("length checked"))
}

pub(crate) fn decode_at(bytes: &[u8], path: &std::path::Path) -> Result<Array3<f32>> {
    decode(bytes).map_err(|msg| Error::Dataset {
        path: path.to_path_buf(),
        msg,
    })
}
