use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A decoded IDX array: big-endian dims and values widened to f64.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxArray {
    pub type_code: u8,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

fn element_size(type_code: u8) -> Option<usize> {
    match type_code {
        0x08 | 0x09 => Some(1),
        0x0B => Some(2),
        0x0C | 0x0D => Some(4),
        0x0E => Some(8),
        _ => None,
    }
}

fn decode(type_code: u8, b: &[u8]) -> f64 {
    match type_code {
        0x08 => b[0] as f64,
        0x09 => b[0] as i8 as f64,
        0x0B => i16::from_be_bytes([b[0], b[1]]) as f64,
        0x0C => i32::from_be_bytes([b[0], b[1], b[2], b[3]]) as f64,
        0x0D => f32::from_be_bytes([b[0], b[1], b[2], b[3]]) as f64,
        _ => f64::from_be_bytes(b.try_into().expect("8 bytes")),
    }
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    let err = |offset: usize, msg: String| Error::Parse { offset, msg };
    if bytes.len() < 4 {
        return Err(err(bytes.len(), format!("header needs 4 bytes, file has {}", bytes.len())));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(err(0, format!("bad magic {:02x} {:02x}", bytes[0], bytes[1])));
    }
    let type_code = bytes[2];
    let size = element_size(type_code).ok_or_else(|| err(2, format!("unknown type code 0x{type_code:02x}")))?;
    let ndim = bytes[3] as usize;
    let header_end = 4 + 4 * ndim;
    if bytes.len() < header_end {
        return Err(err(bytes.len(), format!("truncated header: {ndim} dims need {header_end} bytes")));
    }
    let dims: Vec<usize> = bytes[4..header_end]
        .chunks(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| err(4, "dimension product overflows".into()))?;
    let expected = count
        .checked_mul(size)
        .and_then(|n| n.checked_add(header_end))
        .ok_or_else(|| err(4, "payload size overflows".into()))?;
    if bytes.len() != expected {
        return Err(err(
            bytes.len().min(expected),
            format!("payload has {} bytes, dims {dims:?} need {}", bytes.len() - header_end, expected - header_end),
        ));
    }
    let values = bytes[header_end..].chunks(size).map(|c| decode(type_code, c)).collect();
    Ok(IdxArray {
        type_code,
        dims,
        values,
    })
}

/// Images `[N, H, W]` or `[N, H, W, C]` scaled by 1/255 paired with labels `[N]`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = parse_idx(&std::fs::read(images)?)?;
    let lab = parse_idx(&std::fs::read(labels)?)?;
    if img.type_code != 0x08 || !(3..=4).contains(&img.dims.len()) {
        return Err(Error::Parse {
            offset: 2,
            msg: format!("images must be unsigned bytes of rank 3 or 4, got type 0x{:02x} dims {:?}", img.type_code, img.dims),
        });
    }
    if lab.dims.len() != 1 || lab.dims[0] != img.dims[0] {
        return Err(Error::Shape {
            op: "load_idx",
            lhs: img.dims.clone(),
            rhs: lab.dims.clone(),
        });
    }
    let n = img.dims[0];
    let (h, w) = (img.dims[1], img.dims[2]);
    let c = img.dims.get(3).copied().unwrap_or(1);
    let mut labels = Vec::with_capacity(n);
    for (i, &v) in lab.values.iter().enumerate() {
        if v < 0.0 || v.fract() != 0.0 {
            return Err(Error::Parse {
                offset: 8 + i * element_size(lab.type_code).unwrap_or(1),
                msg: format!("label {v} is not a class index"),
            });
        }
        labels.push(v as usize);
    }
    let classes = labels.iter().max().map_or(2, |m| (m + 1).max(2));
    let features = Tensor::new(vec![n, h * w * c], img.values.iter().map(|v| v / 255.0).collect())?;
    let name = images
        .file_stem()
        .map_or_else(|| "idx".to_string(), |s| s.to_string_lossy().into_owned());
    Dataset::new(name, features, labels, classes)?.with_image_shape(h, w, c)
}
