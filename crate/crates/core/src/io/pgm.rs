//! Binary 8-bit grayscale (P5) export of feature maps.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Which 2-D map of a `C x H x W` feature map to export.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    Channel(usize),
    Mean,
}

/// Min-max normalizes the selected map to `0..=255` and writes it as P5.
/// A constant map is written as all zeros. `H x W` input is used as is.
pub fn export_pgm<T: Scalar>(
    f: &Tensor<T>,
    selection: Selection,
    path: impl AsRef<Path>,
) -> Result<()> {
    let (c, h, w) = match *f.dims() {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        [1, c, h, w] => (c, h, w),
        _ => {
            return Err(Error::shape(
                "export_pgm",
                format!("expected C x H x W, got {:?}", f.dims()),
            ))
        }
    };
    let plane = h * w;
    let map: Vec<f64> = match selection {
        Selection::Channel(k) if k < c => f.data()[k * plane..(k + 1) * plane]
            .iter()
            .map(|v| v.as_f64())
            .collect(),
        Selection::Channel(k) => {
            return Err(Error::InvalidArgument(format!(
                "channel {k} out of range for {c} channels"
            )))
        }
        Selection::Mean => (0..plane)
            .map(|i| {
                (0..c)
                    .map(|k| f.data()[k * plane + i].as_f64())
                    .sum::<f64>()
                    / c as f64
            })
            .collect(),
    };
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.iter().map(|&v| {
        if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round() as u8
        } else {
            0
        }
    }));
    let path = path.as_ref();
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PgmImage {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub pixels: Vec<u8>,
}

/// Reads a P5 file with an 8-bit maximum value.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<PgmImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |detail: &str| Error::Format {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(fail("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(fail("not a binary PGM (P5)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| fail("bad header number"));
    let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(fail("only 8-bit maxval is supported"));
    }
    let pixels = bytes.get(pos + 1..).unwrap_or_default().to_vec();
    if pixels.len() != width * height {
        return Err(fail("pixel payload length does not match the header"));
    }
    Ok(PgmImage {
        width,
        height,
        maxval: maxval as u16,
        pixels,
    })
}
