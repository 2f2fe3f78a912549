//! Reader and writer for the IDX container format (big-endian magic,
//! dimension sizes, unsigned byte payload).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

const MAGIC_IMAGES: u32 = 0x0000_0803;
const MAGIC_LABELS: u32 = 0x0000_0801;

/// Parsed IDX content: images scaled to [0, 1], or labels.
#[derive(Debug, Clone, PartialEq)]
pub enum IdxData {
    Images { n: usize, rows: usize, cols: usize, pixels: Vec<f64> },
    Labels(Vec<u8>),
}

/// Parse an IDX file: image containers (magic 0x00000803) or label
/// containers (magic 0x00000801). Pixels are scaled to [0, 1].
pub fn load_idx(path: &Path) -> Result<IdxData> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = r.read_u32::<BigEndian>().map_err(|_| Error::Idx("truncated header".into()))?;
    match magic {
        MAGIC_IMAGES => {
            let n = read_dim(&mut r)?;
            let rows = read_dim(&mut r)?;
            let cols = read_dim(&mut r)?;
            let total = n
                .checked_mul(rows)
                .and_then(|v| v.checked_mul(cols))
                .ok_or_else(|| Error::Idx("dimension overflow".into()))?;
            let mut bytes = vec![0u8; total];
            r.read_exact(&mut bytes)
                .map_err(|_| Error::Idx(format!("truncated payload: wanted {} bytes", total)))?;
            let pixels = bytes.iter().map(|&b| b as f64 / 255.0).collect();
            Ok(IdxData::Images { n, rows, cols, pixels })
        }
        MAGIC_LABELS => {
            let n = read_dim(&mut r)?;
            let mut bytes = vec![0u8; n];
            r.read_exact(&mut bytes)
                .map_err(|_| Error::Idx(format!("truncated payload: wanted {} bytes", n)))?;
            Ok(IdxData::Labels(bytes))
        }
        other => Err(Error::Idx(format!("bad magic 0x{:08x}", other))),
    }
}

fn read_dim(r: &mut impl Read) -> Result<usize> {
    let v = r.read_u32::<BigEndian>().map_err(|_| Error::Idx("truncated header".into()))?;
    Ok(v as usize)
}

/// Write an image container (pixels in [0, 1], quantized to bytes).
pub fn write_idx_images(
    path: &Path,
    n: usize,
    rows: usize,
    cols: usize,
    pixels: &[f64],
) -> Result<()> {
    if pixels.len() != n * rows * cols {
        return Err(Error::Idx("pixel count does not match dimensions".into()));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_u32::<BigEndian>(MAGIC_IMAGES)?;
    for d in [n, rows, cols] {
        w.write_u32::<BigEndian>(d as u32)?;
    }
    for &p in pixels {
        w.write_u8((p.clamp(0.0, 1.0) * 255.0).round() as u8)?;
    }
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_u32::<BigEndian>(MAGIC_LABELS)?;
    w.write_u32::<BigEndian>(labels.len() as u32)?;
    w.write_all(labels)?;
    Ok(())
}

/// Halve both image dimensions by 2x2 average pooling (dims must be even).
pub fn pool2x2(pixels: &[f64], n: usize, rows: usize, cols: usize) -> Result<Vec<f64>> {
    if rows % 2 != 0 || cols % 2 != 0 {
        return Err(Error::Idx(format!("pooling needs even dims, got {}x{}", rows, cols)));
    }
    let (orows, ocols) = (rows / 2, cols / 2);
    let mut out = vec![0.0; n * orows * ocols];
    for i in 0..n {
        let src = &pixels[i * rows * cols..(i + 1) * rows * cols];
        let dst = &mut out[i * orows * ocols..(i + 1) * orows * ocols];
        for r in 0..orows {
            for c in 0..ocols {
                let s = src[2 * r * cols + 2 * c]
                    + src[2 * r * cols + 2 * c + 1]
                    + src[(2 * r + 1) * cols + 2 * c]
                    + src[(2 * r + 1) * cols + 2 * c + 1];
                dst[r * ocols + c] = s / 4.0;
            }
        }
    }
    Ok(out)
}
