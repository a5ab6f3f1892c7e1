//! IDX (MNIST) byte format: big-endian header, unsigned-byte payload.

use alloc::format;
use alloc::vec::Vec;

use super::Dataset;
use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    /// `count × rows × cols` bytes.
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn count(&self) -> usize {
        if self.rows * self.cols == 0 {
            0
        } else {
            self.pixels.len() / (self.rows * self.cols)
        }
    }
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::InvalidDataset("truncated IDX header".into()))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let magic = read_u32(bytes, 0)?;
    if magic != expected {
        return Err(Error::InvalidDataset(format!(
            "bad IDX magic {magic:#010x}, expected {expected:#010x}"
        )));
    }
    Ok(())
}

fn payload(bytes: &[u8], header: usize, len: usize) -> Result<&[u8]> {
    let body = &bytes[header..];
    match body.len().cmp(&len) {
        core::cmp::Ordering::Less => Err(Error::InvalidDataset(format!(
            "truncated IDX payload: {} of {len} bytes",
            body.len()
        ))),
        core::cmp::Ordering::Greater => Err(Error::InvalidDataset(format!(
            "{} trailing bytes after IDX payload",
            body.len() - len
        ))),
        core::cmp::Ordering::Equal => Ok(body),
    }
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    check_magic(bytes, IDX_IMAGES_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let len = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::InvalidDataset("IDX dimensions overflow".into()))?;
    let body = payload(bytes, 16, len)?;
    Ok(IdxImages {
        rows,
        cols,
        pixels: body.to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, IDX_LABELS_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    Ok(payload(bytes, 8, count)?.to_vec())
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.count() as u32).to_be_bytes());
    out.extend_from_slice(&(images.rows as u32).to_be_bytes());
    out.extend_from_slice(&(images.cols as u32).to_be_bytes());
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Bilinear resampling with pixel-center alignment. Halving a side averages
/// 2×2 blocks exactly.
pub fn downscale_bilinear(src: &[f64], rows: usize, cols: usize, out_rows: usize, out_cols: usize) -> Vec<f64> {
    let coord = |i: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let s = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = libm::floor(s) as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, s - lo as f64)
    };
    let mut out = Vec::with_capacity(out_rows * out_cols);
    for i in 0..out_rows {
        let (r0, r1, fr) = coord(i, rows, out_rows);
        for j in 0..out_cols {
            let (c0, c1, fc) = coord(j, cols, out_cols);
            let top = src[r0 * cols + c0] * (1.0 - fc) + src[r0 * cols + c1] * fc;
            let bottom = src[r1 * cols + c0] * (1.0 - fc) + src[r1 * cols + c1] * fc;
            out.push(top * (1.0 - fr) + bottom * fr);
        }
    }
    out
}

/// Scales bytes to `[0, 1]` and optionally resamples each image to
/// `side × side`.
pub fn dataset_from_idx(images: &IdxImages, labels: &[u8], side: Option<usize>, classes: usize) -> Result<Dataset> {
    let count = images.count();
    if count != labels.len() {
        return Err(Error::InvalidDataset(format!(
            "{count} images but {} labels",
            labels.len()
        )));
    }
    let px = images.rows * images.cols;
    let side = side.filter(|&s| s != images.rows || s != images.cols);
    if side == Some(0) {
        return Err(Error::InvalidConfig("downscale side must be >= 1".into()));
    }
    let dim = side.map_or(px, |s| s * s);
    let mut features = Vec::with_capacity(count * dim);
    for k in 0..count {
        let img: Vec<f64> = images.pixels[k * px..(k + 1) * px]
            .iter()
            .map(|&b| f64::from(b) / 255.0)
            .collect();
        match side {
            Some(s) => features.extend(downscale_bilinear(&img, images.rows, images.cols, s, s)),
            None => features.extend(img),
        }
    }
    Dataset::new(dim, classes, features, labels.iter().map(|&l| u32::from(l)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn fixture() -> (IdxImages, Vec<u8>) {
        let pixels = (0..4 * 4 * 4).map(|i| (i * 7 % 256) as u8).collect();
        (
            IdxImages {
                rows: 4,
                cols: 4,
                pixels,
            },
            vec![3, 1, 4, 1],
        )
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (img, lab) = fixture();
        let bytes = encode_idx_images(&img);
        assert_eq!(&bytes[..4], &[0, 0, 8, 3]);
        assert_eq!(parse_idx_images(&bytes).unwrap(), img);
        assert_eq!(encode_idx_images(&parse_idx_images(&bytes).unwrap()), bytes);
        let lb = encode_idx_labels(&lab);
        assert_eq!(parse_idx_labels(&lb).unwrap(), lab);
    }

    #[test]
    fn malformed_inputs() {
        let (img, lab) = fixture();
        let mut bytes = encode_idx_images(&img);
        bytes[3] = 0x01;
        assert!(parse_idx_images(&bytes).is_err());
        let bytes = encode_idx_images(&img);
        assert!(parse_idx_images(&bytes[..bytes.len() - 1]).is_err());
        assert!(parse_idx_images(&bytes[..10]).is_err());
        assert!(parse_idx_labels(&encode_idx_images(&img)).is_err());
        assert!(parse_idx_labels(&encode_idx_labels(&lab)[..9]).is_err());
    }

    #[test]
    fn count_mismatch_rejected() {
        let img = IdxImages {
            rows: 2,
            cols: 2,
            pixels: vec![0; 9 * 4],
        };
        let err = dataset_from_idx(&img, &[0; 10], None, 10).unwrap_err();
        assert!(matches!(err, Error::InvalidDataset(_)));
    }

    #[test]
    fn zero_image_maps_to_zero_row_and_halving_averages_blocks() {
        let mut pixels = vec![0u8; 2 * 16];
        for (i, p) in pixels[16..].iter_mut().enumerate() {
            *p = (i * 10) as u8;
        }
        let img = IdxImages {
            rows: 4,
            cols: 4,
            pixels,
        };
        let ds = dataset_from_idx(&img, &[0, 1], Some(2), 2).unwrap();
        assert_eq!(ds.dim(), 4);
        assert_eq!(ds.example(0).0, &[0.0; 4]);
        let block = |r: usize, c: usize| {
            let v = |i: usize, j: usize| ((4 * i + j) * 10) as f64 / 255.0;
            (v(r, c) + v(r, c + 1) + v(r + 1, c) + v(r + 1, c + 1)) / 4.0
        };
        let x = ds.example(1).0;
        for (k, (r, c)) in [(0, 0), (0, 2), (2, 0), (2, 2)].into_iter().enumerate() {
            assert!((x[k] - block(r, c)).abs() < 1e-15);
        }
    }
}
