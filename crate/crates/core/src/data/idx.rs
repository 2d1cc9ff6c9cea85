//! The IDX container used by the MNIST distribution.
//!
//! Header fields are big-endian `u32`. Images: magic `0x00000803`, count,
//! rows, cols, then `count * rows * cols` bytes. Labels: magic `0x00000801`,
//! count, then `count` bytes. Files may be gzip-compressed.

use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use ndarray::Array2;

use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const SIDE: usize = 28;
pub const PIXELS: usize = SIDE * SIDE;

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let end = offset + 4;
    let chunk = bytes.get(offset..end).ok_or(Error::Truncated {
        expected: end,
        actual: bytes.len(),
        offset,
    })?;
    Ok(u32::from_be_bytes(chunk.try_into().expect("4 bytes")))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let found = be_u32(bytes, 0)?;
    if found != expected {
        return Err(Error::BadMagic { expected, found });
    }
    Ok(())
}

/// Parses an image file into an `[n x 784]` matrix scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Array2<f64>> {
    check_magic(bytes, IMAGE_MAGIC)?;
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)?;
    let cols = be_u32(bytes, 12)?;
    if rows as usize != SIDE || cols as usize != SIDE {
        return Err(Error::BadImageDims { rows, cols });
    }
    let expected = 16 + n * PIXELS;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len(),
            offset: 16,
        });
    }
    let pixels: Vec<f64> = bytes[16..].iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok(Array2::from_shape_vec((n, PIXELS), pixels).expect("length checked"))
}

/// Parses a label file into digits `0..=9`.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, LABEL_MAGIC)?;
    let n = be_u32(bytes, 4)? as usize;
    let expected = 8 + n;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len(),
            offset: 8,
        });
    }
    let labels = bytes[8..].to_vec();
    if let Some(pos) = labels.iter().position(|&l| l > 9) {
        return Err(Error::CorruptLabel {
            label: labels[pos],
            offset: 8 + pos,
        });
    }
    Ok(labels)
}

/// Inverse of [`parse_idx_images`]; pixels are rounded back to bytes.
pub fn serialize_idx_images(images: &Array2<f64>) -> Result<Vec<u8>> {
    if images.ncols() != PIXELS {
        return Err(Error::dim("image width", PIXELS, images.ncols()));
    }
    let mut out = Vec::with_capacity(16 + images.len());
    out.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.nrows() as u32).to_be_bytes());
    out.extend_from_slice(&(SIDE as u32).to_be_bytes());
    out.extend_from_slice(&(SIDE as u32).to_be_bytes());
    out.extend(images.iter().map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8));
    Ok(out)
}

pub fn serialize_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Reads a file, transparently inflating gzip.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingData(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Locates `stem` (e.g. `train-images-idx3-ubyte`) in `dir`, accepting the
/// common `.gz` suffix and the dotted `train-images.idx3-ubyte` spelling.
pub fn find_file(dir: &Path, stem: &str) -> Result<PathBuf> {
    let dotted = stem.replacen("-idx", ".idx", 1);
    for name in [stem.to_string(), format!("{stem}.gz"), dotted.clone(), format!("{dotted}.gz")] {
        let p = dir.join(&name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::MissingData(dir.join(stem)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_file(n: u32, fill: u8) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        b.extend_from_slice(&n.to_be_bytes());
        b.extend_from_slice(&28u32.to_be_bytes());
        b.extend_from_slice(&28u32.to_be_bytes());
        b.extend(std::iter::repeat_n(fill, n as usize * PIXELS));
        b
    }

    #[test]
    fn label_magic_on_image_parser() {
        let mut b = image_file(1, 0);
        b[..4].copy_from_slice(&LABEL_MAGIC.to_be_bytes());
        match parse_idx_images(&b) {
            Err(Error::BadMagic { expected, found }) => {
                assert_eq!(expected, IMAGE_MAGIC);
                assert_eq!(found, LABEL_MAGIC);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn all_ff_image_scales_to_one() {
        let imgs = parse_idx_images(&image_file(1, 0xff)).unwrap();
        assert_eq!(imgs.dim(), (1, 784));
        assert!(imgs.iter().all(|&p| p == 1.0));
    }

    #[test]
    fn truncated_images() {
        let mut b = image_file(2, 7);
        b.pop();
        match parse_idx_images(&b) {
            Err(Error::Truncated { expected, actual, offset }) => {
                assert_eq!(expected, 16 + 2 * 784);
                assert_eq!(actual, expected - 1);
                assert_eq!(offset, 16);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse_idx_images(&b[..10]), Err(Error::Truncated { .. })));
    }

    #[test]
    fn wrong_dims() {
        let mut b = image_file(1, 0);
        b[8..12].copy_from_slice(&27u32.to_be_bytes());
        assert!(matches!(parse_idx_images(&b), Err(Error::BadImageDims { rows: 27, cols: 28 })));
    }

    #[test]
    fn empty_label_file() {
        let b = serialize_idx_labels(&[]);
        assert_eq!(parse_idx_labels(&b).unwrap(), Vec::<u8>::new());
    }

    #[test]
    fn truncated_labels_report_lengths() {
        let mut b = serialize_idx_labels(&[1, 2, 3]);
        b.pop();
        let err = parse_idx_labels(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected 11") && msg.contains("got 10"), "{msg}");
    }

    #[test]
    fn corrupt_label() {
        let b = serialize_idx_labels(&[3, 10, 1]);
        assert!(matches!(parse_idx_labels(&b), Err(Error::CorruptLabel { label: 10, offset: 9 })));
    }

    #[test]
    fn gzip_is_transparent() {
        use flate2::{write::GzEncoder, Compression};
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let raw = serialize_idx_labels(&[4, 2]);
        let path = dir.path().join("t10k-labels-idx1-ubyte.gz");
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&raw).unwrap();
        std::fs::write(&path, enc.finish().unwrap()).unwrap();
        let found = find_file(dir.path(), "t10k-labels-idx1-ubyte").unwrap();
        assert_eq!(parse_idx_labels(&read_maybe_gz(&found).unwrap()).unwrap(), vec![4, 2]);
    }

    #[test]
    fn missing_file() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            find_file(dir.path(), "train-images-idx3-ubyte"),
            Err(Error::MissingData(_))
        ));
    }
}
