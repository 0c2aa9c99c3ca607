//! Big-endian IDX containers of unsigned bytes (the MNIST family layout):
//! a 4-byte magic `0x00 0x00 0x08 <ndim>`, `ndim` big-endian `u32` sizes,
//! then the raw bytes in row-major order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

/// Parses an IDX byte buffer with the given magic; returns the dimension
/// sizes and the payload.
fn parse<'a>(bytes: &'a [u8], magic: u32, path: &Path) -> Result<(Vec<usize>, &'a [u8])> {
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let observed = read_u32(bytes, 0).ok_or_else(|| bad("shorter than the 4-byte magic".into()))?;
    if observed != magic {
        return Err(bad(format!(
            "magic 0x{observed:08x}, expected 0x{magic:08x}"
        )));
    }
    let ndim = (magic & 0xff) as usize;
    let dims = (0..ndim)
        .map(|i| {
            read_u32(bytes, 4 + 4 * i)
                .map(|d| d as usize)
                .ok_or_else(|| bad("truncated header".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * ndim;
    let expected: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() != expected {
        return Err(bad(format!(
            "dimensions {dims:?} need {expected} bytes, found {}",
            payload.len()
        )));
    }
    Ok((dims, payload))
}

/// Images as `[count, 1, rows, cols]` with bytes scaled to `[0, 1]`.
pub fn parse_images(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let (dims, payload) = parse(bytes, IMAGES_MAGIC, path)?;
    if dims.contains(&0) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("empty image set {dims:?}"),
        });
    }
    let data = payload.iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(vec![dims[0], 1, dims[1], dims[2]], data)
}

pub fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let (_, payload) = parse(bytes, LABELS_MAGIC, path)?;
    Ok(payload.to_vec())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads an image file and its label file, checking that the counts agree.
pub fn load_idx(images: &Path, labels: &Path) -> Result<(Tensor, Vec<u8>)> {
    let x = parse_images(&read(images)?, images)?;
    let y = parse_labels(&read(labels)?, labels)?;
    if x.shape()[0] != y.len() {
        return Err(Error::Data(format!(
            "{} holds {} images but {} holds {} labels",
            images.display(),
            x.shape()[0],
            labels.display(),
            y.len()
        )));
    }
    Ok((x, y))
}

/// Encodes `[count, 1, rows, cols]` (or `[count, rows, cols]`) values in
/// `[0, 1]` as IDX image bytes, rounding to the nearest byte.
pub fn encode_images(images: &Tensor) -> Result<Vec<u8>> {
    let (n, rows, cols) = match *images.shape() {
        [n, 1, r, c] | [n, r, c] => (n, r, c),
        _ => return Err(Error::dim("encode_images", images.shape(), &[0, 1, 0, 0])),
    };
    let mut out = IMAGES_MAGIC.to_be_bytes().to_vec();
    for d in [n, rows, cols] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for &v in images.data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Argument(format!("pixel value {v} outside [0, 1]")));
        }
        out.push((v * 255.0).round() as u8);
    }
    Ok(out)
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = LABELS_MAGIC.to_be_bytes().to_vec();
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("fixture")
    }

    #[test]
    fn hand_built_fixture() {
        let bytes = [
            0x00, 0x00, 0x08, 0x03, // magic
            0x00, 0x00, 0x00, 0x01, // 1 image
            0x00, 0x00, 0x00, 0x02, // 2 rows
            0x00, 0x00, 0x00, 0x03, // 3 cols
            0, 51, 102, 153, 204, 255,
        ];
        let t = parse_images(&bytes, p()).unwrap();
        assert_eq!(t.shape(), &[1, 1, 2, 3]);
        assert_eq!(t.data(), &[0.0, 0.2, 0.4, 0.6, 0.8, 1.0]);
    }

    #[test]
    fn two_mnist_sized_images() {
        let mut bytes = IMAGES_MAGIC.to_be_bytes().to_vec();
        for d in [2u32, 28, 28] {
            bytes.extend_from_slice(&d.to_be_bytes());
        }
        bytes.extend((0..2 * 28 * 28).map(|i| (i % 256) as u8));
        let t = parse_images(&bytes, p()).unwrap();
        assert_eq!(t.shape(), &[2, 1, 28, 28]);
        assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(t.data()[0], 0.0);
        assert_eq!(t.data()[255], 1.0);
    }

    #[test]
    fn wrong_magic_names_observed_value() {
        let bytes = encode_labels(&[1, 2, 3]);
        let err = parse_images(&bytes, p()).unwrap_err().to_string();
        assert!(err.contains("0x00000801"), "{err}");
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut bytes = encode_labels(&[1, 2, 3]);
        bytes.pop();
        assert!(parse_labels(&bytes, p()).is_err());
    }

    #[test]
    fn count_mismatch_between_files() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img.idx");
        let lab = dir.path().join("lab.idx");
        let x = Tensor::zeros(&[2, 1, 2, 2]);
        fs::write(&img, encode_images(&x).unwrap()).unwrap();
        fs::write(&lab, encode_labels(&[0, 1, 2])).unwrap();
        assert!(matches!(load_idx(&img, &lab), Err(Error::Data(_))));
        fs::write(&lab, encode_labels(&[0, 1])).unwrap();
        let (t, y) = load_idx(&img, &lab).unwrap();
        assert_eq!(t, x);
        assert_eq!(y, vec![0, 1]);
    }
}
