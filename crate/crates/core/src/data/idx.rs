//! IDX files (big-endian, u8 payload): images `0x00000803`, labels `0x00000801`.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};

use crate::data::dataset::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn format_err(offset: u64, reason: impl Into<String>) -> Error {
    Error::Format {
        offset,
        reason: reason.into(),
    }
}

fn read_u32(cur: &mut Cursor<&[u8]>, what: &str) -> Result<u32> {
    let at = cur.position();
    cur.read_u32::<BigEndian>()
        .map_err(|_| format_err(at, format!("truncated {what}")))
}

fn read_payload(cur: &mut Cursor<&[u8]>, len: usize) -> Result<Vec<u8>> {
    let at = cur.position();
    let mut buf = vec![0u8; len];
    cur.read_exact(&mut buf)
        .map_err(|_| format_err(at, format!("payload truncated, expected {len} bytes")))?;
    if cur.position() != cur.get_ref().len() as u64 {
        return Err(format_err(cur.position(), "trailing bytes after payload"));
    }
    Ok(buf)
}

/// Images as `[N, 1, rows, cols]` floats scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut cur = Cursor::new(bytes);
    let magic = read_u32(&mut cur, "magic")?;
    if magic != IMAGES_MAGIC {
        return Err(format_err(0, format!("bad image magic {magic:#010x}")));
    }
    let n = read_u32(&mut cur, "image count")? as usize;
    let rows = read_u32(&mut cur, "row count")? as usize;
    let cols = read_u32(&mut cur, "column count")? as usize;
    let payload = read_payload(&mut cur, n * rows * cols)?;
    let data = payload.into_iter().map(|v| v as f32 / 255.0).collect();
    Tensor::new(vec![n, 1, rows, cols], data)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut cur = Cursor::new(bytes);
    let magic = read_u32(&mut cur, "magic")?;
    if magic != LABELS_MAGIC {
        return Err(format_err(0, format!("bad label magic {magic:#010x}")));
    }
    let n = read_u32(&mut cur, "label count")? as usize;
    Ok(read_payload(&mut cur, n)?
        .into_iter()
        .map(usize::from)
        .collect())
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = parse_idx_images(&fs::read(images_path.as_ref())?)?;
    let labels = parse_idx_labels(&fs::read(labels_path.as_ref())?)?;
    if labels.len() != images.batch() {
        // Offset of the label count field.
        return Err(format_err(
            4,
            format!("{} labels for {} images", labels.len(), images.batch()),
        ));
    }
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    let name = images_path
        .as_ref()
        .file_stem()
        .map_or_else(|| "idx".to_string(), |s| s.to_string_lossy().into_owned());
    Dataset::new(name, images, labels, classes)
}

/// Serializes `[N, rows, cols]` u8 images.
pub fn write_idx_images(n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.write_u32::<BigEndian>(IMAGES_MAGIC).unwrap();
    for d in [n, rows, cols] {
        out.write_u32::<BigEndian>(d as u32).unwrap();
    }
    out.extend_from_slice(pixels);
    out
}

pub fn write_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.write_u32::<BigEndian>(LABELS_MAGIC).unwrap();
    out.write_u32::<BigEndian>(labels.len() as u32).unwrap();
    out.extend_from_slice(labels);
    out
}
