//! Binary entry layout (little-endian):
//! `"THAC" | version u32 | epoch u32 | batch_seq u32 | boundary_module u32 |
//! freeze_version u32 | count u32 | ids u64×count | rank u32 | dims u64×rank |
//! payload f32×∏dims | payload byte length u64`.

use std::fs::File;
use std::io::{Read, Seek, SeekFrom};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, ReadBytesExt, WriteBytesExt};
use thaw_core::Tensor;

use crate::{Result, RuntimeError};

pub const MAGIC: &[u8; 4] = b"THAC";
pub const FORMAT_VERSION: u32 = 1;
const TRAILER_BYTES: u64 = 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntryHeader {
    pub epoch: u32,
    pub batch_seq: u32,
    pub boundary_module: u32,
    pub freeze_version: u32,
    pub sample_ids: Vec<u64>,
    pub dims: Vec<usize>,
}

impl EntryHeader {
    pub fn row_len(&self) -> usize {
        self.dims.iter().skip(1).product()
    }

    pub fn payload_len(&self) -> u64 {
        self.dims.iter().product::<usize>() as u64 * 4
    }
}

/// Where an entry sits in its file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EntryLocation {
    pub offset: u64,
    pub payload_offset: u64,
    /// Total entry size including header and trailer.
    pub len: u64,
}

/// A decoded entry.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub header: EntryHeader,
    pub tensor: Tensor<f32>,
}

pub fn encode_entry(header: &EntryHeader, payload: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + header.sample_ids.len() * 8 + payload.len() * 4);
    out.extend_from_slice(MAGIC);
    for v in [
        FORMAT_VERSION,
        header.epoch,
        header.batch_seq,
        header.boundary_module,
        header.freeze_version,
        header.sample_ids.len() as u32,
    ] {
        out.write_u32::<LittleEndian>(v).expect("vec write");
    }
    for &id in &header.sample_ids {
        out.write_u64::<LittleEndian>(id).expect("vec write");
    }
    out.write_u32::<LittleEndian>(header.dims.len() as u32)
        .expect("vec write");
    for &d in &header.dims {
        out.write_u64::<LittleEndian>(d as u64).expect("vec write");
    }
    let start = out.len();
    out.resize(start + payload.len() * 4, 0);
    LittleEndian::write_f32_into(payload, &mut out[start..]);
    out.write_u64::<LittleEndian>(payload.len() as u64 * 4)
        .expect("vec write");
    out
}

fn corrupt(offset: u64, reason: impl Into<String>) -> RuntimeError {
    RuntimeError::Corrupt {
        offset,
        reason: reason.into(),
    }
}

/// Parses the entry starting at `offset` within `buf`.
fn parse_header(buf: &[u8], offset: u64) -> Result<(EntryHeader, EntryLocation)> {
    let mut r = &buf[offset as usize..];
    let short = |_| corrupt(offset, "truncated header");
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(short)?;
    if &magic != MAGIC {
        return Err(corrupt(offset, "bad magic"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(short)?;
    if version != FORMAT_VERSION {
        return Err(corrupt(offset, format!("unsupported version {version}")));
    }
    let mut fields = [0u32; 5];
    for f in &mut fields {
        *f = r.read_u32::<LittleEndian>().map_err(short)?;
    }
    let [epoch, batch_seq, boundary_module, freeze_version, count] = fields;
    if count as usize > r.len() / 8 {
        return Err(corrupt(offset, "truncated sample ids"));
    }
    let mut sample_ids = vec![0u64; count as usize];
    r.read_u64_into::<LittleEndian>(&mut sample_ids)
        .map_err(short)?;
    let rank = r.read_u32::<LittleEndian>().map_err(short)?;
    if rank as usize > r.len() / 8 {
        return Err(corrupt(offset, "truncated dims"));
    }
    let mut dims = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        dims.push(r.read_u64::<LittleEndian>().map_err(short)? as usize);
    }
    let header = EntryHeader {
        epoch,
        batch_seq,
        boundary_module,
        freeze_version,
        sample_ids,
        dims,
    };
    if header.dims.first().copied() != Some(header.sample_ids.len()) {
        return Err(corrupt(
            offset,
            "leading dimension differs from sample count",
        ));
    }
    let payload_offset = offset + (buf.len() - offset as usize - r.len()) as u64;
    let payload_len = header.payload_len();
    let end = payload_offset + payload_len + TRAILER_BYTES;
    if end > buf.len() as u64 {
        return Err(corrupt(offset, "truncated payload"));
    }
    let trailer = LittleEndian::read_u64(&buf[(end - TRAILER_BYTES) as usize..end as usize]);
    if trailer != payload_len {
        return Err(corrupt(offset, "length check failed"));
    }
    Ok((
        header,
        EntryLocation {
            offset,
            payload_offset,
            len: end - offset,
        },
    ))
}

/// Result of scanning a cache file.
#[derive(Debug, Default)]
pub struct Scan {
    pub entries: Vec<(EntryHeader, EntryLocation)>,
    /// Offset and reason of the first unreadable entry; everything from there on is ignored.
    pub damaged_tail: Option<(u64, String)>,
    pub bytes: u64,
}

/// Reads every well-formed entry of `path` in order, stopping at the first
/// damaged one.
pub fn scan_file(path: &Path) -> Result<Scan> {
    let buf = std::fs::read(path)?;
    let mut scan = Scan {
        bytes: buf.len() as u64,
        ..Scan::default()
    };
    let mut offset = 0u64;
    while (offset as usize) < buf.len() {
        match parse_header(&buf, offset) {
            Ok((h, loc)) => {
                offset += loc.len;
                scan.entries.push((h, loc));
            }
            Err(RuntimeError::Corrupt { offset, reason }) => {
                scan.damaged_tail = Some((offset, reason));
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(scan)
}

/// Reads and validates one whole entry.
pub fn read_entry(path: &Path, loc: EntryLocation) -> Result<CacheEntry> {
    let mut f = File::open(path)?;
    f.seek(SeekFrom::Start(loc.offset))?;
    let mut buf = vec![0u8; loc.len as usize];
    f.read_exact(&mut buf)
        .map_err(|_| corrupt(loc.offset, "truncated entry"))?;
    let (header, inner) = parse_header(&buf, 0)?;
    let start = inner.payload_offset as usize;
    let mut data = vec![0f32; header.payload_len() as usize / 4];
    LittleEndian::read_f32_into(&buf[start..start + data.len() * 4], &mut data);
    let tensor = Tensor::new(header.dims.clone(), data)?;
    Ok(CacheEntry { header, tensor })
}

/// Checks the magic and trailer of an entry without reading its payload.
pub fn validate_entry(file: &mut File, loc: EntryLocation, payload_len: u64) -> Result<()> {
    let mut magic = [0u8; 4];
    file.seek(SeekFrom::Start(loc.offset))?;
    file.read_exact(&mut magic)
        .map_err(|_| corrupt(loc.offset, "truncated entry"))?;
    if &magic != MAGIC {
        return Err(corrupt(loc.offset, "bad magic"));
    }
    file.seek(SeekFrom::Start(loc.offset + loc.len - TRAILER_BYTES))?;
    let trailer = file
        .read_u64::<LittleEndian>()
        .map_err(|_| corrupt(loc.offset, "truncated entry"))?;
    if trailer != payload_len {
        return Err(corrupt(loc.offset, "length check failed"));
    }
    Ok(())
}

/// Reads payload row `row` (of `row_len` floats) into `out`.
pub fn read_row(file: &mut File, loc: EntryLocation, row: usize, out: &mut [f32]) -> Result<()> {
    let mut bytes = vec![0u8; out.len() * 4];
    file.seek(SeekFrom::Start(
        loc.payload_offset + (row * out.len() * 4) as u64,
    ))?;
    file.read_exact(&mut bytes)
        .map_err(|_| corrupt(loc.offset, "truncated payload"))?;
    LittleEndian::read_f32_into(&bytes, out);
    Ok(())
}
