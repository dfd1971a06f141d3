//! Dataset files.
//!
//! ```text
//! "DADMDS1"  version:u8  count:u64
//! per record: env:u32 label:u8 attack:u16 (0xffff = live) presence:u8 (bit m) h:u32 w:u32
//!             then rgb, depth, ir as 3*h*w f32 each
//! ```
//!
//! All integers and reals are little-endian.

use std::fs;
use std::path::Path;

use super::{Dataset, Record};
use crate::error::{Error, Result};
use crate::model::ImageSample;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 7] = b"DADMDS1";
pub const VERSION: u8 = 1;
const NO_ATTACK: u16 = u16::MAX;
const RECORD_HEADER: usize = 4 + 1 + 2 + 1 + 4 + 4;

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

pub fn to_bytes(data: &Dataset) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(data.records.len() as u64).to_le_bytes());
    for (i, r) in data.records.iter().enumerate() {
        let shape = r.sample.images[0].shape().to_vec();
        if shape.len() != 3 || shape[0] != 3 || r.sample.images.iter().any(|t| t.shape() != shape.as_slice()) {
            return Err(Error::InvalidArgument(format!("record {i}: images must share a (3, H, W) shape")));
        }
        let env = u32::try_from(r.env).map_err(|_| Error::InvalidArgument(format!("record {i}: env id too large")))?;
        let attack = match r.attack {
            None => NO_ATTACK,
            Some(a) if a < NO_ATTACK as usize => a as u16,
            Some(_) => return Err(Error::InvalidArgument(format!("record {i}: attack id too large"))),
        };
        if r.label > 1 {
            return Err(Error::InvalidArgument(format!("record {i}: label must be 0 or 1")));
        }
        let presence = r.sample.presence.iter().enumerate().fold(0u8, |acc, (m, &p)| acc | (u8::from(p) << m));
        out.extend_from_slice(&env.to_le_bytes());
        out.push(r.label);
        out.extend_from_slice(&attack.to_le_bytes());
        out.push(presence);
        out.extend_from_slice(&(shape[1] as u32).to_le_bytes());
        out.extend_from_slice(&(shape[2] as u32).to_le_bytes());
        for img in &r.sample.images {
            for &v in img.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return format_err(format!("truncated file while reading {what} at byte {}", self.pos));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("exact length"))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic").ok() != Some(MAGIC.as_slice()) {
        return format_err("bad magic: not a dataset file");
    }
    let version = r.array::<1>("version")?[0];
    if version != VERSION {
        return format_err(format!("unsupported dataset version {version}"));
    }
    let count = u64::from_le_bytes(r.array("record count")?);
    // every record needs at least its header, so a huge count is caught early
    let room = (bytes.len() - r.pos) / RECORD_HEADER;
    if count > room as u64 {
        return format_err(format!("record count {count} does not fit in {} bytes", bytes.len()));
    }
    let mut records = Vec::with_capacity(count as usize);
    for i in 0..count as usize {
        let env = u32::from_le_bytes(r.array("env id")?) as usize;
        let label = r.array::<1>("label")?[0];
        if label > 1 {
            return format_err(format!("record {i}: label byte {label}"));
        }
        let attack = match u16::from_le_bytes(r.array("attack id")?) {
            NO_ATTACK => None,
            a => Some(a as usize),
        };
        let bits = r.array::<1>("presence")?[0];
        if bits > 0b111 {
            return format_err(format!("record {i}: presence bits {bits:#b}"));
        }
        let h = u32::from_le_bytes(r.array("height")?) as usize;
        let w = u32::from_le_bytes(r.array("width")?) as usize;
        let n = 3usize
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .ok_or_else(|| Error::Format(format!("record {i}: image size overflows")))?;
        let mut images = Vec::with_capacity(3);
        for m in 0..3 {
            let raw = r.take(n.checked_mul(4).unwrap_or(usize::MAX), "image payload")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            images.push(Tensor::new(vec![3, h, w], data).map_err(|_| Error::Format(format!("record {i}: modality {m}")))?);
        }
        let images: [Tensor; 3] = images.try_into().expect("three images");
        records.push(Record {
            env,
            label,
            attack,
            sample: ImageSample { images, presence: [0, 1, 2].map(|m| bits >> m & 1 == 1) },
        });
    }
    if r.pos != bytes.len() {
        return format_err(format!(
            "{} trailing bytes after {count} records: record table and payload disagree",
            bytes.len() - r.pos
        ));
    }
    Ok(Dataset { records })
}

pub fn write_dataset(data: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(data)?)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    from_bytes(&fs::read(path)?)
}
