//! Binary checkpoint container.
//!
//! ```text
//! DADM1\n
//! version 1\n
//! meta <key> <value>\n        (sorted by key, values without newlines)
//! tensors <count>\n
//! <name> <dims joined by 'x', or 'scalar'>\n
//! end\n
//! <little-endian f64 payloads in table order>
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &str = "DADM1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut head = format!("{MAGIC}\nversion {VERSION}\n");
        for (k, v) in &self.meta {
            if k.is_empty() || k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(Error::InvalidArgument(format!("unencodable meta entry {k:?}")));
            }
            head.push_str(&format!("meta {k} {v}\n"));
        }
        head.push_str(&format!("tensors {}\n", self.tensors.len()));
        for (name, t) in &self.tensors {
            if name.is_empty() || name.contains(char::is_whitespace) {
                return Err(Error::InvalidArgument(format!("unencodable tensor name {name:?}")));
            }
            let dims = if t.shape().is_empty() {
                "scalar".to_string()
            } else {
                t.shape().iter().map(usize::to_string).collect::<Vec<_>>().join("x")
            };
            head.push_str(&format!("{name} {dims}\n"));
        }
        head.push_str("end\n");
        let mut out = head.into_bytes();
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut next_line = |what: &str| -> Result<String> {
            let rest = &bytes[pos..];
            let Some(nl) = rest.iter().position(|&b| b == b'\n') else {
                return format_err(format!("truncated header while reading {what}"));
            };
            let line = std::str::from_utf8(&rest[..nl])
                .map_err(|_| Error::Format(format!("non-UTF-8 header line ({what})")))?
                .to_string();
            pos += nl + 1;
            Ok(line)
        };
        if next_line("magic")? != MAGIC {
            return format_err("bad magic: not a checkpoint file");
        }
        let version = next_line("version")?;
        match version.strip_prefix("version ").map(str::parse::<u32>) {
            Some(Ok(VERSION)) => {}
            Some(Ok(v)) => return format_err(format!("unsupported checkpoint version {v}")),
            _ => return format_err(format!("malformed version line {version:?}")),
        }
        let mut meta = BTreeMap::new();
        let count = loop {
            let line = next_line("meta")?;
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                meta.insert(k.to_string(), v.to_string());
            } else if let Some(n) = line.strip_prefix("tensors ") {
                break n.parse::<usize>().map_err(|_| Error::Format(format!("bad tensor count {n:?}")))?;
            } else {
                return format_err(format!("unexpected header line {line:?}"));
            }
        };
        let mut table = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let line = next_line("tensor table")?;
            let Some((name, dims)) = line.split_once(' ') else {
                return format_err(format!("malformed tensor entry {line:?}"));
            };
            let shape: Vec<usize> = if dims == "scalar" {
                Vec::new()
            } else {
                dims.split('x')
                    .map(|d| d.parse::<usize>().map_err(|_| Error::Format(format!("bad dimension in {line:?}"))))
                    .collect::<Result<_>>()?
            };
            table.push((name.to_string(), shape));
        }
        if next_line("end marker")? != "end" {
            return format_err("missing end marker after tensor table");
        }
        let payload = &bytes[pos..];
        let mut need = 0usize;
        for (_, s) in &table {
            let n = s.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            need = n
                .and_then(|n| n.checked_mul(8))
                .and_then(|b| need.checked_add(b))
                .ok_or_else(|| Error::Format("tensor table size overflows".into()))?;
        }
        if payload.len() != need {
            return format_err(format!(
                "payload holds {} bytes but the tensor table needs {need}",
                payload.len()
            ));
        }
        let mut off = 0;
        let mut tensors = Vec::with_capacity(table.len());
        for (name, shape) in table {
            let n: usize = shape.iter().product();
            let data = payload[off..off + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            off += 8 * n;
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self { meta, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
