//! Tensor archive: a text manifest followed by raw little-endian f64 blobs.
//!
//! ```text
//! SEGMOE-TENSORS 1
//! meta <key> <value...>
//! tensor <name> <d0>x<d1>x... <numel> <byte offset>
//! end
//! <blob bytes>
//! ```
//!
//! Scalars use the shape token `scalar`. Byte offsets are relative to the
//! first byte after the `end` line. Names and meta keys must not contain
//! whitespace; meta values must be single-line.

use std::io::{BufRead, Write};

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &str = "SEGMOE-TENSORS 1";

#[derive(Clone, Debug, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub numel: usize,
    pub offset: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorArchive {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

fn shape_token(shape: &[usize]) -> String {
    if shape.is_empty() {
        "scalar".to_string()
    } else {
        shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
    }
}

fn parse_shape(tok: &str) -> Result<Vec<usize>> {
    if tok == "scalar" {
        return Ok(Vec::new());
    }
    tok.split('x')
        .map(|d| d.parse::<usize>().map_err(|_| Error::Format(format!("bad shape `{tok}`"))))
        .collect()
}

fn check_token(kind: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(char::is_whitespace) {
        return Err(Error::Format(format!("{kind} `{s}` must be a non-empty token")));
    }
    Ok(())
}

impl TensorArchive {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Manifest entries in write order.
    pub fn manifest(&self) -> Vec<TensorEntry> {
        let mut offset = 0;
        self.tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    numel: t.numel(),
                    offset,
                };
                offset += t.numel() * 8;
                e
            })
            .collect()
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut header = String::new();
        header.push_str(MAGIC);
        header.push('\n');
        for (k, v) in &self.meta {
            check_token("meta key", k)?;
            if v.contains('\n') {
                return Err(Error::Format(format!("meta value for `{k}` spans lines")));
            }
            header.push_str(&format!("meta {k} {v}\n"));
        }
        for e in self.manifest() {
            check_token("tensor name", &e.name)?;
            header.push_str(&format!(
                "tensor {} {} {} {}\n",
                e.name,
                shape_token(&e.shape),
                e.numel,
                e.offset
            ));
        }
        header.push_str("end\n");
        w.write_all(header.as_bytes())?;
        for (_, t) in &self.tensors {
            let mut buf = Vec::with_capacity(t.numel() * 8);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    /// Reads only the manifest (no blob data).
    pub fn read_manifest(r: impl BufRead) -> Result<(Vec<(String, String)>, Vec<TensorEntry>)> {
        let mut lines = r.lines();
        let first = lines.next().transpose()?.unwrap_or_default();
        if first != MAGIC {
            return Err(Error::Format(format!("bad magic line `{first}`")));
        }
        let mut meta = Vec::new();
        let mut entries = Vec::new();
        loop {
            let line = lines
                .next()
                .transpose()?
                .ok_or_else(|| Error::Format("missing `end` line".into()))?;
            if line == "end" {
                break;
            }
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                meta.push((k.to_string(), v.to_string()));
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                let [name, shape, numel, offset] = parts[..] else {
                    return Err(Error::Format(format!("bad tensor line `{line}`")));
                };
                let parse = |s: &str| {
                    s.parse::<usize>()
                        .map_err(|_| Error::Format(format!("bad number `{s}` in `{line}`")))
                };
                let shape = parse_shape(shape)?;
                let numel = parse(numel)?;
                if shape.iter().product::<usize>() != numel {
                    return Err(Error::Format(format!("shape/numel mismatch in `{line}`")));
                }
                entries.push(TensorEntry {
                    name: name.to_string(),
                    shape,
                    numel,
                    offset: parse(offset)?,
                });
            } else {
                return Err(Error::Format(format!("unexpected line `{line}`")));
            }
        }
        Ok((meta, entries))
    }

    pub fn read_from(mut r: impl BufRead) -> Result<Self> {
        // Header lines are consumed byte-exactly so the blob starts right
        // after `end\n`.
        let mut header = Vec::new();
        loop {
            let mut line = Vec::new();
            let n = r.read_until(b'\n', &mut line)?;
            if n == 0 {
                return Err(Error::Format("missing `end` line".into()));
            }
            let done = line == b"end\n";
            header.extend_from_slice(&line);
            if done {
                break;
            }
        }
        let (meta, entries) = Self::read_manifest(header.as_slice())?;
        let mut blob = Vec::new();
        r.read_to_end(&mut blob)?;
        let mut tensors = Vec::with_capacity(entries.len());
        for e in entries {
            let end = e.offset + e.numel * 8;
            let bytes = blob
                .get(e.offset..end)
                .ok_or_else(|| Error::Format(format!("tensor `{}` overruns the blob", e.name)))?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((e.name, Tensor::new(e.shape, data)?));
        }
        Ok(TensorArchive { meta, tensors })
    }
}
