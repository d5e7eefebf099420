//! Checkpoint files: a text header followed by little-endian `f32` blobs.
//!
//! ```text
//! robust-adapt checkpoint
//! format_version = 1
//! kind = adapter
//! <key = value metadata lines>
//! fields = w1:8192,b1:128,...
//! payload_bytes = 66048
//! payload_sha256 = <hex>
//! ---
//! <payload>
//! ```
//!
//! Field blobs appear in the order listed by `fields`.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "robust-adapt checkpoint";
const SEPARATOR: &[u8] = b"\n---\n";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: Vec<(String, String)>,
    pub fields: Vec<(String, Vec<f32>)>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            meta: Vec::new(),
            fields: Vec::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.push((key.to_string(), value.to_string()));
        self
    }

    pub fn with_field(mut self, name: &str, values: &[f32]) -> Self {
        self.fields.push((name.to_string(), values.to_vec()));
        self
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("missing header key `{key}`")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta(key)?;
        raw.parse()
            .map_err(|_| Error::Checkpoint(format!("header key `{key}`: cannot parse `{raw}`")))
    }

    /// The named blob, which must hold exactly `len` values.
    pub fn field(&self, name: &str, len: usize) -> Result<&[f32]> {
        let (_, v) = self
            .fields
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing field `{name}`")))?;
        if v.len() != len {
            return Err(Error::Checkpoint(format!(
                "field `{name}` has {} values, expected {len}",
                v.len()
            )));
        }
        Ok(v)
    }

    pub fn encode(&self) -> Vec<u8> {
        let payload: Vec<u8> = self
            .fields
            .iter()
            .flat_map(|(_, v)| v.iter().flat_map(|x| x.to_le_bytes()))
            .collect();
        let mut header = format!("{MAGIC}\nformat_version = {CHECKPOINT_VERSION}\nkind = {}\n", self.kind);
        for (k, v) in &self.meta {
            header.push_str(&format!("{k} = {v}\n"));
        }
        let fields: Vec<String> = self.fields.iter().map(|(n, v)| format!("{n}:{}", v.len())).collect();
        header.push_str(&format!("fields = {}\n", fields.join(",")));
        header.push_str(&format!("payload_bytes = {}\n", payload.len()));
        header.push_str(&format!("payload_sha256 = {}", hex(&Sha256::digest(&payload))));
        let mut out = header.into_bytes();
        out.extend_from_slice(SEPARATOR);
        out.extend_from_slice(&payload);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let split = bytes
            .windows(SEPARATOR.len())
            .position(|w| w == SEPARATOR)
            .ok_or_else(|| bad("missing header terminator".into()))?;
        let header = std::str::from_utf8(&bytes[..split]).map_err(|_| bad("header is not UTF-8".into()))?;
        let payload = &bytes[split + SEPARATOR.len()..];

        let mut lines = header.lines();
        if lines.next() != Some(MAGIC) {
            return Err(bad("not a robust-adapt checkpoint".into()));
        }
        let mut entries = Vec::new();
        for line in lines {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| bad(format!("malformed header line `{line}`")))?;
            entries.push((k.to_string(), v.to_string()));
        }
        let take = |key: &str| -> Result<String> {
            entries
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.clone())
                .ok_or_else(|| bad(format!("missing header key `{key}`")))
        };
        let version = take("format_version")?;
        if version != CHECKPOINT_VERSION.to_string() {
            return Err(Error::VersionMismatch {
                file: "checkpoint".into(),
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let expected_len: usize = take("payload_bytes")?
            .parse()
            .map_err(|_| bad("payload_bytes is not a count".into()))?;
        if payload.len() != expected_len {
            return Err(bad(format!(
                "payload has {} bytes, header says {expected_len}",
                payload.len()
            )));
        }
        if hex(&Sha256::digest(payload)) != take("payload_sha256")? {
            return Err(bad("payload checksum mismatch".into()));
        }

        let mut fields = Vec::new();
        let mut offset = 0usize;
        let spec = take("fields")?;
        for item in spec.split(',').filter(|s| !s.is_empty()) {
            let (name, len) = item
                .split_once(':')
                .ok_or_else(|| bad(format!("malformed field entry `{item}`")))?;
            let len: usize = len.parse().map_err(|_| bad(format!("bad length in `{item}`")))?;
            let end = offset + 4 * len;
            if end > payload.len() {
                return Err(bad(format!("field `{name}` runs past the payload")));
            }
            let values = payload[offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            fields.push((name.to_string(), values));
            offset = end;
        }
        if offset != payload.len() {
            return Err(bad("trailing bytes after the last field".into()));
        }

        let reserved = ["format_version", "kind", "fields", "payload_bytes", "payload_sha256"];
        Ok(Self {
            kind: take("kind")?,
            meta: entries
                .into_iter()
                .filter(|(k, _)| !reserved.contains(&k.as_str()))
                .collect(),
            fields,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    /// Errors unless this checkpoint holds a model of `kind`.
    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!("expected a `{kind}` checkpoint, found `{}`", self.kind)))
        }
    }
}
