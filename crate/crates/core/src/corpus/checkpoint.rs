//! Checkpoint container shared by model weights and soft prompts.
//!
//! Layout: a UTF-8 header of `key=value` lines terminated by an empty
//! line, then a binary array section. The header always starts with the
//! magic line, `version`, and `kind`, and ends with `digest` (SHA-256 of
//! the array section, hex) and `arrays` (array count). Each array is
//! encoded as
//!
//! ```text
//! u32 name_len | name bytes | u32 rank | u64 dim × rank | f64 × numel
//! ```
//!
//! with every integer and float little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &str = "SOFTPROMPT-CHECKPOINT";
pub const FORMAT_VERSION: u32 = 1;
const RESERVED: [&str; 4] = ["version", "kind", "digest", "arrays"];

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: Vec<(String, String)>,
    pub arrays: Vec<(String, Tensor)>,
}

fn encode_arrays<'a>(arrays: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let mut out = Vec::new();
    for (name, t) in arrays {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&t.to_le_bytes());
    }
    out
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 of the array-section encoding of `arrays`.
pub fn array_digest(arrays: &[(String, &Tensor)]) -> String {
    sha256_hex(&encode_arrays(arrays.iter().map(|(n, t)| (n.as_str(), *t))))
}

/// SHA-256 of arbitrary bytes, hex encoded.
pub fn file_digest(bytes: &[u8]) -> String {
    sha256_hex(bytes)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Corrupt("array section ends early".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn meta_map(&self) -> BTreeMap<String, String> {
        self.meta.iter().cloned().collect()
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn array(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        for (k, v) in &self.meta {
            if k.is_empty() || k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::contract(format!("checkpoint meta `{k}` is not a single key=value line")));
            }
            if RESERVED.contains(&k.as_str()) {
                return Err(Error::contract(format!("checkpoint meta key `{k}` is reserved")));
            }
        }
        let body = encode_arrays(self.arrays.iter().map(|(n, t)| (n.as_str(), t)));
        let mut header = format!("{MAGIC}\nversion={FORMAT_VERSION}\nkind={}\n", self.kind);
        for (k, v) in &self.meta {
            header.push_str(&format!("{k}={v}\n"));
        }
        header.push_str(&format!(
            "digest={}\narrays={}\n\n",
            sha256_hex(&body),
            self.arrays.len()
        ));
        let mut out = header.into_bytes();
        out.extend_from_slice(&body);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| Error::Corrupt("header is not terminated".into()))?;
        let header = std::str::from_utf8(&bytes[..split])
            .map_err(|_| Error::Corrupt("header is not UTF-8".into()))?;
        let body = &bytes[split + 2..];
        let mut lines = header.lines();
        if lines.next() != Some(MAGIC) {
            return Err(Error::Corrupt("missing magic line".into()));
        }
        let mut fields = Vec::new();
        for line in lines {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Corrupt(format!("bad header line `{line}`")))?;
            fields.push((k.to_string(), v.to_string()));
        }
        let field = |key: &str| -> Result<&str> {
            fields
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Corrupt(format!("header is missing `{key}`")))
        };
        let version: u32 = field("version")?
            .parse()
            .map_err(|_| Error::Corrupt("version is not a number".into()))?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let kind = field("kind")?.to_string();
        let digest = field("digest")?.to_string();
        let count: usize = field("arrays")?
            .parse()
            .map_err(|_| Error::Corrupt("array count is not a number".into()))?;
        if sha256_hex(body) != digest {
            return Err(Error::Corrupt("digest mismatch; file is truncated or modified".into()));
        }

        let mut reader = Reader { buf: body, pos: 0 };
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = reader.u32()? as usize;
            let name = std::str::from_utf8(reader.take(name_len)?)
                .map_err(|_| Error::Corrupt("array name is not UTF-8".into()))?
                .to_string();
            let rank = reader.u32()? as usize;
            let shape = (0..rank)
                .map(|_| reader.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = reader.take(numel * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let tensor = Tensor::new(shape, data)
                .map_err(|e| Error::Corrupt(format!("array `{name}`: {e}")))?;
            arrays.push((name, tensor));
        }
        if reader.pos != body.len() {
            return Err(Error::Corrupt("trailing bytes after the last array".into()));
        }
        let meta = fields
            .into_iter()
            .filter(|(k, _)| !RESERVED.contains(&k.as_str()))
            .collect();
        Ok(Checkpoint { kind, meta, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            kind: "test".into(),
            meta: vec![("alpha".into(), "1".into()), ("name".into(), "x y".into())],
            arrays: vec![
                ("a".into(), Tensor::matrix(2, 2, vec![1.0, -2.5, 3.0, 1e-300]).unwrap()),
                ("b".into(), Tensor::vector(vec![f64::MIN_POSITIVE]).unwrap()),
            ],
        }
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let bytes = sample().to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, sample());
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = sample().to_bytes().unwrap();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(Checkpoint::from_bytes(cut), Err(Error::Corrupt(_))));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..10]),
            Err(Error::Corrupt(_))
        ));
    }

    #[test]
    fn flipped_byte_fails_digest() {
        let mut bytes = sample().to_bytes().unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Corrupt(_))));
    }

    #[test]
    fn other_versions_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        let text = String::from_utf8_lossy(&bytes).replacen("version=1", "version=9", 1);
        let err = Checkpoint::from_bytes(text.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Version { found: 9, expected: 1 }));
    }

    #[test]
    fn reserved_meta_keys_are_refused() {
        let mut c = sample();
        c.meta.push(("digest".into(), "x".into()));
        assert!(c.to_bytes().is_err());
    }
}
