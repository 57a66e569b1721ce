//! Versioned, self-describing checkpoint documents.
//!
//! Numeric arrays are stored as base64 strings of little-endian `f64`
//! bytes, so values round-trip bit-exactly through the JSON text.

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT: &str = "safety-filter-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedArray {
    pub shape: Vec<usize>,
    pub data: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub kind: String,
    #[serde(default)]
    pub metadata: serde_json::Value,
    pub arrays: BTreeMap<String, EncodedArray>,
}

pub fn encode_f64s(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

pub fn decode_f64s(text: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| Error::Format(format!("bad base64 array: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Format("array byte length not a multiple of 8".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

impl Checkpoint {
    pub fn new(kind: &str, metadata: serde_json::Value) -> Self {
        Self {
            format: FORMAT.to_string(),
            version: VERSION,
            kind: kind.to_string(),
            metadata,
            arrays: BTreeMap::new(),
        }
    }

    pub fn put(&mut self, name: &str, shape: Vec<usize>, values: &[f64]) {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.arrays.insert(
            name.to_string(),
            EncodedArray {
                shape,
                data: encode_f64s(values),
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let arr = self
            .arrays
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks array `{name}`")))?;
        let values = decode_f64s(&arr.data)?;
        if arr.shape.iter().product::<usize>() != values.len() {
            return Err(Error::Format(format!("array `{name}` shape mismatch")));
        }
        Ok((arr.shape.clone(), values))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.format != FORMAT {
            return Err(Error::Format(format!("unknown format `{}`", self.format)));
        }
        if self.version != VERSION {
            return Err(Error::Format(format!("unsupported version {}", self.version)));
        }
        if self.kind != kind {
            return Err(Error::Format(format!(
                "expected a `{kind}` checkpoint, found `{}`",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn to_string_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_string_pretty()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn arrays_round_trip_bit_exact(values in proptest::collection::vec(any::<f64>(), 0..64)) {
            let decoded = decode_f64s(&encode_f64s(&values)).unwrap();
            prop_assert_eq!(values.len(), decoded.len());
            for (a, b) in values.iter().zip(&decoded) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn kind_and_version_checked() {
        let mut c = Checkpoint::new("ensemble", serde_json::json!({"members": 2}));
        c.put("w", vec![2], &[1.0, 2.0]);
        let parsed = Checkpoint::parse(&c.to_string_pretty().unwrap()).unwrap();
        assert_eq!(parsed, c);
        assert!(parsed.expect_kind("ensemble").is_ok());
        assert!(parsed.expect_kind("policy").is_err());
        assert!(parsed.get("missing").is_err());
    }
}
