//! Binary and CSV storage for labelled datasets.
//!
//! Layout: 8-byte magic, little-endian `u32` header length, JSON
//! [`DatasetHeader`], then `count * n` little-endian `f32` features and
//! `count * 3` little-endian `f64` labels, both row-major.

use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{LpplsError, Result};
use crate::noise::{Dataset, DatasetHeader, DATASET_FORMAT_VERSION};

const MAGIC: &[u8; 8] = b"LPPLSDS\0";

/// Split off a magic-tagged JSON header; shared with the model file format.
pub(crate) fn read_header<'a>(bytes: &'a [u8], magic: &[u8; 8], what: &str) -> Result<(&'a [u8], &'a [u8])> {
    if bytes.len() < 12 || &bytes[..8] != magic {
        return Err(LpplsError::Version(format!("not a {what} file (bad magic)")));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let rest = &bytes[12..];
    if rest.len() < len {
        return Err(LpplsError::Format(format!(
            "{what} header claims {len} bytes, {} present",
            rest.len()
        )));
    }
    Ok(rest.split_at(len))
}

pub(crate) fn write_header(out: &mut Vec<u8>, magic: &[u8; 8], header_json: &[u8]) {
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(header_json);
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Dataset {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(12 + header.len() + 4 * self.features.len() + 8 * self.labels.len());
        write_header(&mut out, MAGIC, &header);
        for f in &self.features {
            out.extend_from_slice(&f.to_le_bytes());
        }
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, body) = read_header(bytes, MAGIC, "dataset")?;
        let header: DatasetHeader = serde_json::from_slice(header)
            .map_err(|e| LpplsError::Version(format!("unreadable dataset header: {e}")))?;
        if header.format_version != DATASET_FORMAT_VERSION {
            return Err(LpplsError::Version(format!(
                "dataset format {} (supported: {DATASET_FORMAT_VERSION})",
                header.format_version
            )));
        }
        let nf = header.count * header.n;
        let nl = header.count * 3;
        let expected = 4 * nf + 8 * nl;
        if body.len() != expected {
            return Err(LpplsError::Format(format!(
                "dataset body has {} bytes, expected {expected}",
                body.len()
            )));
        }
        let (fb, lb) = body.split_at(4 * nf);
        let features = fb
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let labels = lb
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Dataset {
            header,
            features,
            labels,
        })
    }

    /// SHA-256 of the binary encoding.
    pub fn content_hash(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// One row per example: `tc,m,omega,x0,...,x{n-1}`.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut head = vec!["tc".to_string(), "m".into(), "omega".into()];
        head.extend((0..self.width()).map(|i| format!("x{i}")));
        w.write_record(&head)?;
        for i in 0..self.len() {
            let mut row: Vec<String> = self.label(i).iter().map(|v| v.to_string()).collect();
            row.extend(self.row(i).iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{gen_dataset, NoiseKind, ScenarioSpec};

    fn small() -> Dataset {
        let spec = ScenarioSpec {
            n: 40,
            ..ScenarioSpec::with_kind(NoiseKind::Both)
        };
        gen_dataset(&spec, 5).unwrap()
    }

    #[test]
    fn bytes_roundtrip() {
        let d = small();
        let back = Dataset::from_bytes(&d.to_bytes().unwrap()).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.content_hash().unwrap(), d.content_hash().unwrap());
    }

    #[test]
    fn empty_dataset_is_a_valid_file() {
        let d = gen_dataset(&ScenarioSpec::default(), 0).unwrap();
        let back = Dataset::from_bytes(&d.to_bytes().unwrap()).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn corruption_is_classified() {
        let bytes = small().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Dataset::from_bytes(&bad), Err(LpplsError::Version(_))));
        assert!(matches!(
            Dataset::from_bytes(&bytes[..bytes.len() - 3]),
            Err(LpplsError::Format(_))
        ));
        assert!(matches!(Dataset::from_bytes(&bytes[..20]), Err(LpplsError::Format(_))));
    }

    #[test]
    fn csv_has_one_row_per_example() {
        let d = small();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert!(text.starts_with("tc,m,omega,x0,"));
    }

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
