//! Binary container shared by model checkpoints and distribution sets.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        4 bytes
//! version      u32
//! descriptor   u32 byte length + UTF-8 text
//! blob*        u32 value count + values (f32 or f64)
//! checksum     u64, wrapping sum of every preceding byte
//! ```
//!
//! The descriptor says how many blobs follow and what they are called, so a
//! truncated file reports the blob it stopped in.

use crate::error::CheckpointError;

pub const FORMAT_VERSION: u32 = 1;

pub trait Element: Copy {
    const SIZE: usize;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const SIZE: usize = 4;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().unwrap())
    }
}

impl Element for f64 {
    const SIZE: usize = 8;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().unwrap())
    }
}

/// Expected blob: a name for error messages and, when fixed, its length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlobSpec {
    pub name: String,
    pub len: Option<usize>,
}

impl BlobSpec {
    pub fn exact(name: impl Into<String>, len: usize) -> Self {
        Self {
            name: name.into(),
            len: Some(len),
        }
    }

    pub fn any(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            len: None,
        }
    }
}

pub fn checksum(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0u64, |acc, &b| acc.wrapping_add(b as u64))
}

pub fn encode<E: Element>(magic: [u8; 4], descriptor: &str, blobs: &[&[E]]) -> Vec<u8> {
    let total: usize = blobs.iter().map(|b| 4 + b.len() * E::SIZE).sum();
    let mut out = Vec::with_capacity(20 + descriptor.len() + total);
    out.extend_from_slice(&magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(descriptor.len() as u32).to_le_bytes());
    out.extend_from_slice(descriptor.as_bytes());
    for blob in blobs {
        out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
        for &v in *blob {
            v.write_le(&mut out);
        }
    }
    let sum = checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(CheckpointError::Truncated {
                section: section.to_string(),
            }),
        }
    }

    fn u32(&mut self, section: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().unwrap()))
    }
}

/// Decodes a container; `layout` maps the descriptor to the expected blobs.
pub fn decode<E: Element>(
    magic: [u8; 4],
    bytes: &[u8],
    layout: impl FnOnce(&str) -> Result<Vec<BlobSpec>, CheckpointError>,
) -> Result<(String, Vec<Vec<E>>), CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    let found: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if found != magic {
        return Err(CheckpointError::BadMagic {
            expected: magic,
            found,
        });
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    let dlen = r.u32("descriptor")? as usize;
    let descriptor = std::str::from_utf8(r.take(dlen, "descriptor")?)
        .map_err(|e| CheckpointError::Descriptor(e.to_string()))?
        .to_string();
    let specs = layout(&descriptor)?;
    let mut blobs = Vec::with_capacity(specs.len());
    for spec in &specs {
        let n = r.u32(&spec.name)? as usize;
        if let Some(want) = spec.len {
            if want != n {
                return Err(CheckpointError::BlobLength {
                    section: spec.name.clone(),
                    expected: want,
                    found: n,
                });
            }
        }
        let raw = r.take(n * E::SIZE, &spec.name)?;
        blobs.push(raw.chunks_exact(E::SIZE).map(E::read_le).collect());
    }
    let body_end = r.pos;
    let stored = u64::from_le_bytes(r.take(8, "checksum")?.try_into().unwrap());
    let computed = checksum(&bytes[..body_end]);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Descriptor(format!(
            "{} trailing bytes after checksum",
            bytes.len() - r.pos
        )));
    }
    Ok((descriptor, blobs))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MAGIC: [u8; 4] = *b"TEST";

    fn layout(_: &str) -> Result<Vec<BlobSpec>, CheckpointError> {
        Ok(vec![BlobSpec::exact("first", 2), BlobSpec::any("second")])
    }

    #[test]
    fn round_trip() {
        let bytes = encode::<f32>(MAGIC, "hello", &[&[1.0, -2.5], &[f32::MIN_POSITIVE]]);
        let (d, blobs) = decode::<f32>(MAGIC, &bytes, layout).unwrap();
        assert_eq!(d, "hello");
        assert_eq!(blobs, vec![vec![1.0, -2.5], vec![f32::MIN_POSITIVE]]);
    }

    #[test]
    fn corruption_is_classified() {
        let bytes = encode::<f64>(MAGIC, "d", &[&[1.0, 2.0], &[3.0]]);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode::<f64>(MAGIC, &bad, layout),
            Err(CheckpointError::BadMagic { .. })
        ));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert_eq!(
            decode::<f64>(MAGIC, &bad, layout),
            Err(CheckpointError::VersionMismatch {
                expected: 1,
                found: 9
            })
        );
        // cut inside the second blob's values
        let cut = bytes.len() - 8 - 4;
        assert_eq!(
            decode::<f64>(MAGIC, &bytes[..cut], layout),
            Err(CheckpointError::Truncated {
                section: "second".into()
            })
        );
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 12] ^= 0x40;
        assert!(matches!(
            decode::<f64>(MAGIC, &bad, layout),
            Err(CheckpointError::Checksum { .. })
        ));
    }
}
