//! ESV1 volume files: one dense 3D array per file.
//!
//! Layout (all integers little-endian):
//!   magic "ESV1" | u32 version (=1) | u32 dims h,w,d | f32 spacing h,w,d
//!   | u8 dtype (0 = f32 image, 1 = u16 labels) | payload, row-major
//!   h-major.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"ESV1";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Esv1Payload {
    ImageF32(Vec<f32>),
    LabelsU16(Vec<u16>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Esv1Volume {
    pub dims: (u32, u32, u32),
    pub spacing: (f32, f32, f32),
    pub payload: Esv1Payload,
}

impl Esv1Volume {
    pub fn voxels(&self) -> usize {
        self.dims.0 as usize * self.dims.1 as usize * self.dims.2 as usize
    }

    fn payload_len(&self) -> usize {
        match &self.payload {
            Esv1Payload::ImageF32(v) => v.len(),
            Esv1Payload::LabelsU16(v) => v.len(),
        }
    }
}

pub fn write_esv1(path: &Path, vol: &Esv1Volume) -> Result<()> {
    if vol.payload_len() != vol.voxels() {
        return Err(Error::contract(format!(
            "ESV1: payload has {} values for dims {:?}",
            vol.payload_len(),
            vol.dims
        )));
    }
    let mut buf: Vec<u8> = Vec::with_capacity(27 + vol.voxels() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for d in [vol.dims.0, vol.dims.1, vol.dims.2] {
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for s in [vol.spacing.0, vol.spacing.1, vol.spacing.2] {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    match &vol.payload {
        Esv1Payload::ImageF32(values) => {
            buf.push(0);
            for v in values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        Esv1Payload::LabelsU16(values) => {
            buf.push(1);
            for v in values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn read_esv1(path: &Path) -> Result<Esv1Volume> {
    let loc = || path.display().to_string();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::parse(loc(), e.to_string()))?
        .read_to_end(&mut bytes)?;
    parse_esv1(&bytes, &loc())
}

pub fn parse_esv1(bytes: &[u8], origin: &str) -> Result<Esv1Volume> {
    let need = |n: usize, what: &str| -> Result<()> {
        if bytes.len() < n {
            return Err(Error::parse(
                origin,
                format!("truncated before {what}: {} bytes total", bytes.len()),
            ));
        }
        Ok(())
    };
    need(4, "magic")?;
    if &bytes[..4] != MAGIC {
        return Err(Error::parse(
            origin,
            format!("bad magic {:?}, expected \"ESV1\"", &bytes[..4.min(bytes.len())]),
        ));
    }
    need(29, "header")?;
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(Error::parse(origin, format!("unsupported version {version}")));
    }
    let dims = (u32_at(8), u32_at(12), u32_at(16));
    let spacing = (f32_at(20), f32_at(24), f32_at(28));
    need(33, "dtype tag")?;
    let dtype = bytes[32];
    let voxels = dims.0 as usize * dims.1 as usize * dims.2 as usize;
    let payload_offset = 33;
    let payload = match dtype {
        0 => {
            let len = voxels * 4;
            if bytes.len() != payload_offset + len {
                return Err(Error::parse(
                    origin,
                    format!(
                        "payload length {} does not match dims {:?} (expected {len})",
                        bytes.len() - payload_offset,
                        dims
                    ),
                ));
            }
            let values = bytes[payload_offset..]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Esv1Payload::ImageF32(values)
        }
        1 => {
            let len = voxels * 2;
            if bytes.len() != payload_offset + len {
                return Err(Error::parse(
                    origin,
                    format!(
                        "payload length {} does not match dims {:?} (expected {len})",
                        bytes.len() - payload_offset,
                        dims
                    ),
                ));
            }
            let values = bytes[payload_offset..]
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Esv1Payload::LabelsU16(values)
        }
        other => {
            return Err(Error::parse(origin, format!("unknown dtype tag {other}")));
        }
    };
    Ok(Esv1Volume {
        dims,
        spacing,
        payload,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_image() -> Esv1Volume {
        Esv1Volume {
            dims: (2, 3, 2),
            spacing: (1.5, 1.5, 2.0),
            payload: Esv1Payload::ImageF32((0..12).map(|i| i as f32 * 0.25).collect()),
        }
    }

    #[test]
    fn image_round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol.esv1");
        write_esv1(&path, &sample_image()).unwrap();
        let first = std::fs::read(&path).unwrap();
        let loaded = read_esv1(&path).unwrap();
        assert_eq!(loaded, sample_image());
        write_esv1(&path, &loaded).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    #[test]
    fn labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lbl.esv1");
        let vol = Esv1Volume {
            dims: (2, 2, 2),
            spacing: (1.0, 1.0, 1.0),
            payload: Esv1Payload::LabelsU16(vec![0, 1, 2, 65535, 0, 3, 0, 1]),
        };
        write_esv1(&path, &vol).unwrap();
        assert_eq!(read_esv1(&path).unwrap(), vol);
    }

    #[test]
    fn corrupted_magic_is_a_typed_parse_error() {
        let mut bytes = Vec::new();
        {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("v.esv1");
            write_esv1(&path, &sample_image()).unwrap();
            bytes = std::fs::read(&path).unwrap();
        }
        bytes[0] = b'X';
        match parse_esv1(&bytes, "mem") {
            Err(Error::Parse { message, .. }) => assert!(message.contains("magic")),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_a_typed_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.esv1");
        write_esv1(&path, &sample_image()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        for cut in [0, 3, 10, 33, bytes.len() - 1] {
            match parse_esv1(&bytes[..cut], "mem") {
                Err(Error::Parse { .. }) => {}
                other => panic!("cut {cut}: expected parse error, got {other:?}"),
            }
        }
        // Extra bytes are also rejected.
        let mut extended = bytes.clone();
        extended.push(0);
        assert!(parse_esv1(&extended, "mem").is_err());
    }

    #[test]
    fn unknown_dtype_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.esv1");
        write_esv1(&path, &sample_image()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[32] = 9;
        assert!(matches!(parse_esv1(&bytes, "mem"), Err(Error::Parse { .. })));
    }
}
