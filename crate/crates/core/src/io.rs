//! Little-endian binary containers for embedding fields (`EMB1`) and label
//! images (`LBL1`).
//!
//! `EMB1`: magic, u8 version, u8 dtype (0 = f32, 1 = f64), u8 ndim = 2,
//! u8 reserved, u32 height, u32 width, u32 channels, then the values in
//! row-major, channel-last order.
//!
//! `LBL1`: magic, u8 version, u8 ndim = 2, u16 reserved, u32 height,
//! u32 width, then one u32 label per pixel in row-major order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::{EmbeddingField, LabelImage};

pub const FIELD_MAGIC: &[u8; 4] = b"EMB1";
pub const LABEL_MAGIC: &[u8; 4] = b"LBL1";
pub const VERSION: u8 = 1;
pub const FIELD_HEADER_LEN: usize = 20;
pub const LABEL_HEADER_LEN: usize = 16;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::TruncatedFile(format!(
                "{what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn finish(&self) -> Result<()> {
        let extra = self.bytes.len() - self.pos;
        if extra > 0 {
            return Err(Error::UnsupportedVersion(format!("{extra} trailing bytes after payload")));
        }
        Ok(())
    }
}

fn check_magic(r: &mut Reader<'_>, magic: &'static [u8; 4]) -> Result<()> {
    let expected = std::str::from_utf8(magic).expect("ascii magic");
    match r.take(4, "magic") {
        Ok(m) if m == magic => Ok(()),
        _ => Err(Error::BadMagic { expected }),
    }
}

fn dim(v: usize, what: &str) -> Result<[u8; 4]> {
    u32::try_from(v)
        .map(u32::to_le_bytes)
        .map_err(|_| Error::Encode(format!("{what} = {v} does not fit in u32")))
}

pub fn encode_field(field: &EmbeddingField, dtype: Dtype) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(FIELD_HEADER_LEN + field.data().len() * dtype.width());
    out.extend_from_slice(FIELD_MAGIC);
    out.extend_from_slice(&[VERSION, dtype.code(), 2, 0]);
    out.extend_from_slice(&dim(field.height(), "height")?);
    out.extend_from_slice(&dim(field.width(), "width")?);
    out.extend_from_slice(&dim(field.channels(), "channels")?);
    match dtype {
        Dtype::F32 => field.data().iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        Dtype::F64 => field.data().iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(out)
}

pub fn decode_field(bytes: &[u8]) -> Result<EmbeddingField> {
    let mut r = Reader { bytes, pos: 0 };
    check_magic(&mut r, FIELD_MAGIC)?;
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(format!("EMB1 version {version}")));
    }
    let dtype = match r.u8("dtype")? {
        0 => Dtype::F32,
        1 => Dtype::F64,
        other => return Err(Error::UnsupportedVersion(format!("EMB1 dtype {other}"))),
    };
    let ndim = r.u8("ndim")?;
    if ndim != 2 {
        return Err(Error::UnsupportedVersion(format!("EMB1 ndim {ndim}")));
    }
    r.u8("reserved")?;
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    let c = r.u32("channels")? as usize;
    let count = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(c))
        .ok_or_else(|| Error::UnsupportedVersion(format!("EMB1 size {h}x{w}x{c} overflows")))?;
    let n_bytes = count
        .checked_mul(dtype.width())
        .ok_or_else(|| Error::UnsupportedVersion(format!("EMB1 size {h}x{w}x{c} overflows")))?;
    let payload = r.take(n_bytes, "field values")?;
    r.finish()?;
    let data = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect(),
    };
    EmbeddingField::new(h, w, c, data)
}

pub fn encode_labels(labels: &LabelImage) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(LABEL_HEADER_LEN + labels.num_pixels() * 4);
    out.extend_from_slice(LABEL_MAGIC);
    out.extend_from_slice(&[VERSION, 2, 0, 0]);
    out.extend_from_slice(&dim(labels.height(), "height")?);
    out.extend_from_slice(&dim(labels.width(), "width")?);
    for &l in labels.labels() {
        let v = u32::try_from(l)
            .map_err(|_| Error::Encode(format!("label {l} does not fit in u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_labels(bytes: &[u8]) -> Result<LabelImage> {
    let mut r = Reader { bytes, pos: 0 };
    check_magic(&mut r, LABEL_MAGIC)?;
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(format!("LBL1 version {version}")));
    }
    let ndim = r.u8("ndim")?;
    if ndim != 2 {
        return Err(Error::UnsupportedVersion(format!("LBL1 ndim {ndim}")));
    }
    r.take(2, "reserved")?;
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    let n_bytes = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::UnsupportedVersion(format!("LBL1 size {h}x{w} overflows")))?;
    let payload = r.take(n_bytes, "labels")?;
    r.finish()?;
    let labels = payload
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as u64)
        .collect();
    LabelImage::new(h, w, labels)
}

fn with_path(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn write_bytes(path: &Path, bytes: Vec<u8>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| with_path(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| with_path(path, e))
}

pub fn write_field(path: impl AsRef<Path>, field: &EmbeddingField, dtype: Dtype) -> Result<()> {
    write_bytes(path.as_ref(), encode_field(field, dtype)?)
}

pub fn read_field(path: impl AsRef<Path>) -> Result<EmbeddingField> {
    decode_field(&read_bytes(path.as_ref())?)
}

pub fn write_labels(path: impl AsRef<Path>, labels: &LabelImage) -> Result<()> {
    write_bytes(path.as_ref(), encode_labels(labels)?)
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelImage> {
    decode_labels(&read_bytes(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn smallest_field() {
        let field = EmbeddingField::zeros(1, 1, 1).unwrap();
        let bytes = encode_field(&field, Dtype::F32).unwrap();
        assert_eq!(bytes.len(), FIELD_HEADER_LEN + 4);
        assert_eq!(&bytes[..8], b"EMB1\x01\x00\x02\x00");
        assert_eq!(decode_field(&bytes).unwrap(), field);
        assert_eq!(encode_field(&field, Dtype::F64).unwrap().len(), FIELD_HEADER_LEN + 8);
    }

    #[test]
    fn field_errors() {
        let field = EmbeddingField::new(2, 2, 2, (0..8).map(f64::from).collect()).unwrap();
        let mut bytes = encode_field(&field, Dtype::F64).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_field(&bad), Err(Error::BadMagic { expected: "EMB1" })));
        assert!(matches!(decode_field(&bytes[..bytes.len() - 1]), Err(Error::TruncatedFile(_))));
        assert!(matches!(decode_field(&bytes[..10]), Err(Error::TruncatedFile(_))));
        assert!(matches!(decode_field(&bytes[..2]), Err(Error::BadMagic { .. })));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(decode_field(&v2), Err(Error::UnsupportedVersion(_))));
        bytes.push(0);
        assert!(matches!(decode_field(&bytes), Err(Error::UnsupportedVersion(_))));
    }

    #[test]
    fn zero_labels_round_trip() {
        let labels = LabelImage::filled(2, 2, 0).unwrap();
        let bytes = encode_labels(&labels).unwrap();
        assert_eq!(bytes.len(), LABEL_HEADER_LEN + 16);
        let back = decode_labels(&bytes).unwrap();
        assert_eq!(back.labels(), &[0, 0, 0, 0]);
    }

    #[test]
    fn oversized_label_cannot_be_encoded() {
        let labels = LabelImage::new(1, 2, vec![2, u32::MAX as u64 + 1]).unwrap();
        assert!(matches!(encode_labels(&labels), Err(Error::Encode(_))));
        let mut bytes = encode_labels(&LabelImage::filled(1, 1, 7).unwrap()).unwrap();
        bytes[1] = b'X';
        assert!(matches!(decode_labels(&bytes), Err(Error::BadMagic { expected: "LBL1" })));
    }

    proptest! {
        #[test]
        fn f64_fields_round_trip_bit_exact(
            h in 1usize..5, w in 1usize..5, c in 1usize..4,
            seed in proptest::collection::vec(-1e100f64..1e100, 64),
        ) {
            let data: Vec<f64> = (0..h * w * c).map(|i| seed[i % 64] * (i as f64 + 0.5)).collect();
            let field = EmbeddingField::new(h, w, c, data).unwrap();
            let back = decode_field(&encode_field(&field, Dtype::F64).unwrap()).unwrap();
            prop_assert!(back.data().iter().zip(field.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }

        #[test]
        fn f32_representable_fields_round_trip(vals in proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 1..30)) {
            let n = vals.len();
            let field = EmbeddingField::new(1, n, 1, vals.iter().map(|&v| v as f64).collect()).unwrap();
            prop_assert_eq!(decode_field(&encode_field(&field, Dtype::F32).unwrap()).unwrap(), field);
        }

        #[test]
        fn labels_round_trip(labels in proptest::collection::vec(0u64..=u32::MAX as u64, 1..50)) {
            let n = labels.len();
            let img = LabelImage::new(1, n, labels).unwrap();
            prop_assert_eq!(decode_labels(&encode_labels(&img).unwrap()).unwrap(), img);
        }
    }
}
