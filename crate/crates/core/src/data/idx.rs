//! Uncompressed IDX files (the MNIST distribution format).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Decoded rank-3 `u8` image file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn be_u32(bytes: &[u8], offset: usize, file: &Path) -> Result<u32> {
    match bytes.get(offset..offset + 4) {
        Some(b) => Ok(u32::from_be_bytes(b.try_into().expect("4 bytes"))),
        None => Err(Error::Truncated {
            file: file.to_path_buf(),
            offset: bytes.len() as u64,
            needed: (offset + 4 - bytes.len()) as u64,
        }),
    }
}

fn check_magic(bytes: &[u8], expected: u32, file: &Path) -> Result<()> {
    let found = be_u32(bytes, 0, file)?;
    if found != expected {
        return Err(Error::BadMagic {
            file: file.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

fn payload<'a>(bytes: &'a [u8], start: usize, len: u64, file: &Path) -> Result<&'a [u8]> {
    let have = (bytes.len() - start) as u64;
    if have < len {
        return Err(Error::Truncated {
            file: file.to_path_buf(),
            offset: bytes.len() as u64,
            needed: len - have,
        });
    }
    if have > len {
        return Err(Error::Header {
            file: file.to_path_buf(),
            offset: start as u64 + len,
            msg: format!("{} trailing bytes after payload", have - len),
        });
    }
    Ok(&bytes[start..])
}

/// Parses an image file. `file` only labels errors.
pub fn parse_images(bytes: &[u8], file: &Path) -> Result<IdxImages> {
    check_magic(bytes, IMAGES_MAGIC, file)?;
    let count = be_u32(bytes, 4, file)? as usize;
    let rows = be_u32(bytes, 8, file)? as usize;
    let cols = be_u32(bytes, 12, file)? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::Header {
            file: file.to_path_buf(),
            offset: 8,
            msg: format!("zero image dimension {rows}x{cols}"),
        });
    }
    // At most (2^32)^3, so u128 cannot overflow; anything past u64 is truncation.
    let len = u64::try_from(count as u128 * rows as u128 * cols as u128).unwrap_or(u64::MAX);
    let pixels = payload(bytes, 16, len, file)?.to_vec();
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn parse_labels(bytes: &[u8], file: &Path) -> Result<Vec<u8>> {
    check_magic(bytes, LABELS_MAGIC, file)?;
    let count = be_u32(bytes, 4, file)? as u64;
    Ok(payload(bytes, 8, count, file)?.to_vec())
}

pub fn encode_images(img: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + img.pixels.len());
    for v in [IMAGES_MAGIC, img.count as u32, img.rows as u32, img.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&img.pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn read_images(path: &Path) -> Result<IdxImages> {
    parse_images(&fs::read(path)?, path)
}

pub fn read_labels(path: &Path) -> Result<Vec<u8>> {
    parse_labels(&fs::read(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_file_is_not_an_image_file() {
        let bytes = encode_labels(&[1, 2, 3]);
        match parse_images(&bytes, Path::new("l.idx")) {
            Err(Error::BadMagic { expected, found, .. }) => {
                assert_eq!(expected, IMAGES_MAGIC);
                assert_eq!(found, LABELS_MAGIC);
            }
            other => panic!("{other:?}"),
        }
        let img = encode_images(&IdxImages {
            count: 1,
            rows: 1,
            cols: 1,
            pixels: vec![9],
        });
        assert!(matches!(parse_labels(&img, Path::new("i.idx")), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn truncation_reports_offset() {
        let mut bytes = encode_labels(&[1, 2, 3, 4]);
        bytes.truncate(10);
        match parse_labels(&bytes, Path::new("l.idx")) {
            Err(Error::Truncated { offset, needed, .. }) => {
                assert_eq!(offset, 10);
                assert_eq!(needed, 2);
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_images(&[0, 0, 8], Path::new("x")), Err(Error::Truncated { .. })));
    }

    #[test]
    fn huge_header_count_is_truncation_not_allocation() {
        let mut bytes = IMAGES_MAGIC.to_be_bytes().to_vec();
        for v in [u32::MAX, u32::MAX, u32::MAX] {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        assert!(matches!(parse_images(&bytes, Path::new("x")), Err(Error::Truncated { .. })));
    }
}
