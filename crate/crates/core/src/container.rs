//! `MTCK` tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MTCK"  u32 version
//! repeated until end of input:
//!     u16 name_len, name (UTF-8), u8 rank, rank × u64 dims, product(dims) × f64
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MTCK";
pub const VERSION: u32 = 1;

/// Upper bound on values in one decoded tensor (4 GiB of f64).
const MAX_VALUES: u64 = 1 << 29;

pub fn encode<'a, I>(tensors: I) -> Result<Vec<u8>>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Input(format!("tensor name of {} bytes is too long", name.len())))?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Input(format!("rank {} too large", t.rank())))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.reserve(8 * t.len());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Container {
                offset: self.pos as u64,
                msg: format!("truncated {what}: need {n} bytes, {} left", self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Decodes every named tensor in order. Never panics on malformed input.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Container {
            offset: 0,
            msg: "bad magic, expected \"MTCK\"".into(),
        });
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Container {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        let start = r.pos as u64;
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Container {
                offset: start + 2,
                msg: "tensor name is not UTF-8".into(),
            })?
            .to_owned();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        let mut count: u64 = 1;
        for _ in 0..rank {
            let at = r.pos as u64;
            let d = r.u64("dimension")?;
            count = count.checked_mul(d).filter(|&c| c <= MAX_VALUES).ok_or_else(|| Error::Container {
                offset: at,
                msg: format!("tensor `{name}` is too large"),
            })?;
            dims.push(d as usize);
        }
        let at = r.pos as u64;
        let raw = r.take(count as usize * 8, "tensor values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| Error::Container {
            offset: at,
            msg: format!("tensor `{name}`: {e}"),
        })?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn write_file<'a, I>(path: &Path, tensors: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    fs::write(path, encode(tensors)?)?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode(&fs::read(path)?)
}

/// Looks up a tensor by name.
pub fn take_named(tensors: &mut Vec<(String, Tensor)>, name: &str) -> Result<Tensor> {
    let i = tensors
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| Error::Input(format!("container has no tensor `{name}`")))?;
    Ok(tensors.remove(i).1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_exact() {
        let t = Tensor::new(vec![2], vec![1.0, -0.5]).unwrap();
        let bytes = encode([("ab", &t)]).unwrap();
        let mut want = b"MTCK".to_vec();
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u16.to_le_bytes());
        want.extend_from_slice(b"ab");
        want.push(1);
        want.extend_from_slice(&2u64.to_le_bytes());
        want.extend_from_slice(&1.0f64.to_le_bytes());
        want.extend_from_slice(&(-0.5f64).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(decode(b"MTCX\x01\0\0\0").is_err());
        let t = Tensor::zeros(&[3]);
        let bytes = encode([("x", &t)]).unwrap();
        for cut in 0..bytes.len() {
            if cut == 8 {
                // header only: an empty container
                assert!(decode(&bytes[..cut]).unwrap().is_empty());
                continue;
            }
            assert!(decode(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn huge_dims_do_not_allocate() {
        let mut b = b"MTCK".to_vec();
        b.extend_from_slice(&1u32.to_le_bytes());
        b.extend_from_slice(&1u16.to_le_bytes());
        b.push(b'x');
        b.push(2);
        b.extend_from_slice(&u64::MAX.to_le_bytes());
        b.extend_from_slice(&2u64.to_le_bytes());
        assert!(matches!(decode(&b), Err(Error::Container { offset: 12, .. })));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            dims in proptest::collection::vec(1usize..4, 0..4),
            bits in proptest::collection::vec(any::<u64>(), 64),
            name in "[a-z._0-9]{0,12}",
        ) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = bits.iter().cycle().take(n).map(|&b| f64::from_bits(b)).collect();
            let t = Tensor::new(dims, data).unwrap();
            let bytes = encode([(name.as_str(), &t)]).unwrap();
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(back.len(), 1);
            prop_assert_eq!(&back[0].0, &name);
            prop_assert_eq!(back[0].1.shape(), t.shape());
            let same = back[0].1.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
            prop_assert_eq!(encode([(name.as_str(), &back[0].1)]).unwrap(), bytes);
        }
    }
}
