//! Big-endian framing helpers shared by every on-disk and wire format.
//!
//! Variable-length fields carry a 4-byte big-endian length prefix. Integers
//! modulo the group order are written at a fixed width so encodings stay
//! canonical.

use std::io::Read;

use num_bigint::BigUint;

use crate::error::{Error, Result};

/// Upper bound on any single length-prefixed field.
pub const MAX_FIELD_LEN: usize = 64 << 20;

#[derive(Default)]
pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn magic(&mut self, magic: &[u8; 8]) -> &mut Self {
        self.buf.extend_from_slice(magic);
        self
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u16(&mut self, v: u16) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn raw(&mut self, bytes: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(bytes);
        self
    }

    pub fn lp(&mut self, bytes: &[u8]) -> &mut Self {
        let len = u32::try_from(bytes.len()).expect("field longer than 4 GiB");
        self.u32(len);
        self.raw(bytes)
    }

    pub fn scalar(&mut self, v: &BigUint, width: usize) -> &mut Self {
        self.buf.extend_from_slice(&fixed_be(v, width));
        self
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

/// Fixed-width big-endian encoding. Panics if `v` does not fit.
pub fn fixed_be(v: &BigUint, width: usize) -> Vec<u8> {
    let bytes = v.to_bytes_be();
    let bytes: &[u8] = if bytes == [0] { &[] } else { &bytes };
    assert!(bytes.len() <= width, "value wider than {width} bytes");
    let mut out = vec![0u8; width - bytes.len()];
    out.extend_from_slice(bytes);
    out
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Malformed("truncated input"));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn magic(&mut self, magic: &[u8; 8]) -> Result<()> {
        if self.take(8)? != magic {
            return Err(Error::Malformed("bad magic"));
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn lp(&mut self) -> Result<&'a [u8]> {
        let len = self.u32()? as usize;
        if len > MAX_FIELD_LEN {
            return Err(Error::Malformed("field length over limit"));
        }
        self.take(len)
    }

    pub fn scalar(&mut self, width: usize) -> Result<BigUint> {
        Ok(BigUint::from_bytes_be(self.take(width)?))
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn finish(self) -> Result<()> {
        if self.is_empty() {
            Ok(())
        } else {
            Err(Error::Malformed("trailing bytes"))
        }
    }
}

/// Same framing as [`Reader`] but pulls from an `io::Read`, so large
/// payloads can be consumed in chunks.
pub(crate) struct StreamReader<R> {
    inner: R,
}

impl<R: Read> StreamReader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner }
    }

    pub fn exact<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut out = [0u8; N];
        self.fill(&mut out)?;
        Ok(out)
    }

    pub fn fill(&mut self, out: &mut [u8]) -> Result<()> {
        self.inner.read_exact(out).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Malformed("truncated input"),
            _ => Error::Io(e),
        })
    }

    pub fn vec(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut out = vec![0u8; n];
        self.fill(&mut out)?;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.exact::<1>()?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_be_bytes(self.exact()?))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.exact()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_be_bytes(self.exact()?))
    }

    pub fn len_prefix(&mut self) -> Result<usize> {
        let len = self.u32()? as usize;
        if len > MAX_FIELD_LEN {
            return Err(Error::Malformed("field length over limit"));
        }
        Ok(len)
    }

    /// Feeds `len` bytes to `sink` in bounded chunks.
    pub fn stream(&mut self, mut len: usize, mut sink: impl FnMut(&[u8])) -> Result<()> {
        let mut chunk = [0u8; 4096];
        while len > 0 {
            let n = len.min(chunk.len());
            self.fill(&mut chunk[..n])?;
            sink(&chunk[..n]);
            len -= n;
        }
        Ok(())
    }

    pub fn at_eof(&mut self) -> Result<bool> {
        let mut probe = [0u8; 1];
        loop {
            match self.inner.read(&mut probe) {
                Ok(0) => return Ok(true),
                Ok(_) => return Ok(false),
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(e.into()),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_width_pads_and_zero_is_all_zero_bytes() {
        assert_eq!(fixed_be(&BigUint::from(0u32), 3), vec![0, 0, 0]);
        assert_eq!(fixed_be(&BigUint::from(0x0102u32), 3), vec![0, 1, 2]);
    }

    #[test]
    fn reader_rejects_truncation_and_trailing_bytes() {
        let mut w = Writer::new();
        w.lp(b"abc").u16(7);
        let bytes = w.finish();

        let mut r = Reader::new(&bytes[..5]);
        assert!(r.lp().is_err());

        let mut extended = bytes.clone();
        extended.push(0);
        let mut r = Reader::new(&extended);
        assert_eq!(r.lp().unwrap(), b"abc");
        assert_eq!(r.u16().unwrap(), 7);
        assert!(r.finish().is_err());
    }
}
