//! Little-endian record encoding shared by the calibration and checkpoint
//! files: a 4-byte magic, a `u16` version, then typed fields.

use std::io::{ErrorKind, Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub struct Writer<W: Write> {
    inner: W,
}

impl<W: Write> Writer<W> {
    pub fn new(mut inner: W, magic: &[u8; 4], version: u16) -> Result<Self> {
        inner.write_all(magic)?;
        inner.write_all(&version.to_le_bytes())?;
        Ok(Self { inner })
    }

    pub fn u8(&mut self, v: u8) -> Result<()> {
        Ok(self.inner.write_all(&[v])?)
    }

    pub fn u32(&mut self, v: u32) -> Result<()> {
        Ok(self.inner.write_all(&v.to_le_bytes())?)
    }

    pub fn u64(&mut self, v: u64) -> Result<()> {
        Ok(self.inner.write_all(&v.to_le_bytes())?)
    }

    pub fn i32(&mut self, v: i32) -> Result<()> {
        Ok(self.inner.write_all(&v.to_le_bytes())?)
    }

    pub fn f32(&mut self, v: f32) -> Result<()> {
        Ok(self.inner.write_all(&v.to_le_bytes())?)
    }

    pub fn str(&mut self, s: &str) -> Result<()> {
        self.u32(s.len() as u32)?;
        Ok(self.inner.write_all(s.as_bytes())?)
    }

    /// Shape (rank then dims) followed by a length-prefixed `f32` payload.
    pub fn tensor(&mut self, t: &Tensor) -> Result<()> {
        self.u8(t.shape().len() as u8)?;
        for &d in t.shape() {
            self.u32(d as u32)?;
        }
        self.u64(t.len() as u64)?;
        let mut buf = Vec::with_capacity(t.len() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        Ok(self.inner.write_all(&buf)?)
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

pub struct Reader<R: Read> {
    inner: R,
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == ErrorKind::UnexpectedEof {
        Error::Format("unexpected end of file".into())
    } else {
        Error::Io(e)
    }
}

impl<R: Read> Reader<R> {
    /// Checks the magic and that the version is at most `supported`.
    pub fn new(mut inner: R, magic: &[u8; 4], supported: u16) -> Result<Self> {
        let mut m = [0u8; 4];
        inner.read_exact(&mut m).map_err(truncated)?;
        if &m != magic {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(magic).into_owned(),
                found: String::from_utf8_lossy(&m).into_owned(),
            });
        }
        let mut v = [0u8; 2];
        inner.read_exact(&mut v).map_err(truncated)?;
        let version = u16::from_le_bytes(v);
        if version > supported || version == 0 {
            return Err(Error::Version {
                found: version,
                supported,
            });
        }
        Ok(Self { inner })
    }

    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner.read_exact(&mut b).map_err(truncated)?;
        Ok(b)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    pub fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.bytes()?))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes()?))
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        if n > 1 << 24 {
            return Err(Error::Format(format!("string length {n} is implausible")));
        }
        let mut b = vec![0u8; n];
        self.inner.read_exact(&mut b).map_err(truncated)?;
        String::from_utf8(b).map_err(|_| Error::Format("string is not UTF-8".into()))
    }

    pub fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u8()? as usize;
        let shape = (0..rank)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = self.u64()? as usize;
        if shape.iter().product::<usize>() != len || len > 1 << 30 {
            return Err(Error::Format(format!(
                "tensor of shape {shape:?} declares {len} values"
            )));
        }
        let mut buf = vec![0u8; len * 4];
        self.inner.read_exact(&mut buf).map_err(truncated)?;
        let data = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::new(&shape, data).map_err(|e| Error::Format(e.to_string()))
    }

    /// Errors unless the input is fully consumed.
    pub fn expect_end(mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b)? {
            0 => Ok(()),
            _ => Err(Error::Format("trailing bytes after last record".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_errors() {
        let t = Tensor::new(&[2, 2], vec![1.5, -0.0, f32::MIN_POSITIVE, 3.0]).unwrap();
        let mut w = Writer::new(Vec::new(), b"TEST", 1).unwrap();
        w.str("layer").unwrap();
        w.tensor(&t).unwrap();
        w.i32(-3).unwrap();
        let bytes = w.finish().unwrap();

        let mut r = Reader::new(&bytes[..], b"TEST", 1).unwrap();
        assert_eq!(r.str().unwrap(), "layer");
        assert!(r.tensor().unwrap().bit_eq(&t));
        assert_eq!(r.i32().unwrap(), -3);
        r.expect_end().unwrap();

        assert!(matches!(
            Reader::new(&bytes[..], b"NOPE", 1),
            Err(Error::BadMagic { .. })
        ));
        assert!(matches!(
            Reader::new(&bytes[..], b"TEST", 0),
            Err(Error::Version { found: 1, .. })
        ));
        let mut r = Reader::new(&bytes[..bytes.len() - 6], b"TEST", 1).unwrap();
        r.str().unwrap();
        assert!(matches!(r.tensor(), Err(Error::Format(_))));
    }
}
