//! Little-endian, length-prefixed primitives shared by the dataset cache and
//! the checkpoint format.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub(crate) struct Encoder<W: Write> {
    inner: W,
}

impl<W: Write> Encoder<W> {
    pub fn new(inner: W) -> Self {
        Encoder { inner }
    }

    pub fn into_inner(self) -> W {
        self.inner
    }

    pub fn raw(&mut self, bytes: &[u8]) -> Result<()> {
        self.inner.write_all(bytes)?;
        Ok(())
    }

    pub fn u8(&mut self, v: u8) -> Result<()> {
        self.raw(&[v])
    }

    pub fn u32(&mut self, v: u32) -> Result<()> {
        self.raw(&v.to_le_bytes())
    }

    pub fn u64(&mut self, v: u64) -> Result<()> {
        self.raw(&v.to_le_bytes())
    }

    pub fn u128(&mut self, v: u128) -> Result<()> {
        self.raw(&v.to_le_bytes())
    }

    pub fn f64(&mut self, v: f64) -> Result<()> {
        self.raw(&v.to_le_bytes())
    }

    pub fn len(&mut self, v: usize) -> Result<()> {
        self.u64(v as u64)
    }

    pub fn bytes(&mut self, v: &[u8]) -> Result<()> {
        self.len(v.len())?;
        self.raw(v)
    }

    pub fn str(&mut self, v: &str) -> Result<()> {
        self.bytes(v.as_bytes())
    }

    pub fn tensor(&mut self, t: &Tensor) -> Result<()> {
        self.len(t.shape().len())?;
        for &d in t.shape() {
            self.len(d)?;
        }
        self.len(t.len())?;
        for &v in t.data() {
            self.f64(v)?;
        }
        Ok(())
    }
}

pub(crate) struct Decoder<R: Read> {
    inner: R,
}

// Upper bound on any single length prefix; guards allocations on corrupt input.
const MAX_LEN: u64 = 1 << 34;

impl<R: Read> Decoder<R> {
    pub fn new(inner: R) -> Self {
        Decoder { inner }
    }

    pub fn raw(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::format("unexpected end of file")
            } else {
                Error::Io(e)
            }
        })
    }

    pub fn u8(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        self.raw(&mut b)?;
        Ok(b[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.raw(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.raw(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn u128(&mut self) -> Result<u128> {
        let mut b = [0u8; 16];
        self.raw(&mut b)?;
        Ok(u128::from_le_bytes(b))
    }

    pub fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.raw(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }

    pub fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        if v > MAX_LEN {
            return Err(Error::format(format!("implausible length prefix {v}")));
        }
        Ok(v as usize)
    }

    pub fn bytes(&mut self) -> Result<Vec<u8>> {
        let n = self.len()?;
        let mut buf = vec![0u8; n];
        self.raw(&mut buf)?;
        Ok(buf)
    }

    pub fn str(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?).map_err(|_| Error::format("string block is not UTF-8"))
    }

    pub fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.len()?;
        let shape = (0..rank).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
        let n = self.len()?;
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::from_vec(&shape, data).map_err(|e| Error::format(e.to_string()))
    }

    pub fn expect_magic(&mut self, magic: &[u8]) -> Result<()> {
        let mut buf = vec![0u8; magic.len()];
        self.raw(&mut buf)?;
        if buf != magic {
            return Err(Error::format(format!(
                "bad magic bytes: expected {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(())
    }
}
