//! Little-endian binary primitives shared by the tensor, feature and
//! checkpoint formats. Every read failure reports the byte offset at which
//! the field was expected.

use std::io::{self, Read, Write};

use crate::error::{Result, TensorError};

/// Reader that tracks its byte position.
pub struct ByteReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> ByteReader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    fn fill(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let start = self.offset;
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => Err(TensorError::Format {
                offset: start,
                msg: format!("truncated while reading {what}"),
            }),
            Err(e) => Err(e.into()),
        }
    }

    pub fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let start = self.offset;
        let mut buf = [0u8; 4];
        self.fill(&mut buf, "magic")?;
        if &buf != magic {
            return Err(TensorError::Format {
                offset: start,
                msg: format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(&buf),
                    String::from_utf8_lossy(magic)
                ),
            });
        }
        Ok(())
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let mut buf = [0u8; 4];
        self.fill(&mut buf, what)?;
        Ok(u32::from_le_bytes(buf))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        let mut buf = [0u8; 8];
        self.fill(&mut buf, what)?;
        Ok(u64::from_le_bytes(buf))
    }

    pub fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let mut buf = vec![0u8; n * 4];
        self.fill(&mut buf, what)?;
        Ok(buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    /// Fails unless the stream is exhausted.
    pub fn expect_eof(&mut self) -> Result<()> {
        let mut one = [0u8; 1];
        match self.inner.read(&mut one)? {
            0 => Ok(()),
            _ => Err(TensorError::Format {
                offset: self.offset,
                msg: "trailing bytes after payload".into(),
            }),
        }
    }
}

pub fn put_u32<W: Write>(w: &mut W, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn put_u64<W: Write>(w: &mut W, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn put_f32s<W: Write>(w: &mut W, vals: impl IntoIterator<Item = f32>) -> io::Result<()> {
    let bytes: Vec<u8> = vals.into_iter().flat_map(f32::to_le_bytes).collect();
    w.write_all(&bytes)
}
