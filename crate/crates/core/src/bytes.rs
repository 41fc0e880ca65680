//! Little-endian helpers for the binary checkpoint formats.

use crate::scalar::Scalar;

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_scalars<T: Scalar>(out: &mut Vec<u8>, values: &[T]) {
    put_u64(out, values.len() as u64);
    for &v in values {
        v.write_le(out);
    }
}

/// Cursor over a byte buffer; every read reports truncation as `Err`.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        if self.buf.len() - self.pos < n {
            return Err(format!(
                "truncated: needed {n} bytes at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn scalars<T: Scalar>(&mut self) -> Result<Vec<T>, String> {
        let n = self.u64()? as usize;
        let bytes = self.take(n.checked_mul(T::BYTES).ok_or("length overflow")?)?;
        Ok(bytes.chunks_exact(T::BYTES).map(T::read_le).collect())
    }

    pub fn is_at_end(&self) -> bool {
        self.pos == self.buf.len()
    }
}
