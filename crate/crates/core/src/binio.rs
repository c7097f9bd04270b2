//! Byte-level parsing shared by the binary file formats.

use std::path::Path;

use crate::error::{Error, Result};

/// Cursor over a fully loaded file that reports the byte offset of the
/// first inconsistency it finds.
pub(crate) struct ByteReader<'a> {
    pub path: &'a Path,
    pub bytes: &'a [u8],
    pub offset: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        ByteReader {
            path,
            bytes,
            offset: 0,
        }
    }

    pub fn format_at(&self, offset: usize, message: String) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            message,
        }
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() < self.offset + n {
            return Err(self.format_at(
                self.offset,
                format!(
                    "file truncated reading {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.offset
                ),
            ));
        }
        let out = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(out)
    }

    pub fn read_u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn read_u32(&mut self, what: &str) -> Result<u32> {
        let raw = self.take(4, what)?;
        Ok(u32::from_le_bytes(raw.try_into().unwrap()))
    }

    pub fn expect_end(&self) -> Result<()> {
        if self.offset != self.bytes.len() {
            return Err(self.format_at(
                self.offset,
                format!("{} unexpected trailing bytes", self.bytes.len() - self.offset),
            ));
        }
        Ok(())
    }
}
