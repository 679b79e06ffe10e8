//! Compressed size of a document's text, the normaliser of the zlib attack.

use std::io::Write;

use flate2::write::ZlibEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

/// zlib compression level used for every size measurement.
pub const ZLIB_LEVEL: u32 = 6;

#[derive(Debug, thiserror::Error)]
pub enum CompressError {
    #[error("cannot compress empty text")]
    EmptyText,
}

/// Byte length of a zlib stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CompressedSize(usize);

impl CompressedSize {
    pub fn bytes(self) -> usize {
        self.0
    }
}

/// The fixed compression settings, recorded in every report.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompressionParams {
    pub container: String,
    pub level: u32,
    pub input: String,
}

pub fn compression_params() -> CompressionParams {
    CompressionParams {
        container: "zlib (RFC 1950)".to_string(),
        level: ZLIB_LEVEL,
        input: "utf-8 text bytes".to_string(),
    }
}

/// Length of the zlib-wrapped DEFLATE stream of `text`'s UTF-8 bytes at
/// level 6.
pub fn deflate_size(text: &str) -> Result<CompressedSize, CompressError> {
    if text.is_empty() {
        return Err(CompressError::EmptyText);
    }
    let mut encoder = ZlibEncoder::new(
        Vec::with_capacity(text.len() / 2 + 16),
        Compression::new(ZLIB_LEVEL),
    );
    encoder
        .write_all(text.as_bytes())
        .expect("writing to a Vec cannot fail");
    let stream = encoder.finish().expect("writing to a Vec cannot fail");
    Ok(CompressedSize(stream.len()))
}
