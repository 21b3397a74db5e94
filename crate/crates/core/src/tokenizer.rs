//! Byte-level tokenizer: ids 0..=255 are raw bytes, followed by three specials.

use crate::error::{Error, Result};

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;
pub const VOCAB_SIZE: usize = 259;

#[derive(Clone, Copy, Debug, Default)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    /// Maps each byte to its id. BOS is not added; that is the caller's call.
    pub fn encode(&self, text: &[u8]) -> Vec<u32> {
        text.iter().map(|b| *b as u32).collect()
    }

    /// Bytes for byte ids; special ids are dropped.
    pub fn decode(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            match id {
                0..=255 => out.push(id as u8),
                BOS | EOS | PAD => {}
                other => return Err(Error::UnknownToken(other)),
            }
        }
        Ok(out)
    }
}
