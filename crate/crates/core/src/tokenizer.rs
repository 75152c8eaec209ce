//! Byte-level tokenizer: ids 0..=255 are raw bytes, followed by three specials.

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;
pub const VOCAB_SIZE: usize = 259;

pub fn encode(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| b as u32).collect()
}

/// Byte ids become bytes; special ids are dropped.
pub fn decode(ids: &[u32]) -> Vec<u8> {
    ids.iter().filter(|&&i| i < 256).map(|&i| i as u8).collect()
}

pub fn is_special(id: u32) -> bool {
    (256..VOCAB_SIZE as u32).contains(&id)
}
