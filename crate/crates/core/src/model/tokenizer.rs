//! Byte-level vocabulary: three specials followed by the 256 byte values.

pub const PAD: u32 = 0;
pub const EOS: u32 = 1;
pub const BOS: u32 = 2;
const BYTE_OFFSET: u32 = 3;
pub const VOCAB_SIZE: usize = 259;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    /// UTF-8 bytes shifted past the special ids; no BOS/EOS is added.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.bytes().map(|b| b as u32 + BYTE_OFFSET).collect()
    }

    /// Drops special ids and decodes the remaining bytes, replacing invalid
    /// UTF-8 sequences.
    pub fn decode(&self, ids: &[u32]) -> String {
        let bytes: Vec<u8> = ids
            .iter()
            .filter(|&&id| id >= BYTE_OFFSET && (id as usize) < VOCAB_SIZE)
            .map(|&id| (id - BYTE_OFFSET) as u8)
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }

    pub fn is_special(&self, id: u32) -> bool {
        id < BYTE_OFFSET
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn control_tokens_are_plain_bytes() {
        let tok = ByteTokenizer;
        let ids = tok.encode("<mt>");
        assert_eq!(ids, vec![b'<' as u32 + 3, b'm' as u32 + 3, b't' as u32 + 3, b'>' as u32 + 3]);
        assert!(ids.iter().all(|&i| !tok.is_special(i)));
    }

    #[test]
    fn specials_are_dropped() {
        let tok = ByteTokenizer;
        let mut ids = vec![BOS];
        ids.extend(tok.encode("ok"));
        ids.extend([EOS, PAD]);
        assert_eq!(tok.decode(&ids), "ok");
    }

    proptest! {
        #[test]
        fn round_trip(s in "\\PC{0,40}") {
            let tok = ByteTokenizer;
            let ids = tok.encode(&s);
            prop_assert!(ids.iter().all(|&i| (i as usize) < VOCAB_SIZE));
            prop_assert_eq!(tok.decode(&ids), s);
        }
    }
}
