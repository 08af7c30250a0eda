//! Byte-level text vocabulary. Ids 0..=255 are raw UTF-8 bytes; 256..=263 are
//! the special tokens. Image codes live in a separate, modality-tagged id space.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const BOI: u32 = 258;
pub const EOI: u32 = 259;
pub const SEP: u32 = 260;
pub const FIM_PREFIX: u32 = 261;
pub const FIM_SUFFIX: u32 = 262;
pub const FIM_MIDDLE: u32 = 263;

/// Size of the text vocabulary (bytes plus specials).
pub const TEXT_VOCAB: usize = 264;

pub const SPECIALS: [(u32, &str); 8] = [
    (BOS, "[bos]"),
    (EOS, "[eos]"),
    (BOI, "[boi]"),
    (EOI, "[eoi]"),
    (SEP, "[sep]"),
    (FIM_PREFIX, "[fim_prefix]"),
    (FIM_SUFFIX, "[fim_suffix]"),
    (FIM_MIDDLE, "[fim_middle]"),
];

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum TokenizerError {
    #[error("special token {id} at position {position} inside text content")]
    SpecialInContent { position: usize, id: u32 },
    #[error("token bytes are not valid UTF-8 (first bad byte at {0})")]
    InvalidUtf8(usize),
}

pub fn is_special(id: u32) -> bool {
    (BOS..=FIM_MIDDLE).contains(&id)
}

pub fn special_name(id: u32) -> Option<&'static str> {
    SPECIALS.iter().find(|(i, _)| *i == id).map(|(_, n)| *n)
}

pub fn encode_text(s: &str) -> Vec<u32> {
    s.bytes().map(u32::from).collect()
}

pub fn decode_text(tokens: &[u32]) -> Result<String, TokenizerError> {
    let mut bytes = Vec::with_capacity(tokens.len());
    for (position, &id) in tokens.iter().enumerate() {
        match u8::try_from(id) {
            Ok(b) => bytes.push(b),
            Err(_) => return Err(TokenizerError::SpecialInContent { position, id }),
        }
    }
    String::from_utf8(bytes).map_err(|e| TokenizerError::InvalidUtf8(e.utf8_error().valid_up_to()))
}

/// Pinned id assignment, stored next to corpora and checkpoints.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabManifest {
    pub kind: String,
    pub byte_tokens: usize,
    pub text_vocab: usize,
    pub specials: Vec<(String, u32)>,
}

impl VocabManifest {
    pub fn current() -> Self {
        Self {
            kind: "utf8-bytes".into(),
            byte_tokens: 256,
            text_vocab: TEXT_VOCAB,
            specials: SPECIALS.iter().map(|(id, n)| (n.to_string(), *id)).collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("manifest serializes")
    }

    /// Hex sha256 of the compact JSON form.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_json().as_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fixed_examples() {
        assert_eq!(encode_text(""), Vec::<u32>::new());
        assert_eq!(encode_text("A"), vec![65]);
        assert_eq!(decode_text(&[72, 105]).unwrap(), "Hi");
        assert_eq!(decode_text(&[BOS]), Err(TokenizerError::SpecialInContent { position: 0, id: BOS }));
        assert_eq!(decode_text(&[0xC3]), Err(TokenizerError::InvalidUtf8(0)));
    }

    #[test]
    fn specials_are_disjoint_from_bytes() {
        for (id, _) in SPECIALS {
            assert!(id >= 256 && (id as usize) < TEXT_VOCAB);
        }
        assert!(!is_special(255));
    }

    #[test]
    fn manifest_hash_is_stable() {
        assert_eq!(VocabManifest::current().hash(), VocabManifest::current().hash());
        assert_eq!(VocabManifest::current().hash().len(), 64);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn round_trip(s in any::<String>()) {
            let toks = encode_text(&s);
            prop_assert!(toks.iter().all(|&t| t < 256));
            prop_assert_eq!(decode_text(&toks).unwrap(), s);
        }
    }
}
