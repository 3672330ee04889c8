//! Storage-word accounting used by the gas meter.
//!
//! Layout rule, applied uniformly to every record the ledger or the
//! contract persists: each scalar field (address, amount, height, state,
//! digest, preimage) occupies one 32-byte word; a 64-byte public key
//! occupies two; a variable-length byte string occupies one length word
//! plus one word per started 32-byte chunk.

pub const WORD: usize = 32;

/// Words for a variable-length byte string of `len` bytes.
pub fn bytes_words(len: usize) -> u64 {
    1 + len.div_ceil(WORD) as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_string_words() {
        assert_eq!(bytes_words(0), 1);
        assert_eq!(bytes_words(1), 2);
        assert_eq!(bytes_words(32), 2);
        assert_eq!(bytes_words(33), 3);
    }
}
