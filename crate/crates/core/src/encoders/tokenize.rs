use unicode_normalization::UnicodeNormalization;

/// Padding id; the only id an empty text produces.
pub const PAD_ID: u32 = 0;
/// Separator between query and passage in cross-encoder input.
pub const SEP_ID: u32 = 1;
/// Ids below this value are reserved; hashed tokens land in `[RESERVED_IDS, vocab_size)`.
pub const RESERVED_IDS: u32 = 2;

/// Hashed token ids with the pre-truncation token count.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    ids: Vec<u32>,
    original_length: usize,
}

impl TokenSequence {
    pub fn from_ids(ids: Vec<u32>, original_length: usize) -> Self {
        debug_assert!(!ids.is_empty());
        Self { ids, original_length }
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn original_length(&self) -> usize {
        self.original_length
    }

    /// Cross-encoder input `[query ; SEP ; passage]`, cutting the passage
    /// side first so the result holds at most `max_len` ids.
    pub fn joint(query: &TokenSequence, passage: &TokenSequence, max_len: usize) -> TokenSequence {
        let q_keep = query.len().min(max_len.saturating_sub(2).max(1));
        let p_keep = passage.len().min(max_len.saturating_sub(q_keep + 1).max(1));
        let mut ids = Vec::with_capacity(q_keep + 1 + p_keep);
        ids.extend_from_slice(&query.ids[..q_keep]);
        ids.push(SEP_ID);
        ids.extend_from_slice(&passage.ids[..p_keep]);
        TokenSequence {
            ids,
            original_length: query.original_length + 1 + passage.original_length,
        }
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Token id of one normalized word.
pub fn token_id(word: &str, vocab_size: u32) -> u32 {
    let buckets = u64::from(vocab_size - RESERVED_IDS);
    RESERVED_IDS + (fnv1a64(word.as_bytes()) % buckets) as u32
}

/// NFC-normalizes, lowercases, splits on runs of non-alphanumeric
/// characters, and hashes each word with FNV-1a into the non-reserved part
/// of the vocabulary.
pub fn tokenize(text: &str, max_len: usize, vocab_size: u32) -> TokenSequence {
    assert!(vocab_size > RESERVED_IDS, "vocabulary must exceed the reserved ids");
    let normalized: String = text.nfc().collect::<String>().to_lowercase();
    let words: Vec<&str> = normalized
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .collect();
    if words.is_empty() {
        return TokenSequence {
            ids: vec![PAD_ID],
            original_length: 0,
        };
    }
    let ids = words
        .iter()
        .take(max_len.max(1))
        .map(|w| token_id(w, vocab_size))
        .collect();
    TokenSequence {
        ids,
        original_length: words.len(),
    }
}
