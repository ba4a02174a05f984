use std::collections::HashMap;

use super::{TokenId, TokenizerError};

/// Reserved control tokens, always the first ids of the table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReservedIds {
    pub pad: TokenId,
    pub bos: TokenId,
    pub eos: TokenId,
    pub system: TokenId,
    pub user: TokenId,
    pub assistant: TokenId,
}

pub const N_RESERVED: usize = 6;
const RESERVED_NAMES: [&str; N_RESERVED] =
    ["<pad>", "<bos>", "<eos>", "<|system|>", "<|user|>", "<|assistant|>"];

/// Number of byte-fallback tokens following the reserved block.
const N_BYTES: usize = 256;

#[derive(Clone, Debug)]
struct TokenEntry {
    /// Bytes the token matches and decodes to; empty for reserved markers.
    bytes: Vec<u8>,
    /// Human-readable form, also the on-disk representation.
    display: String,
}

/// Fixed shared vocabulary: reserved markers, a 256-entry byte-fallback
/// block, then frequency-merged subword tokens. Immutable once built.
#[derive(Clone, Debug)]
pub struct Vocab {
    entries: Vec<TokenEntry>,
    lookup: HashMap<Vec<u8>, TokenId>,
    max_token_len: usize,
}

fn byte_display(b: u8) -> String {
    if (0x20..=0x7e).contains(&b) {
        (b as char).to_string()
    } else {
        format!("<0x{b:02X}>")
    }
}

fn parse_byte_display(s: &str) -> Option<u8> {
    let hex = s.strip_prefix("<0x")?.strip_suffix('>')?;
    if hex.len() != 2 {
        return None;
    }
    u8::from_str_radix(hex, 16).ok()
}

impl Vocab {
    /// Trains a vocabulary over the corpus: byte tokens plus up to
    /// `merge_budget` greedy frequency merges. Merges never cross word
    /// boundaries; a word is a whitespace-started chunk so subword tokens
    /// carry at most one leading separator space.
    pub fn train(corpus: &[&str], merge_budget: usize) -> Vocab {
        // chunk frequency table
        let mut chunk_freq: HashMap<Vec<u8>, u64> = HashMap::new();
        for text in corpus {
            for chunk in split_chunks(text.as_bytes()) {
                *chunk_freq.entry(chunk.to_vec()).or_insert(0) += 1;
            }
        }
        // each chunk as a sequence of token byte-strings
        let mut pieces: Vec<(Vec<Vec<u8>>, u64)> = chunk_freq
            .into_iter()
            .map(|(chunk, n)| (chunk.iter().map(|&b| vec![b]).collect(), n))
            .collect();
        // deterministic processing order
        pieces.sort_by(|a, b| a.0.cmp(&b.0));

        let mut merges: Vec<Vec<u8>> = Vec::new();
        for _ in 0..merge_budget {
            let mut pair_freq: HashMap<(Vec<u8>, Vec<u8>), u64> = HashMap::new();
            for (piece, n) in &pieces {
                for w in piece.windows(2) {
                    *pair_freq.entry((w[0].clone(), w[1].clone())).or_insert(0) += n;
                }
            }
            // highest count wins; ties broken by smaller byte strings.
            // pairs containing digits never merge: digits stay standalone
            // so any digit string is emittable (and countable) digit by
            // digit regardless of merges.
            let best = pair_freq
                .into_iter()
                .filter(|((a, b), _)| {
                    a.len() + b.len() <= 16
                        && !a.iter().chain(b.iter()).any(|c| c.is_ascii_digit())
                })
                .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
            let Some(((left, right), count)) = best else { break };
            if count < 2 {
                break;
            }
            let mut merged = left.clone();
            merged.extend_from_slice(&right);
            for (piece, _) in pieces.iter_mut() {
                let mut i = 0;
                while i + 1 < piece.len() {
                    if piece[i] == left && piece[i + 1] == right {
                        piece[i] = merged.clone();
                        piece.remove(i + 1);
                    } else {
                        i += 1;
                    }
                }
            }
            merges.push(merged);
        }

        Vocab::assemble(merges).expect("trained vocabulary is well-formed")
    }

    fn assemble(merges: Vec<Vec<u8>>) -> Result<Vocab, TokenizerError> {
        let mut entries = Vec::with_capacity(N_RESERVED + N_BYTES + merges.len());
        for name in RESERVED_NAMES {
            entries.push(TokenEntry { bytes: Vec::new(), display: name.to_string() });
        }
        for b in 0..=255u8 {
            entries.push(TokenEntry { bytes: vec![b], display: byte_display(b) });
        }
        for m in merges {
            let display = String::from_utf8_lossy(&m).into_owned();
            entries.push(TokenEntry { bytes: m, display });
        }
        Vocab::from_entries(entries)
    }

    fn from_entries(entries: Vec<TokenEntry>) -> Result<Vocab, TokenizerError> {
        let mut lookup = HashMap::new();
        let mut max_token_len = 1;
        for (id, e) in entries.iter().enumerate() {
            if e.display.is_empty() {
                return Err(TokenizerError::EmptyToken(id as TokenId));
            }
            if id < N_RESERVED {
                continue;
            }
            if e.bytes.is_empty() {
                return Err(TokenizerError::EmptyToken(id as TokenId));
            }
            if lookup.insert(e.bytes.clone(), id as TokenId).is_some() {
                return Err(TokenizerError::DuplicateToken(id as TokenId));
            }
            max_token_len = max_token_len.max(e.bytes.len());
        }
        if entries.len() < N_RESERVED + N_BYTES {
            return Err(TokenizerError::TooSmall(entries.len(), N_RESERVED + N_BYTES));
        }
        Ok(Vocab { entries, lookup, max_token_len })
    }

    pub fn size(&self) -> usize {
        self.entries.len()
    }

    pub fn reserved(&self) -> ReservedIds {
        ReservedIds { pad: 0, bos: 1, eos: 2, system: 3, user: 4, assistant: 5 }
    }

    pub fn is_reserved(&self, id: TokenId) -> bool {
        (id as usize) < N_RESERVED
    }

    /// Greedy longest-match segmentation. Total: every byte has a fallback
    /// token, so any UTF-8 input encodes.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let bytes = text.as_bytes();
        let mut out = Vec::with_capacity(bytes.len() / 3 + 1);
        let mut i = 0;
        while i < bytes.len() {
            let mut len = self.max_token_len.min(bytes.len() - i);
            loop {
                if let Some(&id) = self.lookup.get(&bytes[i..i + len]) {
                    out.push(id);
                    i += len;
                    break;
                }
                len -= 1;
            }
        }
        out
    }

    /// Decode generated ids to text. Reserved markers are dropped; raw bytes
    /// are reassembled before UTF-8 interpretation.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut bytes = Vec::new();
        for &id in ids {
            bytes.extend_from_slice(&self.entries[id as usize].bytes);
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }

    /// Display form of one token (on-disk representation).
    pub fn token_str(&self, id: TokenId) -> &str {
        &self.entries[id as usize].display
    }

    /// Raw bytes the token matches; empty for reserved markers.
    pub fn token_bytes(&self, id: TokenId) -> &[u8] {
        &self.entries[id as usize].bytes
    }

    /// True when the token's bytes contain an ASCII digit.
    pub fn token_has_digit(&self, id: TokenId) -> bool {
        self.entries[id as usize].bytes.iter().any(|b| b.is_ascii_digit())
    }

    /// True when the token decodes to pure ASCII.
    pub fn token_is_ascii(&self, id: TokenId) -> bool {
        !self.is_reserved(id) && self.entries[id as usize].bytes.iter().all(|b| b.is_ascii())
    }

    /// Serializes as a JSON array of token strings ordered by id.
    pub fn to_json(&self) -> String {
        let strings: Vec<&str> = self.entries.iter().map(|e| e.display.as_str()).collect();
        serde_json::to_string(&strings).expect("string array serializes")
    }

    pub fn from_json(json: &str) -> Result<Vocab, TokenizerError> {
        let strings: Vec<String> =
            serde_json::from_str(json).map_err(|e| TokenizerError::VocabFile(e.to_string()))?;
        if strings.len() < N_RESERVED + N_BYTES {
            return Err(TokenizerError::TooSmall(strings.len(), N_RESERVED + N_BYTES));
        }
        let mut entries = Vec::with_capacity(strings.len());
        for (i, s) in strings.into_iter().enumerate() {
            if i < N_RESERVED {
                if s != RESERVED_NAMES[i] {
                    return Err(TokenizerError::BadReserved {
                        index: i,
                        expected: RESERVED_NAMES[i].to_string(),
                        found: s,
                    });
                }
                entries.push(TokenEntry { bytes: Vec::new(), display: s });
            } else if i < N_RESERVED + N_BYTES {
                let b = (i - N_RESERVED) as u8;
                if s != byte_display(b) {
                    return Err(TokenizerError::VocabFile(format!(
                        "byte slot {i} should be {:?}, found {s:?}",
                        byte_display(b)
                    )));
                }
                entries.push(TokenEntry { bytes: vec![b], display: s });
            } else if let Some(b) = parse_byte_display(&s) {
                return Err(TokenizerError::VocabFile(format!(
                    "merge slot {i} looks like a byte token for 0x{b:02X}"
                )));
            } else {
                entries.push(TokenEntry { bytes: s.as_bytes().to_vec(), display: s });
            }
        }
        Vocab::from_entries(entries)
    }
}

/// Splits text into word chunks: a whitespace byte starts a new chunk and
/// stays attached to it, so merges never produce tokens with interior
/// spaces.
fn split_chunks(bytes: &[u8]) -> Vec<&[u8]> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..bytes.len() {
        if bytes[i] == b' ' || bytes[i] == b'\n' {
            out.push(&bytes[start..i]);
            start = i;
        }
    }
    if start < bytes.len() {
        out.push(&bytes[start..]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_vocab() -> Vocab {
        let corpus = [
            "the quick brown fox jumps over the lazy dog",
            "the random string of digits 314 and 9275 is here",
            "write a random string composed of 4 digits",
            "the the the quick quick string string string",
        ];
        Vocab::train(&corpus, 40)
    }

    #[test]
    fn empty_text_encodes_empty() {
        assert!(sample_vocab().encode("").is_empty());
    }

    #[test]
    fn round_trips_corpus_alphabet() {
        let v = sample_vocab();
        for s in ["the quick string", "composed of 4 digits: 314", "xyzzy !?", "a  b"] {
            assert_eq!(v.decode(&v.encode(s)), s);
        }
    }

    #[test]
    fn round_trips_arbitrary_utf8() {
        let v = sample_vocab();
        for s in ["héllo wörld", "数字", "mixed ascii → unicode"] {
            assert_eq!(v.decode(&v.encode(s)), s);
        }
    }

    #[test]
    fn token_round_trip_identity() {
        let v = sample_vocab();
        for id in N_RESERVED as TokenId..v.size() as TokenId {
            let bytes = v.token_bytes(id);
            if std::str::from_utf8(bytes).is_err() {
                continue; // lone non-UTF8 bytes cannot round-trip through text
            }
            let text = String::from_utf8(bytes.to_vec()).unwrap();
            assert_eq!(v.encode(&text), vec![id], "token {:?}", v.token_str(id));
        }
    }

    #[test]
    fn digits_stay_single_or_digit_class() {
        let v = sample_vocab();
        let ids = v.encode("314");
        assert_eq!(ids.len(), 3, "digits never merge");
        for id in ids {
            assert!(v.token_has_digit(id), "token {:?} in '314'", v.token_str(id));
            assert_eq!(v.token_bytes(id).len(), 1);
        }
    }

    #[test]
    fn merges_learned_for_frequent_words() {
        let v = sample_vocab();
        // "the" repeats; expect a multi-byte token covering it
        let ids = v.encode("the quick");
        assert!(ids.len() < "the quick".len(), "no merges learned: {ids:?}");
    }

    #[test]
    fn json_round_trip_is_identical() {
        let v = sample_vocab();
        let json = v.to_json();
        let v2 = Vocab::from_json(&json).unwrap();
        assert_eq!(v2.to_json(), json);
        assert_eq!(v2.size(), v.size());
        let s = "the quick brown fox 314";
        assert_eq!(v.encode(s), v2.encode(s));
    }

    #[test]
    fn json_rejects_bad_reserved() {
        let v = sample_vocab();
        let mut strings: Vec<String> =
            serde_json::from_str::<Vec<String>>(&v.to_json()).unwrap();
        strings[0] = "<wrong>".into();
        let json = serde_json::to_string(&strings).unwrap();
        assert!(Vocab::from_json(&json).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = ["aaa bbb aaa bbb ccc", "aaa bbb ddd"];
        let a = Vocab::train(&corpus, 10).to_json();
        let b = Vocab::train(&corpus, 10).to_json();
        assert_eq!(a, b);
    }

    #[test]
    fn reserved_markers_never_match_text() {
        let v = sample_vocab();
        let ids = v.encode("<bos> <pad>");
        assert!(ids.iter().all(|&id| !v.is_reserved(id)));
    }
}
