use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{FilterLexicon, TokenId, TokenizerError, Vocab};

/// Candidate-token filtering strength. `Full` is the method's own filter;
/// `DigitsOnly` and `None` exist for the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    None,
    DigitsOnly,
    Full,
}

impl FilterMode {
    pub fn parse(s: &str) -> Result<FilterMode, TokenizerError> {
        match s {
            "none" => Ok(FilterMode::None),
            "digits" | "digits_only" => Ok(FilterMode::DigitsOnly),
            "full" => Ok(FilterMode::Full),
            other => Err(TokenizerError::UnknownMode(other.to_string())),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            FilterMode::None => "none",
            FilterMode::DigitsOnly => "digits_only",
            FilterMode::Full => "full",
        }
    }
}

/// Set of forbidden substitution tokens. Reserved ids are rejected
/// structurally and are not part of the forbidden set, so `mode == None`
/// keeps the set empty as required.
#[derive(Clone, Debug)]
pub struct TokenFilter {
    mode: FilterMode,
    forbidden: Vec<bool>,
    ascii_only: bool,
    n_reserved: usize,
}

/// Builds a filter with the default ASCII restriction for `Full` mode.
pub fn build_filter(vocab: &Vocab, lexicon: &FilterLexicon, mode: FilterMode) -> TokenFilter {
    build_filter_with(vocab, lexicon, mode, mode == FilterMode::Full)
}

/// A token id is forbidden iff, after lowercasing and stripping a leading
/// separator and one trailing plural "s", its string equals a lexicon word;
/// or (mode at least digits-only) it contains an ASCII digit; or it matches
/// the Roman-numeral / century-name rule; or, under `ascii_only`, it decodes
/// to non-ASCII. The ASCII restriction only applies to `Full` mode so the
/// weaker modes keep their exact documented sets.
pub fn build_filter_with(
    vocab: &Vocab,
    lexicon: &FilterLexicon,
    mode: FilterMode,
    ascii_only: bool,
) -> TokenFilter {
    let ascii_only = ascii_only && mode == FilterMode::Full;
    let words = lexicon.lowercased_set();
    let mut forbidden = vec![false; vocab.size()];
    for id in 0..vocab.size() as TokenId {
        if vocab.is_reserved(id) {
            continue;
        }
        let banned = match mode {
            FilterMode::None => false,
            FilterMode::DigitsOnly => vocab.token_has_digit(id),
            FilterMode::Full => {
                vocab.token_has_digit(id)
                    || matches_lexicon(vocab, id, &words)
                    || matches_roman_rule(vocab, id)
                    || (ascii_only && !vocab.token_is_ascii(id))
            }
        };
        forbidden[id as usize] = banned;
    }
    TokenFilter { mode, forbidden, ascii_only, n_reserved: super::N_RESERVED }
}

fn normalized(vocab: &Vocab, id: TokenId) -> String {
    let s = String::from_utf8_lossy(vocab.token_bytes(id)).into_owned();
    s.strip_prefix(' ').unwrap_or(&s).to_lowercase()
}

fn matches_lexicon(vocab: &Vocab, id: TokenId, words: &HashSet<String>) -> bool {
    let w = normalized(vocab, id);
    if words.contains(&w) {
        return true;
    }
    // plural stripping removes exactly one trailing "s"
    if let Some(stem) = w.strip_suffix('s') {
        if words.contains(stem) {
            return true;
        }
    }
    false
}

fn matches_roman_rule(vocab: &Vocab, id: TokenId) -> bool {
    let w = normalized(vocab, id);
    is_roman_numeral(&w) || is_century_name(&w)
}

/// A non-empty string over {i,v,x,l,c,d,m} of length at most 7 that parses
/// as a valid Roman numeral.
fn is_roman_numeral(w: &str) -> bool {
    if w.is_empty() || w.len() > 7 || !w.chars().all(|c| "ivxlcdm".contains(c)) {
        return false;
    }
    let mut rest = w;
    let mut take = |options: &[&str]| {
        for opt in options {
            if let Some(r) = rest.strip_prefix(opt) {
                rest = r;
                return;
            }
        }
    };
    take(&["mmm", "mm", "m"]);
    take(&["cm", "cd", "dccc", "dcc", "dc", "d", "ccc", "cc", "c"]);
    take(&["xc", "xl", "lxxx", "lxx", "lx", "l", "xxx", "xx", "x"]);
    take(&["ix", "iv", "viii", "vii", "vi", "v", "iii", "ii", "i"]);
    rest.is_empty()
}

/// Century-name shapes like "xixe" or "xxe": one to three "x", an optional
/// "ix"/"ixe"/"v"/"ve" group, and an optional trailing "e".
fn is_century_name(w: &str) -> bool {
    let stripped = w.trim_start_matches('x');
    let n_x = w.len() - stripped.len();
    if n_x == 0 || n_x > 3 {
        return false;
    }
    matches!(stripped, "" | "e" | "ix" | "ixe" | "ixee" | "v" | "ve" | "vee")
}

impl TokenFilter {
    pub fn mode(&self) -> FilterMode {
        self.mode
    }

    pub fn ascii_only(&self) -> bool {
        self.ascii_only
    }

    pub fn vocab_size(&self) -> usize {
        self.forbidden.len()
    }

    /// True iff the token may be used as a substitution candidate. Reserved
    /// ids are never substitutable. Panics when `id` is out of range.
    pub fn is_allowed(&self, id: TokenId) -> bool {
        assert!(
            (id as usize) < self.forbidden.len(),
            "token id {id} out of range for vocab of {}",
            self.forbidden.len()
        );
        (id as usize) >= self.n_reserved && !self.forbidden[id as usize]
    }

    /// Sorted forbidden id set (excludes the structural reserved-id rule).
    pub fn forbidden_ids(&self) -> Vec<TokenId> {
        self.forbidden
            .iter()
            .enumerate()
            .filter_map(|(id, &banned)| banned.then_some(id as TokenId))
            .collect()
    }
}
