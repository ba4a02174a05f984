use std::collections::HashSet;
use std::sync::OnceLock;

use super::TokenizerError;

/// Word list used to build the full token filter. The shipped default
/// carries verbalised numbers in six languages, calendar terms, ordinals,
/// cardinal prefixes, geometric terms and X-repetitions.
#[derive(Clone, Debug)]
pub struct FilterLexicon {
    categories: Vec<LexiconCategory>,
}

#[derive(Clone, Debug)]
pub struct LexiconCategory {
    pub name: String,
    pub words: Vec<String>,
}

const SHIPPED: &str = include_str!("../../data/filter_lexicon.txt");

impl FilterLexicon {
    /// Parses the lexicon file format: `# <category>` section headers, one
    /// word per line, blank lines ignored.
    pub fn parse(text: &str) -> Result<Self, TokenizerError> {
        let mut categories: Vec<LexiconCategory> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('#') {
                categories.push(LexiconCategory { name: name.trim().to_string(), words: Vec::new() });
            } else {
                let cat = categories.last_mut().ok_or_else(|| {
                    TokenizerError::MalformedLexicon(format!(
                        "line {}: word {:?} before any category header",
                        lineno + 1,
                        line
                    ))
                })?;
                cat.words.push(line.to_string());
            }
        }
        if categories.is_empty() {
            return Err(TokenizerError::MalformedLexicon("no categories".into()));
        }
        Ok(FilterLexicon { categories })
    }

    /// The word list shipped with the crate.
    pub fn shipped() -> &'static FilterLexicon {
        static CELL: OnceLock<FilterLexicon> = OnceLock::new();
        CELL.get_or_init(|| FilterLexicon::parse(SHIPPED).expect("shipped lexicon parses"))
    }

    pub fn categories(&self) -> &[LexiconCategory] {
        &self.categories
    }

    /// Flat iterator over every word in every category.
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.categories.iter().flat_map(|c| c.words.iter().map(|w| w.as_str()))
    }

    pub fn word_count(&self) -> usize {
        self.categories.iter().map(|c| c.words.len()).sum()
    }

    /// Case-folded word set used for token matching.
    pub fn lowercased_set(&self) -> HashSet<String> {
        self.words().map(|w| w.to_lowercase()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_lexicon_has_expected_categories() {
        let lex = FilterLexicon::shipped();
        let names: Vec<&str> = lex.categories().iter().map(|c| c.name.as_str()).collect();
        for expected in [
            "Digits",
            "Verbalised numbers",
            "Days of the week",
            "Months",
            "Abbreviations of days and months",
            "Numbers, months, and days in French",
            "Numbers, months, and days in Spanish",
            "Numbers, months, and days in Italian",
            "Numbers, months, and days in German",
            "Numbers, months, and days in Portuguese",
            "Ordinal numbers",
            "Cardinal prefixes",
            "Geometric terminology",
            "Repetition of the character X",
            "Other",
        ] {
            assert!(names.contains(&expected), "missing category {expected:?}");
        }
    }

    #[test]
    fn shipped_lexicon_contains_key_words() {
        let set = FilterLexicon::shipped().lowercased_set();
        for w in [
            "seven", "hundred", "monday", "january", "jan", "quatorze", "dieciséis",
            "quattordici", "zwölf", "dezenove", "first", "tri", "pentagon", "xxxx",
            "dozen", "decimal", "quatre-vingt-dix", "segunda-feira",
        ] {
            assert!(set.contains(w), "missing word {w:?}");
        }
        // in the right ballpark of the full list (duplicates across languages exist)
        assert!(FilterLexicon::shipped().word_count() >= 430);
    }

    #[test]
    fn parse_rejects_headerless_words() {
        assert!(FilterLexicon::parse("word\n# Cat\n").is_err());
    }
}
