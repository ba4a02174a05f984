/// Extracts the answer from a completion: scan maximal runs of consecutive
/// ASCII digits and return the first run of length exactly `n`. A run of a
/// different length never validates, so "12345" is not an answer to the
/// 3-digit task.
pub fn parse_answer(text: &str, n: usize) -> Option<String> {
    if n == 0 {
        return None;
    }
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i].is_ascii_digit() {
            let start = i;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            if i - start == n {
                return Some(text[start..i].to_string());
            }
        } else {
            i += 1;
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn extracts_answer_from_decorated_text() {
        assert_eq!(
            parse_answer("Sure, here is a random string of 3 digits: 314", 3),
            Some("314".into())
        );
    }

    #[test]
    fn no_digits_is_invalid() {
        assert_eq!(parse_answer("no digits here", 4), None);
    }

    #[test]
    fn first_exact_length_run_wins() {
        assert_eq!(parse_answer("12345 then 678", 3), Some("678".into()));
        assert_eq!(parse_answer("12 3456 789 012", 3), Some("789".into()));
    }

    #[test]
    fn longer_runs_do_not_validate_prefixes() {
        assert_eq!(parse_answer("12345", 3), None);
        assert_eq!(parse_answer("0314159", 3), None);
    }

    #[test]
    fn boundary_runs() {
        assert_eq!(parse_answer("314", 3), Some("314".into()));
        assert_eq!(parse_answer("x314", 3), Some("314".into()));
        assert_eq!(parse_answer("314x", 3), Some("314".into()));
        assert_eq!(parse_answer("", 3), None);
    }

    proptest! {
        /// Rendering a parsed answer back into text re-parses identically.
        #[test]
        fn parse_is_idempotent(digits in "[0-9]{1,8}", pre in "[a-z ]{0,10}", post in "[a-z ]{0,10}") {
            let n = digits.len();
            let text = format!("{pre}{digits}{post}");
            if let Some(parsed) = parse_answer(&text, n) {
                prop_assert_eq!(parse_answer(&parsed, n), Some(parsed.clone()));
            }
        }

        /// Any returned answer is exactly n digits and appears in the text.
        #[test]
        fn parsed_answers_are_wellformed(text in ".{0,40}", n in 1usize..6) {
            if let Some(a) = parse_answer(&text, n) {
                prop_assert_eq!(a.len(), n);
                prop_assert!(a.chars().all(|c| c.is_ascii_digit()));
                prop_assert!(text.contains(&a));
            }
        }
    }
}
