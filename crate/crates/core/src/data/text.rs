//! Word splitting shared by the tokenizer and value normalization.

/// Lowercases and splits on whitespace and punctuation. Punctuation
/// characters become single-character words; alphanumeric runs stay whole.
pub fn words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            cur.push(ch);
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Canonical form of a slot value: its words joined by single spaces.
pub fn normalize(text: &str) -> String {
    words(text).join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_punctuation() {
        assert_eq!(words("Cheap, please"), ["cheap", ",", "please"]);
        assert_eq!(words(""), Vec::<String>::new());
        assert_eq!(words("  7 pm\t"), ["7", "pm"]);
        assert_eq!(words("a-b"), ["a", "-", "b"]);
    }

    #[test]
    fn normalize_collapses_whitespace_and_case() {
        assert_eq!(normalize("  The   Gonville  HOTEL "), "the gonville hotel");
        assert_eq!(normalize("7:30"), "7 : 30");
    }
}
