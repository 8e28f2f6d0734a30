const PUNCTUATION: &[char] = &['.', ',', '!', '?', ';', ':', '\'', '"'];

/// Lowercases, splits on whitespace and breaks `.,!?;:'"` out as
/// standalone tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut cur = String::new();
        for ch in word.chars().flat_map(char::to_lowercase) {
            if PUNCTUATION.contains(&ch) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.push(ch);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn splits_punctuation_and_lowercases() {
        assert_eq!(
            tokenize("That cat looks SO happy!"),
            ["that", "cat", "looks", "so", "happy", "!"]
        );
        assert_eq!(tokenize("it's a dog"), ["it", "'", "s", "a", "dog"]);
        assert!(tokenize("   ").is_empty());
    }

    proptest! {
        #[test]
        fn idempotent_on_joined_output(s in "[a-zA-Z .,!?;:'\"]{0,40}") {
            let once = tokenize(&s);
            let twice = tokenize(&once.join(" "));
            prop_assert_eq!(once, twice);
        }
    }
}
