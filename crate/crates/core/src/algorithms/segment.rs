//! Lossless sentence segmentation.

/// Abbreviations whose trailing period does not end a sentence.
pub const DEFAULT_ABBREVIATIONS: &[&str] = &[
    "mr.", "mrs.", "ms.", "dr.", "prof.", "sr.", "jr.", "st.", "vs.", "e.g.", "i.e.", "u.s.", "no.", "inc.", "ltd.",
    "co.", "fig.", "approx.",
];

fn is_terminal(c: char) -> bool {
    matches!(c, '.' | '?' | '!')
}

fn is_closer(c: char) -> bool {
    matches!(c, '"' | '\'' | ')' | ']' | '\u{201d}' | '\u{2019}')
}

/// Splits after runs of `.`, `?` or `!` (plus closing quotes or brackets)
/// that are followed by whitespace or the end of the text.
///
/// Whitespace between sentences starts the next sentence; trailing
/// whitespace stays with the last one, so the pieces always concatenate
/// back to `text`. A period ending a listed abbreviation does not split.
pub fn sentence_segment<S: AsRef<str>>(text: &str, abbreviations: &[S]) -> Vec<String> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = Vec::new();
    let mut start = 0usize;
    let mut i = 0usize;
    while i < chars.len() {
        if !is_terminal(chars[i].1) {
            i += 1;
            continue;
        }
        let run_start = i;
        while i < chars.len() && is_terminal(chars[i].1) {
            i += 1;
        }
        while i < chars.len() && is_closer(chars[i].1) {
            i += 1;
        }
        let end = chars.get(i).map_or(text.len(), |c| c.0);
        let at_boundary = i == chars.len() || chars[i].1.is_whitespace();
        if !at_boundary {
            continue;
        }
        let word_start = text[start..chars[run_start].0]
            .char_indices()
            .rfind(|(_, c)| c.is_whitespace())
            .map_or(start, |(w, c)| start + w + c.len_utf8());
        let word = text[word_start..end].to_lowercase();
        let single_period =
            chars[run_start].1 == '.' && (run_start + 1 == chars.len() || !is_terminal(chars[run_start + 1].1));
        if single_period && abbreviations.iter().any(|a| a.as_ref().eq_ignore_ascii_case(&word)) {
            continue;
        }
        if !text[start..end].trim().is_empty() {
            out.push(text[start..end].to_string());
            start = end;
        }
    }
    if start < text.len() {
        let rest = &text[start..];
        match out.last_mut() {
            Some(last) if rest.trim().is_empty() => last.push_str(rest),
            _ => out.push(rest.to_string()),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seg(text: &str) -> Vec<String> {
        sentence_segment(text, DEFAULT_ABBREVIATIONS)
    }

    #[test]
    fn basic_rule() {
        assert_eq!(seg("A. B? C"), vec!["A.", " B?", " C"]);
        assert!(seg("").is_empty());
        assert_eq!(seg("Wow!! Really?\" Yes."), vec!["Wow!!", " Really?\"", " Yes."]);
        assert_eq!(seg("3.14 is pi. Next"), vec!["3.14 is pi.", " Next"]);
    }

    #[test]
    fn abbreviations_do_not_split() {
        assert_eq!(seg("Dr. Smith came. He left."), vec!["Dr. Smith came.", " He left."]);
        assert_eq!(seg("See e.g. this. Done"), vec!["See e.g. this.", " Done"]);
        let none: &[&str] = &[];
        assert_eq!(sentence_segment("Dr. Smith", none), vec!["Dr.", " Smith"]);
    }

    #[test]
    fn trailing_whitespace_stays_with_last() {
        assert_eq!(seg("A. B.  "), vec!["A.", " B.  "]);
        assert_eq!(seg("   "), vec!["   "]);
        assert_eq!(seg(" . x"), vec![" .", " x"]);
    }

    proptest! {
        #[test]
        fn lossless(text in "[a-zA-Z .?!\"\n]{0,80}") {
            let parts = seg(&text);
            prop_assert_eq!(parts.concat(), text.clone());
            prop_assert!(parts.iter().all(|p| !p.is_empty()));
        }

        #[test]
        fn lossless_unicode(text in "\\PC{0,60}") {
            prop_assert_eq!(seg(&text).concat(), text);
        }
    }
}
