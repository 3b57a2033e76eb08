//! Removal of reflection and markup tokens from training-style records.

use std::io::{BufRead, Write};

use serde_json::Value;

use super::dataset::DatasetError;
use crate::algorithms::SelfRagVocabulary;

/// Every reflection token plus the paragraph markup.
pub fn default_special_tokens() -> Vec<String> {
    let v = SelfRagVocabulary::default();
    let mut tokens: Vec<String> = v
        .all_tokens()
        .into_iter()
        .filter(|t| *t != v.end)
        .map(str::to_string)
        .collect();
    tokens.push("[Continue to Use Evidence]".into());
    tokens
}

/// Removes every listed token from `text` until none remains, then
/// collapses the double spaces left behind. Returns the number of removals.
pub fn strip_text(text: &str, tokens: &[String]) -> (String, usize) {
    let mut out = text.to_string();
    let mut removed = 0usize;
    loop {
        let before = removed;
        for t in tokens.iter().filter(|t| !t.is_empty()) {
            let n = out.matches(t.as_str()).count();
            if n > 0 {
                removed += n;
                out = out.replace(t.as_str(), "");
            }
        }
        if removed == before {
            break;
        }
    }
    if removed > 0 {
        while out.contains("  ") {
            out = out.replace("  ", " ");
        }
    }
    (out, removed)
}

/// Strips tokens from every string in `value`, recursively.
pub fn strip_value(value: &mut Value, tokens: &[String]) -> usize {
    match value {
        Value::String(s) => {
            let (clean, n) = strip_text(s, tokens);
            *s = clean;
            n
        }
        Value::Array(items) => items.iter_mut().map(|v| strip_value(v, tokens)).sum(),
        Value::Object(m) => m.values_mut().map(|v| strip_value(v, tokens)).sum(),
        _ => 0,
    }
}

/// Strips each record and reports the total removal count.
pub fn strip_special_tokens(records: &mut [Value], tokens: &[String]) -> usize {
    records.iter_mut().map(|r| strip_value(r, tokens)).sum()
}

/// Strips every JSONL record read from `input` into `output`, one compact
/// record per line, blank lines dropped. Returns the removal count.
pub fn strip_jsonl(input: impl BufRead, mut output: impl Write, tokens: &[String]) -> Result<usize, DatasetError> {
    let io = |source| DatasetError::Io {
        path: "<stream>".into(),
        source,
    };
    let mut removed = 0usize;
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let mut value: Value = serde_json::from_str(&line).map_err(|e| DatasetError::Record {
            line: i + 1,
            reason: e.to_string(),
        })?;
        removed += strip_value(&mut value, tokens);
        serde_json::to_writer(&mut output, &value).map_err(|e| io(e.into()))?;
        output.write_all(b"\n").map_err(io)?;
    }
    output.flush().map_err(io)?;
    Ok(removed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn strips_defaults() {
        let t = default_special_tokens();
        let (s, n) = strip_text("[Retrieval]<paragraph>x</paragraph>", &t);
        assert_eq!((s.as_str(), n), ("x", 3));
        let (s, n) = strip_text("plain text", &t);
        assert_eq!((s.as_str(), n), ("plain text", 0));
    }

    #[test]
    fn fixpoint_and_idempotence() {
        let tokens = vec!["ab".to_string()];
        let (s, n) = strip_text("aabb", &tokens);
        assert_eq!((s.as_str(), n), ("", 2));
        let mut recs =
            vec![json!({"instruction": "q", "output": "[Relevant] yes [Utility:5]", "n": 3, "list": ["[Irrelevant]"]})];
        let t = default_special_tokens();
        assert_eq!(strip_special_tokens(&mut recs, &t), 3);
        assert_eq!(recs[0]["output"], " yes ");
        assert_eq!(strip_special_tokens(&mut recs, &t), 0);
    }

    #[test]
    fn jsonl_stream() {
        let t = default_special_tokens();
        let input = "{\"output\":\"a [No Retrieval]b\"}\n\n{\"output\":\"c\"}\n";
        let mut out = Vec::new();
        assert_eq!(strip_jsonl(input.as_bytes(), &mut out, &t).unwrap(), 1);
        let again_in = out.clone();
        let mut again = Vec::new();
        assert_eq!(strip_jsonl(again_in.as_slice(), &mut again, &t).unwrap(), 0);
        assert_eq!(again, out);
        assert!(matches!(
            strip_jsonl("{".as_bytes(), Vec::new(), &t),
            Err(DatasetError::Record { line: 1, .. })
        ));
    }
}
