//! JSONL benchmark adapters.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("cannot read dataset {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Record { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Choice {
    pub label: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkItem {
    pub id: String,
    pub question: String,
    /// At least one gold answer.
    pub answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<Choice>>,
    /// One alias list per required short answer.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub short_answer_sets: Vec<Vec<String>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, Value>,
}

/// Where each field lives in a source record. Keys are dotted paths; a `*`
/// segment maps over an array (`qa_pairs.*.short_answers`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyMap {
    pub question_key: String,
    pub answers_key: String,
    #[serde(default)]
    pub choices_key: Option<String>,
    /// Without an id key, items are numbered by line.
    #[serde(default)]
    pub id_key: Option<String>,
    #[serde(default)]
    pub short_answers_key: Option<String>,
}

impl KeyMap {
    pub fn new(question_key: impl Into<String>, answers_key: impl Into<String>) -> Self {
        Self {
            question_key: question_key.into(),
            answers_key: answers_key.into(),
            choices_key: None,
            id_key: None,
            short_answers_key: None,
        }
    }

    fn mapped_roots(&self) -> BTreeSet<&str> {
        [
            Some(&self.question_key),
            Some(&self.answers_key),
            self.choices_key.as_ref(),
            self.id_key.as_ref(),
            self.short_answers_key.as_ref(),
        ]
        .into_iter()
        .flatten()
        .map(|k| k.split('.').next().unwrap_or(k))
        .collect()
    }
}

/// Resolves a dotted path; `*` collects the rest of the path over an array.
pub fn lookup(value: &Value, path: &str) -> Option<Value> {
    fn walk(value: &Value, parts: &[&str]) -> Option<Value> {
        let Some((head, rest)) = parts.split_first() else {
            return Some(value.clone());
        };
        if *head == "*" {
            let items = value.as_array()?;
            return items
                .iter()
                .map(|v| walk(v, rest))
                .collect::<Option<Vec<_>>>()
                .map(Value::Array);
        }
        let next = match value {
            Value::Object(m) => m.get(*head)?,
            Value::Array(a) => a.get(head.parse::<usize>().ok()?)?,
            _ => return None,
        };
        walk(next, rest)
    }
    let parts: Vec<&str> = path.split('.').collect();
    walk(value, &parts)
}

fn scalar_text(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

fn text_list(v: &Value) -> Option<Vec<String>> {
    match v {
        Value::Array(items) => items.iter().map(scalar_text).collect(),
        other => scalar_text(other).map(|s| vec![s]),
    }
}

fn labels(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| {
            if i < 26 {
                char::from(b'A' + i as u8).to_string()
            } else {
                (i + 1).to_string()
            }
        })
        .collect()
}

/// Accepts `["x", "y"]`, `{"A": "x"}`, `{"label": [..], "text": [..]}` or
/// `[{"label": "A", "text": "x"}]`.
fn parse_choices(v: &Value) -> Result<Vec<Choice>, String> {
    let choices = match v {
        Value::Array(items) if items.iter().all(Value::is_object) && !items.is_empty() => items
            .iter()
            .map(|o| {
                let label = o.get("label").and_then(scalar_text);
                let text = o.get("text").and_then(scalar_text);
                match (label, text) {
                    (Some(label), Some(text)) => Ok(Choice { label, text }),
                    _ => Err("choice objects need `label` and `text`".to_string()),
                }
            })
            .collect::<Result<Vec<_>, _>>()?,
        Value::Array(_) => {
            let texts = text_list(v).ok_or("choices must be strings")?;
            labels(texts.len())
                .into_iter()
                .zip(texts)
                .map(|(label, text)| Choice { label, text })
                .collect()
        }
        Value::Object(m) if m.contains_key("text") => {
            let texts = m.get("text").and_then(text_list).ok_or("choices.text must be a list")?;
            let ls = match m.get("label") {
                Some(l) => text_list(l).ok_or("choices.label must be a list")?,
                None => labels(texts.len()),
            };
            if ls.len() != texts.len() {
                return Err("choices.label and choices.text differ in length".into());
            }
            ls.into_iter()
                .zip(texts)
                .map(|(label, text)| Choice { label, text })
                .collect()
        }
        Value::Object(m) => m
            .iter()
            .map(|(label, t)| {
                scalar_text(t)
                    .map(|text| Choice {
                        label: label.clone(),
                        text,
                    })
                    .ok_or_else(|| format!("choice `{label}` is not text"))
            })
            .collect::<Result<Vec<_>, _>>()?,
        _ => return Err("unsupported choices shape".into()),
    };
    let mut seen = BTreeSet::new();
    for c in &choices {
        if !seen.insert(c.label.as_str()) {
            return Err(format!("duplicate choice label `{}`", c.label));
        }
    }
    Ok(choices)
}

/// Normalizes one parsed record; `line` is 1-based and only used for ids.
pub fn parse_record(record: &Value, keymap: &KeyMap, line: usize) -> Result<BenchmarkItem, String> {
    let need = |key: &str| lookup(record, key).ok_or_else(|| format!("missing key `{key}`"));
    let question =
        scalar_text(&need(&keymap.question_key)?).ok_or_else(|| format!("`{}` is not text", keymap.question_key))?;
    let answers = text_list(&need(&keymap.answers_key)?)
        .ok_or_else(|| format!("`{}` must be text or a list of text", keymap.answers_key))?;
    if answers.is_empty() {
        return Err(format!("`{}` holds no gold answer", keymap.answers_key));
    }
    let id = match &keymap.id_key {
        Some(k) => scalar_text(&need(k)?).ok_or_else(|| format!("`{k}` is not a scalar"))?,
        None => line.to_string(),
    };
    let choices = match &keymap.choices_key {
        Some(k) => Some(parse_choices(&need(k)?)?),
        None => None,
    };
    let short_answer_sets = match &keymap.short_answers_key {
        Some(k) => match need(k)? {
            Value::Array(sets) => sets
                .iter()
                .map(|s| text_list(s).ok_or_else(|| format!("`{k}` must hold lists of text")))
                .collect::<Result<Vec<_>, _>>()?,
            _ => return Err(format!("`{k}` must be a list")),
        },
        None => Vec::new(),
    };
    let mapped = keymap.mapped_roots();
    let metadata = record
        .as_object()
        .map(|m| {
            m.iter()
                .filter(|(k, _)| !mapped.contains(k.as_str()))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect()
        })
        .unwrap_or_default();
    Ok(BenchmarkItem {
        id,
        question,
        answers,
        choices,
        short_answer_sets,
        metadata,
    })
}

pub fn parse_dataset(reader: impl BufRead, keymap: &KeyMap) -> Result<Vec<BenchmarkItem>, DatasetError> {
    let mut items = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| DatasetError::Record {
            line: line_no,
            reason: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Value = serde_json::from_str(&line).map_err(|e| DatasetError::Record {
            line: line_no,
            reason: format!("invalid JSON: {e}"),
        })?;
        let item =
            parse_record(&record, keymap, line_no).map_err(|reason| DatasetError::Record { line: line_no, reason })?;
        if !ids.insert(item.id.clone()) {
            return Err(DatasetError::Record {
                line: line_no,
                reason: format!("duplicate item id `{}`", item.id),
            });
        }
        items.push(item);
    }
    Ok(items)
}

/// Reads a JSONL benchmark file into normalized items, in file order.
pub fn load_dataset(path: impl AsRef<Path>, keymap: &KeyMap) -> Result<Vec<BenchmarkItem>, DatasetError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_dataset(std::io::BufReader::new(file), keymap)
}

/// The first `n` items, in order.
pub fn sample_sequential(items: &[BenchmarkItem], n: usize) -> Vec<BenchmarkItem> {
    items.iter().take(n).cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn maps_and_coerces() {
        let km = KeyMap::new("q", "a");
        let item = parse_record(&json!({"q": "x", "a": ["y"]}), &km, 1).unwrap();
        assert_eq!(
            (item.question.as_str(), item.answers.clone()),
            ("x", vec!["y".to_string()])
        );
        let item = parse_record(&json!({"q": "x", "a": "y", "extra": 1}), &km, 4).unwrap();
        assert_eq!(item.answers, vec!["y"]);
        assert_eq!(item.id, "4");
        assert_eq!(item.metadata["extra"], json!(1));
        assert!(parse_record(&json!({"q": "x"}), &km, 1).unwrap_err().contains("`a`"));
        assert!(parse_record(&json!({"q": "x", "a": []}), &km, 1).is_err());
    }

    #[test]
    fn dotted_and_wildcard_paths() {
        let v = json!({"m": {"q": "x"}, "pairs": [{"s": ["a", "b"]}, {"s": ["c"]}]});
        assert_eq!(lookup(&v, "m.q"), Some(json!("x")));
        assert_eq!(lookup(&v, "pairs.*.s"), Some(json!([["a", "b"], ["c"]])));
        assert_eq!(lookup(&v, "pairs.1.s.0"), Some(json!("c")));
        assert_eq!(lookup(&v, "m.zz"), None);
    }

    #[test]
    fn choice_shapes() {
        let plain = parse_choices(&json!(["x", "y"])).unwrap();
        assert_eq!(
            plain[1],
            Choice {
                label: "B".into(),
                text: "y".into()
            }
        );
        let cols = parse_choices(&json!({"label": ["1", "2"], "text": ["x", "y"]})).unwrap();
        assert_eq!(cols[0].label, "1");
        let map = parse_choices(&json!({"A": "x", "B": "y"})).unwrap();
        assert_eq!(map.len(), 2);
        assert!(parse_choices(&json!([{"label": "A", "text": "x"}, {"label": "A", "text": "y"}])).is_err());
    }

    #[test]
    fn missing_key_reports_line() {
        let data = "{\"q\":\"a\",\"a\":\"b\"}\n\n{\"q\":\"c\"}\n";
        let err = parse_dataset(data.as_bytes(), &KeyMap::new("q", "a")).unwrap_err();
        assert!(matches!(err, DatasetError::Record { line: 3, .. }), "{err}");
    }

    #[test]
    fn sequential_sampling() {
        let data: String = (0..1000)
            .map(|i| format!("{{\"id\":{i},\"q\":\"q{i}\",\"a\":\"x\"}}\n"))
            .collect();
        let mut km = KeyMap::new("q", "a");
        km.id_key = Some("id".into());
        let items = parse_dataset(data.as_bytes(), &km).unwrap();
        let s = sample_sequential(&items, 500);
        assert_eq!(s.len(), 500);
        assert_eq!(s[0].id, "0");
        assert_eq!(s[499].id, "499");
        assert_eq!(sample_sequential(&items[..3], 500).len(), 3);
    }
}
