//! System, task and algorithm instruction pools.
//!
//! Every prompt is assembled from one template of each pool, so algorithms
//! compared in one run differ only in their algorithm-pool template. Templates
//! use `{name}` placeholders; `{{` and `}}` produce literal braces.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Passage;

const DEFAULT_POOLS: &str = include_str!("../assets/instructions.yaml");

#[derive(Debug, thiserror::Error)]
pub enum InstructionError {
    #[error("cannot read instruction file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid instruction file: {0}")]
    Yaml(#[from] serde_yaml::Error),
    #[error("{pool} template `{name}`: {reason}")]
    Template {
        pool: PoolKind,
        name: String,
        reason: String,
    },
    #[error("{pool} template `{name}` uses undeclared placeholder `{placeholder}`")]
    UndeclaredPlaceholder {
        pool: PoolKind,
        name: String,
        placeholder: String,
    },
    #[error("duplicate {1} template name `{0}`")]
    Duplicate(String, PoolKind),
    #[error("no {pool} template named `{name}`")]
    Unknown { pool: PoolKind, name: String },
    #[error("{pool} template `{name}` needs a value for `{placeholder}`")]
    Unbound {
        pool: PoolKind,
        name: String,
        placeholder: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    System,
    Task,
    Algorithm,
}

impl fmt::Display for PoolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolKind::System => "system",
            PoolKind::Task => "task",
            PoolKind::Algorithm => "algorithm",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Literal(String),
    Slot(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstructionTemplate {
    name: String,
    pool: PoolKind,
    placeholders: Vec<String>,
    text: String,
    pieces: Vec<Piece>,
}

impl InstructionTemplate {
    pub fn new(
        pool: PoolKind,
        name: impl Into<String>,
        placeholders: Vec<String>,
        text: impl Into<String>,
    ) -> Result<Self, InstructionError> {
        let name = name.into();
        let text = text.into();
        let pieces = parse(&text).map_err(|reason| InstructionError::Template {
            pool,
            name: name.clone(),
            reason,
        })?;
        let declared: BTreeSet<&str> = placeholders.iter().map(String::as_str).collect();
        for piece in &pieces {
            if let Piece::Slot(slot) = piece {
                if !declared.contains(slot.as_str()) {
                    return Err(InstructionError::UndeclaredPlaceholder {
                        pool,
                        name,
                        placeholder: slot.clone(),
                    });
                }
            }
        }
        Ok(Self {
            name,
            pool,
            placeholders,
            text,
            pieces,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn pool(&self) -> PoolKind {
        self.pool
    }

    pub fn placeholders(&self) -> &[String] {
        &self.placeholders
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Placeholders that actually occur in the text, in first-use order.
    pub fn used_placeholders(&self) -> Vec<&str> {
        let mut seen = Vec::new();
        for p in &self.pieces {
            if let Piece::Slot(s) = p {
                if !seen.contains(&s.as_str()) {
                    seen.push(s.as_str());
                }
            }
        }
        seen
    }

    pub fn render(&self, bindings: &Bindings) -> Result<String, InstructionError> {
        let mut out = String::with_capacity(self.text.len());
        for p in &self.pieces {
            match p {
                Piece::Literal(l) => out.push_str(l),
                Piece::Slot(s) => out.push_str(bindings.get(s).ok_or_else(|| InstructionError::Unbound {
                    pool: self.pool,
                    name: self.name.clone(),
                    placeholder: s.clone(),
                })?),
            }
        }
        Ok(out)
    }
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn parse(text: &str) -> Result<Vec<Piece>, String> {
    let mut pieces = Vec::new();
    let mut lit = String::new();
    let mut rest = text;
    while let Some(i) = rest.find(['{', '}']) {
        lit.push_str(&rest[..i]);
        let tail = &rest[i..];
        if tail.starts_with("{{") || tail.starts_with("}}") {
            lit.push(tail.as_bytes()[0] as char);
            rest = &tail[2..];
        } else if tail.starts_with('}') {
            return Err(format!("unmatched `}}` at byte {}", text.len() - tail.len()));
        } else {
            let close = tail
                .find('}')
                .ok_or_else(|| format!("unterminated placeholder at byte {}", text.len() - tail.len()))?;
            let slot = &tail[1..close];
            if !is_ident(slot) {
                return Err(format!(
                    "invalid placeholder name `{slot}` (use `{{{{` for a literal brace)"
                ));
            }
            if !lit.is_empty() {
                pieces.push(Piece::Literal(std::mem::take(&mut lit)));
            }
            pieces.push(Piece::Slot(slot.to_string()));
            rest = &tail[close + 1..];
        }
    }
    lit.push_str(rest);
    if !lit.is_empty() {
        pieces.push(Piece::Literal(lit));
    }
    Ok(pieces)
}

/// Placeholder values for one rendering.
pub type Bindings = BTreeMap<String, String>;

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawTemplate {
    name: String,
    #[serde(default)]
    placeholders: Vec<String>,
    template: String,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawPools {
    #[serde(default)]
    system: Vec<RawTemplate>,
    #[serde(default)]
    task: Vec<RawTemplate>,
    #[serde(default)]
    algorithm: Vec<RawTemplate>,
}

/// Validated, immutable template pools.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct InstructionStore {
    pools: BTreeMap<PoolKind, BTreeMap<String, InstructionTemplate>>,
}

impl InstructionStore {
    /// The pools shipped with the crate.
    pub fn defaults() -> Self {
        Self::from_yaml_str(DEFAULT_POOLS).expect("bundled instructions are valid")
    }

    pub fn default_yaml() -> &'static str {
        DEFAULT_POOLS
    }

    pub fn from_yaml_str(yaml: &str) -> Result<Self, InstructionError> {
        let raw: RawPools = serde_yaml::from_str(yaml)?;
        let mut store = Self::default();
        for (pool, list) in [
            (PoolKind::System, raw.system),
            (PoolKind::Task, raw.task),
            (PoolKind::Algorithm, raw.algorithm),
        ] {
            for t in list {
                store.insert(InstructionTemplate::new(pool, t.name, t.placeholders, t.template)?)?;
            }
        }
        Ok(store)
    }

    pub fn insert(&mut self, template: InstructionTemplate) -> Result<(), InstructionError> {
        let pool = self.pools.entry(template.pool).or_default();
        if pool.contains_key(&template.name) {
            return Err(InstructionError::Duplicate(template.name, template.pool));
        }
        pool.insert(template.name.clone(), template);
        Ok(())
    }

    pub fn get(&self, pool: PoolKind, name: &str) -> Result<&InstructionTemplate, InstructionError> {
        self.pools
            .get(&pool)
            .and_then(|p| p.get(name))
            .ok_or_else(|| InstructionError::Unknown {
                pool,
                name: name.to_string(),
            })
    }

    pub fn names(&self, pool: PoolKind) -> Vec<&str> {
        self.pools
            .get(&pool)
            .map(|p| p.keys().map(String::as_str).collect())
            .unwrap_or_default()
    }

    pub fn len(&self) -> usize {
        self.pools.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Renders system, task and algorithm templates, joined by blank lines.
    /// Sections that render blank are skipped.
    pub fn render(&self, assembly: &PromptAssembly) -> Result<String, InstructionError> {
        let parts = [
            self.get(PoolKind::System, &assembly.system)?
                .render(&assembly.bindings)?,
            self.get(PoolKind::Task, &assembly.task)?.render(&assembly.bindings)?,
            self.get(PoolKind::Algorithm, &assembly.algorithm)?
                .render(&assembly.bindings)?,
        ];
        Ok(parts
            .iter()
            .filter(|p| !p.trim().is_empty())
            .map(String::as_str)
            .collect::<Vec<_>>()
            .join("\n\n"))
    }
}

/// Loads pools from a YAML file with `system`, `task` and `algorithm` lists.
pub fn load_pools(path: impl AsRef<Path>) -> Result<InstructionStore, InstructionError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| InstructionError::Io {
        path: path.display().to_string(),
        source,
    })?;
    InstructionStore::from_yaml_str(&text)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptAssembly {
    pub system: String,
    pub task: String,
    pub algorithm: String,
    pub bindings: Bindings,
}

/// Numbered `[i] title\ntext` blocks separated by blank lines.
pub fn format_passages(passages: &[Passage]) -> String {
    passages
        .iter()
        .enumerate()
        .map(|(i, p)| format!("[{}] {}\n{}", i + 1, p.title, p.text))
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// `A. text` lines for labeled choices.
pub fn format_choices(choices: &[(String, String)]) -> String {
    choices
        .iter()
        .map(|(label, text)| format!("{label}. {text}"))
        .collect::<Vec<_>>()
        .join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tpl(text: &str, placeholders: &[&str]) -> Result<InstructionTemplate, InstructionError> {
        InstructionTemplate::new(
            PoolKind::Algorithm,
            "t",
            placeholders.iter().map(|s| s.to_string()).collect(),
            text,
        )
    }

    fn bind(pairs: &[(&str, &str)]) -> Bindings {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn renders_placeholders() {
        let t = tpl("Q: {query}", &["query"]).unwrap();
        assert_eq!(t.render(&bind(&[("query", "hi")])).unwrap(), "Q: hi");
        assert_eq!(
            t.render(&bind(&[("query", "hi")])).unwrap(),
            t.render(&bind(&[("query", "hi")])).unwrap()
        );
    }

    #[test]
    fn escapes_and_errors() {
        let t = tpl("{{json}} {x}}}", &["x"]).unwrap();
        assert_eq!(t.render(&bind(&[("x", "1")])).unwrap(), "{json} 1}");
        assert!(matches!(
            tpl("{y}", &["x"]),
            Err(InstructionError::UndeclaredPlaceholder { placeholder, .. }) if placeholder == "y"
        ));
        assert!(tpl("{open", &[]).is_err());
        assert!(tpl("close}", &[]).is_err());
        assert!(tpl("{not valid}", &[]).is_err());
        let t = tpl("{x}", &["x"]).unwrap();
        assert!(matches!(
            t.render(&Bindings::new()),
            Err(InstructionError::Unbound { .. })
        ));
    }

    #[test]
    fn passage_blocks() {
        let ps = vec![Passage::new(0, "t1", "x1"), Passage::new(1, "t2", "x2")];
        assert_eq!(format_passages(&ps), "[1] t1\nx1\n\n[2] t2\nx2");
        assert_eq!(format_passages(&[]), "");
    }

    #[test]
    fn pool_counts_and_duplicates() {
        let mut yaml = String::from("system:\n  - {name: s, template: sys}\ntask:\n");
        for i in 0..10 {
            yaml.push_str(&format!("  - {{name: t{i}, template: task {i}}}\n"));
        }
        yaml.push_str("algorithm:\n");
        for i in 0..7 {
            yaml.push_str(&format!(
                "  - {{name: a{i}, placeholders: [query], template: \"{{query}}\"}}\n"
            ));
        }
        let store = InstructionStore::from_yaml_str(&yaml).unwrap();
        assert_eq!(store.len(), 18);
        let dup = "task:\n  - {name: t, template: a}\n  - {name: t, template: b}\n";
        assert!(
            matches!(InstructionStore::from_yaml_str(dup), Err(InstructionError::Duplicate(n, PoolKind::Task)) if n == "t")
        );
        let same_name_other_pool = "task:\n  - {name: t, template: a}\nalgorithm:\n  - {name: t, template: b}\n";
        assert!(InstructionStore::from_yaml_str(same_name_other_pool).is_ok());
    }

    #[test]
    fn undeclared_placeholder_names_template() {
        let err = InstructionStore::from_yaml_str("algorithm:\n  - {name: bad, template: \"{query}\"}\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bad") && msg.contains("query"), "{msg}");
    }

    #[test]
    fn defaults_cover_every_benchmark() {
        let store = InstructionStore::defaults();
        for task in [
            "popqa",
            "triviaqa",
            "hotpotqa",
            "2wikimultihopqa",
            "arc",
            "mmlu",
            "pubhealth",
            "strategyqa",
            "factscore",
            "asqa",
        ] {
            store.get(PoolKind::Task, task).unwrap();
        }
        let mmlu = store.get(PoolKind::Task, "mmlu").unwrap();
        assert_eq!(mmlu.used_placeholders(), vec!["choices"]);
    }

    #[test]
    fn assembly_joins_sections() {
        let store = InstructionStore::from_yaml_str(
            "system:\n  - {name: s, template: SYS}\n  - {name: empty, template: \"\"}\ntask:\n  - {name: t, template: TASK}\nalgorithm:\n  - {name: a, placeholders: [query], template: \"Q: {query}\"}\n",
        )
        .unwrap();
        let mut a = PromptAssembly {
            system: "s".into(),
            task: "t".into(),
            algorithm: "a".into(),
            bindings: bind(&[("query", "hi"), ("unused", "z")]),
        };
        assert_eq!(store.render(&a).unwrap(), "SYS\n\nTASK\n\nQ: hi");
        a.system = "empty".into();
        assert_eq!(store.render(&a).unwrap(), "TASK\n\nQ: hi");
        a.algorithm = "missing".into();
        assert!(matches!(store.render(&a), Err(InstructionError::Unknown { .. })));
    }

    proptest! {
        #[test]
        fn literal_text_round_trips(text in "[^{}]{0,40}") {
            let t = tpl(&text, &[]).unwrap();
            prop_assert_eq!(t.render(&Bindings::new()).unwrap(), text);
        }

        #[test]
        fn every_slot_is_substituted(names in proptest::collection::vec("[a-z]{1,5}", 1..5), sep in "[ a-z.]{0,4}") {
            let text = names.iter().map(|n| format!("{{{n}}}")).collect::<Vec<_>>().join(&sep);
            let t = tpl(&text, &names.iter().map(String::as_str).collect::<Vec<_>>()).unwrap();
            let b: Bindings = names.iter().map(|n| (n.clone(), format!("<{n}>"))).collect();
            let out = t.render(&b).unwrap();
            let expected = names.iter().map(|n| format!("<{n}>")).collect::<Vec<_>>().join(&sep);
            prop_assert_eq!(out, expected);
        }
    }
}
