//! Answer-matching metrics over normalized text.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::dataset::{BenchmarkItem, Choice};

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '\u{2018}'
                | '\u{2019}'
                | '\u{201c}'
                | '\u{201d}'
                | '\u{2013}'
                | '\u{2014}'
                | '\u{2026}'
                | '\u{00bf}'
                | '\u{00a1}'
        )
}

/// Lowercase, drop punctuation, drop the articles a/an/the, collapse
/// whitespace.
pub fn normalize_text(text: &str) -> String {
    let lowered: String = text.to_lowercase().chars().filter(|c| !is_punctuation(*c)).collect();
    lowered
        .split_whitespace()
        .filter(|t| !matches!(*t, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn tokens(text: &str) -> Vec<String> {
    normalize_text(text)
        .split(' ')
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// 1 when some gold answer, normalized, occurs inside the normalized answer.
pub fn accuracy(answer: &str, golds: &[String]) -> f64 {
    let a = normalize_text(answer);
    let hit = golds.iter().any(|g| {
        let g = normalize_text(g);
        if g.is_empty() {
            a.is_empty()
        } else {
            a.contains(&g)
        }
    });
    f64::from(u8::from(hit))
}

pub fn exact_match(answer: &str, golds: &[String]) -> f64 {
    let a = normalize_text(answer);
    f64::from(u8::from(golds.iter().any(|g| normalize_text(g) == a)))
}

fn token_f1(pred: &[String], gold: &[String]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return f64::from(u8::from(pred.is_empty() && gold.is_empty()));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in gold {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    let mut same = 0usize;
    for t in pred {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                same += 1;
            }
        }
    }
    if same == 0 {
        return 0.0;
    }
    let p = same as f64 / pred.len() as f64;
    let r = same as f64 / gold.len() as f64;
    2.0 * p * r / (p + r)
}

/// Best token-multiset F1 over the gold answers.
pub fn f1(answer: &str, golds: &[String]) -> f64 {
    let pred = tokens(answer);
    golds.iter().map(|g| token_f1(&pred, &tokens(g))).fold(0.0, f64::max)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0usize;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// LCS F-measure (beta = 1) on normalized tokens.
pub fn rouge_l(answer: &str, reference: &str) -> f64 {
    let p = tokens(answer);
    let r = tokens(reference);
    if p.is_empty() || r.is_empty() {
        return f64::from(u8::from(p.is_empty() && r.is_empty()));
    }
    let l = lcs_len(&p, &r);
    if l == 0 {
        return 0.0;
    }
    let prec = l as f64 / p.len() as f64;
    let rec = l as f64 / r.len() as f64;
    2.0 * prec * rec / (prec + rec)
}

pub fn rouge_l_max(answer: &str, references: &[String]) -> f64 {
    references.iter().map(|r| rouge_l(answer, r)).fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("str-em needs at least one short-answer set")]
pub struct NoShortAnswers;

/// Fraction of required short answers with an alias present in the answer.
pub fn str_em(answer: &str, sets: &[Vec<String>]) -> Result<f64, NoShortAnswers> {
    if sets.is_empty() {
        return Err(NoShortAnswers);
    }
    let found = sets.iter().filter(|aliases| accuracy(answer, aliases) == 1.0).count();
    Ok(found as f64 / sets.len() as f64)
}

/// 1 when every required short answer is present.
pub fn str_hit(answer: &str, sets: &[Vec<String>]) -> Result<f64, NoShortAnswers> {
    Ok(f64::from(u8::from(str_em(answer, sets)? == 1.0)))
}

/// Multiple-choice accuracy: the answer names the gold option either by its
/// label as a standalone token (`B`, `(B)`, `B.`) or by containing the
/// option text. Golds may be labels or option texts.
pub fn choice_accuracy(answer: &str, golds: &[String], choices: &[Choice]) -> f64 {
    let words: Vec<&str> = answer
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .collect();
    let whole = answer.trim().trim_matches(|c: char| !c.is_alphanumeric());
    let norm_answer = normalize_text(answer);
    let hit = golds.iter().any(|g| {
        let gold = choices
            .iter()
            .find(|c| c.label.eq_ignore_ascii_case(g.trim()))
            .or_else(|| choices.iter().find(|c| normalize_text(&c.text) == normalize_text(g)));
        match gold {
            Some(c) => {
                let text = normalize_text(&c.text);
                words.contains(&c.label.as_str())
                    || whole.eq_ignore_ascii_case(&c.label)
                    || (!text.is_empty() && norm_answer.contains(&text))
            }
            None => accuracy(answer, std::slice::from_ref(g)) == 1.0,
        }
    });
    f64::from(u8::from(hit))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Acc,
    Em,
    F1,
    RougeL,
    StrEm,
    StrHit,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Acc => "acc",
            Metric::Em => "em",
            Metric::F1 => "f1",
            Metric::RougeL => "rouge_l",
            Metric::StrEm => "str_em",
            Metric::StrHit => "str_hit",
        }
    }

    /// Scores one answer. Items with choices use [`choice_accuracy`] for `acc`.
    pub fn score(self, answer: &str, item: &BenchmarkItem) -> Result<f64, NoShortAnswers> {
        Ok(match self {
            Metric::Acc => match &item.choices {
                Some(choices) => choice_accuracy(answer, &item.answers, choices),
                None => accuracy(answer, &item.answers),
            },
            Metric::Em => exact_match(answer, &item.answers),
            Metric::F1 => f1(answer, &item.answers),
            Metric::RougeL => rouge_l_max(answer, &item.answers),
            Metric::StrEm => str_em(answer, &item.short_answer_sets)?,
            Metric::StrHit => str_hit(answer, &item.short_answer_sets)?,
        })
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            Metric::Acc,
            Metric::Em,
            Metric::F1,
            Metric::RougeL,
            Metric::StrEm,
            Metric::StrHit,
        ]
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| format!("unknown metric `{s}`"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn g(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_text("The Cat!"), "cat");
        assert_eq!(normalize_text("a  an the"), "");
        assert_eq!(normalize_text("  Théâtre, an  opera\n"), "théâtre opera");
        assert_eq!(normalize_text("theory"), "theory");
    }

    #[test]
    fn accuracy_and_em() {
        assert_eq!(accuracy("It is Paris, France", &g(&["Paris"])), 1.0);
        assert_eq!(accuracy("London", &g(&["Paris"])), 0.0);
        assert_eq!(exact_match("Paris", &g(&["Paris"])), 1.0);
        assert_eq!(exact_match("Paris, France", &g(&["Paris"])), 0.0);
        assert_eq!(accuracy("anything", &g(&["the"])), 0.0);
    }

    #[test]
    fn f1_by_hand() {
        // "the" is dropped by normalization: pred [cat, sat], gold
        // [cat, sat, down], so P = 1, R = 2/3 and F1 = 0.8.
        assert_eq!(
            f1("the cat sat", &g(&["cat sat down"])),
            2.0 * 1.0 * (2.0 / 3.0) / (1.0 + 2.0 / 3.0)
        );
        assert!((f1("the cat sat", &g(&["cat sat down"])) - 0.8).abs() < 1e-15);
        // without articles in play, P = R = 2/3
        assert!((f1("my cat sat", &g(&["cat sat down"])) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(f1("x y", &g(&["x y"])), 1.0);
        assert_eq!(f1("x", &g(&["y"])), 0.0);
        assert_eq!(f1("the", &g(&["a"])), 1.0);
        assert_eq!(f1("the", &g(&["x"])), 0.0);
    }

    #[test]
    fn rouge_by_hand() {
        assert_eq!(rouge_l("w x y z", "w y z x"), 0.75);
        assert_eq!(rouge_l("x y", "x y"), 1.0);
        assert_eq!(rouge_l("x y", "z w"), 0.0);
    }

    #[test]
    fn str_metrics() {
        let sets = vec![g(&["Paris"]), g(&["Lyon", "Lyons"])];
        assert_eq!(str_em("Paris is big", &sets).unwrap(), 0.5);
        assert_eq!(str_hit("Paris is big", &sets).unwrap(), 0.0);
        assert_eq!(str_em("Paris and Lyons", &sets).unwrap(), 1.0);
        assert_eq!(str_hit("Paris and Lyons", &sets).unwrap(), 1.0);
        assert!(str_em("x", &[]).is_err());
    }

    #[test]
    fn multiple_choice() {
        let choices = vec![
            Choice {
                label: "A".into(),
                text: "Mercury".into(),
            },
            Choice {
                label: "B".into(),
                text: "Venus".into(),
            },
        ];
        assert_eq!(choice_accuracy("B", &g(&["B"]), &choices), 1.0);
        assert_eq!(choice_accuracy("(B) Venus", &g(&["B"]), &choices), 1.0);
        assert_eq!(choice_accuracy("The answer is venus.", &g(&["B"]), &choices), 1.0);
        assert_eq!(choice_accuracy("b", &g(&["B"]), &choices), 1.0);
        assert_eq!(choice_accuracy("A", &g(&["B"]), &choices), 0.0);
        assert_eq!(choice_accuracy("a planet", &g(&["A"]), &choices), 0.0);
        assert_eq!(choice_accuracy("Venus", &g(&["Venus"]), &choices), 1.0);
    }

    proptest! {
        #[test]
        fn normalize_idempotent(s in "\\PC{0,40}") {
            let n = normalize_text(&s);
            prop_assert_eq!(normalize_text(&n), n);
        }

        #[test]
        fn pointwise_bounds(a in "[a-c ,.]{0,20}", b in "[a-c ,.]{0,20}") {
            let golds = vec![b.clone()];
            let (acc, em, f) = (accuracy(&a, &golds), exact_match(&a, &golds), f1(&a, &golds));
            let r = rouge_l(&a, &b);
            for v in [acc, em, f, r] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!(em <= acc);
            if em == 1.0 {
                prop_assert_eq!(f, 1.0);
            }
            prop_assert_eq!(f, f1(&b, std::slice::from_ref(&a)));
        }
    }
}
