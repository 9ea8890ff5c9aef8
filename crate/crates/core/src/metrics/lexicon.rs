//! Object vocabulary with synonyms and plural forms.
//!
//! File format, one object per line:
//!
//! ```text
//! # comment
//! dog: puppy, pup
//! hot dog
//! dining table: table, desk
//! ```
//!
//! Matching is case-insensitive over word tokens. At each word the longest
//! known phrase wins, so "hot dog stand" yields `hot dog` rather than `dog`.
//! Plurals of the final word are added automatically; an explicit entry
//! always beats a generated plural.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use super::MetricsError;

const IRREGULAR: &[(&str, &str)] = &[
    ("person", "people"),
    ("man", "men"),
    ("woman", "women"),
    ("child", "children"),
    ("mouse", "mice"),
    ("knife", "knives"),
    ("foot", "feet"),
    ("tooth", "teeth"),
    ("goose", "geese"),
    ("sheep", "sheep"),
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Lexicon {
    canonical: BTreeSet<String>,
    surface: HashMap<Vec<String>, String>,
    generated: HashMap<Vec<String>, String>,
    longest: usize,
}

/// Lowercased alphanumeric word tokens.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Plural spellings of a single word.
pub fn plurals(word: &str) -> Vec<String> {
    let mut out = Vec::new();
    if let Some((_, p)) = IRREGULAR.iter().find(|(s, _)| *s == word) {
        out.push((*p).to_string());
    }
    let regular = if ["s", "x", "z", "ch", "sh"]
        .iter()
        .any(|e| word.ends_with(e))
    {
        format!("{word}es")
    } else if word.len() > 1
        && word.ends_with('y')
        && !word[..word.len() - 1].ends_with(['a', 'e', 'i', 'o', 'u'])
    {
        format!("{}ies", &word[..word.len() - 1])
    } else {
        format!("{word}s")
    };
    if !out.contains(&regular) {
        out.push(regular);
    }
    out
}

impl Lexicon {
    pub fn parse(text: &str) -> Result<Self, MetricsError> {
        let mut lex = Lexicon::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| MetricsError::Lexicon {
                line: i + 1,
                message,
            };
            let (head, tail) = line.split_once(':').unwrap_or((line, ""));
            let canonical = words(head).join(" ");
            if canonical.is_empty() {
                return Err(err("missing object name".into()));
            }
            lex.canonical.insert(canonical.clone());
            let forms = std::iter::once(head).chain(tail.split(','));
            for form in forms {
                let phrase = words(form);
                if phrase.is_empty() {
                    continue;
                }
                match lex.surface.get(&phrase) {
                    Some(prev) if *prev != canonical => {
                        return Err(err(format!(
                            "`{}` already names `{prev}`",
                            phrase.join(" ")
                        )));
                    }
                    _ => {}
                }
                for plural in plurals(phrase.last().expect("nonempty")) {
                    let mut p = phrase.clone();
                    *p.last_mut().expect("nonempty") = plural;
                    lex.generated.entry(p).or_insert_with(|| canonical.clone());
                }
                lex.surface.insert(phrase, canonical.clone());
            }
        }
        if lex.canonical.is_empty() {
            return Err(MetricsError::Lexicon {
                line: 0,
                message: "lexicon is empty".into(),
            });
        }
        lex.longest = lex
            .surface
            .keys()
            .chain(lex.generated.keys())
            .map(Vec::len)
            .max()
            .unwrap_or(1);
        Ok(lex)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MetricsError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn from_names<I: IntoIterator<Item = S>, S: AsRef<str>>(
        names: I,
    ) -> Result<Self, MetricsError> {
        let text: Vec<String> = names.into_iter().map(|s| s.as_ref().to_string()).collect();
        Self::parse(&text.join("\n"))
    }

    pub fn objects(&self) -> impl Iterator<Item = &str> {
        self.canonical.iter().map(String::as_str)
    }

    fn lookup(&self, phrase: &[String]) -> Option<&String> {
        self.surface
            .get(phrase)
            .or_else(|| self.generated.get(phrase))
    }

    /// Canonical name of a single object phrase, if known.
    pub fn canonicalize(&self, name: &str) -> Option<String> {
        self.lookup(&words(name)).cloned()
    }

    /// Canonical objects mentioned in `caption`.
    pub fn extract_objects(&self, caption: &str) -> BTreeSet<String> {
        let tokens = words(caption);
        let mut found = BTreeSet::new();
        let mut i = 0;
        while i < tokens.len() {
            let max = self.longest.min(tokens.len() - i);
            let hit = (1..=max)
                .rev()
                .find_map(|n| self.lookup(&tokens[i..i + n]).map(|c| (n, c)));
            match hit {
                Some((n, canonical)) => {
                    found.insert(canonical.clone());
                    i += n;
                }
                None => i += 1,
            }
        }
        found
    }
}
