//! Caption templates for generation and their background-only variants.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Placeholder token standing for the personalized instance.
pub const IDENTIFIER: &str = "<new1>";

const BUNDLED: &str = include_str!("../../data/captions.json");

const ARTICLES: [&str; 3] = ["a", "an", "the"];
const PREPOSITIONS: [&str; 12] = [
    "on", "in", "at", "under", "near", "inside", "beside", "by", "with", "against", "of", "onto",
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionEntry {
    pub template: String,
    pub category: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionCorpus {
    pub entries: Vec<CaptionEntry>,
    #[serde(default)]
    pub background_overrides: BTreeMap<String, String>,
}

impl CaptionCorpus {
    /// The shipped corpus: object-in-scene templates for every supported
    /// category, with curated background captions where the removal rule
    /// leaves an odd sentence.
    pub fn bundled() -> Self {
        let corpus: CaptionCorpus = serde_json::from_str(BUNDLED).expect("bundled caption corpus parses");
        corpus.validate().expect("bundled caption corpus is valid");
        corpus
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let corpus: CaptionCorpus = serde_json::from_str(text)?;
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            if e.template.matches(IDENTIFIER).count() != 1 {
                return Err(Error::MissingIdentifierToken(e.template.clone()));
            }
        }
        Ok(())
    }

    /// Templates for `category`; falls back to the plain instance prompt when
    /// the corpus has none.
    pub fn templates_for(&self, category: &str) -> Vec<String> {
        let found: Vec<String> = self
            .entries
            .iter()
            .filter(|e| e.category.eq_ignore_ascii_case(category))
            .map(|e| e.template.clone())
            .collect();
        if found.is_empty() {
            vec![plain_prompt(category)]
        } else {
            found
        }
    }

    pub fn strip_identifier(&self, template: &str, category: &str) -> Result<String> {
        strip_identifier(template, category, &self.background_overrides)
    }
}

/// Prompt used when no scene captions are wanted.
pub fn plain_prompt(category: &str) -> String {
    format!("a photo of a {IDENTIFIER} {category}")
}

/// Prompt for generic category samples (negatives).
pub fn category_prompt(category: &str) -> String {
    format!("a photo of a {category}")
}

fn is_article(w: &str) -> bool {
    ARTICLES.contains(&w.to_lowercase().as_str())
}

fn is_preposition(w: &str) -> bool {
    PREPOSITIONS.contains(&w.to_lowercase().as_str())
}

fn capitalize_like(word: &str, like: &str) -> String {
    if like.chars().next().is_some_and(char::is_uppercase) {
        let mut cs = word.chars();
        cs.next()
            .map(|f| f.to_uppercase().chain(cs).collect())
            .unwrap_or_default()
    } else {
        word.to_lowercase()
    }
}

/// Turn an instance caption into a caption describing only the scene.
///
/// An override in `overrides` wins. Otherwise the identifier, the category
/// noun after it and the preposition that follows are removed, doubled
/// articles collapse onto the second one, and dangling articles or
/// prepositions at the end are dropped.
pub fn strip_identifier(
    template: &str,
    category: &str,
    overrides: &BTreeMap<String, String>,
) -> Result<String> {
    if template.matches(IDENTIFIER).count() != 1 {
        return Err(Error::MissingIdentifierToken(template.to_string()));
    }
    if let Some(bg) = overrides.get(template) {
        return Ok(bg.clone());
    }
    let words: Vec<&str> = template.split_whitespace().collect();
    let at = words
        .iter()
        .position(|w| *w == IDENTIFIER)
        .ok_or_else(|| Error::MissingIdentifierToken(template.to_string()))?;
    let mut next = at + 1;
    if words.get(next).is_some_and(|w| w.eq_ignore_ascii_case(category)) {
        next += 1;
    }
    if words.get(next).is_some_and(|w| is_preposition(w)) {
        next += 1;
    }
    let kept: Vec<&str> = words[..at].iter().chain(&words[next..]).copied().collect();

    let mut out: Vec<String> = Vec::with_capacity(kept.len());
    for w in kept {
        match out.last() {
            Some(prev) if is_article(prev) && is_article(w) => {
                let prev = out.pop().unwrap_or_default();
                out.push(capitalize_like(w, &prev));
            }
            _ => out.push(w.to_string()),
        }
    }
    while out.last().is_some_and(|w| is_article(w) || is_preposition(w)) {
        out.pop();
    }
    if out.is_empty() {
        return Err(Error::MalformedTemplate(template.to_string()));
    }
    Ok(out.join(" "))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn override_wins() {
        let c = CaptionCorpus::bundled();
        assert_eq!(
            c.strip_identifier("photo of a <new1> at the beach", "dog").unwrap(),
            "photo of a beach"
        );
    }

    #[test]
    fn rule_drops_noun_phrase_and_preposition() {
        let none = BTreeMap::new();
        assert_eq!(
            strip_identifier("A <new1> mug on a wooden desk", "mug", &none).unwrap(),
            "A wooden desk"
        );
        assert_eq!(
            strip_identifier("A <new1> shoe in the rain", "shoe", &none).unwrap(),
            "The rain"
        );
        assert_eq!(
            strip_identifier("photo of a <new1> at the beach", "dog", &none).unwrap(),
            "photo of the beach"
        );
    }

    #[test]
    fn bare_identifier_is_malformed() {
        assert!(matches!(
            strip_identifier("<new1>", "dog", &BTreeMap::new()),
            Err(Error::MalformedTemplate(_))
        ));
    }

    #[test]
    fn token_must_appear_once() {
        let none = BTreeMap::new();
        assert!(matches!(
            strip_identifier("a dog", "dog", &none),
            Err(Error::MissingIdentifierToken(_))
        ));
        assert!(matches!(
            strip_identifier("A <new1> dog at the <new1> dog park", "dog", &none),
            Err(Error::MissingIdentifierToken(_))
        ));
    }

    #[test]
    fn plain_prompt_background() {
        let none = BTreeMap::new();
        assert_eq!(strip_identifier(&plain_prompt("toy"), "toy", &none).unwrap(), "a photo");
    }

    #[test]
    fn unknown_category_falls_back() {
        let c = CaptionCorpus::bundled();
        assert_eq!(c.templates_for("kettle"), vec![plain_prompt("kettle")]);
        assert_eq!(c.templates_for("mug").len(), 3);
    }
}
