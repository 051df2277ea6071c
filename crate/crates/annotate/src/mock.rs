//! Deterministic offline backend: dictionary NER, dictionary alternatives and
//! frame-based rewrites. Responses depend only on the request.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::json;

use trajret_core::seed::fnv1a64;
use trajret_core::trajectory::content_hash;

use crate::prompts::{parse_alternatives_prompt, parse_ner_prompt, parse_rewrite_prompt, Stage};
use crate::transport::{ChatRequest, TransportError};
use crate::NerEntity;

const FRAMES: [&str; 5] = ["Please {x}", "I'd like to {x}", "Can you {x}?", "Help me {x}", "Go ahead and {x}"];

const DEFAULT_LEXICON: &[(&str, &str)] = &[
    ("t-shirt", "product"),
    ("laser printer", "product"),
    ("printer", "product"),
    ("backpack", "product"),
    ("coffee maker", "product"),
    ("desk lamp", "product"),
    ("headphones", "product"),
    ("winter jacket", "product"),
    ("sofa", "product"),
    ("Amazon", "platform"),
    ("eBay", "platform"),
    ("Walmart", "platform"),
    ("Etsy", "platform"),
    ("Best Buy", "platform"),
    ("Target", "platform"),
    ("Trello", "platform"),
    ("children", "audience"),
    ("adults", "audience"),
    ("teenagers", "audience"),
    ("seniors", "audience"),
    ("toddlers", "audience"),
    ("students", "audience"),
    ("New York", "city"),
    ("London", "city"),
    ("Paris", "city"),
    ("Tokyo", "city"),
    ("Berlin", "city"),
    ("Sydney", "city"),
];

/// Surface forms and their labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    pub entries: Vec<LexiconEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexiconEntry {
    pub surface: String,
    pub label: String,
}

impl Default for Lexicon {
    fn default() -> Self {
        Self::new(DEFAULT_LEXICON.iter().map(|(s, l)| (s.to_string(), l.to_string())))
    }
}

fn at_boundary(chars: &[char], k: usize) -> bool {
    k == 0 || k >= chars.len() || !chars[k - 1].is_alphanumeric() || !chars[k].is_alphanumeric()
}

impl Lexicon {
    pub fn new(entries: impl IntoIterator<Item = (String, String)>) -> Self {
        let mut entries: Vec<LexiconEntry> = entries
            .into_iter()
            .map(|(surface, label)| LexiconEntry { surface, label })
            .collect();
        // Longest first so matching is greedy.
        entries.sort_by(|a, b| {
            b.surface
                .chars()
                .count()
                .cmp(&a.surface.chars().count())
                .then_with(|| a.surface.cmp(&b.surface))
        });
        Self { entries }
    }

    /// Left-to-right, longest-match, case-insensitive entity spotting on word
    /// boundaries. Spans are character offsets.
    pub fn find_entities(&self, text: &str) -> Vec<NerEntity> {
        let chars: Vec<char> = text.chars().collect();
        let lower: Vec<char> = text.chars().flat_map(char::to_lowercase).collect();
        if lower.len() != chars.len() {
            // Lower-casing changed the length; fall back to exact matching.
            return self.find_in(&chars, &chars, false);
        }
        self.find_in(&chars, &lower, true)
    }

    fn find_in(&self, chars: &[char], haystack: &[char], fold: bool) -> Vec<NerEntity> {
        let patterns: Vec<Vec<char>> = self
            .entries
            .iter()
            .map(|e| {
                if fold {
                    e.surface.chars().flat_map(char::to_lowercase).collect()
                } else {
                    e.surface.chars().collect()
                }
            })
            .collect();
        let mut out = Vec::new();
        let mut k = 0;
        while k < chars.len() {
            let hit = at_boundary(chars, k)
                .then(|| {
                    patterns.iter().position(|p| {
                        !p.is_empty()
                            && haystack.len() >= k + p.len()
                            && haystack[k..k + p.len()] == p[..]
                            && at_boundary(chars, k + p.len())
                    })
                })
                .flatten();
            match hit {
                Some(e) => {
                    let end = k + patterns[e].len();
                    out.push(NerEntity {
                        surface: chars[k..end].iter().collect(),
                        label: self.entries[e].label.clone(),
                        span: (k, end),
                    });
                    k = end;
                }
                None => k += 1,
            }
        }
        out
    }

    /// Five alternatives sharing `label`, excluding `surface`, rotated by `salt`.
    pub fn alternatives(&self, surface: &str, label: &str, salt: u64) -> Vec<String> {
        let mut pool: Vec<&str> = self
            .entries
            .iter()
            .filter(|e| e.label == label && !e.surface.eq_ignore_ascii_case(surface))
            .map(|e| e.surface.as_str())
            .collect();
        pool.sort_unstable();
        let mut out = Vec::with_capacity(5);
        if !pool.is_empty() {
            let start = (salt % pool.len() as u64) as usize;
            out.extend(pool.iter().cycle().skip(start).take(pool.len().min(5)).map(|s| s.to_string()));
        }
        let mut k = 1;
        while out.len() < 5 {
            out.push(format!("another {label} {k}"));
            k += 1;
        }
        out
    }
}

/// Lower-cases the first character and drops a trailing full stop.
fn as_clause(q: &str) -> String {
    let q = q.trim().trim_end_matches('.');
    let mut chars = q.chars();
    match chars.next() {
        Some(c) => c.to_lowercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Answers requests without any I/O.
#[derive(Debug, Clone, Default)]
pub struct MockResponder {
    pub lexicon: Lexicon,
}

impl MockResponder {
    pub fn new(lexicon: Lexicon) -> Self {
        Self { lexicon }
    }

    pub fn respond(&self, request: &ChatRequest) -> Result<String, TransportError> {
        let unparsable = || TransportError::fatal(format!("mock backend cannot parse the {} prompt", request.stage));
        match request.stage {
            Stage::Describe => {
                let digest = match &request.image {
                    Some(png) => content_hash(png),
                    None => format!("{:016x}", fnv1a64(request.prompt.as_bytes())),
                };
                Ok(format!("Mock description of {}.", &digest[..12]))
            }
            Stage::Ner => {
                let q = parse_ner_prompt(&request.prompt).ok_or_else(unparsable)?;
                let entities: Vec<_> = self
                    .lexicon
                    .find_entities(q)
                    .into_iter()
                    .map(|e| json!({"surface": e.surface, "label": e.label}))
                    .collect();
                Ok(serde_json::Value::Array(entities).to_string())
            }
            Stage::Alternatives => {
                let (q, ners) = parse_alternatives_prompt(&request.prompt).ok_or_else(unparsable)?;
                let ners: Vec<LexiconEntry> = serde_json::from_str(ners).map_err(|_| unparsable())?;
                let salt = fnv1a64(q.as_bytes());
                let map: BTreeMap<&str, Vec<String>> = ners
                    .iter()
                    .map(|e| (e.surface.as_str(), self.lexicon.alternatives(&e.surface, &e.label, salt)))
                    .collect();
                Ok(serde_json::to_string(&map).expect("string map serializes"))
            }
            Stage::Rewrite => {
                let queries = parse_rewrite_prompt(&request.prompt).ok_or_else(unparsable)?;
                let out: Vec<String> = queries
                    .iter()
                    .zip(FRAMES.iter().cycle())
                    .map(|(q, f)| f.replacen("{x}", &as_clause(q), 1))
                    .collect();
                Ok(serde_json::to_string(&out).expect("strings serialize"))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn greedy_longest_match_on_word_boundaries() {
        let lex = Lexicon::default();
        let found = lex.find_entities("Order a laser printer on eBay, not a printer from Targets");
        let surfaces: Vec<_> = found.iter().map(|e| e.surface.as_str()).collect();
        assert_eq!(surfaces, ["laser printer", "eBay", "printer"]);
        assert_eq!(found[0].span, (8, 21));
        assert_eq!(found[0].label, "product");
    }

    #[test]
    fn alternatives_exclude_original_and_pad() {
        let lex = Lexicon::default();
        let alts = lex.alternatives("Amazon", "platform", 3);
        assert_eq!(alts.len(), 5);
        assert!(!alts.iter().any(|a| a == "Amazon"));
        let alts = lex.alternatives("x", "colour", 0);
        assert_eq!(alts[0], "another colour 1");
    }
}
