//! Deterministic offline collaborators: a rule-based generator and keyword
//! oracles. They make campaigns runnable end to end without any server.
//!
//! The generator swaps polar words ("great" <-> "awful", ...) in the text it
//! is asked to rewrite. Texts without a swappable word get a neutral edit,
//! so the keyword classifier keeps its label on them.

use std::sync::Arc;

use crate::campaign::{CampaignError, RunConfig, Services};
use crate::llm_backend::{ChatMessage, MockChat, Role};
use crate::oracle_clients::stub::{HashingEmbedder, StubClassifier};

/// Word pairs the generator swaps, both directions.
pub const SWAPS: [(&str, &str); 3] = [
    ("great", "awful"),
    ("loved", "hated"),
    ("wonderful", "terrible"),
];

/// Keywords for the classifier, checked in order; the first hit decides.
pub const POLARITY_RULES: [(&str, &str); 10] = [
    ("great", "positive"),
    ("loved", "positive"),
    ("wonderful", "positive"),
    ("nice", "positive"),
    ("charming", "positive"),
    ("awful", "negative"),
    ("hated", "negative"),
    ("terrible", "negative"),
    ("dull", "negative"),
    ("tedious", "negative"),
];

/// A text containing this marker is answered without `<new>` tags.
pub const NO_TAG_MARKER: &str = "[notag]";

pub const EMBED_DIM: usize = 64;

/// Swap every polar word; `None` when the text has none.
pub fn swap_polar_words(text: &str) -> Option<String> {
    let mut changed = false;
    let mut out = String::with_capacity(text.len());
    let mut word = String::new();
    let mut flush = |word: &mut String, out: &mut String| {
        let lower = word.to_lowercase();
        let swapped = SWAPS.iter().find_map(|(a, b)| {
            if lower == *a {
                Some(*b)
            } else if lower == *b {
                Some(*a)
            } else {
                None
            }
        });
        match swapped {
            Some(s) => {
                changed = true;
                out.push_str(s);
            }
            None => out.push_str(word),
        }
        word.clear();
    };
    for c in text.chars() {
        if c.is_alphanumeric() {
            word.push(c);
        } else {
            flush(&mut word, &mut out);
            out.push(c);
        }
    }
    flush(&mut word, &mut out);
    changed.then_some(out)
}

/// The rewrite the scripted generator produces for `text`.
pub fn rewrite(text: &str) -> String {
    swap_polar_words(text).unwrap_or_else(|| format!("{text} Truly."))
}

fn text_slot(prompt: &str) -> &str {
    let at = prompt.rfind("Text: ").map_or(0, |i| i + "Text: ".len());
    &prompt[at..]
}

fn polar_words(text: &str) -> Vec<&'static str> {
    let lower = text.to_lowercase();
    POLARITY_RULES
        .iter()
        .map(|(w, _)| *w)
        .chain(SWAPS.iter().flat_map(|(a, b)| [*a, *b]))
        .filter(|w| lower.contains(w))
        .fold(Vec::new(), |mut acc, w| {
            if !acc.contains(&w) {
                acc.push(w);
            }
            acc
        })
}

fn tagged(text: &str, source: &str) -> String {
    if source.contains(NO_TAG_MARKER) {
        format!("Sure! {text}")
    } else {
        format!("Here is the edited text.\n<new>{text}</new>")
    }
}

/// Answer a conversation the way the scripted generator does.
pub fn respond(messages: &[ChatMessage]) -> Option<String> {
    let first = messages.iter().find(|m| m.role == Role::User)?;
    let last = messages.last()?;
    let prompt = &last.content;
    if messages.len() >= 3 {
        // Guided follow-up: rewrite the text from the first turn.
        let source = text_slot(&first.content);
        return Some(tagged(&rewrite(source), source));
    }
    if prompt.contains("List ONLY the words") {
        let words = polar_words(text_slot(prompt));
        return Some(if words.is_empty() {
            ", ,".to_string()
        } else {
            words.join(", ")
        });
    }
    if prompt.contains("robustness checker") {
        return Some(rewrite(text_slot(prompt)));
    }
    let source = text_slot(prompt);
    let source = source.strip_suffix('.').unwrap_or(source);
    Some(tagged(&rewrite(source), source))
}

pub fn generator() -> MockChat {
    MockChat::new().with_responder(respond)
}

pub fn polarity_classifier() -> StubClassifier {
    StubClassifier::keywords(
        POLARITY_RULES
            .iter()
            .map(|(k, l)| (k.to_string(), l.to_string()))
            .collect(),
        "negative",
    )
}

/// Services over the scripted generator, the keyword classifier and the
/// hashing embedder, with caches in the config's cache directory.
pub fn services(config: &RunConfig) -> Result<Services, CampaignError> {
    services_with(config, Arc::new(generator()))
}

pub fn services_with(config: &RunConfig, chat: Arc<MockChat>) -> Result<Services, CampaignError> {
    Services::with_transports(
        config,
        chat,
        Arc::new(polarity_classifier()),
        Arc::new(HashingEmbedder::new(EMBED_DIM)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn swaps_whole_words_only() {
        assert_eq!(
            swap_polar_words("A great cast, greatly awful plot.").as_deref(),
            Some("A awful cast, greatly great plot.")
        );
        assert_eq!(swap_polar_words("A nice film."), None);
        assert_eq!(rewrite("A nice film."), "A nice film. Truly.");
    }

    #[test]
    fn naive_prompt_gets_tagged_rewrite() {
        let prompt = "... Enclose the generated text within <new> tags.\n---\nText: It was great..";
        let out = respond(&[ChatMessage::user(prompt)]).unwrap();
        assert_eq!(out, "Here is the edited text.\n<new>It was awful.</new>");
    }

    #[test]
    fn step1_without_polar_words_is_unparseable() {
        let prompt = "List ONLY the words as a comma separated list.\n---\nText: A film.";
        assert_eq!(respond(&[ChatMessage::user(prompt)]).unwrap(), ", ,");
    }
}
