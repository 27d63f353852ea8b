//! Extraction of `<new>`-tagged counterfactuals and rationale word lists
//! from raw completions.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const OPEN_TAG: &str = "<new>";
const CLOSE_TAG: &str = "</new>";

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractionFailure {
    #[error("no <new> span in completion")]
    TagMissing,
    #[error("<new> span is empty")]
    EmptyContent,
    #[error("no words left after cleaning the word list")]
    EmptyWordList,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractionMethod {
    Tagged,
    WholeResponseFallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedCounterfactual {
    pub text: String,
    pub extraction_method: ExtractionMethod,
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RationaleWords {
    words: Vec<String>,
}

impl RationaleWords {
    pub fn words(&self) -> &[String] {
        &self.words
    }
}

/// First `<new>` span wins. An unclosed `<new>` runs to the end of the
/// completion. Without any tag, `fallback` decides between the whole
/// trimmed response and a failure.
pub fn extract_tagged(
    completion: &str,
    fallback: bool,
) -> Result<ParsedCounterfactual, ExtractionFailure> {
    let (text, method) = match completion.find(OPEN_TAG) {
        Some(start) => {
            let body = &completion[start + OPEN_TAG.len()..];
            let end = body.find(CLOSE_TAG).unwrap_or(body.len());
            (body[..end].trim(), ExtractionMethod::Tagged)
        }
        None if fallback => (completion.trim(), ExtractionMethod::WholeResponseFallback),
        None => return Err(ExtractionFailure::TagMissing),
    };
    if text.is_empty() {
        return Err(match method {
            ExtractionMethod::Tagged => ExtractionFailure::EmptyContent,
            ExtractionMethod::WholeResponseFallback => ExtractionFailure::TagMissing,
        });
    }
    Ok(ParsedCounterfactual {
        text: text.to_string(),
        extraction_method: method,
        raw: completion.to_string(),
    })
}

fn is_trimmable(c: char) -> bool {
    c.is_whitespace() || matches!(c, '.' | '"' | '\'' | '`' | '“' | '”' | '‘' | '’')
}

/// Split a comma separated word list. A leading preamble such as
/// "The words are:" is dropped when it contains no comma.
pub fn parse_word_list(completion: &str) -> Result<RationaleWords, ExtractionFailure> {
    let mut body = completion.trim();
    if let Some(colon) = body.find(':') {
        if !body[..colon].contains(',') {
            body = &body[colon + 1..];
        }
    }
    let mut seen = HashSet::new();
    let words: Vec<String> = body
        .split([',', '\n'])
        .map(|w| w.trim_matches(is_trimmable))
        .filter(|w| !w.is_empty())
        .filter(|w| seen.insert(w.to_lowercase()))
        .map(str::to_string)
        .collect();
    if words.is_empty() {
        return Err(ExtractionFailure::EmptyWordList);
    }
    Ok(RationaleWords { words })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tagged_extraction() {
        let p = extract_tagged("Sure! <new>This movie is boring.</new>", false).unwrap();
        assert_eq!(p.text, "This movie is boring.");
        assert_eq!(p.extraction_method, ExtractionMethod::Tagged);
        assert_eq!(
            extract_tagged("<new>a</new> ... <new>b</new>", false)
                .unwrap()
                .text,
            "a"
        );
        assert_eq!(
            extract_tagged("I cannot help with that.", false),
            Err(ExtractionFailure::TagMissing)
        );
        assert_eq!(
            extract_tagged("<new>  </new>", true),
            Err(ExtractionFailure::EmptyContent)
        );
        assert_eq!(
            extract_tagged("   ", true),
            Err(ExtractionFailure::TagMissing)
        );
    }

    #[test]
    fn unclosed_tag_runs_to_end() {
        let p = extract_tagged("Here: <new>The plot was thin and", false).unwrap();
        assert_eq!(p.text, "The plot was thin and");
    }

    #[test]
    fn fallback_returns_whole_response() {
        let p = extract_tagged("  A harder sentence. \n", true).unwrap();
        assert_eq!(p.text, "A harder sentence.");
        assert_eq!(p.extraction_method, ExtractionMethod::WholeResponseFallback);
        assert_eq!(p.raw, "  A harder sentence. \n");
    }

    #[test]
    fn word_lists() {
        assert_eq!(
            parse_word_list("great, brilliant, loved").unwrap().words(),
            ["great", "brilliant", "loved"]
        );
        assert_eq!(
            parse_word_list("The words are: Boring, dull, boring.")
                .unwrap()
                .words(),
            ["Boring", "dull"]
        );
        assert_eq!(parse_word_list(""), Err(ExtractionFailure::EmptyWordList));
        assert_eq!(
            parse_word_list(" , . ,"),
            Err(ExtractionFailure::EmptyWordList)
        );
        assert_eq!(
            parse_word_list("\"terrible\", 'awful'").unwrap().words(),
            ["terrible", "awful"]
        );
    }

    proptest! {
        #[test]
        fn rewrapped_extraction_is_identity(t in "[^<>\\s]([^<>]{0,30}[^<>\\s])?") {
            let wrapped = format!("{OPEN_TAG}{t}{CLOSE_TAG}");
            prop_assert_eq!(extract_tagged(&wrapped, false).unwrap().text, t);
        }

        #[test]
        fn word_list_is_clean(
            words in prop::collection::vec("[A-Za-z]{1,8}", 1..8),
            noise in prop::collection::vec("[ \\t.\"']{0,3}", 16),
        ) {
            let joined = words
                .iter()
                .enumerate()
                .map(|(i, w)| format!("{}{}{}", noise[i % 16], w, noise[(i + 7) % 16]))
                .collect::<Vec<_>>()
                .join(",");
            let parsed = parse_word_list(&joined).unwrap();
            let mut seen = HashSet::new();
            for w in parsed.words() {
                prop_assert!(!w.contains(','));
                prop_assert_eq!(w.trim(), w.as_str());
                prop_assert!(seen.insert(w.to_lowercase()));
            }
        }

        #[test]
        fn parsers_never_panic(s in "\\PC*", fallback: bool) {
            let _ = extract_tagged(&s, fallback);
            let _ = parse_word_list(&s);
        }
    }
}
