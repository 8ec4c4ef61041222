//! Abstract processing: markup cleanup, language detection, tokenization.
//!
//! Language identification is character-trigram rank-profile classification
//! (out-of-place distance) against profiles bundled with the crate. The
//! bundled profiles are built from the sample corpora in
//! `data/lang/corpora/`; `cargo test -p magpie-core regenerate_profiles --
//! --ignored` rebuilds the profile files after a corpus change, and a
//! non-ignored test keeps files and corpora in sync.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use unicode_segmentation::UnicodeSegmentation;

use crate::error::{Error, Result};

/// Languages with bundled trigram profiles, in the default detection set.
pub const BUNDLED_LANGUAGES: [&str; 7] = ["en", "fr", "de", "es", "it", "pt", "nl"];

/// Number of top trigrams kept per rank profile.
pub const PROFILE_SIZE: usize = 300;

/// Texts shorter than this (after trimming) are never classified.
pub const MIN_TEXT_LEN: usize = 20;

/// Default cutoff on the normalized out-of-place distance in [0, 1];
/// anything farther than this from every profile is reported as "und".
pub const DEFAULT_DISTANCE_CUTOFF: f64 = 0.9;

const PROFILE_FILES: [(&str, &str); 7] = [
    ("en", include_str!("../data/lang/profiles/en.profile")),
    ("fr", include_str!("../data/lang/profiles/fr.profile")),
    ("de", include_str!("../data/lang/profiles/de.profile")),
    ("es", include_str!("../data/lang/profiles/es.profile")),
    ("it", include_str!("../data/lang/profiles/it.profile")),
    ("pt", include_str!("../data/lang/profiles/pt.profile")),
    ("nl", include_str!("../data/lang/profiles/nl.profile")),
];

/// A processed abstract: cleaned text, language code, token statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AbstractRecord {
    pub paper_id: String,
    /// ISO 639-1 code, or "und" when no language could be determined.
    pub language: String,
    pub text: String,
    /// Token -> occurrence count over the cleaned text.
    pub tokens: BTreeMap<String, u64>,
    /// Distinct tokens, sorted.
    pub types: Vec<String>,
    /// Reserved; never populated by this pipeline.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lemmas: Option<Vec<String>>,
}

/// Strips HTML markup tolerantly: tags and comments removed, entities
/// decoded, whitespace collapsed to single spaces.
pub fn clean_markup(text: &str) -> String {
    let without_tags = strip_tags(text);
    let decoded = decode_entities(&without_tags);
    collapse_whitespace(&decoded)
}

fn strip_tags(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'<' {
            // HTML comment.
            if text[i..].starts_with("<!--") {
                match text[i + 4..].find("-->") {
                    Some(end) => {
                        i += 4 + end + 3;
                        continue;
                    }
                    None => break, // unterminated comment: drop the rest
                }
            }
            // A tag only if '<' is followed by a letter, '/' or '!'.
            let next = bytes.get(i + 1);
            let looks_like_tag =
                matches!(next, Some(c) if c.is_ascii_alphabetic() || *c == b'/' || *c == b'!');
            if looks_like_tag {
                match text[i..].find('>') {
                    Some(end) => {
                        i += end + 1;
                        continue;
                    }
                    None => break, // broken trailing tag: drop it
                }
            }
        }
        let ch = text[i..].chars().next().unwrap();
        out.push(ch);
        i += ch.len_utf8();
    }
    out
}

fn decode_entities(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(pos) = rest.find('&') {
        out.push_str(&rest[..pos]);
        rest = &rest[pos..];
        // An entity is '&' ... ';' with a short body.
        let Some(semi) = rest[1..].find(';').map(|k| k + 1) else {
            out.push('&');
            rest = &rest[1..];
            continue;
        };
        if semi > 12 {
            out.push('&');
            rest = &rest[1..];
            continue;
        }
        let body = &rest[1..semi];
        let decoded: Option<String> = if let Some(num) = body.strip_prefix('#') {
            let code = if let Some(hex) = num.strip_prefix(['x', 'X']) {
                u32::from_str_radix(hex, 16).ok()
            } else {
                num.parse::<u32>().ok()
            };
            code.and_then(char::from_u32).map(String::from)
        } else {
            match body {
                "amp" => Some("&".into()),
                "lt" => Some("<".into()),
                "gt" => Some(">".into()),
                "quot" => Some("\"".into()),
                "apos" => Some("'".into()),
                "nbsp" => Some(" ".into()),
                "ndash" => Some("\u{2013}".into()),
                "mdash" => Some("\u{2014}".into()),
                "hellip" => Some("\u{2026}".into()),
                _ => None,
            }
        };
        match decoded {
            Some(s) => {
                out.push_str(&s);
                rest = &rest[semi + 1..];
            }
            None => {
                out.push('&');
                rest = &rest[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

fn collapse_whitespace(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut in_space = true; // leading whitespace is dropped
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !in_space {
                out.push(' ');
                in_space = true;
            }
        } else {
            out.push(ch);
            in_space = false;
        }
    }
    while out.ends_with(' ') {
        out.pop();
    }
    out
}

/// Segments cleaned text into casefolded tokens with frequency counts.
///
/// Unicode word segmentation; punctuation-only segments are dropped,
/// numbers are kept, and single intra-word hyphens join their neighbors
/// ("COVID-19" stays one token). Returns the frequency map and the sorted
/// list of distinct tokens.
pub fn tokenize(text: &str) -> (BTreeMap<String, u64>, Vec<String>) {
    // Casefold first so the whole pipeline is idempotent under casefolding.
    let folded = text.to_lowercase();
    let segments: Vec<&str> = folded.split_word_bounds().collect();
    let wordy = |s: &str| s.chars().any(char::is_alphanumeric);

    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut i = 0;
    while i < segments.len() {
        if wordy(segments[i]) {
            let mut token = segments[i].to_string();
            // Join "word - word" chains produced by intra-word hyphens.
            while i + 2 < segments.len() && is_hyphen(segments[i + 1]) && wordy(segments[i + 2]) {
                token.push_str(segments[i + 1]);
                token.push_str(segments[i + 2]);
                i += 2;
            }
            *counts.entry(token).or_insert(0) += 1;
        }
        i += 1;
    }
    let types: Vec<String> = counts.keys().cloned().collect();
    (counts, types)
}

fn is_hyphen(segment: &str) -> bool {
    matches!(segment, "-" | "\u{2010}" | "\u{2011}")
}

/// Character-trigram rank profile of a text, most frequent first.
///
/// Trigrams are drawn from casefolded words padded with a single space on
/// each side; anything non-alphabetic separates words. Frequency ties are
/// broken lexicographically so profiles are deterministic.
pub fn build_profile(text: &str, size: usize) -> Vec<String> {
    let mut freq: HashMap<String, u64> = HashMap::new();
    let folded = text.to_lowercase();
    let mut word = String::new();
    let flush = |word: &mut String, freq: &mut HashMap<String, u64>| {
        if !word.is_empty() {
            let padded: Vec<char> = std::iter::once(' ')
                .chain(word.chars())
                .chain(std::iter::once(' '))
                .collect();
            for w in padded.windows(3) {
                *freq.entry(w.iter().collect()).or_insert(0) += 1;
            }
            word.clear();
        }
    };
    for ch in folded.chars() {
        if ch.is_alphabetic() {
            word.push(ch);
        } else {
            flush(&mut word, &mut freq);
        }
    }
    flush(&mut word, &mut freq);

    let mut ranked: Vec<(String, u64)> = freq.into_iter().collect();
    ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(size);
    ranked.into_iter().map(|(t, _)| t).collect()
}

/// Trigram rank-profile language classifier.
pub struct LanguageDetector {
    profiles: Vec<(String, HashMap<String, usize>)>,
    cutoff: f64,
}

impl LanguageDetector {
    /// Detector over the full bundled language set with the default cutoff.
    pub fn bundled() -> Self {
        Self::with_languages(&BUNDLED_LANGUAGES).expect("bundled profiles are valid")
    }

    /// Detector restricted to a subset of the bundled languages.
    pub fn with_languages(codes: &[&str]) -> Result<Self> {
        let mut profiles = Vec::new();
        for code in codes {
            let raw = PROFILE_FILES
                .iter()
                .find(|(c, _)| c == code)
                .map(|(_, data)| *data)
                .ok_or_else(|| {
                    Error::input(format!(
                        "no bundled language profile for {code:?} (available: {})",
                        BUNDLED_LANGUAGES.join(", ")
                    ))
                })?;
            profiles.push(((*code).to_string(), parse_profile(raw)));
        }
        Ok(LanguageDetector {
            profiles,
            cutoff: DEFAULT_DISTANCE_CUTOFF,
        })
    }

    pub fn with_cutoff(mut self, cutoff: f64) -> Self {
        self.cutoff = cutoff;
        self
    }

    /// ISO 639-1 code of the closest profile, or "und".
    ///
    /// "und" is returned for trimmed texts shorter than [`MIN_TEXT_LEN`]
    /// characters and for texts with no profile within the distance cutoff.
    pub fn detect(&self, text: &str) -> &str {
        match self.classify(text) {
            Some((code, _)) => code,
            None => "und",
        }
    }

    /// Like [`detect`](Self::detect) but exposing the normalized distance.
    pub fn classify(&self, text: &str) -> Option<(&str, f64)> {
        let trimmed = text.trim();
        if trimmed.chars().count() < MIN_TEXT_LEN {
            return None;
        }
        let sample = build_profile(trimmed, PROFILE_SIZE);
        if sample.is_empty() {
            return None;
        }
        let mut best: Option<(&str, f64)> = None;
        for (code, ranks) in &self.profiles {
            let d = out_of_place_distance(&sample, ranks);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((code.as_str(), d));
            }
        }
        best.filter(|(_, d)| *d <= self.cutoff)
    }

    pub fn languages(&self) -> impl Iterator<Item = &str> {
        self.profiles.iter().map(|(c, _)| c.as_str())
    }
}

/// Normalized out-of-place distance in [0, 1] between a sample profile and
/// a reference rank index. Trigrams missing from the reference cost the
/// maximum displacement ([`PROFILE_SIZE`]).
fn out_of_place_distance(sample: &[String], reference: &HashMap<String, usize>) -> f64 {
    let mut total = 0usize;
    for (pos, trigram) in sample.iter().enumerate() {
        total += match reference.get(trigram) {
            Some(&rank) => rank.abs_diff(pos).min(PROFILE_SIZE),
            None => PROFILE_SIZE,
        };
    }
    total as f64 / (sample.len() * PROFILE_SIZE) as f64
}

/// Profile files encode one trigram per line with spaces written as '_'.
fn parse_profile(data: &str) -> HashMap<String, usize> {
    data.lines()
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(rank, line)| (line.replace('_', " "), rank))
        .collect()
}

#[cfg(test)]
fn encode_profile(profile: &[String]) -> String {
    let mut out = String::new();
    for trigram in profile {
        out.push_str(&trigram.replace(' ', "_"));
        out.push('\n');
    }
    out
}

/// Full processing of one raw abstract.
pub fn process_abstract(
    paper_id: &str,
    raw_text: &str,
    detector: &LanguageDetector,
) -> AbstractRecord {
    let text = clean_markup(raw_text);
    let language = detector.detect(&text).to_string();
    let (tokens, types) = tokenize(&text);
    AbstractRecord {
        paper_id: paper_id.to_string(),
        language,
        text,
        tokens,
        types,
        lemmas: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const CORPORA: [(&str, &str); 7] = [
        ("en", include_str!("../data/lang/corpora/en.txt")),
        ("fr", include_str!("../data/lang/corpora/fr.txt")),
        ("de", include_str!("../data/lang/corpora/de.txt")),
        ("es", include_str!("../data/lang/corpora/es.txt")),
        ("it", include_str!("../data/lang/corpora/it.txt")),
        ("pt", include_str!("../data/lang/corpora/pt.txt")),
        ("nl", include_str!("../data/lang/corpora/nl.txt")),
    ];

    /// Rewrites the bundled profile files from the corpora. Run explicitly
    /// after editing a corpus: `cargo test -p magpie-core regenerate_profiles -- --ignored`.
    #[test]
    #[ignore]
    fn regenerate_profiles() {
        let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("data/lang/profiles");
        for (code, corpus) in CORPORA {
            let profile = build_profile(corpus, PROFILE_SIZE);
            assert!(profile.len() >= 100, "{code} corpus too small to profile");
            std::fs::write(
                dir.join(format!("{code}.profile")),
                encode_profile(&profile),
            )
            .unwrap();
        }
    }

    #[test]
    fn profiles_match_corpora() {
        for (code, corpus) in CORPORA {
            let expected = build_profile(corpus, PROFILE_SIZE);
            let bundled = PROFILE_FILES
                .iter()
                .find(|(c, _)| *c == code)
                .map(|(_, data)| data)
                .unwrap();
            let bundled: Vec<String> = bundled
                .lines()
                .filter(|l| !l.is_empty())
                .map(|l| l.replace('_', " "))
                .collect();
            assert_eq!(
                bundled, expected,
                "stale profile for {code}; regenerate with the ignored regenerate_profiles test"
            );
        }
    }

    #[test]
    fn entity_decode() {
        assert_eq!(clean_markup("a &amp; b"), "a & b");
        assert_eq!(clean_markup("x &#233;t&#xe9;"), "x été");
        assert_eq!(clean_markup("5 &lt; 7"), "5 < 7");
    }

    #[test]
    fn tag_strip() {
        assert_eq!(clean_markup("<p>hi</p>"), "hi");
        assert_eq!(clean_markup("<b>x<i>y"), "xy");
        assert_eq!(clean_markup("a <br/> b"), "a b");
        assert_eq!(clean_markup("<!-- note -->kept"), "kept");
        // A lone '<' that cannot start a tag is literal text.
        assert_eq!(clean_markup("3 < 4"), "3 < 4");
    }

    #[test]
    fn whitespace_normalized() {
        assert_eq!(clean_markup("  a\t\nb  "), "a b");
    }

    #[test]
    fn tokenize_counts_and_types() {
        let (tokens, types) = tokenize("Knowledge graphs, knowledge graphs!");
        assert_eq!(tokens.get("knowledge"), Some(&2));
        assert_eq!(tokens.get("graphs"), Some(&2));
        assert_eq!(tokens.len(), 2);
        assert_eq!(types, vec!["graphs", "knowledge"]);
    }

    #[test]
    fn tokenize_empty() {
        let (tokens, types) = tokenize("");
        assert!(tokens.is_empty());
        assert!(types.is_empty());
    }

    #[test]
    fn tokenize_keeps_intra_word_hyphen() {
        let (tokens, _) = tokenize("COVID-19 study");
        assert_eq!(tokens.get("covid-19"), Some(&1));
        assert_eq!(tokens.get("study"), Some(&1));
        assert_eq!(tokens.len(), 2);
    }

    #[test]
    fn tokenize_drops_punctuation_keeps_numbers() {
        let (tokens, _) = tokenize("... 42 !!");
        assert_eq!(tokens.get("42"), Some(&1));
        assert_eq!(tokens.len(), 1);
    }

    #[test]
    fn detect_english_and_german() {
        let det = LanguageDetector::bundled();
        assert_eq!(
            det.detect("the quick brown fox jumps over the lazy dog and runs away"),
            "en"
        );
        assert_eq!(
            det.detect("der schnelle braune Fuchs springt über den faulen Hund davon"),
            "de"
        );
    }

    #[test]
    fn short_or_empty_is_und() {
        let det = LanguageDetector::bundled();
        assert_eq!(det.detect(""), "und");
        assert_eq!(det.detect("hi there"), "und");
        assert_eq!(det.detect("             "), "und");
    }

    #[test]
    fn gibberish_is_und() {
        let det = LanguageDetector::bundled();
        assert_eq!(
            det.detect("zzzzq qqzzx xqzqz zzqqx qxqxq zxzxz qzqzq"),
            "und"
        );
    }

    #[test]
    fn detection_ignores_surrounding_whitespace() {
        let det = LanguageDetector::bundled();
        let text = "science is built from careful observations of the natural world";
        assert_eq!(det.detect(text), det.detect(&format!("   {text}\n\t")));
    }

    #[test]
    fn restricted_language_set() {
        let det = LanguageDetector::with_languages(&["en", "fr"]).unwrap();
        assert_eq!(det.languages().count(), 2);
        assert!(LanguageDetector::with_languages(&["xx"]).is_err());
    }

    proptest! {
        // Any byte soup must come out as a valid record without panicking.
        #[test]
        fn clean_and_tokenize_never_panic(input in "\\PC{0,200}") {
            let cleaned = clean_markup(&input);
            let (tokens, types) = tokenize(&cleaned);
            let total_types = types.len();
            prop_assert_eq!(tokens.len(), total_types);
        }

        // Casefolding the input first must not change the token stream.
        #[test]
        fn casefold_idempotent(input in "[a-zA-ZÀ-ÿ0-9 ,.!-]{0,120}") {
            let (a, _) = tokenize(&input);
            let (b, _) = tokenize(&input.to_lowercase());
            prop_assert_eq!(a, b);
        }

        // Token frequencies always sum to the number of emitted segments.
        #[test]
        fn types_are_token_keys(input in "\\PC{0,200}") {
            let (tokens, types) = tokenize(&input);
            let keys: Vec<String> = tokens.keys().cloned().collect();
            prop_assert_eq!(keys, types);
        }
    }
}
