//! Parsing of pre-fetched encyclopedia infobox wikitext into key-value rows
//! and standardized fields.
//!
//! The parser is deliberately tolerant: it extracts `| key = value` rows from
//! a single `{{Infobox ...}}` template by depth counting, strips markup
//! best-effort, and never fails on arbitrary input. Raw values are retained
//! alongside the cleaned ones for audit.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geocode::{normalize_foundation_date, CountryTable, Gazetteer, GeoPartial};
use crate::textproc;

/// Keyword sets used to gather inconsistently-labelled fields, in priority
/// order: the earlier keyword wins regardless of its position in the infobox.
pub const CITY_KEYWORDS: [&str; 3] = ["city", "location", "headquarter"];
pub const FOUNDATION_KEYWORDS: [&str; 3] = ["foundation", "foundation_date", "established"];
pub const HOMEPAGE_KEYWORDS: [&str; 3] = ["homepage", "url", "website"];
pub const ACRONYM_KEYWORDS: [&str; 2] = ["acronym", "abbreviation"];

/// One `| key = value` row. Keys are casefolded and trimmed; the raw value
/// keeps its markup, the clean value has markup stripped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InfoboxPair {
    pub key: String,
    pub raw: String,
    pub clean: String,
}

/// Parsed infobox: the template qualifier ("university" for
/// `{{Infobox university ...}}`) and the ordered key-value rows.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InfoboxRaw {
    pub kind: Option<String>,
    pub pairs: Vec<InfoboxPair>,
}

/// Standardized fields gathered from an infobox.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InfoboxFields {
    pub city: Option<String>,
    pub state: Option<String>,
    pub country: Option<String>,
    pub acronym: Option<String>,
    pub foundation_date: Option<String>,
    pub homepage: Option<String>,
}

/// Local store mapping affiliation id to fetched infobox wikitext.
///
/// The on-disk format is a 2-column TSV: `affiliation_id \t wikitext` with
/// newlines escaped as `\n` (backslash escapes: `\n`, `\t`, `\\`).
#[derive(Debug, Default)]
pub struct InfoboxStore {
    texts: HashMap<String, String>,
}

impl InfoboxStore {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn load_tsv(path: &Path) -> Result<Self> {
        let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let text = String::from_utf8_lossy(&data);
        let mut texts = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (id, wikitext) = line.split_once('\t').ok_or_else(|| {
                Error::input(format!(
                    "{}:{}: infobox store lines need 2 tab-separated columns",
                    path.display(),
                    lineno + 1
                ))
            })?;
            texts.insert(id.to_string(), unescape(wikitext));
        }
        Ok(InfoboxStore { texts })
    }

    pub fn insert(&mut self, affiliation_id: &str, wikitext: &str) {
        self.texts
            .insert(affiliation_id.to_string(), wikitext.to_string());
    }

    pub fn get(&self, affiliation_id: &str) -> Option<&str> {
        self.texts.get(affiliation_id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }
}

fn unescape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some('\\') => out.push('\\'),
            Some(other) => {
                out.push('\\');
                out.push(other);
            }
            None => out.push('\\'),
        }
    }
    out
}

/// Extracts the key-value rows of the first `{{Infobox ...}}` template.
///
/// Returns empty pairs when no infobox is present. Nested templates and
/// links inside values are handled by depth counting; positional parameters
/// of the infobox itself are ignored.
pub fn parse_infobox(text: &str) -> InfoboxRaw {
    let lower = text.to_lowercase();
    let Some(open) = find_infobox_start(&lower) else {
        return InfoboxRaw::default();
    };
    let body_start = open + 2;

    // Split the template body on top-level '|' up to the matching "}}".
    let mut segments: Vec<&str> = Vec::new();
    let mut template_depth = 1i32;
    let mut link_depth = 0i32;
    let mut seg_start = body_start;
    let bytes = text.as_bytes();
    let mut i = body_start;
    let mut end = text.len();
    while i < bytes.len() {
        match bytes[i] {
            b'{' if bytes.get(i + 1) == Some(&b'{') => {
                template_depth += 1;
                i += 2;
                continue;
            }
            b'}' if bytes.get(i + 1) == Some(&b'}') => {
                template_depth -= 1;
                if template_depth == 0 {
                    end = i;
                    break;
                }
                i += 2;
                continue;
            }
            b'[' if bytes.get(i + 1) == Some(&b'[') => {
                link_depth += 1;
                i += 2;
                continue;
            }
            b']' if bytes.get(i + 1) == Some(&b']') => {
                link_depth = (link_depth - 1).max(0);
                i += 2;
                continue;
            }
            b'|' if template_depth == 1 && link_depth == 0 => {
                segments.push(&text[seg_start..i]);
                seg_start = i + 1;
            }
            _ => {}
        }
        i += 1;
    }
    segments.push(&text[seg_start..end.max(seg_start)]);

    let kind = segments
        .first()
        .map(|name| {
            let name = textproc::clean_markup(name);
            name.split_whitespace()
                .skip(1) // the literal "Infobox"
                .collect::<Vec<_>>()
                .join(" ")
                .to_lowercase()
        })
        .filter(|k| !k.is_empty());

    let mut pairs = Vec::new();
    for segment in segments.iter().skip(1) {
        let Some(eq) = top_level_eq(segment) else {
            continue; // positional parameter
        };
        let key = segment[..eq].trim().to_lowercase();
        if key.is_empty() {
            continue;
        }
        let raw = segment[eq + 1..].trim().to_string();
        let clean = strip_wiki_markup(&raw);
        pairs.push(InfoboxPair { key, raw, clean });
    }
    InfoboxRaw { kind, pairs }
}

fn find_infobox_start(lower: &str) -> Option<usize> {
    let mut from = 0;
    while let Some(pos) = lower[from..].find("{{") {
        let abs = from + pos;
        let after = lower[abs + 2..].trim_start();
        if after.starts_with("infobox") {
            return Some(abs);
        }
        from = abs + 2;
    }
    None
}

/// Position of the first '=' lying outside nested templates/links, if any.
fn top_level_eq(segment: &str) -> Option<usize> {
    let bytes = segment.as_bytes();
    let mut depth = 0i32;
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'{' if bytes.get(i + 1) == Some(&b'{') => {
                depth += 1;
                i += 2;
                continue;
            }
            b'}' if bytes.get(i + 1) == Some(&b'}') => {
                depth -= 1;
                i += 2;
                continue;
            }
            b'[' if bytes.get(i + 1) == Some(&b'[') => {
                depth += 1;
                i += 2;
                continue;
            }
            b']' if bytes.get(i + 1) == Some(&b']') => {
                depth -= 1;
                i += 2;
                continue;
            }
            b'=' if depth == 0 => return Some(i),
            _ => {}
        }
        i += 1;
    }
    None
}

/// Best-effort markup stripping for one infobox value: references removed,
/// nested templates collapsed to their first positional argument, links
/// replaced by their labels, residual HTML stripped.
pub fn strip_wiki_markup(value: &str) -> String {
    let no_refs = remove_refs(value);
    let no_templates = collapse_templates(&no_refs);
    let no_links = collapse_links(&no_templates);
    let no_quotes = no_links.replace("'''", "").replace("''", "");
    textproc::clean_markup(&no_quotes)
}

fn remove_refs(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    loop {
        let lower = rest.to_lowercase();
        let Some(start) = lower.find("<ref") else {
            out.push_str(rest);
            return out;
        };
        out.push_str(&rest[..start]);
        let tail = &rest[start..];
        let tail_lower = &lower[start..];
        // Self-closing <ref ... /> or paired <ref ...>...</ref>.
        let self_close = tail_lower.find("/>");
        let open_close = tail_lower.find('>');
        match (self_close, open_close) {
            (Some(sc), Some(oc)) if sc + 1 == oc => rest = &tail[sc + 2..],
            (_, Some(_)) => match tail_lower.find("</ref>") {
                Some(end) => rest = &tail[end + 6..],
                None => return out, // unterminated reference: drop the rest
            },
            _ => return out,
        }
    }
}

fn collapse_templates(text: &str) -> String {
    let mut current = text.to_string();
    // Each pass substitutes the innermost-first match and strictly shrinks
    // the string, so this terminates.
    loop {
        let Some(open) = current.find("{{") else {
            return current;
        };
        let bytes = current.as_bytes();
        let mut depth = 1i32;
        let mut i = open + 2;
        let mut close = None;
        while i < bytes.len() {
            if bytes[i] == b'{' && bytes.get(i + 1) == Some(&b'{') {
                depth += 1;
                i += 2;
            } else if bytes[i] == b'}' && bytes.get(i + 1) == Some(&b'}') {
                depth -= 1;
                if depth == 0 {
                    close = Some(i);
                    break;
                }
                i += 2;
            } else {
                i += 1;
            }
        }
        let Some(close) = close else {
            // Unclosed template: drop it and everything after.
            current.truncate(open);
            return current;
        };
        let inner = current[open + 2..close].to_string();
        let replacement = first_positional_argument(&inner)
            .map(collapse_templates)
            .unwrap_or_default();
        current.replace_range(open..close + 2, &replacement);
    }
}

/// First `|`-separated part of a template body that is not the name and not
/// a `key=value` argument.
fn first_positional_argument(body: &str) -> Option<&str> {
    let mut depth = 0i32;
    let mut start = None;
    let bytes = body.as_bytes();
    let mut seg_start = 0;
    let mut i = 0;
    let mut first = true;
    while i <= bytes.len() {
        let at_split = i == bytes.len() || (bytes[i] == b'|' && depth == 0);
        if i < bytes.len() {
            if bytes[i] == b'{' && bytes.get(i + 1) == Some(&b'{') {
                depth += 1;
                i += 2;
                continue;
            }
            if bytes[i] == b'}' && bytes.get(i + 1) == Some(&b'}') {
                depth -= 1;
                i += 2;
                continue;
            }
        }
        if at_split {
            let segment = &body[seg_start..i];
            if first {
                first = false; // template name
            } else if top_level_eq(segment).is_none() && !segment.trim().is_empty() {
                start = Some(segment);
                break;
            }
            seg_start = i + 1;
        }
        i += 1;
    }
    start
}

fn collapse_links(text: &str) -> String {
    let mut current = text.to_string();
    while let Some(open) = current.find("[[") {
        let Some(rel_close) = current[open..].find("]]") else {
            current.truncate(open);
            break;
        };
        let close = open + rel_close;
        let inner = &current[open + 2..close];
        let label = match inner.rsplit_once('|') {
            Some((_, label)) => label,
            None => inner,
        }
        .to_string();
        current.replace_range(open..close + 2, &label);
    }
    // External links: "[url label]" -> "url label", "[url]" -> "url".
    current.replace(['[', ']'], "")
}

/// Gathers standardized fields from parsed pairs using the keyword priority
/// lists; within one keyword, the first occurrence in the infobox wins.
pub fn extract_fields(raw: &InfoboxRaw) -> InfoboxFields {
    let find = |keywords: &[&str]| -> Option<String> {
        for keyword in keywords {
            if let Some(pair) = raw
                .pairs
                .iter()
                .find(|p| p.key == *keyword && !p.clean.is_empty())
            {
                return Some(pair.clean.clone());
            }
        }
        None
    };
    InfoboxFields {
        city: find(&CITY_KEYWORDS),
        state: find(&["state"]),
        country: find(&["country"]),
        acronym: find(&ACRONYM_KEYWORDS),
        foundation_date: find(&FOUNDATION_KEYWORDS),
        homepage: find(&HOMEPAGE_KEYWORDS),
    }
}

/// True when more than one location-bearing key has content; such multi-campus
/// infoboxes are counted by the enrichment pipeline (the first value is used).
pub fn has_multiple_locations(raw: &InfoboxRaw) -> bool {
    raw.pairs
        .iter()
        .filter(|p| CITY_KEYWORDS.contains(&p.key.as_str()) && !p.clean.is_empty())
        .count()
        > 1
}

/// Two-step geolocation from extracted fields.
///
/// Step 1 looks the city name up in the gazetteer; step 2 resolves the
/// country text, falling back to the state field as a country and finally to
/// the matched city's country. City coordinates come from the gazetteer
/// match, preferring a match inside the resolved country.
pub fn resolve_location(
    fields: &InfoboxFields,
    gazetteer: &Gazetteer,
    countries: &CountryTable,
) -> GeoPartial {
    let global_city = fields
        .city
        .as_deref()
        .and_then(|name| gazetteer.city_match(name, None));

    let country = fields
        .country
        .as_deref()
        .and_then(|raw| countries.normalize(raw).ok().flatten())
        .or_else(|| {
            fields
                .state
                .as_deref()
                .and_then(|raw| countries.normalize(raw).ok().flatten())
        })
        .or_else(|| global_city.and_then(|c| countries.by_alpha2(&c.country_alpha2)));

    let city_entry = match (&fields.city, country) {
        (Some(name), Some(rec)) => gazetteer
            .city_match(name, Some(&rec.alpha2))
            .or(global_city),
        _ => global_city,
    };

    GeoPartial {
        city: city_entry
            .map(|e| e.city_name.clone())
            .or_else(|| fields.city.clone()),
        city_latitude: city_entry.map(|e| e.latitude),
        city_longitude: city_entry.map(|e| e.longitude),
        state: fields.state.clone(),
        postcode: None,
        country_alpha2: country.map(|rec| rec.alpha2.clone()),
        foundation_date: fields
            .foundation_date
            .as_deref()
            .and_then(normalize_foundation_date),
        foundation_date_raw: fields.foundation_date.clone(),
        entity_type: None, // attached by the caller from the template kind
        acronym: fields.acronym.clone(),
        homepage: fields.homepage.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geocode::tests::fixture_gazetteer;
    use proptest::prelude::*;

    #[test]
    fn parses_simple_infobox() {
        let raw = parse_infobox("{{Infobox university | city = [[Pisa]] | established = 1343 }}");
        assert_eq!(raw.kind.as_deref(), Some("university"));
        let pairs: Vec<(&str, &str)> = raw
            .pairs
            .iter()
            .map(|p| (p.key.as_str(), p.clean.as_str()))
            .collect();
        assert_eq!(pairs, vec![("city", "Pisa"), ("established", "1343")]);
    }

    #[test]
    fn plain_text_has_no_pairs() {
        assert_eq!(parse_infobox("plain article text").pairs.len(), 0);
        assert_eq!(parse_infobox("").pairs.len(), 0);
    }

    #[test]
    fn nested_template_value_is_collapsed() {
        let raw = parse_infobox("{{Infobox company | location = {{nowrap|Cambridge, MA}} }}");
        assert_eq!(raw.pairs.len(), 1);
        assert_eq!(raw.pairs[0].key, "location");
        assert_eq!(raw.pairs[0].clean, "Cambridge, MA");
        // The raw value keeps its markup for audit.
        assert_eq!(raw.pairs[0].raw, "{{nowrap|Cambridge, MA}}");
    }

    #[test]
    fn multiline_infobox_with_links_and_refs() {
        let text = "before\n{{Infobox university\n| name = Example University\n\
                    | city = [[Paris|City of Light]]\n| country = France<ref>src</ref>\n\
                    | website = https://example.edu\n}}\nafter";
        let raw = parse_infobox(text);
        assert_eq!(raw.kind.as_deref(), Some("university"));
        let get = |k: &str| {
            raw.pairs
                .iter()
                .find(|p| p.key == k)
                .map(|p| p.clean.clone())
                .unwrap()
        };
        assert_eq!(get("city"), "City of Light");
        assert_eq!(get("country"), "France");
        assert_eq!(get("website"), "https://example.edu");
    }

    #[test]
    fn keyword_priority_follows_listing_order() {
        // "location" is in the city keyword set.
        let raw = parse_infobox("{{Infobox | location = Pisa }}");
        assert_eq!(extract_fields(&raw).city.as_deref(), Some("Pisa"));

        // "foundation" precedes "established" even when it appears later.
        let raw = parse_infobox("{{Infobox | established = 1343 | foundation = 1900 }}");
        assert_eq!(
            extract_fields(&raw).foundation_date.as_deref(),
            Some("1900")
        );

        // Equal keywords: the first occurrence wins.
        let raw = parse_infobox("{{Infobox | city = Pisa | city = Rome }}");
        assert_eq!(extract_fields(&raw).city.as_deref(), Some("Pisa"));
    }

    #[test]
    fn empty_pairs_give_empty_fields() {
        assert_eq!(
            extract_fields(&InfoboxRaw::default()),
            InfoboxFields::default()
        );
    }

    #[test]
    fn multi_location_detection() {
        let raw = parse_infobox("{{Infobox | city = Pisa | location = Rome }}");
        assert!(has_multiple_locations(&raw));
        let raw = parse_infobox("{{Infobox | city = Pisa }}");
        assert!(!has_multiple_locations(&raw));
    }

    #[test]
    fn resolve_city_and_country() {
        let gaz = fixture_gazetteer();
        let countries = CountryTable::bundled();
        let fields = InfoboxFields {
            city: Some("Pisa".into()),
            country: Some("Italy".into()),
            ..InfoboxFields::default()
        };
        let partial = resolve_location(&fields, &gaz, &countries);
        assert_eq!(partial.country_alpha2.as_deref(), Some("IT"));
        assert_eq!(partial.city.as_deref(), Some("Pisa"));
        assert_eq!(partial.city_latitude, Some(43.7167));
    }

    #[test]
    fn resolve_state_as_country_fallback() {
        let gaz = fixture_gazetteer();
        let countries = CountryTable::bundled();
        let fields = InfoboxFields {
            state: Some("Luxembourg".into()),
            ..InfoboxFields::default()
        };
        let partial = resolve_location(&fields, &gaz, &countries);
        assert_eq!(partial.country_alpha2.as_deref(), Some("LU"));
        assert_eq!(partial.state.as_deref(), Some("Luxembourg"));
    }

    #[test]
    fn resolve_country_from_city_match() {
        let gaz = fixture_gazetteer();
        let countries = CountryTable::bundled();
        let fields = InfoboxFields {
            city: Some("Pisa".into()),
            ..InfoboxFields::default()
        };
        let partial = resolve_location(&fields, &gaz, &countries);
        assert_eq!(partial.country_alpha2.as_deref(), Some("IT"));
    }

    #[test]
    fn resolve_empty_fields_is_empty() {
        let gaz = fixture_gazetteer();
        let countries = CountryTable::bundled();
        let partial = resolve_location(&InfoboxFields::default(), &gaz, &countries);
        assert!(partial.is_empty());
    }

    #[test]
    fn store_roundtrip_with_escapes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("infoboxes.tsv");
        std::fs::write(&path, "F1\t{{Infobox university\\n| city = [[Pisa]]\\n}}\n").unwrap();
        let store = InfoboxStore::load_tsv(&path).unwrap();
        let text = store.get("F1").unwrap();
        assert!(text.contains('\n'));
        let raw = parse_infobox(text);
        assert_eq!(raw.pairs[0].clean, "Pisa");
        assert!(store.get("F2").is_none());
    }

    proptest! {
        // The parser must never panic, whatever bytes arrive.
        #[test]
        fn parse_never_panics(input in "\\PC{0,400}") {
            let raw = parse_infobox(&input);
            for pair in &raw.pairs {
                prop_assert!(!pair.key.is_empty());
            }
        }

        #[test]
        fn parse_never_panics_on_brace_soup(input in "[{}\\[\\]|=a-z ]{0,200}") {
            let _ = parse_infobox(&input);
        }
    }
}
