//! Offline geolocation: reverse geocoding against a gazetteer, country
//! normalization, and the cross-check merge of the two geolocation routes.
//!
//! Reverse geocoding is a nearest-city lookup over a bundled gazetteer
//! instead of an online service. Great-circle distances use the haversine
//! formula on a spherical Earth; the spatial index is a 3-D k-d tree over
//! unit vectors, which preserves exact-nearest semantics because chord
//! length is monotone in central angle.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infobox::{self, InfoboxStore};

/// Mean Earth radius in kilometres.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

/// Default similarity threshold for fuzzy country-name matching.
pub const DEFAULT_FUZZY_THRESHOLD: f64 = 0.85;

const BUNDLED_COUNTRIES: &str = include_str!("../data/countries.csv");
const BUNDLED_TERRITORIES: &str = include_str!("../data/territories.csv");

/// A latitude/longitude pair validated to be in range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatLon {
    lat: f64,
    lon: f64,
}

impl LatLon {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !lat.is_finite() || !(-90.0..=90.0).contains(&lat) {
            return Err(Error::input(format!(
                "latitude {lat} out of range [-90, 90]"
            )));
        }
        if !lon.is_finite() || !(-180.0..=180.0).contains(&lon) {
            return Err(Error::input(format!(
                "longitude {lon} out of range [-180, 180]"
            )));
        }
        Ok(LatLon { lat, lon })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }

    fn unit_vector(&self) -> [f64; 3] {
        let lat = self.lat.to_radians();
        let lon = self.lon.to_radians();
        [lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin()]
    }
}

/// Great-circle distance in kilometres (haversine on a sphere).
pub fn haversine_km(a: LatLon, b: LatLon) -> f64 {
    let dlat = (b.lat - a.lat).to_radians();
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2)
        + a.lat.to_radians().cos() * b.lat.to_radians().cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// One populated place in the gazetteer.
#[derive(Debug, Clone, PartialEq)]
pub struct GazetteerEntry {
    pub city_name: String,
    pub alt_names: Vec<String>,
    pub latitude: f64,
    pub longitude: f64,
    pub country_alpha2: String,
    pub admin1: String,
    pub population: u64,
}

impl GazetteerEntry {
    pub fn position(&self) -> LatLon {
        LatLon {
            lat: self.latitude,
            lon: self.longitude,
        }
    }
}

/// Immutable gazetteer with a spatial index and a city-name index.
pub struct Gazetteer {
    entries: Vec<GazetteerEntry>,
    points: Vec<[f64; 3]>,
    tree: Vec<u32>,
    by_name: HashMap<String, Vec<u32>>,
    skipped_rows: u64,
}

impl Gazetteer {
    /// Loads a gazetteer CSV (header: name, alt_names, latitude, longitude,
    /// country_alpha2, admin1, population; alt_names ';'-joined). Rows with
    /// out-of-range coordinates or countries absent from the table are
    /// skipped and counted.
    pub fn from_csv_path(path: &Path, countries: &CountryTable) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| Error::input(format!("cannot open gazetteer {}: {e}", path.display())))?;
        let mut entries = Vec::new();
        let mut skipped = 0u64;
        for row in reader.records() {
            let row = row.map_err(|e| Error::input(format!("bad gazetteer row: {e}")))?;
            match parse_gazetteer_row(&row, countries) {
                Some(entry) => entries.push(entry),
                None => skipped += 1,
            }
        }
        let mut gaz = Self::from_entries(entries)?;
        gaz.skipped_rows = skipped;
        Ok(gaz)
    }

    /// Builds a gazetteer from already-validated entries.
    pub fn from_entries(entries: Vec<GazetteerEntry>) -> Result<Self> {
        for e in &entries {
            LatLon::new(e.latitude, e.longitude)?;
        }
        let points: Vec<[f64; 3]> = entries.iter().map(|e| e.position().unit_vector()).collect();
        let mut tree: Vec<u32> = (0..entries.len() as u32).collect();
        build_kd(&points, &mut tree, 0);
        let mut by_name: HashMap<String, Vec<u32>> = HashMap::new();
        for (i, e) in entries.iter().enumerate() {
            by_name
                .entry(e.city_name.to_lowercase())
                .or_default()
                .push(i as u32);
            for alt in &e.alt_names {
                let key = alt.trim().to_lowercase();
                if !key.is_empty() {
                    by_name.entry(key).or_default().push(i as u32);
                }
            }
        }
        Ok(Gazetteer {
            entries,
            points,
            tree,
            by_name,
            skipped_rows: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn skipped_rows(&self) -> u64 {
        self.skipped_rows
    }

    pub fn entries(&self) -> &[GazetteerEntry] {
        &self.entries
    }

    /// Nearest entry to the query by great-circle distance, with the
    /// distance in km. Ties are broken by larger population, then
    /// lexicographic city name. Returns `None` only on an empty gazetteer.
    pub fn nearest(&self, query: LatLon) -> Option<(&GazetteerEntry, f64)> {
        if self.entries.is_empty() {
            return None;
        }
        let q = query.unit_vector();
        let mut best: Option<(f64, u32)> = None;
        self.search(&self.tree, 0, &q, &mut best);
        let (_, idx) = best?;
        let entry = &self.entries[idx as usize];
        Some((entry, haversine_km(query, entry.position())))
    }

    fn search(&self, range: &[u32], depth: usize, q: &[f64; 3], best: &mut Option<(f64, u32)>) {
        if range.is_empty() {
            return;
        }
        let mid = range.len() / 2;
        let node = range[mid];
        let p = &self.points[node as usize];
        let d2 = (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2) + (q[2] - p[2]).powi(2);
        if self.candidate_beats(d2, node, best) {
            *best = Some((d2, node));
        }
        let axis = depth % 3;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 {
            (&range[..mid], &range[mid + 1..])
        } else {
            (&range[mid + 1..], &range[..mid])
        };
        self.search(near, depth + 1, q, best);
        // The far side can still hold the winner (or an exact tie needed for
        // deterministic tie-breaking) while the splitting plane is not
        // farther than the current best.
        if best.is_none_or(|(bd2, _)| diff * diff <= bd2) {
            self.search(far, depth + 1, q, best);
        }
    }

    fn candidate_beats(&self, d2: f64, idx: u32, best: &Option<(f64, u32)>) -> bool {
        match best {
            None => true,
            Some((bd2, bidx)) => {
                if d2 != *bd2 {
                    return d2 < *bd2;
                }
                let a = &self.entries[idx as usize];
                let b = &self.entries[*bidx as usize];
                (std::cmp::Reverse(a.population), &a.city_name, idx)
                    < (std::cmp::Reverse(b.population), &b.city_name, *bidx)
            }
        }
    }

    /// Best entry whose name (or alternate name) equals `name` casefolded:
    /// largest population, then lexicographic name, then load order. With
    /// `country`, only entries of that country are considered.
    pub fn city_match(&self, name: &str, country: Option<&str>) -> Option<&GazetteerEntry> {
        let candidates = self.by_name.get(&name.trim().to_lowercase())?;
        candidates
            .iter()
            .filter(|&&i| {
                country.is_none_or(|c| {
                    self.entries[i as usize]
                        .country_alpha2
                        .eq_ignore_ascii_case(c)
                })
            })
            .min_by_key(|&&i| {
                let e = &self.entries[i as usize];
                (std::cmp::Reverse(e.population), e.city_name.clone(), i)
            })
            .map(|&i| &self.entries[i as usize])
    }
}

fn parse_gazetteer_row(
    row: &csv::StringRecord,
    countries: &CountryTable,
) -> Option<GazetteerEntry> {
    if row.len() != 7 {
        return None;
    }
    let latitude: f64 = row[2].trim().parse().ok()?;
    let longitude: f64 = row[3].trim().parse().ok()?;
    LatLon::new(latitude, longitude).ok()?;
    let country_alpha2 = row[4].trim().to_uppercase();
    countries.by_alpha2(&country_alpha2)?;
    let city_name = row[0].trim().to_string();
    if city_name.is_empty() {
        return None;
    }
    Some(GazetteerEntry {
        city_name,
        alt_names: row[1]
            .split(';')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect(),
        latitude,
        longitude,
        country_alpha2,
        admin1: row[5].trim().to_string(),
        population: row[6].trim().parse().unwrap_or(0),
    })
}

fn build_kd(points: &[[f64; 3]], range: &mut [u32], depth: usize) {
    if range.len() <= 1 {
        return;
    }
    let axis = depth % 3;
    let mid = range.len() / 2;
    range.select_nth_unstable_by(mid, |&a, &b| {
        points[a as usize][axis]
            .partial_cmp(&points[b as usize][axis])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let (left, rest) = range.split_at_mut(mid);
    build_kd(points, left, depth + 1);
    build_kd(points, &mut rest[1..], depth + 1);
}

/// Reverse geocoding: nearest gazetteer city to the given coordinates.
pub fn reverse_geocode(
    latitude: f64,
    longitude: f64,
    gazetteer: &Gazetteer,
) -> Result<(&GazetteerEntry, f64)> {
    let query = LatLon::new(latitude, longitude)?;
    gazetteer
        .nearest(query)
        .ok_or_else(|| Error::input("gazetteer is empty".to_string()))
}

/// One ISO 3166 row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountryRecord {
    pub alpha2: String,
    pub alpha3: String,
    pub common_name: String,
    pub official_name: String,
}

/// Country lookup table with exact and fuzzy matching.
pub struct CountryTable {
    rows: Vec<CountryRecord>,
    exact: HashMap<String, usize>,
    fuzzy_keys: Vec<(String, usize)>,
    fuzzy_threshold: f64,
}

impl CountryTable {
    /// The ISO 3166 table bundled with the crate.
    pub fn bundled() -> Self {
        Self::from_csv_reader(BUNDLED_COUNTRIES.as_bytes()).expect("bundled country table is valid")
    }

    pub fn from_csv_path(path: &Path) -> Result<Self> {
        let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(&data[..])
    }

    fn from_csv_reader(reader: impl std::io::Read) -> Result<Self> {
        let mut csv_reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(reader);
        let mut rows = Vec::new();
        for row in csv_reader.records() {
            let row = row.map_err(|e| Error::validation(format!("bad country row: {e}")))?;
            if row.len() != 4 {
                return Err(Error::validation(format!(
                    "country table rows need 4 columns, got {}",
                    row.len()
                )));
            }
            let rec = CountryRecord {
                alpha2: row[0].trim().to_uppercase(),
                alpha3: row[1].trim().to_uppercase(),
                common_name: row[2].trim().to_string(),
                official_name: row[3].trim().to_string(),
            };
            if rec.alpha2.len() != 2
                || rec.alpha3.len() != 3
                || rec.common_name.is_empty()
                || rec.official_name.is_empty()
            {
                return Err(Error::validation(format!(
                    "malformed country row for {:?}",
                    row.get(0).unwrap_or("")
                )));
            }
            rows.push(rec);
        }
        Self::from_rows(rows)
    }

    fn from_rows(rows: Vec<CountryRecord>) -> Result<Self> {
        let mut exact = HashMap::new();
        let mut fuzzy_keys = Vec::new();
        for (i, rec) in rows.iter().enumerate() {
            for key in [
                &rec.alpha2,
                &rec.alpha3,
                &rec.common_name,
                &rec.official_name,
            ] {
                let folded = key.to_lowercase();
                if let Some(&prev) = exact.get(&folded) {
                    if prev != i && (*key == rec.alpha2 || *key == rec.alpha3) {
                        return Err(Error::validation(format!(
                            "duplicate country code {key} in table"
                        )));
                    }
                } else {
                    exact.insert(folded, i);
                }
                let normalized = fuzzy_normalize(key);
                if !normalized.is_empty() {
                    fuzzy_keys.push((normalized, i));
                }
            }
        }
        Ok(CountryTable {
            rows,
            exact,
            fuzzy_keys,
            fuzzy_threshold: DEFAULT_FUZZY_THRESHOLD,
        })
    }

    pub fn with_fuzzy_threshold(mut self, threshold: f64) -> Self {
        self.fuzzy_threshold = threshold;
        self
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[CountryRecord] {
        &self.rows
    }

    pub fn by_alpha2(&self, alpha2: &str) -> Option<&CountryRecord> {
        self.exact
            .get(&alpha2.to_lowercase())
            .map(|&i| &self.rows[i])
            .filter(|r| r.alpha2.eq_ignore_ascii_case(alpha2))
    }

    /// Resolves free country text to a table row.
    ///
    /// Exact match on alpha codes / common / official name first (casefolded,
    /// trimmed), then fuzzy match by normalized Levenshtein similarity on
    /// casefolded punctuation-stripped text. `Ok(None)` means no match at the
    /// configured threshold; the caller decides the fallback.
    pub fn normalize(&self, raw: &str) -> Result<Option<&CountryRecord>> {
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            return Err(Error::input("empty country text".to_string()));
        }
        if let Some(&i) = self.exact.get(&trimmed.to_lowercase()) {
            return Ok(Some(&self.rows[i]));
        }
        let needle = fuzzy_normalize(trimmed);
        if needle.is_empty() {
            return Ok(None);
        }
        let mut best: Option<(f64, usize)> = None;
        for (key, i) in &self.fuzzy_keys {
            let sim = strsim::normalized_levenshtein(&needle, key);
            if sim < self.fuzzy_threshold {
                continue;
            }
            let beats = match best {
                None => true,
                Some((bs, bi)) => {
                    sim > bs || (sim == bs && self.rows[*i].alpha2 < self.rows[bi].alpha2)
                }
            };
            if beats {
                best = Some((sim, *i));
            }
        }
        Ok(best.map(|(_, i)| &self.rows[i]))
    }
}

/// Casefold, strip punctuation, collapse whitespace.
fn fuzzy_normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for ch in text.to_lowercase().chars() {
        if ch.is_alphanumeric() {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.push(ch);
        } else if ch.is_whitespace() {
            pending_space = true;
        }
        // other punctuation is dropped entirely
    }
    out
}

/// Territory -> parent-country mapping used for dual country coding.
pub struct TerritoryMap {
    parents: HashMap<String, String>,
}

impl TerritoryMap {
    /// The bundled mapping (US unincorporated territories).
    pub fn bundled() -> Self {
        Self::from_csv_reader(BUNDLED_TERRITORIES.as_bytes())
            .expect("bundled territory map is valid")
    }

    pub fn from_csv_path(path: &Path) -> Result<Self> {
        let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(&data[..])
    }

    fn from_csv_reader(reader: impl std::io::Read) -> Result<Self> {
        let mut csv_reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(reader);
        let mut parents = HashMap::new();
        for row in csv_reader.records() {
            let row = row.map_err(|e| Error::validation(format!("bad territory row: {e}")))?;
            if row.len() != 2 {
                return Err(Error::validation(
                    "territory rows need 2 columns".to_string(),
                ));
            }
            let territory = row[0].trim().to_uppercase();
            let parent = row[1].trim().to_uppercase();
            if territory == parent {
                return Err(Error::validation(format!(
                    "territory {territory} cannot be its own parent"
                )));
            }
            parents.insert(territory, parent);
        }
        let map = TerritoryMap { parents };
        map.check_idempotence()?;
        Ok(map)
    }

    /// Extends the bundled table with extra rows from a config CSV.
    pub fn bundled_with_extra(path: &Path) -> Result<Self> {
        let mut merged = Self::bundled();
        let extra = Self::from_csv_path(path)?;
        merged.parents.extend(extra.parents);
        merged.check_idempotence()?;
        Ok(merged)
    }

    fn check_idempotence(&self) -> Result<()> {
        // A parent that is itself mapped would make the lookup non-idempotent.
        for (t, p) in &self.parents {
            if t == p || self.parents.contains_key(p) {
                return Err(Error::validation(format!(
                    "territory map entry {t} -> {p} breaks idempotence"
                )));
            }
        }
        Ok(())
    }

    /// Parent-territory code for dual coding, if any.
    pub fn secondary_country(&self, alpha2: &str) -> Option<&str> {
        self.parents.get(&alpha2.to_uppercase()).map(String::as_str)
    }
}

/// How an enrichment was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Reverse,
    Url,
    Merged,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::Reverse => "reverse",
            Provenance::Url => "url",
            Provenance::Merged => "merged",
        }
    }
}

impl std::str::FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reverse" => Ok(Provenance::Reverse),
            "url" => Ok(Provenance::Url),
            "merged" => Ok(Provenance::Merged),
            other => Err(Error::input(format!("unknown provenance {other:?}"))),
        }
    }
}

/// Partial geographic/institutional fields from one geolocation route.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GeoPartial {
    pub city: Option<String>,
    pub city_latitude: Option<f64>,
    pub city_longitude: Option<f64>,
    pub state: Option<String>,
    pub postcode: Option<String>,
    pub country_alpha2: Option<String>,
    pub foundation_date: Option<String>,
    pub foundation_date_raw: Option<String>,
    pub entity_type: Option<String>,
    pub acronym: Option<String>,
    pub homepage: Option<String>,
}

impl GeoPartial {
    pub fn is_empty(&self) -> bool {
        self.city.is_none()
            && self.city_latitude.is_none()
            && self.city_longitude.is_none()
            && self.state.is_none()
            && self.postcode.is_none()
            && self.country_alpha2.is_none()
            && self.foundation_date.is_none()
            && self.foundation_date_raw.is_none()
            && self.entity_type.is_none()
            && self.acronym.is_none()
            && self.homepage.is_none()
    }
}

/// Result of merging the reverse-geocoded and url-based routes.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedGeo {
    pub fields: GeoPartial,
    pub provenance: Provenance,
    pub postcode_conflict: bool,
}

/// Cross-checks and integrates the two geolocation routes.
///
/// Rules: (a) when the reverse route found a country it is the base; a
/// same-country url route fills missing city/state, and its city coordinates
/// are attached only when both city names match casefolded; (b) without a
/// reverse country the url route's geographic fields are taken wholesale;
/// (c) foundation date, entity type, acronym and homepage always come from
/// the url route when present. The reverse country always wins a conflict.
pub fn merge_geo_sources(
    reverse: Option<&GeoPartial>,
    urlbased: Option<&GeoPartial>,
) -> Result<MergedGeo> {
    let reverse = reverse.filter(|p| !p.is_empty());
    let urlbased = urlbased.filter(|p| !p.is_empty());
    if reverse.is_none() && urlbased.is_none() {
        return Err(Error::input(
            "merge_geo_sources needs at least one non-empty source".to_string(),
        ));
    }
    let provenance = match (reverse, urlbased) {
        (Some(_), Some(_)) => Provenance::Merged,
        (Some(_), None) => Provenance::Reverse,
        (None, Some(_)) => Provenance::Url,
        (None, None) => unreachable!(),
    };

    let mut postcode_conflict = false;
    let mut fields = match reverse {
        Some(rev) if rev.country_alpha2.is_some() => {
            let mut base = rev.clone();
            if let Some(url) = urlbased {
                let same_country =
                    url.country_alpha2.is_some() && url.country_alpha2 == base.country_alpha2;
                if same_country {
                    match (&base.city, &url.city) {
                        (None, Some(_)) => {
                            base.city = url.city.clone();
                            base.city_latitude = url.city_latitude;
                            base.city_longitude = url.city_longitude;
                        }
                        (Some(ours), Some(theirs))
                            if ours.to_lowercase() == theirs.to_lowercase()
                                && url.city_latitude.is_some() =>
                        {
                            base.city_latitude = url.city_latitude;
                            base.city_longitude = url.city_longitude;
                        }
                        _ => {}
                    }
                    if base.state.is_none() {
                        base.state = url.state.clone();
                    }
                }
                match (&base.postcode, &url.postcode) {
                    (None, Some(_)) => base.postcode = url.postcode.clone(),
                    (Some(a), Some(b)) if a != b => postcode_conflict = true,
                    _ => {}
                }
            }
            base
        }
        _ => {
            // No reverse country: take the url route's geography wholesale.
            urlbased.cloned().unwrap_or_default()
        }
    };

    if let Some(url) = urlbased {
        if url.foundation_date.is_some() {
            fields.foundation_date = url.foundation_date.clone();
        }
        if url.foundation_date_raw.is_some() {
            fields.foundation_date_raw = url.foundation_date_raw.clone();
        }
        if url.entity_type.is_some() {
            fields.entity_type = url.entity_type.clone();
        }
        if url.acronym.is_some() {
            fields.acronym = url.acronym.clone();
        }
        if url.homepage.is_some() {
            fields.homepage = url.homepage.clone();
        }
    }

    Ok(MergedGeo {
        fields,
        provenance,
        postcode_conflict,
    })
}

/// Raw affiliation as it arrives from the dump.
#[derive(Debug, Clone, PartialEq)]
pub struct AffiliationRecord {
    pub affiliation_id: String,
    pub name: String,
    pub latitude: Option<f64>,
    pub longitude: Option<f64>,
    pub wiki_url: Option<String>,
}

/// Standardized location and institutional metadata for one affiliation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoEnrichment {
    pub affiliation_id: String,
    pub city: Option<String>,
    pub city_latitude: Option<f64>,
    pub city_longitude: Option<f64>,
    pub state: Option<String>,
    pub postcode: Option<String>,
    pub country_alpha2: Option<String>,
    pub country_alpha2_secondary: Option<String>,
    pub country_alpha3: Option<String>,
    pub country_official_name: Option<String>,
    pub country_common_name: Option<String>,
    pub foundation_date: Option<String>,
    pub foundation_date_raw: Option<String>,
    pub entity_type: Option<String>,
    pub acronym: Option<String>,
    pub homepage: Option<String>,
    pub provenance: Option<Provenance>,
}

impl GeoEnrichment {
    pub fn empty(affiliation_id: &str) -> Self {
        GeoEnrichment {
            affiliation_id: affiliation_id.to_string(),
            city: None,
            city_latitude: None,
            city_longitude: None,
            state: None,
            postcode: None,
            country_alpha2: None,
            country_alpha2_secondary: None,
            country_alpha3: None,
            country_official_name: None,
            country_common_name: None,
            foundation_date: None,
            foundation_date_raw: None,
            entity_type: None,
            acronym: None,
            homepage: None,
            provenance: None,
        }
    }

    pub fn is_located(&self) -> bool {
        self.country_alpha2.is_some()
    }
}

/// Options for the affiliation enrichment pipeline.
#[derive(Debug, Clone, Default)]
pub struct EnrichOptions {
    /// Nearest-city matches farther than this are treated as unlocated.
    pub max_distance_km: Option<f64>,
}

/// Counters reported by [`enrich_affiliations`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EnrichStats {
    pub affiliations: u64,
    pub unlocated: u64,
    pub reverse_only: u64,
    pub url_only: u64,
    pub merged: u64,
    pub postcode_conflicts: u64,
    pub multi_location: u64,
    pub over_distance_cutoff: u64,
}

/// Per-affiliation outcome flags, aggregated into [`EnrichStats`].
#[derive(Debug, Clone, Default)]
pub struct EnrichFlags {
    pub unlocated: bool,
    pub postcode_conflict: bool,
    pub multi_location: bool,
    pub over_distance_cutoff: bool,
    pub provenance: Option<Provenance>,
}

/// Everything needed to enrich affiliations offline.
pub struct GeoContext<'a> {
    pub gazetteer: &'a Gazetteer,
    pub countries: &'a CountryTable,
    pub territories: &'a TerritoryMap,
    pub infoboxes: &'a InfoboxStore,
    pub options: EnrichOptions,
}

impl GeoContext<'_> {
    /// Enriches one affiliation.
    pub fn enrich(&self, affiliation: &AffiliationRecord) -> (GeoEnrichment, EnrichFlags) {
        let mut flags = EnrichFlags::default();

        let reverse = self.reverse_partial(affiliation, &mut flags);
        let urlbased = self.url_partial(affiliation, &mut flags);

        match merge_geo_sources(reverse.as_ref(), urlbased.as_ref()) {
            Ok(merged) => {
                flags.postcode_conflict = merged.postcode_conflict;
                flags.provenance = Some(merged.provenance);
                (
                    self.finalize(affiliation, merged.fields, merged.provenance),
                    flags,
                )
            }
            Err(_) => {
                flags.unlocated = true;
                (GeoEnrichment::empty(&affiliation.affiliation_id), flags)
            }
        }
    }

    fn reverse_partial(
        &self,
        affiliation: &AffiliationRecord,
        flags: &mut EnrichFlags,
    ) -> Option<GeoPartial> {
        let (lat, lon) = match (affiliation.latitude, affiliation.longitude) {
            (Some(lat), Some(lon)) => (lat, lon),
            _ => return None,
        };
        let query = LatLon::new(lat, lon).ok()?;
        let (entry, distance_km) = self.gazetteer.nearest(query)?;
        if let Some(cutoff) = self.options.max_distance_km {
            if distance_km > cutoff {
                flags.over_distance_cutoff = true;
                return None;
            }
        }
        Some(GeoPartial {
            city: Some(entry.city_name.clone()),
            city_latitude: Some(entry.latitude),
            city_longitude: Some(entry.longitude),
            state: (!entry.admin1.is_empty()).then(|| entry.admin1.clone()),
            country_alpha2: Some(entry.country_alpha2.clone()),
            ..GeoPartial::default()
        })
    }

    fn url_partial(
        &self,
        affiliation: &AffiliationRecord,
        flags: &mut EnrichFlags,
    ) -> Option<GeoPartial> {
        let text = self.infoboxes.get(&affiliation.affiliation_id)?;
        let raw = infobox::parse_infobox(text);
        if infobox::has_multiple_locations(&raw) {
            flags.multi_location = true;
        }
        let fields = infobox::extract_fields(&raw);
        let mut partial = infobox::resolve_location(&fields, self.gazetteer, self.countries);
        partial.entity_type = raw.kind;
        (!partial.is_empty()).then_some(partial)
    }

    fn finalize(
        &self,
        affiliation: &AffiliationRecord,
        fields: GeoPartial,
        provenance: Provenance,
    ) -> GeoEnrichment {
        let country = fields
            .country_alpha2
            .as_deref()
            .and_then(|a2| self.countries.by_alpha2(a2));
        GeoEnrichment {
            affiliation_id: affiliation.affiliation_id.clone(),
            city: fields.city,
            city_latitude: fields.city_latitude,
            city_longitude: fields.city_longitude,
            state: fields.state,
            postcode: fields.postcode,
            country_alpha2: country.map(|c| c.alpha2.clone()),
            country_alpha2_secondary: country
                .and_then(|c| self.territories.secondary_country(&c.alpha2))
                .map(String::from),
            country_alpha3: country.map(|c| c.alpha3.clone()),
            country_official_name: country.map(|c| c.official_name.clone()),
            country_common_name: country.map(|c| c.common_name.clone()),
            foundation_date: fields.foundation_date,
            foundation_date_raw: fields.foundation_date_raw,
            entity_type: fields.entity_type,
            acronym: fields.acronym,
            homepage: fields.homepage,
            provenance: Some(provenance),
        }
    }
}

/// Enriches a batch of affiliations, returning one enrichment per input in
/// input order plus the aggregate counters.
pub fn enrich_affiliations(
    affiliations: &[AffiliationRecord],
    context: &GeoContext<'_>,
) -> (Vec<GeoEnrichment>, EnrichStats) {
    use rayon::prelude::*;

    let results: Vec<(GeoEnrichment, EnrichFlags)> = affiliations
        .par_iter()
        .map(|aff| context.enrich(aff))
        .collect();

    let mut stats = EnrichStats {
        affiliations: affiliations.len() as u64,
        ..EnrichStats::default()
    };
    let mut out = Vec::with_capacity(results.len());
    for (enrichment, flags) in results {
        if flags.unlocated || !enrichment.is_located() {
            stats.unlocated += 1;
        }
        if flags.postcode_conflict {
            stats.postcode_conflicts += 1;
        }
        if flags.multi_location {
            stats.multi_location += 1;
        }
        if flags.over_distance_cutoff {
            stats.over_distance_cutoff += 1;
        }
        match flags.provenance {
            Some(Provenance::Reverse) => stats.reverse_only += 1,
            Some(Provenance::Url) => stats.url_only += 1,
            Some(Provenance::Merged) => stats.merged += 1,
            None => {}
        }
        out.push(enrichment);
    }
    (out, stats)
}

/// Normalizes free foundation-date text to an ISO-8601 year, year-month, or
/// full date. Returns `None` when nothing date-like is recognized.
pub fn normalize_foundation_date(raw: &str) -> Option<String> {
    let text = raw.trim();
    if text.is_empty() {
        return None;
    }
    // Already ISO: YYYY-MM-DD or YYYY-MM.
    let iso_like = |s: &str| {
        let parts: Vec<&str> = s.split('-').collect();
        matches!(parts.len(), 2 | 3)
            && parts[0].len() == 4
            && parts
                .iter()
                .all(|p| !p.is_empty() && p.chars().all(|c| c.is_ascii_digit()))
    };
    if iso_like(text) {
        return Some(text.to_string());
    }

    const MONTHS: [&str; 12] = [
        "january",
        "february",
        "march",
        "april",
        "may",
        "june",
        "july",
        "august",
        "september",
        "october",
        "november",
        "december",
    ];
    let tokens: Vec<String> = text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect();

    let year = tokens
        .iter()
        .find(|t| t.len() == 4 && t.chars().all(|c| c.is_ascii_digit()))
        .or_else(|| {
            tokens
                .iter()
                .find(|t| t.len() == 3 && t.chars().all(|c| c.is_ascii_digit()))
        })?
        .clone();
    let month = tokens
        .iter()
        .find_map(|t| MONTHS.iter().position(|m| m == t).map(|i| i + 1));
    let day = tokens
        .iter()
        .filter(|t| **t != year)
        .find(|t| t.len() <= 2 && t.chars().all(|c| c.is_ascii_digit()))
        .and_then(|t| t.parse::<u32>().ok())
        .filter(|d| (1..=31).contains(d));

    match (month, day) {
        (Some(m), Some(d)) => Some(format!("{year}-{m:02}-{d:02}")),
        (Some(m), None) => Some(format!("{year}-{m:02}")),
        _ => Some(year),
    }
}
