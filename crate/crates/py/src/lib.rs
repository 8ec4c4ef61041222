//! Python bindings for the core enrichment operations: offline reverse
//! geocoding, country normalization, infobox parsing, h-index, language
//! detection, tokenization, ego networks, mobility flows, and
//! field-of-study label propagation.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::OnceLock;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use magpie_core::error::Error;
use magpie_core::{egonet, fos, geocode, hindex, infobox, mobility, textproc};

fn to_py_err(err: Error) -> PyErr {
    match err {
        Error::Consistency(_) => PyRuntimeError::new_err(err.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn entry_dict<'py>(
    py: Python<'py>,
    entry: &geocode::GazetteerEntry,
    distance_km: Option<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let dict = PyDict::new(py);
    dict.set_item("city", &entry.city_name)?;
    dict.set_item("latitude", entry.latitude)?;
    dict.set_item("longitude", entry.longitude)?;
    dict.set_item("country_alpha2", &entry.country_alpha2)?;
    dict.set_item("admin1", &entry.admin1)?;
    dict.set_item("population", entry.population)?;
    if let Some(d) = distance_km {
        dict.set_item("distance_km", d)?;
    }
    Ok(dict)
}

/// Offline reverse geocoder over a gazetteer CSV
/// (name, alt_names, latitude, longitude, country_alpha2, admin1, population).
#[pyclass(frozen)]
struct Gazetteer {
    inner: geocode::Gazetteer,
}

#[pymethods]
impl Gazetteer {
    #[new]
    fn new(path: PathBuf) -> PyResult<Self> {
        let countries = geocode::CountryTable::bundled();
        let inner = geocode::Gazetteer::from_csv_path(&path, &countries).map_err(to_py_err)?;
        Ok(Gazetteer { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Nearest gazetteer city to the coordinates, with its distance in km.
    fn reverse_geocode<'py>(
        &self,
        py: Python<'py>,
        latitude: f64,
        longitude: f64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let (entry, distance_km) =
            geocode::reverse_geocode(latitude, longitude, &self.inner).map_err(to_py_err)?;
        entry_dict(py, entry, Some(distance_km))
    }

    /// Best entry with this (alternate) name, optionally within a country.
    #[pyo3(signature = (name, country=None))]
    fn city_match<'py>(
        &self,
        py: Python<'py>,
        name: &str,
        country: Option<&str>,
    ) -> PyResult<Option<Bound<'py, PyDict>>> {
        self.inner
            .city_match(name, country)
            .map(|entry| entry_dict(py, entry, None))
            .transpose()
    }
}

/// The bundled ISO 3166 table with exact and fuzzy matching.
#[pyclass(frozen)]
struct Countries {
    inner: geocode::CountryTable,
    territories: geocode::TerritoryMap,
}

#[pymethods]
impl Countries {
    #[new]
    #[pyo3(signature = (fuzzy_threshold=None))]
    fn new(fuzzy_threshold: Option<f64>) -> Self {
        let mut inner = geocode::CountryTable::bundled();
        if let Some(threshold) = fuzzy_threshold {
            inner = inner.with_fuzzy_threshold(threshold);
        }
        Countries {
            inner,
            territories: geocode::TerritoryMap::bundled(),
        }
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Resolves free country text to a row dict, or None below the
    /// similarity threshold.
    fn normalize<'py>(&self, py: Python<'py>, raw: &str) -> PyResult<Option<Bound<'py, PyDict>>> {
        let Some(rec) = self.inner.normalize(raw).map_err(to_py_err)? else {
            return Ok(None);
        };
        let dict = PyDict::new(py);
        dict.set_item("alpha2", &rec.alpha2)?;
        dict.set_item("alpha3", &rec.alpha3)?;
        dict.set_item("common_name", &rec.common_name)?;
        dict.set_item("official_name", &rec.official_name)?;
        Ok(Some(dict))
    }

    /// Parent country for dual-coded territories (PR -> US), if any.
    fn secondary_country(&self, alpha2: &str) -> Option<String> {
        self.territories.secondary_country(alpha2).map(String::from)
    }
}

/// Cross-checked h-index of a citation array (three independent methods).
#[pyfunction]
fn h_index(citations: Vec<u64>) -> PyResult<u64> {
    hindex::h_index_checked(&citations).map_err(to_py_err)
}

fn detector() -> &'static textproc::LanguageDetector {
    static DETECTOR: OnceLock<textproc::LanguageDetector> = OnceLock::new();
    DETECTOR.get_or_init(textproc::LanguageDetector::bundled)
}

/// ISO 639-1 code of the text's language, or "und".
#[pyfunction]
fn detect_language(text: &str) -> String {
    detector().detect(text).to_string()
}

/// Strips HTML markup, decodes entities, and normalizes whitespace.
#[pyfunction]
fn clean_markup(text: &str) -> String {
    textproc::clean_markup(text)
}

/// Token frequency map and sorted type list of the text.
#[pyfunction]
fn tokenize(text: &str) -> (BTreeMap<String, u64>, Vec<String>) {
    textproc::tokenize(text)
}

/// `| key = value` rows of the first infobox template, markup stripped.
#[pyfunction]
fn parse_infobox(text: &str) -> Vec<(String, String)> {
    infobox::parse_infobox(text)
        .pairs
        .into_iter()
        .map(|p| (p.key, p.clean))
        .collect()
}

/// Standardized fields gathered from an infobox by keyword priority.
#[pyfunction]
fn infobox_fields<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyDict>> {
    let raw = infobox::parse_infobox(text);
    let fields = infobox::extract_fields(&raw);
    let dict = PyDict::new(py);
    dict.set_item("kind", raw.kind)?;
    dict.set_item("city", fields.city)?;
    dict.set_item("state", fields.state)?;
    dict.set_item("country", fields.country)?;
    dict.set_item("acronym", fields.acronym)?;
    dict.set_item("foundation_date", fields.foundation_date)?;
    dict.set_item("homepage", fields.homepage)?;
    Ok(dict)
}

/// Annual co-authorship ego networks from (paper, author, year) triples.
///
/// Returns (ego, year, {alter: shared_papers}) tuples sorted by ego and year.
#[pyfunction]
#[pyo3(signature = (triples, author_cap=500))]
fn ego_networks(
    triples: Vec<(String, String, i32)>,
    author_cap: usize,
) -> Vec<(String, i32, BTreeMap<String, u64>)> {
    let triples = triples.into_iter().map(|(paper_id, author_id, year)| {
        magpie_core::ingest::AuthorshipTriple {
            paper_id,
            author_id,
            affiliation_id: None,
            year,
        }
    });
    let (networks, _) = egonet::build_ego_networks(triples, author_cap);
    networks
        .into_iter()
        .map(|n| (n.ego, n.year, n.alters))
        .collect()
}

/// Country-to-country flow edges from (author, year, country) locations.
///
/// Returns (year, origin, destination, weight, returners, origin_natives,
/// destination_natives) tuples.
#[pyfunction]
#[pyo3(signature = (locations, nationalities=None))]
fn flows(
    locations: Vec<(String, i32, String)>,
    nationalities: Option<HashMap<String, String>>,
) -> Vec<(i32, String, String, u64, u64, u64, u64)> {
    let locations: Vec<mobility::AnnualLocation> = locations
        .into_iter()
        .map(
            |(author_id, year, country_alpha2)| mobility::AnnualLocation {
                author_id,
                year,
                country_alpha2,
            },
        )
        .collect();
    mobility::compute_flows(&locations, &nationalities.unwrap_or_default())
        .into_iter()
        .map(|f| {
            (
                f.year,
                f.origin_alpha2,
                f.destination_alpha2,
                f.weight,
                f.returners,
                f.origin_natives,
                f.destination_natives,
            )
        })
        .collect()
}

/// Stock entries (country, year, stock, located_authors) from locations.
#[pyfunction]
#[pyo3(signature = (locations, nationalities=None))]
fn stocks(
    locations: Vec<(String, i32, String)>,
    nationalities: Option<HashMap<String, String>>,
) -> Vec<(String, i32, u64, u64)> {
    let locations: Vec<mobility::AnnualLocation> = locations
        .into_iter()
        .map(
            |(author_id, year, country_alpha2)| mobility::AnnualLocation {
                author_id,
                year,
                country_alpha2,
            },
        )
        .collect();
    let (entries, _) = mobility::compute_stocks(&locations, &nationalities.unwrap_or_default());
    entries
        .into_iter()
        .map(|s| (s.country_alpha2, s.year, s.stock, s.located_authors))
        .collect()
}

/// Propagates research-area labels down a field-of-study hierarchy.
///
/// `nodes` are (fos_id, level) pairs, `links` are (parent_id, child_id)
/// pairs; returns {fos_id: {area: score}} with empty maps for fields
/// disconnected from every level-0 root.
#[pyfunction]
fn propagate_fos(
    nodes: Vec<(String, u8)>,
    links: Vec<(String, String)>,
) -> PyResult<HashMap<String, BTreeMap<String, f64>>> {
    let rows = nodes
        .into_iter()
        .map(|(fos_id, level)| magpie_core::ingest::FosNodeRow {
            name: fos_id.clone(),
            fos_id,
            level,
        })
        .collect();
    let links = links
        .into_iter()
        .map(|(parent_id, child_id)| magpie_core::ingest::FosChildRow {
            parent_id,
            child_id,
        })
        .collect();
    let dag = fos::FosDag::build(rows, links).map_err(to_py_err)?;
    let labelings = fos::propagate_labels(&dag);
    Ok(labelings.iter().map(|l| (l.fos_id, l.scores)).collect())
}

#[pymodule]
fn magpie_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Gazetteer>()?;
    m.add_class::<Countries>()?;
    m.add_function(wrap_pyfunction!(h_index, m)?)?;
    m.add_function(wrap_pyfunction!(detect_language, m)?)?;
    m.add_function(wrap_pyfunction!(clean_markup, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(parse_infobox, m)?)?;
    m.add_function(wrap_pyfunction!(infobox_fields, m)?)?;
    m.add_function(wrap_pyfunction!(ego_networks, m)?)?;
    m.add_function(wrap_pyfunction!(flows, m)?)?;
    m.add_function(wrap_pyfunction!(stocks, m)?)?;
    m.add_function(wrap_pyfunction!(propagate_fos, m)?)?;
    Ok(())
}
