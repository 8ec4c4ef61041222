//! Geolocated author careers and the mobility datasets derived from them:
//! annual locations, career nationalities, stocks, and flow graphs.
//!
//! The underlying hypothesis is that authors live where they are affiliated.
//! An author's annual location is the most frequent country among the
//! locations of that year's publications; the career nationality is the
//! country of the first geolocated institution of the career. Stocks count
//! non-working-native authors located in a country; flows connect
//! consecutive observed locations, attributed to the arrival year.
//!
//! Both tie-breaks (modal country and first geolocated institution) use
//! paper-id-ascending entry order: the dump-stable choice.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::ingest::AuthorshipTriple;

/// One publication entry inside a career year.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CareerEntry {
    pub paper_id: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub affiliation_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub country_alpha2: Option<String>,
}

/// One author-year with its publication entries, ordered by paper id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CareerYear {
    pub author_id: String,
    pub year: i32,
    pub entries: Vec<CareerEntry>,
}

/// A whole career keyed by year; the JSON Lines output shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthorCareer {
    pub author_id: String,
    pub years: BTreeMap<i32, Vec<CareerEntry>>,
}

impl AuthorCareer {
    pub fn career_years(&self) -> impl Iterator<Item = CareerYear> + '_ {
        self.years.iter().map(|(year, entries)| CareerYear {
            author_id: self.author_id.clone(),
            year: *year,
            entries: entries.clone(),
        })
    }
}

/// The modal country of an author's publications in one year.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnualLocation {
    pub author_id: String,
    pub year: i32,
    pub country_alpha2: String,
}

/// Country of the first geolocated institution over a career.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CareerNationality {
    pub author_id: String,
    pub country_alpha2: String,
    pub established_year: i32,
}

/// Authors located in a country in a year, and how many are working
/// migrants (career nationality differs from the country).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StockEntry {
    pub country_alpha2: String,
    pub year: i32,
    pub stock: u64,
    pub located_authors: u64,
}

/// Aggregated movements between two countries in one year.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowEdge {
    pub year: i32,
    pub origin_alpha2: String,
    pub destination_alpha2: String,
    pub weight: u64,
    /// Movers located in the destination for at least the second time.
    pub returners: u64,
    /// Movers leaving their working-native country.
    pub origin_natives: u64,
    /// Movers returning to their working-native country.
    pub destination_natives: u64,
}

/// Per-country totals of one year's flows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountryFlowTotals {
    pub year: i32,
    pub country_alpha2: String,
    pub total_in: u64,
    pub total_out: u64,
}

/// Groups joined triples into careers, attaching each entry's country from
/// the affiliation geolocation map. Output is sorted by author and year;
/// entries are ordered by (paper id, affiliation id).
pub fn build_careers(
    triples: impl IntoIterator<Item = AuthorshipTriple>,
    geo: &HashMap<String, String>,
) -> Vec<CareerYear> {
    let mut rows: Vec<(String, i32, CareerEntry)> = triples
        .into_iter()
        .map(|t| {
            let country = t
                .affiliation_id
                .as_deref()
                .and_then(|aff| geo.get(aff))
                .cloned();
            (
                t.author_id,
                t.year,
                CareerEntry {
                    paper_id: t.paper_id,
                    affiliation_id: t.affiliation_id,
                    country_alpha2: country,
                },
            )
        })
        .collect();
    rows.sort_unstable_by(|a, b| {
        (&a.0, a.1, &a.2.paper_id, &a.2.affiliation_id).cmp(&(
            &b.0,
            b.1,
            &b.2.paper_id,
            &b.2.affiliation_id,
        ))
    });

    let mut out: Vec<CareerYear> = Vec::new();
    for (author_id, year, entry) in rows {
        match out.last_mut() {
            Some(last) if last.author_id == author_id && last.year == year => {
                last.entries.push(entry);
            }
            _ => out.push(CareerYear {
                author_id,
                year,
                entries: vec![entry],
            }),
        }
    }
    out
}

/// Groups career years into whole careers, keyed by author.
pub fn group_careers(career_years: Vec<CareerYear>) -> Vec<AuthorCareer> {
    let mut out: Vec<AuthorCareer> = Vec::new();
    for cy in career_years {
        match out.last_mut() {
            Some(last) if last.author_id == cy.author_id => {
                last.years.entry(cy.year).or_default().extend(cy.entries);
            }
            _ => {
                let mut years = BTreeMap::new();
                years.insert(cy.year, cy.entries);
                out.push(AuthorCareer {
                    author_id: cy.author_id,
                    years,
                });
            }
        }
    }
    out
}

/// Most frequent country among the year's geolocated entries; `None` when
/// nothing is geolocated. A frequency tie goes to the country of the
/// earliest entry (paper-id order) among the tied ones.
pub fn annual_location(career_year: &CareerYear) -> Option<AnnualLocation> {
    let mut counts: HashMap<&str, (u64, usize)> = HashMap::new();
    for (position, entry) in career_year.entries.iter().enumerate() {
        let Some(country) = entry.country_alpha2.as_deref() else {
            continue;
        };
        let slot = counts.entry(country).or_insert((0, position));
        slot.0 += 1;
    }
    let (country, _) = counts
        .into_iter()
        .max_by(|(_, (ca, pa)), (_, (cb, pb))| ca.cmp(cb).then(pb.cmp(pa)))?;
    Some(AnnualLocation {
        author_id: career_year.author_id.clone(),
        year: career_year.year,
        country_alpha2: country.to_string(),
    })
}

/// Country of the first geolocated entry in the earliest year that has one.
///
/// Expects the career years sorted ascending (as produced by
/// [`build_careers`] / [`AuthorCareer`]). Returns `None` for careers that
/// were never geolocated.
pub fn career_nationality(career_years: &[CareerYear]) -> Option<CareerNationality> {
    for cy in career_years {
        if let Some(entry) = cy.entries.iter().find(|e| e.country_alpha2.is_some()) {
            return Some(CareerNationality {
                author_id: cy.author_id.clone(),
                country_alpha2: entry.country_alpha2.clone().unwrap(),
                established_year: cy.year,
            });
        }
    }
    None
}

/// Counters from stock computation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StockStats {
    /// Author-year locations whose author has no career nationality;
    /// excluded from stock but counted in located_authors.
    pub no_nationality_located: u64,
}

/// Counts located authors and working migrants per (country, year).
///
/// Working natives (career nationality equals the country) and authors with
/// no nationality are excluded from the stock but counted as located.
pub fn compute_stocks(
    locations: &[AnnualLocation],
    nationalities: &HashMap<String, String>,
) -> (Vec<StockEntry>, StockStats) {
    let mut stats = StockStats::default();
    let mut cells: BTreeMap<(&str, i32), (u64, u64)> = BTreeMap::new();
    for loc in locations {
        let cell = cells
            .entry((loc.country_alpha2.as_str(), loc.year))
            .or_insert((0, 0));
        cell.1 += 1;
        match nationalities.get(&loc.author_id) {
            Some(native) if *native != loc.country_alpha2 => cell.0 += 1,
            Some(_) => {}
            None => stats.no_nationality_located += 1,
        }
    }
    let entries = cells
        .into_iter()
        .map(|((country, year), (stock, located))| StockEntry {
            country_alpha2: country.to_string(),
            year,
            stock,
            located_authors: located,
        })
        .collect();
    (entries, stats)
}

/// One country change of one author, before aggregation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Movement {
    pub author_id: String,
    pub year: i32,
    pub origin_alpha2: String,
    pub destination_alpha2: String,
    pub returner: bool,
    pub origin_native: bool,
    pub destination_native: bool,
}

/// Emits one movement per country change between consecutive observed
/// locations (gap years imply no movement). The movement is attributed to
/// the arrival year; a returner has been located in the destination country
/// in any earlier year.
pub fn author_movements(
    locations_by_year: &[AnnualLocation],
    nationality: Option<&str>,
) -> Vec<Movement> {
    let mut sorted: Vec<&AnnualLocation> = locations_by_year.iter().collect();
    sorted.sort_by_key(|l| l.year);
    let mut movements = Vec::new();
    for pair in sorted.windows(2) {
        let (from, to) = (pair[0], pair[1]);
        if from.country_alpha2 == to.country_alpha2 {
            continue;
        }
        let returner = sorted
            .iter()
            .any(|l| l.year < to.year && l.country_alpha2 == to.country_alpha2);
        movements.push(Movement {
            author_id: to.author_id.clone(),
            year: to.year,
            origin_alpha2: from.country_alpha2.clone(),
            destination_alpha2: to.country_alpha2.clone(),
            returner,
            origin_native: nationality == Some(from.country_alpha2.as_str()),
            destination_native: nationality == Some(to.country_alpha2.as_str()),
        });
    }
    movements
}

/// Aggregates all authors' movements into per-(year, origin, destination)
/// flow edges, sorted by that key.
pub fn compute_flows(
    locations: &[AnnualLocation],
    nationalities: &HashMap<String, String>,
) -> Vec<FlowEdge> {
    let mut by_author: BTreeMap<&str, Vec<AnnualLocation>> = BTreeMap::new();
    for loc in locations {
        by_author
            .entry(loc.author_id.as_str())
            .or_default()
            .push(loc.clone());
    }

    // (year, origin, destination) -> (weight, returners, origin/destination natives)
    type EdgeKey = (i32, String, String);
    let mut edges: BTreeMap<EdgeKey, (u64, u64, u64, u64)> = BTreeMap::new();
    for (author_id, locs) in by_author {
        let nationality = nationalities.get(author_id).map(String::as_str);
        for m in author_movements(&locs, nationality) {
            let slot = edges
                .entry((m.year, m.origin_alpha2, m.destination_alpha2))
                .or_insert((0, 0, 0, 0));
            slot.0 += 1;
            slot.1 += u64::from(m.returner);
            slot.2 += u64::from(m.origin_native);
            slot.3 += u64::from(m.destination_native);
        }
    }

    edges
        .into_iter()
        .map(
            |((year, origin, destination), (weight, returners, on, dn))| FlowEdge {
                year,
                origin_alpha2: origin,
                destination_alpha2: destination,
                weight,
                returners,
                origin_natives: on,
                destination_natives: dn,
            },
        )
        .collect()
}

/// Per-country inflow/outflow totals from aggregated flow edges, sorted by
/// (year, country).
pub fn aggregate_country_flows(flows: &[FlowEdge]) -> Vec<CountryFlowTotals> {
    let mut totals: BTreeMap<(i32, &str), (u64, u64)> = BTreeMap::new();
    for edge in flows {
        totals
            .entry((edge.year, edge.destination_alpha2.as_str()))
            .or_insert((0, 0))
            .0 += edge.weight;
        totals
            .entry((edge.year, edge.origin_alpha2.as_str()))
            .or_insert((0, 0))
            .1 += edge.weight;
    }
    totals
        .into_iter()
        .map(
            |((year, country), (total_in, total_out))| CountryFlowTotals {
                year,
                country_alpha2: country.to_string(),
                total_in,
                total_out,
            },
        )
        .collect()
}
