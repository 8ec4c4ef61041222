//! Annual weighted co-authorship ego networks.
//!
//! Two scholars are connected in a year when they authored a paper together
//! that year; the link weight is the number of shared publications. Every
//! author-year with at least one usable paper gets an ego network, possibly
//! with no alters (single-author papers).

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::ingest::AuthorshipTriple;

/// Papers with more distinct authors than this are excluded (and counted)
/// to avoid quadratic blowup from consortium papers.
pub const DEFAULT_AUTHOR_CAP: usize = 500;

/// One author's co-authorship neighborhood in one year.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EgoNetwork {
    pub ego: String,
    pub year: i32,
    /// Co-author id -> number of shared papers that year.
    pub alters: BTreeMap<String, u64>,
}

/// Counters from ego-network construction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EgoStats {
    pub papers: u64,
    /// Papers over the author cap, excluded entirely.
    pub excluded_papers: u64,
    /// Duplicate (paper, author) rows collapsed (multi-affiliation listings).
    pub duplicate_authorships: u64,
}

/// Builds all ego networks from joined triples, sorted by (ego, year).
///
/// Multiple affiliation rows for the same (paper, author) count once. Papers
/// with more than `author_cap` distinct authors contribute nothing and are
/// counted in the stats.
pub fn build_ego_networks(
    triples: impl IntoIterator<Item = AuthorshipTriple>,
    author_cap: usize,
) -> (Vec<EgoNetwork>, EgoStats) {
    let mut stats = EgoStats::default();

    // paper -> (year, distinct authors in first-seen order)
    let mut papers: HashMap<String, (i32, Vec<String>, HashSet<String>)> = HashMap::new();
    for triple in triples {
        let slot = papers
            .entry(triple.paper_id)
            .or_insert_with(|| (triple.year, Vec::new(), HashSet::new()));
        if slot.2.insert(triple.author_id.clone()) {
            slot.1.push(triple.author_id);
        } else {
            stats.duplicate_authorships += 1;
        }
    }
    stats.papers = papers.len() as u64;

    let mut networks: HashMap<(String, i32), BTreeMap<String, u64>> = HashMap::new();
    for (_paper, (year, authors, _)) in papers {
        if authors.len() > author_cap {
            stats.excluded_papers += 1;
            continue;
        }
        for author in &authors {
            networks.entry((author.clone(), year)).or_default();
        }
        for i in 0..authors.len() {
            for j in (i + 1)..authors.len() {
                *networks
                    .get_mut(&(authors[i].clone(), year))
                    .unwrap()
                    .entry(authors[j].clone())
                    .or_insert(0) += 1;
                *networks
                    .get_mut(&(authors[j].clone(), year))
                    .unwrap()
                    .entry(authors[i].clone())
                    .or_insert(0) += 1;
            }
        }
    }

    let mut out: Vec<EgoNetwork> = networks
        .into_iter()
        .map(|((ego, year), alters)| EgoNetwork { ego, year, alters })
        .collect();
    out.sort_unstable_by(|a, b| (&a.ego, a.year).cmp(&(&b.ego, b.year)));
    (out, stats)
}
