//! Research-area label propagation over the field-of-study hierarchy.
//!
//! Level-0 fields are the research areas and carry score 1.0 for themselves.
//! Every lower field first inherits its parents' labels, then scores are
//! normalized to proportions summing to 1. Parents carrying fractional
//! scores are combined by summing their score vectors before normalizing,
//! which reduces to tag-count proportion when all parents are roots.

use std::collections::{BTreeMap, HashMap, HashSet};

use crate::error::{Error, Result};
use crate::ingest::{FosChildRow, FosNodeRow, PaperFosRow};

/// A field-of-study node with its (deduplicated) parents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FosNode {
    pub fos_id: String,
    pub name: String,
    pub level: u8,
    pub parents: Vec<String>,
}

/// Counters from DAG assembly.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FosLoadStats {
    pub nodes: u64,
    pub links: u64,
    /// Links referencing an unknown field id, counted and skipped.
    pub dangling_links: u64,
    /// Duplicate (parent, child) links, deduplicated and counted.
    pub duplicate_links: u64,
}

/// Validated field-of-study hierarchy.
pub struct FosDag {
    nodes: Vec<FosNode>,
    index: HashMap<String, usize>,
    stats: FosLoadStats,
}

impl FosDag {
    /// Assembles and validates the hierarchy from node rows and kinship
    /// links. A parent whose level is not strictly lower than its child's is
    /// a fatal validation error (this also excludes cycles); dangling and
    /// duplicate links are counted and skipped.
    pub fn build(rows: Vec<FosNodeRow>, links: Vec<FosChildRow>) -> Result<FosDag> {
        let mut nodes: Vec<FosNode> = Vec::with_capacity(rows.len());
        let mut index: HashMap<String, usize> = HashMap::with_capacity(rows.len());
        for row in rows {
            if index.contains_key(&row.fos_id) {
                return Err(Error::validation(format!(
                    "duplicate field of study id {:?}",
                    row.fos_id
                )));
            }
            index.insert(row.fos_id.clone(), nodes.len());
            nodes.push(FosNode {
                fos_id: row.fos_id,
                name: row.name,
                level: row.level,
                parents: Vec::new(),
            });
        }

        let mut stats = FosLoadStats {
            nodes: nodes.len() as u64,
            links: links.len() as u64,
            ..FosLoadStats::default()
        };
        let mut seen: HashSet<(usize, usize)> = HashSet::new();
        for link in links {
            let (Some(&parent), Some(&child)) =
                (index.get(&link.parent_id), index.get(&link.child_id))
            else {
                stats.dangling_links += 1;
                continue;
            };
            if nodes[parent].level >= nodes[child].level {
                return Err(Error::validation(format!(
                    "level inversion: parent {:?} (level {}) not below child {:?} (level {})",
                    link.parent_id, nodes[parent].level, link.child_id, nodes[child].level
                )));
            }
            if !seen.insert((parent, child)) {
                stats.duplicate_links += 1;
                continue;
            }
            let parent_id = nodes[parent].fos_id.clone();
            nodes[child].parents.push(parent_id);
        }
        Ok(FosDag {
            nodes,
            index,
            stats,
        })
    }

    pub fn load_stats(&self) -> FosLoadStats {
        self.stats
    }

    pub fn nodes(&self) -> &[FosNode] {
        &self.nodes
    }

    pub fn node(&self, fos_id: &str) -> Option<&FosNode> {
        self.index.get(fos_id).map(|&i| &self.nodes[i])
    }
}

/// Per-field research-area scores. Empty for fields disconnected from every
/// level-0 root.
#[derive(Debug, Clone, PartialEq)]
pub struct FosLabeling {
    pub fos_id: String,
    pub scores: BTreeMap<String, f64>,
}

/// All labelings, indexed by field id.
pub struct Labelings {
    by_id: HashMap<String, BTreeMap<String, f64>>,
    order: Vec<String>,
    unlabeled: u64,
}

impl Labelings {
    pub fn scores(&self, fos_id: &str) -> Option<&BTreeMap<String, f64>> {
        self.by_id.get(fos_id)
    }

    /// Fields in input order with their scores.
    pub fn iter(&self) -> impl Iterator<Item = FosLabeling> + '_ {
        self.order.iter().map(|id| FosLabeling {
            fos_id: id.clone(),
            scores: self.by_id[id].clone(),
        })
    }

    /// Fields whose score map came out empty (no labeled ancestor).
    pub fn unlabeled(&self) -> u64 {
        self.unlabeled
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

/// Propagates research-area labels down the hierarchy, level by level.
///
/// Level-0 fields get `{self: 1.0}`. Each lower field sums its parents'
/// score vectors and normalizes the result to sum to 1; fields with no
/// labeled ancestor end up with an empty map and are counted.
pub fn propagate_labels(dag: &FosDag) -> Labelings {
    use rayon::prelude::*;

    let mut by_index: Vec<BTreeMap<String, f64>> = vec![BTreeMap::new(); dag.nodes.len()];
    let mut levels: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, node) in dag.nodes.iter().enumerate() {
        levels.entry(node.level).or_default().push(i);
    }

    for (level, members) in levels {
        if level == 0 {
            for &i in &members {
                by_index[i].insert(dag.nodes[i].fos_id.clone(), 1.0);
            }
            continue;
        }
        // All parents live at strictly lower levels, so the previous rounds
        // already filled their maps; members of one level are independent.
        let computed: Vec<(usize, BTreeMap<String, f64>)> = members
            .par_iter()
            .map(|&i| {
                let mut raw: BTreeMap<String, f64> = BTreeMap::new();
                for parent_id in &dag.nodes[i].parents {
                    let parent = dag.index[parent_id];
                    for (area, score) in &by_index[parent] {
                        *raw.entry(area.clone()).or_insert(0.0) += score;
                    }
                }
                let total: f64 = raw.values().sum();
                if total > 0.0 {
                    for score in raw.values_mut() {
                        *score /= total;
                    }
                }
                (i, raw)
            })
            .collect();
        for (i, scores) in computed {
            by_index[i] = scores;
        }
    }

    let mut by_id = HashMap::with_capacity(dag.nodes.len());
    let mut order = Vec::with_capacity(dag.nodes.len());
    let mut unlabeled = 0;
    for (node, scores) in dag.nodes.iter().zip(by_index) {
        if scores.is_empty() {
            unlabeled += 1;
        }
        order.push(node.fos_id.clone());
        by_id.insert(node.fos_id.clone(), scores);
    }
    Labelings {
        by_id,
        order,
        unlabeled,
    }
}

/// Per-paper research-area scores.
#[derive(Debug, Clone, PartialEq)]
pub struct PaperAreaScores {
    pub paper_id: String,
    pub scores: BTreeMap<String, f64>,
}

/// Counters from paper scoring.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ScoreStats {
    pub links_in: u64,
    pub papers: u64,
    /// Links to unknown field ids, sent to the reject channel.
    pub rejected_links: u64,
    /// Papers linked only to unlabeled fields (empty score map).
    pub unscored_papers: u64,
}

/// Scores papers by research area from their field links.
///
/// Per paper: sum the labeled score vectors of its linked fields, then
/// divide by the grand total. Links to unknown fields go to `on_reject`.
/// Returns papers sorted by id.
pub fn score_papers<I>(
    links: I,
    labelings: &Labelings,
    mut on_reject: impl FnMut(&PaperFosRow),
) -> (Vec<PaperAreaScores>, ScoreStats)
where
    I: IntoIterator<Item = PaperFosRow>,
{
    let mut stats = ScoreStats::default();
    let mut raw: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for link in links {
        stats.links_in += 1;
        let Some(scores) = labelings.scores(&link.fos_id) else {
            stats.rejected_links += 1;
            on_reject(&link);
            continue;
        };
        let entry = raw.entry(link.paper_id.clone()).or_default();
        for (area, score) in scores {
            *entry.entry(area.clone()).or_insert(0.0) += score;
        }
    }

    let mut out = Vec::with_capacity(raw.len());
    for (paper_id, mut scores) in raw {
        let total: f64 = scores.values().sum();
        if total > 0.0 {
            for score in scores.values_mut() {
                *score /= total;
            }
        } else {
            stats.unscored_papers += 1;
            scores.clear();
        }
        out.push(PaperAreaScores { paper_id, scores });
    }
    stats.papers = out.len() as u64;
    (out, stats)
}
