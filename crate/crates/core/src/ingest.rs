//! Streaming ingestion of raw dump subsets and the paper-year join.
//!
//! Raw dumps are headerless tab-separated files, one record per line;
//! enriched outputs are comma-separated with a header row. Malformed lines
//! are never silently dropped: they are counted, optionally written to a
//! `<subset>.rejects.tsv` sink, and the stream continues. Invalid UTF-8 is
//! replaced and counted.
//!
//! The paper-id to year join keeps its index in memory while it fits the
//! configured budget and otherwise falls back to hash-partitioned spill
//! files; the spilled path replays events in exact input order (a k-way
//! merge by input ordinal), so both paths produce identical output.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geocode::AffiliationRecord;

/// Canonical subset names used in manifests.
pub mod subsets {
    pub const PAPERS: &str = "papers";
    pub const AUTHORS: &str = "authors";
    pub const TRIPLES: &str = "paper_author_affiliations";
    pub const AFFILIATIONS: &str = "affiliations";
    pub const FIELDS_OF_STUDY: &str = "fields_of_study";
    pub const FOS_CHILDREN: &str = "field_of_study_children";
    pub const PAPER_FOS: &str = "paper_fields_of_study";
    pub const ABSTRACTS: &str = "abstracts";
    pub const INFOBOXES: &str = "infoboxes";
    pub const GAZETTEER: &str = "gazetteer";
    pub const COUNTRIES: &str = "countries";
    pub const TERRITORIES: &str = "territories";
}

/// On-disk layout of one subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubsetFormat {
    /// Headerless tab-separated text (raw-dump mode).
    RawTsv,
    /// Comma-separated with a header row (enriched-CSV mode).
    HeaderedCsv,
}

#[derive(Debug, Clone)]
pub struct SubsetEntry {
    pub path: PathBuf,
    pub format: SubsetFormat,
}

/// Maps subset names to files. Loaded from a `key = path` listing; a
/// `key.format = csv` line switches a subset to enriched-CSV mode.
#[derive(Debug, Clone)]
pub struct DumpManifest {
    entries: BTreeMap<String, SubsetEntry>,
}

impl DumpManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, dir)
    }

    fn parse(text: &str, dir: &Path) -> Result<Self> {
        let mut paths: BTreeMap<String, PathBuf> = BTreeMap::new();
        let mut formats: BTreeMap<String, SubsetFormat> = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::input(format!(
                    "manifest line {}: expected `key = path`",
                    lineno + 1
                ))
            })?;
            let key = key.trim();
            let value = value.trim();
            if let Some(subset) = key.strip_suffix(".format") {
                let format = match value {
                    "tsv" => SubsetFormat::RawTsv,
                    "csv" => SubsetFormat::HeaderedCsv,
                    other => {
                        return Err(Error::input(format!(
                            "manifest line {}: unknown format {other:?} (expected tsv or csv)",
                            lineno + 1
                        )))
                    }
                };
                formats.insert(subset.trim().to_string(), format);
            } else {
                let mut p = PathBuf::from(value);
                if p.is_relative() {
                    p = dir.join(p);
                }
                paths.insert(key.to_string(), p);
            }
        }
        let mut entries = BTreeMap::new();
        for (subset, path) in paths {
            if !path.is_file() {
                return Err(Error::input(format!(
                    "manifest subset {subset:?}: file {} does not exist",
                    path.display()
                )));
            }
            let format = formats
                .get(&subset)
                .copied()
                .unwrap_or(SubsetFormat::RawTsv);
            entries.insert(subset, SubsetEntry { path, format });
        }
        for subset in formats.keys() {
            if !entries.contains_key(subset) {
                return Err(Error::input(format!(
                    "manifest sets a format for {subset:?} but no path"
                )));
            }
        }
        Ok(DumpManifest { entries })
    }

    pub fn subset(&self, name: &str) -> Result<&SubsetEntry> {
        self.entries.get(name).ok_or_else(|| {
            Error::input(format!(
                "manifest has no {name:?} subset; add `{name} = <path>`"
            ))
        })
    }

    pub fn has(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn subset_names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

/// Counters for one record stream.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StreamStats {
    /// Data lines seen (header excluded in CSV mode).
    pub lines: u64,
    /// Well-formed records yielded.
    pub records: u64,
    /// Lines rejected as malformed.
    pub malformed: u64,
    /// Lines that contained invalid UTF-8 (bytes replaced).
    pub utf8_replacements: u64,
}

/// A record type parseable from one dump line.
pub trait DumpRecord: Sized {
    /// Canonical subset name in the manifest.
    const SUBSET: &'static str;
    /// Accepted field counts; anything else is a malformed line.
    const ARITY: RangeInclusive<usize>;

    fn parse(fields: &[&str]) -> std::result::Result<Self, String>;
}

enum LineSource {
    Tsv(BufReader<File>),
    Csv(csv::Reader<File>),
}

/// Streaming reader for one subset: yields well-formed records, counts and
/// optionally sinks malformed lines, never fails on bad data (only on i/o).
pub struct RecordStream<T: DumpRecord> {
    source: LineSource,
    path: PathBuf,
    stats: StreamStats,
    rejects: RejectSink,
    buf: Vec<u8>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: DumpRecord> RecordStream<T> {
    /// Opens the stream for `T`'s subset as declared in the manifest.
    pub fn open(manifest: &DumpManifest) -> Result<Self> {
        let entry = manifest.subset(T::SUBSET)?;
        Self::open_path(&entry.path, entry.format)
    }

    /// Like [`open`](Self::open) with a sink for rejected lines.
    pub fn open_with_rejects(manifest: &DumpManifest, rejects: RejectSink) -> Result<Self> {
        let entry = manifest.subset(T::SUBSET)?;
        let mut stream = Self::open_path(&entry.path, entry.format)?;
        stream.rejects = rejects;
        Ok(stream)
    }

    pub fn open_path(path: &Path, format: SubsetFormat) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let source = match format {
            SubsetFormat::RawTsv => LineSource::Tsv(BufReader::with_capacity(1 << 16, file)),
            SubsetFormat::HeaderedCsv => LineSource::Csv(
                csv::ReaderBuilder::new()
                    .has_headers(true)
                    .flexible(true)
                    .from_reader(file),
            ),
        };
        Ok(RecordStream {
            source,
            path: path.to_path_buf(),
            stats: StreamStats::default(),
            rejects: RejectSink::none(),
            buf: Vec::new(),
            _marker: std::marker::PhantomData,
        })
    }

    pub fn stats(&self) -> StreamStats {
        self.stats
    }

    /// The reject sink, e.g. to append domain-level rejects (join losses)
    /// after the stream has been drained.
    pub fn reject_sink_mut(&mut self) -> &mut RejectSink {
        &mut self.rejects
    }

    /// Next well-formed record, or `None` at end of input.
    pub fn next_record(&mut self) -> Result<Option<T>> {
        loop {
            let line = match self.read_line()? {
                Some(line) => line,
                None => {
                    self.rejects.flush()?;
                    return Ok(None);
                }
            };
            self.stats.lines += 1;
            if line.replaced_utf8 {
                self.stats.utf8_replacements += 1;
            }
            let fields: Vec<&str> = line.fields.iter().map(String::as_str).collect();
            if !T::ARITY.contains(&fields.len()) {
                self.reject(&line, "arity mismatch")?;
                continue;
            }
            match T::parse(&fields) {
                Ok(record) => {
                    self.stats.records += 1;
                    return Ok(Some(record));
                }
                Err(reason) => {
                    self.reject(&line, &reason)?;
                }
            }
        }
    }

    fn reject(&mut self, line: &RawLine, _reason: &str) -> Result<()> {
        self.stats.malformed += 1;
        self.rejects.write(&line.verbatim)
    }

    fn read_line(&mut self) -> Result<Option<RawLine>> {
        match &mut self.source {
            LineSource::Tsv(reader) => {
                self.buf.clear();
                let n = reader
                    .read_until(b'\n', &mut self.buf)
                    .map_err(|e| Error::io(&self.path, e))?;
                if n == 0 {
                    return Ok(None);
                }
                while matches!(self.buf.last(), Some(b'\n') | Some(b'\r')) {
                    self.buf.pop();
                }
                let text = String::from_utf8_lossy(&self.buf);
                let replaced = matches!(text, std::borrow::Cow::Owned(_));
                let text = text.into_owned();
                Ok(Some(RawLine {
                    fields: text.split('\t').map(String::from).collect(),
                    verbatim: text,
                    replaced_utf8: replaced,
                }))
            }
            LineSource::Csv(reader) => {
                let mut record = csv::ByteRecord::new();
                let more = reader
                    .read_byte_record(&mut record)
                    .map_err(|e| Error::input(format!("{}: {e}", self.path.display())))?;
                if !more {
                    return Ok(None);
                }
                let mut replaced = false;
                let fields: Vec<String> = record
                    .iter()
                    .map(|f| {
                        let text = String::from_utf8_lossy(f);
                        replaced |= matches!(text, std::borrow::Cow::Owned(_));
                        text.into_owned()
                    })
                    .collect();
                Ok(Some(RawLine {
                    verbatim: fields.join(","),
                    fields,
                    replaced_utf8: replaced,
                }))
            }
        }
    }

    /// Drains the stream into memory.
    pub fn collect_all(&mut self) -> Result<Vec<T>> {
        let mut out = Vec::new();
        while let Some(record) = self.next_record()? {
            out.push(record);
        }
        Ok(out)
    }
}

impl<T: DumpRecord> Iterator for RecordStream<T> {
    type Item = Result<T>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_record().transpose()
    }
}

struct RawLine {
    fields: Vec<String>,
    verbatim: String,
    replaced_utf8: bool,
}

/// Optional sink for rejected lines, created lazily on the first reject.
pub struct RejectSink {
    path: Option<PathBuf>,
    writer: Option<BufWriter<File>>,
    pub written: u64,
}

impl RejectSink {
    pub fn none() -> Self {
        RejectSink {
            path: None,
            writer: None,
            written: 0,
        }
    }

    /// Rejects will go to `<dir>/<subset>.rejects.tsv`.
    pub fn for_subset(dir: &Path, subset: &str) -> Self {
        RejectSink {
            path: Some(dir.join(format!("{subset}.rejects.tsv"))),
            writer: None,
            written: 0,
        }
    }

    pub fn write(&mut self, line: &str) -> Result<()> {
        let Some(path) = &self.path else {
            self.written += 1;
            return Ok(());
        };
        if self.writer.is_none() {
            let file = File::create(path).map_err(|e| Error::io(path, e))?;
            self.writer = Some(BufWriter::new(file));
        }
        let writer = self.writer.as_mut().unwrap();
        writer
            .write_all(line.as_bytes())
            .and_then(|_| writer.write_all(b"\n"))
            .map_err(|e| Error::io(path, e))?;
        self.written += 1;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let (Some(writer), Some(path)) = (self.writer.as_mut(), self.path.as_ref()) {
            writer.flush().map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

fn require_id(field: &str, what: &str) -> std::result::Result<String, String> {
    let id = field.trim();
    if id.is_empty() {
        return Err(format!("empty {what}"));
    }
    if id.contains(['\t', '\n', '\r']) {
        return Err(format!("{what} contains control characters"));
    }
    Ok(id.to_string())
}

fn optional_id(field: &str) -> std::result::Result<Option<String>, String> {
    let id = field.trim();
    if id.is_empty() {
        return Ok(None);
    }
    require_id(field, "identifier").map(Some)
}

fn parse_count(field: &str, what: &str) -> std::result::Result<u64, String> {
    let trimmed = field.trim();
    if trimmed.is_empty() {
        return Ok(0);
    }
    trimmed
        .parse::<u64>()
        .map_err(|_| format!("bad {what} {trimmed:?}"))
}

/// Publication document type.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum DocType {
    Journal,
    Patent,
    Conference,
    Book,
    BookChapter,
    #[default]
    None,
}

impl DocType {
    pub fn parse(text: &str) -> Self {
        match text.trim().to_lowercase().replace(['_', ' '], "").as_str() {
            "journal" => DocType::Journal,
            "patent" => DocType::Patent,
            "conference" => DocType::Conference,
            "book" => DocType::Book,
            "bookchapter" => DocType::BookChapter,
            _ => DocType::None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            DocType::Journal => "journal",
            DocType::Patent => "patent",
            DocType::Conference => "conference",
            DocType::Book => "book",
            DocType::BookChapter => "book_chapter",
            DocType::None => "",
        }
    }
}

/// One publication. Rank and family id are pass-through fields.
#[derive(Debug, Clone, PartialEq)]
pub struct PaperRecord {
    pub paper_id: String,
    pub year: Option<i32>,
    pub doc_type: DocType,
    pub citation_count: u64,
    pub reference_count: u64,
    pub venue_id: Option<String>,
    pub rank: Option<i64>,
    pub family_id: Option<String>,
}

impl DumpRecord for PaperRecord {
    const SUBSET: &'static str = subsets::PAPERS;
    const ARITY: RangeInclusive<usize> = 8..=8;

    fn parse(fields: &[&str]) -> std::result::Result<Self, String> {
        let year = match fields[1].trim() {
            "" => None,
            text => {
                let year: i32 = text.parse().map_err(|_| format!("bad year {text:?}"))?;
                if !(1800..=2100).contains(&year) {
                    return Err(format!("year {year} outside [1800, 2100]"));
                }
                Some(year)
            }
        };
        Ok(PaperRecord {
            paper_id: require_id(fields[0], "paper_id")?,
            year,
            doc_type: DocType::parse(fields[2]),
            citation_count: parse_count(fields[3], "citation_count")?,
            reference_count: parse_count(fields[4], "reference_count")?,
            venue_id: optional_id(fields[5])?,
            rank: match fields[6].trim() {
                "" => None,
                text => Some(text.parse().map_err(|_| format!("bad rank {text:?}"))?),
            },
            family_id: optional_id(fields[7])?,
        })
    }
}

/// One author row.
#[derive(Debug, Clone, PartialEq)]
pub struct AuthorRecord {
    pub author_id: String,
    pub display_name: String,
    pub last_known_affiliation: Option<String>,
    pub paper_count: u64,
    pub citation_count: u64,
}

impl DumpRecord for AuthorRecord {
    const SUBSET: &'static str = subsets::AUTHORS;
    const ARITY: RangeInclusive<usize> = 5..=5;

    fn parse(fields: &[&str]) -> std::result::Result<Self, String> {
        Ok(AuthorRecord {
            author_id: require_id(fields[0], "author_id")?,
            display_name: fields[1].trim().to_string(),
            last_known_affiliation: optional_id(fields[2])?,
            paper_count: parse_count(fields[3], "paper_count")?,
            citation_count: parse_count(fields[4], "citation_count")?,
        })
    }
}

/// One authorship link before the year join.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripleRecord {
    pub paper_id: String,
    pub author_id: String,
    pub affiliation_id: Option<String>,
}

impl DumpRecord for TripleRecord {
    const SUBSET: &'static str = subsets::TRIPLES;
    const ARITY: RangeInclusive<usize> = 3..=3;

    fn parse(fields: &[&str]) -> std::result::Result<Self, String> {
        Ok(TripleRecord {
            paper_id: require_id(fields[0], "paper_id")?,
            author_id: require_id(fields[1], "author_id")?,
            affiliation_id: optional_id(fields[2])?,
        })
    }
}

impl DumpRecord for AffiliationRecord {
    const SUBSET: &'static str = subsets::AFFILIATIONS;
    const ARITY: RangeInclusive<usize> = 5..=5;

    fn parse(fields: &[&str]) -> std::result::Result<Self, String> {
        let parse_coord = |text: &str, what: &str, range: RangeInclusive<f64>| {
            let trimmed = text.trim();
            if trimmed.is_empty() {
                return Ok(None);
            }
            let v: f64 = trimmed
                .parse()
                .map_err(|_| format!("bad {what} {trimmed:?}"))?;
            if !v.is_finite() || !range.contains(&v) {
                return Err(format!("{what} {v} out of range"));
            }
            Ok(Some(v))
        };
        let latitude = parse_coord(fields[2], "latitude", -90.0..=90.0)?;
        let longitude = parse_coord(fields[3], "longitude", -180.0..=180.0)?;
        if latitude.is_some() != longitude.is_some() {
            return Err("latitude and longitude must both be present or both empty".to_string());
        }
        Ok(AffiliationRecord {
            affiliation_id: require_id(fields[0], "affiliation_id")?,
            name: fields[1].trim().to_string(),
            latitude,
            longitude,
            wiki_url: {
                let url = fields[4].trim();
                (!url.is_empty()).then(|| url.to_string())
            },
        })
    }
}

/// Field-of-study node row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FosNodeRow {
    pub fos_id: String,
    pub name: String,
    pub level: u8,
}

impl DumpRecord for FosNodeRow {
    const SUBSET: &'static str = subsets::FIELDS_OF_STUDY;
    const ARITY: RangeInclusive<usize> = 3..=3;

    fn parse(fields: &[&str]) -> std::result::Result<Self, String> {
        let level: u8 = fields[2]
            .trim()
            .parse()
            .map_err(|_| format!("bad level {:?}", fields[2]))?;
        if level > 5 {
            return Err(format!("level {level} outside [0, 5]"));
        }
        Ok(FosNodeRow {
            fos_id: require_id(fields[0], "fos_id")?,
            name: fields[1].trim().to_string(),
            level,
        })
    }
}

/// Field-of-study kinship row (parent, child).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FosChildRow {
    pub parent_id: String,
    pub child_id: String,
}

impl DumpRecord for FosChildRow {
    const SUBSET: &'static str = subsets::FOS_CHILDREN;
    const ARITY: RangeInclusive<usize> = 2..=2;

    fn parse(fields: &[&str]) -> std::result::Result<Self, String> {
        Ok(FosChildRow {
            parent_id: require_id(fields[0], "parent_id")?,
            child_id: require_id(fields[1], "child_id")?,
        })
    }
}

/// Paper to field-of-study link. A third confidence column, when present,
/// is ignored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaperFosRow {
    pub paper_id: String,
    pub fos_id: String,
}

impl DumpRecord for PaperFosRow {
    const SUBSET: &'static str = subsets::PAPER_FOS;
    const ARITY: RangeInclusive<usize> = 2..=3;

    fn parse(fields: &[&str]) -> std::result::Result<Self, String> {
        Ok(PaperFosRow {
            paper_id: require_id(fields[0], "paper_id")?,
            fos_id: require_id(fields[1], "fos_id")?,
        })
    }
}

/// Raw abstract row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AbstractRow {
    pub paper_id: String,
    pub text: String,
}

impl DumpRecord for AbstractRow {
    const SUBSET: &'static str = subsets::ABSTRACTS;
    const ARITY: RangeInclusive<usize> = 2..=2;

    fn parse(fields: &[&str]) -> std::result::Result<Self, String> {
        Ok(AbstractRow {
            paper_id: require_id(fields[0], "paper_id")?,
            text: fields[1].to_string(),
        })
    }
}

/// An authorship link joined with its paper's publication year.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuthorshipTriple {
    pub paper_id: String,
    pub author_id: String,
    pub affiliation_id: Option<String>,
    pub year: i32,
}

/// Why a triple was sent to the rejects channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JoinReject {
    /// No paper record for the triple's paper id (matching loss).
    NoPaper,
    /// The paper exists but has no publication year.
    NoYear,
}

/// Counters for one join run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct JoinStats {
    pub triples_in: u64,
    pub joined: u64,
    pub rejected_no_paper: u64,
    pub rejected_no_year: u64,
    pub spilled: bool,
}

impl JoinStats {
    pub fn rejects(&self) -> u64 {
        self.rejected_no_paper + self.rejected_no_year
    }
}

/// Tuning for [`join_triples_with_years`].
#[derive(Debug, Clone)]
pub struct JoinOptions {
    /// Approximate in-memory budget for the paper-year index, in bytes.
    pub memory_budget_bytes: u64,
    /// Where spill partition files go; a temp dir is created when unset.
    pub spill_dir: Option<PathBuf>,
    /// Number of hash partitions in spill mode.
    pub partitions: usize,
}

impl Default for JoinOptions {
    fn default() -> Self {
        JoinOptions {
            memory_budget_bytes: 512 << 20,
            spill_dir: None,
            partitions: 16,
        }
    }
}

// Rough per-entry overhead of the in-memory index (hash bucket + lengths).
const INDEX_ENTRY_OVERHEAD: u64 = 48;

fn fnv1a64(data: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &byte in data {
        hash ^= u64::from(byte);
        hash = hash.wrapping_mul(0x1_0000_0000_01b3);
    }
    hash
}

/// Joins authorship triples with their papers' publication years.
///
/// Every input triple is delivered exactly once, in input order, either to
/// `emit` (year populated) or to `reject`. The papers stream is indexed
/// first; when the index exceeds the memory budget both sides are hash
/// partitioned to disk and joined partition-wise (grace join), then replayed
/// in input order.
pub fn join_triples_with_years<E, R>(
    triples: &mut RecordStream<TripleRecord>,
    papers: &mut RecordStream<PaperRecord>,
    options: &JoinOptions,
    mut emit: E,
    mut reject: R,
) -> Result<JoinStats>
where
    E: FnMut(AuthorshipTriple) -> Result<()>,
    R: FnMut(&TripleRecord, JoinReject) -> Result<()>,
{
    let mut stats = JoinStats::default();

    // Phase 1: index papers, spilling if the budget is exceeded.
    let mut index: HashMap<String, Option<i32>> = HashMap::new();
    let mut index_bytes = 0u64;
    let mut spill: Option<SpillState> = None;
    while let Some(paper) = papers.next_record()? {
        if let Some(spill) = spill.as_mut() {
            spill.write_paper(&paper.paper_id, paper.year)?;
            continue;
        }
        index_bytes += paper.paper_id.len() as u64 + INDEX_ENTRY_OVERHEAD;
        index.insert(paper.paper_id, paper.year);
        if index_bytes > options.memory_budget_bytes {
            let mut state = SpillState::create(options)?;
            for (id, year) in index.drain() {
                state.write_paper(&id, year)?;
            }
            index_bytes = 0;
            spill = Some(state);
        }
    }

    match spill {
        None => {
            // In-memory path: stream triples straight through.
            while let Some(triple) = triples.next_record()? {
                stats.triples_in += 1;
                match index.get(&triple.paper_id) {
                    Some(Some(year)) => {
                        stats.joined += 1;
                        emit(AuthorshipTriple {
                            year: *year,
                            paper_id: triple.paper_id,
                            author_id: triple.author_id,
                            affiliation_id: triple.affiliation_id,
                        })?;
                    }
                    Some(None) => {
                        stats.rejected_no_year += 1;
                        reject(&triple, JoinReject::NoYear)?;
                    }
                    None => {
                        stats.rejected_no_paper += 1;
                        reject(&triple, JoinReject::NoPaper)?;
                    }
                }
            }
        }
        Some(mut spill) => {
            stats.spilled = true;
            // Phase 2: partition the triples, tagged with input ordinals.
            let mut ordinal = 0u64;
            while let Some(triple) = triples.next_record()? {
                stats.triples_in += 1;
                spill.write_triple(ordinal, &triple)?;
                ordinal += 1;
            }
            // Phase 3: join partition-wise into ordinal-ordered event files.
            let event_files = spill.join_partitions()?;
            // Phase 4: k-way merge by ordinal restores exact input order.
            // `spill` stays alive so its temp dir is not deleted underneath us.
            merge_events(event_files, &mut stats, &mut emit, &mut reject)?;
            drop(spill);
        }
    }

    Ok(stats)
}

struct SpillState {
    _tempdir: Option<tempfile::TempDir>,
    dir: PathBuf,
    partitions: usize,
    paper_writers: Vec<BufWriter<File>>,
    triple_writers: Vec<BufWriter<File>>,
}

impl SpillState {
    fn create(options: &JoinOptions) -> Result<Self> {
        let (tempdir, dir) = match &options.spill_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                (None, dir.clone())
            }
            None => {
                let tmp = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
                let dir = tmp.path().to_path_buf();
                (Some(tmp), dir)
            }
        };
        let partitions = options.partitions.max(1);
        let mut paper_writers = Vec::with_capacity(partitions);
        let mut triple_writers = Vec::with_capacity(partitions);
        for p in 0..partitions {
            let papers_path = dir.join(format!("papers.{p}.part"));
            let triples_path = dir.join(format!("triples.{p}.part"));
            paper_writers.push(BufWriter::new(
                File::create(&papers_path).map_err(|e| Error::io(&papers_path, e))?,
            ));
            triple_writers.push(BufWriter::new(
                File::create(&triples_path).map_err(|e| Error::io(&triples_path, e))?,
            ));
        }
        Ok(SpillState {
            _tempdir: tempdir,
            dir,
            partitions,
            paper_writers,
            triple_writers,
        })
    }

    fn partition_of(&self, paper_id: &str) -> usize {
        (fnv1a64(paper_id.as_bytes()) % self.partitions as u64) as usize
    }

    fn write_paper(&mut self, paper_id: &str, year: Option<i32>) -> Result<()> {
        let p = self.partition_of(paper_id);
        let year = year.map(|y| y.to_string()).unwrap_or_default();
        writeln!(self.paper_writers[p], "{paper_id}\t{year}").map_err(|e| Error::io(&self.dir, e))
    }

    fn write_triple(&mut self, ordinal: u64, triple: &TripleRecord) -> Result<()> {
        let p = self.partition_of(&triple.paper_id);
        writeln!(
            self.triple_writers[p],
            "{ordinal}\t{}\t{}\t{}",
            triple.paper_id,
            triple.author_id,
            triple.affiliation_id.as_deref().unwrap_or("")
        )
        .map_err(|e| Error::io(&self.dir, e))
    }

    /// Joins each partition, writing ordinal-tagged events, and returns the
    /// per-partition event files.
    fn join_partitions(&mut self) -> Result<Vec<PathBuf>> {
        for writer in self
            .paper_writers
            .iter_mut()
            .chain(self.triple_writers.iter_mut())
        {
            writer.flush().map_err(|e| Error::io(&self.dir, e))?;
        }
        self.paper_writers.clear();
        self.triple_writers.clear();

        let mut event_files = Vec::with_capacity(self.partitions);
        for p in 0..self.partitions {
            let papers_path = self.dir.join(format!("papers.{p}.part"));
            let triples_path = self.dir.join(format!("triples.{p}.part"));
            let events_path = self.dir.join(format!("events.{p}.part"));

            let mut index: HashMap<String, Option<i32>> = HashMap::new();
            let reader =
                BufReader::new(File::open(&papers_path).map_err(|e| Error::io(&papers_path, e))?);
            for line in reader.lines() {
                let line = line.map_err(|e| Error::io(&papers_path, e))?;
                let (id, year) = line.split_once('\t').unwrap_or((line.as_str(), ""));
                index.insert(id.to_string(), year.parse::<i32>().ok());
            }

            let reader =
                BufReader::new(File::open(&triples_path).map_err(|e| Error::io(&triples_path, e))?);
            let mut writer =
                BufWriter::new(File::create(&events_path).map_err(|e| Error::io(&events_path, e))?);
            for line in reader.lines() {
                let line = line.map_err(|e| Error::io(&triples_path, e))?;
                let mut parts = line.splitn(4, '\t');
                let ordinal = parts.next().unwrap_or("0");
                let paper_id = parts.next().unwrap_or("");
                let author_id = parts.next().unwrap_or("");
                let affiliation = parts.next().unwrap_or("");
                let event = match index.get(paper_id) {
                    Some(Some(year)) => format!("J\t{year}"),
                    Some(None) => "Y\t".to_string(),
                    None => "P\t".to_string(),
                };
                writeln!(
                    writer,
                    "{ordinal}\t{event}\t{paper_id}\t{author_id}\t{affiliation}"
                )
                .map_err(|e| Error::io(&events_path, e))?;
            }
            writer.flush().map_err(|e| Error::io(&events_path, e))?;
            event_files.push(events_path);
        }
        Ok(event_files)
    }
}

fn merge_events<E, R>(
    event_files: Vec<PathBuf>,
    stats: &mut JoinStats,
    emit: &mut E,
    reject: &mut R,
) -> Result<()>
where
    E: FnMut(AuthorshipTriple) -> Result<()>,
    R: FnMut(&TripleRecord, JoinReject) -> Result<()>,
{
    use std::cmp::Reverse;
    use std::collections::BinaryHeap;

    struct Cursor {
        reader: std::io::Lines<BufReader<File>>,
        path: PathBuf,
    }

    fn next_event(cursor: &mut Cursor) -> Result<Option<(u64, String)>> {
        match cursor.reader.next() {
            None => Ok(None),
            Some(line) => {
                let line = line.map_err(|e| Error::io(&cursor.path, e))?;
                let (ordinal, rest) = line
                    .split_once('\t')
                    .ok_or_else(|| Error::Consistency("corrupt spill event line".to_string()))?;
                let ordinal: u64 = ordinal
                    .parse()
                    .map_err(|_| Error::Consistency("corrupt spill ordinal".to_string()))?;
                Ok(Some((ordinal, rest.to_string())))
            }
        }
    }

    let mut heap: BinaryHeap<Reverse<(u64, usize, String)>> = BinaryHeap::new();
    let mut cursors = Vec::new();
    for (i, path) in event_files.into_iter().enumerate() {
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut cursor = Cursor {
            reader: BufReader::new(file).lines(),
            path,
        };
        if let Some((ordinal, rest)) = next_event(&mut cursor)? {
            heap.push(Reverse((ordinal, i, rest)));
        }
        cursors.push(cursor);
    }

    while let Some(Reverse((_, i, event))) = heap.pop() {
        let mut parts = event.splitn(5, '\t');
        let kind = parts.next().unwrap_or("");
        let year = parts.next().unwrap_or("");
        let paper_id = parts.next().unwrap_or("").to_string();
        let author_id = parts.next().unwrap_or("").to_string();
        let affiliation = parts.next().unwrap_or("");
        let affiliation_id = (!affiliation.is_empty()).then(|| affiliation.to_string());
        match kind {
            "J" => {
                stats.joined += 1;
                emit(AuthorshipTriple {
                    paper_id,
                    author_id,
                    affiliation_id,
                    year: year
                        .parse()
                        .map_err(|_| Error::Consistency("corrupt spill year".to_string()))?,
                })?;
            }
            "Y" | "P" => {
                let triple = TripleRecord {
                    paper_id,
                    author_id,
                    affiliation_id,
                };
                if kind == "Y" {
                    stats.rejected_no_year += 1;
                    reject(&triple, JoinReject::NoYear)?;
                } else {
                    stats.rejected_no_paper += 1;
                    reject(&triple, JoinReject::NoPaper)?;
                }
            }
            other => {
                return Err(Error::Consistency(format!(
                    "corrupt spill event kind {other:?}"
                )))
            }
        }
        if let Some((ordinal, rest)) = next_event(&mut cursors[i])? {
            heap.push(Reverse((ordinal, i, rest)));
        }
    }
    Ok(())
}

/// Reads a UTF-8 text file with lossy replacement.
pub fn read_lossy(path: &Path) -> Result<String> {
    let mut data = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut data))
        .map_err(|e| Error::io(path, e))?;
    Ok(String::from_utf8_lossy(&data).into_owned())
}
