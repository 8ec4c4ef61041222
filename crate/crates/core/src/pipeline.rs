//! Stage orchestration behind the CLI: each subcommand reads plain files,
//! writes its declared output subsets plus a machine-readable run report,
//! and can be re-run independently. Dependent stages fail fast with the name
//! of the subcommand that produces the missing input.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::egonet;
use crate::error::{Error, Result};
use crate::fos;
use crate::geocode::{
    self, AffiliationRecord, CountryTable, EnrichOptions, Gazetteer, GeoContext, GeoEnrichment,
    Provenance, TerritoryMap,
};
use crate::hindex;
use crate::infobox::InfoboxStore;
use crate::ingest::{
    self, subsets, AbstractRow, AuthorRecord, AuthorshipTriple, DumpManifest, FosChildRow,
    FosNodeRow, JoinOptions, PaperFosRow, PaperRecord, RecordStream, RejectSink, StreamStats,
    TripleRecord,
};
use crate::mobility::{self, AnnualLocation, AuthorCareer};
use crate::textproc::{self, LanguageDetector};

/// Output subset file names.
pub mod outputs {
    pub const AFFILIATIONS_GEO: &str = "AffiliationsGeo.csv";
    pub const AUTHOR_CAREER: &str = "AuthorCareer.jsonl";
    pub const AUTHOR_YEAR_LOCATION: &str = "AuthorYearLocation.jsonl";
    pub const STOCKS_ANNUAL: &str = "StocksAnnual.csv";
    pub const FLOWS_ANNUAL: &str = "FlowsAnnual.csv";
    pub const COUNTRY_ANNUAL_FLOWS: &str = "CountryAnnualFlowsAggregated.csv";
    pub const AUTHOR_EGO_NETWORKS: &str = "AuthorEgoNetworks.jsonl";
    pub const ABSTRACTS_PROCESSED: &str = "AbstractsProcessed.jsonl";
    pub const AUTHORS_HINDEX: &str = "Authors_Hindex.csv";
    pub const FOS_LABELED: &str = "FieldOfStudyLabeled.csv";
    pub const PAPER_FOS_LABELED: &str = "PaperFieldsOfStudyLabeled.csv";
}

const AFFILIATIONS_GEO_HEADER: [&str; 17] = [
    "affiliation_id",
    "city",
    "city_latitude",
    "city_longitude",
    "state",
    "postcode",
    "country_alpha2",
    "country_alpha2_secondary",
    "country_alpha3",
    "country_official_name",
    "country_common_name",
    "foundation_date",
    "foundation_date_raw",
    "entity_type",
    "acronym",
    "homepage",
    "provenance",
];

/// Pipeline-wide configuration shared by all subcommands.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub manifest_path: PathBuf,
    pub output_dir: PathBuf,
    /// Memory budget for join indexes, in megabytes.
    pub memory_budget_mb: u64,
    /// Worker threads for parallel sections (>= 1).
    pub parallelism: usize,
    /// Keep going when raw dump lines are malformed (they are always
    /// counted and sunk to `<subset>.rejects.tsv`).
    pub skip_malformed: bool,
    /// Reverse-geocoding distance cutoff; matches farther away count as
    /// unlocated.
    pub max_distance_km: Option<f64>,
    /// Languages the abstract stage may report (bundled profiles).
    pub languages: Vec<String>,
    /// Papers with more distinct authors are excluded from ego networks.
    pub author_cap: usize,
    /// Similarity threshold for fuzzy country matching.
    pub fuzzy_threshold: f64,
}

impl PipelineConfig {
    pub fn new(manifest_path: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        PipelineConfig {
            manifest_path: manifest_path.into(),
            output_dir: output_dir.into(),
            memory_budget_mb: 512,
            parallelism: std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1),
            skip_malformed: false,
            max_distance_km: None,
            languages: textproc::BUNDLED_LANGUAGES
                .iter()
                .map(|s| s.to_string())
                .collect(),
            author_cap: egonet::DEFAULT_AUTHOR_CAP,
            fuzzy_threshold: geocode::DEFAULT_FUZZY_THRESHOLD,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.parallelism < 1 {
            return Err(Error::input("parallelism must be >= 1"));
        }
        std::fs::create_dir_all(&self.output_dir).map_err(|e| Error::io(&self.output_dir, e))?;
        Ok(())
    }

    fn join_options(&self) -> JoinOptions {
        JoinOptions {
            memory_budget_bytes: self.memory_budget_mb << 20,
            spill_dir: None,
            partitions: 16,
        }
    }

    fn out(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }
}

/// One pipeline subcommand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    GeocodeAffiliations,
    BuildCareers,
    AnnualLocations,
    Stocks,
    Flows,
    Egonets,
    Hindex,
    Abstracts,
    FosPropagate,
    PaperAreas,
}

impl Stage {
    /// Execution order of `all`.
    pub const ALL: [Stage; 10] = [
        Stage::GeocodeAffiliations,
        Stage::BuildCareers,
        Stage::AnnualLocations,
        Stage::Stocks,
        Stage::Flows,
        Stage::Egonets,
        Stage::Hindex,
        Stage::Abstracts,
        Stage::FosPropagate,
        Stage::PaperAreas,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::GeocodeAffiliations => "geocode-affiliations",
            Stage::BuildCareers => "build-careers",
            Stage::AnnualLocations => "annual-locations",
            Stage::Stocks => "stocks",
            Stage::Flows => "flows",
            Stage::Egonets => "egonets",
            Stage::Hindex => "hindex",
            Stage::Abstracts => "abstracts",
            Stage::FosPropagate => "fos-propagate",
            Stage::PaperAreas => "paper-areas",
        }
    }
}

/// Machine-readable outcome of one stage run.
///
/// The counts always satisfy `records_in = records_out + rejects` for the
/// stage's primary stream; stage-specific details live in `counters`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub stage: String,
    pub records_in: u64,
    pub records_out: u64,
    pub rejects: u64,
    pub counters: BTreeMap<String, u64>,
    pub outputs: Vec<String>,
    pub runtime_ms: u64,
}

impl RunReport {
    fn new(stage: Stage) -> Self {
        RunReport {
            stage: stage.name().to_string(),
            records_in: 0,
            records_out: 0,
            rejects: 0,
            counters: BTreeMap::new(),
            outputs: Vec::new(),
            runtime_ms: 0,
        }
    }

    fn count(&mut self, key: &str, value: u64) {
        if value > 0 {
            *self.counters.entry(key.to_string()).or_insert(0) += value;
        }
    }

    fn output(&mut self, name: &str) {
        self.outputs.push(name.to_string());
    }

    fn absorb_stream(&mut self, subset: &str, stats: StreamStats) {
        self.count(&format!("{subset}_malformed"), stats.malformed);
        self.count(
            &format!("{subset}_utf8_replacements"),
            stats.utf8_replacements,
        );
    }
}

/// Runs one subcommand end to end and writes its report.
pub fn run_stage(stage: Stage, config: &PipelineConfig) -> Result<RunReport> {
    config.validate()?;
    let manifest = DumpManifest::load(&config.manifest_path)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.parallelism)
        .build()
        .map_err(|e| Error::input(format!("cannot build thread pool: {e}")))?;

    let start = Instant::now();
    let mut malformed_total = 0u64;
    let mut report = pool.install(|| -> Result<RunReport> {
        let mut report = match stage {
            Stage::GeocodeAffiliations => stage_geocode(config, &manifest),
            Stage::BuildCareers => stage_build_careers(config, &manifest),
            Stage::AnnualLocations => stage_annual_locations(config),
            Stage::Stocks => stage_stocks(config),
            Stage::Flows => stage_flows(config),
            Stage::Egonets => stage_egonets(config, &manifest),
            Stage::Hindex => stage_hindex(config, &manifest),
            Stage::Abstracts => stage_abstracts(config, &manifest),
            Stage::FosPropagate => stage_fos_propagate(config, &manifest),
            Stage::PaperAreas => stage_paper_areas(config, &manifest),
        }?;
        report.runtime_ms = start.elapsed().as_millis() as u64;
        Ok(report)
    })?;

    for (key, value) in &report.counters {
        if key.ends_with("_malformed") {
            malformed_total += value;
        }
    }
    report.runtime_ms = start.elapsed().as_millis() as u64;
    write_report(config, &report)?;

    if malformed_total > 0 && !config.skip_malformed {
        return Err(Error::validation(format!(
            "{malformed_total} malformed input line(s) in stage {}; see the rejects files in {} \
             or rerun with --skip-malformed",
            report.stage,
            config.output_dir.display()
        )));
    }
    Ok(report)
}

/// Runs every stage in dependency order.
pub fn run_all(config: &PipelineConfig) -> Result<Vec<RunReport>> {
    Stage::ALL
        .iter()
        .map(|stage| run_stage(*stage, config))
        .collect()
}

fn write_report(config: &PipelineConfig, report: &RunReport) -> Result<()> {
    let dir = config.output_dir.join("reports");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join(format!("{}.json", report.stage));
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::input(format!("cannot serialize report: {e}")))?;
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

/// Fails with the producing subcommand's name when a prerequisite output of
/// an earlier stage is missing.
fn require_output(config: &PipelineConfig, name: &str, produced_by: Stage) -> Result<PathBuf> {
    let path = config.out(name);
    if !path.is_file() {
        return Err(Error::MissingPrerequisite {
            path,
            stage: produced_by.name().to_string(),
        });
    }
    Ok(path)
}

// ---------------------------------------------------------------------------
// geocode-affiliations

fn load_countries(config: &PipelineConfig, manifest: &DumpManifest) -> Result<CountryTable> {
    let table = if manifest.has(subsets::COUNTRIES) {
        CountryTable::from_csv_path(&manifest.subset(subsets::COUNTRIES)?.path)?
    } else {
        CountryTable::bundled()
    };
    Ok(table.with_fuzzy_threshold(config.fuzzy_threshold))
}

fn load_territories(manifest: &DumpManifest) -> Result<TerritoryMap> {
    if manifest.has(subsets::TERRITORIES) {
        TerritoryMap::bundled_with_extra(&manifest.subset(subsets::TERRITORIES)?.path)
    } else {
        Ok(TerritoryMap::bundled())
    }
}

fn stage_geocode(config: &PipelineConfig, manifest: &DumpManifest) -> Result<RunReport> {
    let mut report = RunReport::new(Stage::GeocodeAffiliations);

    let countries = load_countries(config, manifest)?;
    let territories = load_territories(manifest)?;
    let gazetteer =
        Gazetteer::from_csv_path(&manifest.subset(subsets::GAZETTEER)?.path, &countries)?;
    let infoboxes = if manifest.has(subsets::INFOBOXES) {
        InfoboxStore::load_tsv(&manifest.subset(subsets::INFOBOXES)?.path)?
    } else {
        InfoboxStore::empty()
    };

    let mut stream = RecordStream::<AffiliationRecord>::open_with_rejects(
        manifest,
        RejectSink::for_subset(&config.output_dir, subsets::AFFILIATIONS),
    )?;
    let affiliations = stream.collect_all()?;
    let stats = stream.stats();

    let context = GeoContext {
        gazetteer: &gazetteer,
        countries: &countries,
        territories: &territories,
        infoboxes: &infoboxes,
        options: EnrichOptions {
            max_distance_km: config.max_distance_km,
        },
    };
    let (enrichments, estats) = geocode::enrich_affiliations(&affiliations, &context);

    let path = config.out(outputs::AFFILIATIONS_GEO);
    write_affiliations_geo(&path, &enrichments)?;

    report.records_in = stats.lines;
    report.records_out = enrichments.len() as u64;
    report.rejects = stats.malformed;
    report.absorb_stream(subsets::AFFILIATIONS, stats);
    report.count("unlocated", estats.unlocated);
    report.count("reverse_only", estats.reverse_only);
    report.count("url_only", estats.url_only);
    report.count("merged", estats.merged);
    report.count("postcode_conflicts", estats.postcode_conflicts);
    report.count("multi_location_infoboxes", estats.multi_location);
    report.count("over_distance_cutoff", estats.over_distance_cutoff);
    report.count("gazetteer_rows_skipped", gazetteer.skipped_rows());
    report.output(outputs::AFFILIATIONS_GEO);
    Ok(report)
}

fn write_affiliations_geo(path: &Path, enrichments: &[GeoEnrichment]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::input(format!("cannot create {}: {e}", path.display())))?;
    let io_err = |e: csv::Error| Error::input(format!("writing {}: {e}", path.display()));
    writer
        .write_record(AFFILIATIONS_GEO_HEADER)
        .map_err(io_err)?;
    let float = |v: Option<f64>| v.map(|f| f.to_string()).unwrap_or_default();
    let text = |v: &Option<String>| v.clone().unwrap_or_default();
    for e in enrichments {
        writer
            .write_record([
                e.affiliation_id.clone(),
                text(&e.city),
                float(e.city_latitude),
                float(e.city_longitude),
                text(&e.state),
                text(&e.postcode),
                text(&e.country_alpha2),
                text(&e.country_alpha2_secondary),
                text(&e.country_alpha3),
                text(&e.country_official_name),
                text(&e.country_common_name),
                text(&e.foundation_date),
                text(&e.foundation_date_raw),
                text(&e.entity_type),
                text(&e.acronym),
                text(&e.homepage),
                e.provenance
                    .map(|p| p.as_str().to_string())
                    .unwrap_or_default(),
            ])
            .map_err(io_err)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Reads the enriched affiliations CSV back (enriched-CSV ingest mode).
pub fn read_affiliations_geo(path: &Path) -> Result<Vec<GeoEnrichment>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::input(format!("cannot open {}: {e}", path.display())))?;
    {
        let headers = reader
            .headers()
            .map_err(|e| Error::input(format!("{}: {e}", path.display())))?;
        let expected: Vec<&str> = AFFILIATIONS_GEO_HEADER.to_vec();
        let got: Vec<&str> = headers.iter().collect();
        if got != expected {
            return Err(Error::input(format!(
                "{} does not look like an enriched affiliations file (unexpected header)",
                path.display()
            )));
        }
    }
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::input(format!("{}: {e}", path.display())))?;
        if row.len() != AFFILIATIONS_GEO_HEADER.len() {
            return Err(Error::input(format!(
                "{}: row with {} fields",
                path.display(),
                row.len()
            )));
        }
        let opt = |i: usize| -> Option<String> {
            let v = row[i].trim();
            (!v.is_empty()).then(|| v.to_string())
        };
        let float = |i: usize| -> Result<Option<f64>> {
            let v = row[i].trim();
            if v.is_empty() {
                return Ok(None);
            }
            v.parse::<f64>()
                .map(Some)
                .map_err(|_| Error::input(format!("{}: bad float {v:?}", path.display())))
        };
        out.push(GeoEnrichment {
            affiliation_id: row[0].to_string(),
            city: opt(1),
            city_latitude: float(2)?,
            city_longitude: float(3)?,
            state: opt(4),
            postcode: opt(5),
            country_alpha2: opt(6),
            country_alpha2_secondary: opt(7),
            country_alpha3: opt(8),
            country_official_name: opt(9),
            country_common_name: opt(10),
            foundation_date: opt(11),
            foundation_date_raw: opt(12),
            entity_type: opt(13),
            acronym: opt(14),
            homepage: opt(15),
            provenance: match row[16].trim() {
                "" => None,
                p => Some(p.parse::<Provenance>()?),
            },
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// build-careers

/// Runs the year join and hands every joined triple to `emit`, sinking join
/// losses into the triples rejects file.
fn run_year_join(
    config: &PipelineConfig,
    manifest: &DumpManifest,
    report: &mut RunReport,
    mut emit: impl FnMut(AuthorshipTriple),
) -> Result<()> {
    let mut triples = RecordStream::<TripleRecord>::open_with_rejects(
        manifest,
        RejectSink::for_subset(&config.output_dir, subsets::TRIPLES),
    )?;
    let mut papers = RecordStream::<PaperRecord>::open_with_rejects(
        manifest,
        RejectSink::for_subset(&config.output_dir, subsets::PAPERS),
    )?;

    let mut join_rejects: Vec<String> = Vec::new();
    let stats = ingest::join_triples_with_years(
        &mut triples,
        &mut papers,
        &config.join_options(),
        |joined| {
            emit(joined);
            Ok(())
        },
        |t, _why| {
            join_rejects.push(format!(
                "{}\t{}\t{}",
                t.paper_id,
                t.author_id,
                t.affiliation_id.as_deref().unwrap_or("")
            ));
            Ok(())
        },
    )?;
    for line in &join_rejects {
        triples.reject_sink_mut().write(line)?;
    }
    triples.reject_sink_mut().flush()?;

    report.records_in = triples.stats().lines;
    report.records_out = stats.joined;
    report.rejects = triples.stats().malformed + stats.rejects();
    report.absorb_stream(subsets::TRIPLES, triples.stats());
    report.absorb_stream(subsets::PAPERS, papers.stats());
    report.count("join_rejected_no_paper", stats.rejected_no_paper);
    report.count("join_rejected_no_year", stats.rejected_no_year);
    report.count("join_spilled", u64::from(stats.spilled));
    Ok(())
}

fn stage_build_careers(config: &PipelineConfig, manifest: &DumpManifest) -> Result<RunReport> {
    let mut report = RunReport::new(Stage::BuildCareers);

    let geo_path = require_output(
        config,
        outputs::AFFILIATIONS_GEO,
        Stage::GeocodeAffiliations,
    )?;
    let geo_map: HashMap<String, String> = read_affiliations_geo(&geo_path)?
        .into_iter()
        .filter_map(|e| Some((e.affiliation_id.clone(), e.country_alpha2?)))
        .collect();

    let mut joined = Vec::new();
    run_year_join(config, manifest, &mut report, |t| joined.push(t))?;

    let career_years = mobility::build_careers(joined, &geo_map);
    report.count("career_years", career_years.len() as u64);
    let careers = mobility::group_careers(career_years);
    report.count("authors_with_careers", careers.len() as u64);

    let path = config.out(outputs::AUTHOR_CAREER);
    write_jsonl(&path, careers.iter())?;
    report.output(outputs::AUTHOR_CAREER);
    Ok(report)
}

// ---------------------------------------------------------------------------
// annual-locations

fn stage_annual_locations(config: &PipelineConfig) -> Result<RunReport> {
    let mut report = RunReport::new(Stage::AnnualLocations);
    let careers_path = require_output(config, outputs::AUTHOR_CAREER, Stage::BuildCareers)?;

    let mut locations: Vec<AnnualLocation> = Vec::new();
    let mut career_years = 0u64;
    let mut ungeolocated = 0u64;
    for career in read_jsonl::<AuthorCareer>(&careers_path)? {
        let career = career?;
        for cy in career.career_years() {
            career_years += 1;
            match mobility::annual_location(&cy) {
                Some(location) => locations.push(location),
                None => ungeolocated += 1,
            }
        }
    }

    let path = config.out(outputs::AUTHOR_YEAR_LOCATION);
    write_jsonl(&path, locations.iter())?;

    report.records_in = career_years;
    report.records_out = locations.len() as u64;
    report.rejects = ungeolocated;
    report.count("ungeolocated_author_years", ungeolocated);
    report.output(outputs::AUTHOR_YEAR_LOCATION);
    Ok(report)
}

// ---------------------------------------------------------------------------
// stocks and flows

fn load_locations(config: &PipelineConfig) -> Result<Vec<AnnualLocation>> {
    let path = require_output(
        config,
        outputs::AUTHOR_YEAR_LOCATION,
        Stage::AnnualLocations,
    )?;
    read_jsonl::<AnnualLocation>(&path)?.collect()
}

fn load_nationalities(config: &PipelineConfig) -> Result<HashMap<String, String>> {
    let path = require_output(config, outputs::AUTHOR_CAREER, Stage::BuildCareers)?;
    let mut out = HashMap::new();
    for career in read_jsonl::<AuthorCareer>(&path)? {
        let career = career?;
        let years: Vec<_> = career.career_years().collect();
        if let Some(nat) = mobility::career_nationality(&years) {
            out.insert(nat.author_id, nat.country_alpha2);
        }
    }
    Ok(out)
}

fn stage_stocks(config: &PipelineConfig) -> Result<RunReport> {
    let mut report = RunReport::new(Stage::Stocks);
    let locations = load_locations(config)?;
    let nationalities = load_nationalities(config)?;

    let (stocks, stats) = mobility::compute_stocks(&locations, &nationalities);

    let path = config.out(outputs::STOCKS_ANNUAL);
    let mut writer = CsvSink::create(&path, &["country", "year", "stock", "located_authors"])?;
    for s in &stocks {
        writer.row([
            s.country_alpha2.as_str(),
            &s.year.to_string(),
            &s.stock.to_string(),
            &s.located_authors.to_string(),
        ])?;
    }
    writer.finish()?;

    report.records_in = locations.len() as u64;
    report.records_out = locations.len() as u64;
    report.count("stock_rows", stocks.len() as u64);
    report.count("no_nationality_located", stats.no_nationality_located);
    report.output(outputs::STOCKS_ANNUAL);
    Ok(report)
}

fn stage_flows(config: &PipelineConfig) -> Result<RunReport> {
    let mut report = RunReport::new(Stage::Flows);
    let locations = load_locations(config)?;
    let nationalities = load_nationalities(config)?;

    let flows = mobility::compute_flows(&locations, &nationalities);
    let totals = mobility::aggregate_country_flows(&flows);

    let path = config.out(outputs::FLOWS_ANNUAL);
    let mut writer = CsvSink::create(
        &path,
        &[
            "year",
            "origin",
            "destination",
            "weight",
            "returners",
            "origin_natives",
            "destination_natives",
        ],
    )?;
    for f in &flows {
        writer.row([
            f.year.to_string().as_str(),
            &f.origin_alpha2,
            &f.destination_alpha2,
            &f.weight.to_string(),
            &f.returners.to_string(),
            &f.origin_natives.to_string(),
            &f.destination_natives.to_string(),
        ])?;
    }
    writer.finish()?;

    let agg_path = config.out(outputs::COUNTRY_ANNUAL_FLOWS);
    let mut writer = CsvSink::create(&agg_path, &["year", "country", "total_in", "total_out"])?;
    for t in &totals {
        writer.row([
            t.year.to_string().as_str(),
            &t.country_alpha2,
            &t.total_in.to_string(),
            &t.total_out.to_string(),
        ])?;
    }
    writer.finish()?;

    report.records_in = locations.len() as u64;
    report.records_out = locations.len() as u64;
    report.count("flow_rows", flows.len() as u64);
    report.count("movements", flows.iter().map(|f| f.weight).sum());
    report.count("aggregated_rows", totals.len() as u64);
    report.output(outputs::FLOWS_ANNUAL);
    report.output(outputs::COUNTRY_ANNUAL_FLOWS);
    Ok(report)
}

// ---------------------------------------------------------------------------
// egonets

fn stage_egonets(config: &PipelineConfig, manifest: &DumpManifest) -> Result<RunReport> {
    let mut report = RunReport::new(Stage::Egonets);

    let mut joined = Vec::new();
    run_year_join(config, manifest, &mut report, |t| joined.push(t))?;

    let (networks, stats) = egonet::build_ego_networks(joined, config.author_cap);

    let path = config.out(outputs::AUTHOR_EGO_NETWORKS);
    write_jsonl(&path, networks.iter())?;

    report.count("ego_networks", networks.len() as u64);
    report.count("papers_seen", stats.papers);
    report.count("papers_over_author_cap", stats.excluded_papers);
    report.count("duplicate_authorships", stats.duplicate_authorships);
    report.output(outputs::AUTHOR_EGO_NETWORKS);
    Ok(report)
}

// ---------------------------------------------------------------------------
// hindex

fn stage_hindex(config: &PipelineConfig, manifest: &DumpManifest) -> Result<RunReport> {
    let mut report = RunReport::new(Stage::Hindex);

    let mut papers = RecordStream::<PaperRecord>::open_with_rejects(
        manifest,
        RejectSink::for_subset(&config.output_dir, subsets::PAPERS),
    )?;
    let mut citations_of_paper: HashMap<String, u64> = HashMap::new();
    while let Some(paper) = papers.next_record()? {
        citations_of_paper.insert(paper.paper_id, paper.citation_count);
    }

    let mut triples = RecordStream::<TripleRecord>::open_with_rejects(
        manifest,
        RejectSink::for_subset(&config.output_dir, subsets::TRIPLES),
    )?;
    let mut seen: HashSet<(String, String)> = HashSet::new();
    let mut arrays: HashMap<String, Vec<u64>> = HashMap::new();
    let mut unknown_paper = 0u64;
    while let Some(triple) = triples.next_record()? {
        let Some(&citations) = citations_of_paper.get(&triple.paper_id) else {
            unknown_paper += 1;
            continue;
        };
        if seen.insert((triple.author_id.clone(), triple.paper_id.clone())) {
            arrays.entry(triple.author_id).or_default().push(citations);
        }
    }

    let mut authors = RecordStream::<AuthorRecord>::open_with_rejects(
        manifest,
        RejectSink::for_subset(&config.output_dir, subsets::AUTHORS),
    )?;
    let path = config.out(outputs::AUTHORS_HINDEX);
    let mut writer = CsvSink::create(&path, &["author_id", "h_index"])?;
    let mut rows = 0u64;
    let mut covered: HashSet<String> = HashSet::new();
    while let Some(author) = authors.next_record()? {
        let empty = Vec::new();
        let citations = arrays.get(&author.author_id).unwrap_or(&empty);
        let h = hindex::h_index_checked(citations)?;
        writer.row([author.author_id.as_str(), &h.to_string()])?;
        covered.insert(author.author_id);
        rows += 1;
    }
    writer.finish()?;
    let unknown_authors = arrays.keys().filter(|a| !covered.contains(*a)).count() as u64;

    report.records_in = authors.stats().lines;
    report.records_out = rows;
    report.rejects = authors.stats().malformed;
    report.absorb_stream(subsets::AUTHORS, authors.stats());
    report.absorb_stream(subsets::PAPERS, papers.stats());
    report.absorb_stream(subsets::TRIPLES, triples.stats());
    report.count("triples_with_unknown_paper", unknown_paper);
    report.count("authors_only_in_triples", unknown_authors);
    report.output(outputs::AUTHORS_HINDEX);
    Ok(report)
}

// ---------------------------------------------------------------------------
// abstracts

fn stage_abstracts(config: &PipelineConfig, manifest: &DumpManifest) -> Result<RunReport> {
    use rayon::prelude::*;

    let mut report = RunReport::new(Stage::Abstracts);

    let languages: Vec<&str> = config.languages.iter().map(String::as_str).collect();
    let detector = LanguageDetector::with_languages(&languages)?;

    let mut stream = RecordStream::<AbstractRow>::open_with_rejects(
        manifest,
        RejectSink::for_subset(&config.output_dir, subsets::ABSTRACTS),
    )?;
    let rows = stream.collect_all()?;
    let stats = stream.stats();

    let records: Vec<textproc::AbstractRecord> = rows
        .par_iter()
        .map(|row| textproc::process_abstract(&row.paper_id, &row.text, &detector))
        .collect();

    let path = config.out(outputs::ABSTRACTS_PROCESSED);
    write_jsonl(&path, records.iter())?;

    let undetermined = records.iter().filter(|r| r.language == "und").count() as u64;
    report.records_in = stats.lines;
    report.records_out = records.len() as u64;
    report.rejects = stats.malformed;
    report.absorb_stream(subsets::ABSTRACTS, stats);
    report.count("language_undetermined", undetermined);
    report.output(outputs::ABSTRACTS_PROCESSED);
    Ok(report)
}

// ---------------------------------------------------------------------------
// fields of study

fn stage_fos_propagate(config: &PipelineConfig, manifest: &DumpManifest) -> Result<RunReport> {
    let mut report = RunReport::new(Stage::FosPropagate);

    let mut nodes_stream = RecordStream::<FosNodeRow>::open_with_rejects(
        manifest,
        RejectSink::for_subset(&config.output_dir, subsets::FIELDS_OF_STUDY),
    )?;
    let nodes = nodes_stream.collect_all()?;
    let mut links_stream = RecordStream::<FosChildRow>::open_with_rejects(
        manifest,
        RejectSink::for_subset(&config.output_dir, subsets::FOS_CHILDREN),
    )?;
    let links = links_stream.collect_all()?;

    let dag = fos::FosDag::build(nodes, links)?;
    let labelings = fos::propagate_labels(&dag);

    let path = config.out(outputs::FOS_LABELED);
    let mut writer = CsvSink::create(&path, &["fos_id", "area", "score"])?;
    let mut rows: Vec<(String, String, f64)> = Vec::new();
    for labeling in labelings.iter() {
        if labeling.scores.is_empty() {
            // Unlabeled fields keep their join key with empty area/score.
            rows.push((labeling.fos_id.clone(), String::new(), f64::NAN));
            continue;
        }
        for (area, score) in &labeling.scores {
            rows.push((labeling.fos_id.clone(), area.clone(), *score));
        }
    }
    rows.sort_by(|a, b| (&a.0, &a.1).cmp(&(&b.0, &b.1)));
    for (fos_id, area, score) in &rows {
        let score_text = if score.is_nan() {
            String::new()
        } else {
            score.to_string()
        };
        writer.row([fos_id.as_str(), area, &score_text])?;
    }
    writer.finish()?;

    report.records_in = nodes_stream.stats().lines;
    report.records_out = labelings.len() as u64;
    report.rejects = nodes_stream.stats().malformed;
    report.absorb_stream(subsets::FIELDS_OF_STUDY, nodes_stream.stats());
    report.absorb_stream(subsets::FOS_CHILDREN, links_stream.stats());
    report.count("unlabeled_fields", labelings.unlabeled());
    report.count("rows_written", rows.len() as u64);
    report.count("dangling_links", dag.load_stats().dangling_links);
    report.count("duplicate_links", dag.load_stats().duplicate_links);
    report.output(outputs::FOS_LABELED);
    Ok(report)
}

/// Reads FieldOfStudyLabeled.csv back into score maps.
fn read_labelings(path: &Path) -> Result<HashMap<String, BTreeMap<String, f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::input(format!("cannot open {}: {e}", path.display())))?;
    let mut out: HashMap<String, BTreeMap<String, f64>> = HashMap::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::input(format!("{}: {e}", path.display())))?;
        if row.len() != 3 {
            return Err(Error::input(format!("{}: bad row arity", path.display())));
        }
        let entry = out.entry(row[0].to_string()).or_default();
        if row[1].is_empty() {
            continue; // unlabeled field: key only
        }
        let score: f64 = row[2]
            .parse()
            .map_err(|_| Error::input(format!("{}: bad score {:?}", path.display(), &row[2])))?;
        entry.insert(row[1].to_string(), score);
    }
    Ok(out)
}

fn stage_paper_areas(config: &PipelineConfig, manifest: &DumpManifest) -> Result<RunReport> {
    let mut report = RunReport::new(Stage::PaperAreas);

    let labeled_path = require_output(config, outputs::FOS_LABELED, Stage::FosPropagate)?;
    let labelings = read_labelings(&labeled_path)?;

    let mut links_stream = RecordStream::<PaperFosRow>::open_with_rejects(
        manifest,
        RejectSink::for_subset(&config.output_dir, subsets::PAPER_FOS),
    )?;

    // Aggregate scores per paper; unknown field ids go to the rejects file.
    let mut raw: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    let mut rejected_links: Vec<String> = Vec::new();
    let mut links_in = 0u64;
    while let Some(link) = links_stream.next_record()? {
        links_in += 1;
        match labelings.get(&link.fos_id) {
            Some(scores) => {
                let entry = raw.entry(link.paper_id).or_default();
                for (area, score) in scores {
                    *entry.entry(area.clone()).or_insert(0.0) += score;
                }
            }
            None => rejected_links.push(format!("{}\t{}", link.paper_id, link.fos_id)),
        }
    }
    for line in &rejected_links {
        links_stream.reject_sink_mut().write(line)?;
    }
    links_stream.reject_sink_mut().flush()?;

    let path = config.out(outputs::PAPER_FOS_LABELED);
    let mut writer = CsvSink::create(&path, &["paper_id", "area", "score"])?;
    let mut unscored = 0u64;
    let mut papers = 0u64;
    let mut rows = 0u64;
    for (paper_id, mut scores) in raw {
        papers += 1;
        let total: f64 = scores.values().sum();
        if total > 0.0 {
            for score in scores.values_mut() {
                *score /= total;
            }
            for (area, score) in &scores {
                writer.row([paper_id.as_str(), area, &score.to_string()])?;
                rows += 1;
            }
        } else {
            unscored += 1;
            writer.row([paper_id.as_str(), "", ""])?;
            rows += 1;
        }
    }
    writer.finish()?;

    report.records_in = links_stream.stats().lines;
    report.records_out = links_in - rejected_links.len() as u64;
    report.rejects = links_stream.stats().malformed + rejected_links.len() as u64;
    report.absorb_stream(subsets::PAPER_FOS, links_stream.stats());
    report.count("links_to_unknown_fields", rejected_links.len() as u64);
    report.count("papers_scored", papers - unscored);
    report.count("papers_unscored", unscored);
    report.count("rows_written", rows);
    report.output(outputs::PAPER_FOS_LABELED);
    Ok(report)
}

// ---------------------------------------------------------------------------
// output helpers

struct CsvSink {
    writer: csv::Writer<File>,
    path: PathBuf,
}

impl CsvSink {
    fn create(path: &Path, header: &[&str]) -> Result<Self> {
        let mut writer = csv::Writer::from_path(path)
            .map_err(|e| Error::input(format!("cannot create {}: {e}", path.display())))?;
        writer
            .write_record(header)
            .map_err(|e| Error::input(format!("writing {}: {e}", path.display())))?;
        Ok(CsvSink {
            writer,
            path: path.to_path_buf(),
        })
    }

    fn row<const N: usize>(&mut self, fields: [&str; N]) -> Result<()> {
        self.writer
            .write_record(fields)
            .map_err(|e| Error::input(format!("writing {}: {e}", self.path.display())))
    }

    fn finish(mut self) -> Result<()> {
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Writes items as JSON Lines (one object per line).
pub fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<u64> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    let mut count = 0u64;
    for item in items {
        let line = serde_json::to_string(&item)
            .map_err(|e| Error::input(format!("serializing for {}: {e}", path.display())))?;
        writer
            .write_all(line.as_bytes())
            .and_then(|_| writer.write_all(b"\n"))
            .map_err(|e| Error::io(path, e))?;
        count += 1;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(count)
}

/// Streams a JSON Lines file.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<impl Iterator<Item = Result<T>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let path = path.to_path_buf();
    Ok(reader
        .lines()
        .enumerate()
        .filter_map(move |(i, line)| match line {
            Err(e) => Some(Err(Error::io(&path, e))),
            Ok(line) if line.trim().is_empty() => None,
            Ok(line) => Some(serde_json::from_str::<T>(&line).map_err(|e| {
                Error::input(format!("{}:{}: bad JSON line: {e}", path.display(), i + 1))
            })),
        }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_are_kebab_case() {
        for stage in Stage::ALL {
            assert!(stage
                .name()
                .chars()
                .all(|c| c.is_ascii_lowercase() || c == '-'));
        }
    }

    #[test]
    fn missing_prerequisite_names_the_stage() {
        let tmp = tempfile::tempdir().unwrap();
        let config = PipelineConfig::new(tmp.path().join("m.txt"), tmp.path().join("out"));
        std::fs::create_dir_all(&config.output_dir).unwrap();
        let err = require_output(&config, outputs::AUTHOR_CAREER, Stage::BuildCareers)
            .unwrap_err()
            .to_string();
        assert!(err.contains("build-careers"), "{err}");
        assert_eq!(
            require_output(&config, outputs::AUTHOR_CAREER, Stage::BuildCareers)
                .unwrap_err()
                .exit_code(),
            1
        );
    }

    #[test]
    fn affiliations_geo_roundtrip() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("geo.csv");
        let mut e = GeoEnrichment::empty("F1");
        e.city = Some("Paris".into());
        e.city_latitude = Some(48.8566);
        e.city_longitude = Some(2.3522);
        e.country_alpha2 = Some("FR".into());
        e.country_alpha3 = Some("FRA".into());
        e.country_official_name = Some("French Republic".into());
        e.country_common_name = Some("France".into());
        e.provenance = Some(Provenance::Reverse);
        let unlocated = GeoEnrichment::empty("F2");
        write_affiliations_geo(&path, &[e.clone(), unlocated.clone()]).unwrap();
        let back = read_affiliations_geo(&path).unwrap();
        assert_eq!(back, vec![e, unlocated]);
    }

    #[test]
    fn jsonl_roundtrip() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("x.jsonl");
        let items = vec![
            AnnualLocation {
                author_id: "A1".into(),
                year: 2010,
                country_alpha2: "FR".into(),
            },
            AnnualLocation {
                author_id: "A2".into(),
                year: 2011,
                country_alpha2: "US".into(),
            },
        ];
        assert_eq!(write_jsonl(&path, items.iter()).unwrap(), 2);
        let back: Vec<AnnualLocation> = read_jsonl(&path)
            .unwrap()
            .collect::<Result<Vec<_>>>()
            .unwrap();
        assert_eq!(back, items);
    }
}
