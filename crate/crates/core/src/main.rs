use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use magpie_core::pipeline::{self, PipelineConfig, Stage};

/// Batch enrichment engine for scholarly-graph dumps: geolocated
/// affiliations, author mobility stocks and flows, co-authorship ego
/// networks, h-indexes, processed abstracts, and discipline-labeled fields
/// of study.
#[derive(Parser)]
#[command(name = "magpie", version, max_term_width = 100)]
struct Cli {
    /// Manifest file listing the dump subsets (`subset = path` lines;
    /// `subset.format = csv` switches to headered CSV).
    #[arg(
        short,
        long,
        env = "MAGPIE_MANIFEST",
        global = true,
        default_value = "manifest.txt"
    )]
    manifest: PathBuf,

    /// Directory for output subsets, rejects files and run reports.
    #[arg(
        short,
        long,
        env = "MAGPIE_OUTPUT_DIR",
        global = true,
        default_value = "out"
    )]
    output_dir: PathBuf,

    /// Memory budget in MB for join indexes before spilling to disk.
    #[arg(
        long,
        env = "MAGPIE_MEMORY_BUDGET_MB",
        global = true,
        default_value_t = 512
    )]
    memory_budget_mb: u64,

    /// Worker threads for parallel sections.
    #[arg(long, env = "MAGPIE_PARALLELISM", global = true)]
    parallelism: Option<usize>,

    /// Keep going when raw dump lines are malformed (still counted and
    /// written to `<subset>.rejects.tsv`).
    #[arg(long, env = "MAGPIE_SKIP_MALFORMED", global = true)]
    skip_malformed: bool,

    /// Treat nearest-city matches farther than this many km as unlocated.
    #[arg(long, env = "MAGPIE_MAX_DISTANCE_KM", global = true)]
    max_distance_km: Option<f64>,

    /// Comma-separated ISO 639-1 codes for abstract language detection.
    #[arg(long, env = "MAGPIE_LANGUAGES", global = true, value_delimiter = ',')]
    languages: Option<Vec<String>>,

    /// Exclude papers with more distinct authors from ego networks.
    #[arg(long, env = "MAGPIE_AUTHOR_CAP", global = true, default_value_t = 500)]
    author_cap: usize,

    /// Similarity threshold for fuzzy country-name matching.
    #[arg(
        long,
        env = "MAGPIE_FUZZY_THRESHOLD",
        global = true,
        default_value_t = 0.85
    )]
    fuzzy_threshold: f64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Geolocate and enrich affiliations (writes AffiliationsGeo.csv).
    GeocodeAffiliations,
    /// Join authorships with publication years into per-author careers
    /// (writes AuthorCareer.jsonl).
    BuildCareers,
    /// Derive each author's modal country per year
    /// (writes AuthorYearLocation.jsonl).
    AnnualLocations,
    /// Count located authors and working migrants per country-year
    /// (writes StocksAnnual.csv).
    Stocks,
    /// Aggregate country-to-country movements per year (writes
    /// FlowsAnnual.csv and CountryAnnualFlowsAggregated.csv).
    Flows,
    /// Build annual co-authorship ego networks
    /// (writes AuthorEgoNetworks.jsonl).
    Egonets,
    /// Compute per-author h-indexes by three cross-checked methods
    /// (writes Authors_Hindex.csv).
    Hindex,
    /// Detect abstract languages and extract tokens/types
    /// (writes AbstractsProcessed.jsonl).
    Abstracts,
    /// Propagate research-area labels down the field-of-study hierarchy
    /// (writes FieldOfStudyLabeled.csv).
    FosPropagate,
    /// Score papers by research area (writes PaperFieldsOfStudyLabeled.csv).
    PaperAreas,
    /// Run every stage in dependency order.
    All,
}

impl Command {
    fn stages(&self) -> Vec<Stage> {
        match self {
            Command::GeocodeAffiliations => vec![Stage::GeocodeAffiliations],
            Command::BuildCareers => vec![Stage::BuildCareers],
            Command::AnnualLocations => vec![Stage::AnnualLocations],
            Command::Stocks => vec![Stage::Stocks],
            Command::Flows => vec![Stage::Flows],
            Command::Egonets => vec![Stage::Egonets],
            Command::Hindex => vec![Stage::Hindex],
            Command::Abstracts => vec![Stage::Abstracts],
            Command::FosPropagate => vec![Stage::FosPropagate],
            Command::PaperAreas => vec![Stage::PaperAreas],
            Command::All => Stage::ALL.to_vec(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    let mut config = PipelineConfig::new(&cli.manifest, &cli.output_dir);
    config.memory_budget_mb = cli.memory_budget_mb;
    if let Some(parallelism) = cli.parallelism {
        config.parallelism = parallelism;
    }
    config.skip_malformed = cli.skip_malformed;
    config.max_distance_km = cli.max_distance_km;
    if let Some(languages) = cli.languages {
        config.languages = languages;
    }
    config.author_cap = cli.author_cap;
    config.fuzzy_threshold = cli.fuzzy_threshold;

    for stage in cli.command.stages() {
        match pipeline::run_stage(stage, &config) {
            Ok(report) => {
                println!(
                    "{}: {} in, {} out, {} rejects ({} ms)",
                    report.stage,
                    report.records_in,
                    report.records_out,
                    report.rejects,
                    report.runtime_ms
                );
            }
            Err(err) => {
                eprintln!("error: {err}");
                return ExitCode::from(err.exit_code() as u8);
            }
        }
    }
    ExitCode::SUCCESS
}
