//! magpie-core: batch enrichment engine for scholarly-graph dumps.
//!
//! The engine turns raw tabular dumps of a scholarly knowledge graph
//! (papers, authors, affiliations, authorship links, fields of study,
//! abstracts) into enriched datasets:
//!
//! - geolocated affiliations with standardized country metadata ([`geocode`]),
//!   cross-checked against pre-fetched encyclopedia infoboxes ([`infobox`]);
//! - author careers, annual locations, migrant stocks and flow graphs
//!   ([`mobility`]);
//! - annual weighted co-authorship ego networks ([`egonet`]);
//! - per-author h-indexes computed by three cross-checked algorithms
//!   ([`hindex`]);
//! - language-tagged, tokenized abstracts ([`textproc`]);
//! - discipline labels propagated down the field-of-study hierarchy ([`fos`]).
//!
//! [`ingest`] streams and joins the raw dumps; [`pipeline`] orchestrates the
//! stages behind the `magpie` CLI and writes the output subsets.

pub mod egonet;
pub mod error;
pub mod fos;
pub mod geocode;
pub mod hindex;
pub mod infobox;
pub mod ingest;
pub mod mobility;
pub mod pipeline;
pub mod textproc;

pub use error::{Error, Result};
