//! Corpus generation, CSV ingestion and checkpoint files.

pub mod checkpoint;
pub mod corpus;
pub mod ingest;

pub use checkpoint::Checkpoint;
pub use corpus::{desk_corpus, generate_corpus, Family, LabeledQuery};
pub use ingest::{ingest_csv, write_csv, CsvSchema, IngestReport};
