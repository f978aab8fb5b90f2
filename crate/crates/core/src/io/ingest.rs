//! Labeled-query CSV ingestion and export.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::corpus::LabeledQuery;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub query_column: String,
    pub label_column: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            query_column: "Query".into(),
            label_column: "Label".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SkippedRow {
    /// 1-based record number, header excluded.
    pub record: usize,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub queries: Vec<LabeledQuery>,
    pub skipped: Vec<SkippedRow>,
}

/// Largest tolerated share of malformed rows.
pub const MAX_MALFORMED_FRACTION: f64 = 0.10;

pub fn coerce_label(raw: &str) -> Option<u8> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "0" | "0.0" | "false" | "benign" | "normal" => Some(0),
        "1" | "1.0" | "true" | "malicious" | "sqli" | "attack" => Some(1),
        _ => None,
    }
}

pub fn ingest_reader<R: std::io::Read>(reader: R, schema: &CsvSchema) -> Result<IngestReport> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim().trim_start_matches('\u{feff}') == name)
            .ok_or_else(|| Error::data(format!("missing column {name:?}")))
    };
    let qi = find(&schema.query_column)?;
    let li = find(&schema.label_column)?;

    let mut queries = Vec::new();
    let mut skipped = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let record = i + 1;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                skipped.push(SkippedRow {
                    record,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        if rec.len() != headers.len() {
            skipped.push(SkippedRow {
                record,
                reason: format!("expected {} fields, found {}", headers.len(), rec.len()),
            });
            continue;
        }
        match coerce_label(&rec[li]) {
            Some(label) => queries.push(LabeledQuery {
                query: rec[qi].to_string(),
                label,
            }),
            None => skipped.push(SkippedRow {
                record,
                reason: format!("unrecognised label {:?}", &rec[li]),
            }),
        }
    }
    let total = queries.len() + skipped.len();
    if total > 0 && skipped.len() as f64 > MAX_MALFORMED_FRACTION * total as f64 {
        return Err(Error::data(format!(
            "{} of {total} rows malformed (limit {:.0}%)",
            skipped.len(),
            MAX_MALFORMED_FRACTION * 100.0
        )));
    }
    for s in &skipped {
        log::warn!("skipped record {}: {}", s.record, s.reason);
    }
    Ok(IngestReport { queries, skipped })
}

pub fn ingest_csv(path: &Path, schema: &CsvSchema) -> Result<IngestReport> {
    let file = std::fs::File::open(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    ingest_reader(file, schema)
}

pub fn write_queries<W: std::io::Write>(writer: W, queries: &[LabeledQuery], schema: &CsvSchema) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([&schema.query_column, &schema.label_column])?;
    for q in queries {
        w.write_record([q.query.as_str(), if q.label == 1 { "1" } else { "0" }])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv(path: &Path, queries: &[LabeledQuery], schema: &CsvSchema) -> Result<()> {
    write_queries(std::fs::File::create(path)?, queries, schema)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ingest(text: &str) -> Result<IngestReport> {
        ingest_reader(text.as_bytes(), &CsvSchema::default())
    }

    #[test]
    fn quoted_comma_field() {
        let r = ingest("Query,Label\n\"SELECT 1, 2\",0\n").unwrap();
        assert_eq!(
            r.queries,
            vec![LabeledQuery {
                query: "SELECT 1, 2".into(),
                label: 0
            }]
        );
    }

    #[test]
    fn header_only_is_empty() {
        let r = ingest("Query,Label\n").unwrap();
        assert!(r.queries.is_empty() && r.skipped.is_empty());
    }

    #[test]
    fn embedded_newline_and_quotes() {
        let r = ingest("Query,Label\n\"a \"\"b\"\"\nc\",1\n").unwrap();
        assert_eq!(r.queries[0].query, "a \"b\"\nc");
        assert_eq!(r.queries[0].label, 1);
    }

    #[test]
    fn missing_column_rejected() {
        assert!(ingest("Sentence,Label\nx,0\n").is_err());
        let schema = CsvSchema {
            query_column: "Sentence".into(),
            ..Default::default()
        };
        assert_eq!(ingest_reader("Sentence,Label\nx,0\n".as_bytes(), &schema).unwrap().queries.len(), 1);
    }

    #[test]
    fn malformed_threshold() {
        let mut ok = String::from("Query,Label\n");
        for i in 0..19 {
            ok.push_str(&format!("q{i},1\n"));
        }
        ok.push_str("bad,maybe\n");
        let r = ingest(&ok).unwrap();
        assert_eq!((r.queries.len(), r.skipped.len()), (19, 1));
        ok.push_str("x,y,z\nw,?\n");
        assert!(ingest(&ok).is_err());
    }
}
