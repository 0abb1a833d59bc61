//! Line-delimited corpus files.
//!
//! Line 1 is a header carrying the schema version and the record count;
//! every following line is one JSON-encoded record. Floats round-trip
//! bit-exactly (shortest round-trip decimal encoding), and the count in the
//! header makes truncation detectable even at a line boundary.

use super::{CorpusError, UtteranceRecord};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

pub const CORPUS_SCHEMA: &str = "ftm-corpus-v1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema: String,
    records: usize,
}

pub fn write_corpus(path: &Path, records: &[UtteranceRecord]) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = Header {
        schema: CORPUS_SCHEMA.to_string(),
        records: records.len(),
    };
    serde_json::to_writer(&mut w, &header).map_err(io_err)?;
    w.write_all(b"\n")?;
    for rec in records {
        serde_json::to_writer(&mut w, rec).map_err(io_err)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn io_err(e: serde_json::Error) -> CorpusError {
    CorpusError::Io(std::io::Error::other(e))
}

pub fn read_corpus(path: &Path) -> Result<Vec<UtteranceRecord>, CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header_line = lines
        .next()
        .ok_or(CorpusError::Parse {
            line: 1,
            msg: "empty file, missing header".into(),
        })??;
    let header: Header = serde_json::from_str(&header_line).map_err(|e| CorpusError::Parse {
        line: 1,
        msg: format!("bad header: {e}"),
    })?;
    if header.schema != CORPUS_SCHEMA {
        return Err(CorpusError::Parse {
            line: 1,
            msg: format!("unsupported schema {:?}", header.schema),
        });
    }

    let mut records = Vec::with_capacity(header.records);
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            return Err(CorpusError::Parse {
                line: line_no,
                msg: "unexpected blank line".into(),
            });
        }
        let rec: UtteranceRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
                line: line_no,
                msg: e.to_string(),
            })?;
        rec.validate().map_err(|e| CorpusError::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        records.push(rec);
    }
    if records.len() != header.records {
        return Err(CorpusError::Parse {
            line: records.len() + 1,
            msg: format!(
                "header promises {} records, file holds {}",
                header.records,
                records.len()
            ),
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusConfig};
    use std::io::Read;

    fn small_corpus(n: usize) -> Vec<UtteranceRecord> {
        let mut config = CorpusConfig::default();
        config.n_utterances = n;
        config.min_frames = 5;
        config.max_frames = 12;
        config.seed = 13;
        generate_corpus(&config).unwrap()
    }

    #[test]
    fn round_trip_is_field_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let records = small_corpus(8);
        write_corpus(&path, &records).unwrap();
        let back = read_corpus(&path).unwrap();
        assert_eq!(records, back);
    }

    #[test]
    fn empty_corpus_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.jsonl");
        write_corpus(&path, &[]).unwrap();
        assert!(read_corpus(&path).unwrap().is_empty());
    }

    #[test]
    fn truncated_file_errors_without_partial_result() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let records = small_corpus(5);
        write_corpus(&path, &records).unwrap();

        let mut text = String::new();
        File::open(&path).unwrap().read_to_string(&mut text).unwrap();
        // drop the last record line entirely (truncation at a line boundary)
        let cut = text.trim_end().rfind('\n').unwrap();
        std::fs::write(&path, &text[..cut + 1]).unwrap();
        let err = read_corpus(&path).unwrap_err();
        assert!(matches!(err, CorpusError::Parse { .. }), "{err}");

        // and truncation mid-line
        std::fs::write(&path, &text[..text.len() - 40]).unwrap();
        let err = read_corpus(&path).unwrap_err();
        match err {
            CorpusError::Parse { line, .. } => assert!(line >= 2),
            other => panic!("unexpected error {other}"),
        }
    }
}

