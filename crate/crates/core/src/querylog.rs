//! Line-record query logs.
//!
//! The adversary-visible log has one record per query:
//! `timestamp_iso TAB session_key TAB query_text TAB clicked_ranks_csv`.
//! The ground-truth sidecar repeats the first three columns and adds the
//! origin instead of the clicks.

use std::io::BufRead;

use chrono::{DateTime, SecondsFormat};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::obfuscator::Origin;
use crate::text::tokenize;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("log line {line}: {message}")]
    Record { line: usize, message: String },
    #[error("{0}")]
    Mismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A query as the search engine sees it: no origin, no topic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedQuery {
    pub timestamp: f64,
    pub session_key: String,
    pub text: String,
    pub terms: Vec<String>,
    pub clicked_ranks: Vec<u32>,
}

impl ObservedQuery {
    pub fn new(timestamp: f64, session_key: impl Into<String>, text: impl Into<String>, clicked_ranks: Vec<u32>) -> Self {
        let text = text.into();
        ObservedQuery {
            timestamp,
            session_key: session_key.into(),
            terms: tokenize(&text),
            text,
            clicked_ranks,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    pub timestamp: f64,
    pub session_key: String,
    pub text: String,
    pub origin: Origin,
}

pub fn format_timestamp(ts: f64) -> String {
    let millis = (ts * 1000.0).round() as i64;
    DateTime::from_timestamp_millis(millis)
        .expect("timestamp in range")
        .to_rfc3339_opts(SecondsFormat::Millis, true)
}

pub fn parse_timestamp(s: &str) -> Option<f64> {
    DateTime::parse_from_rfc3339(s)
        .ok()
        .map(|dt| dt.timestamp_millis() as f64 / 1000.0)
}

/// Rounds a timestamp to what survives a log round trip.
pub fn log_precision(ts: f64) -> f64 {
    (ts * 1000.0).round() / 1000.0
}

fn clean(field: &str) -> String {
    field.replace(['\t', '\n', '\r'], " ")
}

pub fn write_log(queries: &[ObservedQuery]) -> String {
    let mut out = String::new();
    for q in queries {
        let ranks: Vec<String> = q.clicked_ranks.iter().map(|r| r.to_string()).collect();
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            format_timestamp(q.timestamp),
            clean(&q.session_key),
            clean(&q.text),
            ranks.join(",")
        ));
    }
    out
}

fn split_record(line: &str, lineno: usize, columns: usize) -> Result<Vec<&str>, LogError> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != columns {
        return Err(LogError::Record {
            line: lineno,
            message: format!("expected {columns} tab-separated fields, found {}", fields.len()),
        });
    }
    Ok(fields)
}

fn parse_ts(s: &str, lineno: usize) -> Result<f64, LogError> {
    parse_timestamp(s).ok_or_else(|| LogError::Record {
        line: lineno,
        message: format!("bad timestamp `{s}`"),
    })
}

pub fn read_log<R: BufRead>(reader: R) -> Result<Vec<ObservedQuery>, LogError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let f = split_record(&line, i + 1, 4)?;
        let ranks = if f[3].is_empty() {
            Vec::new()
        } else {
            f[3].split(',')
                .map(|r| r.parse::<u32>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| LogError::Record {
                    line: i + 1,
                    message: format!("bad clicked ranks `{}`", f[3]),
                })?
        };
        out.push(ObservedQuery::new(parse_ts(f[0], i + 1)?, f[1], f[2], ranks));
    }
    Ok(out)
}

pub fn write_ground_truth(records: &[GroundTruthRecord]) -> String {
    records
        .iter()
        .map(|r| {
            format!(
                "{}\t{}\t{}\t{}\n",
                format_timestamp(r.timestamp),
                clean(&r.session_key),
                clean(&r.text),
                r.origin.as_str()
            )
        })
        .collect()
}

pub fn read_ground_truth<R: BufRead>(reader: R) -> Result<Vec<GroundTruthRecord>, LogError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let f = split_record(&line, i + 1, 4)?;
        let origin = Origin::parse(f[3]).ok_or_else(|| LogError::Record {
            line: i + 1,
            message: format!("unknown origin `{}`", f[3]),
        })?;
        out.push(GroundTruthRecord {
            timestamp: parse_ts(f[0], i + 1)?,
            session_key: f[1].to_string(),
            text: f[2].to_string(),
            origin,
        });
    }
    Ok(out)
}

/// True when the first line looks like a ground-truth record.
pub fn looks_like_ground_truth(first_line: &str) -> bool {
    first_line
        .rsplit('\t')
        .next()
        .and_then(Origin::parse)
        .is_some()
}
