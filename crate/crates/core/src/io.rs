//! Interaction and feature file readers.
//!
//! Interactions: `context<TAB>item<TAB>y[<TAB>alpha[<TAB>timestamp]]`, with
//! an empty `alpha` field allowed when only a timestamp is given. Features:
//! `entity<TAB>idx:val idx:val …`. Blank lines and lines starting with `#`
//! are skipped everywhere.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::data::{assemble_feature_matrix, FeatureMatrix, RawInteraction, Vocabulary};
use crate::error::{IcdError, Result};

fn parse_err(line: usize, message: impl Into<String>) -> IcdError {
    IcdError::Parse {
        line,
        message: message.into(),
    }
}

fn parse_f64(line: usize, what: &str, s: &str) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| parse_err(line, format!("{what} '{s}' is not a number")))?;
    if !v.is_finite() {
        return Err(parse_err(line, format!("{what} '{s}' is not finite")));
    }
    Ok(v)
}

/// Numbered, non-comment, non-blank lines.
fn content_lines<R: BufRead>(reader: R) -> impl Iterator<Item = Result<(usize, String)>> {
    reader
        .lines()
        .enumerate()
        .map(|(n, l)| l.map(|l| (n + 1, l)).map_err(IcdError::from))
        .filter(|r| match r {
            Ok((_, l)) => {
                let t = l.trim();
                !t.is_empty() && !t.starts_with('#')
            }
            Err(_) => true,
        })
}

pub fn parse_interactions<R: BufRead>(reader: R) -> Result<Vec<RawInteraction>> {
    let mut out = Vec::new();
    for entry in content_lines(reader) {
        let (n, line) = entry?;
        let fields: Vec<&str> = line.trim_end_matches('\r').split('\t').collect();
        if !(3..=5).contains(&fields.len()) {
            return Err(parse_err(n, format!("expected 3 to 5 tab-separated fields, found {}", fields.len())));
        }
        let (context, item) = (fields[0].trim(), fields[1].trim());
        if context.is_empty() || item.is_empty() {
            return Err(parse_err(n, "empty context or item id"));
        }
        let mut raw = RawInteraction::new(context, item, parse_f64(n, "score", fields[2])?);
        if let Some(a) = fields.get(3).filter(|a| !a.trim().is_empty()) {
            raw = raw.with_alpha(parse_f64(n, "confidence", a)?);
        }
        if let Some(t) = fields.get(4) {
            raw = raw.with_timestamp(parse_f64(n, "timestamp", t)?);
        }
        out.push(raw);
    }
    Ok(out)
}

pub fn read_interactions(path: &Path) -> Result<Vec<RawInteraction>> {
    parse_interactions(BufReader::new(File::open(path)?))
}

/// Sparse feature rows keyed by entity id, as listed in a feature file.
#[derive(Clone, Debug, Default)]
pub struct FeatureTable {
    pub num_features: usize,
    rows: HashMap<String, Vec<(usize, f64)>>,
}

impl FeatureTable {
    pub fn get(&self, entity: &str) -> Option<&[(usize, f64)]> {
        self.rows.get(entity).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Design matrix with one row per vocabulary entry, in index order.
    pub fn matrix_for(&self, vocab: &Vocabulary) -> Result<FeatureMatrix> {
        let rows = vocab
            .ids()
            .iter()
            .map(|id| {
                self.get(id)
                    .map(<[_]>::to_vec)
                    .ok_or_else(|| IcdError::InvalidData(format!("no features for '{id}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        assemble_feature_matrix(rows, self.num_features)
    }

    /// A single row, validated against this table's width.
    pub fn row_matrix(&self, entity: &str) -> Result<FeatureMatrix> {
        let row = self
            .get(entity)
            .ok_or_else(|| IcdError::InvalidData(format!("no features for '{entity}'")))?;
        assemble_feature_matrix(vec![row.to_vec()], self.num_features)
    }
}

/// Width is one past the largest index seen, unless `num_features` is
/// given.
pub fn parse_features<R: BufRead>(reader: R, num_features: Option<usize>) -> Result<FeatureTable> {
    let mut rows = HashMap::new();
    let mut width = 0;
    for entry in content_lines(reader) {
        let (n, line) = entry?;
        let line = line.trim_end_matches('\r');
        let (entity, rest) = line.split_once('\t').unwrap_or((line, ""));
        let entity = entity.trim();
        if entity.is_empty() {
            return Err(parse_err(n, "empty entity id"));
        }
        let mut row = Vec::new();
        for tok in rest.split_whitespace() {
            let (i, v) = tok
                .split_once(':')
                .ok_or_else(|| parse_err(n, format!("feature '{tok}' is not idx:val")))?;
            let i: usize = i
                .parse()
                .map_err(|_| parse_err(n, format!("feature index '{i}' is not a non-negative integer")))?;
            if row.iter().any(|&(j, _)| j == i) {
                return Err(parse_err(n, format!("duplicate feature index {i}")));
            }
            width = width.max(i + 1);
            row.push((i, parse_f64(n, "feature value", v)?));
        }
        row.sort_by_key(|&(i, _)| i);
        if rows.insert(entity.to_string(), row).is_some() {
            return Err(parse_err(n, format!("entity '{entity}' listed twice")));
        }
    }
    let num_features = match num_features {
        Some(p) if p < width => {
            return Err(IcdError::IndexOutOfRange {
                what: "feature",
                index: width - 1,
                bound: p,
            })
        }
        Some(p) => p,
        None => width,
    };
    Ok(FeatureTable { num_features, rows })
}

pub fn read_features(path: &Path, num_features: Option<usize>) -> Result<FeatureTable> {
    parse_features(BufReader::new(File::open(path)?), num_features)
}
