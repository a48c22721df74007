use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{config_err, input_err, Error, Result};

pub const MAX_SCORE: f64 = 5.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreConvention {
    #[default]
    MosHigherBetter,
    DmosHigherWorse,
}

/// How the raw scores of a manifest map onto the common `[0, 5]` range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreScale {
    pub convention: ScoreConvention,
    pub raw_range: (f64, f64),
}

impl Default for ScoreScale {
    fn default() -> Self {
        Self {
            convention: ScoreConvention::MosHigherBetter,
            raw_range: (0.0, MAX_SCORE),
        }
    }
}

/// Linear map of raw scores to `[0, 5]`, reversed for DMOS-style scores and
/// clipped to the range.
pub fn rescale_scores(raw: &[f64], convention: ScoreConvention, raw_range: (f64, f64)) -> Result<Vec<f64>> {
    let (lo, hi) = raw_range;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(config_err!("raw_range must satisfy lo < hi, got ({lo}, {hi})"));
    }
    let span = hi - lo;
    Ok(raw
        .iter()
        .map(|&r| {
            let y = match convention {
                ScoreConvention::MosHigherBetter => MAX_SCORE * (r - lo) / span,
                ScoreConvention::DmosHigherWorse => MAX_SCORE * (hi - r) / span,
            };
            y.clamp(0.0, MAX_SCORE)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    /// Resolved against the manifest's directory.
    pub path: PathBuf,
    pub raw_score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub source: PathBuf,
    pub records: Vec<Record>,
}

#[derive(Debug, Deserialize)]
struct Row {
    path: String,
    #[serde(default)]
    score: Option<String>,
}

impl Manifest {
    /// Parses a `path,score` CSV. Every image path must exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut reader = csv::ReaderBuilder::new()
            .flexible(false)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
        let names: Vec<&str> = headers.iter().collect();
        if names != ["path", "score"] && names != ["path"] {
            return Err(parse_err(1, format!("expected header `path,score`, found `{}`", names.join(","))));
        }
        let mut records = Vec::new();
        for row in reader.records() {
            let row = row.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line() as usize);
                parse_err(line, e.to_string())
            })?;
            let line = row.position().map_or(0, |p| p.line() as usize);
            let row: Row = row.deserialize(Some(&headers)).map_err(|e| parse_err(line, e.to_string()))?;
            if row.path.is_empty() {
                return Err(parse_err(line, "empty image path".into()));
            }
            let raw_score = match row.score.as_deref() {
                None | Some("") => None,
                Some(s) => {
                    let v: f64 = s
                        .parse()
                        .map_err(|_| parse_err(line, format!("score `{s}` is not a number")))?;
                    if !v.is_finite() {
                        return Err(parse_err(line, format!("score `{s}` is not finite")));
                    }
                    Some(v)
                }
            };
            let resolved = base.join(&row.path);
            if !resolved.is_file() {
                return Err(Error::Io {
                    path: resolved,
                    source: std::io::Error::new(std::io::ErrorKind::NotFound, format!("image listed on line {line} not found")),
                });
            }
            records.push(Record {
                path: resolved,
                raw_score,
            });
        }
        if records.is_empty() {
            return Err(input_err!("manifest {} has no records", path.display()));
        }
        Ok(Self {
            source: path.to_path_buf(),
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn paths(&self) -> Vec<PathBuf> {
        self.records.iter().map(|r| r.path.clone()).collect()
    }

    pub fn is_labeled(&self) -> bool {
        self.records.iter().all(|r| r.raw_score.is_some())
    }

    /// Scores rescaled to `[0, 5]`. Fails when any record is unlabeled or a
    /// raw score lies outside `scale.raw_range`.
    pub fn scores(&self, scale: &ScoreScale) -> Result<Vec<f64>> {
        let (lo, hi) = scale.raw_range;
        let mut raw = Vec::with_capacity(self.records.len());
        for r in &self.records {
            let Some(v) = r.raw_score else {
                return Err(config_err!(
                    "manifest {} has unlabeled record {}",
                    self.source.display(),
                    r.path.display()
                ));
            };
            if v < lo || v > hi {
                return Err(input_err!(
                    "score {v} of {} outside raw_range ({lo}, {hi})",
                    r.path.display()
                ));
            }
            raw.push(v);
        }
        rescale_scores(&raw, scale.convention, scale.raw_range)
    }
}

/// Writes a `path,score` manifest; `None` scores leave the column empty.
pub fn write_manifest(path: &Path, rows: &[(String, Option<f64>)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e.to_string()));
    w.write_record(["path", "score"]).map_err(io)?;
    for (p, s) in rows {
        let score = s.map(|v| format!("{v:.6}")).unwrap_or_default();
        w.write_record([p.as_str(), score.as_str()]).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
