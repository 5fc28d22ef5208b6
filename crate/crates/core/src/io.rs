//! Data set loaders, curve files, and the JSON result envelope.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bench::CurvePoint;
use crate::error::{Error, Result};
use crate::model::DataSet;

/// Which CSV column holds the output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TargetColumn {
    #[default]
    Last,
    First,
    /// 0-based column index.
    Index(usize),
}

impl FromStr for TargetColumn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last" => Ok(TargetColumn::Last),
            "first" => Ok(TargetColumn::First),
            _ => s.parse().map(TargetColumn::Index).map_err(|_| {
                Error::InvalidParameter(format!(
                    "target column '{s}': expected last, first or an index"
                ))
            }),
        }
    }
}

fn parse_cell(cell: &str, line: usize, column: usize) -> Result<f64> {
    let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
        line,
        column: Some(column),
        message: format!("'{cell}' is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            line,
            column: Some(column),
            message: format!("non-finite value '{cell}'"),
        });
    }
    Ok(v)
}

/// Parses numeric CSV text. Features are the non-target columns in file order.
/// Column numbers in errors are 1-based.
pub fn parse_csv(text: &str, target: TargetColumn, has_header: bool) -> Result<DataSet> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    let mut ys = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            Error::Parse {
                line,
                column: None,
                message: e.to_string(),
            }
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let width = record.len();
        let t = match target {
            TargetColumn::Last => width.saturating_sub(1),
            TargetColumn::First => 0,
            TargetColumn::Index(i) => i,
        };
        if width < 2 || t >= width {
            return Err(Error::Parse {
                line,
                column: None,
                message: format!(
                    "need a target column {} and at least one feature, found {width} fields",
                    t + 1
                ),
            });
        }
        let mut x = Vec::with_capacity(width - 1);
        let mut y = 0.0;
        for (c, cell) in record.iter().enumerate() {
            let v = parse_cell(cell, line, c + 1)?;
            if c == t {
                y = v;
            } else {
                x.push(v);
            }
        }
        rows.push(x);
        ys.push(y);
    }
    if rows.is_empty() {
        return Err(Error::InvalidData("CSV input contains no data rows".into()));
    }
    DataSet::new(rows, ys)
}

pub fn load_csv(path: &Path, target: TargetColumn, has_header: bool) -> Result<DataSet> {
    parse_csv(&fs::read_to_string(path)?, target, has_header)
}

/// Parses LIBSVM text `label idx:val …` with 1-based ascending indices into a
/// dense data set of dimension max index. Blank lines are skipped.
pub fn parse_libsvm(text: &str) -> Result<DataSet> {
    let mut sparse: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut ys = Vec::new();
    let mut d = 0;
    for (ln, raw) in text.lines().enumerate() {
        let line = ln + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let mut tokens = body.split_whitespace();
        let label = tokens.next().expect("nonempty line has a token");
        let y: f64 = label.parse().map_err(|_| Error::Parse {
            line,
            column: Some(1),
            message: format!("label '{label}' is not a number"),
        })?;
        if !y.is_finite() {
            return Err(Error::Parse {
                line,
                column: Some(1),
                message: "non-finite label".into(),
            });
        }
        let mut feats = Vec::new();
        let mut last = 0;
        for (k, tok) in tokens.enumerate() {
            let column = Some(k + 2);
            let err = |message: String| Error::Parse {
                line,
                column,
                message,
            };
            let (i, v) = tok
                .split_once(':')
                .ok_or_else(|| err(format!("malformed pair '{tok}'")))?;
            let i: i64 = i
                .parse()
                .map_err(|_| err(format!("malformed index in '{tok}'")))?;
            if i < 1 {
                return Err(err(format!("index {i} must be at least 1")));
            }
            let i = i as usize;
            if i <= last {
                return Err(err(format!(
                    "index {i} does not follow {last} in ascending order"
                )));
            }
            let v: f64 = v
                .parse()
                .map_err(|_| err(format!("malformed value in '{tok}'")))?;
            if !v.is_finite() {
                return Err(err(format!("non-finite value in '{tok}'")));
            }
            last = i;
            feats.push((i, v));
        }
        d = d.max(last);
        sparse.push(feats);
        ys.push(y);
    }
    if sparse.is_empty() {
        return Err(Error::InvalidData(
            "LIBSVM input contains no data lines".into(),
        ));
    }
    if d == 0 {
        return Err(Error::InvalidData("LIBSVM input has no features".into()));
    }
    let n = sparse.len();
    let mut x = vec![0.0; n * d];
    for (row, feats) in sparse.iter().enumerate() {
        for &(i, v) in feats {
            x[row * d + i - 1] = v;
        }
    }
    DataSet::from_flat(n, d, x, ys)
}

pub fn load_libsvm(path: &Path) -> Result<DataSet> {
    parse_libsvm(&fs::read_to_string(path)?)
}

/// Writes `bytes` to a temporary file next to `path`, then renames it over
/// `path`, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| {
        Error::InvalidParameter(format!("'{}' is not a file path", path.display()))
    })?;
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub const CURVE_HEADER: &str = "epoch,train,validation,test";

/// CSV text for a learning curve. `f64` Display is the shortest string that
/// parses back to the same value, so the file round-trips exactly.
pub fn curve_to_csv(points: &[CurvePoint]) -> String {
    let mut out = String::with_capacity(32 * (points.len() + 1));
    out.push_str(CURVE_HEADER);
    out.push('\n');
    for p in points {
        out.push_str(&format!(
            "{},{},{},{}\n",
            p.epoch, p.train, p.validation, p.test
        ));
    }
    out
}

pub fn curve_from_csv(text: &str) -> Result<Vec<CurvePoint>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| Error::Parse {
        line: 1,
        column: None,
        message: e.to_string(),
    })?;
    if header.iter().collect::<Vec<_>>().join(",") != CURVE_HEADER {
        return Err(Error::Parse {
            line: 1,
            column: None,
            message: format!("expected header '{CURVE_HEADER}'"),
        });
    }
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            column: None,
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let float = |c: usize| -> Result<f64> {
            record[c].parse().map_err(|_| Error::Parse {
                line,
                column: Some(c + 1),
                message: format!("'{}' is not a number", &record[c]),
            })
        };
        let epoch = record[0].parse().map_err(|_| Error::Parse {
            line,
            column: Some(1),
            message: format!("'{}' is not an epoch", &record[0]),
        })?;
        out.push(CurvePoint {
            epoch,
            train: float(1)?,
            validation: float(2)?,
            test: float(3)?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub elapsed_ms: f64,
}

/// Wrapper for every JSON report: what produced it, with which settings and
/// seed, and how long it took. Everything except `timing` is a function of
/// the invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultEnvelope<T> {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub metrics: T,
    pub timing: Timing,
}

impl<T: Serialize> ResultEnvelope<T> {
    pub fn new(
        command: &str,
        config: serde_json::Value,
        seed: u64,
        metrics: T,
        elapsed: std::time::Duration,
    ) -> Self {
        ResultEnvelope {
            tool: "iir".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config,
            seed,
            metrics,
            timing: Timing {
                elapsed_ms: elapsed.as_secs_f64() * 1e3,
            },
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}
