//! Merging saved reports into one mean ± std table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::pipeline::PipelineReport;
use crate::attacks::{AttackReport, Stat};
use crate::diffusion::Norm;
use crate::error::{Error, Result};

/// Columns of the merged table, in display order.
pub const COLUMNS: [&str; 5] = ["clean", "linf", "l1", "l2", "average"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Pipeline,
    Attack,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedRow {
    pub defense: String,
    /// Keyed by column name; absent when no file supplied the column.
    pub columns: BTreeMap<String, Stat>,
    pub files: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedTable {
    pub sources: Vec<PathBuf>,
    pub rows: Vec<MergedRow>,
}

fn parse(path: &Path) -> Result<(Kind, Vec<(String, &'static str, f64)>)> {
    let text = std::fs::read_to_string(path)?;
    let schema = |reason: String| Error::ReportSchema {
        path: path.to_path_buf(),
        reason,
    };
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| schema(e.to_string()))?;
    if value.get("table").is_some() {
        let rep: PipelineReport = serde_json::from_value(value).map_err(|e| schema(e.to_string()))?;
        let mut obs = Vec::new();
        for row in rep.table {
            let d = row.defense.clone();
            obs.push((d.clone(), "clean", row.clean.mean));
            for (col, stat) in [("linf", row.linf), ("l1", row.l1), ("l2", row.l2), ("average", row.average)] {
                if let Some(s) = stat {
                    obs.push((d.clone(), col, s.mean));
                }
            }
        }
        Ok((Kind::Pipeline, obs))
    } else if value.get("attack").is_some() {
        let rep: AttackReport = serde_json::from_value(value).map_err(|e| schema(e.to_string()))?;
        let col = match rep.config.norm {
            Norm::Linf => "linf",
            Norm::L1 => "l1",
            Norm::L2 => "l2",
        };
        Ok((
            Kind::Attack,
            vec![
                (rep.defense.clone(), "clean", rep.clean_accuracy.mean),
                (rep.defense, col, rep.robust_accuracy.mean),
            ],
        ))
    } else {
        Err(schema("neither a pipeline nor an attack report".to_owned()))
    }
}

/// Aggregates per-file means into mean ± std per defense and column. Rows
/// are ordered by defense name. All files must be of the same kind.
pub fn merge_reports(paths: &[PathBuf]) -> Result<MergedTable> {
    if paths.is_empty() {
        return Err(Error::invalid("no report files given".to_owned()));
    }
    let mut kind = None;
    let mut values: BTreeMap<String, BTreeMap<&'static str, Vec<f64>>> = BTreeMap::new();
    let mut files: BTreeMap<String, usize> = BTreeMap::new();
    for path in paths {
        let (k, obs) = parse(path)?;
        match kind {
            None => kind = Some(k),
            Some(prev) if prev != k => {
                return Err(Error::ReportSchema {
                    path: path.clone(),
                    reason: format!("{k:?} report mixed with {prev:?} reports"),
                })
            }
            Some(_) => {}
        }
        let defenses: std::collections::BTreeSet<String> = obs.iter().map(|(d, _, _)| d.clone()).collect();
        for d in defenses {
            *files.entry(d).or_default() += 1;
        }
        for (defense, col, v) in obs {
            values.entry(defense).or_default().entry(col).or_default().push(v);
        }
    }
    let mut rows = Vec::new();
    for (defense, cols) in values {
        let mut columns = BTreeMap::new();
        for (col, vs) in cols {
            columns.insert(col.to_owned(), Stat::of(&vs)?);
        }
        rows.push(MergedRow {
            files: files.get(&defense).copied().unwrap_or(0),
            defense,
            columns,
        });
    }
    Ok(MergedTable {
        sources: paths.to_vec(),
        rows,
    })
}

impl MergedTable {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["defense".to_owned(), "files".to_owned()];
        for c in COLUMNS {
            header.push(format!("{c}_mean"));
            header.push(format!("{c}_std"));
        }
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![row.defense.clone(), row.files.to_string()];
            for c in COLUMNS {
                match row.columns.get(c) {
                    Some(s) => rec.extend([s.mean.to_string(), s.std.to_string()]),
                    None => rec.extend([String::new(), String::new()]),
                }
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Markdown table in percent, `mean ± std`.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| defense | clean | l∞ | l1 | l2 | average |\n|---|---|---|---|---|---|\n");
        for row in &self.rows {
            let _ = write!(s, "| {} |", row.defense);
            for c in COLUMNS {
                match row.columns.get(c) {
                    Some(st) => {
                        let _ = write!(s, " {:.1} ± {:.1} |", 100.0 * st.mean, 100.0 * st.std);
                    }
                    None => s.push_str(" - |"),
                }
            }
            s.push('\n');
        }
        s
    }
}
