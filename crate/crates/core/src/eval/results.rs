use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::experiments::{CrossDomainMatrix, LearningCurve};
use super::metrics::EvalReport;
use crate::error::{Error, FormatError, Result};

/// Hex SHA-256 of the JSON form of a config.
pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    let json = serde_json::to_vec(cfg).expect("configs serialize to JSON");
    Sha256::digest(json).iter().map(|b| format!("{b:02x}")).collect()
}

/// One line of a results file: a single experiment cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultRecord {
    pub experiment: String,
    pub cell: String,
    pub config_hash: String,
    pub seed: u64,
    pub accuracy: f64,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
}

impl ResultRecord {
    pub fn from_report<T: Serialize>(experiment: &str, cell: &str, cfg: &T, seed: u64, report: &EvalReport) -> Self {
        let metrics = BTreeMap::from([("macro_f1".to_string(), report.macro_f1()), ("total".to_string(), report.total as f64)]);
        Self {
            experiment: experiment.into(),
            cell: cell.into(),
            config_hash: config_hash(cfg),
            seed,
            accuracy: report.accuracy,
            metrics,
        }
    }
}

/// Appends records as JSON lines.
pub fn append_results(path: impl AsRef<Path>, records: &[ResultRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r).expect("records serialize"));
        buf.push('\n');
    }
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<ResultRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_results(&text)
}

pub fn parse_results(text: &str) -> Result<Vec<ResultRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| FormatError::Malformed(format!("results line {}: {e}", i + 1)).into())
        })
        .collect()
}

/// Plain-text table with right-aligned columns.
pub fn render_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut width: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in width.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let parts: Vec<String> = cells.iter().zip(&width).map(|(c, w)| format!("{c:>w$}")).collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(header.to_vec(), &mut out);
    line(width.iter().map(|&w| &"----------------------------------------"[..w.min(40)]).collect(), &mut out);
    for r in rows {
        line(r.iter().map(String::as_str).collect(), &mut out);
    }
    out
}

pub fn render_results(records: &[ResultRecord]) -> String {
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            vec![
                r.experiment.clone(),
                r.cell.clone(),
                r.seed.to_string(),
                format!("{:.4}", r.accuracy),
                r.config_hash[..r.config_hash.len().min(12)].to_string(),
            ]
        })
        .collect();
    render_table(&["experiment", "cell", "seed", "accuracy", "config"], &rows)
}

pub fn render_matrix(m: &CrossDomainMatrix) -> String {
    let mut header = vec!["train\\test".to_string()];
    header.extend(m.env_ids.iter().map(|e| format!("env {e}")));
    let rows: Vec<Vec<String>> = m
        .env_ids
        .iter()
        .zip(&m.accuracy)
        .map(|(e, row)| std::iter::once(format!("env {e}")).chain(row.iter().map(|a| format!("{a:.3}"))).collect())
        .collect();
    render_table(&header.iter().map(String::as_str).collect::<Vec<_>>(), &rows)
}

/// Two columns, `per_class accuracy`, readable by gnuplot.
pub fn curve_columns(c: &LearningCurve) -> String {
    let mut out = format!("# per_class accuracy ({:?}, env {})\n", c.mode, c.target_env);
    for p in &c.points {
        let _ = writeln!(out, "{} {:.6}", p.per_class, p.accuracy);
    }
    out
}
