//! Grid search over `(top_k, tau)` on a validation set.
//!
//! The table is written to CSV one flushed row at a time, and an interrupted
//! search resumes from the rows already on disk. Selection always runs on the
//! values as printed, so re-scanning the CSV reproduces the choice.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infer::{infer_mask, InferenceConfig};
use crate::model::MaskModel;
use maskpress_core::{apply_mask, MaskMode, PerformanceFn, TokenSeq};

pub const CSV_HEADER: &str = "top_k,tau,accuracy,mean_tokens";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Highest accuracy, then fewer tokens, then smaller k, then larger tau.
    #[default]
    AccuracyThenTokens,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub top_k_values: Vec<usize>,
    pub tau_values: Vec<f64>,
    pub objective: Objective,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { top_k_values: vec![2, 3, 4], tau_values: vec![1e-4, 1e-3, 1e-2, 1e-1], objective: Objective::AccuracyThenTokens }
    }
}

impl GridSpec {
    pub fn validate(&self, base: &InferenceConfig) -> Result<()> {
        if self.top_k_values.is_empty() || self.tau_values.is_empty() {
            return Err(Error::Config("grid needs at least one top_k and one tau".into()));
        }
        for cell in self.cells(base) {
            cell.validate()?;
        }
        Ok(())
    }

    /// Cells in table order: k-major, tau-minor.
    pub fn cells(&self, base: &InferenceConfig) -> Vec<InferenceConfig> {
        let mut out = Vec::new();
        for &k in &self.top_k_values {
            for &tau in &self.tau_values {
                out.push(InferenceConfig { top_k: k, tau, ..base.clone() });
            }
        }
        out
    }
}

/// One validation prompt with the oracle that scores its pruned versions.
pub struct ValidationItem<'a> {
    pub id: String,
    pub seq: TokenSeq,
    pub oracle: &'a dyn PerformanceFn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub top_k: usize,
    pub tau: f64,
    pub accuracy: f64,
    pub mean_tokens: f64,
}

impl GridRow {
    pub fn to_csv(&self) -> String {
        format!("{},{},{:.6},{:.6}", self.top_k, fmt_tau(self.tau), self.accuracy, self.mean_tokens)
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Config(format!("malformed grid row {line:?}"));
        if f.len() != 4 {
            return Err(bad());
        }
        Ok(Self {
            top_k: f[0].parse().map_err(|_| bad())?,
            tau: f[1].parse().map_err(|_| bad())?,
            accuracy: f[2].parse().map_err(|_| bad())?,
            mean_tokens: f[3].parse().map_err(|_| bad())?,
        })
    }

    /// The row as it reads back from its CSV line.
    pub fn rounded(&self) -> Self {
        Self::from_csv(&self.to_csv()).expect("formatted row parses")
    }
}

/// Shortest representation that parses back to the same value.
fn fmt_tau(t: f64) -> String {
    format!("{t:?}")
}

#[derive(Debug, Clone)]
pub struct GridResult {
    pub rows: Vec<GridRow>,
    pub selected_index: usize,
    pub selected: InferenceConfig,
}

/// Index of the best row under accuracy, then fewer tokens, then smaller k,
/// then larger tau.
pub fn select_row(rows: &[GridRow]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in rows.iter().enumerate() {
        let better = match best {
            None => true,
            Some(b) => {
                let b = &rows[b];
                r.accuracy
                    .total_cmp(&b.accuracy)
                    .then(b.mean_tokens.total_cmp(&r.mean_tokens))
                    .then(b.top_k.cmp(&r.top_k))
                    .then(r.tau.total_cmp(&b.tau))
                    .is_gt()
            }
        };
        if better {
            best = Some(i);
        }
    }
    best
}

/// Mean oracle score and mean retained length over `items` for one cell.
pub fn evaluate_cell(model: &MaskModel, items: &[ValidationItem<'_>], cfg: &InferenceConfig) -> Result<(f64, f64)> {
    let mut acc = 0.0;
    let mut toks = 0.0;
    for item in items {
        let inf = infer_mask(model, item.seq.tokens(), cfg)?;
        let pruned = apply_mask(&item.seq, &inf.mask, MaskMode::Delete)?;
        acc += item.oracle.evaluate(&pruned)?.value;
        toks += inf.mask.retained_count() as f64;
    }
    let n = items.len() as f64;
    Ok((acc / n, toks / n))
}

fn read_existing(path: &Path, cells: &[InferenceConfig]) -> Result<(Vec<GridRow>, usize)> {
    let text = fs::read_to_string(path)?;
    let complete = text.rfind('\n').map_or(0, |i| i + 1);
    let mut rows = Vec::new();
    let mut lines = text[..complete].lines();
    match lines.next() {
        None => return Ok((rows, 0)),
        Some(h) if h == CSV_HEADER => {}
        Some(h) => return Err(Error::Config(format!("{} has header {h:?}", path.display()))),
    }
    for line in lines {
        let row = GridRow::from_csv(line)?;
        let cell = cells
            .get(rows.len())
            .ok_or_else(|| Error::Config(format!("{} has more rows than the grid", path.display())))?;
        if row.top_k != cell.top_k || row.tau.to_bits() != cell.tau.to_bits() {
            return Err(Error::Config(format!("{} row {line:?} does not match the grid", path.display())));
        }
        rows.push(row);
    }
    Ok((rows, complete))
}

/// Evaluates every cell and picks one. With `csv`, rows already present are
/// reused and new rows are appended as they finish.
pub fn grid_search(
    model: &MaskModel,
    items: &[ValidationItem<'_>],
    grid: &GridSpec,
    base: &InferenceConfig,
    csv: Option<&Path>,
) -> Result<GridResult> {
    grid.validate(base)?;
    if items.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    let cells = grid.cells(base);
    let mut rows = Vec::with_capacity(cells.len());
    let mut writer = None;
    if let Some(path) = csv {
        let existing = if path.exists() { Some(read_existing(path, &cells)?) } else { None };
        let mut w = match existing {
            Some((done, complete)) if complete > 0 => {
                rows = done;
                let f = OpenOptions::new().write(true).open(path)?;
                f.set_len(complete as u64)?;
                drop(f);
                BufWriter::new(OpenOptions::new().append(true).open(path)?)
            }
            _ => {
                let mut w = BufWriter::new(File::create(path)?);
                writeln!(w, "{CSV_HEADER}")?;
                w.flush()?;
                w
            }
        };
        w.flush()?;
        writer = Some(w);
    }
    for cell in &cells[rows.len()..] {
        let (accuracy, mean_tokens) = evaluate_cell(model, items, cell)?;
        let row = GridRow { top_k: cell.top_k, tau: cell.tau, accuracy, mean_tokens }.rounded();
        log::info!("grid cell k={} tau={}: accuracy {:.6}, mean tokens {:.6}", row.top_k, row.tau, row.accuracy, row.mean_tokens);
        if let Some(w) = writer.as_mut() {
            writeln!(w, "{}", row.to_csv())?;
            w.flush()?;
        }
        rows.push(row);
    }
    let selected_index = select_row(&rows).expect("grid is non-empty");
    Ok(GridResult { selected: cells[selected_index].clone(), selected_index, rows })
}

/// Parses a complete table written by [`grid_search`].
pub fn read_table(path: &Path) -> Result<Vec<GridRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Config(format!("{} is not a grid table", path.display())));
    }
    lines.map(GridRow::from_csv).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(k: usize, tau: f64, a: f64, t: f64) -> GridRow {
        GridRow { top_k: k, tau, accuracy: a, mean_tokens: t }
    }

    #[test]
    fn tie_breaks() {
        assert_eq!(select_row(&[row(2, 0.1, 0.5, 10.0), row(3, 0.1, 0.6, 20.0)]), Some(1));
        assert_eq!(select_row(&[row(2, 0.1, 0.6, 20.0), row(3, 0.1, 0.6, 10.0)]), Some(1));
        assert_eq!(select_row(&[row(3, 0.1, 0.6, 10.0), row(2, 0.1, 0.6, 10.0)]), Some(1));
        assert_eq!(select_row(&[row(2, 0.01, 0.6, 10.0), row(2, 0.1, 0.6, 10.0)]), Some(1));
        assert_eq!(select_row(&[row(2, 0.1, 0.6, 10.0)]), Some(0));
        assert_eq!(select_row(&[]), None);
    }

    #[test]
    fn csv_row_round_trip() {
        let r = row(4, 1e-3, 0.123_456_789, 17.5).rounded();
        assert_eq!(r.to_csv(), "4,0.001,0.123457,17.500000");
        assert_eq!(GridRow::from_csv(&r.to_csv()).unwrap(), r);
    }
}
