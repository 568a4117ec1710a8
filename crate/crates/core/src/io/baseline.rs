//! Baseline mean profile in CSV, one row per slot. Columns `slot` and `time`
//! are ignored. Either a single `house_w` column applies to every house, or
//! one column per node name gives the mean of each house at that node (W).

use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::network::FeederModel;

/// Returns the K x n matrix of per-house means in watts.
pub fn read_baseline(path: &Path, feeder: &FeederModel) -> Result<DMatrix<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_baseline(&text, path, feeder)
}

pub fn parse_baseline(text: &str, path: &Path, feeder: &FeederModel) -> Result<DMatrix<f64>> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| err(1, e.to_string()))?.clone();
    let h = feeder.node_count();
    // For every node, the column holding its per-house mean.
    let mut column_of = vec![usize::MAX; h];
    for (c, name) in headers.iter().enumerate() {
        match name {
            "slot" | "time" => {}
            "house_w" => column_of.iter_mut().for_each(|x| *x = c),
            other => {
                let node = (1..=h)
                    .find(|&i| feeder.name(i) == other)
                    .ok_or_else(|| err(1, format!("column `{other}` is not a node of the feeder")))?;
                column_of[node - 1] = c;
            }
        }
    }
    if let Some(i) = column_of.iter().position(|&c| c == usize::MAX) {
        if feeder.houses_per_node()[i] > 0 {
            return Err(err(1, format!("no baseline column for node {}", feeder.name(i + 1))));
        }
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| err(e.position().map_or(0, |p| p.line() as usize), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let mut row = vec![0.0; h];
        for (i, &c) in column_of.iter().enumerate() {
            if c == usize::MAX {
                continue;
            }
            let field = rec.get(c).unwrap_or("");
            let v: f64 = field
                .parse()
                .map_err(|_| err(line, format!("expected a number, found `{field}`")))?;
            if !(v >= 0.0) || !v.is_finite() {
                return Err(err(line, format!("baseline mean must be nonnegative, got {v}")));
            }
            row[i] = v;
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(err(0, "baseline profile has no rows".into()));
    }
    let nodes = feeder.house_nodes();
    Ok(DMatrix::from_fn(rows.len(), nodes.len(), |t, k| rows[t][nodes[k] - 1]))
}
