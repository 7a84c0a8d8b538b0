//! `results.csv` and `interpret.csv`. Both start with `#` comment lines
//! carrying the run configuration, followed by the header row.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::downstream::interpret::ParcelWeight;
use crate::downstream::metrics::mean_sem;
use crate::error::Result;

pub const SUMMARY_SESSION: &str = "all";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub session: String,
    pub task: String,
    /// Finetuning seed, or `mean` / `sem` on summary rows.
    pub seed: String,
    pub metric: String,
    pub value: f64,
}

impl ResultRow {
    pub fn new(session: &str, task: &str, seed: u64, metric: &str, value: f64) -> Self {
        Self {
            session: session.into(),
            task: task.into(),
            seed: seed.to_string(),
            metric: metric.into(),
            value,
        }
    }

    pub fn is_summary(&self) -> bool {
        self.session == SUMMARY_SESSION && (self.seed == "mean" || self.seed == "sem")
    }
}

/// Mean and standard-error rows for every (task, metric) over the
/// non-summary rows, in first-appearance order.
pub fn summary_rows(rows: &[ResultRow]) -> Vec<ResultRow> {
    let mut keys: Vec<(String, String)> = Vec::new();
    let mut values: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in rows.iter().filter(|r| !r.is_summary()) {
        let k = (r.task.clone(), r.metric.clone());
        if !values.contains_key(&k) {
            keys.push(k.clone());
        }
        values.entry(k).or_default().push(r.value);
    }
    keys.into_iter()
        .flat_map(|k| {
            let (mean, sem) = mean_sem(&values[&k]);
            [("mean", mean), ("sem", sem)].map(|(seed, value)| ResultRow {
                session: SUMMARY_SESSION.into(),
                task: k.0.clone(),
                seed: seed.into(),
                metric: k.1.clone(),
                value,
            })
        })
        .collect()
}

fn create_with_comments(path: &Path, comments: &[String]) -> Result<File> {
    let mut f = File::create(path)?;
    for c in comments {
        for line in c.lines() {
            writeln!(f, "# {line}")?;
        }
    }
    Ok(f)
}

/// Writes `rows` followed by their summary rows.
pub fn write_results(path: &Path, comments: &[String], rows: &[ResultRow]) -> Result<()> {
    let f = create_with_comments(path, comments)?;
    let mut w = csv::Writer::from_writer(f);
    let per_seed: Vec<&ResultRow> = rows.iter().filter(|r| !r.is_summary()).collect();
    for r in &per_seed {
        w.serialize(r)?;
    }
    for r in summary_rows(rows) {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<ResultRow>, _>>()?)
}

/// The `#` comment lines at the top of a CSV file, without the marker.
pub fn read_comments(path: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        match line.strip_prefix('#') {
            Some(rest) => out.push(rest.strip_prefix(' ').unwrap_or(rest).to_string()),
            None => break,
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpretRow {
    pub session: String,
    pub patch_index: usize,
    pub parcel_id: String,
    pub normalized_weight: f64,
}

pub fn write_interpret(path: &Path, comments: &[String], tables: &[(String, Vec<ParcelWeight>)]) -> Result<()> {
    let f = create_with_comments(path, comments)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(f);
    w.write_record(["session", "patch_index", "parcel_id", "normalized_weight"])?;
    for (session, rows) in tables {
        for r in rows {
            w.serialize(InterpretRow {
                session: session.clone(),
                patch_index: r.patch_index,
                parcel_id: r.parcel_id.clone(),
                normalized_weight: r.normalized_weight,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_interpret(path: &Path) -> Result<Vec<InterpretRow>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<InterpretRow>, _>>()?)
}
