//! `series_id,t,x` CSV files.

use std::io::{Read, Write};
use std::path::Path;

use crate::base_process::TimeGrid;
use crate::error::{Error, Result};
use crate::sde::{PathMeta, PathSet};

pub const HEADER: [&str; 3] = ["series_id", "t", "x"];

pub fn write_csv<W: Write>(set: &PathSet, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HEADER)?;
    for (i, row) in set.values.iter().enumerate() {
        for (t, x) in set.grid.times().iter().zip(row) {
            w.write_record([i.to_string(), t.to_string(), x.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Header-only file: a dataset with no series.
pub fn write_empty<W: Write>(out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HEADER)?;
    w.flush()?;
    Ok(())
}

pub fn write_path(set: &PathSet, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_csv(set, std::io::BufWriter::new(f))
}

struct Series {
    id: String,
    times: Vec<f64>,
    xs: Vec<f64>,
}

/// Parses and validates a dataset. Series must be contiguous blocks with
/// strictly increasing `t`, and every series must share the same grid.
pub fn read_csv<R: Read>(input: R) -> Result<PathSet> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(input);
    let header = r.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(Error::Dataset(format!("row 1: expected header series_id,t,x, found {}", header.iter().collect::<Vec<_>>().join(","))));
    }
    let mut series: Vec<Series> = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let row = k + 2;
        let rec = rec.map_err(|e| Error::Dataset(format!("row {row}: {e}")))?;
        if rec.len() != 3 {
            return Err(Error::Dataset(format!("row {row}: expected 3 fields, found {}", rec.len())));
        }
        let id = rec[0].to_string();
        if id.is_empty() {
            return Err(Error::Dataset(format!("row {row}: empty series_id")));
        }
        let num = |field: &str, s: &str| -> Result<f64> {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Dataset(format!("row {row}: {field} = {s:?} is not a finite number (series {id})")))
        };
        let t = num("t", &rec[1])?;
        let x = num("x", &rec[2])?;
        match series.last_mut() {
            Some(s) if s.id == id => {
                let prev = *s.times.last().expect("series has rows");
                if t <= prev {
                    return Err(Error::Dataset(format!("row {row}: t = {t} does not increase after {prev} in series {id}")));
                }
                s.times.push(t);
                s.xs.push(x);
            }
            _ => {
                if series.iter().any(|s| s.id == id) {
                    return Err(Error::Dataset(format!("row {row}: rows of series {id} are not contiguous")));
                }
                series.push(Series { id, times: vec![t], xs: vec![x] });
            }
        }
    }
    let first = series.first().ok_or_else(|| Error::Dataset("dataset has no rows".into()))?;
    let offending: Vec<&str> = series.iter().filter(|s| s.times != first.times).map(|s| s.id.as_str()).collect();
    if !offending.is_empty() {
        return Err(Error::Dataset(format!(
            "series do not share the grid of series {}: {}",
            first.id,
            offending.join(", ")
        )));
    }
    let grid = TimeGrid::new(first.times.clone()).map_err(|e| Error::Dataset(format!("series {}: {e}", first.id)))?;
    PathSet::new(grid, series.into_iter().map(|s| s.xs).collect(), PathMeta::External)
}

pub fn read_path(path: &Path) -> Result<PathSet> {
    read_csv(std::fs::File::open(path)?)
}

/// `x_i <- log(x_i / x_{i-1})`; the grid loses its first point.
pub fn log_returns(set: &PathSet) -> Result<PathSet> {
    let times = set.grid.times();
    if times.len() < 2 {
        return Err(Error::Dataset("log returns need at least two observations per series".into()));
    }
    let mut values = Vec::with_capacity(set.n_paths());
    for (i, row) in set.values.iter().enumerate() {
        if let Some(j) = row.iter().position(|&x| x <= 0.0) {
            return Err(Error::Dataset(format!("series {i}: log returns need positive values, got {} at t = {}", row[j], times[j])));
        }
        values.push(row.windows(2).map(|w| (w[1] / w[0]).ln()).collect());
    }
    PathSet::new(TimeGrid::new(times[1..].to_vec())?, values, PathMeta::External)
}
