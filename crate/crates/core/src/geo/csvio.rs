//! Dataset and knot CSV files.
//!
//! Datasets use the header `machine_id,s1,s2,z,x1,...,xp`; the machine column
//! may be omitted on input and `-1` marks an unassigned row. Knot files use
//! `s1,s2`. Floats are written with 17 significant digits so that a read
//! after a write reproduces every value exactly.

use std::fs::File;
use std::path::Path;

use super::{KnotSet, Location, SpatialDataset};
use crate::error::{Error, Result};
use crate::linalg::{Mat, Vector};

pub const UNASSIGNED: i64 = -1;

/// Rows of a dataset file together with their machine labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFile {
    pub data: SpatialDataset,
    pub machine_ids: Vec<i64>,
}

impl DatasetFile {
    pub fn unassigned(data: SpatialDataset) -> Self {
        let machine_ids = vec![UNASSIGNED; data.len()];
        DatasetFile { data, machine_ids }
    }

    /// Labels the rows of `parts` with their index and stacks them.
    pub fn from_parts(parts: &[SpatialDataset]) -> Result<Self> {
        let data = SpatialDataset::concat(parts)?;
        let machine_ids = parts.iter().enumerate().flat_map(|(j, d)| std::iter::repeat_n(j as i64, d.len())).collect();
        Ok(DatasetFile { data, machine_ids })
    }

    pub fn is_partitioned(&self) -> bool {
        self.machine_ids.iter().all(|&id| id >= 0)
    }

    /// Splits the rows by machine label. Labels must be 0..J-1 with every
    /// machine holding at least one row.
    pub fn split(&self) -> Result<Vec<SpatialDataset>> {
        if !self.is_partitioned() {
            return Err(Error::arg("dataset has unassigned rows (machine_id = -1)"));
        }
        let n_machines = self.machine_ids.iter().max().map_or(0, |&m| m as usize + 1);
        let mut rows = vec![Vec::new(); n_machines];
        for (i, &id) in self.machine_ids.iter().enumerate() {
            rows[id as usize].push(i);
        }
        if let Some(j) = rows.iter().position(Vec::is_empty) {
            return Err(Error::arg(format!("machine {j} holds no rows")));
        }
        Ok(rows.iter().map(|r| self.data.select(r)).collect())
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => io_err(path, source),
        other => Error::Parse { path: path.to_path_buf(), message: format!("{other:?}") },
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

pub fn write_dataset_csv(path: &Path, file: &DatasetFile) -> Result<()> {
    let data = &file.data;
    if file.machine_ids.len() != data.len() {
        return Err(Error::arg("one machine label per row is required"));
    }
    let p = data.n_covariates();
    let mut w = writer(path)?;
    let mut header = vec!["machine_id".to_string(), "s1".into(), "s2".into(), "z".into()];
    header.extend((1..=p).map(|k| format!("x{k}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for i in 0..data.len() {
        let loc = data.locations[i].coords;
        let mut rec = vec![file.machine_ids[i].to_string(), fmt(loc[0]), fmt(loc[1]), fmt(data.z[i])];
        rec.extend((0..p).map(|k| fmt(data.x[(i, k)])));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_dataset_csv(path: &Path) -> Result<DatasetFile> {
    let parse_err = |msg: String| Error::Parse { path: path.to_path_buf(), message: msg };
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| csv_err(path, e))?;
    let header: Vec<String> = rdr.headers().map_err(|e| csv_err(path, e))?.iter().map(str::to_string).collect();
    let has_id = header.first().map(String::as_str) == Some("machine_id");
    let off = usize::from(has_id);
    if header.len() < off + 3 || header[off..off + 3] != ["s1", "s2", "z"] {
        return Err(parse_err(format!("expected header `machine_id,s1,s2,z,x1,...`, found `{}`", header.join(","))));
    }
    let p = header.len() - off - 3;
    for (k, name) in header[off + 3..].iter().enumerate() {
        if *name != format!("x{}", k + 1) {
            return Err(parse_err(format!("covariate column {} is named `{name}`, expected `x{}`", k + 1, k + 1)));
        }
    }
    let mut ids = Vec::new();
    let mut locs = Vec::new();
    let mut z = Vec::new();
    let mut xs = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = row + 2;
        if rec.len() != header.len() {
            return Err(parse_err(format!("line {line}: {} fields, expected {}", rec.len(), header.len())));
        }
        let num = |k: usize| -> Result<f64> {
            rec[k].parse::<f64>().map_err(|_| parse_err(format!("line {line}: `{}` is not a number", &rec[k])))
        };
        if has_id {
            let id: i64 = rec[0].parse().map_err(|_| parse_err(format!("line {line}: bad machine_id `{}`", &rec[0])))?;
            if id < UNASSIGNED {
                return Err(parse_err(format!("line {line}: machine_id {id} is negative")));
            }
            ids.push(id);
        } else {
            ids.push(UNASSIGNED);
        }
        locs.push(Location::new(num(off)?, num(off + 1)?));
        z.push(num(off + 2)?);
        for k in 0..p {
            xs.push(num(off + 3 + k)?);
        }
    }
    let n = z.len();
    let x = Mat::from_row_slice(n, p, &xs);
    let data = SpatialDataset::new(locs, Vector::from_vec(z), x).map_err(|e| parse_err(e.to_string()))?;
    Ok(DatasetFile { data, machine_ids: ids })
}

/// Prediction sites: `s1,s2,x1,...,xp`, optionally with `machine_id` and
/// `z` columns (both ignored).
pub fn read_points_csv(path: &Path) -> Result<(Vec<Location>, Mat)> {
    let parse_err = |msg: String| Error::Parse { path: path.to_path_buf(), message: msg };
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| csv_err(path, e))?;
    let header: Vec<String> = rdr.headers().map_err(|e| csv_err(path, e))?.iter().map(str::to_string).collect();
    let col = |name: &str| header.iter().position(|h| h == name);
    let (s1, s2) = match (col("s1"), col("s2")) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(parse_err("missing `s1`/`s2` columns".into())),
    };
    let mut xcols = Vec::new();
    while let Some(c) = col(&format!("x{}", xcols.len() + 1)) {
        xcols.push(c);
    }
    let known = 2 + xcols.len() + usize::from(col("z").is_some()) + usize::from(col("machine_id").is_some());
    if known != header.len() {
        return Err(parse_err(format!("unexpected columns in header `{}`", header.join(","))));
    }
    let mut locs = Vec::new();
    let mut xs = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let num = |k: usize| -> Result<f64> {
            rec.get(k)
                .and_then(|v| v.parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(format!("line {}: bad value in column {}", row + 2, header[k])))
        };
        locs.push(Location::new(num(s1)?, num(s2)?));
        for &c in &xcols {
            xs.push(num(c)?);
        }
    }
    if locs.is_empty() {
        return Err(parse_err("no prediction sites".into()));
    }
    let x = Mat::from_row_slice(locs.len(), xcols.len(), &xs);
    Ok((locs, x))
}

pub fn write_knots_csv(path: &Path, knots: &KnotSet) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["s1", "s2"]).map_err(|e| csv_err(path, e))?;
    for k in knots.locations() {
        w.write_record([fmt(k.coords[0]), fmt(k.coords[1])]).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_knots_csv(path: &Path) -> Result<KnotSet> {
    let parse_err = |msg: String| Error::Parse { path: path.to_path_buf(), message: msg };
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| csv_err(path, e))?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().collect::<Vec<_>>() != ["s1", "s2"] {
        return Err(parse_err(format!("expected header `s1,s2`, found `{}`", header.iter().collect::<Vec<_>>().join(","))));
    }
    let mut knots = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let coord = |k: usize| rec.get(k).and_then(|v| v.parse::<f64>().ok());
        match (rec.len(), coord(0), coord(1)) {
            (2, Some(a), Some(b)) => knots.push(Location::new(a, b)),
            _ => return Err(parse_err(format!("line {}: expected two numbers", row + 2))),
        }
    }
    KnotSet::new(knots).map_err(|e| parse_err(e.to_string()))
}
