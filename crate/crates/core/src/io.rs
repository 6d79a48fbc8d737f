//! File formats.
//!
//! A dataset directory holds `index.json` plus one CSV per subject. Each CSV
//! has a header `gene,<t_1>,...,<t_q_i>` and one row per gene. Floats are
//! written with Rust's shortest round-trip formatting, so parsing an emitted
//! file reproduces the values exactly.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diagnostics::{CellQuantiles, LoadingSummary};
use crate::error::{Error, Result};
use crate::kcf::TimeGrid;
use crate::model::Dataset;
use crate::simulate::HeldOut;

pub const INDEX_FILE: &str = "index.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    pub file: String,
    /// Positions of this subject's columns in the pooled grid.
    pub time_indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub times: Vec<f64>,
    pub genes: Vec<String>,
    pub subjects: Vec<SubjectEntry>,
}

fn parse_err(what: impl Into<String>, detail: impl std::fmt::Display) -> Error {
    Error::Parse { what: what.into(), detail: detail.to_string() }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    parse_err(path.display().to_string(), e)
}

fn ids_or_default(ids: &[String], n: usize, prefix: &str) -> Vec<String> {
    if ids.len() == n {
        ids.to_vec()
    } else {
        (0..n).map(|i| format!("{prefix}{}", i + 1)).collect()
    }
}

pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    data.validate()?;
    fs::create_dir_all(dir)?;
    let subjects = ids_or_default(&data.subject_ids, data.n(), "subject");
    let genes = ids_or_default(&data.gene_ids, data.p(), "gene");
    let mut entries = Vec::with_capacity(data.n());
    for (i, id) in subjects.iter().enumerate() {
        let file = format!("subject_{:03}.csv", i + 1);
        let path = dir.join(&file);
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
        let mut header = vec!["gene".to_string()];
        header.extend(data.grid.subjects[i].iter().map(|&j| data.grid.times[j].to_string()));
        w.write_record(&header).map_err(|e| csv_err(&path, e))?;
        for (g, gene) in genes.iter().enumerate() {
            let mut rec = vec![gene.clone()];
            rec.extend(data.x[i].row(g).iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(|e| csv_err(&path, e))?;
        }
        w.flush()?;
        entries.push(SubjectEntry { id: id.clone(), file, time_indices: data.grid.subjects[i].clone() });
    }
    let index = DatasetIndex { times: data.grid.times.clone(), genes, subjects: entries };
    write_json(&dir.join(INDEX_FILE), &index)
}

fn parse_f64(s: &str, what: &Path) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|e| parse_err(what.display().to_string(), format!("'{s}': {e}")))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let index: DatasetIndex = read_json(&dir.join(INDEX_FILE))?;
    let p = index.genes.len();
    let mut x = Vec::with_capacity(index.subjects.len());
    for s in &index.subjects {
        let path = dir.join(&s.file);
        let mut r = csv::Reader::from_path(&path).map_err(|e| csv_err(&path, e))?;
        let header = r.headers().map_err(|e| csv_err(&path, e))?.clone();
        let times: Vec<f64> = header.iter().skip(1).map(|h| parse_f64(h, &path)).collect::<Result<_>>()?;
        if times.len() != s.time_indices.len() {
            return Err(parse_err(path.display().to_string(), "header and index disagree on the number of times"));
        }
        for (t, &j) in times.iter().zip(&s.time_indices) {
            if index.times.get(j) != Some(t) {
                return Err(parse_err(
                    path.display().to_string(),
                    format!("time {t} does not match pooled position {j}"),
                ));
            }
        }
        let mut m = DMatrix::zeros(p, times.len());
        let mut rows = 0;
        for (g, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| csv_err(&path, e))?;
            if g >= p {
                return Err(parse_err(path.display().to_string(), "more gene rows than the index lists"));
            }
            if rec.get(0) != Some(index.genes[g].as_str()) {
                return Err(parse_err(
                    path.display().to_string(),
                    format!("row {} is not gene '{}'", g + 1, index.genes[g]),
                ));
            }
            if rec.len() != times.len() + 1 {
                return Err(parse_err(path.display().to_string(), format!("row {} has {} fields", g + 1, rec.len())));
            }
            for (c, v) in rec.iter().skip(1).enumerate() {
                m[(g, c)] = parse_f64(v, &path)?;
            }
            rows += 1;
        }
        if rows != p {
            return Err(parse_err(path.display().to_string(), format!("{rows} gene rows, expected {p}")));
        }
        x.push(m);
    }
    let grid = TimeGrid::new(index.times, index.subjects.iter().map(|s| s.time_indices.clone()).collect())?;
    let data =
        Dataset { grid, x, subject_ids: index.subjects.iter().map(|s| s.id.clone()).collect(), gene_ids: index.genes };
    data.validate()?;
    Ok(data)
}

/// Held-out data shares the dataset layout with every subject on `times`.
pub fn write_held_out(dir: &Path, held: &HeldOut, like: &Dataset) -> Result<()> {
    let grid = TimeGrid::common(held.times.clone(), held.x.len())?;
    let mut data = Dataset::new(grid, held.x.clone())?;
    data.subject_ids = like.subject_ids.clone();
    data.gene_ids = like.gene_ids.clone();
    write_dataset(dir, &data)
}

pub fn read_held_out(dir: &Path) -> Result<HeldOut> {
    let data = read_dataset(dir)?;
    if data.grid.subjects.iter().any(|s| s.len() != data.q()) {
        return Err(parse_err(dir.display().to_string(), "held-out subjects must all cover every time"));
    }
    Ok(HeldOut { times: data.grid.times, x: data.x })
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let r = BufReader::new(File::open(path)?);
    Ok(serde_json::from_reader(r)?)
}

/// One compact JSON document per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Square matrix with a label column and header.
pub fn write_labeled_matrix(path: &Path, labels: &[String], m: &DMatrix<f64>) -> Result<()> {
    if labels.len() != m.nrows() || m.nrows() != m.ncols() {
        return Err(Error::dim("labels must match a square matrix"));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec![String::new()];
    header.extend(labels.iter().cloned());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (r, label) in labels.iter().enumerate() {
        let mut rec = vec![label.clone()];
        rec.extend(m.row(r).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_labeled_matrix(path: &Path) -> Result<(Vec<String>, DMatrix<f64>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let labels: Vec<String> = r.headers().map_err(|e| csv_err(path, e))?.iter().skip(1).map(String::from).collect();
    let k = labels.len();
    let mut m = DMatrix::zeros(k, k);
    let mut rows = 0;
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if i >= k || rec.len() != k + 1 {
            return Err(parse_err(path.display().to_string(), "matrix is not square"));
        }
        for (j, v) in rec.iter().skip(1).enumerate() {
            m[(i, j)] = parse_f64(v, path)?;
        }
        rows += 1;
    }
    if rows != k {
        return Err(parse_err(path.display().to_string(), "matrix is not square"));
    }
    Ok((labels, m))
}

pub fn factor_labels(k: usize) -> Vec<String> {
    (1..=k).map(|a| format!("factor{a}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadingRow {
    pub gene: String,
    pub factor: usize,
    pub zeroed: bool,
    pub mean: f64,
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
    pub rhat: Option<f64>,
    pub significant: bool,
}

pub fn loading_rows(summary: &LoadingSummary, genes: &[String]) -> Vec<LoadingRow> {
    let genes = ids_or_default(genes, summary.p, "gene");
    summary
        .entries
        .iter()
        .map(|e| LoadingRow {
            gene: genes[e.gene].clone(),
            factor: e.factor + 1,
            zeroed: e.zeroed,
            mean: e.mean,
            median: e.median,
            lower: e.lower,
            upper: e.upper,
            rhat: e.rhat.map(|r| r.value),
            significant: e.significant,
        })
        .collect()
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

/// One cell of a quantile table: `row` is a gene or factor label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileRow {
    pub subject: String,
    pub row: String,
    pub time: f64,
    pub lower: f64,
    pub median: f64,
    pub upper: f64,
}

pub fn quantile_rows(
    q: &CellQuantiles,
    subjects: &[String],
    rows: &[String],
    times: &[f64],
) -> Result<Vec<QuantileRow>> {
    let subjects = ids_or_default(subjects, q.median.len(), "subject");
    let mut out = Vec::new();
    for (i, m) in q.median.iter().enumerate() {
        if m.nrows() != rows.len() || m.ncols() != times.len() {
            return Err(Error::dim(format!("subject {i}: quantile table does not match labels")));
        }
        for (r, label) in rows.iter().enumerate() {
            for (c, &t) in times.iter().enumerate() {
                out.push(QuantileRow {
                    subject: subjects[i].clone(),
                    row: label.clone(),
                    time: t,
                    lower: q.lower[i][(r, c)],
                    median: m[(r, c)],
                    upper: q.upper[i][(r, c)],
                });
            }
        }
    }
    Ok(out)
}

/// Inverse of [`quantile_rows`] given the expected shape.
pub fn quantiles_from_rows(rows: &[QuantileRow], n: usize, r: usize, t: usize) -> Result<CellQuantiles> {
    if rows.len() != n * r * t {
        return Err(Error::dim(format!("expected {} rows, found {}", n * r * t, rows.len())));
    }
    let mut q = CellQuantiles {
        lower: vec![DMatrix::zeros(r, t); n],
        median: vec![DMatrix::zeros(r, t); n],
        upper: vec![DMatrix::zeros(r, t); n],
    };
    for (idx, row) in rows.iter().enumerate() {
        let (i, rest) = (idx / (r * t), idx % (r * t));
        let (a, c) = (rest / t, rest % t);
        q.lower[i][(a, c)] = row.lower;
        q.median[i][(a, c)] = row.median;
        q.upper[i][(a, c)] = row.upper;
    }
    Ok(q)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Hash of the compact JSON encoding of a configuration.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(config)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config_sha256: String,
    pub config: serde_json::Value,
    pub outputs: Vec<OutputFile>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn new<T: Serialize>(command: &str, seed: u64, config: &T) -> Result<Self> {
        Ok(Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config_sha256: config_hash(config)?,
            config: serde_json::to_value(config)?,
            outputs: Vec::new(),
        })
    }

    /// Records every regular file under `dir` (except the manifest itself)
    /// with its hash, in sorted path order.
    pub fn record_outputs(&mut self, dir: &Path) -> Result<()> {
        let mut files = Vec::new();
        collect_files(dir, dir, &mut files)?;
        files.sort();
        self.outputs = files
            .into_iter()
            .filter(|f| f != Path::new(MANIFEST_FILE))
            .map(|f| {
                Ok(OutputFile { file: f.to_string_lossy().replace('\\', "/"), sha256: sha256_file(&dir.join(&f))? })
            })
            .collect::<Result<_>>()?;
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(MANIFEST_FILE), self)
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            out.push(path.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}
