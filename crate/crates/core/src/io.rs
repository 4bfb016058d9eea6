//! CSV and JSON artifacts: tree files, data matrices, fit results, weight
//! tables, cross-validation tables and simulation metrics.
//!
//! Numbers are written with Rust's shortest round-trip formatting, so reading
//! a file back reproduces the exact values. Non-finite values use the literals
//! `inf`, `-inf` and `nan` in CSV files and the same strings in JSON.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::KrTexasModel;
use crate::pilot::AdaptiveWeights;
use crate::select::CvCell;
use crate::sim::MetricsRow;
use crate::tree::{AggregationTree, TreeError};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}, row {row}, column `{column}`: {message}")]
    Cell { path: PathBuf, row: usize, column: String, message: String },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {source}")]
    Tree { path: PathBuf, source: TreeError },
    #[error("leaf names in {path} do not match the tree: {message}")]
    LeafMismatch { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.to_path_buf(), source }
}

fn format_err(path: &Path, message: impl Into<String>) -> IoError {
    IoError::Format { path: path.to_path_buf(), message: message.into() }
}

/// Formats a float so that parsing it back gives the same bits (NaN payloads
/// aside).
pub fn format_f64(x: f64) -> String {
    if x.is_nan() {
        "nan".to_string()
    } else if x == f64::INFINITY {
        "inf".to_string()
    } else if x == f64::NEG_INFINITY {
        "-inf".to_string()
    } else {
        format!("{x}")
    }
}

pub fn parse_f64(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok()
}

struct Table {
    header: Vec<String>,
    /// Data rows with their 1-based line numbers in the file.
    rows: Vec<(usize, Vec<String>)>,
}

fn read_table(path: &Path) -> Result<Table, IoError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).trim(csv::Trim::All).from_reader(file);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| format_err(path, format!("cannot read header row: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(format_err(path, "missing header row"));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            format_err(path, format!("malformed CSV near line {line}: {e}"))
        })?;
        let line = rec.position().map_or(rows.len() + 2, |p| p.line() as usize);
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() != header.len() {
            return Err(format_err(
                path,
                format!("row {line} has {} fields but the header has {}", rec.len(), header.len()),
            ));
        }
        rows.push((line, rec.iter().map(str::to_string).collect()));
    }
    Ok(Table { header, rows })
}

fn cell_f64(path: &Path, line: usize, column: &str, raw: &str) -> Result<f64, IoError> {
    parse_f64(raw).ok_or_else(|| IoError::Cell {
        path: path.to_path_buf(),
        row: line,
        column: column.to_string(),
        message: format!("`{raw}` is not a number"),
    })
}

fn finite_cell(path: &Path, line: usize, column: &str, raw: &str) -> Result<f64, IoError> {
    let v = cell_f64(path, line, column, raw)?;
    if !v.is_finite() {
        return Err(IoError::Cell {
            path: path.to_path_buf(),
            row: line,
            column: column.to_string(),
            message: format!("`{raw}` is not finite"),
        });
    }
    Ok(v)
}

/// A numeric matrix with its column names.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedMatrix {
    pub columns: Vec<String>,
    pub values: Array2<f64>,
}

/// Reads a header-plus-rows CSV of finite numbers.
pub fn read_matrix(path: &Path) -> Result<NamedMatrix, IoError> {
    let table = read_table(path)?;
    let (n, p) = (table.rows.len(), table.header.len());
    if n == 0 {
        return Err(format_err(path, "no data rows"));
    }
    let mut values = Array2::zeros((n, p));
    for (i, (line, row)) in table.rows.iter().enumerate() {
        for (j, raw) in row.iter().enumerate() {
            values[[i, j]] = finite_cell(path, *line, &table.header[j], raw)?;
        }
    }
    Ok(NamedMatrix { columns: table.header, values })
}

pub fn write_matrix(path: &Path, columns: &[String], values: &Array2<f64>) -> Result<(), IoError> {
    let mut out = String::new();
    out.push_str(&columns.join(","));
    out.push('\n');
    for row in values.outer_iter() {
        let cells: Vec<String> = row.iter().map(|&v| format_f64(v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    write_string(path, &out)
}

/// Reads covariates and reorders the columns into the tree's leaf order. Every
/// leaf must appear exactly once in the header and nothing else may.
pub fn read_covariates(path: &Path, tree: &AggregationTree) -> Result<Array2<f64>, IoError> {
    let m = read_matrix(path)?;
    align_columns(path, &m, tree)
}

fn align_columns(path: &Path, m: &NamedMatrix, tree: &AggregationTree) -> Result<Array2<f64>, IoError> {
    let leaves = tree.leaf_names();
    let mismatch = |message: String| IoError::LeafMismatch { path: path.to_path_buf(), message };
    if m.columns.len() != leaves.len() {
        return Err(mismatch(format!("header has {} columns, the tree has {} leaves", m.columns.len(), leaves.len())));
    }
    let mut order = Vec::with_capacity(leaves.len());
    for leaf in &leaves {
        let hits: Vec<usize> = m.columns.iter().enumerate().filter(|(_, c)| *c == leaf).map(|(j, _)| j).collect();
        match hits.as_slice() {
            [j] => order.push(*j),
            [] => return Err(mismatch(format!("leaf `{leaf}` has no column"))),
            _ => return Err(mismatch(format!("leaf `{leaf}` appears in {} columns", hits.len()))),
        }
    }
    Ok(m.values.select(ndarray::Axis(1), &order))
}

/// Reads a single-column response file.
pub fn read_response(path: &Path) -> Result<Vec<f64>, IoError> {
    let m = read_matrix(path)?;
    if m.columns.len() != 1 {
        return Err(format_err(path, format!("expected one response column, found {}", m.columns.len())));
    }
    Ok(m.values.column(0).to_vec())
}

pub fn write_response(path: &Path, name: &str, y: &[f64]) -> Result<(), IoError> {
    let values = Array2::from_shape_vec((y.len(), 1), y.to_vec()).expect("column vector");
    write_matrix(path, &[name.to_string()], &values)
}

/// Header of the parent-list tree format.
pub const PARENT_LIST_HEADER: [&str; 4] = ["node", "parent", "is_leaf", "leaf_index"];

/// Reads a tree in either the parent-list format or the membership-matrix
/// format (a `node` column followed by one 0/1 column per leaf).
pub fn read_tree(path: &Path) -> Result<AggregationTree, IoError> {
    let table = read_table(path)?;
    if table.header.iter().map(String::as_str).eq(PARENT_LIST_HEADER) {
        parse_parent_list(path, &table)
    } else if table.header.first().map(String::as_str) == Some("node") {
        parse_membership(path, &table)
    } else {
        Err(format_err(
            path,
            format!(
                "unrecognised tree header {:?}; expected `{}` or `node,<leaf columns...>`",
                table.header,
                PARENT_LIST_HEADER.join(",")
            ),
        ))
    }
}

fn parse_bool(path: &Path, line: usize, column: &str, raw: &str) -> Result<bool, IoError> {
    match raw.to_ascii_lowercase().as_str() {
        "1" | "true" => Ok(true),
        "0" | "false" => Ok(false),
        _ => Err(IoError::Cell {
            path: path.to_path_buf(),
            row: line,
            column: column.to_string(),
            message: format!("`{raw}` is not a boolean (use 0/1 or true/false)"),
        }),
    }
}

fn parse_parent_list(path: &Path, table: &Table) -> Result<AggregationTree, IoError> {
    let mut parents = Vec::with_capacity(table.rows.len());
    let mut leaves: Vec<(usize, String)> = Vec::new();
    for (line, row) in &table.rows {
        let node = row[0].clone();
        if node.is_empty() {
            return Err(IoError::Cell {
                path: path.to_path_buf(),
                row: *line,
                column: "node".into(),
                message: "empty node name".into(),
            });
        }
        let parent = (!row[1].is_empty()).then(|| row[1].clone());
        let is_leaf = parse_bool(path, *line, "is_leaf", &row[2])?;
        match (is_leaf, row[3].is_empty()) {
            (true, false) => {
                let idx = row[3].parse::<usize>().ok().filter(|&i| i >= 1).ok_or_else(|| IoError::Cell {
                    path: path.to_path_buf(),
                    row: *line,
                    column: "leaf_index".into(),
                    message: format!("`{}` is not a positive integer", row[3]),
                })?;
                leaves.push((idx, node.clone()));
            }
            (true, true) => {
                return Err(IoError::Cell {
                    path: path.to_path_buf(),
                    row: *line,
                    column: "leaf_index".into(),
                    message: "leaf rows need a leaf_index".into(),
                })
            }
            (false, false) => {
                return Err(IoError::Cell {
                    path: path.to_path_buf(),
                    row: *line,
                    column: "leaf_index".into(),
                    message: "internal nodes must leave leaf_index blank".into(),
                })
            }
            (false, true) => {}
        }
        parents.push((node, parent));
    }
    leaves.sort();
    for (k, (idx, name)) in leaves.iter().enumerate() {
        if *idx != k + 1 {
            return Err(format_err(
                path,
                format!("leaf indices must be 1..{} without gaps; `{name}` has index {idx}", leaves.len()),
            ));
        }
    }
    let order: Vec<String> = leaves.into_iter().map(|(_, n)| n).collect();
    AggregationTree::from_parent_list(&parents, &order).map_err(|source| IoError::Tree { path: path.to_path_buf(), source })
}

fn parse_membership(path: &Path, table: &Table) -> Result<AggregationTree, IoError> {
    let p = table.header.len() - 1;
    if p == 0 {
        return Err(format_err(path, "membership matrix has no leaf columns"));
    }
    let t = table.rows.len();
    let mut a = Array2::<u8>::zeros((t, p));
    let mut names = Vec::with_capacity(t);
    for (r, (line, row)) in table.rows.iter().enumerate() {
        names.push(row[0].clone());
        for j in 0..p {
            a[[r, j]] = match row[j + 1].as_str() {
                "0" => 0,
                "1" => 1,
                raw => {
                    return Err(IoError::Cell {
                        path: path.to_path_buf(),
                        row: *line,
                        column: table.header[j + 1].clone(),
                        message: format!("`{raw}` is not 0 or 1"),
                    })
                }
            };
        }
    }
    let tree = AggregationTree::from_membership(&names, a.view())
        .map_err(|source| IoError::Tree { path: path.to_path_buf(), source })?;
    // The leaf rows are named by the node column; the header must agree.
    for (j, col) in table.header[1..].iter().enumerate() {
        let leaf = tree.name(tree.leaf_node(j));
        if leaf != col {
            return Err(format_err(path, format!("column `{col}` holds the leaf row named `{leaf}`")));
        }
    }
    Ok(tree)
}

/// Writes the tree in the parent-list format.
pub fn write_tree(path: &Path, tree: &AggregationTree) -> Result<(), IoError> {
    let mut out = PARENT_LIST_HEADER.join(",");
    out.push('\n');
    for v in 0..tree.node_count() {
        let parent = tree.parent(v).map_or("", |u| tree.name(u));
        let (is_leaf, idx) = match tree.leaf_column(v) {
            Some(c) => ("1", (c + 1).to_string()),
            None => ("0", String::new()),
        };
        out.push_str(&format!("{},{},{},{}\n", tree.name(v), parent, is_leaf, idx));
    }
    write_string(path, &out)
}

/// Writes the tree as a membership matrix with a `node` name column.
pub fn write_membership(path: &Path, tree: &AggregationTree) -> Result<(), IoError> {
    let mut out = String::from("node");
    for name in tree.leaf_names() {
        out.push(',');
        out.push_str(&name);
    }
    out.push('\n');
    let a = tree.membership();
    for (v, row) in a.outer_iter().enumerate() {
        out.push_str(tree.name(v));
        for x in row {
            out.push(',');
            out.push_str(if *x == 1 { "1" } else { "0" });
        }
        out.push('\n');
    }
    write_string(path, &out)
}

fn write_string(path: &Path, s: &str) -> Result<(), IoError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    w.write_all(s.as_bytes()).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

/// Serde adapters that keep non-finite floats representable in JSON.
pub mod float_json {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    fn to_repr(x: f64) -> Repr {
        if x.is_finite() {
            Repr::Num(x)
        } else {
            Repr::Text(super::format_f64(x))
        }
    }

    fn from_repr<E: serde::de::Error>(r: Repr) -> Result<f64, E> {
        match r {
            Repr::Num(x) => Ok(x),
            Repr::Text(s) => super::parse_f64(&s).ok_or_else(|| E::custom(format!("`{s}` is not a number"))),
        }
    }

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        to_repr(*x).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        from_repr(Repr::deserialize(d)?)
    }

    pub mod vec {
        use super::*;

        pub fn serialize<S: Serializer>(xs: &[f64], s: S) -> Result<S::Ok, S::Error> {
            s.collect_seq(xs.iter().map(|&x| to_repr(x)))
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            Vec::<Repr>::deserialize(d)?.into_iter().map(from_repr).collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeScore {
    pub node: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub lambda: f64,
    pub budget: usize,
    #[serde(with = "float_json")]
    pub sse: f64,
}

impl From<&CvCell> for CvRow {
    fn from(c: &CvCell) -> Self {
        Self { lambda: c.lambda, budget: c.budget, sse: c.sse }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeWeight {
    pub node: String,
    #[serde(with = "float_json")]
    pub c1: f64,
    #[serde(with = "float_json")]
    pub c2: f64,
    #[serde(with = "float_json")]
    pub c3: f64,
    #[serde(with = "float_json")]
    pub w_hat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultDiagnostics {
    pub objective: f64,
    pub loss: f64,
    /// Whether the penalty level came from cross-validation.
    pub cross_validated: bool,
    #[serde(with = "float_json::vec")]
    pub restart_objectives: Vec<f64>,
    pub restart_converged: Vec<bool>,
    pub converged: bool,
    pub retries: usize,
    pub pinned: Vec<String>,
    pub fallback_points: Vec<usize>,
    pub grid_adequate: bool,
    pub nestedness_violations: Vec<(String, String)>,
    pub pilot_leaf_loss: f64,
    pub pilot_ridged_points: usize,
    pub pilot_dropped_points: usize,
}

/// Everything a fit reports, keyed by node name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub lambda_star: f64,
    pub m_star: usize,
    pub nodes: Vec<String>,
    pub gamma_hat: Vec<f64>,
    pub selected: Vec<String>,
    pub importance: Vec<NodeScore>,
    pub cv_table: Vec<CvRow>,
    pub weights: Vec<NodeWeight>,
    pub diagnostics: ResultDiagnostics,
}

pub fn node_weights(tree: &AggregationTree, w: &AdaptiveWeights) -> Vec<NodeWeight> {
    (0..tree.node_count())
        .map(|v| NodeWeight { node: tree.name(v).to_string(), c1: w.c1[v], c2: w.c2[v], c3: w.c3[v], w_hat: w.w[v] })
        .collect()
}

impl FitResult {
    pub fn from_model(model: &KrTexasModel) -> Self {
        let tree = &model.tree;
        let fit = &model.fit;
        let name = |v: usize| tree.name(v).to_string();
        let d = &fit.diagnostics;
        Self {
            lambda_star: fit.lambda,
            m_star: fit.budget,
            nodes: tree.names().to_vec(),
            gamma_hat: fit.gamma_hat.clone(),
            selected: fit.selected.iter().map(|&v| name(v)).collect(),
            importance: fit.importance.iter().map(|i| NodeScore { node: name(i.node), score: i.score }).collect(),
            cv_table: model.selection.as_ref().map_or_else(Vec::new, |s| s.table.iter().map(CvRow::from).collect()),
            weights: node_weights(tree, &model.pilot.weights),
            diagnostics: ResultDiagnostics {
                objective: fit.objective,
                loss: fit.loss,
                cross_validated: model.selection.is_some(),
                restart_objectives: d.restart_objectives.clone(),
                restart_converged: d.restart_converged.clone(),
                converged: d.converged,
                retries: d.retries,
                pinned: d.pinned.iter().map(|&v| name(v)).collect(),
                fallback_points: d.fallback_points.clone(),
                grid_adequate: d.grid_adequate,
                nestedness_violations: d.nestedness_violations.iter().map(|&(a, b)| (name(a), name(b))).collect(),
                pilot_leaf_loss: model.pilot.leaf_loss,
                pilot_ridged_points: model.pilot.derivatives.ridged.len(),
                pilot_dropped_points: model.pilot.derivatives.dropped.len(),
            },
        }
    }

    /// Bandwidth in the node order of `tree`; the node sets must agree.
    pub fn gamma_for(&self, tree: &AggregationTree) -> Result<Vec<f64>, String> {
        if self.nodes.len() != tree.node_count() || self.gamma_hat.len() != self.nodes.len() {
            return Err(format!(
                "result has {} nodes and {} bandwidths, the tree has {} nodes",
                self.nodes.len(),
                self.gamma_hat.len(),
                tree.node_count()
            ));
        }
        let mut gamma = vec![0.0; tree.node_count()];
        for (name, &g) in self.nodes.iter().zip(&self.gamma_hat) {
            let v = tree.node(name).map_err(|e| e.to_string())?;
            gamma[v] = g;
        }
        Ok(gamma)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut s = serde_json::to_string_pretty(value).map_err(|source| IoError::Json { path: path.to_path_buf(), source })?;
    s.push('\n');
    write_string(path, &s)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut s = String::new();
    BufReader::new(file).read_to_string(&mut s).map_err(io_err(path))?;
    serde_json::from_str(&s).map_err(|source| IoError::Json { path: path.to_path_buf(), source })
}

pub const WEIGHTS_HEADER: [&str; 5] = ["node", "C1", "C2", "C3", "w_hat"];

pub fn write_weights(path: &Path, weights: &[NodeWeight]) -> Result<(), IoError> {
    let mut out = WEIGHTS_HEADER.join(",");
    out.push('\n');
    for w in weights {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            w.node,
            format_f64(w.c1),
            format_f64(w.c2),
            format_f64(w.c3),
            format_f64(w.w_hat)
        ));
    }
    write_string(path, &out)
}

pub fn read_weights(path: &Path) -> Result<Vec<NodeWeight>, IoError> {
    let table = read_table(path)?;
    if !table.header.iter().map(String::as_str).eq(WEIGHTS_HEADER) {
        return Err(format_err(path, format!("expected header `{}`", WEIGHTS_HEADER.join(","))));
    }
    table
        .rows
        .iter()
        .map(|(line, row)| {
            let f = |j: usize| cell_f64(path, *line, WEIGHTS_HEADER[j], &row[j]);
            Ok(NodeWeight { node: row[0].clone(), c1: f(1)?, c2: f(2)?, c3: f(3)?, w_hat: f(4)? })
        })
        .collect()
}

pub const CV_HEADER: [&str; 3] = ["lambda", "budget", "sse"];

pub fn write_cv_table(path: &Path, rows: &[CvRow]) -> Result<(), IoError> {
    let mut out = CV_HEADER.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{}\n", format_f64(r.lambda), r.budget, format_f64(r.sse)));
    }
    write_string(path, &out)
}

pub fn read_cv_table(path: &Path) -> Result<Vec<CvRow>, IoError> {
    let table = read_table(path)?;
    if !table.header.iter().map(String::as_str).eq(CV_HEADER) {
        return Err(format_err(path, format!("expected header `{}`", CV_HEADER.join(","))));
    }
    table
        .rows
        .iter()
        .map(|(line, row)| {
            let budget = row[1].parse::<usize>().map_err(|_| IoError::Cell {
                path: path.to_path_buf(),
                row: *line,
                column: "budget".into(),
                message: format!("`{}` is not a non-negative integer", row[1]),
            })?;
            Ok(CvRow { lambda: cell_f64(path, *line, "lambda", &row[0])?, budget, sse: cell_f64(path, *line, "sse", &row[2])? })
        })
        .collect()
}

pub const METRICS_HEADER: [&str; 10] = ["method", "setting", "covariance", "n", "replicate", "rmse", "sn", "sp", "prec", "npv"];

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<(), IoError> {
    let mut out = METRICS_HEADER.join(",");
    out.push('\n');
    for r in rows {
        let nums: Vec<String> = [r.rmse, r.sn, r.sp, r.prec, r.npv].iter().map(|&x| format_f64(x)).collect();
        out.push_str(&format!("{},{},{},{},{},{}\n", r.method, r.setting, r.covariance, r.n, r.replicate, nums.join(",")));
    }
    write_string(path, &out)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, IoError> {
    let table = read_table(path)?;
    if !table.header.iter().map(String::as_str).eq(METRICS_HEADER) {
        return Err(format_err(path, format!("expected header `{}`", METRICS_HEADER.join(","))));
    }
    table
        .rows
        .iter()
        .map(|(line, row)| {
            let int = |j: usize| {
                row[j].parse::<usize>().map_err(|_| IoError::Cell {
                    path: path.to_path_buf(),
                    row: *line,
                    column: METRICS_HEADER[j].into(),
                    message: format!("`{}` is not a non-negative integer", row[j]),
                })
            };
            let f = |j: usize| cell_f64(path, *line, METRICS_HEADER[j], &row[j]);
            Ok(MetricsRow {
                method: row[0].clone(),
                setting: row[1].clone(),
                covariance: row[2].clone(),
                n: int(3)?,
                replicate: int(4)?,
                rmse: f(5)?,
                sn: f(6)?,
                sp: f(7)?,
                prec: f(8)?,
                npv: f(9)?,
            })
        })
        .collect()
}

/// Predictions with the fallback flag for rows whose kernel weights vanished.
pub fn write_predictions(path: &Path, values: &[f64], fallback: &[bool]) -> Result<(), IoError> {
    let mut out = String::from("prediction,fallback\n");
    for (v, f) in values.iter().zip(fallback) {
        out.push_str(&format!("{},{}\n", format_f64(*v), u8::from(*f)));
    }
    write_string(path, &out)
}

pub fn read_predictions(path: &Path) -> Result<(Vec<f64>, Vec<bool>), IoError> {
    let table = read_table(path)?;
    if table.header != ["prediction", "fallback"] {
        return Err(format_err(path, "expected header `prediction,fallback`"));
    }
    let mut values = Vec::with_capacity(table.rows.len());
    let mut flags = Vec::with_capacity(table.rows.len());
    for (line, row) in &table.rows {
        values.push(cell_f64(path, *line, "prediction", &row[0])?);
        flags.push(parse_bool(path, *line, "fallback", &row[1])?);
    }
    Ok((values, flags))
}
