//! On-disk formats: edge lists, logit/probability CSVs, label CSVs, mask
//! JSON, the CGM1 binary matrix container, and the derived output files
//! (temperatures, traces, reliability bins, partitions).
//!
//! All writers produce canonical bytes: loading a canonical file and
//! re-serializing it is bit-for-bit idempotent.

use crate::error::{AppError, Result};
use advcali_core::community::Partition;
use advcali_core::graph::{Graph, NodeDataset};
use advcali_core::metrics::BinStats;
use advcali_core::tensor::Tensor;
use advcali_core::trainer::TrainTrace;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path)
        .map_err(|e| AppError::Io(format!("{}: {e}", path.display())))
}

fn parse_err(path: &Path, line: usize, msg: impl AsRef<str>) -> AppError {
    AppError::Parse(format!("{} line {line}: {}", path.display(), msg.as_ref()))
}

/// Parse `edges.tsv`: `src<TAB>dst[<TAB>weight]` per line, `#` comments.
pub fn read_edges(path: &Path) -> Result<Vec<(usize, usize, f64)>> {
    let text = read_to_string(path)?;
    let mut edges = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 && fields.len() != 3 {
            return Err(parse_err(
                path,
                lineno + 1,
                format!("expected 2 or 3 tab-separated fields, got {}", fields.len()),
            ));
        }
        let src: usize = fields[0]
            .parse()
            .map_err(|_| parse_err(path, lineno + 1, format!("bad node id '{}'", fields[0])))?;
        let dst: usize = fields[1]
            .parse()
            .map_err(|_| parse_err(path, lineno + 1, format!("bad node id '{}'", fields[1])))?;
        let weight: f64 = match fields.get(2) {
            Some(w) => w
                .parse()
                .map_err(|_| parse_err(path, lineno + 1, format!("bad weight '{w}'")))?,
            None => 1.0,
        };
        edges.push((src, dst, weight));
    }
    Ok(edges)
}

/// Write a graph as a canonical edge list (each undirected edge once,
/// ascending, weight column only when not 1).
pub fn write_edges(path: &Path, g: &Graph) -> Result<()> {
    let mut out = String::new();
    for i in 0..g.num_nodes() {
        for (j, w) in g.neighbors(i) {
            if j > i {
                if w == 1.0 {
                    out.push_str(&format!("{i}\t{j}\n"));
                } else {
                    out.push_str(&format!("{i}\t{j}\t{w}\n"));
                }
            }
        }
    }
    fs::write(path, out).map_err(|e| AppError::Io(format!("{}: {e}", path.display())))
}

/// Read a matrix CSV with header `<tag>,N,C`.
pub fn read_matrix_csv(path: &Path, tag: &str) -> Result<Tensor> {
    let text = read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "missing header"))?;
    let parts: Vec<&str> = header.trim().split(',').collect();
    if parts.len() != 3 || parts[0] != tag {
        return Err(parse_err(path, 1, format!("expected header '{tag},N,C'")));
    }
    let n: usize = parts[1]
        .parse()
        .map_err(|_| parse_err(path, 1, "bad row count in header"))?;
    let c: usize = parts[2]
        .parse()
        .map_err(|_| parse_err(path, 1, "bad column count in header"))?;
    let mut data = Vec::with_capacity(n * c);
    let mut rows = 0usize;
    for (lineno, raw) in lines {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != c {
            return Err(parse_err(
                path,
                lineno + 1,
                format!("expected {c} values, got {}", fields.len()),
            ));
        }
        for f in fields {
            let v: f64 = f
                .parse()
                .map_err(|_| parse_err(path, lineno + 1, format!("bad real '{f}'")))?;
            data.push(v);
        }
        rows += 1;
    }
    if rows != n {
        return Err(AppError::Parse(format!(
            "{}: header declares {n} rows but {rows} present",
            path.display()
        )));
    }
    Tensor::from_vec(n, c, data).map_err(AppError::from)
}

/// Write a matrix CSV with header `<tag>,N,C`. Values use the shortest
/// round-trippable decimal form.
pub fn write_matrix_csv(path: &Path, tag: &str, m: &Tensor) -> Result<()> {
    let mut out = format!("{tag},{},{}\n", m.rows(), m.cols());
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|v| format_f64(*v)).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| AppError::Io(format!("{}: {e}", path.display())))
}

/// Shortest decimal that parses back to the same f64.
pub fn format_f64(v: f64) -> String {
    let mut s = format!("{v}");
    if !s.contains('.') && !s.contains('e') && !s.contains("inf") && !s.contains("NaN") {
        s.push_str(".0");
    }
    s
}

/// Read `labels.csv`: header `labels,N`, then one integer (or -1) per line.
pub fn read_labels(path: &Path) -> Result<Vec<i64>> {
    let text = read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "missing header"))?;
    let parts: Vec<&str> = header.trim().split(',').collect();
    if parts.len() != 2 || parts[0] != "labels" {
        return Err(parse_err(path, 1, "expected header 'labels,N'"));
    }
    let n: usize = parts[1]
        .parse()
        .map_err(|_| parse_err(path, 1, "bad count in header"))?;
    let mut labels = Vec::with_capacity(n);
    for (lineno, raw) in lines {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let v: i64 = line
            .parse()
            .map_err(|_| parse_err(path, lineno + 1, format!("bad label '{line}'")))?;
        labels.push(v);
    }
    if labels.len() != n {
        return Err(AppError::Parse(format!(
            "{}: header declares {n} labels but {} present",
            path.display(),
            labels.len()
        )));
    }
    Ok(labels)
}

pub fn write_labels(path: &Path, labels: &[i64]) -> Result<()> {
    let mut out = format!("labels,{}\n", labels.len());
    for l in labels {
        out.push_str(&format!("{l}\n"));
    }
    fs::write(path, out).map_err(|e| AppError::Io(format!("{}: {e}", path.display())))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MasksFile {
    pub labeled: Vec<usize>,
    pub test: Vec<usize>,
}

/// Read `masks.json`; indices must be sorted ascending and disjoint.
pub fn read_masks(path: &Path, n: usize) -> Result<(Vec<bool>, Vec<bool>)> {
    let text = read_to_string(path)?;
    let masks: MasksFile = serde_json::from_str(&text)
        .map_err(|e| AppError::Parse(format!("{}: {e}", path.display())))?;
    let mut to_mask = |name: &str, idx: &[usize]| -> Result<Vec<bool>> {
        let mut mask = vec![false; n];
        let mut prev: Option<usize> = None;
        for &i in idx {
            if i >= n {
                return Err(AppError::Parse(format!(
                    "{}: {name} index {i} outside [0, {n})",
                    path.display()
                )));
            }
            if let Some(p) = prev {
                if i <= p {
                    return Err(AppError::Parse(format!(
                        "{}: {name} indices not sorted ascending at {i}",
                        path.display()
                    )));
                }
            }
            prev = Some(i);
            mask[i] = true;
        }
        Ok(mask)
    };
    let labeled = to_mask("labeled", &masks.labeled)?;
    let test = to_mask("test", &masks.test)?;
    if labeled.iter().zip(&test).any(|(&a, &b)| a && b) {
        return Err(AppError::Parse(format!(
            "{}: labeled and test masks overlap",
            path.display()
        )));
    }
    Ok((labeled, test))
}

pub fn write_masks(path: &Path, labeled: &[bool], test: &[bool]) -> Result<()> {
    let file = MasksFile {
        labeled: indices(labeled),
        test: indices(test),
    };
    let json = serde_json::to_string_pretty(&file)?;
    fs::write(path, json + "\n").map_err(|e| AppError::Io(format!("{}: {e}", path.display())))
}

fn indices(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect()
}

const CGM_MAGIC: &[u8; 4] = b"CGM1";

/// Write the CGM1 binary matrix: 16-byte header (magic, rows, cols as u32
/// little-endian, 4 reserved zero bytes) then row-major f64 little-endian.
pub fn write_matrix_bin<W: Write>(out: &mut W, m: &Tensor) -> Result<()> {
    out.write_all(CGM_MAGIC)?;
    out.write_all(&(m.rows() as u32).to_le_bytes())?;
    out.write_all(&(m.cols() as u32).to_le_bytes())?;
    out.write_all(&[0u8; 4])?;
    for v in m.values() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_matrix_bin<R: Read>(input: &mut R) -> Result<Tensor> {
    let mut header = [0u8; 16];
    input
        .read_exact(&mut header)
        .map_err(|e| AppError::Parse(format!("binary matrix header: {e}")))?;
    if &header[0..4] != CGM_MAGIC {
        return Err(AppError::Parse("bad magic in binary matrix".into()));
    }
    let rows = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let mut data = vec![0.0f64; rows * cols];
    let mut buf = [0u8; 8];
    for v in data.iter_mut() {
        input
            .read_exact(&mut buf)
            .map_err(|e| AppError::Parse(format!("binary matrix payload: {e}")))?;
        *v = f64::from_le_bytes(buf);
    }
    Ok(Tensor::from_vec(rows, cols, data)?)
}

/// Load and validate the four dataset files. The label header fixes N.
pub fn load_dataset(
    graph_path: &Path,
    logits_path: &Path,
    labels_path: &Path,
    masks_path: &Path,
) -> Result<(Graph, NodeDataset)> {
    let labels = read_labels(labels_path)?;
    let n = labels.len();
    let edges = read_edges(graph_path)?;
    let graph = Graph::from_edges(n, &edges).map_err(AppError::from)?;
    let logits = read_matrix_csv(logits_path, "logits")?;
    if logits.rows() != n {
        return Err(AppError::Parse(format!(
            "logits have {} rows but the dataset has {n} nodes",
            logits.rows()
        )));
    }
    let (labeled, test) = read_masks(masks_path, n)?;
    let num_classes = logits.cols();
    let ds = NodeDataset::new(logits, labels, labeled, test, num_classes)?;
    Ok((graph, ds))
}

/// Standard file names inside a dataset directory.
pub mod names {
    pub const EDGES: &str = "edges.tsv";
    pub const LOGITS: &str = "logits.csv";
    pub const LABELS: &str = "labels.csv";
    pub const MASKS: &str = "masks.json";
    pub const PROBS: &str = "probs.csv";
    pub const TEMPERATURES: &str = "temperatures.csv";
    pub const TRACE: &str = "trace.csv";
    pub const CHECKPOINT: &str = "checkpoint.bin";
    pub const METRICS: &str = "metrics.json";
    pub const RELIABILITY: &str = "reliability.csv";
    pub const PARTITION: &str = "partition.csv";
    pub const MANIFEST: &str = "manifest.json";
    pub const PROVENANCE: &str = "provenance.json";
    pub const CV_RESULT: &str = "cv.json";
    pub const CV_RECORDS: &str = "cv_records.jsonl";
    pub const DIAGNOSTICS: &str = "diagnostics.csv";
}

/// Load a dataset directory laid out with the standard names.
pub fn load_dataset_dir(dir: &Path) -> Result<(Graph, NodeDataset)> {
    load_dataset(
        &dir.join(names::EDGES),
        &dir.join(names::LOGITS),
        &dir.join(names::LABELS),
        &dir.join(names::MASKS),
    )
}

pub fn write_temperatures(path: &Path, temps: &[f64]) -> Result<()> {
    let mut out = String::from("node,t\n");
    for (i, t) in temps.iter().enumerate() {
        out.push_str(&format!("{i},{}\n", format_f64(*t)));
    }
    fs::write(path, out).map_err(|e| AppError::Io(format!("{}: {e}", path.display())))
}

fn opt_field(v: Option<f64>) -> String {
    v.map(|x| format_f64(x)).unwrap_or_default()
}

/// Training trace CSV: `epoch,ce,group_ece,total,degree_std,class0_std`;
/// undefined diagnostics leave their field empty.
pub fn write_trace(path: &Path, trace: &TrainTrace) -> Result<()> {
    let mut out = String::from("epoch,ce,group_ece,total,degree_std,class0_std\n");
    for r in &trace.records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch,
            format_f64(r.ce),
            opt_field(r.group_ece),
            format_f64(r.total),
            opt_field(r.degree_std),
            opt_field(r.class0_std),
        ));
    }
    fs::write(path, out).map_err(|e| AppError::Io(format!("{}: {e}", path.display())))
}

/// A parsed trace row (the diagnose command reads traces back).
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub epoch: usize,
    pub ce: f64,
    pub group_ece: Option<f64>,
    pub total: f64,
    pub degree_std: Option<f64>,
    pub class0_std: Option<f64>,
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let text = read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "missing header"))?;
    if header.trim() != "epoch,ce,group_ece,total,degree_std,class0_std" {
        return Err(parse_err(path, 1, "unexpected trace header"));
    }
    let mut rows = Vec::new();
    for (lineno, raw) in lines {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(parse_err(path, lineno + 1, "expected 6 fields"));
        }
        let opt = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse::<f64>()
                    .map(Some)
                    .map_err(|_| parse_err(path, lineno + 1, format!("bad real '{s}'")))
            }
        };
        rows.push(TraceRow {
            epoch: f[0]
                .parse()
                .map_err(|_| parse_err(path, lineno + 1, "bad epoch"))?,
            ce: f[1]
                .parse()
                .map_err(|_| parse_err(path, lineno + 1, "bad ce"))?,
            group_ece: opt(f[2])?,
            total: f[3]
                .parse()
                .map_err(|_| parse_err(path, lineno + 1, "bad total"))?,
            degree_std: opt(f[4])?,
            class0_std: opt(f[5])?,
        });
    }
    Ok(rows)
}

/// Reliability bins CSV: `bin,lower,upper,count,acc,conf`.
pub fn write_reliability(path: &Path, bins: &[BinStats]) -> Result<()> {
    let mut out = String::from("bin,lower,upper,count,acc,conf\n");
    for b in bins {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            b.bin_index,
            format_f64(b.lower),
            format_f64(b.upper),
            b.count,
            format_f64(b.acc),
            format_f64(b.conf),
        ));
    }
    fs::write(path, out).map_err(|e| AppError::Io(format!("{}: {e}", path.display())))
}

/// Partition CSV: `node,community`.
pub fn write_partition(path: &Path, p: &Partition) -> Result<()> {
    let mut out = String::from("node,community\n");
    for (i, &c) in p.assignments().iter().enumerate() {
        out.push_str(&format!("{i},{c}\n"));
    }
    fs::write(path, out).map_err(|e| AppError::Io(format!("{}: {e}", path.display())))
}
