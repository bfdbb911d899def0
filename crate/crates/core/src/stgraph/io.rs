//! CSV ingestion and export, plus the plain-text deletion request format.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::{DeletionRequest, STGraph};
use crate::error::{Error, Result};

fn csv_err(path: &str, line: u64, msg: impl Into<String>) -> Error {
    Error::Csv { path: path.to_string(), line, msg: msg.into() }
}

/// Loads a long-format feature file (`node_id,timestep,f_0[,f_1,...]`) and an
/// edge file (`src_id,dst_id`). With `undirected` every edge is mirrored.
pub fn ingest_csv(feature_path: &Path, edge_path: &Path, undirected: bool) -> Result<STGraph> {
    let features = File::open(feature_path)?;
    let edges = File::open(edge_path)?;
    ingest_readers(
        features,
        &feature_path.display().to_string(),
        edges,
        &edge_path.display().to_string(),
        undirected,
    )
}

pub fn ingest_readers<R1: Read, R2: Read>(
    features: R1,
    feature_name: &str,
    edges: R2,
    edge_name: &str,
    undirected: bool,
) -> Result<STGraph> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(features);
    let header = rdr.headers().map_err(|e| csv_err(feature_name, 1, e.to_string()))?.clone();
    if header.len() < 3 || &header[0] != "node_id" || &header[1] != "timestep" {
        return Err(csv_err(feature_name, 1, "header must be `node_id,timestep,f_0[,f_1,...]`"));
    }
    let fdim = header.len() - 2;

    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, BTreeMap<usize, Vec<f64>>> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            csv_err(feature_name, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let id = rec[0].to_string();
        if id.is_empty() {
            return Err(csv_err(feature_name, line, "empty node_id"));
        }
        let ts: usize = rec[1]
            .parse()
            .map_err(|_| csv_err(feature_name, line, format!("timestep `{}` is not a non-negative integer", &rec[1])))?;
        let mut vals = Vec::with_capacity(fdim);
        for (k, field) in rec.iter().skip(2).enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                csv_err(feature_name, line, format!("feature f_{k} of node `{id}` is not numeric: `{field}`"))
            })?;
            if !v.is_finite() {
                return Err(csv_err(feature_name, line, format!("feature f_{k} of node `{id}` is not finite")));
            }
            vals.push(v);
        }
        let series = rows.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            BTreeMap::new()
        });
        if series.insert(ts, vals).is_some() {
            return Err(csv_err(feature_name, line, format!("duplicate timestep {ts} for node `{id}`")));
        }
    }
    if order.is_empty() {
        return Err(csv_err(feature_name, 1, "no feature rows"));
    }

    let timesteps = rows.values().filter_map(|s| s.keys().next_back()).max().map_or(0, |m| m + 1);
    for id in &order {
        let series = &rows[id];
        if let Some(missing) = (0..timesteps).find(|t| !series.contains_key(t)) {
            return Err(Error::MissingTimestep { node: id.clone(), timestep: missing });
        }
    }

    let n = order.len();
    let mut values = vec![0.0; timesteps * n * fdim];
    for (v, id) in order.iter().enumerate() {
        for (&t, vals) in &rows[id] {
            let base = (t * n + v) * fdim;
            values[base..base + fdim].copy_from_slice(vals);
        }
    }
    let index: HashMap<&str, usize> = order.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();

    let mut erdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(edges);
    let eh = erdr.headers().map_err(|e| csv_err(edge_name, 1, e.to_string()))?.clone();
    if eh.len() != 2 || &eh[0] != "src_id" || &eh[1] != "dst_id" {
        return Err(csv_err(edge_name, 1, "header must be `src_id,dst_id`"));
    }
    let mut edge_list = Vec::new();
    for rec in erdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            csv_err(edge_name, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let lookup = |s: &str| index.get(s).copied().ok_or_else(|| Error::UnknownNode(s.to_string()));
        let u = lookup(&rec[0])?;
        let v = lookup(&rec[1])?;
        if u == v {
            return Err(csv_err(edge_name, line, format!("self-loop on `{}`", &rec[0])));
        }
        edge_list.push((u, v));
        if undirected {
            edge_list.push((v, u));
        }
    }
    STGraph::new(order, timesteps, fdim, edge_list, values)
}

/// Writes the graph in the same CSV layout `ingest_csv` reads. Values use the
/// shortest round-tripping decimal form so re-ingestion is bit-identical.
pub fn export_csv(graph: &STGraph, feature_path: &Path, edge_path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(feature_path).map_err(csv_io)?;
    let mut header = vec!["node_id".to_string(), "timestep".to_string()];
    header.extend((0..graph.feature_dim()).map(|k| format!("f_{k}")));
    w.write_record(&header).map_err(csv_io)?;
    let mut rec = Vec::with_capacity(header.len());
    for v in 0..graph.node_count() {
        for t in 0..graph.timesteps() {
            rec.clear();
            rec.push(graph.node_id(v).to_string());
            rec.push(t.to_string());
            for f in 0..graph.feature_dim() {
                rec.push(format!("{}", graph.value(t, v, f)));
            }
            w.write_record(&rec).map_err(csv_io)?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(edge_path).map_err(csv_io)?;
    w.write_record(["src_id", "dst_id"]).map_err(csv_io)?;
    for &(u, v) in graph.edges() {
        w.write_record([graph.node_id(u), graph.node_id(v)]).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Parses a deletion request: one node id per line, or `edge,src_id,dst_id`.
/// Blank lines and lines starting with `#` are ignored.
pub fn parse_request(text: &str) -> Result<DeletionRequest> {
    let mut req = DeletionRequest::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix("edge,") {
            let parts: Vec<&str> = rest.split(',').map(str::trim).collect();
            if parts.len() != 2 || parts.iter().any(|p| p.is_empty()) {
                return Err(csv_err("request", i as u64 + 1, format!("malformed edge line `{line}`")));
            }
            req.edges.insert((parts[0].to_string(), parts[1].to_string()));
        } else if line.contains(',') {
            return Err(csv_err("request", i as u64 + 1, format!("unexpected comma in node id `{line}`")));
        } else {
            req.nodes.insert(line.to_string());
        }
    }
    Ok(req)
}

pub fn read_request_file(path: &Path) -> Result<DeletionRequest> {
    let text = std::fs::read_to_string(path)?;
    parse_request(&text)
}

pub fn write_request_file(path: &Path, req: &DeletionRequest) -> Result<()> {
    let mut f = File::create(path)?;
    for n in &req.nodes {
        writeln!(f, "{n}")?;
    }
    for (a, b) in &req.edges {
        writeln!(f, "edge,{a},{b}")?;
    }
    Ok(())
}
