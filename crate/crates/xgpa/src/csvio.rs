//! Speeds and graph CSV files.
//!
//! Speeds: `timestamp,<id_1>,...,<id_N>` with ISO-8601 timestamps on a
//! uniform grid and empty cells for missing values. Graph:
//! `node_a,node_b,distance_m`, one row per undirected edge.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDateTime;
use xgpa_core::TrafficGraph;

use crate::data::TrafficDataset;
use crate::error::{Result, XgpaError};

pub const TIME_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

pub fn parse_time(s: &str) -> Result<NaiveDateTime> {
    NaiveDateTime::parse_from_str(s.trim(), TIME_FORMAT)
        .or_else(|_| NaiveDateTime::parse_from_str(s.trim(), "%Y-%m-%dT%H:%M"))
        .or_else(|_| NaiveDateTime::parse_from_str(s.trim(), "%Y-%m-%d %H:%M:%S"))
        .map_err(|e| XgpaError::Format(format!("bad timestamp {s:?}: {e}")))
}

pub fn format_time(t: NaiveDateTime) -> String {
    t.format(TIME_FORMAT).to_string()
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| XgpaError::io(path, e))
}

/// Parses a speeds table. Missing cells are forward-filled, then
/// back-filled for a leading gap.
pub fn read_speeds<R: Read>(reader: R) -> Result<TrafficDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.get(0) != Some("timestamp") || header.len() < 2 {
        return Err(XgpaError::Format(
            "speeds header must be `timestamp,<node_id>,...`".into(),
        ));
    }
    let ids: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut seen = BTreeSet::new();
    for id in &ids {
        if !seen.insert(id.as_str()) {
            return Err(XgpaError::Format(format!("duplicate node id {id:?} in speeds header")));
        }
    }
    let mut times = Vec::new();
    let mut cols: Vec<Vec<Option<f64>>> = vec![Vec::new(); ids.len()];
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = row + 2;
        if rec.len() != ids.len() + 1 {
            return Err(XgpaError::Format(format!(
                "row {line}: {} cells, expected {}",
                rec.len(),
                ids.len() + 1
            )));
        }
        times.push(parse_time(&rec[0]).map_err(|e| XgpaError::Format(format!("row {line}: {e}")))?);
        for (c, cell) in rec.iter().skip(1).enumerate() {
            if cell.is_empty() {
                cols[c].push(None);
                continue;
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| XgpaError::Format(format!("row {line}: bad speed {cell:?}")))?;
            if !v.is_finite() || v < 0.0 {
                return Err(XgpaError::Format(format!("row {line}: negative or non-finite speed {v}")));
            }
            cols[c].push(Some(v));
        }
    }
    if times.len() < 2 {
        return Err(XgpaError::Format("speeds file needs at least two rows".into()));
    }
    let step = times[1] - times[0];
    for (i, w) in times.windows(2).enumerate() {
        if w[1] <= w[0] {
            return Err(XgpaError::Format(format!("row {}: timestamps not increasing", i + 3)));
        }
        if w[1] - w[0] != step {
            return Err(XgpaError::Format(format!("row {}: non-uniform timestamp spacing", i + 3)));
        }
    }
    let mins = step.num_minutes();
    if mins <= 0 || step.num_seconds() % 60 != 0 {
        return Err(XgpaError::Format(format!("resolution {step} is not whole minutes")));
    }
    let mut series = Vec::with_capacity(ids.len());
    for (id, col) in ids.iter().zip(cols) {
        series.push(fill(col).ok_or_else(|| XgpaError::Format(format!("node {id} has no observations")))?);
    }
    TrafficDataset::new(ids, mins as u32, times[0], series)
}

fn fill(col: Vec<Option<f64>>) -> Option<Vec<f64>> {
    let first = col.iter().flatten().copied().next()?;
    let mut last = first;
    Some(
        col.into_iter()
            .map(|v| {
                if let Some(v) = v {
                    last = v;
                }
                last
            })
            .collect(),
    )
}

/// Parses a graph table against the node ids of `ids`.
pub fn read_graph<R: Read>(reader: R, ids: &[String]) -> Result<TrafficGraph> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != ["node_a", "node_b", "distance_m"] {
        return Err(XgpaError::Format("graph header must be `node_a,node_b,distance_m`".into()));
    }
    let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut unknown = BTreeSet::new();
    let mut edges = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = row + 2;
        if rec.len() != 3 {
            return Err(XgpaError::Format(format!("graph row {line}: expected 3 cells")));
        }
        let d: f64 = rec[2]
            .parse()
            .map_err(|_| XgpaError::Format(format!("graph row {line}: bad distance {:?}", &rec[2])))?;
        match (index.get(&rec[0]), index.get(&rec[1])) {
            (Some(&a), Some(&b)) => edges.push((a, b, d)),
            (a, b) => {
                if a.is_none() {
                    unknown.insert(rec[0].to_string());
                }
                if b.is_none() {
                    unknown.insert(rec[1].to_string());
                }
            }
        }
    }
    if !unknown.is_empty() {
        return Err(XgpaError::Ingest(format!(
            "graph references node ids missing from the speeds file: {}",
            unknown.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }
    TrafficGraph::new(ids.to_vec(), &edges).map_err(|e| XgpaError::Ingest(e.to_string()))
}

/// Loads a speeds file and its graph.
pub fn load_csv(speeds: &Path, graph: &Path) -> Result<(TrafficGraph, TrafficDataset)> {
    let ds = read_speeds(open(speeds)?).map_err(|e| prefix(speeds, e))?;
    let g = read_graph(open(graph)?, ds.ids()).map_err(|e| prefix(graph, e))?;
    Ok((g, ds))
}

fn prefix(path: &Path, e: XgpaError) -> XgpaError {
    match e {
        XgpaError::Format(m) => XgpaError::Format(format!("{}: {m}", path.display())),
        XgpaError::Ingest(m) => XgpaError::Ingest(format!("{}: {m}", path.display())),
        other => other,
    }
}

pub fn write_speeds<W: Write>(ds: &TrafficDataset, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut head = vec!["timestamp".to_string()];
    head.extend(ds.ids().iter().cloned());
    wtr.write_record(&head)?;
    let mut row = Vec::with_capacity(ds.n() + 1);
    for t in 0..ds.len() {
        row.clear();
        row.push(format_time(ds.timestamp(t)));
        row.extend((0..ds.n()).map(|n| ds.get(n, t).to_string()));
        wtr.write_record(&row)?;
    }
    wtr.flush().map_err(|e| XgpaError::io("<speeds>", e))?;
    Ok(())
}

pub fn write_graph<W: Write>(g: &TrafficGraph, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["node_a", "node_b", "distance_m"])?;
    for (a, b, d) in g.edges() {
        wtr.write_record([g.ids()[a].as_str(), g.ids()[b].as_str(), &d.to_string()])?;
    }
    wtr.flush().map_err(|e| XgpaError::io("<graph>", e))?;
    Ok(())
}

/// Writes both files, creating or truncating them.
pub fn write_csv(ds: &TrafficDataset, g: &TrafficGraph, speeds: &Path, graph: &Path) -> Result<()> {
    let f = File::create(speeds).map_err(|e| XgpaError::io(speeds, e))?;
    write_speeds(ds, std::io::BufWriter::new(f))?;
    let f = File::create(graph).map_err(|e| XgpaError::io(graph, e))?;
    write_graph(g, std::io::BufWriter::new(f))
}
