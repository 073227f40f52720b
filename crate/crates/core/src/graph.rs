//! Undirected sensor graph with implicit self-loops, stored row-compressed.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrafficGraph {
    ids: Vec<String>,
    offsets: Vec<usize>,
    cols: Vec<usize>,
    dist: Vec<f64>,
    max_dist: f64,
}

impl TrafficGraph {
    /// Builds the graph from undirected edges `(a, b, meters)`. Every node
    /// gets itself as a neighbor at distance 0; neighbor lists are sorted.
    pub fn new(ids: Vec<String>, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let n = ids.len();
        if n == 0 {
            return Err(Error::Contract("graph needs at least one node".into()));
        }
        let mut seen_ids = BTreeMap::new();
        for (i, id) in ids.iter().enumerate() {
            if let Some(j) = seen_ids.insert(id.as_str(), i) {
                return Err(Error::Contract(format!(
                    "node id {id} appears twice (positions {j} and {i})"
                )));
            }
        }
        let mut adj: Vec<BTreeMap<usize, f64>> = (0..n).map(|_| BTreeMap::new()).collect();
        for (i, row) in adj.iter_mut().enumerate() {
            row.insert(i, 0.0);
        }
        for &(a, b, d) in edges {
            if a >= n || b >= n {
                return Err(Error::Index(format!("edge ({a}, {b}) for {n} nodes")));
            }
            if !(d.is_finite() && d >= 0.0) {
                return Err(Error::Contract(format!(
                    "edge ({}, {}) has invalid distance {d}",
                    ids[a], ids[b]
                )));
            }
            if a == b {
                continue;
            }
            if adj[a].insert(b, d).is_some() {
                return Err(Error::Contract(format!(
                    "duplicate edge ({}, {})",
                    ids[a], ids[b]
                )));
            }
            adj[b].insert(a, d);
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut dist = Vec::new();
        offsets.push(0);
        for row in &adj {
            for (&j, &d) in row {
                cols.push(j);
                dist.push(d);
            }
            offsets.push(cols.len());
        }
        let max_dist = dist.iter().copied().fold(0.0, f64::max);
        Ok(TrafficGraph {
            ids,
            offsets,
            cols,
            dist,
            max_dist,
        })
    }

    /// Path `0 - 1 - … - (n-1)` with uniform spacing; handy for tests.
    pub fn path(n: usize, spacing_m: f64) -> Result<Self> {
        let ids = (0..n).map(|i| i.to_string()).collect();
        let edges: Vec<_> = (1..n).map(|i| (i - 1, i, spacing_m)).collect();
        Self::new(ids, &edges)
    }

    pub fn n(&self) -> usize {
        self.ids.len()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn cols(&self) -> &[usize] {
        &self.cols
    }

    /// Number of stored (directed, self-inclusive) neighbor entries.
    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.cols[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn neighbor_distances(&self, i: usize) -> &[f64] {
        &self.dist[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Position of neighbor `j` in row `i`'s slice of the edge arrays.
    pub fn edge_index(&self, i: usize, j: usize) -> Option<usize> {
        self.neighbors(i)
            .binary_search(&j)
            .ok()
            .map(|p| self.offsets[i] + p)
    }

    pub fn distance(&self, i: usize, j: usize) -> Option<f64> {
        self.edge_index(i, j).map(|e| self.dist[e])
    }

    pub fn max_edge_distance(&self) -> f64 {
        self.max_dist
    }

    /// Edge distances scaled into `[0, 1]` by the largest edge distance.
    pub fn normalized_distances(&self) -> Vec<f64> {
        if self.max_dist > 0.0 {
            self.dist.iter().map(|d| d / self.max_dist).collect()
        } else {
            alloc::vec![0.0; self.dist.len()]
        }
    }

    /// Undirected edges `(a, b, meters)` with `a < b`.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for i in 0..self.n() {
            for (&j, &d) in self.neighbors(i).iter().zip(self.neighbor_distances(i)) {
                if i < j {
                    out.push((i, j, d));
                }
            }
        }
        out
    }
}
