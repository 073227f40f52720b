//! Synthetic traffic with planted daily, weekly and spatial structure.

use std::collections::VecDeque;

use chrono::{Datelike, NaiveDateTime, Timelike, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use xgpa_core::TrafficGraph;

use crate::csvio::parse_time;
use crate::data::TrafficDataset;
use crate::error::{Result, XgpaError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Topology {
    Ring,
    Grid,
    TwoHighwayCross,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub topology: Topology,
    pub nodes: usize,
    pub weeks: usize,
    pub resolution_min: u32,
    /// Free-flow speed, mph.
    pub base_speed: f64,
    /// Depth of each rush-hour dip, mph.
    pub dip_depth: f64,
    /// Standard deviation of a dip, hours.
    pub dip_width_h: f64,
    /// Dip scale on Saturdays and Sundays.
    pub weekend_factor: f64,
    /// Expected congestion events per node per day.
    pub event_rate: f64,
    pub event_depth: f64,
    pub event_duration_h: f64,
    /// Speed at which a jam travels to neighbors, km/h.
    pub propagation_kmh: f64,
    pub noise_std: f64,
    pub spacing_m: f64,
    pub start: String,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            topology: Topology::Ring,
            nodes: 20,
            weeks: 10,
            resolution_min: 30,
            base_speed: 65.0,
            dip_depth: 25.0,
            dip_width_h: 1.0,
            weekend_factor: 0.3,
            event_rate: 0.1,
            event_depth: 15.0,
            event_duration_h: 1.5,
            propagation_kmh: 20.0,
            noise_std: 2.0,
            spacing_m: 1500.0,
            start: "2024-01-01T00:00:00".into(),
            seed: 0,
        }
    }
}

/// Hours of the two weekday rush peaks.
const PEAKS: [f64; 2] = [8.0, 17.5];

impl SyntheticSpec {
    pub fn validate(&self) -> Result<NaiveDateTime> {
        let positive = [
            ("nodes", self.nodes as f64),
            ("weeks", self.weeks as f64),
            ("resolution_min", self.resolution_min as f64),
            ("base_speed", self.base_speed),
            ("dip_depth", self.dip_depth),
            ("dip_width_h", self.dip_width_h),
            ("weekend_factor", self.weekend_factor),
            ("event_duration_h", self.event_duration_h),
            ("propagation_kmh", self.propagation_kmh),
            ("spacing_m", self.spacing_m),
        ];
        for (field, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(XgpaError::invalid(field, format!("{v} must be positive")));
            }
        }
        for (field, v) in [
            ("event_rate", self.event_rate),
            ("event_depth", self.event_depth),
            ("noise_std", self.noise_std),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(XgpaError::invalid(field, format!("{v} must be non-negative")));
            }
        }
        if self.dip_depth >= self.base_speed {
            return Err(XgpaError::invalid(
                "dip_depth",
                format!("{} must be below base_speed {}", self.dip_depth, self.base_speed),
            ));
        }
        if 24 * 60 % self.resolution_min != 0 {
            return Err(XgpaError::invalid("resolution_min", "must divide a day"));
        }
        let min_nodes = match self.topology {
            Topology::Ring | Topology::TwoHighwayCross => 3,
            Topology::Grid => 1,
        };
        if self.nodes < min_nodes {
            return Err(XgpaError::invalid("nodes", format!("{:?} needs at least {min_nodes}", self.topology)));
        }
        parse_time(&self.start).map_err(|e| XgpaError::invalid("start", e.to_string()))
    }

    pub fn steps(&self) -> usize {
        self.weeks * 7 * 24 * 60 / self.resolution_min as usize
    }
}

fn topology_edges(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<(usize, usize, f64)> {
    let n = spec.nodes;
    let mut pairs = Vec::new();
    match spec.topology {
        Topology::Ring => {
            for i in 0..n {
                pairs.push((i.min((i + 1) % n), i.max((i + 1) % n)));
            }
        }
        Topology::Grid => {
            let rows = (n as f64).sqrt().floor().max(1.0) as usize;
            let cols = n.div_ceil(rows);
            for i in 0..n {
                let (r, c) = (i / cols, i % cols);
                if c + 1 < cols && i + 1 < n {
                    pairs.push((i, i + 1));
                }
                if r + 1 < rows && i + cols < n {
                    pairs.push((i, i + cols));
                }
            }
        }
        Topology::TwoHighwayCross => {
            // highway A is 0..a, highway B crosses it at A's middle node
            let a = n.div_ceil(2);
            let center = a / 2;
            for i in 1..a {
                pairs.push((i - 1, i));
            }
            let b: Vec<usize> = (a..n).collect();
            let half = b.len() / 2;
            for w in b.windows(2) {
                if w[1] != b[half] {
                    pairs.push((w[0], w[1]));
                }
            }
            if half > 0 {
                pairs.push((center, b[half - 1]));
            }
            if half < b.len() {
                pairs.push((center, b[half]));
            }
        }
    }
    pairs
        .into_iter()
        .map(|(i, j)| (i, j, spec.spacing_m * rng.random_range(0.7..1.3)))
        .collect()
}

/// Per-target (hops, meters) along a breadth-first tree from `src`.
fn bfs(g: &TrafficGraph, src: usize) -> Vec<Option<(usize, f64)>> {
    let mut out = vec![None; g.n()];
    out[src] = Some((0, 0.0));
    let mut queue = VecDeque::from([src]);
    while let Some(u) = queue.pop_front() {
        let (h, d) = out[u].expect("visited");
        for (&v, &w) in g.neighbors(u).iter().zip(g.neighbor_distances(u)) {
            if out[v].is_none() {
                out[v] = Some((h + 1, d + w));
                queue.push_back(v);
            }
        }
    }
    out
}

/// Generates the graph and speeds for `spec`; bit-identical per seed.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(TrafficGraph, TrafficDataset)> {
    let start = spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.nodes;
    let ids: Vec<String> = (0..n).map(|i| format!("s{i:03}")).collect();
    let edges = topology_edges(spec, &mut rng);
    let graph = TrafficGraph::new(ids.clone(), &edges)?;

    let t_len = spec.steps();
    let res = spec.resolution_min as f64;
    let per_day = (24.0 * 60.0 / res) as usize;
    let base: Vec<f64> = (0..n).map(|_| spec.base_speed * rng.random_range(0.95..1.05)).collect();
    let scale: Vec<f64> = (0..n).map(|_| rng.random_range(0.8..1.2)).collect();

    // daily profile per step of day, weekday and weekend variants
    let profile: Vec<f64> = (0..per_day)
        .map(|s| {
            let hour = s as f64 * res / 60.0;
            PEAKS
                .iter()
                .map(|p| (-(hour - p).powi(2) / (2.0 * spec.dip_width_h.powi(2))).exp())
                .sum::<f64>()
                * spec.dip_depth
        })
        .collect();
    let mut speeds: Vec<Vec<f64>> = (0..n).map(|_| Vec::with_capacity(t_len)).collect();
    for t in 0..t_len {
        let ts = start + chrono::Duration::minutes((t as f64 * res) as i64);
        let weekend = matches!(ts.weekday(), Weekday::Sat | Weekday::Sun);
        let factor = if weekend { spec.weekend_factor } else { 1.0 };
        let sod = ((ts.hour() * 60 + ts.minute()) as f64 / res) as usize;
        for node in 0..n {
            speeds[node].push(base[node] - factor * scale[node] * profile[sod]);
        }
    }

    // congestion events, attenuated by half per hop
    let days = t_len as f64 / per_day as f64;
    let dur = ((spec.event_duration_h * 60.0 / res).round() as usize).max(1);
    let step_m = spec.propagation_kmh * 1000.0 / 60.0 * res;
    if spec.event_rate > 0.0 && spec.event_depth > 0.0 {
        let poisson = Poisson::new(spec.event_rate * days).map_err(|e| XgpaError::invalid("event_rate", e.to_string()))?;
        for src in 0..n {
            let count = poisson.sample(&mut rng) as usize;
            let reach = bfs(&graph, src);
            for _ in 0..count {
                let at = rng.random_range(0..t_len);
                let depth = spec.event_depth * rng.random_range(0.5..1.0);
                for (node, r) in reach.iter().enumerate() {
                    let Some((hops, meters)) = *r else { continue };
                    let gain = 0.5f64.powi(hops as i32);
                    if gain < 0.1 {
                        continue;
                    }
                    let delay = (meters / step_m).round() as usize;
                    for k in 0..dur {
                        let t = at + delay + k;
                        if t >= t_len {
                            break;
                        }
                        let shape = (std::f64::consts::PI * (k as f64 + 0.5) / dur as f64).sin();
                        speeds[node][t] -= gain * depth * shape;
                    }
                }
            }
        }
    }

    if spec.noise_std > 0.0 {
        let normal = Normal::new(0.0, spec.noise_std).map_err(|e| XgpaError::invalid("noise_std", e.to_string()))?;
        for s in speeds.iter_mut() {
            for v in s.iter_mut() {
                *v += normal.sample(&mut rng);
            }
        }
    }
    for s in speeds.iter_mut() {
        for v in s.iter_mut() {
            *v = v.max(0.0);
        }
    }
    let ds = TrafficDataset::new(ids, spec.resolution_min, start, speeds)?;
    Ok((graph, ds))
}
