//! Speed datasets, chronological splits and forecasting windows.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use chrono::{Duration, NaiveDateTime};
use serde::{Deserialize, Serialize};
use xgpa_core::Tensor;

use crate::error::{Result, XgpaError};

/// Per-node speed series (mph) on a uniform time grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TrafficDataset {
    ids: Vec<String>,
    resolution_min: u32,
    start: NaiveDateTime,
    len: usize,
    /// Node-major `[N][T]`.
    speeds: Vec<f64>,
}

impl TrafficDataset {
    pub fn new(
        ids: Vec<String>,
        resolution_min: u32,
        start: NaiveDateTime,
        series: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if ids.is_empty() || ids.len() != series.len() {
            return Err(XgpaError::Format(format!(
                "{} node ids for {} series",
                ids.len(),
                series.len()
            )));
        }
        if resolution_min == 0 {
            return Err(XgpaError::invalid("resolution", "must be positive"));
        }
        let len = series[0].len();
        let mut speeds = Vec::with_capacity(len * ids.len());
        for (id, s) in ids.iter().zip(&series) {
            if s.len() != len {
                return Err(XgpaError::Format(format!("node {id} has {} steps, expected {len}", s.len())));
            }
            if let Some(t) = s.iter().position(|v| !v.is_finite() || *v < 0.0) {
                return Err(XgpaError::Format(format!("node {id} step {t}: speed {}", s[t])));
            }
            speeds.extend_from_slice(s);
        }
        Ok(TrafficDataset {
            ids,
            resolution_min,
            start,
            len,
            speeds,
        })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn n(&self) -> usize {
        self.ids.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn resolution_min(&self) -> u32 {
        self.resolution_min
    }

    pub fn start(&self) -> NaiveDateTime {
        self.start
    }

    pub fn series(&self, node: usize) -> &[f64] {
        &self.speeds[node * self.len..(node + 1) * self.len]
    }

    pub fn get(&self, node: usize, step: usize) -> f64 {
        self.speeds[node * self.len + step]
    }

    pub fn timestamp(&self, step: usize) -> NaiveDateTime {
        self.start + Duration::minutes(step as i64 * self.resolution_min as i64)
    }

    /// Step index of `ts`, if it lies on the grid.
    pub fn step_of(&self, ts: NaiveDateTime) -> Option<usize> {
        let mins = (ts - self.start).num_minutes();
        let res = self.resolution_min as i64;
        if ts < self.start || (ts - self.start).num_seconds() % 60 != 0 || mins % res != 0 {
            return None;
        }
        let s = (mins / res) as usize;
        (s < self.len).then_some(s)
    }

    pub fn steps_per_day(&self) -> usize {
        (24 * 60 / self.resolution_min) as usize
    }

    pub fn steps_per_week(&self) -> usize {
        7 * self.steps_per_day()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|s| s == id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

impl FromStr for SplitKind {
    type Err = XgpaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitKind::Train),
            "val" => Ok(SplitKind::Val),
            "test" => Ok(SplitKind::Test),
            _ => Err(XgpaError::invalid("split", format!("unknown split {s:?}"))),
        }
    }
}

/// Contiguous chronological ranges, train first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl Split {
    pub fn range(&self, kind: SplitKind) -> Range<usize> {
        match kind {
            SplitKind::Train => self.train.clone(),
            SplitKind::Val => self.val.clone(),
            SplitKind::Test => self.test.clone(),
        }
    }
}

/// Splits by `fractions`, with each inner boundary rounded down to a whole day.
pub fn split(ds: &TrafficDataset, fractions: (f64, f64, f64)) -> Result<Split> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(XgpaError::invalid("fractions", format!("{fractions:?} must be in [0,1] and sum to 1")));
    }
    let day = ds.steps_per_day();
    if ds.len() < 3 * day {
        return Err(XgpaError::invalid(
            "dataset",
            format!("{} steps is shorter than 3 days ({})", ds.len(), 3 * day),
        ));
    }
    let t = ds.len();
    let cut = |f: f64| {
        if f >= 1.0 - 1e-12 {
            t
        } else {
            ((f * t as f64 + 1e-9).floor() as usize / day) * day
        }
    };
    let b1 = cut(a);
    let b2 = cut(a + b).max(b1);
    Ok(Split {
        train: 0..b1,
        val: b1..b2,
        test: b2..t,
    })
}

/// Per-node z-score statistics from the training range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// A node whose train series is (almost) constant gets unit scale.
    pub fn fit(ds: &TrafficDataset, train: Range<usize>) -> Result<Self> {
        if train.is_empty() {
            return Err(XgpaError::invalid("split", "empty training range"));
        }
        let m = train.len() as f64;
        let mut mean = Vec::with_capacity(ds.n());
        let mut std = Vec::with_capacity(ds.n());
        for node in 0..ds.n() {
            let s = &ds.series(node)[train.clone()];
            let mu = s.iter().sum::<f64>() / m;
            let var = s.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m;
            mean.push(mu);
            std.push(if var.sqrt() < 1e-6 { 1.0 } else { var.sqrt() });
        }
        Ok(Normalizer { mean, std })
    }

    pub fn n(&self) -> usize {
        self.mean.len()
    }

    /// Maps a `[N, T, 1]` tensor in mph to z-scores.
    pub fn normalize(&self, x: &Tensor) -> Tensor {
        self.per_node(x, |n, v| (v - self.mean[n]) / self.std[n])
    }

    pub fn denormalize(&self, x: &Tensor) -> Tensor {
        self.per_node(x, |n, v| v * self.std[n] + self.mean[n])
    }

    fn per_node(&self, x: &Tensor, f: impl Fn(usize, f64) -> f64) -> Tensor {
        let stride = x.len() / x.shape()[0];
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(i / stride, v))
            .collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Case {
    Case1,
    Case2,
    Case3,
    Case4,
}

impl FromStr for Case {
    type Err = XgpaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "case1" => Ok(Case::Case1),
            "case2" => Ok(Case::Case2),
            "case3" => Ok(Case::Case3),
            "case4" => Ok(Case::Case4),
            _ => Err(XgpaError::invalid("case", format!("unknown case {s:?}"))),
        }
    }
}

impl fmt::Display for Case {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = match self {
            Case::Case1 => 1,
            Case::Case2 => 2,
            Case::Case3 => 3,
            Case::Case4 => 4,
        };
        write!(f, "case{n}")
    }
}

/// Input/horizon layout. `context` lists, for case 2, how many steps before
/// the forecast start each daily block begins (oldest first).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub case: Option<Case>,
    pub input_len: usize,
    pub horizon: usize,
    pub context: Vec<usize>,
}

impl WindowSpec {
    /// A plain contiguous layout.
    pub fn contiguous(input_len: usize, horizon: usize) -> Self {
        WindowSpec {
            case: None,
            input_len,
            horizon,
            context: Vec::new(),
        }
    }

    pub fn for_case(case: Case, resolution_min: u32) -> Result<Self> {
        if resolution_min == 0 || 60 % resolution_min != 0 {
            return Err(XgpaError::invalid(
                "resolution",
                format!("{resolution_min} min does not divide an hour"),
            ));
        }
        let hour = (60 / resolution_min) as usize;
        let day = 24 * hour;
        let mut spec = match case {
            Case::Case1 => WindowSpec::contiguous(hour, hour),
            Case::Case2 => WindowSpec {
                case: None,
                input_len: 8 * hour,
                horizon: hour,
                context: (1..=7).rev().map(|d| d * day).collect(),
            },
            Case::Case3 => WindowSpec::contiguous(7 * day, hour),
            Case::Case4 => WindowSpec::contiguous(7 * day, 12 * hour),
        };
        spec.case = Some(case);
        Ok(spec)
    }

    /// Steps of history a window needs before its forecast start.
    pub fn history(&self) -> usize {
        self.context.first().copied().unwrap_or(self.input_len).max(self.recent_len())
    }

    fn recent_len(&self) -> usize {
        self.input_len - self.context.len() * self.horizon
    }

    /// Absolute input step indices for a window forecasting from `origin`,
    /// in chronological order.
    pub fn input_steps(&self, origin: usize) -> Vec<usize> {
        let mut steps = Vec::with_capacity(self.input_len);
        for &back in &self.context {
            steps.extend(origin - back..origin - back + self.horizon);
        }
        let recent = self.recent_len();
        steps.extend(origin - recent..origin);
        steps
    }
}

/// One forecasting example, in mph.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    /// First target step.
    pub origin: usize,
    pub input_steps: Vec<usize>,
    /// `[N, L, 1]`
    pub input: Tensor,
    /// `[N, Q, 1]`
    pub target: Tensor,
    pub timestamp: NaiveDateTime,
}

/// Lazily materialized windows of one split, stride one step.
#[derive(Clone, Debug)]
pub struct Windows<'a> {
    ds: &'a TrafficDataset,
    spec: WindowSpec,
    origins: Vec<usize>,
}

impl<'a> Windows<'a> {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn spec(&self) -> &WindowSpec {
        &self.spec
    }

    pub fn origins(&self) -> &[usize] {
        &self.origins
    }

    pub fn get(&self, i: usize) -> Window {
        window_at(self.ds, &self.spec, self.origins[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = Window> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }
}

/// Every window whose inputs and targets lie inside `range`.
pub fn make_windows<'a>(ds: &'a TrafficDataset, spec: &WindowSpec, range: Range<usize>) -> Windows<'a> {
    let need = spec.history() + spec.horizon;
    let origins: Vec<usize> = if range.end <= ds.len() && range.len() >= need {
        (range.start + spec.history()..=range.end - spec.horizon).collect()
    } else {
        Vec::new()
    };
    if origins.is_empty() {
        log::warn!(
            "range {range:?} holds no window of {} history + {} horizon steps",
            spec.history(),
            spec.horizon
        );
    }
    Windows {
        ds,
        spec: spec.clone(),
        origins,
    }
}

/// The window forecasting from `origin`; panics if it leaves the dataset.
pub fn window_at(ds: &TrafficDataset, spec: &WindowSpec, origin: usize) -> Window {
    let steps = spec.input_steps(origin);
    let n = ds.n();
    let mut input = Vec::with_capacity(n * steps.len());
    let mut target = Vec::with_capacity(n * spec.horizon);
    for node in 0..n {
        let s = ds.series(node);
        input.extend(steps.iter().map(|&t| s[t]));
        target.extend_from_slice(&s[origin..origin + spec.horizon]);
    }
    Window {
        origin,
        input: Tensor::new([n, steps.len(), 1], input).expect("window shape"),
        target: Tensor::new([n, spec.horizon, 1], target).expect("window shape"),
        input_steps: steps,
        timestamp: ds.timestamp(origin),
    }
}

/// The window forecasting from `origin`, checked against the dataset bounds.
pub fn try_window_at(ds: &TrafficDataset, spec: &WindowSpec, origin: usize) -> Result<Window> {
    if origin < spec.history() || origin + spec.horizon > ds.len() {
        return Err(out_of_range(ds, spec, origin, origin + spec.horizon));
    }
    Ok(window_at(ds, spec, origin))
}

/// `[N, L, 1]` input (mph) for a forecast whose first target step is
/// `origin`; the targets may lie past the end of the data.
pub fn input_at(ds: &TrafficDataset, spec: &WindowSpec, origin: usize) -> Result<Tensor> {
    if origin < spec.history() || origin > ds.len() {
        return Err(out_of_range(ds, spec, origin, origin));
    }
    let steps = spec.input_steps(origin);
    let mut input = Vec::with_capacity(ds.n() * steps.len());
    for node in 0..ds.n() {
        let s = ds.series(node);
        input.extend(steps.iter().map(|&t| s[t]));
    }
    Ok(Tensor::new([ds.n(), steps.len(), 1], input)?)
}

fn out_of_range(ds: &TrafficDataset, spec: &WindowSpec, origin: usize, end: usize) -> XgpaError {
    XgpaError::Model(xgpa_core::Error::Index(format!(
        "window at step {origin} needs steps {}..{end} of a {}-step dataset",
        origin as i64 - spec.history() as i64,
        ds.len()
    )))
}
