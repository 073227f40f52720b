//! Horizon-wise MAE, the historical-average baseline and denormalized
//! prediction.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use xgpa_core::{Error as CoreError, ForwardOutput, Tensor, TrafficGraph};

use crate::checkpoint::Checkpoint;
use crate::data::{input_at, TrafficDataset, Window};
use crate::error::{Result, XgpaError};

/// Reporting grid: label and upper lead time in minutes.
pub const BUCKETS: [(&str, u32); 7] = [
    ("15min", 15),
    ("30min", 30),
    ("60min", 60),
    ("2h", 120),
    ("4h", 240),
    ("8h", 480),
    ("12h", 720),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketMae {
    pub label: String,
    /// 1-based horizon steps whose lead time falls in this bucket.
    pub first_step: usize,
    pub last_step: usize,
    pub mae: f64,
}

/// MAE per horizon step (index 0 is one step ahead) and per bucket. A
/// bucket averages the steps with lead time in `(previous bound, bound]`;
/// buckets holding no step are omitted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonMAE {
    pub resolution_min: u32,
    pub windows: usize,
    pub per_step: Vec<f64>,
    pub buckets: Vec<BucketMae>,
}

impl HorizonMAE {
    pub fn bucket(&self, label: &str) -> Option<f64> {
        self.buckets.iter().find(|b| b.label == label).map(|b| b.mae)
    }

    /// Mean over all steps.
    pub fn overall(&self) -> f64 {
        self.per_step.iter().sum::<f64>() / self.per_step.len().max(1) as f64
    }
}

/// Streaming sums of |prediction − target| per horizon step.
#[derive(Clone, Debug)]
pub struct MaeAccumulator {
    resolution_min: u32,
    sums: Vec<f64>,
    counts: Vec<usize>,
    windows: usize,
}

impl MaeAccumulator {
    pub fn new(horizon: usize, resolution_min: u32) -> Self {
        MaeAccumulator {
            resolution_min,
            sums: vec![0.0; horizon],
            counts: vec![0; horizon],
            windows: 0,
        }
    }

    /// Adds one `[N, Q, 1]` prediction/target pair.
    pub fn add(&mut self, pred: &Tensor, target: &Tensor) -> Result<()> {
        let q = self.sums.len();
        if pred.shape() != target.shape() || pred.rank() != 3 || pred.shape()[1] != q || pred.shape()[2] != 1 {
            return Err(XgpaError::Model(CoreError::Contract(format!(
                "prediction {:?} and target {:?} must both be [N, {q}, 1]",
                pred.shape(),
                target.shape()
            ))));
        }
        for (i, (p, t)) in pred.data().iter().zip(target.data()).enumerate() {
            let step = i % q;
            self.sums[step] += (p - t).abs();
            self.counts[step] += 1;
        }
        self.windows += 1;
        Ok(())
    }

    pub fn finish(&self) -> HorizonMAE {
        let per_step: Vec<f64> = self
            .sums
            .iter()
            .zip(&self.counts)
            .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
            .collect();
        let mut buckets = Vec::new();
        let mut lo = 0u32;
        for (label, hi) in BUCKETS {
            let steps: Vec<usize> = (1..=per_step.len())
                .filter(|&s| {
                    let lead = s as u32 * self.resolution_min;
                    lead > lo && lead <= hi
                })
                .collect();
            lo = hi;
            if let (Some(&a), Some(&b)) = (steps.first(), steps.last()) {
                let mae = steps.iter().map(|&s| per_step[s - 1]).sum::<f64>() / steps.len() as f64;
                buckets.push(BucketMae {
                    label: label.to_string(),
                    first_step: a,
                    last_step: b,
                    mae,
                });
            }
        }
        HorizonMAE {
            resolution_min: self.resolution_min,
            windows: self.windows,
            per_step,
            buckets,
        }
    }
}

/// MAE of paired `[N, Q, 1]` predictions and targets.
pub fn evaluate_mae(preds: &[Tensor], targets: &[Tensor], resolution_min: u32) -> Result<HorizonMAE> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(XgpaError::Model(CoreError::Contract(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        ))));
    }
    let q = preds[0].shape().get(1).copied().unwrap_or(0);
    let mut acc = MaeAccumulator::new(q, resolution_min);
    for (p, t) in preds.iter().zip(targets) {
        acc.add(p, t)?;
    }
    Ok(acc.finish())
}

/// Historical average for the window forecasting from `origin`: each
/// future slot is the mean of the same time-of-week at every earlier week
/// inside `visible` and before `origin`. Slots without such history fall
/// back to `fallback[node]`.
pub fn ha_forecast(
    ds: &TrafficDataset,
    origin: usize,
    horizon: usize,
    visible: Range<usize>,
    fallback: &[f64],
) -> Tensor {
    let week = ds.steps_per_week();
    let n = ds.n();
    let mut out = Vec::with_capacity(n * horizon);
    for node in 0..n {
        let s = ds.series(node);
        for h in 0..horizon {
            let t = origin + h;
            let (mut sum, mut cnt) = (0.0, 0usize);
            let mut back = week;
            while back <= t && t - back >= visible.start {
                if t - back < origin {
                    sum += s[t - back];
                    cnt += 1;
                }
                back += week;
            }
            out.push(if cnt == 0 { fallback[node] } else { sum / cnt as f64 });
        }
    }
    Tensor::new([n, horizon, 1], out).expect("ha shape")
}

/// Runs the checkpointed model on one window and returns mph.
pub fn predict_window(ckpt: &Checkpoint, graph: &TrafficGraph, window: &Window, retain: bool) -> Result<(Tensor, ForwardOutput)> {
    predict_input(ckpt, graph, &window.input, retain)
}

/// Runs the checkpointed model on an `[N, L, 1]` input in mph.
pub fn predict_input(ckpt: &Checkpoint, graph: &TrafficGraph, input: &Tensor, retain: bool) -> Result<(Tensor, ForwardOutput)> {
    let x = ckpt.normalizer.normalize(input);
    let out = ckpt.model.forward(&x, graph, retain)?;
    Ok((ckpt.normalizer.denormalize(&out.prediction), out))
}

/// Forecast `[N, Q, 1]` in mph whose first step is `origin`, using the
/// checkpoint's window layout.
pub fn predict(ckpt: &Checkpoint, ds: &TrafficDataset, graph: &TrafficGraph, origin: usize) -> Result<Tensor> {
    ckpt.check_dataset(ds)?;
    let x = input_at(ds, &ckpt.window, origin)?;
    Ok(predict_input(ckpt, graph, &x, false)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDateTime;

    fn t(v: Vec<f64>) -> Tensor {
        let n = v.len();
        Tensor::new([n, 1, 1], v).unwrap()
    }

    #[test]
    fn mae_examples() {
        let m = evaluate_mae(&[t(vec![1.0, 3.0])], &[t(vec![0.0, 0.0])], 60).unwrap();
        assert_eq!(m.per_step, vec![2.0]);
        let p = Tensor::full([2, 4, 1], 53.0);
        let y = Tensor::full([2, 4, 1], 50.0);
        let m = evaluate_mae(&[p.clone()], &[y.clone()], 30).unwrap();
        assert!(m.per_step.iter().all(|&v| v == 3.0));
        let m = evaluate_mae(&[y.clone()], &[y], 30).unwrap();
        assert!(m.per_step.iter().all(|&v| v == 0.0));
        assert!(evaluate_mae(&[p], &[t(vec![1.0])], 30).is_err());
    }

    #[test]
    fn buckets_at_half_hour_resolution() {
        let q = 24;
        let m = evaluate_mae(
            &[Tensor::new([1, q, 1], (1..=q).map(|s| s as f64).collect()).unwrap()],
            &[Tensor::zeros([1, q, 1])],
            30,
        )
        .unwrap();
        let labels: Vec<_> = m.buckets.iter().map(|b| b.label.as_str()).collect();
        assert_eq!(labels, ["30min", "60min", "2h", "4h", "8h", "12h"]);
        let b12 = m.buckets.last().unwrap();
        assert_eq!((b12.first_step, b12.last_step), (17, 24));
        assert_eq!(b12.mae, 20.5);
    }

    #[test]
    fn ha_averages_prior_weeks() {
        // 1-day resolution keeps the arithmetic small: a week is 7 steps
        let start = NaiveDateTime::parse_from_str("2024-01-01T00:00:00", "%Y-%m-%dT%H:%M:%S").unwrap();
        let mut s = vec![0.0; 21];
        s[2] = 10.0;
        s[9] = 20.0;
        let ds = TrafficDataset::new(vec!["a".into()], 24 * 60, start, vec![s]).unwrap();
        let p = ha_forecast(&ds, 15, 2, 0..21, &[99.0]);
        assert_eq!(p.data(), &[0.0, 15.0]);
        // no visible history: fallback
        let p = ha_forecast(&ds, 15, 2, 14..21, &[99.0]);
        assert_eq!(p.data(), &[99.0, 99.0]);
    }
}
