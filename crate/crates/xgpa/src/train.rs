//! Mini-batch Adam on the MAE loss with early stopping on validation MAE.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use xgpa_core::{Adam, Binder, Tensor, TrafficGraph, XgpaModel};

use crate::checkpoint::Checkpoint;
use crate::data::{make_windows, Normalizer, Split, SplitKind, TrafficDataset, Window, WindowSpec, Windows};
use crate::eval::{ha_forecast, predict_window, HorizonMAE, MaeAccumulator};
use crate::error::{Result, XgpaError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainHyper {
    pub epochs: usize,
    /// Epochs without a new best validation MAE before stopping.
    pub patience: usize,
    /// Training windows drawn (without replacement) per epoch; all if unset.
    pub windows_per_epoch: Option<usize>,
    /// Evenly spaced validation windows scored per epoch; all if unset.
    pub val_windows: Option<usize>,
    pub clip_norm: Option<f64>,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            epochs: 50,
            patience: 10,
            windows_per_epoch: None,
            val_windows: None,
            clip_norm: Some(5.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss (mph); 0 for the untrained epoch 0.
    pub train_loss: f64,
    /// Validation MAE in mph; scored on training windows when the
    /// validation range holds none.
    pub val_mae: f64,
    /// Seconds since training started. Not serialized, so reports of
    /// repeated runs stay byte-identical.
    #[serde(skip, default)]
    pub wall_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Epoch 0 scores the initial parameters.
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    /// False when no epoch beat the initial parameters.
    pub improved: bool,
    pub validated_on_train: bool,
    pub train_windows: usize,
    pub val_windows: usize,
    pub test: Option<HorizonMAE>,
}

/// Evenly spaced subset of at most `max` indices out of `n`.
pub fn spaced(n: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < n => (0..m).map(|i| i * n / m).collect(),
        _ => (0..n).collect(),
    }
}

/// Mean-absolute error loss of one window in mph, with gradients
/// accumulated into `grads`.
fn window_step(
    model: &XgpaModel,
    graph: &TrafficGraph,
    norm: &Normalizer,
    std_t: &Tensor,
    w: &Window,
    grads: &mut [Option<Vec<f64>>],
) -> Result<f64> {
    let mut b = Binder::new(&model.store, true);
    let x = b.tape.constant(norm.normalize(&w.input));
    let tr = model.build(&mut b, x, graph, None)?;
    let y = b.tape.constant(norm.normalize(&w.target));
    let diff = b.tape.sub(tr.prediction, y)?;
    let diff = b.tape.abs(diff);
    let s = b.tape.constant(std_t.clone());
    let mph = b.tape.mul(diff, s)?;
    let loss = b.tape.mean_all(mph);
    let value = b.tape.value(loss).item().unwrap_or(f64::NAN);
    if !value.is_finite() {
        return Ok(value);
    }
    b.tape.backward(loss)?;
    for (acc, g) in grads.iter_mut().zip(b.gradients()) {
        if let Some(g) = g {
            match acc {
                Some(a) => a.iter_mut().zip(&g).for_each(|(a, g)| *a += g),
                None => *acc = Some(g),
            }
        }
    }
    Ok(value)
}

/// MAE (mph) of the model over the given windows.
pub fn score_windows(
    ckpt: &Checkpoint,
    graph: &TrafficGraph,
    windows: &Windows<'_>,
    pick: &[usize],
    resolution_min: u32,
) -> Result<HorizonMAE> {
    let mut acc = MaeAccumulator::new(windows.spec().horizon, resolution_min);
    for &i in pick {
        let w = windows.get(i);
        let (p, _) = predict_window(ckpt, graph, &w, false)?;
        acc.add(&p, &w.target)?;
    }
    Ok(acc.finish())
}

/// Trains `model` in place and restores the parameters with the best
/// validation MAE. Returns the report and the training-split normalizer.
pub fn train(
    model: &mut XgpaModel,
    ds: &TrafficDataset,
    graph: &TrafficGraph,
    split: &Split,
    spec: &WindowSpec,
    hyper: &TrainHyper,
) -> Result<(TrainReport, Normalizer)> {
    let c = model.config.clone();
    if spec.input_len != c.input_len || spec.horizon != c.horizon {
        return Err(XgpaError::Model(xgpa_core::Error::Contract(format!(
            "window layout L={} Q={} but model L={} Q={}",
            spec.input_len, spec.horizon, c.input_len, c.horizon
        ))));
    }
    if graph.n() != ds.n() {
        return Err(XgpaError::Model(xgpa_core::Error::Contract(format!(
            "graph has {} nodes, dataset {}",
            graph.n(),
            ds.n()
        ))));
    }
    let norm = Normalizer::fit(ds, split.train.clone())?;
    let train_w = make_windows(ds, spec, split.range(SplitKind::Train));
    if train_w.is_empty() {
        return Err(XgpaError::invalid("split", "training range holds no window"));
    }
    let val_w = make_windows(ds, spec, split.range(SplitKind::Val));
    let val_pick = spaced(val_w.len(), hyper.val_windows);
    let on_train = val_pick.is_empty();
    let train_pick = spaced(train_w.len(), hyper.val_windows);
    let std_t = Tensor::new([ds.n(), 1, 1], norm.std.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed ^ 0x7261_696e);
    let mut opt = Adam::new(&model.store, c.learning_rate);
    opt.clip_norm = hyper.clip_norm;

    let validate = |model: &XgpaModel| -> Result<f64> {
        let ck = Checkpoint {
            model: model.clone(),
            normalizer: norm.clone(),
            node_ids: ds.ids().to_vec(),
            window: spec.clone(),
        };
        let (w, pick) = if on_train { (&train_w, &train_pick) } else { (&val_w, &val_pick) };
        Ok(score_windows(&ck, graph, w, pick, ds.resolution_min())?.overall())
    };

    let t0 = Instant::now();
    let v0 = validate(model)?;
    let mut records = vec![EpochRecord {
        epoch: 0,
        train_loss: 0.0,
        val_mae: v0,
        wall_s: t0.elapsed().as_secs_f64(),
    }];
    let (mut best, mut best_epoch, mut best_store) = (v0, 0usize, model.store.clone());
    let mut stale = 0usize;
    let mut order: Vec<usize> = (0..train_w.len()).collect();
    let per_epoch = hyper.windows_per_epoch.unwrap_or(order.len()).min(order.len());
    let batch = c.batch_size.max(1);
    let mut step = 0usize;
    for epoch in 1..=hyper.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for chunk in order[..per_epoch].chunks(batch) {
            let mut grads: Vec<Option<Vec<f64>>> = vec![None; model.store.len()];
            for &i in chunk {
                let l = window_step(model, graph, &norm, &std_t, &train_w.get(i), &mut grads)?;
                if !l.is_finite() {
                    return Err(XgpaError::Divergence {
                        step,
                        detail: format!("loss {l} in epoch {epoch} at window origin {}", train_w.origins()[i]),
                    });
                }
                loss_sum += l;
                seen += 1;
            }
            let inv = 1.0 / chunk.len() as f64;
            for g in grads.iter_mut().flatten() {
                g.iter_mut().for_each(|v| *v *= inv);
            }
            opt.step(&mut model.store, &grads);
            step += 1;
            if let Some((_, name, _)) = model.store.iter().find(|(_, _, t)| t.data().iter().any(|v| !v.is_finite())) {
                return Err(XgpaError::Divergence {
                    step,
                    detail: format!("parameter {name} became non-finite in epoch {epoch}"),
                });
            }
        }
        let train_loss = loss_sum / seen.max(1) as f64;
        let val = validate(model)?;
        log::info!(
            "epoch {epoch}: train {train_loss:.4} mph, val {val:.4} mph ({:.1} s)",
            t0.elapsed().as_secs_f64()
        );
        records.push(EpochRecord {
            epoch,
            train_loss,
            val_mae: val,
            wall_s: t0.elapsed().as_secs_f64(),
        });
        if val < best {
            best = val;
            best_epoch = epoch;
            best_store = model.store.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= hyper.patience {
                break;
            }
        }
    }
    model.store = best_store;
    Ok((
        TrainReport {
            epochs: records,
            best_epoch,
            best_val_mae: best,
            improved: best_epoch > 0,
            validated_on_train: on_train,
            train_windows: train_w.len(),
            val_windows: val_w.len(),
            test: None,
        },
        norm,
    ))
}

/// Model MAE over a split, optionally on an evenly spaced subset.
pub fn evaluate_split(
    ckpt: &Checkpoint,
    ds: &TrafficDataset,
    graph: &TrafficGraph,
    split: &Split,
    kind: SplitKind,
    spec: &WindowSpec,
    max_windows: Option<usize>,
) -> Result<HorizonMAE> {
    ckpt.check_dataset(ds)?;
    let w = make_windows(ds, spec, split.range(kind));
    if w.is_empty() {
        return Err(XgpaError::invalid("split", format!("{kind:?} range holds no window")));
    }
    score_windows(ckpt, graph, &w, &spaced(w.len(), max_windows), ds.resolution_min())
}

/// HA MAE over the same windows as [`evaluate_split`].
pub fn evaluate_ha(
    ds: &TrafficDataset,
    split: &Split,
    kind: SplitKind,
    spec: &WindowSpec,
    max_windows: Option<usize>,
) -> Result<HorizonMAE> {
    let range = split.range(kind);
    let w = make_windows(ds, spec, range.clone());
    if w.is_empty() {
        return Err(XgpaError::invalid("split", format!("{kind:?} range holds no window")));
    }
    let fallback = Normalizer::fit(ds, split.train.clone())?.mean;
    let mut acc = MaeAccumulator::new(spec.horizon, ds.resolution_min());
    for i in spaced(w.len(), max_windows) {
        let win = w.get(i);
        let p = ha_forecast(ds, win.origin, spec.horizon, range.clone(), &fallback);
        acc.add(&p, &win.target)?;
    }
    Ok(acc.finish())
}
