use chrono::NaiveDateTime;
use xgpa::core::{Adam, Binder, Tensor, TrafficGraph, XgpaConfig, XgpaModel};
use xgpa::data::split;
use xgpa::eval::predict;
use xgpa::synth::generate_synthetic;
use xgpa::train::{evaluate_split, train};
use xgpa::{Checkpoint, Normalizer, SplitKind, SyntheticSpec, TrafficDataset, TrainHyper, WindowSpec};

fn small_config(seed: u64, lr: f64) -> XgpaConfig {
    XgpaConfig {
        input_len: 16,
        horizon: 4,
        d_hidden: 4,
        patch_sizes: vec![2],
        k: 2,
        seed,
        learning_rate: lr,
        batch_size: 4,
        ..Default::default()
    }
}

fn start() -> NaiveDateTime {
    NaiveDateTime::parse_from_str("2024-01-01T00:00:00", "%Y-%m-%dT%H:%M:%S").unwrap()
}

fn hyper(epochs: usize) -> TrainHyper {
    TrainHyper {
        epochs,
        patience: epochs,
        windows_per_epoch: Some(16),
        val_windows: Some(8),
        ..Default::default()
    }
}

fn synthetic() -> (TrafficGraph, TrafficDataset) {
    generate_synthetic(&SyntheticSpec {
        nodes: 3,
        weeks: 1,
        ..Default::default()
    })
    .unwrap()
}

fn checkpoint(model: XgpaModel, normalizer: Normalizer, ds: &TrafficDataset, spec: &WindowSpec) -> Checkpoint {
    Checkpoint {
        model,
        normalizer,
        node_ids: ds.ids().to_vec(),
        window: spec.clone(),
    }
}

#[test]
fn constant_dataset_is_fit_exactly() {
    let series = vec![vec![55.0; 7 * 48], vec![62.5; 7 * 48], vec![40.0; 7 * 48]];
    let ds = TrafficDataset::new(vec!["a".into(), "b".into(), "c".into()], 30, start(), series).unwrap();
    let g = TrafficGraph::path(3, 1000.0).unwrap();
    let spec = WindowSpec::contiguous(16, 4);
    let sp = split(&ds, (0.7, 0.1, 0.2)).unwrap();
    let mut model = XgpaModel::new(small_config(1, 1e-2)).unwrap();
    let (report, norm) = train(&mut model, &ds, &g, &sp, &spec, &hyper(50)).unwrap();
    assert!(report.best_val_mae < 0.1, "{report:?}");
    let ck = checkpoint(model, norm, &ds, &spec);
    let m = evaluate_split(&ck, &ds, &g, &sp, SplitKind::Train, &spec, None).unwrap();
    assert!(m.overall() < 0.1);
}

#[test]
fn constant_speed_is_learned_within_200_steps() {
    // fixed scaling, so the model itself has to move its output to the target
    let norm = Normalizer {
        mean: vec![50.0; 2],
        std: vec![10.0; 2],
    };
    let g = TrafficGraph::path(2, 800.0).unwrap();
    let mut model = XgpaModel::new(small_config(3, 1e-2)).unwrap();
    let x = norm.normalize(&Tensor::full([2, 16, 1], 60.0));
    let y = norm.normalize(&Tensor::full([2, 4, 1], 60.0));
    let mut opt = Adam::new(&model.store, model.config.learning_rate);
    for _ in 0..200 {
        let mut b = Binder::new(&model.store, true);
        let xv = b.tape.constant(x.clone());
        let tr = model.build(&mut b, xv, &g, None).unwrap();
        let yv = b.tape.constant(y.clone());
        let d = b.tape.sub(tr.prediction, yv).unwrap();
        let d = b.tape.abs(d);
        let loss = b.tape.mean_all(d);
        b.tape.backward(loss).unwrap();
        let grads = b.gradients();
        opt.step(&mut model.store, &grads);
    }
    let pred = norm.denormalize(&model.forward(&x, &g, false).unwrap().prediction);
    let mae = pred.data().iter().map(|p| (p - 60.0).abs()).sum::<f64>() / pred.len() as f64;
    assert!(mae < 0.5, "MAE {mae}");
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let (g, ds) = synthetic();
    let spec = WindowSpec::contiguous(16, 4);
    let sp = split(&ds, (0.7, 0.1, 0.2)).unwrap();
    let mut model = XgpaModel::new(small_config(2, 0.0)).unwrap();
    let before = model.store.clone();
    let (report, _) = train(&mut model, &ds, &g, &sp, &spec, &hyper(3)).unwrap();
    assert_eq!(model.store, before);
    assert!(!report.improved);
    assert_eq!(report.best_epoch, 0);
    assert!(report.epochs.iter().all(|e| e.val_mae == report.epochs[0].val_mae));
}

#[test]
fn training_is_deterministic_and_keeps_the_best_epoch() {
    let (g, ds) = synthetic();
    let spec = WindowSpec::contiguous(16, 4);
    let sp = split(&ds, (0.7, 0.1, 0.2)).unwrap();
    let run = || {
        let mut model = XgpaModel::new(small_config(5, 1e-2)).unwrap();
        let (report, norm) = train(&mut model, &ds, &g, &sp, &spec, &hyper(4)).unwrap();
        (report, checkpoint(model, norm, &ds, &spec).to_bytes().unwrap())
    };
    let (r1, b1) = run();
    let (r2, b2) = run();
    assert_eq!(b1, b2);
    assert_eq!(serde_json::to_string(&r1).unwrap(), serde_json::to_string(&r2).unwrap());
    assert!(r1.improved);
    let best = r1.epochs[r1.best_epoch].val_mae;
    assert_eq!(best, r1.best_val_mae);
    assert!(r1.epochs.iter().all(|e| e.val_mae >= best));
    // the restored parameters reproduce the best validation score
    let ck = Checkpoint::from_bytes(&b1).unwrap();
    let val = evaluate_split(&ck, &ds, &g, &sp, SplitKind::Val, &spec, Some(8)).unwrap();
    assert_eq!(val.overall(), best);
}

#[test]
fn untrained_model_predicts_the_train_mean() {
    let (g, ds) = synthetic();
    let spec = WindowSpec::contiguous(16, 4);
    let sp = split(&ds, (0.7, 0.1, 0.2)).unwrap();
    let norm = Normalizer::fit(&ds, sp.train.clone()).unwrap();
    let ck = checkpoint(XgpaModel::new(small_config(0, 1e-3)).unwrap(), norm.clone(), &ds, &spec);
    let p = predict(&ck, &ds, &g, 200).unwrap();
    for n in 0..ds.n() {
        for h in 0..4 {
            assert_eq!(p.data()[n * 4 + h], norm.mean[n]);
        }
    }
}

#[test]
fn layout_mismatch_is_rejected() {
    let (g, ds) = synthetic();
    let sp = split(&ds, (0.7, 0.1, 0.2)).unwrap();
    let mut model = XgpaModel::new(small_config(0, 1e-3)).unwrap();
    let err = train(&mut model, &ds, &g, &sp, &WindowSpec::contiguous(12, 4), &hyper(1)).unwrap_err();
    assert!(err.to_string().contains("L=12"), "{err}");
}
