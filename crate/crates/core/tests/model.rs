mod common;

use common::{random_tensor, randomize};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xgpa_core::{AttentionVariant, Error, Tensor, TrafficGraph, XgpaConfig, XgpaModel};

fn config(m_gc: usize, patch_sizes: Vec<usize>, k: usize, variant: AttentionVariant) -> XgpaConfig {
    XgpaConfig {
        m_gc,
        patch_sizes,
        k,
        d_in: 1,
        d_hidden: 4,
        input_len: 16,
        horizon: 4,
        variant,
        seed: 7,
        ..XgpaConfig::default()
    }
}

fn trained_like(c: XgpaConfig, seed: u64) -> XgpaModel {
    let mut m = XgpaModel::new(c).unwrap();
    randomize(&mut m.store, seed, 0.7);
    m
}

fn window(n: usize, l: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_tensor(&mut rng, &[n, l, 1], 1.0)
}

#[test]
fn single_cell_model() {
    let m = trained_like(config(0, vec![], 2, AttentionVariant::IdentityValue), 1);
    let g = TrafficGraph::path(3, 100.0).unwrap();
    let out = m.forward(&window(3, 16, 2), &g, true).unwrap();
    assert_eq!(out.cam_weights.len(), 1);
    assert!(out.cam_weights[0] > 0.0);
    assert_eq!(out.prediction.shape(), &[3, 4, 1]);
}

#[test]
fn zero_cam_gives_unit_weights_and_plain_sum() {
    let mut m = trained_like(config(1, vec![2], 2, AttentionVariant::IdentityValue), 3);
    for id in [m.cam_out.weight, m.cam_out.bias.unwrap()] {
        let shape = m.store.get(id).shape().to_vec();
        m.store.set(id, Tensor::zeros(shape)).unwrap();
    }
    let g = TrafficGraph::path(3, 100.0).unwrap();
    let x = window(3, 16, 4);
    let out = m.forward(&x, &g, true).unwrap();
    assert!(out.cam_weights.iter().all(|&w| w == 1.0));

    let grid = out.grid.as_ref().unwrap();
    let cells = m.cell_forward(&m.embed_input(&x).unwrap(), &g, grid).unwrap();
    let w = m.store.get(m.head.weight).data();
    let bias = m.store.get(m.head.bias.unwrap()).data()[0];
    for n in 0..3 {
        for q in 0..4 {
            let fused: Vec<f64> = (0..4)
                .map(|h| cells.iter().map(|c| c.get(&[n, q, h]).unwrap()).sum())
                .collect();
            let want = fused.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + bias;
            let got = out.prediction.get(&[n, q, 0]).unwrap();
            assert!((got - want).abs() < 1e-12);
        }
    }
}

#[test]
fn frozen_cells_are_linear_in_the_embedding() {
    let m = trained_like(config(1, vec![2], 3, AttentionVariant::IdentityValue), 5);
    let g = TrafficGraph::path(4, 100.0).unwrap();
    let x = window(4, 16, 6);
    let grid = m.forward(&x, &g, true).unwrap().grid.unwrap();
    let e = m.embed_input(&x).unwrap();
    let e2 = e.map(|v| 2.0 * v);
    let a = m.cell_forward(&e, &g, &grid).unwrap();
    let b = m.cell_forward(&e2, &g, &grid).unwrap();
    for (ca, cb) in a.iter().zip(&b) {
        assert!(ca.map(|v| 2.0 * v).max_abs_diff(cb).unwrap() < 1e-12);
    }
}

#[test]
fn self_only_graph_with_single_delay_gives_unit_importance() {
    let m = trained_like(config(1, vec![], 1, AttentionVariant::IdentityValue), 8);
    let g = TrafficGraph::new(vec!["a".into(), "b".into()], &[]).unwrap();
    let out = m.forward(&window(2, 16, 9), &g, true).unwrap();
    let ex = m.explain(&out, 1, 0).unwrap();
    let cell = &ex.cells[m.config.cell_index(1, 0)];
    assert_eq!(cell.importances.len(), 1);
    assert_eq!(cell.importances[0].source_node, 1);
    assert_eq!(cell.importances[0].importance, 1.0);
}

#[test]
fn every_score_family_is_normalized() {
    let m = trained_like(config(2, vec![2, 2], 3, AttentionVariant::Full), 10);
    let g = TrafficGraph::path(5, 300.0).unwrap();
    let grid = m.forward(&window(5, 16, 11), &g, true).unwrap().grid.unwrap();
    for s in &grid.spatial {
        for i in 0..5 {
            let row: Vec<f64> = s.row(i).map(|(_, a)| a).collect();
            assert!(row.iter().all(|&a| a >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
    for level in grid.patch.iter().flatten() {
        for chunk in level.scores.chunks(level.ps) {
            assert!((chunk.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
    for d in &grid.delays {
        assert!(d.scores.iter().all(|&s| s >= 0.0));
        assert!((d.scores.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    assert!(grid.cam_weights.iter().all(|&w| w > 0.0));
}

fn faithful_model() -> (XgpaModel, TrafficGraph, Tensor) {
    let m = trained_like(config(2, vec![2, 2], 3, AttentionVariant::IdentityValue), 12);
    (m, TrafficGraph::path(5, 250.0).unwrap(), window(5, 16, 13))
}

#[test]
fn cell_importances_match_embedding_derivatives() {
    let (m, g, x) = faithful_model();
    let out = m.forward(&x, &g, true).unwrap();
    let grid = out.grid.as_ref().unwrap();
    let e = m.embed_input(&x).unwrap();
    let (target, step, ch) = (2usize, 3usize, 1usize);
    let ex = m.explain(&out, target, step).unwrap();
    let base = m.cell_forward(&e, &g, grid).unwrap();
    let eps = 1e-6;
    for (ci, cell) in ex.cells.iter().enumerate() {
        for ic in &cell.input_coefficients {
            let mut ep = e.clone();
            let v = ep.get(&[ic.source_node, ic.input_step, ch]).unwrap();
            ep.set(&[ic.source_node, ic.input_step, ch], v + eps).unwrap();
            let pert = m.cell_forward(&ep, &g, grid).unwrap();
            let num = (pert[ci].get(&[target, step, ch]).unwrap()
                - base[ci].get(&[target, step, ch]).unwrap())
                / eps;
            assert!((num - ic.coefficient).abs() < 1e-6, "cell {ci}: {num} vs {}", ic.coefficient);
        }
        // cells (i, 0) have no patch levels, so importances are the coefficients
        if cell.patch_levels == 0 {
            for imp in &cell.importances {
                let want: f64 = cell
                    .input_coefficients
                    .iter()
                    .filter(|c| c.source_node == imp.source_node && c.input_step == imp.level_step)
                    .map(|c| c.coefficient)
                    .sum();
                let same_step: f64 = cell
                    .importances
                    .iter()
                    .filter(|o| o.source_node == imp.source_node && o.level_step == imp.level_step)
                    .map(|o| o.importance)
                    .sum();
                assert!((want - same_step).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn input_sensitivity_matches_end_to_end_derivative() {
    let (m, g, x) = faithful_model();
    let out = m.forward(&x, &g, true).unwrap();
    let grid = out.grid.as_ref().unwrap();
    let (target, step) = (1usize, 2usize);
    let ex = m.explain(&out, target, step).unwrap();
    assert!(ex.exact);
    let base = m.forward_replay(&x, &g, grid).unwrap();
    let eps = 1e-6;
    for l in 0..5 {
        for t in 0..16 {
            let mut xp = x.clone();
            let v = xp.get(&[l, t, 0]).unwrap();
            xp.set(&[l, t, 0], v + eps).unwrap();
            let p = m.forward_replay(&xp, &g, grid).unwrap();
            let num = (p.get(&[target, step, 0]).unwrap() - base.get(&[target, step, 0]).unwrap()) / eps;
            let want = ex.gain[0] * ex.sensitivity(l, t);
            assert!((num - want).abs() < 1e-6, "({l},{t}): {num} vs {want}");
        }
    }
}

#[test]
fn full_variant_is_flagged_inexact() {
    let m = trained_like(config(1, vec![2], 2, AttentionVariant::Full), 14);
    let g = TrafficGraph::path(3, 100.0).unwrap();
    let out = m.forward(&window(3, 16, 15), &g, true).unwrap();
    assert!(!m.explain(&out, 0, 0).unwrap().exact);
}

#[test]
fn explanation_needs_retained_scores() {
    let m = trained_like(config(1, vec![2], 2, AttentionVariant::IdentityValue), 16);
    let g = TrafficGraph::path(3, 100.0).unwrap();
    let out = m.forward(&window(3, 16, 17), &g, false).unwrap();
    assert!(matches!(m.explain(&out, 0, 0), Err(Error::Contract(_))));
    let out = m.forward(&window(3, 16, 17), &g, true).unwrap();
    assert!(matches!(m.explain(&out, 3, 0), Err(Error::Index(_))));
    assert!(matches!(m.explain(&out, 0, 4), Err(Error::Index(_))));
}

#[test]
fn same_seed_same_model_same_output() {
    let c = config(2, vec![2, 2], 3, AttentionVariant::Full);
    let a = XgpaModel::new(c.clone()).unwrap();
    let b = XgpaModel::new(c).unwrap();
    assert_eq!(a.store.to_records(), b.store.to_records());
    let g = TrafficGraph::path(4, 100.0).unwrap();
    let x = window(4, 16, 18);
    let o1 = a.forward(&x, &g, true).unwrap();
    let o2 = b.forward(&x, &g, true).unwrap();
    assert_eq!(o1.prediction, o2.prediction);
    assert_eq!(o1.cam_weights, o2.cam_weights);
    assert_eq!(o1.grid, o2.grid);
}
