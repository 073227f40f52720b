mod common;

use common::{random_tensor, randomize};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xgpa_core::nn::Activation;
use xgpa_core::temporal::pyramid_forward;
use xgpa_core::{
    AttentionVariant, AutocorrAttentionLayer, Binder, GraphAttentionLayer, ParamStore,
    PatchAttentionLayer, Tensor, TrafficGraph,
};

fn patch_layer(d: usize, ps: usize, variant: AttentionVariant, seed: u64) -> (ParamStore, PatchAttentionLayer) {
    let mut s = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = PatchAttentionLayer::new(&mut s, &mut rng, "p", d, ps, variant, Activation::Tanh).unwrap();
    randomize(&mut s, seed + 1, 0.9);
    (s, l)
}

fn head(d: usize, k: usize, variant: AttentionVariant, seed: u64) -> (ParamStore, AutocorrAttentionLayer) {
    let mut s = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = AutocorrAttentionLayer::new(&mut s, &mut rng, "a", d, k, variant).unwrap();
    randomize(&mut s, seed + 1, 0.9);
    (s, l)
}

#[test]
fn identical_patch_members_get_uniform_scores() {
    let (s, layer) = patch_layer(2, 3, AttentionVariant::Full, 0);
    // every patch of 3 repeats one frame
    let frames = [[0.3, -0.7], [1.1, 0.2]];
    let mut data = Vec::new();
    for f in frames {
        for _ in 0..3 {
            data.extend_from_slice(&f);
        }
    }
    let mut b = Binder::new(&s, false);
    let x = b.tape.constant(Tensor::new([1, 6, 2], data).unwrap());
    let (y, sc) = layer.forward(&mut b, x, None).unwrap();
    for v in &sc.scores {
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }
    // Y equals F_V of the shared frame
    let one = b.tape.constant(Tensor::new([1, 1, 2], frames[0].to_vec()).unwrap());
    let fv = layer.maps.value(&mut b, one).unwrap();
    let got = &b.tape.value(y).data()[..2];
    for (a, e) in got.iter().zip(b.tape.value(fv).data()) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn patch_of_full_length_gives_one_step() {
    let (s, layer) = patch_layer(2, 5, AttentionVariant::IdentityValue, 1);
    let mut b = Binder::new(&s, false);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = b.tape.constant(random_tensor(&mut rng, &[3, 5, 2], 1.0));
    let (y, _) = layer.forward(&mut b, x, None).unwrap();
    assert_eq!(b.tape.shape(y), &[3, 1, 2]);
}

#[test]
fn identity_value_patch_matches_straight_line_formula() {
    let mut s = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let layer = PatchAttentionLayer::new(
        &mut s,
        &mut rng,
        "p",
        2,
        2,
        AttentionVariant::IdentityValue,
        Activation::Tanh,
    )
    .unwrap();
    let wq = [[0.5, -0.2], [0.1, 0.3]];
    let bq = [0.05, -0.1];
    let wk = [[-0.4, 0.6], [0.2, 0.7]];
    let bk = [0.0, 0.2];
    let wp = [0.9, -0.3, 0.4, 1.2]; // [query block | key slot]
    let set = |s: &mut ParamStore, name: &str, shape: &[usize], v: Vec<f64>| {
        let id = s.id(name).unwrap();
        s.set(id, Tensor::new(shape.to_vec(), v).unwrap()).unwrap();
    };
    set(&mut s, "p.f_q.weight", &[2, 2], vec![wq[0][0], wq[0][1], wq[1][0], wq[1][1]]);
    set(&mut s, "p.f_q.bias", &[2], bq.to_vec());
    set(&mut s, "p.f_k.weight", &[2, 2], vec![wk[0][0], wk[0][1], wk[1][0], wk[1][1]]);
    set(&mut s, "p.f_k.bias", &[2], bk.to_vec());
    set(&mut s, "p.w_patch", &[2, 2], wp.to_vec());

    let xs = [[1.0, -0.5], [0.3, 0.8], [-1.2, 0.4], [0.0, 2.0]];
    let map = |w: &[[f64; 2]; 2], b: &[f64; 2], x: &[f64; 2]| {
        [
            x[0] * w[0][0] + x[1] * w[1][0] + b[0],
            x[0] * w[0][1] + x[1] * w[1][1] + b[1],
        ]
    };
    let dot = |a: &[f64], b: &[f64; 2]| a[0] * b[0] + a[1] * b[1];
    let mut expect = Vec::new();
    for patch in xs.chunks(2) {
        let (x0, x1) = (&patch[0], &patch[1]);
        let s0 = (dot(&wp[..2], &map(&wq, &bq, x0)) + dot(&wp[2..], &map(&wk, &bk, x1))).tanh();
        let s1 = (dot(&wp[..2], &map(&wq, &bq, x1)) + dot(&wp[2..], &map(&wk, &bk, x0))).tanh();
        let (e0, e1) = (s0.exp(), s1.exp());
        let (a0, a1) = (e0 / (e0 + e1), e1 / (e0 + e1));
        expect.push(a0 * x0[0] + a1 * x1[0]);
        expect.push(a0 * x0[1] + a1 * x1[1]);
    }
    let mut b = Binder::new(&s, false);
    let x = b
        .tape
        .constant(Tensor::new([1, 4, 2], xs.iter().flatten().copied().collect()).unwrap());
    let (y, _) = layer.forward(&mut b, x, None).unwrap();
    for (a, e) in b.tape.value(y).data().iter().zip(&expect) {
        assert!((a - e).abs() < 1e-14, "{a} vs {e}");
    }
}

fn periodic(n: usize, l: usize, d: usize, p: usize) -> Tensor {
    let mut v = Vec::with_capacity(n * l * d);
    for node in 0..n {
        for t in 0..l {
            for f in 0..d {
                let ph = 2.0 * std::f64::consts::PI * (t % p) as f64 / p as f64;
                v.push((ph + node as f64 + f as f64 * 0.7).sin() + 0.3 * (2.0 * ph).cos());
            }
        }
    }
    Tensor::new([n, l, d], v).unwrap()
}

#[test]
fn periodic_input_selects_its_period() {
    let (s, layer) = head(2, 1, AttentionVariant::SharedQkIdentityValue, 3);
    let mut b = Binder::new(&s, false);
    let xt = periodic(2, 24, 2, 6);
    let x = b.tape.constant(xt.clone());
    let (y, ds) = layer.forward(&mut b, x, None).unwrap();
    assert_eq!(ds.delays, vec![6]);
    assert_eq!(ds.scores, vec![1.0]);
    let rolled = b.tape.roll(x, 1, 6).unwrap();
    let diff = b.tape.value(y).max_abs_diff(b.tape.value(rolled)).unwrap();
    assert!(diff < 1e-12);
}

#[test]
fn equal_correlations_give_the_mean_of_two_rolls() {
    let (s, layer) = head(2, 2, AttentionVariant::SharedQkIdentityValue, 4);
    let mut b = Binder::new(&s, false);
    let x = b.tape.constant(periodic(1, 18, 2, 6));
    let (y, ds) = layer.forward(&mut b, x, None).unwrap();
    assert_eq!(ds.delays, vec![6, 12]);
    assert!((ds.scores[0] - 0.5).abs() < 1e-12);
    let r1 = b.tape.roll(x, 1, 6).unwrap();
    let r2 = b.tape.roll(x, 1, 12).unwrap();
    let sum = b.tape.add(r1, r2).unwrap();
    let mean = b.tape.scale(sum, 0.5);
    assert!(b.tape.value(y).max_abs_diff(b.tape.value(mean)).unwrap() < 1e-12);
}

#[test]
fn identity_value_head_is_a_linear_combination_of_inputs() {
    for seed in 0..10 {
        let (s, layer) = head(3, 3, AttentionVariant::IdentityValue, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xt = random_tensor(&mut rng, &[2, 9, 3], 1.0);
        let mut b = Binder::new(&s, false);
        let x = b.tape.constant(xt.clone());
        let (y, ds) = layer.forward(&mut b, x, None).unwrap();
        assert!((ds.scores.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let yv = b.tape.value(y);
        for n in 0..2 {
            for p in 0..9 {
                for d in 0..3 {
                    let want: f64 = ds
                        .delays
                        .iter()
                        .zip(&ds.scores)
                        .map(|(&tau, &sc)| sc * xt.get(&[n, (p + tau) % 9, d]).unwrap())
                        .sum();
                    assert!((yv.get(&[n, p, d]).unwrap() - want).abs() < 1e-9);
                }
            }
        }
    }
}

#[test]
fn delay_sets_are_deterministic() {
    let (s, layer) = head(3, 4, AttentionVariant::Full, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xt = random_tensor(&mut rng, &[3, 16, 3], 1.0);
    let run = || {
        let mut b = Binder::new(&s, false);
        let x = b.tape.constant(xt.clone());
        let (y, ds) = layer.forward(&mut b, x, None).unwrap();
        (b.tape.value(y).clone(), ds)
    };
    assert_eq!(run(), run());
}

#[test]
fn pyramid_level_lengths_and_normalization() {
    let mut s = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let v = AttentionVariant::IdentityValue;
    let p1 = PatchAttentionLayer::new(&mut s, &mut rng, "p1", 2, 2, v, Activation::Tanh).unwrap();
    let p2 = PatchAttentionLayer::new(&mut s, &mut rng, "p2", 2, 2, v, Activation::Tanh).unwrap();
    let h = AutocorrAttentionLayer::new(&mut s, &mut rng, "h", 2, 1, v).unwrap();
    let mut b = Binder::new(&s, false);
    let x = b.tape.constant(random_tensor(&mut rng, &[2, 8, 2], 1.0));
    let out = pyramid_forward(&mut b, &[p1, p2], std::slice::from_ref(&h), x).unwrap();
    let lens: Vec<usize> = out.levels.iter().map(|&l| b.tape.shape(l)[1]).collect();
    assert_eq!(lens, vec![8, 4, 2]);
    for ps in &out.patch_scores {
        for chunk in ps.scores.chunks(ps.ps) {
            assert!(chunk.iter().all(|&v| v >= 0.0));
            assert!((chunk.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
    let empty = pyramid_forward(&mut b, &[], std::slice::from_ref(&h), x).unwrap();
    assert_eq!(empty.outputs.len(), 1);
    assert!(empty.patch_scores.is_empty());
}

fn path3_layer(variant: AttentionVariant, act: Activation) -> (ParamStore, GraphAttentionLayer) {
    let mut s = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let l = GraphAttentionLayer::new(&mut s, &mut rng, "g", 1, variant, act).unwrap();
    (s, l)
}

#[test]
fn one_dimensional_importance_by_hand() {
    let (mut s, layer) = path3_layer(AttentionVariant::IdentityValue, Activation::Tanh);
    let set = |s: &mut ParamStore, n: &str, v: Vec<f64>| {
        let id = s.id(n).unwrap();
        let shape = s.get(id).shape().to_vec();
        s.set(id, Tensor::new(shape, v).unwrap()).unwrap();
    };
    set(&mut s, "g.f_q.weight", vec![0.7]);
    set(&mut s, "g.f_q.bias", vec![0.1]);
    set(&mut s, "g.f_k.weight", vec![-0.4]);
    set(&mut s, "g.f_k.bias", vec![0.3]);
    set(&mut s, "g.w_sp", vec![1.5, 0.8, -2.0]);
    let got = layer.node_importance(&s, &[0.6], &[-1.1], 0.25).unwrap();
    let want = (1.5 * (0.7 * 0.6 + 0.1) + 0.8 * (-0.4 * -1.1 + 0.3) - 2.0 * 0.25f64).tanh();
    assert!((got - want).abs() < 1e-15);
}

#[test]
fn shared_qk_importance_is_symmetric_for_equal_inputs() {
    let (s, layer) = path3_layer(AttentionVariant::SharedQkIdentityValue, Activation::Tanh);
    let a = layer.node_importance(&s, &[0.4], &[0.4], 0.0).unwrap();
    let b = layer.node_importance(&s, &[0.4], &[0.4], 0.0).unwrap();
    assert_eq!(a, b);
}

#[test]
fn path_graph_alpha_matches_brute_force() {
    let g = TrafficGraph::new(
        vec!["a".into(), "b".into(), "c".into()],
        &[(0, 1, 400.0), (1, 2, 1000.0)],
    )
    .unwrap();
    let (mut s, layer) = path3_layer(AttentionVariant::IdentityValue, Activation::Sigmoid);
    randomize(&mut s, 42, 1.0);
    let h = [0.5, -1.0, 2.0];
    let mut b = Binder::new(&s, false);
    let hv = b.tape.constant(Tensor::new([3, 1], h.to_vec()).unwrap());
    let (_, sc) = layer.masked_attention(&mut b, hv, &g).unwrap();
    let dmax = 1000.0;
    for i in 0..3 {
        let nb = g.neighbors(i);
        let imp: Vec<f64> = nb
            .iter()
            .map(|&j| layer.node_importance(&s, &[h[i]], &[h[j]], g.distance(i, j).unwrap() / dmax).unwrap())
            .collect();
        let z: f64 = imp.iter().map(|v| v.exp()).sum();
        for (t, &j) in nb.iter().enumerate() {
            assert!((sc.get(i, j) - imp[t].exp() / z).abs() < 1e-14);
        }
    }
    assert_eq!(sc.get(0, 2), 0.0);
}

#[test]
fn uniform_importance_gives_uniform_alpha() {
    let g = TrafficGraph::path(4, 100.0).unwrap();
    let mut s = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let layer = GraphAttentionLayer::new(&mut s, &mut rng, "g", 2, AttentionVariant::Full, Activation::Tanh).unwrap();
    s.set(layer.w_sp, Tensor::zeros([5])).unwrap();
    let mut b = Binder::new(&s, false);
    let h = b.tape.constant(random_tensor(&mut rng, &[4, 2], 1.0));
    let (_, sc) = layer.masked_attention(&mut b, h, &g).unwrap();
    for i in 0..4 {
        let m = g.neighbors(i).len() as f64;
        for (_, a) in sc.row(i) {
            assert!((a - 1.0 / m).abs() < 1e-15);
        }
    }
}

#[test]
fn identity_aggregation_cases() {
    let (s, layer) = {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = GraphAttentionLayer::new(&mut s, &mut rng, "g", 2, AttentionVariant::IdentityValue, Activation::Tanh)
            .unwrap();
        (s, l)
    };
    // self-only rows reproduce the input
    let lonely = TrafficGraph::new(vec!["a".into(), "b".into()], &[]).unwrap();
    let mut b = Binder::new(&s, false);
    let xt = Tensor::new([2, 1, 2], vec![1.0, 2.0, -3.0, 0.5]).unwrap();
    let x = b.tape.constant(xt.clone());
    let (y, _) = layer.forward(&mut b, x, &lonely, None).unwrap();
    assert_eq!(b.tape.value(y), &xt);
    // uniform α on a 2-clique averages
    let clique = TrafficGraph::path(2, 10.0).unwrap();
    let a = b.tape.constant(Tensor::from_vec(vec![0.5; 4]));
    let y = layer.aggregate(&mut b, x, a, &clique).unwrap();
    assert_eq!(b.tape.value(y).data(), &[-1.0, 1.25, -1.0, 1.25]);
}

#[test]
fn masking_locality_and_linearity() {
    let g = TrafficGraph::path(5, 250.0).unwrap();
    for variant in [AttentionVariant::Full, AttentionVariant::IdentityValue] {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let layer = GraphAttentionLayer::new(&mut s, &mut rng, "g", 3, variant, Activation::Tanh).unwrap();
        let xt = random_tensor(&mut rng, &[5, 4, 3], 1.0);
        let run = |xt: &Tensor| {
            let mut b = Binder::new(&s, false);
            let x = b.tape.leaf(xt.clone(), true);
            let (y, sc) = layer.forward(&mut b, x, &g, None).unwrap();
            // loss reads node 0 only
            let y0 = b.tape.slice(y, 0, 0, 1).unwrap();
            let l = b.tape.sum_all(y0);
            b.tape.backward(l).unwrap();
            (b.tape.value(y).clone(), sc, b.tape.grad(x).unwrap())
        };
        let (y, sc, grad) = run(&xt);
        for i in 0..5 {
            let row: f64 = sc.row(i).map(|(_, a)| a).sum();
            assert!((row - 1.0).abs() < 1e-9);
            for j in 0..5 {
                if !g.neighbors(i).contains(&j) {
                    assert_eq!(sc.get(i, j), 0.0);
                }
            }
        }
        // nodes 2..5 are outside node 0's neighborhood
        for m in 2..5 {
            for t in 0..4 {
                for d in 0..3 {
                    assert_eq!(grad.get(&[m, t, d]).unwrap(), 0.0);
                }
            }
        }
        let mut x2 = xt.clone();
        for t in 0..4 {
            x2.set(&[3, t, 1], 9.0).unwrap();
        }
        let (y2, _, _) = run(&x2);
        for t in 0..4 {
            for d in 0..3 {
                assert_eq!(y.get(&[0, t, d]).unwrap(), y2.get(&[0, t, d]).unwrap());
            }
        }
        if variant == AttentionVariant::IdentityValue {
            for i in 0..5 {
                for t in 0..4 {
                    for d in 0..3 {
                        let want: f64 = sc.row(i).map(|(j, a)| a * xt.get(&[j, t, d]).unwrap()).sum();
                        assert!((y.get(&[i, t, d]).unwrap() - want).abs() < 1e-9);
                    }
                }
            }
        }
    }
}
