//! Central finite-difference gradient checking shared by the test targets.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xgpa_core::{Binder, ParamStore, Result, Tensor, Var};

pub const STEP: f64 = 1e-6;
pub const FLOOR: f64 = 1e-5;

/// Norm-based relative error `‖a − n‖ / max(‖a‖, ‖n‖, FLOOR)`. The floor
/// keeps gradients that are structurally zero (a bias that shifts every
/// softmax logit equally) from turning rounding noise into a ratio.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn: f64 = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nn).max(FLOOR)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Overwrites every parameter with uniform noise so that no gradient path is
/// silenced by a zero initialisation.
pub fn randomize(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        store.set(id, random_tensor(&mut rng, &shape, scale)).unwrap();
    }
}

/// Random linear functional of a tensor-valued output: `Σ r_i · out_i`.
fn project(b: &mut Binder<'_>, out: Var, seed: u64) -> Result<Var> {
    let shape = b.tape.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = random_tensor(&mut rng, &shape, 1.0);
    let r = b.tape.constant(r);
    let p = b.tape.mul(out, r)?;
    Ok(b.tape.sum_all(p))
}

pub struct GradReport {
    /// `(name, relative error)` for every parameter tensor and input.
    pub errors: Vec<(String, f64)>,
}

impl GradReport {
    pub fn worst(&self) -> (String, f64) {
        self.errors
            .iter()
            .cloned()
            .fold((String::new(), 0.0), |acc, e| if e.1 > acc.1 { e } else { acc })
    }
}

/// Compares analytic and central-difference gradients of a projected output
/// with respect to every parameter in `store` and every tensor in `inputs`.
pub fn check<F>(store: &ParamStore, inputs: &[Tensor], seed: u64, f: F) -> GradReport
where
    F: Fn(&mut Binder<'_>, &[Var]) -> Result<Var>,
{
    fn eval<'s, F>(store: &'s ParamStore, inputs: &[Tensor], trainable: bool, seed: u64, f: &F) -> (Binder<'s>, Vec<Var>, Var)
    where
        F: Fn(&mut Binder<'_>, &[Var]) -> Result<Var>,
    {
        let mut b = Binder::new(store, trainable);
        let xs: Vec<Var> = inputs.iter().map(|t| b.tape.leaf(t.clone(), trainable)).collect();
        let out = f(&mut b, &xs).expect("forward");
        let loss = project(&mut b, out, seed).expect("project");
        (b, xs, loss)
    }
    let (mut b, xs, loss) = eval(store, inputs, true, seed, &f);
    b.tape.backward(loss).unwrap();
    let pgrads = b.gradients();
    let igrads: Vec<Vec<f64>> = xs
        .iter()
        .zip(inputs)
        .map(|(&v, t)| b.tape.grad_slice(v).map_or(vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();
    let value = |s: &ParamStore, i: &[Tensor]| {
        let (b, _, l) = eval(s, i, false, seed, &f);
        b.tape.value(l).item().unwrap()
    };

    let mut errors = Vec::new();
    for (id, name, t) in store.iter() {
        let mut num = vec![0.0; t.len()];
        for j in 0..t.len() {
            let mut s = store.clone();
            s.get_mut(id).data_mut()[j] += STEP;
            let up = value(&s, inputs);
            s.get_mut(id).data_mut()[j] -= 2.0 * STEP;
            let dn = value(&s, inputs);
            num[j] = (up - dn) / (2.0 * STEP);
        }
        let ana = pgrads[id.index()].clone().unwrap_or(vec![0.0; t.len()]);
        errors.push((name.to_string(), rel_err(&ana, &num)));
    }
    for (k, t) in inputs.iter().enumerate() {
        let mut num = vec![0.0; t.len()];
        for j in 0..t.len() {
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[j] += STEP;
            let up = value(store, &xs);
            xs[k].data_mut()[j] -= 2.0 * STEP;
            let dn = value(store, &xs);
            num[j] = (up - dn) / (2.0 * STEP);
        }
        errors.push((format!("input{k}"), rel_err(&igrads[k], &num)));
    }
    GradReport { errors }
}
