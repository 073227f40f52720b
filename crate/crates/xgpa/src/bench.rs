//! Forward-pass timing of the pyramid attention stack against a plain
//! quadratic attention reference.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use xgpa_core::nn::Activation;
use xgpa_core::temporal::pyramid_forward;
use xgpa_core::{AttentionVariant, AutocorrAttentionLayer, Binder, ParamStore, PatchAttentionLayer, Tensor};

use crate::error::{Result, XgpaError};

/// Hidden width used by both components.
pub const WIDTH: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    PyramidAttention,
    NaiveQuadraticAttention,
}

impl FromStr for Component {
    type Err = XgpaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pyramid" | "pyramid_attention" => Ok(Component::PyramidAttention),
            "naive" | "naive_quadratic_attention" => Ok(Component::NaiveQuadraticAttention),
            _ => Err(XgpaError::invalid("component", format!("unknown component {s:?}"))),
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Component::PyramidAttention => "pyramid_attention",
            Component::NaiveQuadraticAttention => "naive_quadratic_attention",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub len: usize,
    /// Median of the timed runs.
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchTable {
    pub component: Component,
    pub runs: usize,
    pub rows: Vec<BenchRow>,
    /// Least-squares slope of ln(seconds) against ln(L).
    pub slope: f64,
}

impl BenchTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("component,L,seconds\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{:e}\n", self.component, r.len, r.seconds));
        }
        s
    }

    pub fn is_monotonic(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].seconds >= w[0].seconds)
    }
}

pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (xs, ys): (Vec<f64>, Vec<f64>) = points.iter().map(|&(l, t)| (l.ln(), t.ln())).unzip();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Full softmax attention over all `L²` pairs, one query row at a time.
pub fn naive_attention(q: &[f64], k: &[f64], v: &[f64], len: usize, d: usize) -> Vec<f64> {
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; len * d];
    let mut row = vec![0.0; len];
    for i in 0..len {
        let qi = &q[i * d..(i + 1) * d];
        let mut max = f64::NEG_INFINITY;
        for (j, r) in row.iter_mut().enumerate() {
            let kj = &k[j * d..(j + 1) * d];
            *r = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            max = max.max(*r);
        }
        let mut z = 0.0;
        for r in row.iter_mut() {
            *r = (*r - max).exp();
            z += *r;
        }
        let oi = &mut out[i * d..(i + 1) * d];
        for (j, r) in row.iter().enumerate() {
            let w = r / z;
            for (o, vj) in oi.iter_mut().zip(&v[j * d..(j + 1) * d]) {
                *o += w * vj;
            }
        }
    }
    out
}

struct Pyramid {
    store: ParamStore,
    patches: Vec<PatchAttentionLayer>,
    heads: Vec<AutocorrAttentionLayer>,
}

fn pyramid(rng: &mut ChaCha8Rng) -> Result<Pyramid> {
    let mut store = ParamStore::new();
    let v = AttentionVariant::IdentityValue;
    let mut patches = Vec::new();
    let mut heads = Vec::new();
    for j in 0..2 {
        patches.push(PatchAttentionLayer::new(&mut store, rng, &format!("p{j}"), WIDTH, 4, v, Activation::Tanh)?);
    }
    for j in 0..3 {
        heads.push(AutocorrAttentionLayer::new(&mut store, rng, &format!("h{j}"), WIDTH, 3, v)?);
    }
    Ok(Pyramid { store, patches, heads })
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Times forward passes at each `L`: one warm-up, then the median of
/// `runs` timed passes.
pub fn benchmark_scaling(component: Component, lens: &[usize], runs: usize) -> Result<BenchTable> {
    if lens.is_empty() || lens.windows(2).any(|w| w[1] <= w[0]) || lens[0] < 64 {
        return Err(XgpaError::invalid("Ls", "must be ascending and each at least 64"));
    }
    if runs == 0 {
        return Err(XgpaError::invalid("runs", "must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0xbe7c);
    let model = pyramid(&mut rng)?;
    let mut rows = Vec::with_capacity(lens.len());
    for &len in lens {
        let x: Vec<f64> = (0..len * WIDTH).map(|_| rng.random_range(-1.0..1.0)).collect();
        let once = || -> Result<f64> {
            let t0 = Instant::now();
            match component {
                Component::PyramidAttention => {
                    let mut b = Binder::new(&model.store, false);
                    let xv = b.tape.constant(Tensor::new([1, len, WIDTH], x.clone())?);
                    let out = pyramid_forward(&mut b, &model.patches, &model.heads, xv)?;
                    std::hint::black_box(out.outputs.len());
                }
                Component::NaiveQuadraticAttention => {
                    let y = naive_attention(&x, &x, &x, len, WIDTH);
                    std::hint::black_box(y[0]);
                }
            }
            Ok(t0.elapsed().as_secs_f64())
        };
        once()?;
        let times = (0..runs).map(|_| once()).collect::<Result<Vec<_>>>()?;
        rows.push(BenchRow {
            len,
            seconds: median(times),
        });
    }
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.len as f64, r.seconds)).collect();
    let slope = if pts.len() > 1 { log_log_slope(&pts) } else { f64::NAN };
    Ok(BenchTable {
        component,
        runs,
        rows,
        slope,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<_> = [1.0, 2.0, 4.0, 8.0].iter().map(|&l: &f64| (l, 3.0 * l.powf(1.7))).collect();
        assert!((log_log_slope(&pts) - 1.7).abs() < 1e-12);
    }

    #[test]
    fn naive_attention_uniform_keys_average_values() {
        let q = vec![1.0, 0.0, 0.0, 1.0];
        let k = vec![0.0; 4];
        let v = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(naive_attention(&q, &k, &v, 2, 2), vec![2.0, 3.0, 2.0, 3.0]);
    }

    #[test]
    fn rejects_bad_lengths() {
        assert!(benchmark_scaling(Component::PyramidAttention, &[32], 1).is_err());
        assert!(benchmark_scaling(Component::PyramidAttention, &[256, 128], 1).is_err());
    }
}
