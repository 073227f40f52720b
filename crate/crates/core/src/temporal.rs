//! Pyramid autocorrelation attention: patch attention compresses a series
//! level by level, and autocorrelation attention aggregates each level by
//! score-weighted delay rolls.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Activation, AttentionVariant, QkvMaps};
use crate::params::{xavier_uniform, Binder, ParamId, ParamStore};
use crate::spectral::mean_circular_correlation;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Normalized patch scores `S'` of one patch layer application, laid out
/// `[N, patches, ps]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchScores {
    pub nodes: usize,
    pub patches: usize,
    pub ps: usize,
    /// Input length before right-padding.
    pub input_len: usize,
    pub scores: Vec<f64>,
}

impl PatchScores {
    pub fn score(&self, node: usize, patch: usize, member: usize) -> f64 {
        self.scores[(node * self.patches + patch) * self.ps + member]
    }

    /// Unpadded input step read by `member` of `patch`.
    pub fn source_step(&self, patch: usize, member: usize) -> usize {
        (patch * self.ps + member).min(self.input_len - 1)
    }
}

/// Selected delays and their softmax scores for one autocorrelation
/// application. Delays live in `1..=len`; `len` itself is the full-window lag.
#[derive(Clone, Debug, PartialEq)]
pub struct DelayScores {
    pub len: usize,
    pub delays: Vec<usize>,
    pub scores: Vec<f64>,
}

/// Picks `k` delays from `1..=L` by descending score, where `r[τ mod L]` is the
/// score of delay τ. Near-ties (within `1e-9·max|r|`) go to the smaller τ.
pub fn top_k_delays(r: &[f64], k: usize) -> Vec<usize> {
    let l = r.len();
    let score = |tau: usize| r[tau % l];
    let tol = 1e-9 * r.iter().fold(0.0f64, |m, v| m.max(libm::fabs(*v)));
    let mut taken = vec![false; l + 1];
    let mut out = Vec::with_capacity(k);
    for _ in 0..k.min(l) {
        let best = (1..=l)
            .filter(|&t| !taken[t])
            .map(score)
            .fold(f64::NEG_INFINITY, f64::max);
        let pick = (1..=l)
            .find(|&t| !taken[t] && score(t) >= best - tol)
            .expect("non-empty candidate set");
        taken[pick] = true;
        out.push(pick);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchAttentionLayer {
    pub ps: usize,
    pub maps: QkvMaps,
    /// `[ps, D]`: row 0 scores the query, rows `1..ps` the key slots.
    pub w_patch: ParamId,
    pub activation: Activation,
}

impl PatchAttentionLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d: usize,
        ps: usize,
        variant: AttentionVariant,
        activation: Activation,
    ) -> Result<Self> {
        if ps < 2 {
            return Err(Error::Config(format!(
                "patch size must be at least 2, got {ps}"
            )));
        }
        let maps = QkvMaps::new(store, rng, name, d, variant)?;
        let w = xavier_uniform(rng, &[ps, d], ps * d, 1);
        let w_patch = store.add(format!("{name}.w_patch"), w)?;
        Ok(PatchAttentionLayer {
            ps,
            maps,
            w_patch,
            activation,
        })
    }

    pub fn output_len(&self, len: usize) -> usize {
        len.div_ceil(self.ps)
    }

    /// `x: [N, L, D]` → `[N, ⌈L/ps⌉, D]`. With `frozen`, the given scores
    /// replace the computed ones and act as constants.
    pub fn forward(
        &self,
        b: &mut Binder<'_>,
        x: Var,
        frozen: Option<&PatchScores>,
    ) -> Result<(Var, PatchScores)> {
        let shape = b.tape.shape(x).to_vec();
        let d = self.maps.width();
        if shape.len() != 3 || shape[2] != d {
            return Err(Error::shape("patch attention", &shape, &[0, 0, d]));
        }
        let (n, l) = (shape[0], shape[1]);
        let ps = self.ps;
        let p = self.output_len(l);
        let lp = p * ps;
        let x = if lp == l {
            x
        } else {
            let idx: Vec<usize> = (0..lp).map(|t| t.min(l - 1)).collect();
            b.tape.gather(x, 1, &idx)?
        };
        let v = self.maps.value(b, x)?;

        let s = match frozen {
            Some(f) => {
                if f.nodes != n || f.patches != p || f.ps != ps {
                    return Err(Error::Contract(format!(
                        "frozen patch scores [{}, {}, {}] do not fit [{n}, {p}, {ps}]",
                        f.nodes, f.patches, f.ps
                    )));
                }
                b.tape.constant(Tensor::new([n * p, 1, ps], f.scores.clone())?)
            }
            None => {
                let qm = self.maps.query(b, x)?;
                let km = self.maps.key(b, x)?;
                let w = b.param(self.w_patch);
                let wq = b.tape.slice(w, 0, 0, 1)?;
                let wq = b.tape.reshape(wq, &[d, 1])?;
                let wk = b.tape.slice(w, 0, 1, ps - 1)?;
                let wk = b.tape.transpose(wk, 0, 1)?;
                let qm = b.tape.reshape(qm, &[n, p, ps, d])?;
                let km = b.tape.reshape(km, &[n, p, ps, d])?;
                let a = b.tape.matmul(qm, wq)?;
                let a = b.tape.reshape(a, &[n, p, ps])?;
                // kb[.., m, s-1] = F_K(member m) · w_s
                let kb = b.tape.matmul(km, wk)?;
                let kb = b.tape.reshape(kb, &[n, p, ps * (ps - 1)])?;
                // Keys for query q: members other than q, in order, fill slots 1..ps.
                let mut idx = Vec::with_capacity(ps * (ps - 1));
                for q in 0..ps {
                    for slot in 1..ps {
                        let member = if slot - 1 < q { slot - 1 } else { slot };
                        idx.push(member * (ps - 1) + slot - 1);
                    }
                }
                let keys = b.tape.gather(kb, 2, &idx)?;
                let keys = b.tape.reshape(keys, &[n, p, ps, ps - 1])?;
                let keys = b.tape.sum_axis(keys, 3)?;
                let pre = b.tape.add(a, keys)?;
                let act = self.activation.apply(&mut b.tape, pre);
                let s = b.tape.softmax(act, 2)?;
                b.tape.reshape(s, &[n * p, 1, ps])?
            }
        };
        let scores = PatchScores {
            nodes: n,
            patches: p,
            ps,
            input_len: l,
            scores: b.tape.value(s).data().to_vec(),
        };
        let v = b.tape.reshape(v, &[n * p, ps, d])?;
        let y = b.tape.matmul(s, v)?;
        let y = b.tape.reshape(y, &[n, p, d])?;
        Ok((y, scores))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AutocorrAttentionLayer {
    pub k: usize,
    pub maps: QkvMaps,
}

impl AutocorrAttentionLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d: usize,
        k: usize,
        variant: AttentionVariant,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("top-k must be at least 1".into()));
        }
        Ok(AutocorrAttentionLayer {
            k,
            maps: QkvMaps::new(store, rng, name, d, variant)?,
        })
    }

    /// `x: [N, L, D]` → `[N, L, D]`: `Σ_i S_i · Roll(V, τ_i)`.
    pub fn forward(
        &self,
        b: &mut Binder<'_>,
        x: Var,
        frozen: Option<&DelayScores>,
    ) -> Result<(Var, DelayScores)> {
        let shape = b.tape.shape(x).to_vec();
        let d = self.maps.width();
        if shape.len() != 3 || shape[2] != d {
            return Err(Error::shape("autocorrelation attention", &shape, &[0, 0, d]));
        }
        let (n, l) = (shape[0], shape[1]);
        if l < 2 {
            return Err(Error::Config(format!(
                "autocorrelation attention needs length >= 2, got {l}"
            )));
        }
        if self.k > l - 1 {
            return Err(Error::Config(format!(
                "top-k {} exceeds L-1 = {} delays",
                self.k,
                l - 1
            )));
        }
        let v = self.maps.value(b, x)?;
        let (delays, s) = match frozen {
            Some(f) => {
                if f.len != l || f.delays.len() != f.scores.len() || f.delays.is_empty() {
                    return Err(Error::Contract(format!(
                        "frozen delay scores for length {} do not fit length {l}",
                        f.len
                    )));
                }
                let s = b.tape.constant(Tensor::from_vec(f.scores.clone()));
                (f.delays.clone(), s)
            }
            None => {
                let q = self.maps.query(b, x)?;
                let kx = self.maps.key(b, x)?;
                let r = mean_circular_correlation(
                    b.tape.value(q).data(),
                    b.tape.value(kx).data(),
                    n,
                    l,
                    d,
                )?;
                let delays = top_k_delays(&r, self.k);
                let logits = b.tape.lag_correlation(q, kx, 1, &delays)?;
                let s = b.tape.softmax(logits, 0)?;
                (delays, s)
            }
        };
        let scores = DelayScores {
            len: l,
            delays: delays.clone(),
            scores: b.tape.value(s).data().to_vec(),
        };
        let out = b.tape.delay_aggregate(v, s, 1, &delays)?;
        Ok((out, scores))
    }
}

/// Every level of a pyramid pass together with its retained scores.
#[derive(Clone, Debug)]
pub struct PyramidOutput {
    /// Level 0 is the raw input; level `j` follows `j` patch layers.
    pub levels: Vec<Var>,
    /// Autocorrelation output per level.
    pub outputs: Vec<Var>,
    pub patch_scores: Vec<PatchScores>,
    pub delay_scores: Vec<DelayScores>,
}

/// Applies `patches` in sequence and an autocorrelation head to the raw
/// input and every level. `heads` holds either one shared head or one per level.
pub fn pyramid_forward(
    b: &mut Binder<'_>,
    patches: &[PatchAttentionLayer],
    heads: &[AutocorrAttentionLayer],
    x: Var,
) -> Result<PyramidOutput> {
    if heads.len() != 1 && heads.len() != patches.len() + 1 {
        return Err(Error::Config(format!(
            "{} heads for {} levels",
            heads.len(),
            patches.len() + 1
        )));
    }
    let mut levels = vec![x];
    let mut patch_scores = Vec::with_capacity(patches.len());
    for layer in patches {
        let (y, s) = layer.forward(b, *levels.last().expect("level"), None)?;
        levels.push(y);
        patch_scores.push(s);
    }
    let mut outputs = Vec::with_capacity(levels.len());
    let mut delay_scores = Vec::with_capacity(levels.len());
    for (j, &lv) in levels.iter().enumerate() {
        let head = &heads[if heads.len() == 1 { 0 } else { j }];
        let (o, s) = head.forward(b, lv, None)?;
        outputs.push(o);
        delay_scores.push(s);
    }
    Ok(PyramidOutput {
        levels,
        outputs,
        patch_scores,
        delay_scores,
    })
}
