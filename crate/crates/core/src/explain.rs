//! Per-prediction explanations from retained attention scores.
//!
//! Under identity-value variants every cell is linear in the embedded
//! input once its scores are fixed: graph layers mix nodes with α, patch
//! levels mix steps within a node with S', and the autocorrelation head
//! reads `(p + τ_q) mod L_j` with weight `S_q`. The importance of source
//! node `l` at lagged step `p + τ_q` for target `k` is `S_q · A_kl`, where
//! `A` chains the α matrices of the graph layers feeding the cell.
//! On patch levels a horizon step blends two level positions, so each
//! entry carries its tap weight as an extra factor.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{level_taps, FeatureMapGrid, ForwardOutput, XgpaModel};

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TemporalScore {
    pub delay: usize,
    pub score: f64,
    /// Level position read by this delay, `(p + τ) mod L_j`.
    pub level_step: usize,
    /// Blend weight of the level position `p` this entry reads from; 1 on
    /// level 0.
    pub tap: f64,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Importance {
    pub source_node: usize,
    pub delay: usize,
    pub level_step: usize,
    /// `S_q · A_kl`, times the tap weight on patch levels.
    pub importance: f64,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct InputCoefficient {
    pub source_node: usize,
    /// Step index inside the input window.
    pub input_step: usize,
    pub coefficient: f64,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CellExplanation {
    pub graph_layers: usize,
    pub patch_levels: usize,
    pub cam_weight: f64,
    /// Level positions blended into the explained horizon step, with weights.
    pub level_taps: Vec<(usize, f64)>,
    pub level_len: usize,
    /// Row `k` of the chained α product, as `(node, weight)`.
    pub spatial: Vec<(usize, f64)>,
    pub temporal: Vec<TemporalScore>,
    pub importances: Vec<Importance>,
    /// Coefficients of the embedded input behind this cell's output.
    pub input_coefficients: Vec<InputCoefficient>,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Explanation {
    pub target_node: usize,
    pub horizon_step: usize,
    pub cells: Vec<CellExplanation>,
    pub cam_weights: Vec<f64>,
    /// CAM weights normalized to sum to one.
    pub cam_share: Vec<f64>,
    /// `[D_in, D_in]` input-to-output gain `W_e · W_o`.
    pub gain: Vec<f64>,
    /// `Σ_c w_c · coef_c`: prediction sensitivity per input entry, before `gain`.
    pub input_sensitivity: Vec<InputCoefficient>,
    /// True when every attention path is linear given the scores.
    pub exact: bool,
}

impl Explanation {
    /// Sensitivity to `(node, step)`, zero when absent.
    pub fn sensitivity(&self, node: usize, step: usize) -> f64 {
        self.input_sensitivity
            .iter()
            .find(|c| c.source_node == node && c.input_step == step)
            .map_or(0.0, |c| c.coefficient)
    }
}

/// Dense chained product `α_i ⋯ α_1`, identity for `i = 0`.
fn chained_alpha(grid: &FeatureMapGrid, i: usize, n: usize) -> Vec<f64> {
    let mut a = vec![0.0; n * n];
    for t in 0..n {
        a[t * n + t] = 1.0;
    }
    for layer in &grid.spatial[..i] {
        let mut next = vec![0.0; n * n];
        for r in 0..n {
            for (m, w) in layer.row(r) {
                for col in 0..n {
                    next[r * n + col] += w * a[m * n + col];
                }
            }
        }
        a = next;
    }
    a
}

/// Coefficients over input steps of node `k`'s level-`j` position `pos`.
fn expand_to_input(grid: &FeatureMapGrid, i: usize, j: usize, k: usize, pos: usize) -> BTreeMap<usize, f64> {
    let mut cur = BTreeMap::new();
    cur.insert(pos, 1.0);
    for level in (1..=j).rev() {
        let ps = &grid.patch[i][level - 1];
        let mut next = BTreeMap::new();
        for (&p, &w) in &cur {
            for m in 0..ps.ps {
                *next.entry(ps.source_step(p, m)).or_insert(0.0) += w * ps.score(k, p, m);
            }
        }
        cur = next;
    }
    cur
}

impl XgpaModel {
    /// Explanation from a forward output; fails if scores were not retained.
    pub fn explain(&self, out: &ForwardOutput, node: usize, step: usize) -> Result<Explanation> {
        let grid = out.grid.as_ref().ok_or_else(|| {
            Error::Contract("explanation needs a forward pass run with score retention".into())
        })?;
        self.extract_explanation(grid, node, step)
    }

    pub fn extract_explanation(&self, grid: &FeatureMapGrid, node: usize, step: usize) -> Result<Explanation> {
        let n = grid.nodes;
        if node >= n {
            return Err(Error::Index(format!("target node {node} >= {n}")));
        }
        if step >= grid.horizon {
            return Err(Error::Index(format!(
                "horizon step {step} >= {}",
                grid.horizon
            )));
        }
        if grid.cam_weights.len() != grid.cells() {
            return Err(Error::Contract("grid has no retained CAM weights".into()));
        }
        let total_w: f64 = grid.cam_weights.iter().sum();
        let mut cells = Vec::with_capacity(grid.cells());
        let mut sensitivity: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for i in 0..=grid.m_gc {
            let a = chained_alpha(grid, i, n);
            let row: Vec<(usize, f64)> = (0..n)
                .map(|l| (l, a[node * n + l]))
                .filter(|&(_, w)| w != 0.0)
                .collect();
            for j in 0..=grid.m_p {
                let ci = grid.cell_index(i, j);
                let ds = &grid.delays[ci];
                let lj = grid.level_lens[j];
                let (lo, hi, w) = level_taps(grid.horizon, grid.ratios[j], lj);
                let taps: Vec<(usize, f64)> = if grid.ratios[j] == 1 {
                    vec![(lo[step], 1.0)]
                } else {
                    [(lo[step], 1.0 - w[step]), (hi[step], w[step])]
                        .into_iter()
                        .filter(|t| t.1 != 0.0)
                        .collect()
                };
                let temporal: Vec<TemporalScore> = taps
                    .iter()
                    .flat_map(|&(pos, tap)| {
                        ds.delays.iter().zip(&ds.scores).map(move |(&tau, &s)| TemporalScore {
                            delay: tau,
                            score: s,
                            level_step: (pos + tau) % lj,
                            tap,
                        })
                    })
                    .collect();
                let mut importances = Vec::with_capacity(temporal.len() * row.len());
                let mut per_step: BTreeMap<usize, f64> = BTreeMap::new();
                for t in &temporal {
                    for &(l, w) in &row {
                        importances.push(Importance {
                            source_node: l,
                            delay: t.delay,
                            level_step: t.level_step,
                            importance: t.tap * t.score * w,
                        });
                    }
                    for (raw, c) in expand_to_input(grid, i, j, node, t.level_step) {
                        *per_step.entry(raw).or_insert(0.0) += t.tap * t.score * c;
                    }
                }
                let mut coefs = Vec::new();
                for &(l, w) in &row {
                    for (&raw, &c) in &per_step {
                        let v = w * c;
                        coefs.push(InputCoefficient {
                            source_node: l,
                            input_step: raw,
                            coefficient: v,
                        });
                        *sensitivity.entry((l, raw)).or_insert(0.0) += grid.cam_weights[ci] * v;
                    }
                }
                cells.push(CellExplanation {
                    graph_layers: i,
                    patch_levels: j,
                    cam_weight: grid.cam_weights[ci],
                    level_taps: taps,
                    level_len: lj,
                    spatial: row.clone(),
                    temporal,
                    importances,
                    input_coefficients: coefs,
                });
            }
        }
        Ok(Explanation {
            target_node: node,
            horizon_step: step,
            cells,
            cam_weights: grid.cam_weights.clone(),
            cam_share: grid.cam_weights.iter().map(|w| w / total_w).collect(),
            gain: self.gain(),
            input_sensitivity: sensitivity
                .into_iter()
                .map(|((l, t), c)| InputCoefficient {
                    source_node: l,
                    input_step: t,
                    coefficient: c,
                })
                .collect(),
            exact: self.config.variant.identity_value(),
        })
    }
}
