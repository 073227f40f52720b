//! The feature-map grid model.
//!
//! Cell `(i, j)` reads the embedded input after `i` graph layers and `j`
//! patch levels, runs its own autocorrelation head, and is aligned to the
//! forecast horizon. Cells are fused with positive weights `exp(F(χ'))` and
//! mapped back to the input width by a linear head.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::TrafficGraph;
use crate::nn::{Activation, AttentionVariant, Linear};
use crate::params::{Binder, ParamStore};
use crate::spatial::{GraphAttentionLayer, SpatialScores};
use crate::tape::Var;
use crate::temporal::{AutocorrAttentionLayer, DelayScores, PatchAttentionLayer, PatchScores};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct XgpaConfig {
    /// Number of graph attention layers `M_gc`.
    pub m_gc: usize,
    /// Patch size of each patch level; `M_p` is its length.
    pub patch_sizes: Vec<usize>,
    /// Delays kept by every autocorrelation head.
    pub k: usize,
    pub d_in: usize,
    pub d_hidden: usize,
    /// Input steps `L`.
    pub input_len: usize,
    /// Forecast steps `Q`.
    pub horizon: usize,
    pub variant: AttentionVariant,
    /// σ used inside attention scores.
    pub score_activation: Activation,
    pub seed: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for XgpaConfig {
    fn default() -> Self {
        XgpaConfig {
            m_gc: 1,
            patch_sizes: vec![4, 4],
            k: 3,
            d_in: 1,
            d_hidden: 8,
            input_len: 336,
            horizon: 24,
            variant: AttentionVariant::IdentityValue,
            score_activation: Activation::Tanh,
            seed: 0,
            learning_rate: 1e-3,
            batch_size: 8,
        }
    }
}

impl XgpaConfig {
    pub fn m_p(&self) -> usize {
        self.patch_sizes.len()
    }

    pub fn cells(&self) -> usize {
        (self.m_gc + 1) * (self.m_p() + 1)
    }

    pub fn cell_index(&self, i: usize, j: usize) -> usize {
        i * (self.m_p() + 1) + j
    }

    /// Sequence length at each level; level 0 is `L`.
    pub fn level_lens(&self) -> Vec<usize> {
        let mut out = vec![self.input_len];
        for &ps in &self.patch_sizes {
            let last = *out.last().expect("level");
            out.push(last.div_ceil(ps.max(1)));
        }
        out
    }

    /// Raw steps per position at each level.
    pub fn ratios(&self) -> Vec<usize> {
        let mut out = vec![1];
        for &ps in &self.patch_sizes {
            out.push(out.last().expect("ratio") * ps);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::Config(m));
        if self.input_len < 2 {
            return bad(format!("input_len must be >= 2, got {}", self.input_len));
        }
        if self.horizon < 1 {
            return bad("horizon must be >= 1".into());
        }
        if self.d_in == 0 || self.d_hidden == 0 {
            return bad("feature widths must be positive".into());
        }
        if self.k == 0 {
            return bad("k must be >= 1".into());
        }
        if let Some(&ps) = self.patch_sizes.iter().find(|&&p| p < 2) {
            return bad(format!("patch sizes must be >= 2, got {ps}"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning_rate {} is invalid", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        for (j, (&len, &r)) in self.level_lens().iter().zip(&self.ratios()).enumerate() {
            if len < 2 || self.k > len - 1 {
                return bad(format!(
                    "level {j} has length {len}; k = {} needs k <= L_j - 1",
                    self.k
                ));
            }
            if self.horizon.div_ceil(r) > len {
                return bad(format!(
                    "level {j} (length {len}) cannot cover horizon {}",
                    self.horizon
                ));
            }
        }
        Ok(())
    }
}

/// Retained scores of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMapGrid {
    pub nodes: usize,
    pub m_gc: usize,
    pub m_p: usize,
    pub level_lens: Vec<usize>,
    pub ratios: Vec<usize>,
    pub horizon: usize,
    /// α of each graph layer, in application order.
    pub spatial: Vec<SpatialScores>,
    /// `patch[i][j]`: scores of patch level `j + 1` applied on graph output `i`.
    pub patch: Vec<Vec<PatchScores>>,
    /// Delay scores per cell, row-major over `(i, j)`.
    pub delays: Vec<DelayScores>,
    pub cam_logits: Vec<f64>,
    pub cam_weights: Vec<f64>,
}

impl FeatureMapGrid {
    pub fn cell_index(&self, i: usize, j: usize) -> usize {
        i * (self.m_p + 1) + j
    }

    pub fn cells(&self) -> usize {
        (self.m_gc + 1) * (self.m_p + 1)
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[N, Q, D_in]` in normalized units.
    pub prediction: Tensor,
    pub cam_weights: Vec<f64>,
    /// Present when the forward pass retained its scores.
    pub grid: Option<FeatureMapGrid>,
}

/// Handles into one recorded forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    pub embedded: Var,
    /// Aligned cell outputs `χ'`, each `[N, Q, D_hidden]`, row-major over `(i, j)`.
    pub cells: Vec<Var>,
    pub fused: Var,
    pub prediction: Var,
    pub grid: FeatureMapGrid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct XgpaModel {
    pub config: XgpaConfig,
    pub store: ParamStore,
    pub embed: Linear,
    pub graph_layers: Vec<GraphAttentionLayer>,
    pub patch_layers: Vec<PatchAttentionLayer>,
    pub heads: Vec<AutocorrAttentionLayer>,
    pub cam_hidden: Linear,
    pub cam_out: Linear,
    pub head: Linear,
}

impl XgpaModel {
    pub fn new(config: XgpaConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let (d_in, h) = (config.d_in, config.d_hidden);
        let act = config.score_activation;
        let embed = Linear::new(&mut store, &mut rng, "embed", d_in, h, true)?;
        let graph_layers = (0..config.m_gc)
            .map(|i| {
                GraphAttentionLayer::new(&mut store, &mut rng, &format!("gc{i}"), h, config.variant, act)
            })
            .collect::<Result<Vec<_>>>()?;
        let patch_layers = config
            .patch_sizes
            .iter()
            .enumerate()
            .map(|(j, &ps)| {
                PatchAttentionLayer::new(
                    &mut store,
                    &mut rng,
                    &format!("patch{j}"),
                    h,
                    ps,
                    config.variant,
                    act,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let mut heads = Vec::with_capacity(config.cells());
        for i in 0..=config.m_gc {
            for j in 0..=config.m_p() {
                heads.push(AutocorrAttentionLayer::new(
                    &mut store,
                    &mut rng,
                    &format!("ac{i}_{j}"),
                    h,
                    config.k,
                    config.variant,
                )?);
            }
        }
        let cam_hidden = Linear::new(&mut store, &mut rng, "cam.hidden", h, h, true)?;
        let cam_out = Linear::new(&mut store, &mut rng, "cam.out", h, 1, true)?;
        let head = Linear::zeros(&mut store, "out", h, d_in)?;
        Ok(XgpaModel {
            config,
            store,
            embed,
            graph_layers,
            patch_layers,
            heads,
            cam_hidden,
            cam_out,
            head,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.num_scalars()
    }

    fn check_input(&self, shape: &[usize], graph: &TrafficGraph) -> Result<()> {
        let c = &self.config;
        let want = [graph.n(), c.input_len, c.d_in];
        if shape != want {
            return Err(Error::Contract(format!(
                "input window {shape:?} does not match [N, L, D_in] = {want:?}"
            )));
        }
        Ok(())
    }

    /// Records the whole model on `b`. With `replay`, every attention score
    /// (α, patch S', delays and S, CAM weights) is taken from the given grid
    /// as a constant, which makes the output linear in the input under
    /// identity-value variants.
    pub fn build(
        &self,
        b: &mut Binder<'_>,
        x: Var,
        graph: &TrafficGraph,
        replay: Option<&FeatureMapGrid>,
    ) -> Result<Trace> {
        self.check_input(b.tape.shape(x), graph)?;
        let e = self.embed.forward(b, x)?;
        let (cells, grid_partial) = self.build_cells(b, e, graph, replay)?;
        let c = &self.config;

        let (w, cam_logits) = match replay {
            Some(r) => {
                if r.cam_weights.len() != cells.len() {
                    return Err(Error::Contract("replay grid has wrong cell count".into()));
                }
                let w = b.tape.constant(Tensor::from_vec(r.cam_weights.clone()));
                (w, r.cam_logits.clone())
            }
            None => {
                let mut logits = Vec::with_capacity(cells.len());
                for &cell in &cells {
                    let pooled = b.tape.mean_axis(cell, 0)?;
                    let pooled = b.tape.mean_axis(pooled, 0)?;
                    let hid = self.cam_hidden.forward(b, pooled)?;
                    let hid = b.tape.tanh(hid);
                    logits.push(self.cam_out.forward(b, hid)?);
                }
                let logits = b.tape.concat(&logits, 0)?;
                let vals = b.tape.value(logits).data().to_vec();
                (b.tape.exp(logits), vals)
            }
        };
        let cam_weights = b.tape.value(w).data().to_vec();

        let mut fused = None;
        for (ci, &cell) in cells.iter().enumerate() {
            let wc = b.tape.slice(w, 0, ci, 1)?;
            let term = b.tape.mul(cell, wc)?;
            fused = Some(match fused {
                None => term,
                Some(acc) => b.tape.add(acc, term)?,
            });
        }
        let fused = fused.expect("at least one cell");
        let prediction = self.head.forward(b, fused)?;
        debug_assert_eq!(b.tape.shape(prediction), &[graph.n(), c.horizon, c.d_in]);

        let (spatial, patch, delays) = grid_partial;
        Ok(Trace {
            embedded: e,
            cells,
            fused,
            prediction,
            grid: FeatureMapGrid {
                nodes: graph.n(),
                m_gc: c.m_gc,
                m_p: c.m_p(),
                level_lens: c.level_lens(),
                ratios: c.ratios(),
                horizon: c.horizon,
                spatial,
                patch,
                delays,
                cam_logits,
                cam_weights,
            },
        })
    }

    /// Aligned cell outputs from an embedded input `e: [N, L, D_hidden]`.
    #[allow(clippy::type_complexity)]
    pub fn build_cells(
        &self,
        b: &mut Binder<'_>,
        e: Var,
        graph: &TrafficGraph,
        replay: Option<&FeatureMapGrid>,
    ) -> Result<(Vec<Var>, (Vec<SpatialScores>, Vec<Vec<PatchScores>>, Vec<DelayScores>))> {
        let c = &self.config;
        let m_p = c.m_p();
        if let Some(r) = replay {
            if r.m_gc != c.m_gc || r.m_p != m_p || r.delays.len() != c.cells() {
                return Err(Error::Contract("replay grid shape differs from model".into()));
            }
        }
        let mut g = vec![e];
        let mut spatial = Vec::with_capacity(c.m_gc);
        for (i, layer) in self.graph_layers.iter().enumerate() {
            let frozen = replay.map(|r| &r.spatial[i]);
            let (y, s) = layer.forward(b, g[i], graph, frozen)?;
            g.push(y);
            spatial.push(s);
        }
        let ratios = c.ratios();
        let lens = c.level_lens();
        let mut cells = Vec::with_capacity(c.cells());
        let mut patch = Vec::with_capacity(c.m_gc + 1);
        let mut delays = Vec::with_capacity(c.cells());
        for (i, &gi) in g.iter().enumerate() {
            let mut level = gi;
            let mut scores_i = Vec::with_capacity(m_p);
            for j in 0..=m_p {
                if j > 0 {
                    let frozen = replay.map(|r| &r.patch[i][j - 1]);
                    let (y, s) = self.patch_layers[j - 1].forward(b, level, frozen)?;
                    level = y;
                    scores_i.push(s);
                }
                let ci = c.cell_index(i, j);
                let frozen = replay.map(|r| &r.delays[ci]);
                let (out, ds) = self.heads[ci].forward(b, level, frozen)?;
                delays.push(ds);
                let (lo, hi, w) = level_taps(c.horizon, ratios[j], lens[j]);
                let a = b.tape.gather(out, 1, &lo)?;
                if ratios[j] == 1 {
                    cells.push(a);
                } else {
                    let next = b.tape.gather(out, 1, &hi)?;
                    let d = b.tape.sub(next, a)?;
                    let wv = b.tape.constant(Tensor::new([1, c.horizon, 1], w)?);
                    let d = b.tape.mul(d, wv)?;
                    cells.push(b.tape.add(a, d)?);
                }
            }
            patch.push(scores_i);
        }
        Ok((cells, (spatial, patch, delays)))
    }

    /// Inference forward pass on a normalized window `x: [N, L, D_in]`.
    pub fn forward(&self, x: &Tensor, graph: &TrafficGraph, retain: bool) -> Result<ForwardOutput> {
        let mut b = Binder::new(&self.store, false);
        let xv = b.tape.constant(x.clone());
        let tr = self.build(&mut b, xv, graph, None)?;
        Ok(ForwardOutput {
            prediction: b.tape.value(tr.prediction).clone(),
            cam_weights: tr.grid.cam_weights.clone(),
            grid: retain.then_some(tr.grid),
        })
    }

    /// Forward pass with every attention score held at the values in `grid`.
    pub fn forward_replay(&self, x: &Tensor, graph: &TrafficGraph, grid: &FeatureMapGrid) -> Result<Tensor> {
        let mut b = Binder::new(&self.store, false);
        let xv = b.tape.constant(x.clone());
        let tr = self.build(&mut b, xv, graph, Some(grid))?;
        Ok(b.tape.value(tr.prediction).clone())
    }

    /// Aligned cell outputs for an embedded input with all scores frozen to
    /// `grid`. Each returned tensor is `[N, Q, D_hidden]`.
    pub fn cell_forward(
        &self,
        embedded: &Tensor,
        graph: &TrafficGraph,
        grid: &FeatureMapGrid,
    ) -> Result<Vec<Tensor>> {
        let mut b = Binder::new(&self.store, false);
        let e = b.tape.constant(embedded.clone());
        let (cells, _) = self.build_cells(&mut b, e, graph, Some(grid))?;
        Ok(cells.iter().map(|&v| b.tape.value(v).clone()).collect())
    }

    /// Embedded input `x · W_e + b_e`.
    pub fn embed_input(&self, x: &Tensor) -> Result<Tensor> {
        let mut b = Binder::new(&self.store, false);
        let xv = b.tape.constant(x.clone());
        let e = self.embed.forward(&mut b, xv)?;
        Ok(b.tape.value(e).clone())
    }

    /// `W_e · W_o`: the `[D_in, D_in]` map from an input perturbation to the
    /// prediction along any linear path through the hidden width.
    pub fn gain(&self) -> Vec<f64> {
        let (d, h) = (self.config.d_in, self.config.d_hidden);
        let we = self.store.get(self.embed.weight).data();
        let wo = self.store.get(self.head.weight).data();
        let mut g = vec![0.0; d * d];
        for i in 0..d {
            for o in 0..d {
                g[i * d + o] = (0..h).map(|t| we[i * h + t] * wo[t * d + o]).sum();
            }
        }
        g
    }
}

/// Linear taps from level positions to future steps. Pseudo step `m` of a
/// level with ratio `r` covers steps `m·r .. (m+1)·r`, centred at
/// `m·r + (r-1)/2`; step `h` blends the two nearest centres, wrapping around
/// the circular window. Returns `(lo, hi, weight of hi)`.
pub fn level_taps(horizon: usize, r: usize, len: usize) -> (Vec<usize>, Vec<usize>, Vec<f64>) {
    let mut lo = Vec::with_capacity(horizon);
    let mut hi = Vec::with_capacity(horizon);
    let mut w = Vec::with_capacity(horizon);
    for h in 0..horizon {
        let u = (h as f64 - (r as f64 - 1.0) / 2.0) / r as f64;
        let f = libm::floor(u);
        let m = (f as i64).rem_euclid(len as i64) as usize;
        lo.push(m);
        hi.push((m + 1) % len);
        w.push(u - f);
    }
    (lo, hi, w)
}
