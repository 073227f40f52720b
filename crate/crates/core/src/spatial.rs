//! Distance-aware masked graph attention.
//!
//! Importance `I_ij = σ(W_sp · [F_Q(h_i) | F_K(h_j) | d_ij])` is scored only
//! for graph neighbors (self included) and normalized per row, so the
//! coefficient matrix α is sparse by construction.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::TrafficGraph;
use crate::nn::{Activation, AttentionVariant, Linear, QkvMaps};
use crate::params::{xavier_uniform, Binder, ParamId, ParamStore};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Row-normalized attention coefficients over the graph's neighbor lists.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialScores {
    pub offsets: Vec<usize>,
    pub cols: Vec<usize>,
    pub alpha: Vec<f64>,
}

impl SpatialScores {
    pub fn n(&self) -> usize {
        self.offsets.len() - 1
    }

    /// `α_ij`, exactly 0 for non-neighbors.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (s, e) = (self.offsets[i], self.offsets[i + 1]);
        match self.cols[s..e].binary_search(&j) {
            Ok(p) => self.alpha[s + p],
            Err(_) => 0.0,
        }
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (s, e) = (self.offsets[i], self.offsets[i + 1]);
        self.cols[s..e].iter().copied().zip(self.alpha[s..e].iter().copied())
    }

    /// Dense row-major `[N, N]` copy.
    pub fn dense(&self) -> Vec<f64> {
        let n = self.n();
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            for (j, a) in self.row(i) {
                m[i * n + j] = a;
            }
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphAttentionLayer {
    pub maps: QkvMaps,
    /// `[2D + 1]`: query block, key block, distance weight.
    pub w_sp: ParamId,
    /// Output projection; absent (identity) under identity-value variants.
    pub w2: Option<Linear>,
    pub activation: Activation,
}

impl GraphAttentionLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d: usize,
        variant: AttentionVariant,
        activation: Activation,
    ) -> Result<Self> {
        let maps = QkvMaps::new(store, rng, name, d, variant)?;
        let w = xavier_uniform(rng, &[2 * d + 1], 2 * d + 1, 1);
        let w_sp = store.add(format!("{name}.w_sp"), w)?;
        let w2 = if variant.identity_value() {
            None
        } else {
            Some(Linear::new(store, rng, &format!("{name}.w_2"), d, d, false)?)
        };
        Ok(GraphAttentionLayer {
            maps,
            w_sp,
            w2,
            activation,
        })
    }

    pub fn width(&self) -> usize {
        self.maps.width()
    }

    /// Pre-normalization importances for every stored edge of `graph`, from
    /// node features `h: [N, D]`.
    fn importances(&self, b: &mut Binder<'_>, h: Var, graph: &TrafficGraph) -> Result<Var> {
        let d = self.width();
        let shape = b.tape.shape(h).to_vec();
        if shape != [graph.n(), d] {
            return Err(Error::shape("graph attention", &shape, &[graph.n(), d]));
        }
        let qh = self.maps.query(b, h)?;
        let kh = self.maps.key(b, h)?;
        let w = b.param(self.w_sp);
        let wq = b.tape.slice(w, 0, 0, d)?;
        let wq = b.tape.reshape(wq, &[d, 1])?;
        let wk = b.tape.slice(w, 0, d, d)?;
        let wk = b.tape.reshape(wk, &[d, 1])?;
        let wd = b.tape.slice(w, 0, 2 * d, 1)?;
        let a = b.tape.matmul(qh, wq)?;
        let a = b.tape.reshape(a, &[graph.n()])?;
        let c = b.tape.matmul(kh, wk)?;
        let c = b.tape.reshape(c, &[graph.n()])?;
        let rows: Vec<usize> = (0..graph.n())
            .flat_map(|i| core::iter::repeat_n(i, graph.neighbors(i).len()))
            .collect();
        let ae = b.tape.gather(a, 0, &rows)?;
        let ce = b.tape.gather(c, 0, graph.cols())?;
        let dn = b.tape.constant(Tensor::from_vec(graph.normalized_distances()));
        let de = b.tape.mul(dn, wd)?;
        let pre = b.tape.add(ae, ce)?;
        let pre = b.tape.add(pre, de)?;
        Ok(self.activation.apply(&mut b.tape, pre))
    }

    /// `I_ij` for one pair of feature vectors and a normalized distance.
    pub fn node_importance(
        &self,
        store: &ParamStore,
        h_i: &[f64],
        h_j: &[f64],
        d_norm: f64,
    ) -> Result<f64> {
        let d = self.width();
        if h_i.len() != d || h_j.len() != d {
            return Err(Error::shape("node importance", &[h_i.len(), h_j.len()], &[d, d]));
        }
        let mut b = Binder::new(store, false);
        let hi = b.tape.constant(Tensor::new([1, d], h_i.to_vec())?);
        let hj = b.tape.constant(Tensor::new([1, d], h_j.to_vec())?);
        let q = self.maps.query(&mut b, hi)?;
        let k = self.maps.key(&mut b, hj)?;
        let w = store.get(self.w_sp).data();
        let qv = b.tape.value(q).data();
        let kv = b.tape.value(k).data();
        let pre: f64 = (0..d).map(|t| w[t] * qv[t] + w[d + t] * kv[t]).sum::<f64>() + w[2 * d] * d_norm;
        Ok(self.activation.eval(pre))
    }

    /// Masked softmax of importances over each node's neighbors. Returns the
    /// edge-aligned α (rank 1, length `graph.nnz()`).
    pub fn masked_attention(
        &self,
        b: &mut Binder<'_>,
        h: Var,
        graph: &TrafficGraph,
    ) -> Result<(Var, SpatialScores)> {
        let imp = self.importances(b, h, graph)?;
        let alpha = b.tape.segment_softmax(imp, graph.offsets())?;
        let scores = SpatialScores {
            offsets: graph.offsets().to_vec(),
            cols: graph.cols().to_vec(),
            alpha: b.tape.value(alpha).data().to_vec(),
        };
        Ok((alpha, scores))
    }

    /// `h'_i = W_2 σ(Σ_j α_ij F_V(x_j))` applied over every leading-axis node
    /// slice of `x: [N, ..., D]`.
    pub fn aggregate(
        &self,
        b: &mut Binder<'_>,
        x: Var,
        alpha: Var,
        graph: &TrafficGraph,
    ) -> Result<Var> {
        let shape = b.tape.shape(x).to_vec();
        if shape[0] != graph.n() || *shape.last().unwrap_or(&0) != self.width() {
            return Err(Error::shape("graph aggregate", &shape, &[graph.n(), self.width()]));
        }
        let v = self.maps.value(b, x)?;
        let y = b.tape.spmm(alpha, v, graph.offsets(), graph.cols())?;
        match &self.w2 {
            Some(w2) => {
                let y = self.activation.apply(&mut b.tape, y);
                w2.forward(b, y)
            }
            None => Ok(y),
        }
    }

    /// One layer over a sequence `x: [N, L, D]`. α is scored once per window
    /// from the time-averaged node features and shared across steps.
    /// With `frozen`, the given α is used as a constant instead.
    pub fn forward(
        &self,
        b: &mut Binder<'_>,
        x: Var,
        graph: &TrafficGraph,
        frozen: Option<&SpatialScores>,
    ) -> Result<(Var, SpatialScores)> {
        let (alpha, scores) = match frozen {
            Some(f) => {
                if f.offsets != graph.offsets() || f.cols != graph.cols() {
                    return Err(Error::Contract(
                        "frozen spatial scores belong to a different graph".into(),
                    ));
                }
                (b.tape.constant(Tensor::from_vec(f.alpha.clone())), f.clone())
            }
            None => {
                let h = b.tape.mean_axis(x, 1)?;
                self.masked_attention(b, h, graph)?
            }
        };
        Ok((self.aggregate(b, x, alpha, graph)?, scores))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_projection_gives_sigma_zero() {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layer = GraphAttentionLayer::new(
            &mut s,
            &mut rng,
            "g",
            2,
            AttentionVariant::Full,
            Activation::Sigmoid,
        )
        .unwrap();
        s.set(layer.w_sp, Tensor::zeros([5])).unwrap();
        let v = layer.node_importance(&s, &[1.0, 2.0], &[-3.0, 0.5], 0.7).unwrap();
        assert_eq!(v, 0.5);
    }

    #[test]
    fn self_only_node_gets_full_weight() {
        let g = TrafficGraph::new(alloc::vec!["a".into(), "b".into()], &[]).unwrap();
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layer = GraphAttentionLayer::new(
            &mut s,
            &mut rng,
            "g",
            3,
            AttentionVariant::IdentityValue,
            Activation::Tanh,
        )
        .unwrap();
        let mut b = Binder::new(&s, false);
        let h = b.tape.constant(Tensor::full([2, 3], 0.3));
        let (_, sc) = layer.masked_attention(&mut b, h, &g).unwrap();
        assert_eq!(sc.alpha, alloc::vec![1.0, 1.0]);
        assert_eq!(sc.get(0, 1), 0.0);
    }
}
