//! Small building blocks shared by the attention layers.

use alloc::format;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{xavier_uniform, Binder, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Score nonlinearity σ.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Activation {
    #[default]
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Identity => x,
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => libm::tanh(x),
            Activation::Sigmoid => 1.0 / (1.0 + libm::exp(-x)),
            Activation::Identity => x,
        }
    }
}

/// Which of the query / key / value mappings are learned.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum AttentionVariant {
    Full,
    /// F_V is the identity.
    #[default]
    IdentityValue,
    /// F_V is the identity and F_K shares F_Q.
    SharedQkIdentityValue,
}

impl AttentionVariant {
    pub fn identity_value(self) -> bool {
        !matches!(self, AttentionVariant::Full)
    }

    pub fn shared_qk(self) -> bool {
        matches!(self, AttentionVariant::SharedQkIdentityValue)
    }
}

/// Affine map `x · W + b` applied over the last axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let w = xavier_uniform(rng, &[d_in, d_out], d_in, d_out);
        let weight = store.add(format!("{name}.weight"), w)?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros([d_out]))?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    /// A linear map whose weight and bias start at zero.
    pub fn zeros(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros([d_in, d_out]))?;
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros([d_out]))?);
        Ok(Linear {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward(&self, b: &mut Binder<'_>, x: Var) -> Result<Var> {
        let last = *b.tape.shape(x).last().unwrap_or(&0);
        if last != self.d_in {
            return Err(Error::shape("linear", b.tape.shape(x), &[self.d_in, self.d_out]));
        }
        let w = b.param(self.weight);
        let y = b.tape.matmul_any(x, w)?;
        match self.bias {
            Some(bias) => {
                let bv = b.param(bias);
                b.tape.add(y, bv)
            }
            None => Ok(y),
        }
    }
}

/// The query/key/value mappings of one attention layer, honouring the
/// [`AttentionVariant`].
#[derive(Clone, Debug, PartialEq)]
pub struct QkvMaps {
    pub variant: AttentionVariant,
    pub query: Linear,
    pub key: Option<Linear>,
    pub value: Option<Linear>,
}

impl QkvMaps {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d: usize,
        variant: AttentionVariant,
    ) -> Result<Self> {
        let query = Linear::new(store, rng, &format!("{name}.f_q"), d, d, true)?;
        let key = if variant.shared_qk() {
            None
        } else {
            Some(Linear::new(store, rng, &format!("{name}.f_k"), d, d, true)?)
        };
        let value = if variant.identity_value() {
            None
        } else {
            Some(Linear::new(store, rng, &format!("{name}.f_v"), d, d, true)?)
        };
        Ok(QkvMaps {
            variant,
            query,
            key,
            value,
        })
    }

    pub fn width(&self) -> usize {
        self.query.d_in
    }

    pub fn query(&self, b: &mut Binder<'_>, x: Var) -> Result<Var> {
        self.query.forward(b, x)
    }

    pub fn key(&self, b: &mut Binder<'_>, x: Var) -> Result<Var> {
        self.key.as_ref().unwrap_or(&self.query).forward(b, x)
    }

    pub fn value(&self, b: &mut Binder<'_>, x: Var) -> Result<Var> {
        match &self.value {
            Some(v) => v.forward(b, x),
            None => Ok(x),
        }
    }
}

impl Tape {
    /// `x · w` for a rank-1 `x` as well as the batched forms of [`Tape::matmul`].
    pub fn matmul_any(&mut self, x: Var, w: Var) -> Result<Var> {
        if self.value(x).rank() == 1 {
            let n = self.value(x).len();
            let x2 = self.reshape(x, &[1, n])?;
            let y = self.matmul(x2, w)?;
            let m = self.value(y).len();
            return self.reshape(y, &[m]);
        }
        self.matmul(x, w)
    }
}
