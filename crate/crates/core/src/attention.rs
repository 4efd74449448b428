//! Spatial attention, multi-head attention, and squeeze-and-excitation.

use evmf_tensor::{Graph, Init, ParamId, ParamStore, SeedRng, Var};

use crate::error::{CoreError, Result};
use crate::nn::{Conv2d, Linear};

#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub conv: Conv2d,
}

pub struct SpatialOut {
    /// `B×1×H×W`, values in (0, 1).
    pub mask: Var,
    pub attended: Var,
    /// `B×C` global average of the attended map.
    pub pooled: Var,
}

impl SpatialAttention {
    pub fn new(store: &mut ParamStore, rng: &mut SeedRng, name: &str, kernel: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(CoreError::Config(format!("spatial attention kernel {kernel} must be odd")));
        }
        let conv = Conv2d::new(store, rng, &format!("{name}.conv"), 2, 1, kernel, 1, (kernel - 1) / 2)?;
        Ok(Self { conv })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, f: Var) -> Result<SpatialOut> {
        let s = g.shape(f).to_vec();
        if s.len() != 4 {
            return Err(CoreError::Config(format!("spatial attention expects B×C×H×W, got {s:?}")));
        }
        let avg = g.mean_axis(f, 1)?;
        let max = g.max_axis(f, 1)?;
        let stacked = g.concat(&[avg, max], 1)?;
        let logits = self.conv.forward(g, store, stacked)?;
        let mask = g.sigmoid(logits)?;
        let attended = g.mul_channel_broadcast(f, mask)?;
        let flat = g.reshape(attended, vec![s[0], s[1], s[2] * s[3]])?;
        let pooled = g.mean_axis(flat, 2)?;
        let pooled = g.reshape(pooled, vec![s[0], s[1]])?;
        Ok(SpatialOut {
            mask,
            attended,
            pooled,
        })
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub d_model: usize,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, rng: &mut SeedRng, name: &str, d_model: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(CoreError::Config(format!("{heads} heads do not divide width {d_model}")));
        }
        let lin = |store: &mut ParamStore, rng: &mut SeedRng, tag: &str| {
            Linear::new(store, rng, &format!("{name}.{tag}"), d_model, d_model, true)
        };
        Ok(Self {
            heads,
            d_model,
            wq: lin(store, rng, "q")?,
            wk: lin(store, rng, "k")?,
            wv: lin(store, rng, "v")?,
            wo: lin(store, rng, "o")?,
        })
    }

    /// Returns the projected output `Nq×d` and the head-averaged weights `Nq×Nk`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
        for x in [q, k, v] {
            let s = g.shape(x);
            if s.len() != 2 || s[1] != self.d_model {
                return Err(CoreError::Config(format!("attention input {s:?}, width {}", self.d_model)));
            }
        }
        if g.shape(k)[0] != g.shape(v)[0] {
            return Err(CoreError::Config("keys and values differ in length".into()));
        }
        let dh = self.d_model / self.heads;
        let qp = self.wq.forward(g, store, q)?;
        let kp = self.wk.forward(g, store, k)?;
        let vp = self.wv.forward(g, store, v)?;
        let mut outs = Vec::with_capacity(self.heads);
        let mut weight_sum: Option<Var> = None;
        for h in 0..self.heads {
            let qh = g.slice(qp, 1, h * dh, dh)?;
            let kh = g.slice(kp, 1, h * dh, dh)?;
            let vh = g.slice(vp, 1, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
            let a = g.softmax(scores, 1)?;
            outs.push(g.matmul(a, vh)?);
            weight_sum = Some(match weight_sum {
                None => a,
                Some(s) => g.add(s, a)?,
            });
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
        let out = self.wo.forward(g, store, cat)?;
        let weights = weight_sum.expect("at least one head");
        let weights = if self.heads == 1 {
            weights
        } else {
            g.scale(weights, 1.0 / self.heads as f64)?
        };
        Ok((out, weights))
    }
}

#[derive(Clone, Debug)]
pub struct SqueezeExcite {
    pub w1: ParamId,
    pub w2: ParamId,
    pub dim: usize,
    pub reduction: usize,
}

impl SqueezeExcite {
    pub fn new(store: &mut ParamStore, rng: &mut SeedRng, name: &str, dim: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || dim % reduction != 0 {
            return Err(CoreError::Config(format!("SE reduction {reduction} does not divide {dim}")));
        }
        let hidden = dim / reduction;
        let w1 = store.register(format!("{name}.w1"), &[dim, hidden], Init::UniformFanIn { fan_in: dim }, rng)?;
        let w2 = store.register(format!("{name}.w2"), &[hidden, dim], Init::UniformFanIn { fan_in: hidden }, rng)?;
        Ok(Self {
            w1,
            w2,
            dim,
            reduction,
        })
    }

    /// `f[1, d] → (s ⊙ f, s)`
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, f: Var) -> Result<(Var, Var)> {
        if g.shape(f) != [1, self.dim] {
            return Err(CoreError::Config(format!("SE expects 1×{}, got {:?}", self.dim, g.shape(f))));
        }
        let w1 = g.param(store, self.w1);
        let w2 = g.param(store, self.w2);
        let z = g.matmul(f, w1)?;
        let z = g.relu(z)?;
        let z = g.matmul(z, w2)?;
        let s = g.sigmoid(z)?;
        Ok((g.mul(s, f)?, s))
    }
}
