//! Parameterized layers shared by the model blocks.

use evmf_tensor::{Graph, Init, ParamId, ParamStore, SeedRng, Tensor, Var};

use crate::error::Result;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut SeedRng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let init = Init::UniformFanIn { fan_in: in_dim };
        let w = store.register(format!("{name}.w"), &[in_dim, out_dim], init, rng)?;
        let b = if bias {
            Some(store.register(format!("{name}.b"), &[out_dim], init, rng)?)
        } else {
            None
        };
        Ok(Self {
            w,
            b,
            in_dim,
            out_dim,
        })
    }

    /// `x[N, in] → [N, out]`
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        Ok(g.linear(x, w, b)?)
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub k: ParamId,
    pub b: ParamId,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut SeedRng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let init = Init::UniformFanIn {
            fan_in: in_ch * kernel * kernel,
        };
        let k = store.register(format!("{name}.k"), &[out_ch, in_ch, kernel, kernel], init, rng)?;
        let b = store.register(format!("{name}.b"), &[out_ch], init, rng)?;
        Ok(Self {
            k,
            b,
            out_ch,
            kernel,
            stride,
            pad,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let k = g.param(store, self.k);
        let b = g.param(store, self.b);
        let y = g.conv2d(x, k, self.stride, self.pad)?;
        Ok(g.add_channel_bias(y, b)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, rng: &mut SeedRng, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.register(format!("{name}.gamma"), &[dim], Init::Ones, rng)?;
        let beta = store.register(format!("{name}.beta"), &[dim], Init::Zeros, rng)?;
        Ok(Self {
            gamma,
            beta,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        Ok(g.layer_norm(x, gamma, beta, self.eps)?)
    }
}

/// GRU cell over row vectors `x[1, d_in]`, `h[1, d_h]`. Gate weights act on
/// the concatenation `[x; h]` (or `[x; r⊙h]` for the candidate).
#[derive(Clone, Debug)]
pub struct GruCell {
    pub z: Linear,
    pub r: Linear,
    pub h: Linear,
    pub d_in: usize,
    pub d_h: usize,
}

impl GruCell {
    pub fn new(store: &mut ParamStore, rng: &mut SeedRng, name: &str, d_in: usize, d_h: usize) -> Result<Self> {
        Ok(Self {
            z: Linear::new(store, rng, &format!("{name}.z"), d_in + d_h, d_h, true)?,
            r: Linear::new(store, rng, &format!("{name}.r"), d_in + d_h, d_h, true)?,
            h: Linear::new(store, rng, &format!("{name}.h"), d_in + d_h, d_h, true)?,
            d_in,
            d_h,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, h: Var) -> Result<Var> {
        let xh = g.concat(&[x, h], 1)?;
        let z = self.z.forward(g, store, xh)?;
        let z = g.sigmoid(z)?;
        let r = self.r.forward(g, store, xh)?;
        let r = g.sigmoid(r)?;
        let rh = g.mul(r, h)?;
        let xrh = g.concat(&[x, rh], 1)?;
        let cand = self.h.forward(g, store, xrh)?;
        let cand = g.tanh(cand)?;
        // h' = h + z ⊙ (h̃ − h)
        let diff = g.sub(cand, h)?;
        let upd = g.mul(z, diff)?;
        Ok(g.add(h, upd)?)
    }
}

/// Overwrites a parameter with explicit values; used by tests and oracles.
pub fn set_param(store: &mut ParamStore, id: ParamId, data: Vec<f64>) -> Result<()> {
    let shape = store.get(id).value.shape().to_vec();
    store.get_mut(id).value = Tensor::new(shape, data)?;
    Ok(())
}

pub fn zero_all(store: &mut ParamStore) {
    for p in store.iter_mut() {
        p.value.scale_assign(0.0);
    }
}
