//! Cross-modal context encoding followed by neural algorithmic fusion (NAF):
//! a GRU controller that repeatedly mixes a bank of primitive networks into a
//! fused state.

use evmf_tensor::{Graph, ParamStore, SeedRng, Var};

use crate::attention::MultiHeadAttention;
use crate::error::{CoreError, Result};
use crate::nn::{GruCell, LayerNorm, Linear};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum PathId {
    Dense,
    Unet,
    Trad,
}

impl PathId {
    pub const ALL: [PathId; 3] = [PathId::Dense, PathId::Unet, PathId::Trad];

    pub fn label(self) -> &'static str {
        match self {
            PathId::Dense => "dense",
            PathId::Unet => "unet",
            PathId::Trad => "trad",
        }
    }
}

/// Path vectors stacked row-wise in `(dense, unet, trad)` order.
#[derive(Clone, Debug)]
pub struct PathVectors {
    pub ids: Vec<PathId>,
    /// `N_paths × d`
    pub stacked: Var,
}

impl PathVectors {
    pub fn stack(g: &mut Graph, mut entries: Vec<(PathId, Var)>) -> Result<Self> {
        if entries.is_empty() || entries.len() > 3 {
            return Err(CoreError::Config(format!("{} path vectors; expected 1 to 3", entries.len())));
        }
        entries.sort_by_key(|e| e.0);
        let ids: Vec<PathId> = entries.iter().map(|e| e.0).collect();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(CoreError::Config("duplicate path vector".into()));
        }
        let vars: Vec<Var> = entries.iter().map(|e| e.1).collect();
        let stacked = if vars.len() == 1 { vars[0] } else { g.concat(&vars, 0)? };
        Ok(Self { ids, stacked })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ContextualMatrix {
    /// `N_paths × d`
    pub v: Var,
    /// `N_paths × N_paths`, row-stochastic.
    pub w_cma: Var,
}

#[derive(Clone, Debug)]
pub struct CrossModalEncoder {
    pub mha: MultiHeadAttention,
    pub norm: LayerNorm,
}

impl CrossModalEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut SeedRng, name: &str, d: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            mha: MultiHeadAttention::new(store, rng, &format!("{name}.mha"), d, heads)?,
            norm: LayerNorm::new(store, rng, &format!("{name}.norm"), d)?,
        })
    }

    pub fn encode(&self, g: &mut Graph, store: &ParamStore, v_in: Var) -> Result<ContextualMatrix> {
        let (att, w_cma) = self.mha.forward(g, store, v_in, v_in, v_in)?;
        let res = g.add(v_in, att)?;
        let v = self.norm.forward(g, store, res)?;
        Ok(ContextualMatrix { v, w_cma })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NafConfig {
    pub k: usize,
    pub n_primitives: usize,
    pub d_state: usize,
    pub d_ctrl: usize,
    pub hidden: usize,
}

impl Default for NafConfig {
    fn default() -> Self {
        Self {
            k: 4,
            n_primitives: 4,
            d_state: 64,
            d_ctrl: 32,
            hidden: 64,
        }
    }
}

impl NafConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_primitives == 0 || self.d_state == 0 || self.d_ctrl == 0 || self.hidden == 0 {
            return Err(CoreError::Config("NAF needs >= 1 primitive and positive widths".into()));
        }
        Ok(())
    }
}

/// Two-layer perceptron `v_cat → hidden → d_state` with ReLU in between.
#[derive(Clone, Debug)]
pub struct Primitive {
    pub l1: Linear,
    pub l2: Linear,
}

impl Primitive {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.l1.forward(g, store, x)?;
        let h = g.relu(h)?;
        self.l2.forward(g, store, h)
    }
}

#[derive(Clone, Debug)]
pub struct FusionState {
    /// `1 × d_state`
    pub s_fused: Var,
    /// `1 × d_ctrl`
    pub h_ctrl: Var,
    /// One `1 × N_primitives` row per executed step.
    pub alpha_trace: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct NafBlock {
    pub cfg: NafConfig,
    pub n_paths: usize,
    pub d_model: usize,
    pub linear_in: Linear,
    pub controller: GruCell,
    pub w_mix: Linear,
    pub bank: Vec<Primitive>,
    pub norm: LayerNorm,
    pub linear_out: Linear,
}

impl NafBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut SeedRng,
        name: &str,
        n_paths: usize,
        d_model: usize,
        cfg: &NafConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let d_cat = n_paths * d_model;
        let linear_in = Linear::new(store, rng, &format!("{name}.linear_in"), d_cat, cfg.d_state, true)?;
        let controller = GruCell::new(store, rng, &format!("{name}.controller"), cfg.d_state, cfg.d_ctrl)?;
        let w_mix = Linear::new(store, rng, &format!("{name}.w_mix"), cfg.d_ctrl, cfg.n_primitives, true)?;
        let bank = (0..cfg.n_primitives)
            .map(|j| {
                Ok(Primitive {
                    l1: Linear::new(store, rng, &format!("{name}.prim{j}.l1"), d_cat, cfg.hidden, true)?,
                    l2: Linear::new(store, rng, &format!("{name}.prim{j}.l2"), cfg.hidden, cfg.d_state, true)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(store, rng, &format!("{name}.norm"), cfg.d_state)?;
        let linear_out = Linear::new(store, rng, &format!("{name}.linear_out"), cfg.d_state, d_model, true)?;
        Ok(Self {
            cfg: cfg.clone(),
            n_paths,
            d_model,
            linear_in,
            controller,
            w_mix,
            bank,
            norm,
            linear_out,
        })
    }

    /// Row-major flatten of `N_paths × d` into `1 × (N_paths·d)`.
    pub fn flatten(&self, g: &mut Graph, v: Var) -> Result<Var> {
        let s = g.shape(v).to_vec();
        if s != [self.n_paths, self.d_model] {
            return Err(CoreError::Config(format!(
                "NAF expects {}×{} input, got {s:?}",
                self.n_paths, self.d_model
            )));
        }
        Ok(g.reshape(v, vec![1, self.n_paths * self.d_model])?)
    }

    pub fn init(&self, g: &mut Graph, store: &ParamStore, v: Var) -> Result<FusionState> {
        let v_cat = self.flatten(g, v)?;
        let s_fused = self.linear_in.forward(g, store, v_cat)?;
        let h_ctrl = g.constant(evmf_tensor::Tensor::zeros(vec![1, self.cfg.d_ctrl]))?;
        Ok(FusionState {
            s_fused,
            h_ctrl,
            alpha_trace: Vec::new(),
        })
    }

    /// `N_primitives × d_state`, evaluated once on the static input.
    pub fn precompute(&self, g: &mut Graph, store: &ParamStore, v: Var) -> Result<Var> {
        let v_cat = self.flatten(g, v)?;
        let outs = self
            .bank
            .iter()
            .map(|p| p.forward(g, store, v_cat))
            .collect::<Result<Vec<_>>>()?;
        Ok(if outs.len() == 1 { outs[0] } else { g.concat(&outs, 0)? })
    }

    pub fn step(&self, g: &mut Graph, store: &ParamStore, state: FusionState, prims: Var) -> Result<FusionState> {
        let h = self.controller.forward(g, store, state.s_fused, state.h_ctrl)?;
        let logits = self.w_mix.forward(g, store, h)?;
        let alpha = g.softmax(logits, 1)?;
        let s_mix = g.mix(alpha, prims)?;
        let s_mix = g.reshape(s_mix, vec![1, self.cfg.d_state])?;
        let sum = g.add(state.s_fused, s_mix)?;
        let s_fused = self.norm.forward(g, store, sum)?;
        let mut alpha_trace = state.alpha_trace;
        alpha_trace.push(alpha);
        Ok(FusionState {
            s_fused,
            h_ctrl: h,
            alpha_trace,
        })
    }

    /// Returns `v_NAF` (`1 × d_model`) and the final state.
    pub fn fuse(&self, g: &mut Graph, store: &ParamStore, v: Var) -> Result<(Var, FusionState)> {
        let mut state = self.init(g, store, v)?;
        let prims = self.precompute(g, store, v)?;
        for _ in 0..self.cfg.k {
            state = self.step(g, store, state, prims)?;
        }
        let out = self.linear_out.forward(g, store, state.s_fused)?;
        Ok((out, state))
    }
}
