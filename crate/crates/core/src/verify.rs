//! Finite-difference gradient checks for every block at tiny dimensions.

use evmf_tensor::{grad_check_with, GradCheckOptions, Graph, ParamStore, SeedRng, Tensor, Var};

use crate::attention::{MultiHeadAttention, SpatialAttention, SqueezeExcite};
use crate::backbones::{DenseBackbone, DenseBackboneConfig, UNetBackbone, UNetBackboneConfig};
use crate::error::{CoreError, Result};
use crate::fusion::{NafBlock, NafConfig};
use crate::model::{Model, ModelConfig, Sample};
use crate::nn::GruCell;
use crate::vim::{selective_scan, Direction, MambaBlock, SsmParams, VimConfig};

pub const BLOCK_THRESHOLD: f64 = 1e-4;
pub const MODEL_THRESHOLD: f64 = 1e-3;

pub const BLOCKS: [&str; 10] = [
    "dense_backbone",
    "unet_backbone",
    "spatial_attention",
    "mha",
    "squeeze_excite",
    "selective_scan",
    "mamba_block",
    "gru",
    "naf",
    "full_model",
];

#[derive(Clone, Debug)]
pub struct BlockReport {
    pub block: String,
    pub max_rel_error: f64,
    pub threshold: f64,
    pub coords: usize,
    pub worst: Option<(String, usize)>,
}

impl BlockReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.threshold
    }
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub step: f64,
    /// Name of a block whose analytic gradient is deliberately perturbed.
    pub corrupt: Option<String>,
    pub seed: u64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            corrupt: None,
            seed: 11,
        }
    }
}

fn random(rng: &mut SeedRng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(lo, hi)).collect()).expect("shape matches data")
}

/// Scalar probe `Σ x ⊙ r` with `r` drawn from `seed`, so every output
/// coordinate contributes with a distinct weight.
fn probe(g: &mut Graph, x: Var, seed: u64) -> evmf_tensor::Result<Var> {
    let r = random(&mut SeedRng::new(seed), g.shape(x), -1.0, 1.0);
    let rv = g.constant(r)?;
    let p = g.mul(x, rv)?;
    g.sum_all(p)
}

fn to_tensor_err(e: CoreError) -> evmf_tensor::TensorError {
    match e {
        CoreError::Tensor(t) => t,
        other => evmf_tensor::TensorError::Invalid(other.to_string()),
    }
}

fn check<F>(name: &str, threshold: f64, store: &mut ParamStore, opts: &SuiteOptions, f: F) -> Result<BlockReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let gopts = GradCheckOptions {
        step: opts.step,
        max_coords_per_param: None,
        corrupt: (opts.corrupt.as_deref() == Some(name)).then_some(1.0),
    };
    let rep = grad_check_with(store, &gopts, |g, s| f(g, s).map_err(to_tensor_err))?;
    Ok(BlockReport {
        block: name.to_string(),
        max_rel_error: rep.max_rel_error,
        threshold,
        coords: rep.coords_checked,
        worst: rep.worst,
    })
}

pub fn check_block(name: &str, opts: &SuiteOptions) -> Result<BlockReport> {
    let mut rng = SeedRng::new(opts.seed).fork(name);
    let mut store = ParamStore::new();
    let t = BLOCK_THRESHOLD;
    match name {
        "dense_backbone" => {
            let cfg = DenseBackboneConfig {
                in_channels: 1,
                stem_channels: 3,
                blocks: vec![(2, 2), (1, 2)],
                compression: 0.5,
            };
            let net = DenseBackbone::new(&mut store, &mut rng, "dense", &cfg)?;
            let x = store.register_values("input", random(&mut rng, &[1, 1, 8, 8], 0.0, 1.0))?;
            check(name, t, &mut store, opts, |g, s| {
                let xv = g.param(s, x);
                let f = net.forward(g, s, xv)?;
                Ok(probe(g, f.var, 1)?)
            })
        }
        "unet_backbone" => {
            let cfg = UNetBackboneConfig {
                in_channels: 1,
                depth: 2,
                base_channels: 2,
                skip: true,
            };
            let net = UNetBackbone::new(&mut store, &mut rng, "unet", &cfg)?;
            let x = store.register_values("input", random(&mut rng, &[1, 1, 8, 8], 0.0, 1.0))?;
            check(name, t, &mut store, opts, |g, s| {
                let xv = g.param(s, x);
                let f = net.forward(g, s, xv)?;
                Ok(probe(g, f.var, 1)?)
            })
        }
        "spatial_attention" => {
            let sa = SpatialAttention::new(&mut store, &mut rng, "sa", 3)?;
            let x = store.register_values("input", random(&mut rng, &[1, 3, 4, 4], -1.0, 1.0))?;
            check(name, t, &mut store, opts, |g, s| {
                let xv = g.param(s, x);
                let o = sa.forward(g, s, xv)?;
                let a = probe(g, o.pooled, 1)?;
                let b = probe(g, o.mask, 2)?;
                Ok(g.add(a, b)?)
            })
        }
        "mha" => {
            let mha = MultiHeadAttention::new(&mut store, &mut rng, "mha", 4, 2)?;
            let q = store.register_values("q", random(&mut rng, &[2, 4], -1.0, 1.0))?;
            let kv = store.register_values("kv", random(&mut rng, &[3, 4], -1.0, 1.0))?;
            check(name, t, &mut store, opts, |g, s| {
                let (qv, kvv) = (g.param(s, q), g.param(s, kv));
                let (o, w) = mha.forward(g, s, qv, kvv, kvv)?;
                let a = probe(g, o, 1)?;
                let b = probe(g, w, 2)?;
                Ok(g.add(a, b)?)
            })
        }
        "squeeze_excite" => {
            let se = SqueezeExcite::new(&mut store, &mut rng, "se", 4, 2)?;
            let f = store.register_values("input", random(&mut rng, &[1, 4], -1.0, 1.0))?;
            check(name, t, &mut store, opts, |g, s| {
                let fv = g.param(s, f);
                let (o, _) = se.forward(g, s, fv)?;
                Ok(probe(g, o, 1)?)
            })
        }
        "selective_scan" => {
            let p = SsmParams::new(&mut store, &mut rng, "ssm", 3, 2)?;
            let u = store.register_values("input", random(&mut rng, &[5, 3], -1.0, 1.0))?;
            check(name, t, &mut store, opts, |g, s| {
                let uv = g.param(s, u);
                let (yf, _) = selective_scan(g, s, uv, &p, Direction::Forward)?;
                let (yb, _) = selective_scan(g, s, uv, &p, Direction::Backward)?;
                let a = probe(g, yf, 1)?;
                let b = probe(g, yb, 2)?;
                Ok(g.add(a, b)?)
            })
        }
        "mamba_block" => {
            let f = MambaBlock::new(&mut store, &mut rng, "fwd", 3, 2, 2, Direction::Forward)?;
            let b = MambaBlock::new(&mut store, &mut rng, "bwd", 3, 2, 2, Direction::Backward)?;
            let x = store.register_values("input", random(&mut rng, &[5, 3], -1.0, 1.0))?;
            check(name, t, &mut store, opts, |g, s| {
                let xv = g.param(s, x);
                let (y, _) = f.forward(g, s, xv)?;
                let (y, _) = b.forward(g, s, y)?;
                Ok(probe(g, y, 1)?)
            })
        }
        "gru" => {
            let cell = GruCell::new(&mut store, &mut rng, "gru", 3, 2)?;
            let x = store.register_values("x", random(&mut rng, &[1, 3], -1.0, 1.0))?;
            let h = store.register_values("h", random(&mut rng, &[1, 2], -1.0, 1.0))?;
            check(name, t, &mut store, opts, |g, s| {
                let (xv, hv) = (g.param(s, x), g.param(s, h));
                let h1 = cell.forward(g, s, xv, hv)?;
                let h2 = cell.forward(g, s, xv, h1)?;
                Ok(probe(g, h2, 1)?)
            })
        }
        "naf" => {
            let cfg = NafConfig {
                k: 3,
                n_primitives: 3,
                d_state: 8,
                d_ctrl: 4,
                hidden: 5,
            };
            let naf = NafBlock::new(&mut store, &mut rng, "naf", 3, 4, &cfg)?;
            let v = store.register_values("input", random(&mut rng, &[3, 4], -1.0, 1.0))?;
            check(name, t, &mut store, opts, |g, s| {
                let vv = g.param(s, v);
                let (o, _) = naf.fuse(g, s, vv)?;
                Ok(probe(g, o, 1)?)
            })
        }
        "full_model" => {
            let cfg = minimal_model_config(opts.seed);
            let model = Model::new(&cfg)?;
            let mut store = model.store.clone();
            let sample = Sample {
                name: "probe".into(),
                image: random(&mut rng, &[1, 8, 8], 0.0, 1.0),
                features: (0..cfg.raw_dim()).map(|_| rng.uniform(0.0, 1.0)).collect(),
                label: 1,
            };
            check(name, MODEL_THRESHOLD, &mut store, opts, |g, s| {
                let logits = model.logits_on(g, s, &sample)?;
                Ok(g.cross_entropy(logits, &[sample.label])?)
            })
        }
        _ => Err(CoreError::Config(format!("unknown block {name:?}; valid: {}", BLOCKS.join(", ")))),
    }
}

/// Smallest full-model configuration: 8×8 images, d_model 8.
pub fn minimal_model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        image_size: (8, 8),
        seed,
        dense: DenseBackboneConfig {
            in_channels: 1,
            stem_channels: 2,
            blocks: vec![(1, 2), (1, 2)],
            compression: 0.5,
        },
        unet: UNetBackboneConfig {
            in_channels: 1,
            depth: 1,
            base_channels: 2,
            skip: true,
        },
        vim: VimConfig {
            patch: 1,
            d_model: 3,
            d_inner: 3,
            d_state: 2,
            layers: 1,
        },
        spatial_kernel: 3,
        trad: crate::model::TradConfig {
            d_tok: 4,
            ..Default::default()
        },
        cma_heads: 2,
        naf: NafConfig {
            k: 2,
            n_primitives: 2,
            d_state: 4,
            d_ctrl: 3,
            hidden: 4,
        },
        ..ModelConfig::default()
    }
}

pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<BlockReport>> {
    BLOCKS.iter().map(|b| check_block(b, opts)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_block_passes() {
        for r in run_suite(&SuiteOptions::default()).unwrap() {
            println!("{} {:.3e} ({} coords)", r.block, r.max_rel_error, r.coords);
            assert!(r.passed(), "{r:?}");
            assert!(r.coords > 0);
        }
    }

    #[test]
    fn corruption_is_detected() {
        let opts = SuiteOptions {
            corrupt: Some("gru".into()),
            ..Default::default()
        };
        let r = check_block("gru", &opts).unwrap();
        assert!(!r.passed());
        assert!(check_block("mha", &opts).unwrap().passed());
    }

    #[test]
    fn unknown_block() {
        assert!(check_block("nope", &SuiteOptions::default()).is_err());
    }
}
