//! Full classifier: up to three feature paths, a fusion stage, a linear head.

use evmf_tensor::{Graph, Init, ParamId, ParamStore, Precision, SeedRng, Tensor, Var};
use rayon::prelude::*;

use crate::attention::{MultiHeadAttention, SpatialAttention, SqueezeExcite};
use crate::backbones::{DenseBackbone, DenseBackboneConfig, UNetBackbone, UNetBackboneConfig};
use crate::error::{CoreError, Result};
use crate::features::{feature_layout, FeatureConfig};
use crate::fusion::{CrossModalEncoder, NafBlock, NafConfig, PathId, PathVectors};
use crate::nn::Linear;
use crate::vim::{unpatch_nearest, VimConfig, VimModule};
use crate::xai::{Heatmap, LabeledMatrix, NamedScores, Prediction, XaiBundle};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    Full,
    SimpleMean,
    SimpleConcat,
    NafOnly,
    CmaOnly,
}

impl FusionMode {
    pub const ALL: [FusionMode; 5] = [
        FusionMode::Full,
        FusionMode::SimpleMean,
        FusionMode::SimpleConcat,
        FusionMode::NafOnly,
        FusionMode::CmaOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Full => "full",
            FusionMode::SimpleMean => "simple_mean",
            FusionMode::SimpleConcat => "simple_concat",
            FusionMode::NafOnly => "naf_only",
            FusionMode::CmaOnly => "cma_only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| CoreError::Config(format!("fusion mode {s:?}")))
    }

    pub fn uses_cma(self) -> bool {
        matches!(self, FusionMode::Full | FusionMode::CmaOnly)
    }

    pub fn uses_naf(self) -> bool {
        matches!(self, FusionMode::Full | FusionMode::NafOnly)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TradMhaMode {
    /// `f_raw` is one token of width `d_raw`.
    VectorToken,
    /// Each scalar feature is a token, embedded to width `d_tok`.
    ScalarTokens,
}

impl TradMhaMode {
    pub fn name(self) -> &'static str {
        match self {
            TradMhaMode::VectorToken => "vector_token",
            TradMhaMode::ScalarTokens => "scalar_tokens",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vector_token" => Ok(TradMhaMode::VectorToken),
            "scalar_tokens" => Ok(TradMhaMode::ScalarTokens),
            _ => Err(CoreError::Config(format!("trad MHA mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TradConfig {
    pub mode: TradMhaMode,
    pub heads: usize,
    pub d_tok: usize,
    pub se_reduction: usize,
}

impl Default for TradConfig {
    fn default() -> Self {
        Self {
            mode: TradMhaMode::ScalarTokens,
            heads: 2,
            d_tok: 8,
            se_reduction: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub paths: Vec<PathId>,
    pub fusion: FusionMode,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub d_model: usize,
    pub image_size: (usize, usize),
    pub in_channels: usize,
    pub seed: u64,
    pub dense: DenseBackboneConfig,
    pub unet: UNetBackboneConfig,
    pub vim: VimConfig,
    pub spatial_kernel: usize,
    pub trad: TradConfig,
    pub features: FeatureConfig,
    pub cma_heads: usize,
    pub naf: NafConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            paths: PathId::ALL.to_vec(),
            fusion: FusionMode::Full,
            num_classes: 3,
            class_names: Vec::new(),
            d_model: 64,
            image_size: (32, 32),
            in_channels: 1,
            seed: 7,
            dense: DenseBackboneConfig::default(),
            unet: UNetBackboneConfig::default(),
            vim: VimConfig::default(),
            spatial_kernel: 7,
            trad: TradConfig::default(),
            features: FeatureConfig::default(),
            cma_heads: 2,
            naf: NafConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn has(&self, p: PathId) -> bool {
        self.paths.contains(&p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.paths.is_empty() {
            return Err(CoreError::Config("at least one path must be enabled".into()));
        }
        if self.num_classes < 2 {
            return Err(CoreError::Config("num_classes must be >= 2".into()));
        }
        if !self.class_names.is_empty() && self.class_names.len() != self.num_classes {
            return Err(CoreError::Config(format!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.num_classes
            )));
        }
        if self.d_model == 0 || self.in_channels == 0 {
            return Err(CoreError::Config("d_model and in_channels must be positive".into()));
        }
        let (h, w) = self.image_size;
        if self.has(PathId::Dense) {
            let (dh, dw) = self.dense.out_extent(h, w)?;
            if dh % self.vim.patch != 0 || dw % self.vim.patch != 0 {
                return Err(CoreError::Config(format!("dense map {dh}x{dw} not divisible by patch {}", self.vim.patch)));
            }
        }
        if self.has(PathId::Unet) {
            self.unet.check_extent(h, w)?;
            if h % self.vim.patch != 0 || w % self.vim.patch != 0 {
                return Err(CoreError::Config(format!("U-Net map {h}x{w} not divisible by patch {}", self.vim.patch)));
            }
        }
        self.features.validate()?;
        self.vim.validate()?;
        self.naf.validate()?;
        Ok(())
    }

    pub fn class_name(&self, c: usize) -> String {
        self.class_names.get(c).cloned().unwrap_or_else(|| format!("class{c}"))
    }

    pub fn raw_dim(&self) -> usize {
        self.features.raw_dim()
    }
}

pub const VARIANTS: [&str; 8] = [
    "DUHF",
    "DHF",
    "DU",
    "UHF",
    "Simple-Mean",
    "Simple-Concat",
    "NAF-Only",
    "CMA-Only",
];

/// Applies a named ablation variant to `base`. Letters: D dense path, U U-Net
/// path, H handcrafted path, F full fusion.
pub fn apply_variant(base: &ModelConfig, name: &str) -> Result<ModelConfig> {
    use PathId::*;
    let (paths, fusion) = match name {
        "DUHF" => (vec![Dense, Unet, Trad], FusionMode::Full),
        "DHF" => (vec![Dense, Trad], FusionMode::Full),
        "DU" => (vec![Dense, Unet], FusionMode::Full),
        "UHF" => (vec![Unet, Trad], FusionMode::Full),
        "Simple-Mean" => (vec![Dense, Unet, Trad], FusionMode::SimpleMean),
        "Simple-Concat" => (vec![Dense, Unet, Trad], FusionMode::SimpleConcat),
        "NAF-Only" => (vec![Dense, Unet, Trad], FusionMode::NafOnly),
        "CMA-Only" => (vec![Dense, Unet, Trad], FusionMode::CmaOnly),
        _ => {
            return Err(CoreError::UnknownVariant {
                name: name.to_string(),
                valid: VARIANTS.join(", "),
            })
        }
    };
    Ok(ModelConfig {
        paths,
        fusion,
        ..base.clone()
    })
}

pub fn build_variant(name: &str) -> Result<ModelConfig> {
    apply_variant(&ModelConfig::default(), name)
}

/// One preprocessed example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub name: String,
    /// `C×H×W` at the configured size.
    pub image: Tensor,
    /// Network-scaled handcrafted features.
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Clone, Debug)]
enum Backbone {
    Dense(DenseBackbone),
    Unet(UNetBackbone),
}

#[derive(Clone, Debug)]
struct DeepPath {
    backbone: Backbone,
    vim: VimModule,
    spatial: SpatialAttention,
}

struct DeepOut {
    vector: Var,
    delta_fwd: Heatmap,
    delta_bwd: Heatmap,
    mask: Var,
}

impl DeepPath {
    fn forward(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<DeepOut> {
        let fmap = match &self.backbone {
            Backbone::Dense(b) => b.forward(g, store, image)?,
            Backbone::Unet(b) => b.forward(g, store, image)?,
        };
        let vim = self.vim.forward(g, store, fmap.var)?;
        // Spatial attention runs at the backbone's extents.
        let map = unpatch_nearest(g, vim.map, self.vim.cfg.patch)?;
        let sp = self.spatial.forward(g, store, map)?;
        Ok(DeepOut {
            vector: sp.pooled,
            delta_fwd: vim.delta_fwd,
            delta_bwd: vim.delta_bwd,
            mask: sp.mask,
        })
    }
}

#[derive(Clone, Debug)]
struct TradPath {
    mode: TradMhaMode,
    d_raw: usize,
    embed_w: Option<ParamId>,
    embed_pos: Option<ParamId>,
    readout: Option<Linear>,
    mha: MultiHeadAttention,
    se: SqueezeExcite,
    fc: Linear,
}

impl TradPath {
    fn new(store: &mut ParamStore, rng: &mut SeedRng, cfg: &ModelConfig) -> Result<Self> {
        let d_raw = cfg.raw_dim();
        let t = &cfg.trad;
        let (embed_w, embed_pos, readout, width) = match t.mode {
            TradMhaMode::VectorToken => (None, None, None, d_raw),
            TradMhaMode::ScalarTokens => {
                let w = store.register("trad.embed.w", &[1, t.d_tok], Init::UniformFanIn { fan_in: 1 }, rng)?;
                let pos = store.register("trad.embed.pos", &[d_raw, t.d_tok], Init::UniformFanIn { fan_in: t.d_tok }, rng)?;
                let ro = Linear::new(store, rng, "trad.readout", t.d_tok, 1, true)?;
                (Some(w), Some(pos), Some(ro), t.d_tok)
            }
        };
        Ok(Self {
            mode: t.mode,
            d_raw,
            embed_w,
            embed_pos,
            readout,
            mha: MultiHeadAttention::new(store, rng, "trad.mha", width, t.heads)?,
            se: SqueezeExcite::new(store, rng, "trad.se", d_raw, t.se_reduction)?,
            fc: Linear::new(store, rng, "trad.fc", d_raw, cfg.d_model, true)?,
        })
    }

    /// Returns `v_T` and the SE gates.
    fn forward(&self, g: &mut Graph, store: &ParamStore, features: &[f64]) -> Result<(Var, Var)> {
        if features.len() != self.d_raw {
            return Err(CoreError::Config(format!("{} features, expected {}", features.len(), self.d_raw)));
        }
        let attended = match self.mode {
            TradMhaMode::VectorToken => {
                let f = g.constant(Tensor::matrix(1, self.d_raw, features.to_vec())?)?;
                self.mha.forward(g, store, f, f, f)?.0
            }
            TradMhaMode::ScalarTokens => {
                let col = g.constant(Tensor::matrix(self.d_raw, 1, features.to_vec())?)?;
                let w = g.param(store, self.embed_w.expect("scalar mode"));
                let pos = g.param(store, self.embed_pos.expect("scalar mode"));
                let tok = g.matmul(col, w)?;
                let tok = g.add(tok, pos)?;
                let (att, _) = self.mha.forward(g, store, tok, tok, tok)?;
                let ro = self.readout.as_ref().expect("scalar mode").forward(g, store, att)?;
                g.reshape(ro, vec![1, self.d_raw])?
            }
        };
        let (recal, s) = self.se.forward(g, store, attended)?;
        Ok((self.fc.forward(g, store, recal)?, s))
    }
}

#[derive(Clone, Debug)]
enum FusionHead {
    Full(CrossModalEncoder, NafBlock),
    SimpleMean,
    SimpleConcat(Linear),
    NafOnly(NafBlock),
    CmaOnly(CrossModalEncoder),
}

/// Intermediates kept for explanation capture.
struct FuseOut {
    fused: Var,
    w_cma: Option<Var>,
    alpha: Vec<Var>,
}

impl FusionHead {
    fn fuse(&self, g: &mut Graph, store: &ParamStore, v_in: Var) -> Result<FuseOut> {
        let n = g.shape(v_in)[0];
        Ok(match self {
            FusionHead::Full(cma, naf) => {
                let ctx = cma.encode(g, store, v_in)?;
                let (fused, st) = naf.fuse(g, store, ctx.v)?;
                FuseOut {
                    fused,
                    w_cma: Some(ctx.w_cma),
                    alpha: st.alpha_trace,
                }
            }
            FusionHead::SimpleMean => FuseOut {
                fused: g.mean_axis(v_in, 0)?,
                w_cma: None,
                alpha: Vec::new(),
            },
            FusionHead::SimpleConcat(lin) => {
                let d = g.shape(v_in)[1];
                let flat = g.reshape(v_in, vec![1, n * d])?;
                FuseOut {
                    fused: lin.forward(g, store, flat)?,
                    w_cma: None,
                    alpha: Vec::new(),
                }
            }
            FusionHead::NafOnly(naf) => {
                let (fused, st) = naf.fuse(g, store, v_in)?;
                FuseOut {
                    fused,
                    w_cma: None,
                    alpha: st.alpha_trace,
                }
            }
            FusionHead::CmaOnly(cma) => {
                let ctx = cma.encode(g, store, v_in)?;
                FuseOut {
                    fused: g.mean_axis(ctx.v, 0)?,
                    w_cma: Some(ctx.w_cma),
                    alpha: Vec::new(),
                }
            }
        })
    }
}

/// Per-sample forward result: logits plus what capture needs.
pub struct SampleForward {
    pub graph: Graph,
    /// `1 × num_classes`
    pub logits: Var,
    capture: CaptureVars,
}

#[derive(Default)]
struct CaptureVars {
    dense: Option<(Heatmap, Heatmap, Var)>,
    unet: Option<(Heatmap, Heatmap, Var)>,
    se: Option<Var>,
    w_cma: Option<Var>,
    ids: Vec<PathId>,
    alpha: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    dense: Option<DeepPath>,
    unet: Option<DeepPath>,
    trad: Option<TradPath>,
    fusion: FusionHead,
    head: Linear,
}

impl Model {
    /// Builds the model and initializes all parameters from `cfg.seed`.
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut root = SeedRng::new(cfg.seed);
        let d = cfg.d_model;
        let deep = |store: &mut ParamStore, rng: &mut SeedRng, id: PathId| -> Result<DeepPath> {
            let tag = id.label();
            let (backbone, ch) = match id {
                PathId::Dense => {
                    let bc = DenseBackboneConfig {
                        in_channels: cfg.in_channels,
                        ..cfg.dense.clone()
                    };
                    (Backbone::Dense(DenseBackbone::new(store, rng, "dense.backbone", &bc)?), bc.out_channels())
                }
                _ => {
                    let uc = UNetBackboneConfig {
                        in_channels: cfg.in_channels,
                        ..cfg.unet.clone()
                    };
                    let ch = uc.base_channels;
                    (Backbone::Unet(UNetBackbone::new(store, rng, "unet.backbone", &uc)?), ch)
                }
            };
            Ok(DeepPath {
                backbone,
                vim: VimModule::new(store, rng, &format!("{tag}.vim"), ch, d, &cfg.vim)?,
                spatial: SpatialAttention::new(store, rng, &format!("{tag}.spatial"), cfg.spatial_kernel)?,
            })
        };
        let dense = if cfg.has(PathId::Dense) {
            Some(deep(&mut store, &mut root.fork("dense"), PathId::Dense)?)
        } else {
            None
        };
        let unet = if cfg.has(PathId::Unet) {
            Some(deep(&mut store, &mut root.fork("unet"), PathId::Unet)?)
        } else {
            None
        };
        let trad = if cfg.has(PathId::Trad) {
            Some(TradPath::new(&mut store, &mut root.fork("trad"), cfg)?)
        } else {
            None
        };
        let n = cfg.paths.len();
        let mut frng = root.fork("fusion");
        let fusion = match cfg.fusion {
            FusionMode::Full => FusionHead::Full(
                CrossModalEncoder::new(&mut store, &mut frng, "fusion.cma", d, cfg.cma_heads)?,
                NafBlock::new(&mut store, &mut frng, "fusion.naf", n, d, &cfg.naf)?,
            ),
            FusionMode::SimpleMean => FusionHead::SimpleMean,
            FusionMode::SimpleConcat => FusionHead::SimpleConcat(Linear::new(&mut store, &mut frng, "fusion.concat", n * d, d, true)?),
            FusionMode::NafOnly => FusionHead::NafOnly(NafBlock::new(&mut store, &mut frng, "fusion.naf", n, d, &cfg.naf)?),
            FusionMode::CmaOnly => FusionHead::CmaOnly(CrossModalEncoder::new(&mut store, &mut frng, "fusion.cma", d, cfg.cma_heads)?),
        };
        let head = Linear::new(&mut store, &mut root.fork("head"), "head", d, cfg.num_classes, true)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            dense,
            unet,
            trad,
            fusion,
            head,
        })
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    pub fn check_sample(&self, s: &Sample) -> Result<()> {
        let (h, w) = self.cfg.image_size;
        if s.image.shape() != [self.cfg.in_channels, h, w] {
            return Err(CoreError::Config(format!(
                "image {:?} does not match configured {}×{h}×{w}",
                s.image.shape(),
                self.cfg.in_channels
            )));
        }
        Ok(())
    }

    /// Builds the graph for one sample.
    pub fn forward_sample(&self, sample: &Sample, precision: Precision) -> Result<SampleForward> {
        let mut g = Graph::new(precision);
        let (logits, capture) = self.build(&mut g, &self.store, sample)?;
        Ok(SampleForward {
            graph: g,
            logits,
            capture,
        })
    }

    /// Records the sample's logits on `g`, reading weights from `store`
    /// (which must share this model's layout).
    pub fn logits_on(&self, g: &mut Graph, store: &ParamStore, sample: &Sample) -> Result<Var> {
        Ok(self.build(g, store, sample)?.0)
    }

    fn build(&self, g: &mut Graph, store: &ParamStore, sample: &Sample) -> Result<(Var, CaptureVars)> {
        self.check_sample(sample)?;
        let (c, h, w) = (self.cfg.in_channels, self.cfg.image_size.0, self.cfg.image_size.1);
        let image = g.constant(sample.image.clone().reshape(vec![1, c, h, w])?)?;
        let mut entries = Vec::new();
        let mut cap = CaptureVars::default();
        if let Some(p) = &self.dense {
            let o = p.forward(g, store, image)?;
            entries.push((PathId::Dense, o.vector));
            cap.dense = Some((o.delta_fwd, o.delta_bwd, o.mask));
        }
        if let Some(p) = &self.unet {
            let o = p.forward(g, store, image)?;
            entries.push((PathId::Unet, o.vector));
            cap.unet = Some((o.delta_fwd, o.delta_bwd, o.mask));
        }
        if let Some(t) = &self.trad {
            let (v, s) = t.forward(g, store, &sample.features)?;
            entries.push((PathId::Trad, v));
            cap.se = Some(s);
        }
        let pv = PathVectors::stack(g, entries)?;
        let fo = self.fusion.fuse(g, store, pv.stacked)?;
        cap.ids = pv.ids;
        cap.w_cma = fo.w_cma;
        cap.alpha = fo.alpha;
        let logits = self.head.forward(g, store, fo.fused)?;
        Ok((logits, cap))
    }

    /// Copies the explanation surfaces out of a finished forward pass.
    pub fn capture(&self, fwd: &SampleForward) -> Result<XaiBundle> {
        let g = &fwd.graph;
        let cap = &fwd.capture;
        let mask_map = |v: Var| {
            let s = g.shape(v);
            Heatmap::new(s[2], s[3], g.data(v).to_vec())
        };
        let mut b = XaiBundle::default();
        if let Some((f, bw, m)) = &cap.dense {
            b.dense_delta_fwd = Some(f.clone());
            b.dense_delta_bwd = Some(bw.clone());
            b.dense_spatial = Some(mask_map(*m)?);
        }
        if let Some((f, bw, m)) = &cap.unet {
            b.unet_delta_fwd = Some(f.clone());
            b.unet_delta_bwd = Some(bw.clone());
            b.unet_spatial = Some(mask_map(*m)?);
        }
        if let Some(s) = cap.se {
            b.se_scores = Some(NamedScores {
                names: feature_layout(&self.cfg.features),
                values: g.data(s).to_vec(),
            });
        }
        if let Some(w) = cap.w_cma {
            let n = cap.ids.len();
            b.cma_weights = Some(LabeledMatrix {
                labels: cap.ids.iter().map(|p| p.label().to_string()).collect(),
                matrix: Heatmap::new(n, n, g.data(w).to_vec())?,
            });
        }
        if !cap.alpha.is_empty() {
            let cols = g.value(cap.alpha[0]).len();
            let values = cap.alpha.iter().flat_map(|&a| g.data(a).to_vec()).collect();
            b.alpha_trace = Some(Heatmap::new(cap.alpha.len(), cols, values)?);
        }
        let probs = softmax_row(g.data(fwd.logits));
        let class_id = argmax(&probs);
        b.prediction = Some(Prediction {
            class_id,
            class_name: self.cfg.class_name(class_id),
            probability: probs[class_id],
        });
        Ok(b)
    }

    /// Logits for a batch (`B × num_classes`) and, if requested, one bundle
    /// per image. Samples are evaluated in parallel; results keep batch order.
    pub fn forward(&self, batch: &[Sample], precision: Precision, capture: bool) -> Result<(Tensor, Vec<XaiBundle>)> {
        let outs: Vec<(Vec<f64>, Option<XaiBundle>)> = batch
            .par_iter()
            .map(|s| {
                let f = self.forward_sample(s, precision)?;
                let bundle = if capture { Some(self.capture(&f)?) } else { None };
                Ok((f.graph.data(f.logits).to_vec(), bundle))
            })
            .collect::<Result<_>>()?;
        let k = self.cfg.num_classes;
        let mut data = Vec::with_capacity(batch.len() * k);
        let mut bundles = Vec::new();
        for (l, b) in outs {
            data.extend(l);
            bundles.extend(b);
        }
        Ok((Tensor::new(vec![batch.len(), k], data)?, bundles))
    }
}

pub fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Stand-alone fusion of pre-stacked path vectors; used by oracle tests.
pub fn fuse_vectors(model: &Model, g: &mut Graph, v_in: Var) -> Result<Var> {
    Ok(model.fusion.fuse(g, &model.store, v_in)?.fused)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::set_param;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            image_size: (8, 8),
            dense: DenseBackboneConfig {
                in_channels: 1,
                stem_channels: 4,
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
                d_model: 4,
                d_inner: 4,
                d_state: 2,
                layers: 1,
            },
            spatial_kernel: 3,
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

    fn sample(cfg: &ModelConfig, seed: u64) -> Sample {
        let mut rng = SeedRng::new(seed);
        let (h, w) = cfg.image_size;
        let n = cfg.in_channels * h * w;
        Sample {
            name: "s".into(),
            image: Tensor::new(vec![cfg.in_channels, h, w], (0..n).map(|_| rng.uniform(0.0, 1.0)).collect()).unwrap(),
            features: (0..cfg.raw_dim()).map(|_| rng.uniform(0.0, 1.0)).collect(),
            label: 0,
        }
    }

    #[test]
    fn variants_decode() {
        let v = build_variant("DUHF").unwrap();
        assert_eq!(v.paths.len(), 3);
        assert_eq!(v.fusion, FusionMode::Full);
        assert!(!build_variant("DU").unwrap().has(PathId::Trad));
        let sc = build_variant("Simple-Concat").unwrap();
        assert_eq!((sc.paths.len(), sc.fusion), (3, FusionMode::SimpleConcat));
        let err = build_variant("XYZ").unwrap_err().to_string();
        assert!(VARIANTS.iter().all(|v| err.contains(v)));
    }

    #[test]
    fn logits_shape_for_every_variant() {
        for v in VARIANTS {
            let cfg = apply_variant(&ModelConfig { num_classes: 9, ..tiny_config() }, v).unwrap();
            let m = Model::new(&cfg).unwrap();
            let batch = vec![sample(&cfg, 1), sample(&cfg, 2)];
            let (logits, bundles) = m.forward(&batch, Precision::F64, true).unwrap();
            assert_eq!(logits.shape(), &[2, 9], "{v}");
            assert_eq!(bundles.len(), 2);
        }
    }

    #[test]
    fn zero_head_gives_uniform_probabilities() {
        let cfg = tiny_config();
        let mut m = Model::new(&cfg).unwrap();
        let h = m.head().clone();
        set_param(&mut m.store, h.w, vec![0.0; 8 * 3]).unwrap();
        set_param(&mut m.store, h.b.unwrap(), vec![0.0; 3]).unwrap();
        let (logits, _) = m.forward(&[sample(&cfg, 3)], Precision::F64, false).unwrap();
        for p in softmax_row(logits.data()) {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn bundle_fields_follow_paths() {
        let cfg = tiny_config();
        let m = Model::new(&cfg).unwrap();
        let s = sample(&cfg, 4);
        let (_, b) = m.forward(&[s.clone()], Precision::F64, true).unwrap();
        assert_eq!(b[0].artifact_count(), 8);
        let (_, again) = m.forward(&[s.clone()], Precision::F64, true).unwrap();
        assert_eq!(b, again);
        let du = Model::new(&apply_variant(&cfg, "DU").unwrap()).unwrap();
        let (_, b) = du.forward(&[s], Precision::F64, true).unwrap();
        assert!(b[0].se_scores.is_none());
        assert_eq!(b[0].cma_weights.as_ref().unwrap().matrix.rows, 2);
    }

    #[test]
    fn rejects_wrong_image_size() {
        let cfg = tiny_config();
        let m = Model::new(&cfg).unwrap();
        let mut s = sample(&cfg, 5);
        s.image = Tensor::zeros(vec![1, 16, 16]);
        assert!(m.forward(&[s], Precision::F64, false).is_err());
    }
}
