//! Plain-text `key = value` run configuration. Assignments apply in order and
//! later ones win; `variant` rewrites `paths` and `fusion` at its position.

use std::fmt::Debug;
use std::str::FromStr;

use evmf_tensor::Precision;

use crate::error::{CoreError, Result};
use crate::features::{GlcmAngle, LbpMode};
use crate::fusion::PathId;
use crate::model::{apply_variant, FusionMode, ModelConfig, TradMhaMode};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub variant: Option<String>,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            variant: Some("DUHF".into()),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

pub const KEYS: &[&str] = &[
    "variant",
    "paths",
    "fusion",
    "num_classes",
    "classes",
    "d_model",
    "image_height",
    "image_width",
    "in_channels",
    "seed",
    "dense.stem_channels",
    "dense.blocks",
    "dense.compression",
    "unet.depth",
    "unet.base_channels",
    "unet.skip",
    "vim.patch",
    "vim.d_model",
    "vim.d_inner",
    "vim.d_state",
    "vim.layers",
    "spatial.kernel",
    "trad.mode",
    "trad.heads",
    "trad.d_tok",
    "trad.se_reduction",
    "features.levels",
    "features.distances",
    "features.angles",
    "features.symmetric",
    "features.lbp_points",
    "features.lbp_radius",
    "features.lbp_mode",
    "cma.heads",
    "naf.k",
    "naf.primitives",
    "naf.d_state",
    "naf.d_ctrl",
    "naf.hidden",
    "train.epochs",
    "train.batch_size",
    "train.lr",
    "train.beta1",
    "train.beta2",
    "train.eps",
    "train.precision",
    "train.target_accuracy",
];

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| CoreError::Config(format!("{key}: cannot parse {v:?}")))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').filter(|s| !s.trim().is_empty()).map(|s| num(key, s.trim())).collect()
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(CoreError::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn join<T: Debug>(v: &[T]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

/// Splits config text into `(key, value)` pairs, skipping blanks and `#` comments.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CoreError::Config(format!("line {}: expected key = value", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn parse_override(s: &str) -> Result<(String, String)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| CoreError::Config(format!("override {s:?} must look like key=value")))
}

impl RunConfig {
    /// Resolves defaults plus `pairs` (in precedence order, later wins).
    pub fn resolve(pairs: &[(String, String)]) -> Result<Self> {
        for (k, _) in pairs {
            if !KEYS.contains(&k.as_str()) {
                return Err(CoreError::Config(format!("unknown key {k:?}")));
            }
        }
        let mut cfg = RunConfig::default();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn from_text(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = parse_pairs(text)?;
        pairs.extend_from_slice(overrides);
        Self::resolve(&pairs)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "variant" => {
                let base = std::mem::take(m);
                *m = apply_variant(&base, v)?;
                self.variant = Some(v.to_string());
            }
            "paths" => {
                let mut paths = Vec::new();
                for p in v.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                    let id = PathId::ALL
                        .into_iter()
                        .find(|i| i.label() == p)
                        .ok_or_else(|| CoreError::Config(format!("paths: unknown path {p:?}")))?;
                    if !paths.contains(&id) {
                        paths.push(id);
                    }
                }
                paths.sort();
                m.paths = paths;
            }
            "fusion" => m.fusion = FusionMode::parse(v)?,
            "num_classes" => m.num_classes = num(key, v)?,
            "classes" => {
                m.class_names = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
                if !m.class_names.is_empty() {
                    m.num_classes = m.class_names.len();
                }
            }
            "d_model" => m.d_model = num(key, v)?,
            "image_height" => m.image_size.0 = num(key, v)?,
            "image_width" => m.image_size.1 = num(key, v)?,
            "in_channels" => m.in_channels = num(key, v)?,
            "seed" => m.seed = num(key, v)?,
            "dense.stem_channels" => m.dense.stem_channels = num(key, v)?,
            "dense.blocks" => {
                m.dense.blocks = v
                    .split(',')
                    .map(|b| {
                        let (l, g) = b
                            .trim()
                            .split_once('x')
                            .ok_or_else(|| CoreError::Config(format!("{key}: expected LAYERSxGROWTH, got {b:?}")))?;
                        Ok((num(key, l)?, num(key, g)?))
                    })
                    .collect::<Result<_>>()?
            }
            "dense.compression" => m.dense.compression = num(key, v)?,
            "unet.depth" => m.unet.depth = num(key, v)?,
            "unet.base_channels" => m.unet.base_channels = num(key, v)?,
            "unet.skip" => m.unet.skip = flag(key, v)?,
            "vim.patch" => m.vim.patch = num(key, v)?,
            "vim.d_model" => m.vim.d_model = num(key, v)?,
            "vim.d_inner" => m.vim.d_inner = num(key, v)?,
            "vim.d_state" => m.vim.d_state = num(key, v)?,
            "vim.layers" => m.vim.layers = num(key, v)?,
            "spatial.kernel" => m.spatial_kernel = num(key, v)?,
            "trad.mode" => m.trad.mode = TradMhaMode::parse(v)?,
            "trad.heads" => m.trad.heads = num(key, v)?,
            "trad.d_tok" => m.trad.d_tok = num(key, v)?,
            "trad.se_reduction" => m.trad.se_reduction = num(key, v)?,
            "features.levels" => m.features.glcm.levels = num(key, v)?,
            "features.distances" => m.features.glcm.distances = list(key, v)?,
            "features.angles" => {
                m.features.glcm.angles = list::<u32>(key, v)?
                    .into_iter()
                    .map(GlcmAngle::from_degrees)
                    .collect::<Result<_>>()?
            }
            "features.symmetric" => m.features.glcm.symmetric = flag(key, v)?,
            "features.lbp_points" => m.features.lbp_points = num(key, v)?,
            "features.lbp_radius" => m.features.lbp_radius = num(key, v)?,
            "features.lbp_mode" => {
                m.features.lbp_mode = match v {
                    "uniform" => LbpMode::Uniform,
                    "full" => LbpMode::Full,
                    _ => return Err(CoreError::Config(format!("{key}: expected uniform or full"))),
                }
            }
            "cma.heads" => m.cma_heads = num(key, v)?,
            "naf.k" => m.naf.k = num(key, v)?,
            "naf.primitives" => m.naf.n_primitives = num(key, v)?,
            "naf.d_state" => m.naf.d_state = num(key, v)?,
            "naf.d_ctrl" => m.naf.d_ctrl = num(key, v)?,
            "naf.hidden" => m.naf.hidden = num(key, v)?,
            "train.epochs" => t.epochs = num(key, v)?,
            "train.batch_size" => t.batch_size = num(key, v)?,
            "train.lr" => t.lr = num(key, v)?,
            "train.beta1" => t.beta1 = num(key, v)?,
            "train.beta2" => t.beta2 = num(key, v)?,
            "train.eps" => t.eps = num(key, v)?,
            "train.precision" => {
                t.precision = match v {
                    "f64" => Precision::F64,
                    "f32" => Precision::F32,
                    _ => return Err(CoreError::Config(format!("{key}: expected f64 or f32"))),
                }
            }
            "train.target_accuracy" => {
                t.target_accuracy = if v == "none" { None } else { Some(num(key, v)?) }
            }
            _ => return Err(CoreError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> String {
        let m = &self.model;
        let t = &self.train;
        match key {
            "variant" => self.variant.clone().unwrap_or_else(|| "none".into()),
            "paths" => m.paths.iter().map(|p| p.label()).collect::<Vec<_>>().join(","),
            "fusion" => m.fusion.name().into(),
            "num_classes" => m.num_classes.to_string(),
            "classes" => m.class_names.join(","),
            "d_model" => m.d_model.to_string(),
            "image_height" => m.image_size.0.to_string(),
            "image_width" => m.image_size.1.to_string(),
            "in_channels" => m.in_channels.to_string(),
            "seed" => m.seed.to_string(),
            "dense.stem_channels" => m.dense.stem_channels.to_string(),
            "dense.blocks" => m.dense.blocks.iter().map(|(l, g)| format!("{l}x{g}")).collect::<Vec<_>>().join(","),
            "dense.compression" => format!("{:?}", m.dense.compression),
            "unet.depth" => m.unet.depth.to_string(),
            "unet.base_channels" => m.unet.base_channels.to_string(),
            "unet.skip" => m.unet.skip.to_string(),
            "vim.patch" => m.vim.patch.to_string(),
            "vim.d_model" => m.vim.d_model.to_string(),
            "vim.d_inner" => m.vim.d_inner.to_string(),
            "vim.d_state" => m.vim.d_state.to_string(),
            "vim.layers" => m.vim.layers.to_string(),
            "spatial.kernel" => m.spatial_kernel.to_string(),
            "trad.mode" => m.trad.mode.name().into(),
            "trad.heads" => m.trad.heads.to_string(),
            "trad.d_tok" => m.trad.d_tok.to_string(),
            "trad.se_reduction" => m.trad.se_reduction.to_string(),
            "features.levels" => m.features.glcm.levels.to_string(),
            "features.distances" => join(&m.features.glcm.distances),
            "features.angles" => join(&m.features.glcm.angles.iter().map(|a| a.degrees()).collect::<Vec<_>>()),
            "features.symmetric" => m.features.glcm.symmetric.to_string(),
            "features.lbp_points" => m.features.lbp_points.to_string(),
            "features.lbp_radius" => format!("{:?}", m.features.lbp_radius),
            "features.lbp_mode" => match m.features.lbp_mode {
                LbpMode::Uniform => "uniform".into(),
                LbpMode::Full => "full".into(),
            },
            "cma.heads" => m.cma_heads.to_string(),
            "naf.k" => m.naf.k.to_string(),
            "naf.primitives" => m.naf.n_primitives.to_string(),
            "naf.d_state" => m.naf.d_state.to_string(),
            "naf.d_ctrl" => m.naf.d_ctrl.to_string(),
            "naf.hidden" => m.naf.hidden.to_string(),
            "train.epochs" => t.epochs.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.lr" => format!("{:?}", t.lr),
            "train.beta1" => format!("{:?}", t.beta1),
            "train.beta2" => format!("{:?}", t.beta2),
            "train.eps" => format!("{:?}", t.eps),
            "train.precision" => match t.precision {
                Precision::F64 => "f64".into(),
                Precision::F32 => "f32".into(),
            },
            "train.target_accuracy" => t.target_accuracy.map_or("none".into(), |a| format!("{a:?}")),
            _ => unreachable!("key list and getters out of sync: {key}"),
        }
    }

    /// Every key with its resolved value, one `key = value` line each.
    pub fn dump(&self) -> String {
        KEYS.iter()
            .filter(|k| !(**k == "variant" && self.variant.is_none()))
            .map(|k| format!("{k} = {}\n", self.get(k)))
            .collect()
    }
}
