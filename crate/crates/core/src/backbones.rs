//! Reduced-scale DenseNet-style and U-Net-style feature extractors.
//! No batch normalization: plain conv + ReLU throughout.

use evmf_tensor::{Graph, ParamStore, SeedRng, Var};

use crate::error::{CoreError, Result};
use crate::nn::Conv2d;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapSource {
    Dense,
    Unet,
}

/// `B×C×H×W` activation produced by a backbone.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub var: Var,
    pub source: MapSource,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseBackboneConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    /// `(layers, growth_rate)` per dense block.
    pub blocks: Vec<(usize, usize)>,
    pub compression: f64,
}

impl Default for DenseBackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            stem_channels: 16,
            blocks: vec![(2, 8), (2, 8)],
            compression: 0.5,
        }
    }
}

impl DenseBackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.stem_channels == 0 || self.blocks.is_empty() {
            return Err(CoreError::Config("dense backbone needs channels and >= 1 block".into()));
        }
        if self.blocks.iter().any(|&(l, g)| l == 0 || g == 0) {
            return Err(CoreError::Config("dense blocks need layers >= 1 and growth >= 1".into()));
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return Err(CoreError::Config("dense compression must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn transition_channels(&self, c: usize) -> usize {
        ((c as f64 * self.compression).floor() as usize).max(1)
    }

    pub fn out_channels(&self) -> usize {
        let mut c = self.stem_channels;
        for (i, &(layers, growth)) in self.blocks.iter().enumerate() {
            if i > 0 {
                c = self.transition_channels(c);
            }
            c += layers * growth;
        }
        c
    }

    /// Output spatial extents, or an error when downsampling runs out of room.
    pub fn out_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if h < 8 || w < 8 {
            return Err(CoreError::Config(format!("dense backbone needs >= 8x8 input, got {h}x{w}")));
        }
        let (mut h, mut w) = (h.div_ceil(2), w.div_ceil(2));
        for _ in 1..self.blocks.len() {
            if h < 2 || w < 2 {
                return Err(CoreError::Config("too many dense transitions for the input size".into()));
            }
            h /= 2;
            w /= 2;
        }
        Ok((h, w))
    }
}

#[derive(Clone, Debug)]
pub struct DenseBackbone {
    pub cfg: DenseBackboneConfig,
    stem: Conv2d,
    blocks: Vec<Vec<Conv2d>>,
    transitions: Vec<Conv2d>,
}

impl DenseBackbone {
    pub fn new(store: &mut ParamStore, rng: &mut SeedRng, name: &str, cfg: &DenseBackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let stem = Conv2d::new(store, rng, &format!("{name}.stem"), cfg.in_channels, cfg.stem_channels, 3, 2, 1)?;
        let mut c = cfg.stem_channels;
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for (bi, &(layers, growth)) in cfg.blocks.iter().enumerate() {
            if bi > 0 {
                let out = cfg.transition_channels(c);
                transitions.push(Conv2d::new(store, rng, &format!("{name}.trans{bi}"), c, out, 1, 1, 0)?);
                c = out;
            }
            let mut block = Vec::new();
            for l in 0..layers {
                block.push(Conv2d::new(store, rng, &format!("{name}.block{bi}.layer{l}"), c, growth, 3, 1, 1)?);
                c += growth;
            }
            blocks.push(block);
        }
        Ok(Self {
            cfg: cfg.clone(),
            stem,
            blocks,
            transitions,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<FeatureMap> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.cfg.in_channels {
            return Err(CoreError::Config(format!(
                "dense backbone expects B×{}×H×W, got {s:?}",
                self.cfg.in_channels
            )));
        }
        self.cfg.out_extent(s[2], s[3])?;
        let y = self.stem.forward(g, store, x)?;
        let mut y = g.relu(y)?;
        for (bi, block) in self.blocks.iter().enumerate() {
            if bi > 0 {
                let t = self.transitions[bi - 1].forward(g, store, y)?;
                let t = g.relu(t)?;
                y = g.avg_pool2(t)?;
            }
            for layer in block {
                let n = layer.forward(g, store, y)?;
                let n = g.relu(n)?;
                y = g.concat(&[y, n], 1)?;
            }
        }
        Ok(FeatureMap {
            var: y,
            source: MapSource::Dense,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNetBackboneConfig {
    pub in_channels: usize,
    pub depth: usize,
    pub base_channels: usize,
    pub skip: bool,
}

impl Default for UNetBackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            depth: 2,
            base_channels: 8,
            skip: true,
        }
    }
}

impl UNetBackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 || self.in_channels == 0 {
            return Err(CoreError::Config("U-Net needs depth >= 1 and positive channels".into()));
        }
        Ok(())
    }

    pub fn check_extent(&self, h: usize, w: usize) -> Result<()> {
        let f = 1usize << self.depth;
        if h % f != 0 || w % f != 0 || h == 0 || w == 0 {
            return Err(CoreError::Config(format!(
                "U-Net depth {} needs extents divisible by {f}, got {h}x{w}",
                self.depth
            )));
        }
        Ok(())
    }

    fn level_channels(&self, l: usize) -> usize {
        self.base_channels << l
    }
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    up: Conv2d,
    merge: Conv2d,
}

#[derive(Clone, Debug)]
pub struct UNetBackbone {
    pub cfg: UNetBackboneConfig,
    encoder: Vec<(Conv2d, Conv2d)>,
    bottleneck: (Conv2d, Conv2d),
    decoder: Vec<DecoderLevel>,
}

impl UNetBackbone {
    pub fn new(store: &mut ParamStore, rng: &mut SeedRng, name: &str, cfg: &UNetBackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let mut encoder = Vec::new();
        let mut c = cfg.in_channels;
        for l in 0..cfg.depth {
            let out = cfg.level_channels(l);
            let a = Conv2d::new(store, rng, &format!("{name}.enc{l}.a"), c, out, 3, 1, 1)?;
            let b = Conv2d::new(store, rng, &format!("{name}.enc{l}.b"), out, out, 3, 1, 1)?;
            encoder.push((a, b));
            c = out;
        }
        let bott = cfg.level_channels(cfg.depth);
        let bottleneck = (
            Conv2d::new(store, rng, &format!("{name}.bottleneck.a"), c, bott, 3, 1, 1)?,
            Conv2d::new(store, rng, &format!("{name}.bottleneck.b"), bott, bott, 3, 1, 1)?,
        );
        c = bott;
        let mut decoder = Vec::new();
        for l in (0..cfg.depth).rev() {
            let out = cfg.level_channels(l);
            let up = Conv2d::new(store, rng, &format!("{name}.dec{l}.up"), c, out, 3, 1, 1)?;
            let merge_in = if cfg.skip { 2 * out } else { out };
            let merge = Conv2d::new(store, rng, &format!("{name}.dec{l}.merge"), merge_in, out, 3, 1, 1)?;
            decoder.push(DecoderLevel { up, merge });
            c = out;
        }
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            bottleneck,
            decoder,
        })
    }

    fn conv_relu(g: &mut Graph, store: &ParamStore, conv: &Conv2d, x: Var) -> Result<Var> {
        let y = conv.forward(g, store, x)?;
        Ok(g.relu(y)?)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<FeatureMap> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.cfg.in_channels {
            return Err(CoreError::Config(format!(
                "U-Net expects B×{}×H×W, got {s:?}",
                self.cfg.in_channels
            )));
        }
        self.cfg.check_extent(s[2], s[3])?;
        let mut skips = Vec::with_capacity(self.cfg.depth);
        let mut y = x;
        for (a, b) in &self.encoder {
            y = Self::conv_relu(g, store, a, y)?;
            y = Self::conv_relu(g, store, b, y)?;
            skips.push(y);
            y = g.max_pool2(y)?;
        }
        y = Self::conv_relu(g, store, &self.bottleneck.0, y)?;
        y = Self::conv_relu(g, store, &self.bottleneck.1, y)?;
        for level in &self.decoder {
            let skip = skips.pop().expect("one skip per level");
            y = g.upsample2(y)?;
            y = Self::conv_relu(g, store, &level.up, y)?;
            if self.cfg.skip {
                debug_assert_eq!(g.shape(y)[2..], g.shape(skip)[2..]);
                y = g.concat(&[y, skip], 1)?;
            }
            y = Self::conv_relu(g, store, &level.merge, y)?;
        }
        Ok(FeatureMap {
            var: y,
            source: MapSource::Unet,
        })
    }
}
