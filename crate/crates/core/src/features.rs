//! Handcrafted texture statistics: GLCM (Haralick subset) and LBP histograms.

use std::f64::consts::PI;
use std::io::Write;

use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(CoreError::Feature(format!(
                "{height}x{width} image with {} pixels",
                pixels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(CoreError::Feature(format!("pixel {p} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.pixels[r * self.width + c]
    }
}

/// Converts interleaved `H×W×C` data to gray. Three channels use the
/// 0.299/0.587/0.114 luma weights.
pub fn to_grayscale(height: usize, width: usize, channels: usize, data: &[f64]) -> Result<GrayImage> {
    if data.len() != height * width * channels {
        return Err(CoreError::Feature(format!(
            "{height}x{width}x{channels} image with {} values",
            data.len()
        )));
    }
    let pixels = match channels {
        1 => data.to_vec(),
        3 => data
            .chunks_exact(3)
            .map(|p| (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).clamp(0.0, 1.0))
            .collect(),
        c => return Err(CoreError::Feature(format!("{c} channels; expected 1 or 3"))),
    };
    GrayImage::new(height, width, pixels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GlcmAngle {
    Deg0,
    Deg45,
    Deg90,
    Deg135,
}

impl GlcmAngle {
    pub const ALL: [GlcmAngle; 4] = [Self::Deg0, Self::Deg45, Self::Deg90, Self::Deg135];

    pub fn degrees(self) -> u32 {
        match self {
            Self::Deg0 => 0,
            Self::Deg45 => 45,
            Self::Deg90 => 90,
            Self::Deg135 => 135,
        }
    }

    pub fn from_degrees(deg: u32) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.degrees() == deg)
            .ok_or_else(|| CoreError::Config(format!("GLCM angle {deg}; expected 0, 45, 90 or 135")))
    }

    /// Row/column displacement. Rows grow downward, so 90° points up.
    pub fn offset(self, d: usize) -> (isize, isize) {
        let d = d as isize;
        match self {
            Self::Deg0 => (0, d),
            Self::Deg45 => (-d, d),
            Self::Deg90 => (-d, 0),
            Self::Deg135 => (-d, -d),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlcmConfig {
    pub levels: usize,
    pub distances: Vec<usize>,
    pub angles: Vec<GlcmAngle>,
    pub symmetric: bool,
}

impl Default for GlcmConfig {
    fn default() -> Self {
        Self {
            levels: 16,
            distances: vec![1],
            angles: GlcmAngle::ALL.to_vec(),
            symmetric: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LbpMode {
    Full,
    Uniform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureConfig {
    pub glcm: GlcmConfig,
    pub lbp_points: usize,
    pub lbp_radius: f64,
    pub lbp_mode: LbpMode,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            glcm: GlcmConfig::default(),
            lbp_points: 8,
            lbp_radius: 1.0,
            lbp_mode: LbpMode::Uniform,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.glcm.levels < 2 {
            return Err(CoreError::Config("GLCM levels must be >= 2".into()));
        }
        if self.glcm.distances.is_empty() || self.glcm.distances.contains(&0) {
            return Err(CoreError::Config("GLCM distances must be non-empty and >= 1".into()));
        }
        if self.glcm.angles.is_empty() {
            return Err(CoreError::Config("GLCM needs at least one angle".into()));
        }
        if !(4..=24).contains(&self.lbp_points) {
            return Err(CoreError::Config("LBP points must be in 4..=24".into()));
        }
        if !(self.lbp_radius > 0.0) || !self.lbp_radius.is_finite() {
            return Err(CoreError::Config("LBP radius must be positive".into()));
        }
        Ok(())
    }

    pub fn lbp_bins(&self) -> usize {
        match self.lbp_mode {
            LbpMode::Full => 1 << self.lbp_points,
            LbpMode::Uniform => self.lbp_points + 2,
        }
    }

    pub fn raw_dim(&self) -> usize {
        4 * self.glcm.distances.len() * self.glcm.angles.len() + self.lbp_bins()
    }
}

pub const GLCM_STATS: [&str; 4] = ["contrast", "correlation", "energy", "homogeneity"];

/// Slot names in vector order: distance, then angle, then statistic, then LBP bins.
pub fn feature_layout(cfg: &FeatureConfig) -> Vec<String> {
    let mut out = Vec::with_capacity(cfg.raw_dim());
    for d in &cfg.glcm.distances {
        for a in &cfg.glcm.angles {
            for s in GLCM_STATS {
                out.push(format!("glcm_{s}_d{d}_a{}", a.degrees()));
            }
        }
    }
    out.extend((0..cfg.lbp_bins()).map(|k| format!("lbp_bin_{k}")));
    out
}

pub fn quantize(g: f64, levels: usize) -> usize {
    ((g * levels as f64).floor().max(0.0) as usize).min(levels - 1)
}

/// Raw co-occurrence counts, `levels × levels`, row-major.
pub fn glcm_counts(
    img: &GrayImage,
    distance: usize,
    angle: GlcmAngle,
    levels: usize,
    symmetric: bool,
) -> Result<Vec<u64>> {
    if levels < 2 || distance == 0 {
        return Err(CoreError::Feature(format!(
            "GLCM levels {levels}, distance {distance}"
        )));
    }
    let (dr, dc) = angle.offset(distance);
    let (h, w) = (img.height as isize, img.width as isize);
    let q: Vec<usize> = img.pixels.iter().map(|&g| quantize(g, levels)).collect();
    let mut counts = vec![0u64; levels * levels];
    let mut pairs = 0u64;
    for r in 0..h {
        let r2 = r + dr;
        if r2 < 0 || r2 >= h {
            continue;
        }
        for c in 0..w {
            let c2 = c + dc;
            if c2 < 0 || c2 >= w {
                continue;
            }
            let i = q[(r * w + c) as usize];
            let j = q[(r2 * w + c2) as usize];
            counts[i * levels + j] += 1;
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Err(CoreError::Feature(format!(
            "{}x{} image has no pixel pairs at distance {distance}, angle {}",
            img.height,
            img.width,
            angle.degrees()
        )));
    }
    if symmetric {
        let orig = counts.clone();
        for i in 0..levels {
            for j in 0..levels {
                counts[i * levels + j] += orig[j * levels + i];
            }
        }
    }
    Ok(counts)
}

/// Normalized co-occurrence matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Glcm {
    pub levels: usize,
    pub p: Vec<f64>,
}

impl Glcm {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.p[i * self.levels + j]
    }
}

pub fn compute_glcm(
    img: &GrayImage,
    distance: usize,
    angle: GlcmAngle,
    levels: usize,
    symmetric: bool,
) -> Result<Glcm> {
    let counts = glcm_counts(img, distance, angle, levels, symmetric)?;
    let total: u64 = counts.iter().sum();
    let p = counts.iter().map(|&c| c as f64 / total as f64).collect();
    Ok(Glcm { levels, p })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlcmStats {
    pub contrast: f64,
    pub correlation: f64,
    pub energy: f64,
    pub homogeneity: f64,
}

impl GlcmStats {
    pub fn as_array(&self) -> [f64; 4] {
        [self.contrast, self.correlation, self.energy, self.homogeneity]
    }
}

pub fn glcm_features(glcm: &Glcm) -> Result<GlcmStats> {
    let n = glcm.levels;
    if glcm.p.len() != n * n {
        return Err(CoreError::Feature(format!("GLCM of {} cells for {n} levels", glcm.p.len())));
    }
    let total: f64 = glcm.p.iter().sum();
    if (total - 1.0).abs() > 1e-9 || glcm.p.iter().any(|&v| v < 0.0) {
        return Err(CoreError::Feature(format!("GLCM not normalized (sum {total})")));
    }
    let (mut contrast, mut energy, mut homogeneity, mut mu_i, mut mu_j) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let p = glcm.at(i, j);
            let d = i as f64 - j as f64;
            contrast += d * d * p;
            energy += p * p;
            homogeneity += p / (1.0 + d.abs());
            mu_i += i as f64 * p;
            mu_j += j as f64 * p;
        }
    }
    let (mut var_i, mut var_j, mut cov) = (0.0, 0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let p = glcm.at(i, j);
            let (di, dj) = (i as f64 - mu_i, j as f64 - mu_j);
            var_i += di * di * p;
            var_j += dj * dj * p;
            cov += di * dj * p;
        }
    }
    let denom = var_i.sqrt() * var_j.sqrt();
    let correlation = if denom < 1e-12 { 0.0 } else { cov / denom };
    Ok(GlcmStats {
        contrast,
        correlation,
        energy,
        homogeneity,
    })
}

/// LBP codes for interior pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct LbpCodes {
    pub height: usize,
    pub width: usize,
    pub points: usize,
    pub codes: Vec<u32>,
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

/// Neighbor offsets `(dy, dx)` for `P` points on a circle of radius `R`,
/// starting to the right and proceeding counter-clockwise.
pub fn lbp_offsets(points: usize, radius: f64) -> Vec<(f64, f64)> {
    (0..points)
        .map(|k| {
            let theta = 2.0 * PI * k as f64 / points as f64;
            (snap(-radius * theta.sin()), snap(radius * theta.cos()))
        })
        .collect()
}

fn bilinear(img: &GrayImage, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let (r0, c0) = (y0 as usize, x0 as usize);
    let r1 = if fy > 0.0 { r0 + 1 } else { r0 };
    let c1 = if fx > 0.0 { c0 + 1 } else { c0 };
    let (a, b) = (img.get(r0, c0), img.get(r0, c1));
    let (c, d) = (img.get(r1, c0), img.get(r1, c1));
    let top = a + (b - a) * fx;
    let bottom = c + (d - c) * fx;
    top + (bottom - top) * fy
}

pub fn compute_lbp(img: &GrayImage, points: usize, radius: f64) -> Result<LbpCodes> {
    if !(4..=24).contains(&points) || !(radius > 0.0) {
        return Err(CoreError::Feature(format!("LBP with P={points}, R={radius}")));
    }
    let margin = radius.ceil() as usize;
    if img.height < 2 * margin + 1 || img.width < 2 * margin + 1 {
        return Err(CoreError::Feature(format!(
            "{}x{} image too small for LBP radius {radius}",
            img.height, img.width
        )));
    }
    let offsets = lbp_offsets(points, radius);
    let (h, w) = (img.height - 2 * margin, img.width - 2 * margin);
    let mut codes = Vec::with_capacity(h * w);
    for r in margin..margin + h {
        for c in margin..margin + w {
            let center = img.get(r, c);
            let mut code = 0u32;
            for (k, &(dy, dx)) in offsets.iter().enumerate() {
                if bilinear(img, r as f64 + dy, c as f64 + dx) >= center {
                    code |= 1 << k;
                }
            }
            codes.push(code);
        }
    }
    Ok(LbpCodes {
        height: h,
        width: w,
        points,
        codes,
    })
}

/// Number of 0/1 changes walking once around the circular code.
pub fn transitions(code: u32, points: usize) -> u32 {
    let mask = if points == 32 { u32::MAX } else { (1u32 << points) - 1 };
    let code = code & mask;
    let rot = (code >> 1) | ((code & 1) << (points - 1));
    (code ^ rot).count_ones()
}

/// Uniform-mode bin: popcount for patterns with at most two transitions,
/// otherwise the catch-all bin `P + 1`.
pub fn uniform_bin(code: u32, points: usize) -> usize {
    if transitions(code, points) <= 2 {
        code.count_ones() as usize
    } else {
        points + 1
    }
}

pub fn lbp_histogram(codes: &LbpCodes, mode: LbpMode) -> Result<Vec<f64>> {
    if codes.codes.is_empty() {
        return Err(CoreError::Feature("empty LBP code image".into()));
    }
    let p = codes.points;
    let bins = match mode {
        LbpMode::Full => 1usize << p,
        LbpMode::Uniform => p + 2,
    };
    let mut counts = vec![0u64; bins];
    for &code in &codes.codes {
        if (code as u64) >= (1u64 << p) {
            return Err(CoreError::Feature(format!("LBP code {code} exceeds {p} bits")));
        }
        let b = match mode {
            LbpMode::Full => code as usize,
            LbpMode::Uniform => uniform_bin(code, p),
        };
        counts[b] += 1;
    }
    let n = codes.codes.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / n).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawFeatureVector {
    pub values: Vec<f64>,
    pub layout: Vec<String>,
}

pub fn extract_raw_features(img: &GrayImage, cfg: &FeatureConfig) -> Result<RawFeatureVector> {
    cfg.validate()?;
    let g = &cfg.glcm;
    let mut values = Vec::with_capacity(cfg.raw_dim());
    for &d in &g.distances {
        for &a in &g.angles {
            let m = compute_glcm(img, d, a, g.levels, g.symmetric)?;
            values.extend(glcm_features(&m)?.as_array());
        }
    }
    let codes = compute_lbp(img, cfg.lbp_points, cfg.lbp_radius)?;
    values.extend(lbp_histogram(&codes, cfg.lbp_mode)?);
    Ok(RawFeatureVector {
        values,
        layout: feature_layout(cfg),
    })
}

/// Rescales raw features into a comparable range for the network: contrast
/// slots are divided by `(levels - 1)²`, everything else already lies in
/// `[-1, 1]`.
pub fn network_inputs(raw: &RawFeatureVector, cfg: &FeatureConfig) -> Vec<f64> {
    let scale = ((cfg.glcm.levels - 1) as f64).powi(2);
    raw.values
        .iter()
        .zip(&raw.layout)
        .map(|(&v, name)| if name.starts_with("glcm_contrast") { v / scale } else { v })
        .collect()
}

/// Writes feature rows as CSV with a header of slot names.
pub fn write_features_csv<W: Write>(out: W, rows: &[RawFeatureVector]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let to_err = |e: csv::Error| CoreError::Data(format!("feature CSV: {e}"));
    if let Some(first) = rows.first() {
        w.write_record(&first.layout).map_err(to_err)?;
        for row in rows {
            if row.layout != first.layout {
                return Err(CoreError::Feature("rows with differing layouts".into()));
            }
            w.write_record(row.values.iter().map(|v| format!("{v:?}"))).map_err(to_err)?;
        }
    }
    w.flush().map_err(|e| CoreError::Data(format!("feature CSV: {e}")))?;
    Ok(())
}
