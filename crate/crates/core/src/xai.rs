//! Explainability artifacts: Δ-maps, spatial attention maps, SE scores,
//! cross-modal weights. Heatmaps are written as 8-bit PGM plus a raw CSV that
//! round-trips exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{io_err, CoreError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows * cols != values.len() || rows == 0 || cols == 0 {
            return Err(CoreError::Data(format!("{rows}x{cols} heatmap with {} values", values.len())));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedScores {
    pub names: Vec<String>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledMatrix {
    pub labels: Vec<String>,
    pub matrix: Heatmap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub class_id: usize,
    pub class_name: String,
    pub probability: f64,
}

/// Per-image explanation captured during a forward pass. Fields for disabled
/// paths stay `None`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct XaiBundle {
    pub dense_delta_fwd: Option<Heatmap>,
    pub dense_delta_bwd: Option<Heatmap>,
    pub unet_delta_fwd: Option<Heatmap>,
    pub unet_delta_bwd: Option<Heatmap>,
    pub dense_spatial: Option<Heatmap>,
    pub unet_spatial: Option<Heatmap>,
    pub se_scores: Option<NamedScores>,
    pub cma_weights: Option<LabeledMatrix>,
    /// NAF mixing weights, one row per iteration.
    pub alpha_trace: Option<Heatmap>,
    pub prediction: Option<Prediction>,
}

impl XaiBundle {
    /// Named heatmap artifacts present in this bundle, in export order.
    pub fn heatmaps(&self) -> Vec<(&'static str, &Heatmap)> {
        let fields = [
            ("dense_delta_fwd", &self.dense_delta_fwd),
            ("dense_delta_bwd", &self.dense_delta_bwd),
            ("unet_delta_fwd", &self.unet_delta_fwd),
            ("unet_delta_bwd", &self.unet_delta_bwd),
            ("dense_spatial", &self.dense_spatial),
            ("unet_spatial", &self.unet_spatial),
        ];
        fields
            .into_iter()
            .filter_map(|(n, h)| h.as_ref().map(|h| (n, h)))
            .collect()
    }

    /// Number of visual artifacts: heatmaps, SE scores, cross-modal weights.
    pub fn artifact_count(&self) -> usize {
        self.heatmaps().len() + self.se_scores.is_some() as usize + self.cma_weights.is_some() as usize
    }
}

/// Min-max normalizes to 0..=255 with round-half-up. Constant maps render as
/// all zeros.
pub fn render_heatmap(map: &Heatmap) -> Result<Vec<u8>> {
    if map.values.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::Data("cannot render a non-finite heatmap".into()));
    }
    let lo = map.values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Ok(vec![0; map.values.len()]);
    }
    let span = hi - lo;
    Ok(map
        .values
        .iter()
        .map(|&v| (255.0 * ((v - lo) / span) + 0.5).floor().clamp(0.0, 255.0) as u8)
        .collect())
}

pub fn pgm_bytes(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    fs::write(path, pgm_bytes(width, height, pixels)).map_err(io_err(path))
}

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn parse_f64(s: &str, path: &Path) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| CoreError::Data(format!("{}: bad number {s:?}", path.display())))
}

pub fn heatmap_csv(map: &Heatmap) -> String {
    let mut s = String::new();
    for r in 0..map.rows {
        let row: Vec<String> = (0..map.cols).map(|c| fmt_f64(map.at(r, c))).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

pub fn read_heatmap_csv(path: &Path) -> Result<Heatmap> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut values = Vec::new();
    let mut rows = 0;
    let mut cols = None;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let row = line.split(',').map(|s| parse_f64(s, path)).collect::<Result<Vec<_>>>()?;
        if *cols.get_or_insert(row.len()) != row.len() {
            return Err(CoreError::Data(format!("{}: ragged rows", path.display())));
        }
        values.extend(row);
        rows += 1;
    }
    Heatmap::new(rows, cols.unwrap_or(0), values)
}

pub fn read_scores_csv(path: &Path) -> Result<NamedScores> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut names = Vec::new();
    let mut values = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
        let (n, v) = line
            .split_once(',')
            .ok_or_else(|| CoreError::Data(format!("{}: bad row {line:?}", path.display())))?;
        names.push(n.to_string());
        values.push(parse_f64(v, path)?);
    }
    Ok(NamedScores { names, values })
}

pub fn read_labeled_csv(path: &Path) -> Result<LabeledMatrix> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines().filter(|l| !l.is_empty());
    let header = lines
        .next()
        .ok_or_else(|| CoreError::Data(format!("{}: empty file", path.display())))?;
    let labels: Vec<String> = header.split(',').skip(1).map(str::to_string).collect();
    let mut values = Vec::new();
    let mut rows = 0;
    for line in lines {
        let row = line.split(',').skip(1).map(|s| parse_f64(s, path)).collect::<Result<Vec<_>>>()?;
        values.extend(row);
        rows += 1;
    }
    Ok(LabeledMatrix {
        matrix: Heatmap::new(rows, labels.len(), values)?,
        labels,
    })
}

/// Parses `name: path` manifest lines into pairs, in file order.
pub fn read_manifest(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split_once(": ")
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .ok_or_else(|| CoreError::Data(format!("{}: bad line {l:?}", path.display())))
        })
        .collect()
}

/// Writes every present artifact into `dir` and returns the written paths.
pub fn export_bundle(bundle: &XaiBundle, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();
    let mut manifest = String::new();
    let mut put = |name: &str, file: String, bytes: Vec<u8>| -> Result<()> {
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(io_err(&path))?;
        writeln!(manifest, "{name}: {file}").expect("string write");
        written.push(path);
        Ok(())
    };
    for (name, map) in bundle.heatmaps() {
        put(name, format!("{name}.pgm"), pgm_bytes(map.cols, map.rows, &render_heatmap(map)?))?;
        put(name, format!("{name}.csv"), heatmap_csv(map).into_bytes())?;
    }
    if let Some(se) = &bundle.se_scores {
        let mut s = String::from("slot,score\n");
        for (n, v) in se.names.iter().zip(&se.values) {
            writeln!(s, "{n},{}", fmt_f64(*v)).expect("string write");
        }
        put("se_scores", "se_scores.csv".into(), s.into_bytes())?;
    }
    if let Some(cma) = &bundle.cma_weights {
        let mut s = format!("path,{}\n", cma.labels.join(","));
        for (r, label) in cma.labels.iter().enumerate() {
            let row: Vec<String> = (0..cma.matrix.cols).map(|c| fmt_f64(cma.matrix.at(r, c))).collect();
            writeln!(s, "{label},{}", row.join(",")).expect("string write");
        }
        put("cma_weights", "cma_weights.csv".into(), s.into_bytes())?;
        let m = &cma.matrix;
        put("cma_weights", "cma_weights.pgm".into(), pgm_bytes(m.cols, m.rows, &render_heatmap(m)?))?;
    }
    if let Some(alpha) = &bundle.alpha_trace {
        let mut s = String::from("step");
        for j in 0..alpha.cols {
            write!(s, ",prim{j}").expect("string write");
        }
        s.push('\n');
        for r in 0..alpha.rows {
            let row: Vec<String> = (0..alpha.cols).map(|c| fmt_f64(alpha.at(r, c))).collect();
            writeln!(s, "{r},{}", row.join(",")).expect("string write");
        }
        put("alpha_trace", "alpha_trace.csv".into(), s.into_bytes())?;
    }
    if let Some(p) = &bundle.prediction {
        writeln!(manifest, "prediction: {} {}", p.class_name, fmt_f64(p.probability)).expect("string write");
    }
    let mpath = dir.join("manifest.txt");
    fs::write(&mpath, manifest).map_err(io_err(&mpath))?;
    written.push(mpath);
    Ok(written)
}
