//! Image-folder datasets, preprocessing, and the synthetic texture generator.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use evmf_tensor::{SeedRng, Tensor};

use crate::error::{io_err, CoreError, Result};
use crate::features::{extract_raw_features, network_inputs, to_grayscale};
use crate::model::{ModelConfig, Sample};
use crate::xai::write_pgm;

/// Interleaved `H×W×C` pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
}

pub fn load_image(path: &Path) -> Result<RawImage> {
    let img = image::open(path).map_err(|e| CoreError::Image {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    let (channels, bytes) = if img.color().has_color() {
        (3, img.to_rgb8().into_raw())
    } else {
        (1, img.to_luma8().into_raw())
    };
    Ok(RawImage {
        height,
        width,
        channels,
        data: bytes.into_iter().map(|b| b as f64 / 255.0).collect(),
    })
}

/// Bilinear resize of one `H×W` plane using pixel-center alignment.
pub fn resize_plane(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    if (h, w) == (oh, ow) {
        return src.to_vec();
    }
    let coord = |o: usize, n_in: usize, n_out: usize| {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(n_in - 1), s - i0 as f64)
    };
    let mut out = Vec::with_capacity(oh * ow);
    for r in 0..oh {
        let (r0, r1, fy) = coord(r, h, oh);
        for c in 0..ow {
            let (c0, c1, fx) = coord(c, w, ow);
            let top = src[r0 * w + c0] + (src[r0 * w + c1] - src[r0 * w + c0]) * fx;
            let bot = src[r1 * w + c0] + (src[r1 * w + c1] - src[r1 * w + c0]) * fx;
            out.push(top + (bot - top) * fy);
        }
    }
    out
}

/// Handcrafted features come from the full-resolution grayscale image; the
/// network input is resized to the configured extents and channel count.
pub fn prepare_sample(img: &RawImage, label: usize, name: &str, cfg: &ModelConfig) -> Result<Sample> {
    let gray = to_grayscale(img.height, img.width, img.channels, &img.data)?;
    let raw = extract_raw_features(&gray, &cfg.features)?;
    let features = network_inputs(&raw, &cfg.features);
    let (oh, ow) = cfg.image_size;
    let planes: Vec<Vec<f64>> = match (cfg.in_channels, img.channels) {
        (1, _) => vec![resize_plane(gray.pixels(), img.height, img.width, oh, ow)],
        (3, 3) => (0..3)
            .map(|c| {
                let plane: Vec<f64> = img.data.iter().skip(c).step_by(3).copied().collect();
                resize_plane(&plane, img.height, img.width, oh, ow)
            })
            .collect(),
        (3, 1) => vec![resize_plane(gray.pixels(), img.height, img.width, oh, ow); 3],
        (c, _) => return Err(CoreError::Config(format!("in_channels {c}; expected 1 or 3"))),
    };
    Ok(Sample {
        name: name.to_string(),
        image: Tensor::new(vec![cfg.in_channels, oh, ow], planes.concat())?,
        features,
        label,
    })
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()).map_err(io_err(dir)))
        .collect::<Result<_>>()?;
    v.sort();
    Ok(v)
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("pgm" | "png")
    )
}

/// One subdirectory per class, ordered lexicographically; images are PGM or PNG.
pub fn load_dataset(root: &Path, cfg: &ModelConfig) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(CoreError::Data(format!("{} is not a directory", root.display())));
    }
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.len() < 2 {
        return Err(CoreError::Data(format!("{} needs at least two class directories", root.display())));
    }
    let mut class_names = Vec::new();
    let mut samples = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        class_names.push(dir.file_name().unwrap_or_default().to_string_lossy().into_owned());
        let files: Vec<PathBuf> = sorted_entries(dir)?.into_iter().filter(|p| is_image(p)).collect();
        if files.is_empty() {
            return Err(CoreError::Data(format!("{} contains no images", dir.display())));
        }
        for f in files {
            let img = load_image(&f)?;
            let rel = f.strip_prefix(root).unwrap_or(&f).to_string_lossy().into_owned();
            samples.push(prepare_sample(&img, label, &rel, cfg)?);
        }
    }
    Ok(Dataset { class_names, samples })
}

pub const SYNTH_CLASSES: [&str; 3] = ["blobs", "checkers", "stripes"];

/// Renders one synthetic texture of the given class in `[0, 1]`.
pub fn synth_texture(class: usize, size: usize, rng: &mut SeedRng) -> Vec<f64> {
    let n = size as f64;
    let mut px = vec![0.0; size * size];
    match class {
        0 => {
            let count = 3 + rng.below(4);
            let blobs: Vec<(f64, f64, f64)> = (0..count)
                .map(|_| (rng.uniform(0.0, n), rng.uniform(0.0, n), rng.uniform(0.08, 0.2) * n))
                .collect();
            for r in 0..size {
                for c in 0..size {
                    let v: f64 = blobs
                        .iter()
                        .map(|&(y, x, s)| (-((r as f64 - y).powi(2) + (c as f64 - x).powi(2)) / (2.0 * s * s)).exp())
                        .sum();
                    px[r * size + c] = v.min(1.0);
                }
            }
        }
        1 => {
            let cell = 2 + rng.below(5);
            let (oy, ox) = (rng.below(cell), rng.below(cell));
            let (lo, hi) = (rng.uniform(0.0, 0.3), rng.uniform(0.7, 1.0));
            for r in 0..size {
                for c in 0..size {
                    let on = ((r + oy) / cell + (c + ox) / cell) % 2 == 0;
                    px[r * size + c] = if on { hi } else { lo };
                }
            }
        }
        _ => {
            let theta = rng.uniform(0.0, PI);
            let freq = rng.uniform(2.0, 6.0);
            let phase = rng.uniform(0.0, 2.0 * PI);
            let (ct, st) = (theta.cos(), theta.sin());
            for r in 0..size {
                for c in 0..size {
                    let t = (c as f64 * ct + r as f64 * st) / n;
                    px[r * size + c] = 0.5 + 0.5 * (2.0 * PI * freq * t + phase).sin();
                }
            }
        }
    }
    for p in &mut px {
        *p = (*p + rng.uniform(-0.05, 0.05)).clamp(0.0, 1.0);
    }
    px
}

/// Writes `per_class` seeded 8-bit PGM textures per class under `root`.
pub fn generate_synthetic(root: &Path, per_class: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>> {
    if size < 8 || per_class == 0 {
        return Err(CoreError::Config("synthetic set needs size >= 8 and >= 1 image per class".into()));
    }
    let mut rng = SeedRng::new(seed);
    let mut written = Vec::new();
    for (ci, name) in SYNTH_CLASSES.iter().enumerate() {
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let mut crng = rng.fork(name);
        for i in 0..per_class {
            let px = synth_texture(ci, size, &mut crng);
            let bytes: Vec<u8> = px.iter().map(|&v| (v * 255.0).round() as u8).collect();
            let path = dir.join(format!("{name}_{i:03}.pgm"));
            write_pgm(&path, size, size, &bytes)?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_identity_and_constant() {
        let src: Vec<f64> = (0..16).map(|i| i as f64).collect();
        assert_eq!(resize_plane(&src, 4, 4, 4, 4), src);
        let flat = vec![0.25; 9];
        assert!(resize_plane(&flat, 3, 3, 7, 5).iter().all(|&v| v == 0.25));
        let down = resize_plane(&src, 4, 4, 2, 2);
        assert_eq!(down, vec![2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn synth_values_in_range_and_seeded() {
        for c in 0..3 {
            let a = synth_texture(c, 16, &mut SeedRng::new(9));
            let b = synth_texture(c, 16, &mut SeedRng::new(9));
            assert_eq!(a, b);
            assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn prepare_rgb_uses_luma() {
        let img = RawImage {
            height: 8,
            width: 8,
            channels: 3,
            data: [1.0, 0.0, 0.0].repeat(64),
        };
        let cfg = ModelConfig {
            image_size: (4, 4),
            ..ModelConfig::default()
        };
        let s = prepare_sample(&img, 1, "x", &cfg).unwrap();
        assert_eq!(s.image.shape(), &[1, 4, 4]);
        assert!(s.image.data().iter().all(|&v| v == 0.299));
        assert_eq!(s.features.len(), 26);
    }
}
