//! Oracles and criterion checks shared by the core integration tests and the
//! workspace acceptance suite.

#![allow(dead_code)]

use evmf_core::attention::MultiHeadAttention;
use evmf_core::features::{
    compute_glcm, compute_lbp, glcm_counts, glcm_features, lbp_histogram, GlcmAngle, GrayImage, LbpMode,
};
use evmf_core::model::{apply_variant, Model, Sample};
use evmf_core::verify::minimal_model_config;
use evmf_tensor::{Graph, ParamStore, Precision, SeedRng, Tensor};

pub struct Outcome {
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

pub fn uniform_vec(rng: &mut SeedRng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.uniform(lo, hi)).collect()
}

pub fn random_image(rng: &mut SeedRng, h: usize, w: usize) -> GrayImage {
    GrayImage::new(h, w, uniform_vec(rng, h * w, 0.0, 1.0)).unwrap()
}

// ---------------------------------------------------------------- scan

/// Inputs of one raw scan: `u`, `delta` are `n×d`; `a` is `d×s`; `b`, `c` are `n×s`.
#[derive(Clone, Debug)]
pub struct ScanCase {
    pub n: usize,
    pub d: usize,
    pub s: usize,
    pub u: Vec<f64>,
    pub delta: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub skip: Vec<f64>,
}

impl ScanCase {
    pub fn random(rng: &mut SeedRng) -> Self {
        let n = 1 + rng.below(32);
        let d = 1 + rng.below(8);
        let s = 1 + rng.below(8);
        Self {
            n,
            d,
            s,
            u: uniform_vec(rng, n * d, -2.0, 2.0),
            delta: uniform_vec(rng, n * d, 0.001, 2.0),
            a: uniform_vec(rng, d * s, -4.0, -0.05),
            b: uniform_vec(rng, n * s, -1.5, 1.5),
            c: uniform_vec(rng, n * s, -1.5, 1.5),
            skip: uniform_vec(rng, d, -1.0, 1.0),
        }
    }

    /// Token order reversed for the token-indexed buffers.
    pub fn reversed(&self) -> Self {
        let flip = |v: &[f64], w: usize| -> Vec<f64> { v.chunks(w).rev().flatten().copied().collect() };
        Self {
            u: flip(&self.u, self.d),
            delta: flip(&self.delta, self.d),
            b: flip(&self.b, self.s),
            c: flip(&self.c, self.s),
            ..self.clone()
        }
    }

    pub fn run(&self, reverse: bool) -> Vec<f64> {
        let mut g = Graph::new(Precision::F64);
        let mut k = |data: &[f64], shape: Vec<usize>| g.constant(Tensor::new(shape, data.to_vec()).unwrap()).unwrap();
        let (n, d, s) = (self.n, self.d, self.s);
        let u = k(&self.u, vec![n, d]);
        let dl = k(&self.delta, vec![n, d]);
        let a = k(&self.a, vec![d, s]);
        let b = k(&self.b, vec![n, s]);
        let c = k(&self.c, vec![n, s]);
        let sk = k(&self.skip, vec![d]);
        let y = g.selective_scan(u, dl, a, b, c, sk, reverse).unwrap();
        g.data(y).to_vec()
    }
}

/// Step-by-step recurrence, one channel at a time.
pub fn naive_scan(case: &ScanCase) -> Vec<f64> {
    let (n, d, s) = (case.n, case.d, case.s);
    let mut y = vec![0.0; n * d];
    for ch in 0..d {
        let mut h = vec![0.0; s];
        for k in 0..n {
            let dt = case.delta[k * d + ch];
            let x = case.u[k * d + ch];
            let mut out = 0.0;
            for j in 0..s {
                let abar = (dt * case.a[ch * s + j]).exp();
                let bbar = dt * case.b[k * s + j];
                h[j] = abar * h[j] + bbar * x;
                out += case.c[k * s + j] * h[j];
            }
            y[k * d + ch] = out + case.skip[ch] * x;
        }
    }
    y
}

pub fn criterion_scan_oracle(cases: usize) -> Outcome {
    let mut rng = SeedRng::new(2024);
    let mut worst: f64 = 0.0;
    for i in 0..cases {
        let case = ScanCase::random(&mut rng);
        let got = case.run(false);
        let want = naive_scan(&case);
        let diff = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(diff);
        let back = case.run(true);
        let mut rfr = case.reversed().run(false);
        rfr = rfr.chunks(case.d).rev().flatten().copied().collect();
        if back != rfr {
            return Outcome::new(false, format!("case {i}: backward scan differs from reverse-forward-reverse"));
        }
    }
    Outcome::new(
        worst < 1e-10,
        format!("{cases} cases, max abs diff vs unrolled recurrence {worst:.2e}; backward == reverse-forward-reverse"),
    )
}

// ---------------------------------------------------------------- softmax surfaces

fn check_rows(data: &[f64], cols: usize, what: &str, worst: &mut f64) -> Result<(), String> {
    for (r, row) in data.chunks(cols).enumerate() {
        if let Some(v) = row.iter().find(|&&v| !(v > 0.0)) {
            return Err(format!("{what} row {r} has non-positive entry {v}"));
        }
        let dev = (row.iter().sum::<f64>() - 1.0).abs();
        *worst = worst.max(dev);
        if dev > 1e-9 {
            return Err(format!("{what} row {r} sums to 1{dev:+e}"));
        }
    }
    Ok(())
}

/// Attention weights, cross-modal weight rows, and every NAF mixing row over
/// `forwards` randomized forward passes.
pub fn criterion_stochasticity(forwards: usize) -> Outcome {
    let mut rng = SeedRng::new(77);
    let mut worst = 0.0;
    let mut model: Option<Model> = None;
    let variants = ["DUHF", "NAF-Only", "CMA-Only"];
    let mut counts = [0usize; 3];
    for i in 0..forwards {
        // Stand-alone attention with random geometry.
        let heads = 1 + rng.below(4);
        let dm = heads * (1 + rng.below(4));
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, &mut rng, "mha", dm, heads).unwrap();
        let (nq, nk) = (1 + rng.below(6), 1 + rng.below(6));
        let mut g = Graph::new(Precision::F64);
        let scale = rng.uniform(0.1, 10.0);
        let q = g.constant(Tensor::new(vec![nq, dm], uniform_vec(&mut rng, nq * dm, -scale, scale)).unwrap()).unwrap();
        let kv = g.constant(Tensor::new(vec![nk, dm], uniform_vec(&mut rng, nk * dm, -scale, scale)).unwrap()).unwrap();
        let (_, w) = mha.forward(&mut g, &store, q, kv, kv).unwrap();
        if let Err(e) = check_rows(g.data(w), nk, "attention", &mut worst) {
            return Outcome::new(false, format!("forward {i}: {e}"));
        }
        counts[0] += 1;

        // Whole model at minimal dims; re-seeded every 50 forwards.
        if i % 50 == 0 {
            let v = variants[(i / 50) % variants.len()];
            let cfg = apply_variant(&minimal_model_config(1000 + i as u64), v).unwrap();
            model = Some(Model::new(&cfg).unwrap());
        }
        let m = model.as_ref().unwrap();
        let sample = Sample {
            name: format!("r{i}"),
            image: Tensor::new(vec![1, 8, 8], uniform_vec(&mut rng, 64, 0.0, 1.0)).unwrap(),
            features: uniform_vec(&mut rng, m.cfg.raw_dim(), 0.0, 1.0),
            label: 0,
        };
        let (_, bundles) = m.forward(&[sample], Precision::F64, true).unwrap();
        let b = &bundles[0];
        if let Some(c) = &b.cma_weights {
            if let Err(e) = check_rows(&c.matrix.values, c.matrix.cols, "W_CMA", &mut worst) {
                return Outcome::new(false, format!("forward {i}: {e}"));
            }
            counts[1] += 1;
        }
        if let Some(a) = &b.alpha_trace {
            if let Err(e) = check_rows(&a.values, a.cols, "NAF alpha", &mut worst) {
                return Outcome::new(false, format!("forward {i}: {e}"));
            }
            counts[2] += 1;
        }
        if let Some(p) = &b.prediction {
            if !(p.probability > 0.0 && p.probability <= 1.0) {
                return Outcome::new(false, format!("forward {i}: prediction probability {}", p.probability));
            }
        }
    }
    Outcome::new(
        true,
        format!(
            "{forwards} forwards: {} attention, {} W_CMA, {} NAF traces checked; worst row-sum deviation {worst:.1e}",
            counts[0], counts[1], counts[2]
        ),
    )
}

// ---------------------------------------------------------------- classical features

/// Displacement from the angle in radians: `d` pixels along each axis the
/// direction moves on. Row index grows downward.
pub fn displacement(deg: u32, d: usize) -> (i64, i64) {
    let t = (deg as f64).to_radians();
    let d = d as i64;
    (-d * t.sin().round() as i64, d * t.cos().round() as i64)
}

pub fn oracle_level(v: f64, levels: usize) -> usize {
    let mut l = 0;
    while l + 1 < levels && v >= (l + 1) as f64 / levels as f64 {
        l += 1;
    }
    l
}

/// Every ordered pixel pair, filtered by displacement.
pub fn oracle_glcm_counts(img: &GrayImage, deg: u32, d: usize, levels: usize, symmetric: bool) -> Vec<u64> {
    let (h, w) = (img.height() as i64, img.width() as i64);
    let (dr, dc) = displacement(deg, d);
    let mut out = vec![0u64; levels * levels];
    for r1 in 0..h {
        for c1 in 0..w {
            for r2 in 0..h {
                for c2 in 0..w {
                    if r2 - r1 != dr || c2 - c1 != dc {
                        continue;
                    }
                    let i = oracle_level(img.get(r1 as usize, c1 as usize), levels);
                    let j = oracle_level(img.get(r2 as usize, c2 as usize), levels);
                    out[i * levels + j] += 1;
                    if symmetric {
                        out[j * levels + i] += 1;
                    }
                }
            }
        }
    }
    out
}

/// Reference LBP with P=8, R=1: axis neighbors read directly, diagonal ones
/// interpolated from their four surrounding pixels with product weights.
pub fn oracle_lbp(img: &GrayImage) -> Vec<u32> {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let mut codes = Vec::new();
    for r in 1..img.height() - 1 {
        for c in 1..img.width() - 1 {
            let center = img.get(r, c);
            let at = |dy: i64, dx: i64| img.get((r as i64 + dy) as usize, (c as i64 + dx) as usize);
            let mut code = 0;
            for k in 0..8u32 {
                let v = match k {
                    0 => at(0, 1),
                    2 => at(-1, 0),
                    4 => at(0, -1),
                    6 => at(1, 0),
                    _ => {
                        let sy: i64 = if k == 1 || k == 3 { -1 } else { 1 };
                        let sx: i64 = if k == 1 || k == 7 { 1 } else { -1 };
                        (1.0 - s) * (1.0 - s) * at(0, 0)
                            + (1.0 - s) * s * at(0, sx)
                            + s * (1.0 - s) * at(sy, 0)
                            + s * s * at(sy, sx)
                    }
                };
                if v >= center {
                    code |= 1 << k;
                }
            }
            codes.push(code);
        }
    }
    codes
}

pub fn criterion_feature_oracles(images: usize) -> Outcome {
    let mut rng = SeedRng::new(100);
    let mut checked = 0usize;
    for case in 0..images {
        let img = random_image(&mut rng, 8, 8);
        let levels = [2, 4, 8, 16][case % 4];
        for angle in GlcmAngle::ALL {
            for d in [1, 2] {
                for symmetric in [false, true] {
                    let got = glcm_counts(&img, d, angle, levels, symmetric).unwrap();
                    let want = oracle_glcm_counts(&img, angle.degrees(), d, levels, symmetric);
                    if got != want {
                        return Outcome::new(
                            false,
                            format!("image {case}: GLCM counts differ at {}° d={d} symmetric={symmetric}", angle.degrees()),
                        );
                    }
                    checked += 1;
                }
            }
        }
        if compute_lbp(&img, 8, 1.0).unwrap().codes != oracle_lbp(&img) {
            return Outcome::new(false, format!("image {case}: LBP codes differ"));
        }
    }
    for v in [0.0, 0.37, 1.0] {
        let img = GrayImage::new(8, 8, vec![v; 64]).unwrap();
        for angle in GlcmAngle::ALL {
            let s = glcm_features(&compute_glcm(&img, 1, angle, 16, true).unwrap()).unwrap();
            if s.contrast != 0.0 || s.energy != 1.0 {
                return Outcome::new(false, format!("constant {v}: contrast {} energy {}", s.contrast, s.energy));
            }
        }
        let hist = lbp_histogram(&compute_lbp(&img, 8, 1.0).unwrap(), LbpMode::Uniform).unwrap();
        if hist.iter().filter(|&&x| x != 0.0).count() != 1 {
            return Outcome::new(false, format!("constant {v}: LBP histogram {hist:?}"));
        }
    }
    Outcome::new(
        true,
        format!("{images} images: {checked} GLCM count matrices and all LBP codes exact; constant-image cases hold"),
    )
}
