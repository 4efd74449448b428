//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use evmf_core::data::{load_image, prepare_sample};
use evmf_core::verify::{run_suite, SuiteOptions};
use evmf_core::xai::{read_heatmap_csv, read_labeled_csv, read_manifest, read_scores_csv, XaiBundle};
use evmf_core::{Model, RunConfig};
use evmf_tensor::load_checkpoint;
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};

#[path = "../../core/tests/common/mod.rs"]
mod common;
mod support;

use common::Outcome;
use support::{evmf, s, synth, tiny_config};

type Check = Result<Outcome, String>;

fn ok(passed: bool, detail: impl Into<String>) -> Check {
    Ok(Outcome {
        passed,
        detail: detail.into(),
    })
}

fn cli(args: &[&str]) -> Result<String, String> {
    let o = evmf(args);
    if o.code == 0 {
        Ok(o.stdout)
    } else {
        Err(format!("evmf {} exited {}: {}", args.join(" "), o.code, o.stderr.trim()))
    }
}

fn gradients() -> Check {
    let t = Instant::now();
    let reports = run_suite(&SuiteOptions::default()).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let worst = reports
        .iter()
        .map(|r| format!("{} {:.1e}", r.block, r.max_rel_error))
        .collect::<Vec<_>>()
        .join(", ");
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed()).map(|r| r.block.clone()).collect();
    ok(failed.is_empty() && secs < 300.0, format!("{secs:.1}s; {worst}; failed: {failed:?}"))
}

fn last_accuracy(dir: &Path) -> Result<(usize, f64), String> {
    let text = fs::read_to_string(dir.join("metrics.csv")).map_err(|e| e.to_string())?;
    let log = evmf_core::train::parse_metric_csv(&text).map_err(|e| e.to_string())?;
    let last = log.last().ok_or("empty metric log")?;
    Ok((last.epoch, last.accuracy))
}

fn eval_accuracy(ckpt: &Path, data: &str) -> Result<f64, String> {
    let out = cli(&["eval", "--checkpoint", &s(ckpt), "--data", data])?;
    let row = out.lines().nth(1).ok_or("no eval row")?;
    row.split(',').nth(1).and_then(|v| v.parse().ok()).ok_or_else(|| "bad eval row".into())
}

fn overfit(tmp: &Path) -> Check {
    let data = tmp.join("train90");
    cli(&["synth", "--out", &s(&data), "--per-class", "30", "--size", "32", "--seed", "1"])?;
    let held = tmp.join("held");
    cli(&["synth", "--out", &s(&held), "--per-class", "10", "--size", "32", "--seed", "2"])?;
    let mut lines = Vec::new();
    let mut passed = true;
    let mut held_acc = Vec::new();
    for (variant, target, budget) in [("DUHF", 0.95, Some(600.0)), ("Simple-Concat", 0.90, None)] {
        let dir = tmp.join(variant);
        let t = Instant::now();
        cli(&[
            "train",
            "--data",
            &s(&data),
            "--out",
            &s(&dir),
            "--variant",
            variant,
            "--epochs",
            "200",
            "--set",
            &format!("train.target_accuracy={target}"),
        ])?;
        let secs = t.elapsed().as_secs_f64();
        let (epoch, acc) = last_accuracy(&dir)?;
        passed &= acc >= target && budget.map_or(true, |b| secs < b);
        lines.push(format!("{variant} train acc {acc:.3} at epoch {epoch} in {secs:.0}s"));
        held_acc.push((variant, eval_accuracy(&dir.join("model.evmf"), &s(&held))?));
    }
    let report: Vec<String> = held_acc.iter().map(|(v, a)| format!("{v} {a:.3}")).collect();
    ok(passed, format!("{}; held-out accuracy (reported only): {}", lines.join("; "), report.join(", ")))
}

fn ratio(n: u64, d: u64) -> BigRational {
    if d == 0 {
        BigRational::zero()
    } else {
        BigRational::new(BigInt::from(n), BigInt::from(d))
    }
}

fn cell(r: &BigRational) -> String {
    format!("{:?}", r.to_f64().unwrap())
}

/// Expected table row from a predictions file, by direct counting.
fn oracle_row(variant: &str, preds: &str, classes: &[String]) -> Vec<String> {
    let k = classes.len();
    let idx = |name: &str| classes.iter().position(|c| c == name).unwrap();
    let pairs: Vec<(usize, usize)> = preds
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (idx(f[1]), idx(f[2]))
        })
        .collect();
    let n = pairs.len() as u64;
    let mut conf = vec![vec![0u64; k]; k];
    for &(t, p) in &pairs {
        conf[t][p] += 1;
    }
    let mut per = Vec::new();
    let (mut mac, mut wt) = (vec![BigRational::zero(); 3], vec![BigRational::zero(); 3]);
    for c in 0..k {
        let tp = conf[c][c];
        let support: u64 = conf[c].iter().sum();
        let col: u64 = conf.iter().map(|r| r[c]).sum();
        let p = ratio(tp, col);
        let r = ratio(tp, support);
        let f = if (&p + &r).is_zero() {
            BigRational::zero()
        } else {
            BigRational::from_integer(2.into()) * &p * &r / (&p + &r)
        };
        for (i, v) in [&p, &r, &f].into_iter().enumerate() {
            mac[i] += v;
            wt[i] += v * BigRational::from_integer(support.into());
        }
        per.extend([cell(&p), cell(&r), cell(&f), support.to_string()]);
    }
    let correct: u64 = (0..k).map(|i| conf[i][i]).sum();
    let mut row = vec![variant.to_string(), cell(&ratio(correct, n))];
    row.extend(mac.iter().map(|v| cell(&(v / BigRational::from_integer(k.into())))));
    row.extend(wt.iter().map(|v| cell(&(v / BigRational::from_integer(n.into())))));
    row.extend(per);
    row
}

fn ablation(tmp: &Path) -> Check {
    let cfg = tiny_config(tmp);
    let data = synth(tmp, 3);
    let out = tmp.join("ablate");
    cli(&["ablate", "--data", &data, "--out", &s(&out), "--config", &cfg, "--variants", "all"])?;
    let mut rdr = csv::Reader::from_path(out.join("ablation.csv")).map_err(|e| e.to_string())?;
    let header: Vec<String> = rdr.headers().map_err(|e| e.to_string())?.iter().map(String::from).collect();
    let classes: Vec<String> = header
        .iter()
        .filter_map(|h| h.strip_suffix("_support").map(String::from))
        .collect();
    let rows: Vec<Vec<String>> = rdr
        .records()
        .map(|r| r.map(|r| r.iter().map(String::from).collect()))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let mut cells = 0;
    for row in &rows {
        let preds = fs::read_to_string(out.join(&row[0]).join("predictions.csv")).map_err(|e| e.to_string())?;
        let want = oracle_row(&row[0], &preds, &classes);
        if *row != want {
            return ok(false, format!("{} row {row:?} != oracle {want:?}", row[0]));
        }
        let col = |name: &str| header.iter().position(|h| h == name).unwrap();
        if row[col("weighted_recall")] != row[col("accuracy")] {
            return ok(false, format!("{}: weighted recall differs from accuracy", row[0]));
        }
        cells += row.len() - 1;
    }
    ok(
        rows.len() == 8 && classes.len() == 3,
        format!("{} rows, {} classes, {cells} cells equal the confusion-matrix oracle", rows.len(), classes.len()),
    )
}

fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn explain(tmp: &Path) -> Check {
    let data = synth(tmp, 2);
    let run = tmp.join("duhf");
    cli(&[
        "train", "--data", &data, "--out", &s(&run), "--variant", "DUHF", "--epochs", "1", "--set", "vim.patch=2",
    ])?;
    let ckpt = run.join("model.evmf");
    let image = tmp.join("data").join("blobs").join("blobs_000.pgm");
    let xd = tmp.join("xai");
    cli(&["explain", "--checkpoint", &s(&ckpt), "--image", &s(&image), "--out", &s(&xd)])?;

    let cfg = RunConfig::from_text(&fs::read_to_string(run.join("config.txt")).unwrap(), &[]).map_err(|e| e.to_string())?;
    let m = &cfg.model;
    let (h, w) = m.image_size;
    let (dh, dw) = m.dense.out_extent(h, w).map_err(|e| e.to_string())?;
    let p = m.vim.patch;
    let expect: BTreeMap<&str, (usize, usize)> = [
        ("dense_delta_fwd", (dh / p, dw / p)),
        ("dense_delta_bwd", (dh / p, dw / p)),
        ("unet_delta_fwd", (h / p, w / p)),
        ("unet_delta_bwd", (h / p, w / p)),
        ("dense_spatial", (dh, dw)),
        ("unet_spatial", (h, w)),
    ]
    .into();

    // Recompute in-process for the bit-exact comparison.
    let mut model = Model::new(m).map_err(|e| e.to_string())?;
    load_checkpoint(&mut model.store, &ckpt).map_err(|e| e.to_string())?;
    let sample = prepare_sample(&load_image(&image).unwrap(), 0, "x", m).map_err(|e| e.to_string())?;
    let (_, bundles) = model.forward(&[sample], cfg.train.precision, true).map_err(|e| e.to_string())?;
    let b: &XaiBundle = &bundles[0];

    let manifest = read_manifest(&xd.join("manifest.txt")).map_err(|e| e.to_string())?;
    let mut artifacts: Vec<&str> = manifest.iter().map(|(n, _)| n.as_str()).filter(|n| *n != "prediction").collect();
    artifacts.dedup();
    let visual: Vec<&str> = artifacts.iter().copied().filter(|n| *n != "alpha_trace").collect();
    if visual.len() != 8 {
        return ok(false, format!("artifacts {visual:?}"));
    }
    for (name, map) in b.heatmaps() {
        let disk = read_heatmap_csv(&xd.join(format!("{name}.csv"))).map_err(|e| e.to_string())?;
        if (disk.rows, disk.cols) != expect[name] || !same_bits(&disk.values, &map.values) {
            return ok(false, format!("{name}: {}x{} vs expected {:?}", disk.rows, disk.cols, expect[name]));
        }
        let pgm = fs::read(xd.join(format!("{name}.pgm"))).unwrap();
        let head = format!("P5\n{} {}\n255\n", disk.cols, disk.rows);
        if !pgm.starts_with(head.as_bytes()) || pgm.len() != head.len() + disk.rows * disk.cols {
            return ok(false, format!("{name}.pgm malformed"));
        }
    }
    let se = read_scores_csv(&xd.join("se_scores.csv")).map_err(|e| e.to_string())?;
    let d_raw = m.raw_dim();
    if se.values.len() != d_raw
        || !se.values.iter().all(|&v| v > 0.0 && v < 1.0)
        || !same_bits(&se.values, &b.se_scores.as_ref().unwrap().values)
    {
        return ok(false, format!("SE vector length {} (want {d_raw})", se.values.len()));
    }
    let cma = read_labeled_csv(&xd.join("cma_weights.csv")).map_err(|e| e.to_string())?;
    let stochastic = cma.matrix.values.chunks(3).all(|r| (r.iter().sum::<f64>() - 1.0).abs() < 1e-9 && r.iter().all(|&v| v > 0.0));
    if (cma.matrix.rows, cma.matrix.cols) != (3, 3)
        || !stochastic
        || !same_bits(&cma.matrix.values, &b.cma_weights.as_ref().unwrap().matrix.values)
    {
        return ok(false, format!("CMA {}x{} stochastic={stochastic}", cma.matrix.rows, cma.matrix.cols));
    }
    ok(
        true,
        format!(
            "8 artifacts; delta grids {:?}/{:?}, spatial {:?}/{:?}, SE {d_raw}, CMA 3x3; CSVs bit-exact",
            expect["dense_delta_fwd"], expect["unet_delta_fwd"], expect["dense_spatial"], expect["unet_spatial"]
        ),
    )
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism(tmp: &Path) -> Check {
    let cfg = tiny_config(tmp);
    let data = synth(tmp, 3);
    let pipeline = |root: &Path| -> Result<(), String> {
        let run = root.join("run");
        cli(&["train", "--data", &data, "--out", &s(&run), "--config", &cfg, "--epochs", "3"])?;
        cli(&["eval", "--checkpoint", &s(&run.join("model.evmf")), "--data", &data, "--out", &s(&root.join("eval"))])?;
        let img = Path::new(&data).join("checkers").join("checkers_001.pgm");
        cli(&["explain", "--checkpoint", &s(&run.join("model.evmf")), "--image", &s(&img), "--out", &s(&root.join("xai"))])?;
        Ok(())
    };
    let (a, b) = (tmp.join("first"), tmp.join("second"));
    pipeline(&a)?;
    pipeline(&b)?;
    let (fa, fb) = (files(&a), files(&b));
    if fa != fb {
        return ok(false, "runs wrote different file sets");
    }
    for f in &fa {
        if fs::read(a.join(f)).unwrap() != fs::read(b.join(f)).unwrap() {
            return ok(false, format!("{} differs", f.display()));
        }
    }
    ok(true, format!("{} files byte-identical (metrics, checkpoints, eval, XAI)", fa.len()))
}

const CRITERIA: [&str; 8] = [
    "gradient checks",
    "selective scan oracle",
    "softmax surfaces",
    "GLCM and LBP oracles",
    "synthetic overfit",
    "ablation table",
    "explanation artifacts",
    "determinism",
];

fn run_criterion(i: usize, dir: &Path) -> Check {
    fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    match i {
        1 => gradients(),
        2 => Ok(common::criterion_scan_oracle(200)),
        3 => Ok(common::criterion_stochasticity(1000)),
        4 => Ok(common::criterion_feature_oracles(100)),
        5 => overfit(dir),
        6 => ablation(dir),
        7 => explain(dir),
        _ => determinism(dir),
    }
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let mut failures = 0;
    for (i, name) in CRITERIA.iter().enumerate() {
        let t = Instant::now();
        let o = run_criterion(i + 1, &tmp.path().join(format!("c{}", i + 1))).unwrap_or_else(|e| Outcome {
            passed: false,
            detail: e,
        });
        failures += !o.passed as usize;
        println!(
            "criterion {} {:<22} {} ({:.1}s) {}",
            i + 1,
            name,
            if o.passed { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64(),
            o.detail
        );
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
