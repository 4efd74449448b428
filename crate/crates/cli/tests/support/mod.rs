//! Helpers for driving the CLI in-process.

#![allow(dead_code)]

use std::fs;
use std::path::Path;

pub struct Output {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn evmf(args: &[&str]) -> Output {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("evmf").chain(args.iter().copied());
    let code = evmf_cli::run(argv, &mut out, &mut err);
    Output {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

/// Smallest useful model: 8×8 inputs, fusion width 8.
pub const TINY: &str = "\
image_height = 8
image_width = 8
d_model = 8
dense.stem_channels = 2
dense.blocks = 1x2,1x2
unet.depth = 1
unet.base_channels = 2
vim.d_model = 3
vim.d_inner = 3
vim.d_state = 2
vim.layers = 1
spatial.kernel = 3
trad.d_tok = 4
naf.k = 2
naf.primitives = 2
naf.d_state = 4
naf.d_ctrl = 3
naf.hidden = 4
train.epochs = 2
";

pub fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.txt");
    fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_string()
}

/// Seeded synthetic set with `per_class` 16×16 images per class.
pub fn synth(dir: &Path, per_class: usize) -> String {
    let p = dir.join("data");
    let o = evmf(&["synth", "--out", p.to_str().unwrap(), "--per-class", &per_class.to_string(), "--size", "16"]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    p.to_str().unwrap().to_string()
}

pub fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}
