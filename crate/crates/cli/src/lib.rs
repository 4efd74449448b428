//! Command implementations behind the `evmf` binary.
//!
//! [`run`] parses arguments and dispatches; it never calls `process::exit`,
//! so tests drive it in-process and inspect the returned exit code.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use evmf_core::config::{parse_override, parse_pairs};
use evmf_core::data::{generate_synthetic, load_dataset, load_image, prepare_sample, Dataset};
use evmf_core::metrics::{metrics_from_predictions, Metrics};
use evmf_core::model::{softmax_row, VARIANTS};
use evmf_core::train::{parse_metric_csv, predict, EpochRecord};
use evmf_core::verify::{self, SuiteOptions};
use evmf_core::xai::export_bundle;
use evmf_core::{train, CoreError, Model, RunConfig, TrainState};
use evmf_tensor::{load_checkpoint, TensorError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_CHECKPOINT: i32 = 4;

#[derive(Parser, Debug)]
#[command(
    name = "evmf",
    about = "Multi-path texture classifier with intrinsic explanations",
    after_help = "Exit codes: 0 ok, 1 check failure, 2 usage, 3 data, 4 checkpoint"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one variant on an image-folder dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on an image-folder dataset.
    Eval(EvalArgs),
    /// Export the explanation artifacts for one image.
    Explain(ExplainArgs),
    /// Train and evaluate several variants; write one combined table.
    Ablate(AblateArgs),
    /// Finite-difference gradient checks for every block.
    Gradcheck(GradcheckArgs),
    /// Write the seeded synthetic texture dataset.
    Synth(SynthArgs),
}

#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// Plain-text `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable, later wins.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Print the fully resolved config and exit.
    #[arg(long)]
    dump_config: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// One of DUHF, DHF, DU, UHF, Simple-Mean, Simple-Concat, NAF-Only, CMA-Only.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Continue from `train_state.evmf` and `model.evmf` in the output directory.
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Writes `eval.csv` and `predictions.csv` here when given.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Defaults to `config.txt` next to the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExplainArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to `config.txt` next to the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated variant names, or `all`.
    #[arg(long, default_value = "all")]
    variants: String,
    /// Held-out set for the table; the training set is used when absent.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Check one block only.
    #[arg(long)]
    block: Option<String>,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 11)]
    seed: u64,
    /// Perturb the analytic gradient of this block (negative control).
    #[arg(long, hide = true)]
    corrupt: Option<String>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 30)]
    per_class: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

/// Failure carrying its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::new(EXIT_USAGE, msg)
}

/// Default mapping from library errors to exit codes.
fn classify(e: CoreError) -> Failure {
    let code = match &e {
        CoreError::Config(_) | CoreError::UnknownVariant { .. } => EXIT_USAGE,
        CoreError::Checkpoint(_) | CoreError::Tensor(TensorError::Checkpoint(_) | TensorError::UnknownParam(_)) => {
            EXIT_CHECKPOINT
        }
        CoreError::NonFiniteLoss { .. } => EXIT_CHECK,
        _ => EXIT_DATA,
    };
    Failure::new(code, e.to_string())
}

fn data_err(e: CoreError) -> Failure {
    match e {
        CoreError::Config(_) | CoreError::UnknownVariant { .. } => classify(e),
        other => Failure::new(EXIT_DATA, other.to_string()),
    }
}

fn ckpt_err(e: impl std::fmt::Display) -> Failure {
    Failure::new(EXIT_CHECKPOINT, e.to_string())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CmdResult {
    fs::write(path, contents).map_err(|e| Failure::new(EXIT_DATA, format!("{}: {e}", path.display())))
}

fn make_dir(path: &Path) -> CmdResult {
    fs::create_dir_all(path).map_err(|e| Failure::new(EXIT_DATA, format!("{}: {e}", path.display())))
}

/// Runs the CLI on `args` (including the program name) and returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.exit_code() == 0 { EXIT_OK } else { EXIT_USAGE };
            let text = e.render().to_string();
            if code == EXIT_OK {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    let res = match cli.command {
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Explain(a) => cmd_explain(a, out),
        Command::Ablate(a) => cmd_ablate(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
        Command::Synth(a) => cmd_synth(a, out),
    };
    match res {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

/// Config file pairs, then `--variant`/`--epochs` shorthands, then `--set`.
fn resolve_config(c: &ConfigArgs, variant: Option<&str>, epochs: Option<usize>) -> Result<RunConfig, Failure> {
    let mut pairs = match &c.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            parse_pairs(&text).map_err(classify)?
        }
        None => Vec::new(),
    };
    if let Some(v) = variant {
        pairs.push(("variant".into(), v.into()));
    }
    if let Some(e) = epochs {
        pairs.push(("train.epochs".into(), e.to_string()));
    }
    for s in &c.set {
        pairs.push(parse_override(s).map_err(classify)?);
    }
    RunConfig::resolve(&pairs).map_err(classify)
}

/// Adopts the dataset's class list unless the config names classes itself,
/// in which case the two must agree.
fn bind_classes(cfg: &mut RunConfig, ds: &Dataset) -> CmdResult {
    let m = &mut cfg.model;
    if m.class_names.is_empty() {
        m.class_names = ds.class_names.clone();
        m.num_classes = ds.class_names.len();
    } else if m.class_names != ds.class_names {
        return Err(Failure::new(
            EXIT_DATA,
            format!("dataset classes {:?} differ from configured {:?}", ds.class_names, m.class_names),
        ));
    }
    Ok(())
}

fn load_data(cfg: &mut RunConfig, dir: &Path) -> Result<Dataset, Failure> {
    let ds = load_dataset(dir, &cfg.model).map_err(data_err)?;
    bind_classes(cfg, &ds)?;
    Ok(ds)
}

/// Trains with progress lines on `out`; writes everything under `dir`.
fn train_into(
    cfg: &RunConfig,
    ds: &Dataset,
    dir: &Path,
    resume: bool,
    out: &mut dyn Write,
) -> Result<(Model, Vec<EpochRecord>), Failure> {
    make_dir(dir)?;
    write_file(&dir.join("config.txt"), cfg.dump())?;
    let mut model = Model::new(&cfg.model).map_err(classify)?;
    let (state, log) = if resume {
        load_checkpoint(&mut model.store, &dir.join("model.evmf")).map_err(ckpt_err)?;
        let st = TrainState::load(&model, &dir.join("train_state.evmf")).map_err(ckpt_err)?;
        let mp = dir.join("metrics.csv");
        let text = fs::read_to_string(&mp).map_err(|e| ckpt_err(format!("{}: {e}", mp.display())))?;
        let log = parse_metric_csv(&text).map_err(ckpt_err)?;
        if log.len() != st.epoch {
            return Err(ckpt_err(format!("metric log has {} rows, state is at epoch {}", log.len(), st.epoch)));
        }
        (Some(st), log)
    } else {
        (None, Vec::new())
    };
    let (_, log) = train(&mut model, &ds.samples, &cfg.train, Some(dir), state, log, |r| {
        let _ = writeln!(
            out,
            "epoch {:>4}  loss {:.5}  acc {:.4}  macro_f1 {:.4}",
            r.epoch, r.loss, r.accuracy, r.macro_f1
        );
    })
    .map_err(classify)?;
    Ok((model, log))
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> CmdResult {
    let mut cfg = resolve_config(&a.cfg, a.variant.as_deref(), a.epochs)?;
    if a.cfg.dump_config {
        let _ = write!(out, "{}", cfg.dump());
        return Ok(());
    }
    let data = a.data.ok_or_else(|| usage("train requires --data <dir> (see --help)"))?;
    let dir = a.out.ok_or_else(|| usage("train requires --out <dir> (see --help)"))?;
    let ds = load_data(&mut cfg, &data)?;
    let _ = writeln!(
        out,
        "training {} on {} images ({} classes)",
        cfg.variant.as_deref().unwrap_or("custom"),
        ds.samples.len(),
        ds.class_names.len()
    );
    train_into(&cfg, &ds, &dir, a.resume, out)?;
    Ok(())
}

/// Finds `config.txt` beside the checkpoint, or one level up for files under
/// `checkpoints/`.
fn checkpoint_config(ckpt: &Path, explicit: Option<&Path>) -> Result<RunConfig, Failure> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => {
            let parent = ckpt.parent().unwrap_or(Path::new("."));
            [parent.join("config.txt"), parent.join("..").join("config.txt")]
                .into_iter()
                .find(|p| p.is_file())
                .ok_or_else(|| ckpt_err(format!("no config.txt found next to {}", ckpt.display())))?
        }
    };
    let text = fs::read_to_string(&path).map_err(|e| ckpt_err(format!("{}: {e}", path.display())))?;
    RunConfig::from_text(&text, &[]).map_err(ckpt_err)
}

fn load_model(cfg: &RunConfig, ckpt: &Path) -> Result<Model, Failure> {
    let mut model = Model::new(&cfg.model).map_err(ckpt_err)?;
    load_checkpoint(&mut model.store, ckpt)
        .map_err(|e| ckpt_err(format!("{}: {e} (checkpoint does not match config)", ckpt.display())))?;
    Ok(model)
}

fn predictions_csv(ds: &Dataset, preds: &[(usize, f64)], names: &[String]) -> String {
    let mut s = String::from("image,label,predicted,probability\n");
    for (smp, (p, prob)) in ds.samples.iter().zip(preds) {
        let _ = writeln!(s, "{},{},{},{prob:?}", smp.name, names[smp.label], names[*p]);
    }
    s
}

fn metric_header(classes: &[String]) -> String {
    let mut h = String::from(
        "variant,accuracy,macro_precision,macro_recall,macro_f1,weighted_precision,weighted_recall,weighted_f1",
    );
    for c in classes {
        let _ = write!(h, ",{c}_precision,{c}_recall,{c}_f1,{c}_support");
    }
    h
}

fn metric_row(name: &str, m: &Metrics) -> String {
    let mut r = format!(
        "{name},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
        m.accuracy,
        m.macro_avg.precision,
        m.macro_avg.recall,
        m.macro_avg.f1,
        m.weighted.precision,
        m.weighted.recall,
        m.weighted.f1
    );
    for c in &m.per_class {
        let _ = write!(r, ",{:?},{:?},{:?},{}", c.precision, c.recall, c.f1, c.support);
    }
    r
}

fn score(model: &Model, cfg: &RunConfig, ds: &Dataset) -> Result<(Vec<(usize, f64)>, Metrics), Failure> {
    let preds = predict(model, &ds.samples, cfg.train.precision).map_err(classify)?;
    let labels: Vec<usize> = ds.samples.iter().map(|s| s.label).collect();
    let p: Vec<usize> = preds.iter().map(|x| x.0).collect();
    let m = metrics_from_predictions(&labels, &p, cfg.model.num_classes).map_err(classify)?;
    Ok((preds, m))
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> CmdResult {
    let mut cfg = checkpoint_config(&a.checkpoint, a.config.as_deref())?;
    let model = load_model(&cfg, &a.checkpoint)?;
    let ds = load_data(&mut cfg, &a.data)?;
    let (preds, m) = score(&model, &cfg, &ds)?;
    let name = cfg.variant.clone().unwrap_or_else(|| "custom".into());
    let table = format!("{}\n{}\n", metric_header(&ds.class_names), metric_row(&name, &m));
    let _ = write!(out, "{table}");
    if let Some(dir) = a.out {
        make_dir(&dir)?;
        write_file(&dir.join("config.txt"), cfg.dump())?;
        write_file(&dir.join("eval.csv"), table)?;
        write_file(&dir.join("predictions.csv"), predictions_csv(&ds, &preds, &ds.class_names))?;
    }
    Ok(())
}

fn cmd_explain(a: ExplainArgs, out: &mut dyn Write) -> CmdResult {
    let cfg = checkpoint_config(&a.checkpoint, a.config.as_deref())?;
    let model = load_model(&cfg, &a.checkpoint)?;
    let img = load_image(&a.image).map_err(data_err)?;
    let name = a.image.file_name().unwrap_or_default().to_string_lossy().into_owned();
    let sample = prepare_sample(&img, 0, &name, &cfg.model).map_err(data_err)?;
    let (logits, bundles) = model
        .forward(std::slice::from_ref(&sample), cfg.train.precision, true)
        .map_err(classify)?;
    let bundle = &bundles[0];
    make_dir(&a.out)?;
    write_file(&a.out.join("config.txt"), cfg.dump())?;
    export_bundle(bundle, &a.out).map_err(data_err)?;
    let probs = softmax_row(logits.data());
    if let Some(p) = &bundle.prediction {
        let _ = writeln!(out, "prediction: {} ({:.4})", p.class_name, p.probability);
    }
    for (c, p) in probs.iter().enumerate() {
        let _ = writeln!(out, "  {:<16} {p:.4}", cfg.model.class_name(c));
    }
    let _ = writeln!(out, "{} artifacts written to {}", bundle.artifact_count(), a.out.display());
    Ok(())
}

fn parse_variants(list: &str) -> Result<Vec<String>, Failure> {
    if list == "all" {
        return Ok(VARIANTS.iter().map(|s| s.to_string()).collect());
    }
    let v: Vec<String> = list.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    for name in &v {
        if !VARIANTS.contains(&name.as_str()) {
            return Err(usage(format!("unknown variant {name:?}; valid names: {}", VARIANTS.join(", "))));
        }
    }
    if v.is_empty() {
        return Err(usage("--variants is empty"));
    }
    Ok(v)
}

fn cmd_ablate(a: AblateArgs, out: &mut dyn Write) -> CmdResult {
    let variants = parse_variants(&a.variants)?;
    let base = resolve_config(&a.cfg, None, a.epochs)?;
    if a.cfg.dump_config {
        let _ = write!(out, "{}", base.dump());
        return Ok(());
    }
    let data = a.data.ok_or_else(|| usage("ablate requires --data <dir> (see --help)"))?;
    let dir = a.out.ok_or_else(|| usage("ablate requires --out <dir> (see --help)"))?;
    make_dir(&dir)?;
    let mut table: Option<String> = None;
    for name in &variants {
        let mut c = a.cfg.set.clone();
        c.insert(0, format!("variant={name}"));
        let mut cfg = resolve_config(
            &ConfigArgs {
                config: a.cfg.config.clone(),
                set: c,
                dump_config: false,
            },
            None,
            a.epochs,
        )?;
        let ds = load_data(&mut cfg, &data)?;
        let eval = match &a.eval_data {
            Some(p) => load_data(&mut cfg, p)?,
            None => ds.clone(),
        };
        let _ = writeln!(out, "== {name}");
        let vdir = dir.join(name);
        let (model, _) = train_into(&cfg, &ds, &vdir, false, out)?;
        let (preds, m) = score(&model, &cfg, &eval)?;
        write_file(&vdir.join("predictions.csv"), predictions_csv(&eval, &preds, &eval.class_names))?;
        let t = table.get_or_insert_with(|| metric_header(&eval.class_names) + "\n");
        t.push_str(&metric_row(name, &m));
        t.push('\n');
    }
    let table = table.unwrap_or_default();
    write_file(&dir.join("ablation.csv"), &table)?;
    write_file(&dir.join("config.txt"), base.dump())?;
    let _ = write!(out, "{table}");
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> CmdResult {
    let opts = SuiteOptions {
        step: a.step,
        corrupt: a.corrupt,
        seed: a.seed,
    };
    let reports = match &a.block {
        Some(b) => vec![verify::check_block(b, &opts).map_err(classify)?],
        None => verify::run_suite(&opts).map_err(classify)?,
    };
    let mut failed = Vec::new();
    for r in &reports {
        let status = if r.passed() { "ok" } else { "FAIL" };
        let worst = r.worst.as_ref().map(|(n, i)| format!(" at {n}[{i}]")).unwrap_or_default();
        let _ = writeln!(
            out,
            "{:<18} max_rel_error {:.3e}  threshold {:.0e}  coords {:>5}  {status}{worst}",
            r.block, r.max_rel_error, r.threshold, r.coords
        );
        if !r.passed() {
            failed.push(r.block.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::new(EXIT_CHECK, format!("gradient check failed: {}", failed.join(", "))))
    }
}

fn cmd_synth(a: SynthArgs, out: &mut dyn Write) -> CmdResult {
    let files = generate_synthetic(&a.out, a.per_class, a.size, a.seed).map_err(classify)?;
    let _ = writeln!(out, "wrote {} images to {}", files.len(), a.out.display());
    Ok(())
}
