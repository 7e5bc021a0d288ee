//! The `tode` command line.

mod config;

use std::ffi::OsString;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

pub use config::{key_reference, EvalSource, RunConfig, KEYS, MODEL_KEYS};

use crate::check::{run_checks, CheckOptions};
use crate::data::{generate_sample, load_dataset, load_sample, write_depth_png, write_manifest, write_sample, quantize_depth, RgbdSample, SynthConfig};
use crate::error::{Error, Result};
use crate::geometry::{depth_to_pointcloud, write_ply};
use crate::metrics::{aggregate, evaluate, evaluation_mask, format_table, MetricReport};
use crate::model::{prepare_input, ModelConfig, TodeNet};
use crate::train::{load_checkpoint, save_checkpoint, Trainer};

#[derive(Debug, Parser)]
#[command(name = "tode", version, about = "Transparent-object depth completion", after_long_help = key_reference())]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Config file of `key = value` lines (see --help for keys).
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Overrides one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Seed for every random choice.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes a synthetic dataset.
    Gen {
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
        /// Image extents, e.g. 64x48.
        #[arg(long, value_name = "WxH")]
        extent: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Trains a network and writes a checkpoint plus loss history.
    Train {
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Checkpoint path.
        #[arg(long, value_name = "CKPT")]
        out: Option<PathBuf>,
        #[arg(long, value_parser = ["rgbd", "rgb", "depth"])]
        modality: Option<String>,
        /// Builds the network without feature fusion gates.
        #[arg(long)]
        no_ffm: bool,
        /// Disables random flips and rotations.
        #[arg(long)]
        no_augment: bool,
        /// Stops after this many optimizer steps.
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long, value_name = "FILE")]
        loss_csv: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Scores predictions against ground truth.
    Eval {
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        ckpt: Option<PathBuf>,
        /// Scores transparent pixels only (default).
        #[arg(long, conflicts_with = "all_pixels")]
        mask_only: bool,
        /// Scores every pixel with valid ground truth.
        #[arg(long)]
        all_pixels: bool,
        /// What to score: model, raw (sensor depth) or gt.
        #[arg(long, value_parser = ["model", "raw", "gt"])]
        source: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Predicts depth for one sample and exports it as PNG and PLY.
    Predict {
        #[arg(long, value_name = "FILE")]
        ckpt: Option<PathBuf>,
        #[arg(long = "in", value_name = "SAMPLE_DIR")]
        input: Option<PathBuf>,
        #[arg(long, value_name = "PNG")]
        out_depth: Option<PathBuf>,
        #[arg(long, value_name = "PLY")]
        out_ply: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Runs the built-in verification suite.
    Check {
        /// Corrupts a backward rule; the gradient checks must then fail.
        #[arg(long)]
        inject_fault: bool,
        #[command(flatten)]
        common: Common,
    },
}

/// Resolved configuration plus the keys that were set explicitly.
struct Resolved {
    cfg: RunConfig,
    explicit: Vec<String>,
}

impl Resolved {
    fn set(&mut self, key: &str, value: impl ToString) -> Result<()> {
        self.cfg.set(key, &value.to_string())?;
        self.explicit.push(key.to_string());
        Ok(())
    }

    fn is_explicit(&self, key: &str) -> bool {
        self.explicit.iter().any(|k| k == key)
    }
}

/// Defaults, then the checkpoint sidecar, the config file, `--set` pairs
/// and finally the dedicated flags.
fn resolve(common: &Common, sidecar: Option<&Path>) -> Result<Resolved> {
    let mut r = Resolved { cfg: RunConfig::default(), explicit: Vec::new() };
    if let Some(p) = sidecar.filter(|p| p.exists()) {
        r.cfg.apply_file(p)?;
    }
    if let Some(p) = &common.config {
        let text = std::fs::read_to_string(p)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
        r.cfg.apply_text(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
        for line in text.lines() {
            if let Some((k, _)) = line.split('#').next().unwrap_or("").split_once('=') {
                r.explicit.push(k.trim().to_string());
            }
        }
    }
    for pair in &common.set {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{pair}`")))?;
        r.set(k.trim(), v)?;
    }
    if let Some(s) = common.seed {
        r.set("seed", s)?;
    }
    Ok(r)
}

fn require<'a>(p: &'a Option<PathBuf>, key: &str, flag: &str) -> Result<&'a PathBuf> {
    p.as_ref().ok_or_else(|| Error::Config(format!("{key}: missing (pass {flag} or set `{key}` in the config)")))
}

/// Path of the architecture file stored next to a checkpoint.
pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    let mut s = OsString::from(ckpt.as_os_str());
    s.push(".cfg");
    PathBuf::from(s)
}

/// Seed of the `index`-th generated sample.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    let mut h = DefaultHasher::new();
    (seed, index as u64).hash(&mut h);
    h.finish()
}

/// Directory name of the `index`-th generated sample.
pub fn sample_name(index: usize) -> String {
    format!("sample_{index:05}")
}

/// Builds a network for `cfg` and fills it from a checkpoint.
pub fn load_model(ckpt: &Path, cfg: &ModelConfig) -> Result<TodeNet<f32>> {
    let mut net = TodeNet::new(cfg.clone(), 0)?;
    let tensors = load_checkpoint::<f32>(ckpt)?;
    net.params_mut()
        .load_named(tensors)
        .map_err(|e| Error::Config(format!("checkpoint {} does not match the configured architecture: {e}", ckpt.display())))?;
    Ok(net)
}

/// Writes `count` samples plus a manifest under `out`.
pub fn generate_dataset(out: &Path, synth: &SynthConfig, count: usize, seed: u64) -> Result<Vec<String>> {
    synth.validate()?;
    std::fs::create_dir_all(out)?;
    let mut names = Vec::with_capacity(count);
    for k in 0..count {
        let sample = generate_sample(&SynthConfig { seed: sample_seed(seed, k), ..synth.clone() })?;
        let name = sample_name(k);
        write_sample(&out.join(&name), &sample)?;
        names.push(name);
    }
    write_manifest(out, &names)?;
    Ok(names)
}

fn cmd_gen(out: &Option<PathBuf>, count: Option<usize>, extent: &Option<String>, common: &Common) -> Result<()> {
    let mut r = resolve(common, None)?;
    if let Some(p) = out {
        r.set("out", p.display())?;
    }
    if let Some(c) = count {
        r.set("count", c)?;
    }
    if let Some(e) = extent {
        let (w, h) = e
            .split_once(['x', 'X'])
            .ok_or_else(|| Error::Config(format!("--extent expects WxH, got `{e}`")))?;
        r.set("width", w)?;
        r.set("height", h)?;
    }
    let cfg = &r.cfg;
    let out = require(&cfg.out, "out", "--out")?;
    let names = generate_dataset(out, &cfg.synth, cfg.count, cfg.train.seed)?;
    println!(
        "wrote {} samples ({}x{}) to {}",
        names.len(),
        cfg.synth.width,
        cfg.synth.height,
        out.display()
    );
    Ok(())
}

fn dataset_samples(dir: &Path) -> Result<(Vec<String>, Vec<RgbdSample>)> {
    Ok(load_dataset(dir)?.into_iter().unzip())
}

/// Adopts the dataset's extents unless they were configured explicitly.
fn match_extents(r: &mut Resolved, samples: &[RgbdSample]) -> Result<()> {
    let Some(first) = samples.first() else { return Ok(()) };
    if let Some(s) = samples.iter().find(|s| (s.height(), s.width()) != (first.height(), first.width())) {
        return Err(Error::Dimension(format!(
            "dataset mixes {}×{} and {}×{} samples",
            first.height(),
            first.width(),
            s.height(),
            s.width()
        )));
    }
    for (key, v) in [("height", first.height()), ("width", first.width())] {
        if !r.is_explicit(key) {
            r.cfg.set(key, &v.to_string())?;
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    data: &Option<PathBuf>,
    out: &Option<PathBuf>,
    modality: &Option<String>,
    no_ffm: bool,
    no_augment: bool,
    max_steps: Option<usize>,
    loss_csv: &Option<PathBuf>,
    threads: Option<usize>,
    common: &Common,
) -> Result<()> {
    let mut r = resolve(common, None)?;
    if let Some(p) = data {
        r.set("data", p.display())?;
    }
    if let Some(p) = out {
        r.set("out", p.display())?;
    }
    if let Some(m) = modality {
        r.set("modality", m)?;
    }
    if no_ffm {
        r.set("use_ffm", false)?;
    }
    if no_augment {
        r.set("augment", false)?;
    }
    if let Some(n) = max_steps {
        r.set("max_steps", n)?;
    }
    if let Some(p) = loss_csv {
        r.set("loss_csv", p.display())?;
    }
    if let Some(n) = threads {
        r.set("threads", n)?;
    }
    let data = require(&r.cfg.data, "data", "--data")?.clone();
    let ckpt = require(&r.cfg.out, "out", "--out")?.clone();
    let (_, samples) = dataset_samples(&data)?;
    if samples.is_empty() {
        return Err(Error::Contract(format!("dataset {} has no samples", data.display())));
    }
    match_extents(&mut r, &samples)?;
    let cfg = r.cfg;
    cfg.validate()?;
    let net = TodeNet::<f32>::new(cfg.model.clone(), cfg.train.seed)?;
    println!(
        "training {} parameters ({} tensors) on {} samples, modality {}, ffm {}, augment {}",
        net.params().num_scalars(),
        net.params().len(),
        samples.len(),
        cfg.model.modality,
        cfg.model.use_ffm,
        cfg.train.augment
    );
    let mut trainer = Trainer::new(net, cfg.train.clone(), cfg.loss)?;
    let start = Instant::now();
    let history = trainer.fit(&samples, |rec| {
        if rec.step == 1 || rec.step % 10 == 0 {
            println!("step {} epoch {} loss {:.6e} ({:.1}s)", rec.step, rec.epoch, rec.loss, start.elapsed().as_secs_f64());
        }
    })?;
    if let Some(parent) = ckpt.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    save_checkpoint(trainer.net.params(), &ckpt)?;
    std::fs::write(sidecar_path(&ckpt), cfg.render(MODEL_KEYS))?;
    let csv = cfg.loss_csv.clone().unwrap_or_else(|| {
        let mut s = OsString::from(ckpt.as_os_str());
        s.push(".loss.csv");
        PathBuf::from(s)
    });
    history.write_csv(&csv)?;
    println!(
        "{} steps in {:.1}s; checkpoint {}, loss history {}",
        history.records.len(),
        start.elapsed().as_secs_f64(),
        ckpt.display(),
        csv.display()
    );
    Ok(())
}

/// Depth map (meters) that `eval` scores for a sample.
fn scored_depth(source: EvalSource, net: Option<&TodeNet<f32>>, sample: &RgbdSample) -> Result<Vec<f32>> {
    match source {
        EvalSource::Gt => Ok(sample.gt_depth.clone()),
        EvalSource::Raw => Ok(sample.raw_depth.clone()),
        EvalSource::Model => {
            let net = net.expect("model loaded for model source");
            Ok(net.predict(&prepare_input::<f32>(sample, net.config())?)?.into_data())
        }
    }
}

fn cmd_eval(
    data: &Option<PathBuf>,
    ckpt: &Option<PathBuf>,
    mask_only: bool,
    all_pixels: bool,
    source: &Option<String>,
    common: &Common,
) -> Result<()> {
    let sidecar = ckpt.as_deref().map(sidecar_path);
    let mut r = resolve(common, sidecar.as_deref())?;
    if let Some(p) = data {
        r.set("data", p.display())?;
    }
    if let Some(p) = ckpt {
        r.set("ckpt", p.display())?;
    }
    if mask_only {
        r.set("eval_region", "mask")?;
    }
    if all_pixels {
        r.set("eval_region", "all")?;
    }
    if let Some(s) = source {
        r.set("source", s)?;
    }
    let data = require(&r.cfg.data, "data", "--data")?.clone();
    let (names, samples) = dataset_samples(&data)?;
    let net = if r.cfg.source == EvalSource::Model {
        let ckpt = require(&r.cfg.ckpt, "ckpt", "--ckpt")?.clone();
        match_extents(&mut r, &samples)?;
        r.cfg.model.validate()?;
        Some(load_model(&ckpt, &r.cfg.model)?)
    } else {
        None
    };
    let cfg = r.cfg;
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (name, sample) in names.iter().zip(&samples) {
        let pred = scored_depth(cfg.source, net.as_ref(), sample)?;
        let mask = evaluation_mask(&sample.gt_depth, &sample.mask, cfg.eval_region);
        if mask.iter().all(|&m| m == 0) {
            skipped.push(name.clone());
            continue;
        }
        rows.push((name.clone(), evaluate(&pred, &sample.gt_depth, &mask)?));
    }
    if rows.is_empty() {
        return Err(Error::Contract("no sample has evaluable pixels".into()));
    }
    let reports: Vec<MetricReport> = rows.iter().map(|(_, r)| *r).collect();
    let total = aggregate(&reports)?;
    let mut table = rows.clone();
    table.push(("mean".into(), total));
    print!("{}", format_table(&table));
    for name in &skipped {
        println!("# skipped {name}: no evaluable pixels");
    }
    for (name, rep) in &rows {
        print!("{}", rep.to_lines(&format!("sample.{name}")));
    }
    print!("{}", total.to_lines("mean"));
    Ok(())
}

fn cmd_predict(
    ckpt: &Option<PathBuf>,
    input: &Option<PathBuf>,
    out_depth: &Option<PathBuf>,
    out_ply: &Option<PathBuf>,
    common: &Common,
) -> Result<()> {
    let sidecar = ckpt.as_deref().map(sidecar_path);
    let mut r = resolve(common, sidecar.as_deref())?;
    for (key, v) in [("ckpt", ckpt), ("input", input), ("out_depth", out_depth), ("out_ply", out_ply)] {
        if let Some(p) = v {
            r.set(key, p.display())?;
        }
    }
    let ckpt = require(&r.cfg.ckpt, "ckpt", "--ckpt")?.clone();
    let input = require(&r.cfg.input, "input", "--in")?.clone();
    let sample = load_sample(&input)?;
    match_extents(&mut r, std::slice::from_ref(&sample))?;
    let cfg = r.cfg;
    cfg.model.validate()?;
    let net = load_model(&ckpt, &cfg.model)?;
    let pred = net.predict(&prepare_input::<f32>(&sample, net.config())?)?;
    let depth: Vec<f32> = pred.data().iter().map(|&d| quantize_depth(d.max(0.0))).collect();
    let (h, w) = (sample.height(), sample.width());
    if let Some(p) = &cfg.out_depth {
        write_depth_png(p, &depth, h, w)?;
        println!("depth written to {}", p.display());
    }
    if let Some(p) = &cfg.out_ply {
        let cloud = depth_to_pointcloud(&depth, h, w, Some(&sample.rgb), &sample.intrinsics)?;
        write_ply(&cloud, p)?;
        println!("{} points written to {}", cloud.len(), p.display());
    }
    if cfg.out_depth.is_none() && cfg.out_ply.is_none() {
        return Err(Error::Config("nothing to write: pass --out-depth and/or --out-ply".into()));
    }
    Ok(())
}

fn cmd_check(inject_fault: bool, common: &Common) -> Result<bool> {
    let mut r = resolve(common, None)?;
    if inject_fault {
        r.set("inject_fault", true)?;
    }
    let report = run_checks(&CheckOptions { inject_fault: r.cfg.inject_fault });
    print!("{}", report.render());
    Ok(report.passed())
}

/// Runs a parsed command line. `Ok(false)` means the command ran but
/// reported failure.
pub fn run(cli: Cli) -> Result<bool> {
    match &cli.command {
        Command::Gen { out, count, extent, common } => cmd_gen(out, *count, extent, common).map(|_| true),
        Command::Train { data, out, modality, no_ffm, no_augment, max_steps, loss_csv, threads, common } => {
            cmd_train(data, out, modality, *no_ffm, *no_augment, *max_steps, loss_csv, *threads, common).map(|_| true)
        }
        Command::Eval { data, ckpt, mask_only, all_pixels, source, common } => {
            cmd_eval(data, ckpt, *mask_only, *all_pixels, source, common).map(|_| true)
        }
        Command::Predict { ckpt, input, out_depth, out_ply, common } => {
            cmd_predict(ckpt, input, out_depth, out_ply, common).map(|_| true)
        }
        Command::Check { inject_fault, common } => cmd_check(*inject_fault, common),
    }
}
