//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{ShapeKind, SynthConfig};
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::metrics::EvalRegion;
use crate::model::ModelConfig;
use crate::tensor::UpsampleMode;
use crate::train::TrainConfig;

/// Every recognized key with its description, in documentation order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "seed for every random choice (data, init, shuffling, augmentation)"),
    ("height", "image height in pixels (model input and generated samples)"),
    ("width", "image width in pixels (model input and generated samples)"),
    ("modality", "network input: rgbd, rgb or depth"),
    ("embed_dim", "channels of the first encoder stage"),
    ("stage_depths", "attention blocks per encoder stage, four comma-separated counts"),
    ("heads", "attention heads per encoder stage, four comma-separated counts"),
    ("window", "attention window side (reduced per stage to a divisor of its extents)"),
    ("use_ffm", "enable the feature fusion gates (true/false)"),
    ("ffm_reduction", "channel reduction of the fusion gate bottleneck"),
    ("max_depth", "depth normalization constant, meters"),
    ("upsample", "decoder upsampling: bilinear or nearest"),
    ("batch_size", "samples per optimizer step"),
    ("lr", "initial learning rate"),
    ("weight_decay", "decoupled weight decay"),
    ("epochs", "training epochs"),
    ("lr_milestones", "comma-separated epochs at which the learning rate is multiplied by lr_gamma"),
    ("lr_gamma", "learning-rate decay factor"),
    ("augment", "random flips and rotations during training (true/false)"),
    ("max_steps", "stop after this many optimizer steps (0 = no limit)"),
    ("threads", "worker threads for per-sample gradients"),
    ("beta_normal", "weight of the normal-consistency term"),
    ("alpha_masked", "weight of the loss over transparent pixels"),
    ("beta_unmasked", "weight of the loss over all pixels"),
    ("min_objects", "fewest objects per generated scene"),
    ("max_objects", "most objects per generated scene"),
    ("shapes", "comma-separated object shapes: sphere, box, cylinder"),
    ("background_min", "nearest table depth at the image center, meters"),
    ("background_max", "farthest table depth at the image center, meters"),
    ("object_height_min", "lowest object height above the table, meters"),
    ("object_height_max", "tallest object height above the table, meters"),
    ("radius_min", "smallest object radius as a fraction of the shorter image side"),
    ("radius_max", "largest object radius as a fraction of the shorter image side"),
    ("transparent_prob", "probability that a generated object is transparent"),
    ("transparent_alpha", "opacity of transparent objects in the color image"),
    ("p_background", "probability a transparent pixel reports the depth behind the object"),
    ("p_missing", "probability a transparent pixel reports no depth"),
    ("p_noise", "probability a transparent pixel reports a noisy true depth"),
    ("noise_sigma", "sensor noise standard deviation, meters"),
    ("count", "number of samples written by gen"),
    ("eval_region", "evaluated pixels: mask (transparent only) or all"),
    ("source", "depth evaluated by eval: model, raw (sensor input) or gt"),
    ("inject_fault", "check only: corrupt one backward rule to prove the gradient checks fail"),
    ("data", "dataset directory"),
    ("out", "output directory (gen) or checkpoint path (train)"),
    ("ckpt", "checkpoint path"),
    ("input", "sample directory for predict"),
    ("out_depth", "predicted depth PNG path"),
    ("out_ply", "predicted point cloud PLY path"),
    ("loss_csv", "loss history CSV path (default: checkpoint path + .loss.csv)"),
];

/// Keys describing the architecture; stored next to every checkpoint.
pub const MODEL_KEYS: &[&str] = &[
    "height",
    "width",
    "modality",
    "embed_dim",
    "stage_depths",
    "heads",
    "window",
    "use_ffm",
    "ffm_reduction",
    "max_depth",
    "upsample",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub synth: SynthConfig,
    pub count: usize,
    pub eval_region: EvalRegion,
    pub source: EvalSource,
    pub inject_fault: bool,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub out_depth: Option<PathBuf>,
    pub out_ply: Option<PathBuf>,
    pub loss_csv: Option<PathBuf>,
}

/// What `eval` scores against ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EvalSource {
    #[default]
    Model,
    Raw,
    Gt,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let synth = SynthConfig { width: model.width, height: model.height, ..Default::default() };
        Self {
            model,
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            synth,
            count: 8,
            eval_region: EvalRegion::MaskOnly,
            source: EvalSource::Model,
            inject_fault: false,
            data: None,
            out: None,
            ckpt: None,
            input: None,
            out_depth: None,
            out_ply: None,
            loss_csv: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got `{v}`"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse_num(key, s.trim())).collect()
}

fn parse_four(key: &str, v: &str) -> Result<[usize; 4]> {
    let list: Vec<usize> = parse_list(key, v)?;
    list.try_into().map_err(|l: Vec<usize>| Error::Config(format!("{key}: expected 4 values, got {}", l.len())))
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn path_str(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl RunConfig {
    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let (m, t, l, s) = (&mut self.model, &mut self.train, &mut self.loss, &mut self.synth);
        match key {
            "seed" => t.seed = parse_num(key, v)?,
            "height" => {
                m.height = parse_num(key, v)?;
                s.height = m.height;
            }
            "width" => {
                m.width = parse_num(key, v)?;
                s.width = m.width;
            }
            "modality" => m.modality = v.parse()?,
            "embed_dim" => m.embed_dim = parse_num(key, v)?,
            "stage_depths" => m.stage_depths = parse_four(key, v)?,
            "heads" => m.heads = parse_four(key, v)?,
            "window" => m.window = parse_num(key, v)?,
            "use_ffm" => m.use_ffm = parse_bool(key, v)?,
            "ffm_reduction" => m.ffm_reduction = parse_num(key, v)?,
            "max_depth" => m.max_depth = parse_num(key, v)?,
            "upsample" => {
                m.upsample = match v {
                    "bilinear" => UpsampleMode::Bilinear,
                    "nearest" => UpsampleMode::Nearest,
                    _ => return Err(Error::Config(format!("{key}: expected bilinear or nearest, got `{v}`"))),
                }
            }
            "batch_size" => t.batch_size = parse_num(key, v)?,
            "lr" => t.lr = parse_num(key, v)?,
            "weight_decay" => t.weight_decay = parse_num(key, v)?,
            "epochs" => t.epochs = parse_num(key, v)?,
            "lr_milestones" => t.lr_milestones = parse_list(key, v)?,
            "lr_gamma" => t.lr_gamma = parse_num(key, v)?,
            "augment" => t.augment = parse_bool(key, v)?,
            "max_steps" => t.max_steps = Some(parse_num::<usize>(key, v)?).filter(|&n| n > 0),
            "threads" => t.threads = parse_num(key, v)?,
            "beta_normal" => l.beta_normal = parse_num(key, v)?,
            "alpha_masked" => l.alpha_masked = parse_num(key, v)?,
            "beta_unmasked" => l.beta_unmasked = parse_num(key, v)?,
            "min_objects" => s.min_objects = parse_num(key, v)?,
            "max_objects" => s.max_objects = parse_num(key, v)?,
            "shapes" => {
                s.shapes = v
                    .split(',')
                    .map(|p| match p.trim() {
                        "sphere" => Ok(ShapeKind::SphereCap),
                        "box" => Ok(ShapeKind::Box),
                        "cylinder" => Ok(ShapeKind::Cylinder),
                        o => Err(Error::Config(format!("{key}: unknown shape `{o}`"))),
                    })
                    .collect::<Result<_>>()?
            }
            "background_min" => s.background_depth.0 = parse_num(key, v)?,
            "background_max" => s.background_depth.1 = parse_num(key, v)?,
            "object_height_min" => s.object_height.0 = parse_num(key, v)?,
            "object_height_max" => s.object_height.1 = parse_num(key, v)?,
            "radius_min" => s.object_radius.0 = parse_num(key, v)?,
            "radius_max" => s.object_radius.1 = parse_num(key, v)?,
            "transparent_prob" => s.transparent_prob = parse_num(key, v)?,
            "transparent_alpha" => s.transparent_alpha = parse_num(key, v)?,
            "p_background" => s.corruption.p_background = parse_num(key, v)?,
            "p_missing" => s.corruption.p_missing = parse_num(key, v)?,
            "p_noise" => s.corruption.p_noise = parse_num(key, v)?,
            "noise_sigma" => s.corruption.sigma = parse_num(key, v)?,
            "count" => self.count = parse_num(key, v)?,
            "eval_region" => {
                self.eval_region = match v {
                    "mask" => EvalRegion::MaskOnly,
                    "all" => EvalRegion::AllPixels,
                    _ => return Err(Error::Config(format!("{key}: expected mask or all, got `{v}`"))),
                }
            }
            "source" => {
                self.source = match v {
                    "model" => EvalSource::Model,
                    "raw" => EvalSource::Raw,
                    "gt" => EvalSource::Gt,
                    _ => return Err(Error::Config(format!("{key}: expected model, raw or gt, got `{v}`"))),
                }
            }
            "inject_fault" => self.inject_fault = parse_bool(key, v)?,
            "data" => self.data = opt_path(v),
            "out" => self.out = opt_path(v),
            "ckpt" => self.ckpt = opt_path(v),
            "input" => self.input = opt_path(v),
            "out_depth" => self.out_depth = opt_path(v),
            "out_ply" => self.out_ply = opt_path(v),
            "loss_csv" => self.loss_csv = opt_path(v),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Text value of a key, as accepted by [`set`](Self::set).
    pub fn get(&self, key: &str) -> Option<String> {
        let (m, t, l, s) = (&self.model, &self.train, &self.loss, &self.synth);
        let shape_name = |k: &ShapeKind| match k {
            ShapeKind::SphereCap => "sphere",
            ShapeKind::Box => "box",
            ShapeKind::Cylinder => "cylinder",
        };
        Some(match key {
            "seed" => t.seed.to_string(),
            "height" => m.height.to_string(),
            "width" => m.width.to_string(),
            "modality" => m.modality.to_string(),
            "embed_dim" => m.embed_dim.to_string(),
            "stage_depths" => join(&m.stage_depths),
            "heads" => join(&m.heads),
            "window" => m.window.to_string(),
            "use_ffm" => m.use_ffm.to_string(),
            "ffm_reduction" => m.ffm_reduction.to_string(),
            "max_depth" => m.max_depth.to_string(),
            "upsample" => match m.upsample {
                UpsampleMode::Bilinear => "bilinear".into(),
                UpsampleMode::Nearest => "nearest".into(),
            },
            "batch_size" => t.batch_size.to_string(),
            "lr" => t.lr.to_string(),
            "weight_decay" => t.weight_decay.to_string(),
            "epochs" => t.epochs.to_string(),
            "lr_milestones" => join(&t.lr_milestones),
            "lr_gamma" => t.lr_gamma.to_string(),
            "augment" => t.augment.to_string(),
            "max_steps" => t.max_steps.unwrap_or(0).to_string(),
            "threads" => t.threads.to_string(),
            "beta_normal" => l.beta_normal.to_string(),
            "alpha_masked" => l.alpha_masked.to_string(),
            "beta_unmasked" => l.beta_unmasked.to_string(),
            "min_objects" => s.min_objects.to_string(),
            "max_objects" => s.max_objects.to_string(),
            "shapes" => s.shapes.iter().map(shape_name).collect::<Vec<_>>().join(","),
            "background_min" => s.background_depth.0.to_string(),
            "background_max" => s.background_depth.1.to_string(),
            "object_height_min" => s.object_height.0.to_string(),
            "object_height_max" => s.object_height.1.to_string(),
            "radius_min" => s.object_radius.0.to_string(),
            "radius_max" => s.object_radius.1.to_string(),
            "transparent_prob" => s.transparent_prob.to_string(),
            "transparent_alpha" => s.transparent_alpha.to_string(),
            "p_background" => s.corruption.p_background.to_string(),
            "p_missing" => s.corruption.p_missing.to_string(),
            "p_noise" => s.corruption.p_noise.to_string(),
            "noise_sigma" => s.corruption.sigma.to_string(),
            "count" => self.count.to_string(),
            "eval_region" => match self.eval_region {
                EvalRegion::MaskOnly => "mask".into(),
                EvalRegion::AllPixels => "all".into(),
            },
            "source" => match self.source {
                EvalSource::Model => "model".into(),
                EvalSource::Raw => "raw".into(),
                EvalSource::Gt => "gt".into(),
            },
            "inject_fault" => self.inject_fault.to_string(),
            "data" => path_str(&self.data),
            "out" => path_str(&self.out),
            "ckpt" => path_str(&self.ckpt),
            "input" => path_str(&self.input),
            "out_depth" => path_str(&self.out_depth),
            "out_ply" => path_str(&self.out_ply),
            "loss_csv" => path_str(&self.loss_csv),
            _ => return None,
        })
    }

    /// Applies `key = value` text. Blank lines and `#` comments are ignored;
    /// every bad line is reported.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut errors = Vec::new();
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                errors.push(format!("line {}: expected `key = value`, got `{line}`", n + 1));
                continue;
            };
            let key = key.trim();
            if seen.contains(&key) {
                errors.push(format!("line {}: key `{key}` given twice", n + 1));
                continue;
            }
            seen.push(key);
            if let Err(e) = self.set(key, value) {
                errors.push(format!("line {}: {}", n + 1, strip_kind(&e)));
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors.join("; ")))
        }
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), strip_kind(&e))))
    }

    /// `key = value` lines for `keys`.
    pub fn render(&self, keys: &[&str]) -> String {
        let mut out = String::new();
        for k in keys {
            let _ = writeln!(out, "{k} = {}", self.get(k).unwrap_or_default());
        }
        out
    }

    /// Checks every section that a command relies on.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.synth.validate()
    }
}

fn strip_kind(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

/// The key reference printed by `--help`.
pub fn key_reference() -> String {
    let defaults = RunConfig::default();
    let mut out = String::from("Config keys (file lines `key = value`, `#` starts a comment; flags override the file):\n");
    for (k, doc) in KEYS {
        let d = defaults.get(k).unwrap_or_default();
        let d = if d.is_empty() { "unset".to_string() } else { d };
        let _ = writeln!(out, "  {k:<18} {doc} [default: {d}]");
    }
    out
}
