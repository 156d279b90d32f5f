//! `key = value` configuration files.
//!
//! One assignment per line, `#` starts a comment, blank lines are ignored.
//! Every key is optional; missing keys take the defaults listed in
//! [`KEYS`].

use std::collections::HashSet;
use std::path::PathBuf;
use std::str::FromStr;

use crate::autoencoder::{AutoencoderConfig, StageSpec};
use crate::error::{Error, Result};
use crate::pipeline::ModelConfig;
use crate::train::{AdamConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    Random,
    Zero,
}

impl InitKind {
    pub fn name(self) -> &'static str {
        match self {
            InitKind::Random => "random",
            InitKind::Zero => "zero",
        }
    }
}

impl FromStr for InitKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "random" => Ok(InitKind::Random),
            "zero" => Ok(InitKind::Zero),
            other => Err(format!("unknown init '{other}' (expected random or zero)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub init: InitKind,
    /// Seeds parameter init and batch sampling.
    pub seed: u64,
    /// Sequences held out for validation, taken from the end of the dataset.
    pub val_seqs: usize,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            init: InitKind::Random,
            seed: 0,
            val_seqs: 16,
            data_dir: None,
            out_dir: None,
        }
    }
}

/// `(key, default, description)` for every recognised key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("height", "16", "frame height"),
    ("width", "16", "frame width"),
    ("channels", "1", "frame channels"),
    (
        "stages",
        "2x2,2x2",
        "autoencoder stages as SHUFFLExBLOCKS, comma separated",
    ),
    (
        "f_hidden_multiplier",
        "2",
        "hidden width of each coupling F, in group channels",
    ),
    ("coupling_kernel", "3", "coupling F kernel size (odd)"),
    ("predictor", "rpm", "rpm | stacked"),
    ("rpm_count", "4", "number of RPMs (or stacked ConvLSTM layers)"),
    ("cell_kernel", "3", "ConvLSTM kernel size (odd)"),
    ("frames_in", "6", "observed frames"),
    ("frames_out", "2", "predicted frames"),
    ("precision", "f32", "f32 | f64"),
    ("init", "random", "random | zero"),
    ("seed", "0", "seed for parameter init and batch sampling"),
    ("lr", "2e-4", "Adam learning rate (0 freezes parameters)"),
    ("beta1", "0.9", "Adam beta1"),
    ("beta2", "0.999", "Adam beta2"),
    ("adam_eps", "1e-8", "Adam epsilon"),
    ("steps", "2000", "optimizer steps"),
    ("batch", "8", "sequences per step"),
    ("clip_norm", "5.0", "global gradient norm cap (0 disables)"),
    ("backward", "reversible", "reversible | store"),
    ("val_every", "100", "validate every N steps (0 disables)"),
    ("val_seqs", "16", "held-out validation sequences"),
    ("data_dir", "", "dataset directory (overridden by --data)"),
    ("out_dir", "", "output directory (overridden by --out)"),
];

/// Key table formatted for `--help`.
pub fn keys_help() -> String {
    let mut s = String::from("config keys (key = value, # comments):\n");
    for (k, d, doc) in KEYS {
        let d = if d.is_empty() { "unset" } else { d };
        s.push_str(&format!("  {k:<20} {doc} [default: {d}]\n"));
    }
    s
}

pub fn parse_stages(s: &str) -> std::result::Result<Vec<StageSpec>, String> {
    s.split(',')
        .map(|part| {
            let (a, b) = part
                .trim()
                .split_once('x')
                .ok_or_else(|| format!("stage '{}' is not SHUFFLExBLOCKS", part.trim()))?;
            let shuffle = a.trim().parse().map_err(|_| format!("bad shuffle factor '{a}'"))?;
            let blocks = b.trim().parse().map_err(|_| format!("bad block count '{b}'"))?;
            Ok(StageSpec { shuffle, blocks })
        })
        .collect()
}

pub fn format_stages(stages: &[StageSpec]) -> String {
    stages
        .iter()
        .map(|s| format!("{}x{}", s.shuffle, s.blocks))
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_value<V: FromStr>(key: &str, value: &str) -> std::result::Result<V, String> {
    value
        .parse()
        .map_err(|_| format!("malformed value '{value}' for {key}"))
}

fn parse_enum<V: FromStr<Err = String>>(value: &str) -> std::result::Result<V, String> {
    value.parse()
}

fn apply(cfg: &mut Config, key: &str, value: &str) -> std::result::Result<(), String> {
    let m = &mut cfg.model;
    let t = &mut cfg.train;
    match key {
        "height" => m.frame.h = parse_value(key, value)?,
        "width" => m.frame.w = parse_value(key, value)?,
        "channels" => m.frame.c = parse_value(key, value)?,
        "stages" => m.autoencoder.stages = parse_stages(value)?,
        "f_hidden_multiplier" => m.autoencoder.f_hidden_multiplier = parse_value(key, value)?,
        "coupling_kernel" => m.autoencoder.kernel_size = parse_value(key, value)?,
        "predictor" => m.predictor = parse_enum(value)?,
        "rpm_count" => m.rpm_count = parse_value(key, value)?,
        "cell_kernel" => m.cell_kernel = parse_value(key, value)?,
        "frames_in" => m.frames_in = parse_value(key, value)?,
        "frames_out" => m.frames_out = parse_value(key, value)?,
        "precision" => m.precision = parse_enum(value)?,
        "init" => cfg.init = parse_enum(value)?,
        "seed" => {
            cfg.seed = parse_value(key, value)?;
            t.seed = cfg.seed;
        }
        "lr" => t.adam.lr = parse_value(key, value)?,
        "beta1" => t.adam.beta1 = parse_value(key, value)?,
        "beta2" => t.adam.beta2 = parse_value(key, value)?,
        "adam_eps" => t.adam.eps = parse_value(key, value)?,
        "steps" => t.steps = parse_value(key, value)?,
        "batch" => t.batch = parse_value(key, value)?,
        "clip_norm" => t.clip_norm = parse_value(key, value)?,
        "backward" => t.backward = parse_enum(value)?,
        "val_every" => t.val_every = parse_value(key, value)?,
        "val_seqs" => cfg.val_seqs = parse_value(key, value)?,
        "data_dir" => cfg.data_dir = Some(PathBuf::from(value)),
        "out_dir" => cfg.out_dir = Some(PathBuf::from(value)),
        _ => return Err(format!("unknown key '{key}'")),
    }
    Ok(())
}

fn check_ranges(cfg: &Config) -> Result<()> {
    let a: &AdamConfig = &cfg.train.adam;
    if !(a.lr >= 0.0 && a.lr.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "lr must be finite and >= 0, got {}",
            a.lr
        )));
    }
    if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
        return Err(Error::InvalidConfig("beta1 and beta2 must lie in [0, 1)".into()));
    }
    if !(a.eps > 0.0) {
        return Err(Error::InvalidConfig("adam_eps must be positive".into()));
    }
    if cfg.train.batch == 0 {
        return Err(Error::InvalidConfig("batch must be at least 1".into()));
    }
    if !cfg.train.clip_norm.is_finite() {
        return Err(Error::InvalidConfig("clip_norm must be finite".into()));
    }
    cfg.model.validate()?;
    Ok(())
}

/// Parses and validates a configuration. Errors cite 1-based line numbers.
pub fn parse_config(text: &str) -> Result<Config> {
    let mut cfg = Config::default();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let err = |message: String| Error::ConfigParse { line, message };
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| err(format!("expected 'key = value', found '{content}'")))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(err("missing key before '='".into()));
        }
        if !KEYS.iter().any(|(k, _, _)| *k == key) {
            return Err(err(format!("unknown key '{key}'")));
        }
        if value.is_empty() {
            return Err(err(format!("missing value for {key}")));
        }
        if !seen.insert(key.to_string()) {
            return Err(err(format!("duplicate key '{key}'")));
        }
        apply(&mut cfg, key, value).map_err(err)?;
    }
    check_ranges(&cfg)?;
    Ok(cfg)
}

/// Canonical text of the model-defining keys, one per line.
pub fn model_echo(m: &ModelConfig) -> String {
    let lines = [
        format!("height = {}", m.frame.h),
        format!("width = {}", m.frame.w),
        format!("channels = {}", m.frame.c),
        format!("stages = {}", format_stages(&m.autoencoder.stages)),
        format!("f_hidden_multiplier = {}", m.autoencoder.f_hidden_multiplier),
        format!("coupling_kernel = {}", m.autoencoder.kernel_size),
        format!("predictor = {}", m.predictor.name()),
        format!("rpm_count = {}", m.rpm_count),
        format!("cell_kernel = {}", m.cell_kernel),
        format!("frames_in = {}", m.frames_in),
        format!("frames_out = {}", m.frames_out),
        format!("precision = {}", m.precision.name()),
    ];
    let mut s = lines.join("\n");
    s.push('\n');
    s
}

/// Model configuration from text that may only contain model keys.
pub fn parse_model_echo(text: &str) -> Result<ModelConfig> {
    Ok(parse_config(text)?.model)
}

/// Same model with `depth` coupling blocks spread evenly over its stages.
pub fn with_depth(model: &ModelConfig, depth: usize) -> Result<ModelConfig> {
    let n = model.autoencoder.stages.len();
    if n == 0 || depth == 0 || depth % n != 0 {
        return Err(Error::InvalidConfig(format!(
            "depth {depth} does not divide evenly across {n} stages"
        )));
    }
    let mut m = model.clone();
    m.autoencoder = AutoencoderConfig {
        stages: model
            .autoencoder
            .stages
            .iter()
            .map(|s| StageSpec {
                shuffle: s.shuffle,
                blocks: depth / n,
            })
            .collect(),
        ..model.autoencoder.clone()
    };
    m.validate()?;
    Ok(m)
}
