//! Command-line entry point.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use crate::audit::{memory_profile, verify};
use crate::config::{keys_help, parse_config, Config, InitKind};
use crate::data::DatasetKind;
use crate::io::{atomic_write, load_checkpoint, peek_checkpoint_config, read_tensor, save_checkpoint, tensor4_bytes};
use crate::ledger::Category;
use crate::pipeline::{rollout, ModelConfig, ModelParams};
use crate::tensor::{Precision, Scalar, Tensor3, Tensor4};
use crate::train::{train, BackwardMode, MetricsRow, METRICS_HEADER};

const DATASET_MANIFEST: &str = "dataset.txt";

#[derive(Debug, Parser)]
#[command(name = "crevnet", version, about = "Conditionally reversible video prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset as one tensor file per sequence.
    Generate {
        #[arg(long, value_parser = parse_dataset)]
        dataset: DatasetKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        seqs: usize,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model; writes model.ckpt and metrics.csv.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory; overrides data_dir from the config.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory; overrides out_dir from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Roll a checkpoint forward from observed frames.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        /// Tensor file of observed frames (T, H, W, C), T >= 2.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 1)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the invertibility, reversal and gradient audits.
    Verify {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = parse_precision)]
        precision: Option<Precision>,
    },
    /// Stored-activation peaks per coupling depth, both backward modes.
    BenchMem {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "4,8,16")]
        depths: Vec<usize>,
    },
}

fn parse_dataset(s: &str) -> std::result::Result<DatasetKind, String> {
    s.parse()
}

fn parse_precision(s: &str) -> std::result::Result<Precision, String> {
    s.parse()
}

type CliResult<T> = std::result::Result<T, String>;

fn at<T, E: Display>(path: &Path, r: std::result::Result<T, E>) -> CliResult<T> {
    r.map_err(|e| format!("{}: {e}", path.display()))
}

fn msg<T, E: Display>(r: std::result::Result<T, E>) -> CliResult<T> {
    r.map_err(|e| e.to_string())
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn dispatch<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cmd = Cli::command().after_help(keys_help());
    let cli = match cmd.try_get_matches_from(args).and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn run(command: Command) -> CliResult<i32> {
    match command {
        Command::Generate {
            dataset,
            out,
            seqs,
            frames,
            size,
            seed,
        } => generate(dataset, &out, seqs, frames, size, seed),
        Command::Train { config, data, out } => train_cmd(&config, data, out),
        Command::Predict {
            ckpt,
            input,
            steps,
            out,
        } => predict(&ckpt, &input, steps, &out),
        Command::Verify { config, precision } => verify_cmd(&config, precision),
        Command::BenchMem { config, depths } => bench_mem(&config, &depths),
    }
}

fn load_config(path: &Path) -> CliResult<Config> {
    let text = at(path, fs::read_to_string(path))?;
    at(path, parse_config(&text))
}

fn seq_name(i: usize) -> String {
    format!("seq_{i:05}.crvt")
}

fn generate(kind: DatasetKind, out: &Path, seqs: usize, frames: usize, size: usize, seed: u64) -> CliResult<i32> {
    if seqs == 0 {
        return Err("--seqs must be positive".into());
    }
    if out.exists() && at(out, fs::read_dir(out))?.next().is_some() {
        return Err(format!("{}: already exists and is not empty", out.display()));
    }
    let data = msg(kind.generate::<f32>(seqs, frames, size, seed))?;
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = out.file_name().and_then(|n| n.to_str()).unwrap_or("dataset");
    let tmp = parent.join(format!(".{name}.tmp-{}", std::process::id()));
    let result = (|| {
        at(&tmp, fs::create_dir_all(&tmp))?;
        for (i, s) in data.iter().enumerate() {
            let path = tmp.join(seq_name(i));
            at(&path, fs::write(&path, msg(tensor4_bytes(s))?))?;
        }
        let manifest = format!(
            "dataset = {}\nseqs = {seqs}\nframes = {frames}\nheight = {size}\nwidth = {size}\nchannels = {}\nseed = {seed}\n",
            kind.name(),
            kind.channels()
        );
        let path = tmp.join(DATASET_MANIFEST);
        at(&path, fs::write(&path, manifest))?;
        if out.exists() {
            at(out, fs::remove_dir(out))?;
        }
        at(out, fs::rename(&tmp, out))
    })();
    if result.is_err() {
        let _ = fs::remove_dir_all(&tmp);
    }
    result?;
    println!("wrote {seqs} {} sequences to {}", kind.name(), out.display());
    Ok(0)
}

fn load_dataset<T: Scalar>(dir: &Path) -> CliResult<Vec<Tensor4<T>>> {
    let mut paths: Vec<PathBuf> = at(dir, fs::read_dir(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "crvt"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(format!("{}: no .crvt sequences found", dir.display()));
    }
    paths
        .iter()
        .map(|p| at(p, read_tensor(p).and_then(|b| b.convert_tensor4::<T>())))
        .collect()
}

fn init_params<T: Scalar>(config: &Config) -> CliResult<ModelParams<T>> {
    msg(match config.init {
        InitKind::Random => ModelParams::seeded(&config.model, config.seed),
        InitKind::Zero => ModelParams::zeros(&config.model),
    })
}

fn train_cmd(config_path: &Path, data: Option<PathBuf>, out: Option<PathBuf>) -> CliResult<i32> {
    let config = load_config(config_path)?;
    let data = data
        .or_else(|| config.data_dir.clone())
        .ok_or("no dataset: pass --data or set data_dir")?;
    let out = out
        .or_else(|| config.out_dir.clone())
        .ok_or("no output directory: pass --out or set out_dir")?;
    match config.model.precision {
        Precision::F32 => train_at::<f32>(&config, &data, &out),
        Precision::F64 => train_at::<f64>(&config, &data, &out),
    }
}

fn train_at<T: Scalar>(config: &Config, data: &Path, out: &Path) -> CliResult<i32> {
    let seqs = load_dataset::<T>(data)?;
    if config.val_seqs >= seqs.len() {
        return Err(format!(
            "val_seqs = {} leaves no training data among {} sequences",
            config.val_seqs,
            seqs.len()
        ));
    }
    let (train_set, val_set) = seqs.split_at(seqs.len() - config.val_seqs);
    let mut params = init_params::<T>(config)?;
    let tc = crate::train::TrainConfig {
        seed: config.seed,
        ..config.train.clone()
    };
    let rows = msg(train(
        &mut params,
        &config.model,
        train_set,
        val_set,
        &tc,
        |r: &MetricsRow| {
            if r.store_fallbacks > 0 {
                eprintln!(
                    "warning: step {}: reconstruction diverged on {} sequence(s); used stored-activation backward",
                    r.step, r.store_fallbacks
                );
            }
            if let (Some(v), Some(b)) = (r.val_mse, r.baseline_mse) {
                println!("step {:>6}  val_mse {v:.6e}  baseline_mse {b:.6e}", r.step);
            }
        },
    ))?;
    let mut csv = String::from(METRICS_HEADER);
    csv.push('\n');
    for r in &rows {
        csv.push_str(&r.csv());
        csv.push('\n');
    }
    at(out, fs::create_dir_all(out))?;
    let ckpt = out.join("model.ckpt");
    at(&ckpt, save_checkpoint(&ckpt, &params, &config.model))?;
    let metrics = out.join("metrics.csv");
    at(&metrics, atomic_write(&metrics, csv.as_bytes()))?;
    println!("wrote {} and {}", ckpt.display(), metrics.display());
    Ok(0)
}

/// Binary graymap with the channels laid side by side.
pub fn pgm_bytes<T: Scalar>(frame: &Tensor3<T>) -> Vec<u8> {
    let s = frame.shape();
    let mut out = format!("P5\n{} {}\n255\n", s.w * s.c, s.h).into_bytes();
    for y in 0..s.h {
        for c in 0..s.c {
            for x in 0..s.w {
                let v = frame.at(y, x, c).as_f64().clamp(0.0, 1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
    }
    out
}

fn predict(ckpt: &Path, input: &Path, steps: usize, out: &Path) -> CliResult<i32> {
    if steps == 0 {
        return Err("--steps must be positive".into());
    }
    let model = at(ckpt, peek_checkpoint_config(ckpt))?;
    match model.precision {
        Precision::F32 => predict_at::<f32>(ckpt, input, steps, out),
        Precision::F64 => predict_at::<f64>(ckpt, input, steps, out),
    }
}

fn predict_at<T: Scalar>(ckpt: &Path, input: &Path, steps: usize, out: &Path) -> CliResult<i32> {
    let (params, model): (ModelParams<T>, ModelConfig) = at(ckpt, load_checkpoint(ckpt))?;
    let obs = at(input, read_tensor(input).and_then(|b| b.convert_tensor4::<T>()))?;
    let pred = at(input, rollout(&obs, steps, &params, &model))?;
    // everything is rendered before the first write
    let mut files = vec![("prediction.crvt".to_string(), msg(tensor4_bytes(&pred))?)];
    for t in 0..steps {
        files.push((format!("frame_{t:03}.pgm"), pgm_bytes(&pred.frame(t))));
    }
    at(out, fs::create_dir_all(out))?;
    for (name, bytes) in &files {
        let path = out.join(name);
        at(&path, atomic_write(&path, bytes))?;
    }
    println!("wrote {steps} predicted frames to {}", out.display());
    Ok(0)
}

fn verify_cmd(config_path: &Path, precision: Option<Precision>) -> CliResult<i32> {
    let config = load_config(config_path)?;
    let precision = precision.unwrap_or(config.model.precision);
    let report = msg(verify(&config.model, config.init, precision, config.seed))?;
    println!("{report}");
    Ok(if report.all_passed() { 0 } else { 1 })
}

fn bench_mem(config_path: &Path, depths: &[usize]) -> CliResult<i32> {
    let config = load_config(config_path)?;
    if depths.is_empty() {
        return Err("--depths is empty".into());
    }
    let mut header = format!("{:>6} {:>10}", "depth", "mode");
    for c in Category::ALL {
        header.push_str(&format!(" {:>15}", c.name()));
    }
    header.push_str(&format!(" {:>12}", "total_peak"));
    println!("{header}");
    let mut reversible_stack = Vec::new();
    for &d in depths {
        for mode in [BackwardMode::Reversible, BackwardMode::StoreAll] {
            let ledger = msg(memory_profile(&config.model, d, mode))?;
            let mut row = format!("{d:>6} {:>10}", mode.name());
            for c in Category::ALL {
                row.push_str(&format!(" {:>15}", ledger.peak(c)));
            }
            row.push_str(&format!(" {:>12}", ledger.total_peak()));
            println!("{row}");
            if mode == BackwardMode::Reversible {
                reversible_stack.push(ledger.peak(Category::CouplingStack));
            }
        }
    }
    let equal = reversible_stack.iter().all(|&p| p == reversible_stack[0]);
    println!(
        "reversible coupling_stack peaks {} across depths",
        if equal { "equal" } else { "differ" }
    );
    Ok(0)
}
