//! `anc`: generate synthetic data, train, evaluate, match, export heatmaps
//! and benchmark the 4D convolution.

mod config;
mod dataset;
mod pgm;

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anc_core::error::AncError;
use anc_core::eval::{bench_conv4d, evaluate_model, evaluate_with, identity_keypoints, PckConfig, Reference};
use anc_core::features::{load_feature_pair, DEFAULT_STRIDE};
use anc_core::matching::{match_dense, match_pixel, softmax_probabilities, to_pixel, Direction};
use anc_core::model::Model;
use anc_core::training::{checkpoint_load, checkpoint_save, train_epoch, TrainState};
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use config::{Keys, Settings};

#[derive(Debug, Parser)]
#[command(name = "anc", version, about = "Adaptive neighbourhood consensus correspondence engine")]
struct Cli {
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, env = "ANC_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset: feature files, pairs.json and manifest.json.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        keys: Keys,
    },
    /// Run the phase schedule on a dataset, checkpointing after every epoch.
    Train {
        /// Checkpoint directory.
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint in `--out`.
        #[arg(long)]
        resume: bool,
        /// Stop after this many epochs; `--resume` continues later.
        #[arg(long)]
        max_epochs: Option<usize>,
        #[command(flatten)]
        keys: Keys,
    },
    /// PCK of a checkpoint (or the identity mapping) on a dataset.
    Eval {
        #[arg(long, required_unless_present = "identity")]
        checkpoint: Option<PathBuf>,
        /// Evaluate the identity mapping instead of a model.
        #[arg(long)]
        identity: bool,
        /// PCK threshold fraction.
        #[arg(long = "pck-alpha", default_value_t = 0.1)]
        pck_alpha: f64,
        /// `image` or `bounding_box`.
        #[arg(long, default_value = "image")]
        reference: String,
        #[command(flatten)]
        keys: Keys,
    },
    /// Match keypoints (or every cell) between two feature files.
    Match {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Source pixels as `x,y;x,y;...`.
        #[arg(long = "points")]
        points: Option<String>,
        /// One record per source cell.
        #[arg(long)]
        dense: bool,
        #[command(flatten)]
        keys: Keys,
    },
    /// Export one source cell's matching probabilities as a PGM image.
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Source cell as `row,col`.
        #[arg(long, conflicts_with = "point")]
        cell: Option<String>,
        /// Source pixel as `x,y`; its nearest cell is used.
        #[arg(long)]
        point: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        keys: Keys,
    },
    /// Time naive and fast conv4d and check they agree.
    Bench {
        /// Volume extents, e.g. `4,8,12`.
        #[arg(long, default_value = "4,6,8,10")]
        sizes: String,
        /// Channel counts used for input and output.
        #[arg(long = "bench-channels", default_value = "1,4")]
        bench_channels: String,
        #[arg(long, default_value_t = 3)]
        repetitions: usize,
        /// Print the JSON report instead of a table.
        #[arg(long)]
        json: bool,
    },
}

fn parse_list<T: std::str::FromStr>(what: &str, s: &str, sep: char) -> Result<Vec<T>, AncError> {
    s.split(sep)
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<T>())
        .collect::<Result<_, _>>()
        .map_err(|_| AncError::InvalidArgument(format!("{what}: cannot parse {s:?}")))
}

fn parse_xy(what: &str, s: &str) -> Result<[f64; 2], AncError> {
    let v: Vec<f64> = parse_list(what, s, ',')?;
    match v[..] {
        [x, y] => Ok([x, y]),
        _ => Err(AncError::InvalidArgument(format!("{what}: expected two numbers, got {s:?}"))),
    }
}

/// `println!` that reports a closed stdout as an error instead of panicking.
macro_rules! out {
    ($($arg:tt)*) => {
        writeln!(std::io::stdout().lock(), $($arg)*)?
    };
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    out!("{}", serde_json::to_string_pretty(v).expect("report serializes"));
    Ok(())
}

fn cmd_gen(out: &Path, s: &Settings) -> Result<()> {
    let spec = dataset::GenSpec {
        pairs: s.get("pairs", 10)?,
        seed: s.get("seed", 0)?,
        height: s.get("height", 16)?,
        width: s.get("width", 16)?,
        depth: s.get("depth", 32)?,
        stride: s.get("stride", DEFAULT_STRIDE)?,
        keypoints: s.get("keypoints", 20)?,
        noise_std: s.get("noise_std", 0.3)?,
        max_shift: s.get("max_shift", 4)?,
        flips: s.get("flips", true)?,
    };
    let ann = dataset::generate(out, &spec)?;
    out!("wrote {} pairs to {}", ann.pairs.len(), out.display());
    Ok(())
}

fn append_log(path: &Path, line: &str) -> Result<(), AncError> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| AncError::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| AncError::io(path, e))
}

fn cmd_train(out: &Path, resume: bool, max_epochs: Option<usize>, s: &Settings) -> Result<()> {
    let (mut model, cfg, mut state) = if resume {
        checkpoint_load(out).with_context(|| format!("resuming from {}", out.display()))?
    } else {
        let model_cfg = s.model()?;
        let cfg = s.train()?;
        let model = Model::new(model_cfg, cfg.seed)?;
        let state = TrainState::new(&model, &cfg);
        (model, cfg, state)
    };
    let data = config::load_data(s, "data")?;
    config::ensure_dir(out)?;
    let log = out.join("train.log");
    if !resume && log.exists() {
        std::fs::remove_file(&log).map_err(|e| AncError::io(&log, e))?;
    }
    let stop = state.epoch + max_epochs.unwrap_or(usize::MAX).min(cfg.total_epochs());
    while state.epoch < cfg.total_epochs().min(stop) {
        let r = train_epoch(&data, &mut model, &cfg, &mut state).context("training")?;
        let line = format!(
            "epoch {} phase {} kernel {} L_k {:.6} L_o {:.6}",
            r.epoch,
            r.phase + 1,
            r.gaussian_kernel,
            r.mean_keypoint_loss,
            r.mean_orthogonal_loss
        );
        out!("{line}");
        append_log(&log, &line)?;
        checkpoint_save(out, &model, &cfg, &state)?;
    }
    checkpoint_save(out, &model, &cfg, &state)?;
    Ok(())
}

fn cmd_eval(checkpoint: Option<&Path>, pck: PckConfig, s: &Settings) -> Result<()> {
    let data = config::load_data(s, "data")?;
    let report = match checkpoint {
        Some(c) => {
            let (model, _, _) = checkpoint_load(c)?;
            evaluate_model(&model, &data, &pck)?
        }
        None => evaluate_with(&data, &pck, |p| Ok(identity_keypoints(p)))?,
    };
    print_json(&report)?;
    Ok(())
}

#[derive(Serialize)]
struct MatchReport {
    schema_version: u32,
    direction: Direction,
    matches: Vec<anc_core::matching::MatchRecord>,
}

fn load_pair(source: &Path, target: &Path, s: &Settings) -> Result<(Model, anc_core::matching::ProbabilityMap4D, usize)> {
    let stride = s.get("stride", DEFAULT_STRIDE)?;
    let (fs, ft) = load_feature_pair(source, target, stride)?;
    let ckpt = s.path("checkpoint")?;
    let (model, _, _) = checkpoint_load(&ckpt)?;
    let c = model.predict(&fs, &ft)?;
    let v = softmax_probabilities(&c, Direction::SourceToTarget)?;
    Ok((model, v, stride))
}

fn cmd_match(source: &Path, target: &Path, points: Option<&str>, dense: bool, s: &Settings) -> Result<()> {
    let (_, v, stride) = load_pair(source, target, s)?;
    let matches = match (points, dense) {
        (_, true) => match_dense(&v, stride)?,
        (Some(p), false) => p
            .split(';')
            .filter(|t| !t.trim().is_empty())
            .map(|t| {
                let [x, y] = parse_xy("points", t)?;
                match_pixel(&v, x, y, stride)
            })
            .collect::<Result<_, _>>()?,
        (None, false) => bail!(AncError::InvalidArgument("give --points or --dense".into())),
    };
    print_json(&MatchReport {
        schema_version: 1,
        direction: Direction::SourceToTarget,
        matches,
    })
}

fn cmd_heatmap(source: &Path, target: &Path, cell: Option<&str>, point: Option<&str>, out: &Path, s: &Settings) -> Result<()> {
    let (_, v, stride) = load_pair(source, target, s)?;
    let (h, w) = v.query_grid();
    let (i, j) = match (cell, point) {
        (Some(c), _) => {
            let rc: Vec<usize> = parse_list("cell", c, ',')?;
            match rc[..] {
                [r, c] => (r, c),
                _ => bail!(AncError::InvalidArgument(format!("cell: expected row,col, got {c:?}"))),
            }
        }
        (None, Some(p)) => {
            let [x, y] = parse_xy("point", p)?;
            let near = |q: f64, n: usize| anc_core::matching::from_pixel(q, stride).round().clamp(0.0, (n - 1) as f64) as usize;
            (near(y, h), near(x, w))
        }
        (None, None) => bail!(AncError::InvalidArgument("give --cell or --point".into())),
    };
    if i >= h || j >= w {
        bail!(AncError::InvalidArgument(format!("cell ({i},{j}) outside the {h}x{w} source grid")));
    }
    let (ht, wt) = v.result_grid();
    pgm::write(out, wt, ht, &v.slice(i, j))?;
    out!(
        "wrote {}x{} heatmap for source cell ({i},{j}) at pixel ({}, {}) to {}",
        wt,
        ht,
        to_pixel(j as f64, stride),
        to_pixel(i as f64, stride),
        out.display()
    );
    Ok(())
}

fn cmd_bench(sizes: &str, channels: &str, repetitions: usize, json: bool) -> Result<()> {
    let sizes: Vec<usize> = parse_list("sizes", sizes, ',')?;
    let channels: Vec<usize> = parse_list("bench-channels", channels, ',')?;
    let report = bench_conv4d(&sizes, &channels, &[[5, 5, 5, 5], [3, 3, 5, 5], [5, 5, 3, 3]], repetitions, 0)?;
    if json {
        print_json(&report)?;
        return Ok(());
    }
    out!("size  c  kernel        naive_ms   fast_ms  f32_ms   speedup  max_abs_diff");
    for r in &report.rows {
        out!(
            "{:>4} {:>2}  {:<12} {:>9.2} {:>9.2} {:>7.2} {:>8.1}x  {:.2e}",
            r.size,
            r.c_in,
            format!("{}x{}x{}x{}", r.kernel[0], r.kernel[1], r.kernel[2], r.kernel[3]),
            r.naive_ms,
            r.fast_ms,
            r.fast_f32_ms,
            r.speedup,
            r.max_abs_diff
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { out, keys } => cmd_gen(&out, &Settings::load(&keys)?),
        Command::Train {
            out,
            resume,
            max_epochs,
            keys,
        } => cmd_train(&out, resume, max_epochs, &Settings::load(&keys)?),
        Command::Eval {
            checkpoint,
            identity,
            pck_alpha,
            reference,
            keys,
        } => {
            let pck = PckConfig {
                alpha: pck_alpha,
                reference: reference.parse::<Reference>()?,
            };
            pck.validate()?;
            let checkpoint = if identity { None } else { checkpoint };
            cmd_eval(checkpoint.as_deref(), pck, &Settings::load(&keys)?)
        }
        Command::Match {
            checkpoint,
            source,
            target,
            points,
            dense,
            keys,
        } => {
            let s = Settings::load(&keys)?.with("checkpoint", &checkpoint);
            cmd_match(&source, &target, points.as_deref(), dense, &s)
        }
        Command::Heatmap {
            checkpoint,
            source,
            target,
            cell,
            point,
            out,
            keys,
        } => {
            let s = Settings::load(&keys)?.with("checkpoint", &checkpoint);
            cmd_heatmap(&source, &target, cell.as_deref(), point.as_deref(), &out, &s)
        }
        Command::Bench {
            sizes,
            bench_channels,
            repetitions,
            json,
        } => cmd_bench(&sizes, &bench_channels, repetitions, json),
    }
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    e.chain()
        .find_map(|c| c.downcast_ref::<AncError>())
        .map_or("error", AncError::kind)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli.threads;
    let result = match threads {
        Some(n) => anc_core::with_threads(n, || run(cli)),
        None => run(cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        // a reader such as `head` closing the pipe early is not a failure
        Err(e) if e.chain().any(|c| c.downcast_ref::<std::io::Error>().is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe)) => {
            ExitCode::SUCCESS
        }
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error[{}]: {msg}", error_kind(&e));
            ExitCode::FAILURE
        }
    }
}
