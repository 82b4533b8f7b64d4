//! `cdngp`: generate synthetic scenes, train continual models, render,
//! evaluate and report sizes. Exit codes: 0 success, 1 runtime failure,
//! 2 usage or configuration error.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cdngp::accounting::{bandwidth_report, report_table, size_report};
use cdngp::checkpoint::load_checkpoint;
use cdngp::continual::{run_continual_with, RunOptions, StepRecord, TrainConfig};
use cdngp::encoders::Layout;
use cdngp::field::FusionMode;
use cdngp::scene::{
    dssim, generate_dataset, load_dataset, psnr, GenerateOptions, SceneDataset, SynthSceneSpec,
};
use cdngp::Error;
use clap::{Args, Parser, Subcommand};
use serde_json::{Map, Value};

#[derive(Parser, Debug)]
#[command(
    name = "cdngp",
    version,
    about = "Continual dynamic neural graphics primitives"
)]
struct Cli {
    /// Worker threads (defaults to CDNGP_THREADS, then all cores).
    #[arg(long, global = true, env = "CDNGP_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic multi-view dataset.
    Synth(SynthArgs),
    /// Train a continual model chunk by chunk.
    Train(TrainArgs),
    /// Render frames from a checkpoint.
    Render(EvalArgs),
    /// Render frames and score them against the dataset.
    Eval(EvalArgs),
    /// Print size and bandwidth reports of a checkpoint.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Scene description (JSON); defaults to two moving and two static blobs.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    width: Option<u32>,
    #[arg(long)]
    height: Option<u32>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Run directory; receives config.json, loss.csv, size.json and checkpoint/.
    #[arg(long)]
    out: PathBuf,
    /// Flat JSON config: dotted keys of the training config plus an optional "preset".
    #[arg(long)]
    config: Option<PathBuf>,
    /// Starting point before the config file: toy or paper.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    layout: Option<String>,
    #[arg(long)]
    fusion: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from the last complete chunk in <out>/checkpoint.
    #[arg(long)]
    resume: bool,
    /// Keep a grid snapshot per chunk for bit-exact replays.
    #[arg(long)]
    snapshot_grids: bool,
    /// Dotted overrides, e.g. `--set T_chunk=5` (also accepted as `--train.T_chunk=5`).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint directory.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory (cameras and ground truth).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for images or metrics.
    #[arg(long)]
    out: PathBuf,
    /// View to render; defaults to the held-out view.
    #[arg(long)]
    view: Option<usize>,
    /// Frame range `a..b`, a single frame, or all frames when omitted.
    #[arg(long)]
    frames: Option<String>,
    /// Use per-chunk grid snapshots when the checkpoint has them.
    #[arg(long)]
    snapshots: bool,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Also write the JSON report here.
    #[arg(long)]
    json: Option<PathBuf>,
}

/// Failure with its exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_usage() { 2 } else { 1 },
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

fn runtime(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Pulls `--train.KEY=VALUE` / `--train.KEY VALUE` out of argv.
fn split_dotted(args: Vec<String>) -> CliResult<(Vec<String>, Vec<String>)> {
    let mut rest = Vec::new();
    let mut dotted = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        match a.strip_prefix("--train.") {
            Some(kv) if kv.contains('=') => dotted.push(kv.to_string()),
            Some(k) => {
                let v = it
                    .next()
                    .ok_or_else(|| usage(format!("--train.{k} needs a value")))?;
                dotted.push(format!("{k}={v}"));
            }
            None => rest.push(a),
        }
    }
    Ok((rest, dotted))
}

fn flatten(v: &Value, prefix: &str, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(x, &key, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (k, v) in flat {
        let parts: Vec<&str> = k.split('.').collect();
        let mut node = &mut root;
        for p in &parts[..parts.len() - 1] {
            node = node
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("flattened keys never mix leaves and objects");
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Value::Object(root)
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn preset(name: &str, layout: Layout) -> CliResult<TrainConfig> {
    match name {
        "toy" => Ok(TrainConfig::toy(layout)),
        "paper" => Ok(TrainConfig::paper(layout)),
        other => Err(usage(format!(
            "unknown preset `{other}` (expected toy or paper)"
        ))),
    }
}

/// Effective training config: preset, then config file, then flags, then
/// dotted overrides. Unknown keys are rejected by name.
fn resolve_config(args: &TrainArgs, dotted: &[String]) -> CliResult<TrainConfig> {
    let mut file: BTreeMap<String, Value> = BTreeMap::new();
    if let Some(p) = &args.config {
        let text = fs::read_to_string(p)
            .map_err(|e| usage(format!("cannot read {}: {e}", p.display())))?;
        let v: Value =
            serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?;
        let Value::Object(m) = v else {
            return Err(usage(format!(
                "{}: config must be a JSON object",
                p.display()
            )));
        };
        for (k, v) in m {
            file.insert(k, v);
        }
    }
    let layout = match (&args.layout, file.get("field.layout")) {
        (Some(l), _) => l.clone(),
        (None, Some(Value::String(l))) => l.clone(),
        _ => "voxel".into(),
    };
    let layout: Layout = layout.parse().map_err(Failure::from)?;
    let preset_name = match (&args.preset, file.remove("preset")) {
        (Some(p), _) => p.clone(),
        (None, Some(Value::String(p))) => p,
        (None, Some(other)) => return Err(usage(format!("preset must be a string, got {other}"))),
        (None, None) => "toy".into(),
    };
    let base =
        serde_json::to_value(preset(&preset_name, layout)?).map_err(|e| runtime(e.to_string()))?;
    let mut flat = BTreeMap::new();
    flatten(&base, "", &mut flat);
    let file_keys: Vec<String> = file.keys().cloned().collect();
    let mut set = |k: &str, v: Value, origin: &str| -> CliResult<()> {
        match flat.get_mut(k) {
            Some(slot) => {
                *slot = v;
                Ok(())
            }
            None => Err(usage(format!("unknown config key `{k}` ({origin})"))),
        }
    };
    for (k, v) in file {
        set(&k, v, "config file")?;
    }
    set(
        "field.layout",
        Value::String(layout.name().into()),
        "--layout",
    )?;
    if let Some(f) = &args.fusion {
        let f: FusionMode = f.parse().map_err(Failure::from)?;
        set(
            "field.fusion",
            serde_json::to_value(f).map_err(|e| runtime(e.to_string()))?,
            "--fusion",
        )?;
    }
    if let Some(s) = args.seed {
        set("seed", Value::from(s), "--seed")?;
    }
    if args.snapshot_grids {
        set("snapshot_grids", Value::Bool(true), "--snapshot-grids")?;
    }
    for kv in args.set.iter().chain(dotted) {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("override `{kv}` is not KEY=VALUE")))?;
        set(k, parse_value(v), "override")?;
    }
    let mut cfg: TrainConfig = serde_json::from_value(unflatten(&flat))
        .map_err(|e| usage(format!("invalid config: {e}")))?;
    // The finest time resolution follows the chunk length unless set explicitly.
    let explicit_time_res = args.config.is_some()
        && file_keys.iter().any(|k| k == "field.temporal.n_max")
        || args
            .set
            .iter()
            .chain(dotted)
            .any(|kv| kv.starts_with("field.temporal.n_max="));
    if !explicit_time_res {
        cfg.field.temporal.n_max = (cfg.t_chunk as u32).max(cfg.field.temporal.n_min);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| runtime(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn to_json<T: serde::Serialize>(v: &T) -> CliResult<String> {
    serde_json::to_string_pretty(v).map_err(|e| runtime(e.to_string()))
}

fn cmd_synth(a: &SynthArgs) -> CliResult<()> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| usage(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str::<SynthSceneSpec>(&text)
                .map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => SynthSceneSpec::default(),
    };
    spec.seed = a.seed;
    let mut opts = GenerateOptions::default();
    if let Some(v) = a.views {
        opts.n_views = v;
    }
    if let Some(f) = a.frames {
        opts.n_frames = f;
    }
    if let Some(w) = a.width {
        opts.width = w;
    }
    if let Some(h) = a.height {
        opts.height = h;
    }
    let m = generate_dataset(&spec, &opts, a.seed, &a.out)?;
    println!(
        "wrote {} views x {} frames ({}x{}) to {}",
        m.n_views,
        m.n_frames,
        m.width,
        m.height,
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: &TrainArgs, dotted: &[String], threads: usize) -> CliResult<()> {
    let cfg = resolve_config(a, dotted)?;
    let ds = load_dataset(&a.data)?;
    fs::create_dir_all(&a.out).map_err(|e| runtime(format!("{}: {e}", a.out.display())))?;
    let echo = serde_json::json!({ "config": cfg, "seed": cfg.seed, "threads": threads, "dataset": a.data });
    write_text(&a.out.join("config.json"), &to_json(&echo)?)?;
    let ckpt = a.out.join("checkpoint");
    let loss_path = a.out.join("loss.csv");
    let append = a.resume && loss_path.is_file();
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(&loss_path)
        .map_err(|e| runtime(format!("{}: {e}", loss_path.display())))?;
    if !append {
        writeln!(
            log,
            "# loss components are batch means; total = photometric + weighted regularizers"
        )
        .and_then(|_| {
            writeln!(
                log,
                "chunk,step,lr,photometric,distortion,opacity,l1,total,samples"
            )
        })
        .map_err(|e| runtime(e.to_string()))?;
    }
    let mut io_error = None;
    let mut on_step = |r: &StepRecord| {
        let t = &r.terms;
        if let Err(e) = writeln!(
            log,
            "{},{},{},{},{},{},{},{},{}",
            r.chunk, r.step, r.lr, t.photometric, t.distortion, t.opacity, t.l1, r.total, r.samples
        ) {
            io_error.get_or_insert(e);
        }
    };
    let mut after = |repo: &cdngp::continual::ModelRepo, m: &cdngp::continual::BranchMetrics| {
        eprintln!(
            "chunk {}/{} done: {} steps, loss {:.5}",
            m.chunk + 1,
            repo.schedule.n_chunks(),
            m.iterations,
            m.tail_loss(50).unwrap_or(f64::NAN)
        );
        Ok(())
    };
    let summary = run_continual_with(
        &ds,
        &cfg,
        RunOptions {
            checkpoint_dir: Some(ckpt.clone()),
            resume: a.resume,
            stop_after: None,
            on_step: Some(&mut on_step),
            after_chunk: Some(&mut after),
        },
    )?;
    if let Some(e) = io_error {
        return Err(runtime(format!("{}: {e}", loss_path.display())));
    }
    let size = size_report(&summary.repo);
    let bw = bandwidth_report(&summary.repo);
    write_text(
        &a.out.join("size.json"),
        &to_json(&serde_json::json!({ "size": size, "bandwidth": bw }))?,
    )?;
    print!("{}", report_table(&size, &bw));
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

fn parse_frames(spec: Option<&str>, n: usize) -> CliResult<Vec<usize>> {
    let frames: Vec<usize> = match spec {
        None => (0..n).collect(),
        Some(s) => match s.split_once("..") {
            Some((a, b)) => {
                let a: usize = a
                    .parse()
                    .map_err(|_| usage(format!("bad frame range `{s}`")))?;
                let b: usize = b
                    .parse()
                    .map_err(|_| usage(format!("bad frame range `{s}`")))?;
                (a..b).collect()
            }
            None => vec![s.parse().map_err(|_| usage(format!("bad frame `{s}`")))?],
        },
    };
    if let Some(f) = frames.iter().find(|&&f| f >= n) {
        return Err(usage(format!("frame {f} is outside 0..{n}")));
    }
    if frames.is_empty() {
        return Err(usage("no frames requested"));
    }
    Ok(frames)
}

fn open_eval(
    a: &EvalArgs,
) -> CliResult<(cdngp::continual::ModelRepo, SceneDataset, usize, Vec<usize>)> {
    let repo = load_checkpoint(&a.ckpt)?;
    let ds = load_dataset(&a.data)?;
    if ds.n_frames() != repo.schedule.n_frames {
        return Err(usage("checkpoint and dataset disagree on the frame count"));
    }
    let view = a.view.unwrap_or(ds.held_out_view());
    if view >= ds.n_views() {
        return Err(usage(format!("view {view} is outside 0..{}", ds.n_views())));
    }
    let frames = parse_frames(a.frames.as_deref(), ds.n_frames())?;
    Ok((repo, ds, view, frames))
}

fn cmd_render(a: &EvalArgs) -> CliResult<()> {
    let (repo, ds, view, frames) = open_eval(a)?;
    let cam = &ds.cameras()[view];
    let dir = a.out.join(format!("view{view}"));
    fs::create_dir_all(&dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    for f in &frames {
        let (img, _) = repo.render_frame(cam, *f, a.snapshots)?;
        img.save_png(&dir.join(format!("{f:04}.png")))?;
    }
    println!("rendered {} frames to {}", frames.len(), dir.display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let (repo, ds, view, frames) = open_eval(a)?;
    let cam = &ds.cameras()[view];
    let mut rows = String::from("frame,chunk,psnr,dssim\n");
    let mut per_chunk: BTreeMap<usize, (f64, f64, usize)> = BTreeMap::new();
    for &f in &frames {
        let (img, _) = repo.render_frame(cam, f, a.snapshots)?;
        let gt = ds.frame(view, f)?;
        let (p, d) = (psnr(&img, &gt)?, dssim(&img, &gt)?);
        let k = repo.schedule.chunk_of_frame(f)?;
        let _ = writeln!(rows, "{f},{k},{p:.4},{d:.6}");
        let e = per_chunk.entry(k).or_default();
        e.0 += p;
        e.1 += d;
        e.2 += 1;
    }
    let mut chunks = String::from("chunk,frames,psnr,dssim\n");
    for (k, (p, d, n)) in &per_chunk {
        let _ = writeln!(chunks, "{k},{n},{:.4},{:.6}", p / *n as f64, d / *n as f64);
    }
    write_text(&a.out.join("metrics.csv"), &rows)?;
    write_text(&a.out.join("chunk_metrics.csv"), &chunks)?;
    print!("{chunks}");
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> CliResult<()> {
    let repo = load_checkpoint(&a.ckpt)?;
    repo.require_complete()?;
    let size = size_report(&repo);
    let bw = bandwidth_report(&repo);
    let json = to_json(&serde_json::json!({ "size": size, "bandwidth": bw }))?;
    if let Some(p) = &a.json {
        write_text(p, &json)?;
    }
    print!("{}", report_table(&size, &bw));
    println!("{json}");
    Ok(())
}

fn run() -> CliResult<()> {
    let (args, dotted) = split_dotted(std::env::args().collect())?;
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return match code {
                0 => Ok(()),
                _ => Err(Failure {
                    code: 2,
                    message: String::new(),
                }),
            };
        }
    };
    let threads = match cli.threads {
        Some(0) => return Err(usage("--threads must be at least 1")),
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| runtime(e.to_string()))?;
    if !dotted.is_empty() && !matches!(cli.command, Command::Train(_)) {
        return Err(usage("--train.* overrides only apply to `train`"));
    }
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a, &dotted, threads),
        Command::Render(a) => cmd_render(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            if !f.message.is_empty() {
                eprintln!("error: {}", f.message);
            }
            ExitCode::from(f.code)
        }
    }
}
