//! `rra`: dataset generation, training, evaluation, heatmaps and sweeps.
//!
//! Exit codes: 0 success, 1 internal numeric fault, 2 usage / configuration /
//! data / I/O error, 3 non-finite training loss, 4 unreadable checkpoint.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rra_core::checkpoint;
use rra_core::config::KeyValues;
use rra_core::data::store::{load_dataset, save_dataset, MANIFEST};
use rra_core::data::synthetic::{generate_synthetic, SyntheticSpec, SPEC_KEYS};
use rra_core::data::Dataset;
use rra_core::harness::{self, SweepKind, SweepPlan};
use rra_core::trainer::{self, evaluate, fit_to_dataset, test_inputs, EvalProtocol, TrainConfig, TrainState, TRAIN_KEYS};
use rra_core::visualizer::{self, heatmap_filename, Colormap, RenderSpec};
use rra_core::{Error, Result};

const CHECKPOINT: &str = "model.ckpt";
const METRICS: &str = "metrics.csv";
const SNAPSHOT: &str = "config.cfg";

#[derive(Parser)]
#[command(name = "rra", version, about = "Redundancy-reduction attention on synthetic videos")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic planted-pattern dataset.
    Gen(GenArgs),
    /// Train a model and write checkpoint, metrics and config snapshot.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Render attention-influence and suppression heatmaps for one video.
    Viz(VizArgs),
    /// Run an ablation sweep over seeds.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// key = value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    /// File keys with `--set` overrides on top; unknown keys are rejected.
    fn layered(&self) -> Result<KeyValues> {
        let mut kv = match &self.config {
            Some(p) => KeyValues::load(p)?,
            None => KeyValues::new(),
        };
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set {s}: expected KEY=VALUE")))?;
            kv.set(k.trim(), v.trim());
        }
        let known: Vec<&str> = TRAIN_KEYS.iter().chain(SPEC_KEYS).copied().collect();
        kv.check_known(&known)?;
        Ok(kv)
    }
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Output dataset directory (created if missing)
    #[arg(long)]
    out: PathBuf,
    /// Generator seed (`data_seed`)
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    glimpses: Option<usize>,
    /// Loss terms joined by `+`, e.g. `lc+li+le`
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Continue from `<out>/model.ckpt` when present
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct ProtocolArgs {
    /// Temporal segments per video
    #[arg(long)]
    segments: Option<usize>,
    /// Spatial crops per frame (1 or 5)
    #[arg(long)]
    crops: Option<usize>,
    /// Add horizontally flipped crops
    #[arg(long)]
    flip: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    protocol: ProtocolArgs,
    /// Write `class,videos,accuracy` rows here
    #[arg(long)]
    per_class_csv: Option<PathBuf>,
}

#[derive(Args)]
struct VizArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Video id from either split
    #[arg(long)]
    video: String,
    #[arg(long)]
    out: PathBuf,
    /// Frames sampled from the video
    #[arg(long, default_value_t = 4)]
    frames: usize,
    /// Gaussian blur sigma in pixels
    #[arg(long, default_value_t = 2.0)]
    sigma: f64,
    #[arg(long, default_value_t = Colormap::Jet)]
    colormap: Colormap,
    /// Heatmap opacity over the frame
    #[arg(long, default_value_t = 0.6)]
    alpha: f64,
    /// `k,m`: glimpse k (1-based) and its m most suppressed channels
    #[arg(long, value_name = "K,M")]
    suppression: Option<String>,
}

#[derive(Args)]
struct SweepArgs {
    /// losses | glimpses | components | parallel
    kind: String,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Glimpse counts for `glimpses`
    #[arg(long, value_delimiter = ',')]
    k: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFiniteLoss { .. } => 3,
        Error::CorruptCheckpoint(_) | Error::CheckpointVersion { .. } => 4,
        Error::Tensor(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Viz(a) => cmd_viz(&a),
        Command::Sweep(a) => cmd_sweep(&a),
    };
    match run {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(io(path))
}

fn cmd_gen(a: &GenArgs) -> Result<()> {
    let mut kv = a.cfg.layered()?;
    if let Some(s) = a.seed {
        kv.set("data_seed", s);
    }
    let spec = SyntheticSpec::from_kv(&kv)?;
    let data = generate_synthetic(&spec)?;
    save_dataset(&a.out, &spec, &data)?;
    println!(
        "wrote {} train and {} test videos ({} classes) to {}",
        data.train.len(),
        data.test.len(),
        data.num_classes,
        a.out.display()
    );
    println!("manifests: {0}/train/{MANIFEST}, {0}/test/{MANIFEST}", a.out.display());
    Ok(())
}

/// `base` keys with the dedicated flags on top. On resume only the
/// schedule (`--epochs`, `--lr`) may change.
fn resolve_train(mut kv: KeyValues, a: &TrainArgs, resume: bool) -> Result<TrainConfig> {
    if let Some(e) = a.epochs {
        kv.set("epochs", e);
    }
    if let Some(lr) = a.lr {
        kv.set("lr", lr);
    }
    if !resume {
        if let Some(s) = a.seed {
            kv.set("seed", s);
        }
        if let Some(k) = a.glimpses {
            kv.set("glimpses", k);
        }
        if let Some(l) = &a.loss {
            kv.set("loss", l);
        }
        if let Some(b) = a.batch_size {
            kv.set("batch_size", b);
        }
    }
    TrainConfig::from_kv(&kv)
}

fn load_data(dir: &Path) -> Result<Dataset> {
    Ok(load_dataset(dir)?.1)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let data = load_data(&a.data)?;
    let ckpt = a.out.join(CHECKPOINT);
    let (config, mut state) = if a.resume && ckpt.exists() {
        let (saved, state) = checkpoint::load(&ckpt)?;
        let config = resolve_train(saved.to_kv(), a, true)?;
        eprintln!("resuming at epoch {}", state.epoch);
        (config, state)
    } else {
        let mut config = resolve_train(a.cfg.layered()?, a, false)?;
        fit_to_dataset(&mut config, &data)?;
        let state = TrainState::new(&config)?;
        (config, state)
    };
    create_dir(&a.out)?;
    let snapshot = a.out.join(SNAPSHOT);
    std::fs::write(&snapshot, config.to_kv().to_text()).map_err(io(&snapshot))?;
    let metrics = a.out.join(METRICS);
    trainer::train(&mut state, &config, &data, |st, rec| {
        let eval = rec.eval_top1.map(|t| format!(" top1 {t:.4}")).unwrap_or_default();
        eprintln!("epoch {} lr {:.3e} loss {:.5}{eval}", rec.epoch, rec.lr, rec.train_loss);
        checkpoint::save(&ckpt, &config, st)?;
        trainer::write_metrics(&metrics, &config.loss, &st.history)
    })?;
    if state.history.is_empty() {
        checkpoint::save(&ckpt, &config, &state)?;
        trainer::write_metrics(&metrics, &config.loss, &state.history)?;
    }
    println!("checkpoint: {}", ckpt.display());
    println!("metrics: {}", metrics.display());
    Ok(())
}

fn protocol(base: &EvalProtocol, p: &ProtocolArgs) -> EvalProtocol {
    EvalProtocol {
        segments: p.segments.unwrap_or(base.segments),
        crops: p.crops.unwrap_or(base.crops),
        flip: p.flip || base.flip,
    }
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let (config, mut state) = checkpoint::load(&a.checkpoint)?;
    let data = load_data(&a.data)?;
    let proto = protocol(&config.eval, &a.protocol);
    println!("inputs per video: {}", proto.inputs_per_video());
    let report = evaluate(&mut state.model, &data.test, data.num_classes, &proto, &config.augment_spec())?;
    println!("videos: {}", report.videos);
    println!("top1: {:.6}", report.top1);
    println!("top1 (concat): {:.6}", report.top1_concat);
    println!("mean per-class: {:.6}", report.mean_per_class);
    let glimpses: Vec<String> = report.per_glimpse_top1.iter().map(|v| format!("{v:.4}")).collect();
    println!("per-glimpse top1: {}", glimpses.join(" "));
    if let Some(path) = &a.per_class_csv {
        let mut counts = vec![0usize; data.num_classes];
        for v in &data.test {
            counts[v.label] += 1;
        }
        let mut out = String::from("class,videos,accuracy\n");
        for (c, acc) in report.per_class.iter().enumerate() {
            writeln!(out, "{c},{},{acc:.6}", counts[c]).expect("write to string");
        }
        std::fs::write(path, out).map_err(io(path))?;
    }
    Ok(())
}

fn parse_suppression(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("--suppression {s}: expected K,M with K ≥ 1"));
    let (k, m) = s.split_once(',').ok_or_else(bad)?;
    let k: usize = k.trim().parse().map_err(|_| bad())?;
    let m: usize = m.trim().parse().map_err(|_| bad())?;
    if k == 0 {
        return Err(bad());
    }
    Ok((k, m))
}

fn cmd_viz(a: &VizArgs) -> Result<()> {
    let spec = RenderSpec {
        sigma: a.sigma,
        colormap: a.colormap,
        alpha: a.alpha,
    };
    spec.validate()?;
    let suppression = a.suppression.as_deref().map(parse_suppression).transpose()?;
    let (config, state) = checkpoint::load(&a.checkpoint)?;
    let mut model = state.model;
    let data = load_data(&a.data)?;
    let video = data
        .find(&a.video)
        .ok_or_else(|| Error::Data(format!("unknown video id {:?}", a.video)))?;
    let one_view = EvalProtocol {
        segments: a.frames,
        crops: 1,
        flip: false,
    };
    let frames = test_inputs(video, &one_view, &config.augment_spec())?.remove(0);
    create_dir(&a.out)?;
    let mut written = 0;
    let mut emit = |k: usize, target: &str, maps: &[visualizer::PixelMap]| -> Result<()> {
        for (i, (map, frame)) in maps.iter().zip(&frames).enumerate() {
            let img = visualizer::render(map, &spec, Some(frame))?;
            visualizer::write_png(&a.out.join(heatmap_filename(&video.id, k, target, i)), &img)?;
            written += 1;
        }
        Ok(())
    };
    for k in 0..config.model.glimpses {
        let maps = visualizer::influence_map(&mut model, &frames, k, None)?;
        emit(k + 1, "influence", &maps)?;
    }
    if let Some((k, m)) = suppression {
        let s = visualizer::suppression_map(&mut model, &frames, k - 1, m)?;
        let picked: Vec<String> = s.channels.iter().map(|&c| format!("{c}({:.4})", s.xtilde[c])).collect();
        println!("glimpse {k} most suppressed channels: {}", picked.join(" "));
        emit(k, "suppression", &s.maps)?;
    }
    println!("wrote {written} images to {}", a.out.display());
    Ok(())
}

fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let kind: SweepKind = a.kind.parse()?;
    let data = load_data(&a.data)?;
    let mut kv = harness::toy_config().to_kv();
    kv.extend(&a.cfg.layered()?);
    if let Some(e) = a.epochs {
        kv.set("epochs", e);
    }
    let mut base = TrainConfig::from_kv(&kv)?;
    fit_to_dataset(&mut base, &data)?;
    let seeds = if a.seeds.is_empty() { harness::DEFAULT_SEEDS.to_vec() } else { a.seeds.clone() };
    let glimpses = if a.k.is_empty() { harness::DEFAULT_GLIMPSES.to_vec() } else { a.k.clone() };
    let plan = SweepPlan::new(kind, &base, &seeds, &glimpses)?;
    create_dir(&a.out)?;
    let threads = harness::thread_count();
    eprintln!(
        "{kind}: {} arms x {} seeds on {threads} thread(s)",
        plan.arms.len(),
        plan.seeds.len()
    );
    let results = harness::run_sweep(&plan, &data, &a.out, threads)?;
    let table = harness::write_outputs(&a.out, &plan, &results, data.num_classes)?;
    print!("{table}");
    Ok(())
}
