//! Command-line front end: pretraining, probing, fine-tuning, attention
//! visualization, the strategy/cost benchmark, and synthetic data
//! generation.
//!
//! Configuration precedence is defaults < config file (`key=value` lines,
//! keys match the long flag names) < explicit flags. `FAMT_SEED` is the
//! seed fallback when neither a flag nor the config file provides one.
//! Exit codes: 0 on success, 2 on any error.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use famt::checkpoint::{
    load_checkpoint, parse_kv, save_checkpoint, train_config_from_kv, vit_config_from_kv,
};
use famt::data::{
    gen_synthetic_with_workers, load_dataset, write_fmtd, write_pgm_heatmap, write_ppm_overlay,
    SyntheticSpec,
};
use famt::error::{Error, Result};
use famt::probe::{extract_features, finetune, linear_probe, FinetuneConfig, ProbeConfig};
use famt::rng::{stream, KeyedRng};
use famt::sampler::plan;
use famt::trainer::Trainer;
use famt::vit::{full_unmasked_forward, ViTConfig};
use famt::weights::{gamma_scores, sampling_weights};
use famt::{bench, parallel};

#[derive(Parser)]
#[command(name = "famt", version, about = "Frequency & attention driven masking and throwing for masked image modeling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain a model with a masking/throwing strategy
    Pretrain(PretrainArgs),
    /// Linear-probe a checkpoint's frozen features
    Probe(EvalArgs),
    /// Fine-tune a checkpoint end to end
    Finetune(EvalArgs),
    /// Emit attention/γ heatmaps and mask overlays for a few samples
    Visualize(VisualizeArgs),
    /// Compare strategies over a (strategy, r, t) grid
    Bench(BenchArgs),
    /// Generate a synthetic shapes dataset (FMTD file)
    GenData(GenDataArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// 32×32 images, 16 patches
    Desk,
    /// 112×112 images, 196 patches
    N196,
}

impl Preset {
    fn vit(self) -> ViTConfig {
        match self {
            Preset::Desk => ViTConfig::desk(),
            Preset::N196 => ViTConfig::n196(),
        }
    }
}

#[derive(Args)]
struct PretrainArgs {
    /// Dataset file: CIFAR-10 binary or FMTD dump (sniffed by magic)
    #[arg(long)]
    data: PathBuf,
    /// Config file of key=value lines; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// random | am | amt | fam | famt
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    mask_ratio: Option<f64>,
    #[arg(long)]
    throw_ratio: Option<f64>,
    /// Low-pass cutoff factor for γ
    #[arg(long)]
    sigma: Option<f64>,
    /// Epochs between weight refreshes
    #[arg(long)]
    refresh_interval: Option<u32>,
    /// Random-masking warmup epochs
    #[arg(long)]
    warmup: Option<u32>,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Reconstruction loss exponent (1 or 2)
    #[arg(long)]
    loss_p: Option<u8>,
    /// middle | bottom
    #[arg(long)]
    throw_mode: Option<String>,
    #[arg(long)]
    base_lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    #[arg(long)]
    workers: Option<usize>,
    /// Checkpoint output path
    #[arg(long)]
    out: PathBuf,
    /// Metrics log path (default: <out>.log)
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Head epochs (probe) or full-model epochs (finetune)
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Also print the per-class accuracy table
    #[arg(long, default_value_t = false)]
    per_class: bool,
}

#[derive(Args)]
struct VisualizeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Number of samples to render (from the start of the dataset)
    #[arg(long, default_value_t = 1)]
    samples: usize,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    data: PathBuf,
    /// Grid file: one "strategy,r,t" row per line
    #[arg(long)]
    grid: PathBuf,
    /// Timed steps per row
    #[arg(long, default_value_t = 30)]
    steps: usize,
    /// Untimed steps before measurement (wall-clock stabilization)
    #[arg(long, default_value_t = 10)]
    warmup_steps: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    /// Probe-head epochs for the top1 column (0 disables probing)
    #[arg(long, default_value_t = 30)]
    probe_epochs: u32,
    /// Max images used for the probe
    #[arg(long, default_value_t = 512)]
    probe_samples: usize,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// CSV output path
    #[arg(long, default_value = "famt_bench.csv")]
    out_csv: PathBuf,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    samples: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Square image size in pixels
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Background noise amplitude in [0, 1]
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

fn env_seed() -> Option<u64> {
    std::env::var("FAMT_SEED").ok().and_then(|s| s.parse().ok())
}

fn resolve_seed(flag: Option<u64>) -> u64 {
    flag.or_else(env_seed).unwrap_or(0)
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(2);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(args) => cmd_pretrain(args),
        Command::Probe(args) => cmd_probe(args),
        Command::Finetune(args) => cmd_finetune(args),
        Command::Visualize(args) => cmd_visualize(args),
        Command::Bench(args) => cmd_bench(args),
        Command::GenData(args) => cmd_gen_data(args),
    }
}

fn cmd_pretrain(args: PretrainArgs) -> Result<()> {
    let mut map: BTreeMap<String, String> = match &args.config {
        Some(path) => parse_kv(&fs::read_to_string(path)?)?,
        None => BTreeMap::new(),
    };
    let mut set = |key: &str, value: Option<String>| {
        if let Some(v) = value {
            map.insert(key.to_string(), v);
        }
    };
    set("strategy", args.strategy.clone());
    set("mask-ratio", args.mask_ratio.map(|v| v.to_string()));
    set("throw-ratio", args.throw_ratio.map(|v| v.to_string()));
    set("sigma", args.sigma.map(|v| v.to_string()));
    set("refresh-interval", args.refresh_interval.map(|v| v.to_string()));
    set("warmup", args.warmup.map(|v| v.to_string()));
    set("epochs", args.epochs.map(|v| v.to_string()));
    set("batch-size", args.batch_size.map(|v| v.to_string()));
    set("loss-p", args.loss_p.map(|v| v.to_string()));
    set("throw-mode", args.throw_mode.clone());
    set("base-lr", args.base_lr.map(|v| v.to_string()));
    set("weight-decay", args.weight_decay.map(|v| v.to_string()));
    set("workers", args.workers.map(|v| v.to_string()));
    if !map.contains_key("seed") || args.seed.is_some() {
        map.insert("seed".into(), resolve_seed(args.seed).to_string());
    }
    // the preset seeds the vit.* keys; explicit config entries win
    let preset = args.preset.vit();
    let preset_kv = famt::checkpoint::vit_config_to_kv(&preset);
    for (k, v) in parse_kv(&preset_kv)? {
        map.entry(k).or_insert(v);
    }
    let cfg = train_config_from_kv(&map)?;
    let vit_cfg = vit_config_from_kv(&map)?;
    parallel::configure_pool(cfg.workers);

    let data = load_dataset(&args.data)?;
    let mut trainer = Trainer::new(vit_cfg, cfg)?;
    let log_path = args.log.clone().unwrap_or_else(|| {
        let mut p = args.out.as_os_str().to_owned();
        p.push(".log");
        PathBuf::from(p)
    });
    let mut log = fs::File::create(&log_path)?;
    let mut io_err = None;
    let summary = trainer.run(&data, |row| {
        if io_err.is_none() {
            if let Err(e) = writeln!(log, "{row}") {
                io_err = Some(e);
            }
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    save_checkpoint(&trainer, &args.out)?;
    println!(
        "pretrained {} steps: loss {:.4e} -> {:.4e}, encoder tokens {}, checkpoint {}",
        summary.steps,
        summary.initial_loss,
        summary.final_loss,
        summary.encoder_tokens,
        args.out.display()
    );
    Ok(())
}

fn print_report(report: &famt::probe::EvalReport, per_class: bool) {
    println!("top1={:.6}", report.top1);
    if per_class {
        for (c, acc) in report.per_class.iter().enumerate() {
            println!("class {c}: {acc:.6}");
        }
    }
}

fn cmd_probe(args: EvalArgs) -> Result<()> {
    parallel::configure_pool(args.workers);
    let trainer = load_checkpoint(&args.ckpt)?;
    let data = load_dataset(&args.data)?;
    let feats = extract_features(&trainer.model, &data, args.workers)?;
    let labels: Vec<usize> = data.images.iter().map(|i| i.label).collect();
    let cfg = ProbeConfig {
        epochs: args.epochs.unwrap_or(60),
        lr: args.lr.unwrap_or(0.1),
        batch_size: args.batch_size.unwrap_or(64),
        seed: resolve_seed(args.seed),
        ..Default::default()
    };
    let (_, report) = linear_probe(&feats, &labels, data.num_classes().max(2), &cfg)?;
    print_report(&report, args.per_class);
    Ok(())
}

fn cmd_finetune(args: EvalArgs) -> Result<()> {
    parallel::configure_pool(args.workers);
    let mut trainer = load_checkpoint(&args.ckpt)?;
    let data = load_dataset(&args.data)?;
    let cfg = FinetuneConfig {
        epochs: args.epochs.unwrap_or(20),
        lr: args.lr.unwrap_or(1e-3),
        batch_size: args.batch_size.unwrap_or(16),
        seed: resolve_seed(args.seed),
        workers: args.workers,
        ..Default::default()
    };
    let report = finetune(&mut trainer.model, &data, &cfg)?;
    print_report(&report, args.per_class);
    Ok(())
}

/// Plan draws for visualization are keyed under this pseudo-epoch so they
/// never collide with training draws.
const VIS_EPOCH: u64 = u32::MAX as u64;

fn cmd_visualize(args: VisualizeArgs) -> Result<()> {
    let trainer = load_checkpoint(&args.ckpt)?;
    let data = load_dataset(&args.data)?;
    fs::create_dir_all(&args.out_dir)?;
    let seed = args.seed.unwrap_or_else(|| env_seed().unwrap_or(trainer.cfg.seed));
    let cfg = &trainer.model.cfg;
    let (gh, gw) = (cfg.grid_h(), cfg.grid_w());
    let k = args.samples.min(data.len());
    for img in &data.images[..k] {
        let fwd = full_unmasked_forward(&trainer.model, &img.pixels)?;
        let gamma = gamma_scores(&fwd.tokens, trainer.cfg.sigma)?;
        let p_a = match sampling_weights(&fwd.a_w, &gamma) {
            Ok(p) => p,
            Err(Error::Degenerate(_)) => vec![1.0 / gamma.len() as f64; gamma.len()],
            Err(e) => return Err(e),
        };
        let base = |suffix: &str| args.out_dir.join(format!("sample_{}_{suffix}", img.sample_id));
        write_pgm_heatmap(&fwd.a_w, gh, gw, cfg.image_h, cfg.image_w, &base("attention.pgm"))?;
        write_pgm_heatmap(&gamma, gh, gw, cfg.image_h, cfg.image_w, &base("gamma.pgm"))?;
        let mut rng =
            KeyedRng::from_key(seed, &[stream::PLAN, VIS_EPOCH, img.sample_id as u64]);
        let weights = trainer.cfg.strategy.uses_weights().then_some(p_a.as_slice());
        let mask_plan = plan(
            weights,
            cfg.num_patches(),
            trainer.cfg.strategy,
            trainer.cfg.mask_ratio,
            trainer.cfg.throw_ratio,
            trainer.cfg.throw_mode,
            &mut rng,
        )?;
        write_ppm_overlay(
            img,
            data.channels,
            data.height,
            data.width,
            &mask_plan,
            cfg.patch,
            &base("plan.ppm"),
        )?;
    }
    println!("wrote {} files to {}", 3 * k, args.out_dir.display());
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    parallel::configure_pool(args.workers);
    let grid = bench::parse_grid(&fs::read_to_string(&args.grid)?)?;
    let data = load_dataset(&args.data)?;
    let bcfg = bench::BenchConfig {
        steps: args.steps,
        warmup_steps: args.warmup_steps,
        batch_size: args.batch_size,
        seed: resolve_seed(args.seed),
        probe_epochs: args.probe_epochs,
        probe_samples: args.probe_samples,
        workers: args.workers,
    };
    let report = bench::run_bench(&grid, &data, &args.preset.vit(), &bcfg)?;
    print!("{}", report.to_aligned_text());
    fs::write(&args.out_csv, report.to_csv())?;
    println!("csv written to {}", args.out_csv.display());
    Ok(())
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    parallel::configure_pool(args.workers);
    let spec = SyntheticSpec::new(args.samples, args.classes, args.size, args.noise);
    let ds = gen_synthetic_with_workers(&spec, resolve_seed(args.seed), args.workers)?;
    write_fmtd(&ds, &args.out)?;
    println!(
        "wrote {} samples ({} classes, {}x{}) to {}",
        ds.len(),
        args.classes,
        args.size,
        args.size,
        args.out.display()
    );
    Ok(())
}
