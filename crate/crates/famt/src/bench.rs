//! Strategy/cost comparison harness: runs a fixed number of training steps
//! per (strategy, r, t) row over shared seed and data, then reports encoder
//! tokens per step, wall clock, relative cost, final loss, and a quick
//! linear-probe score.
//!
//! Tokens per step are computed analytically from the floor rule and
//! cross-checked against the instrumented counter; a mismatch is an error,
//! not a warning. Relative cost is the token ratio against the
//! (random, r=0.75, t=0) baseline row, which the harness inserts if the
//! grid omits it; the baseline row is 1.0 by definition.

use std::time::Instant;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::probe::{extract_features, linear_probe, ProbeConfig};
use crate::sampler::{counts, StrategyKind};
use crate::trainer::{pretrain_step, TrainConfig, Trainer};
use crate::vit::ViTConfig;

pub const BASELINE: (StrategyKind, f64, f64) = (StrategyKind::Random, 0.75, 0.0);

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub strategy: StrategyKind,
    pub mask_ratio: f64,
    pub throw_ratio: f64,
    pub tokens_per_step: u64,
    pub ms_per_step: f64,
    pub relative_cost: f64,
    pub final_loss: f64,
    pub probe_top1: f64,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "strategy,mask_ratio,throw_ratio,tokens_per_step,ms_per_step,relative_cost,final_loss,probe_top1\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{:.3},{:.6},{:.6e},{:.4}\n",
                r.strategy.name(),
                r.mask_ratio,
                r.throw_ratio,
                r.tokens_per_step,
                r.ms_per_step,
                r.relative_cost,
                r.final_loss,
                r.probe_top1
            ));
        }
        out
    }

    pub fn to_aligned_text(&self) -> String {
        let mut out = format!(
            "{:<8} {:>6} {:>6} {:>12} {:>10} {:>9} {:>12} {:>6}\n",
            "strategy", "r", "t", "tokens/step", "ms/step", "rel.cost", "final_loss", "top1"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<8} {:>6.2} {:>6.2} {:>12} {:>10.3} {:>9.4} {:>12.4e} {:>6.3}\n",
                r.strategy.name(),
                r.mask_ratio,
                r.throw_ratio,
                r.tokens_per_step,
                r.ms_per_step,
                r.relative_cost,
                r.final_loss,
                r.probe_top1
            ));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    /// Timed steps per row.
    pub steps: usize,
    /// Untimed steps before measurement starts.
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Probe-head epochs for the top1 column; 0 skips probing (NaN).
    pub probe_epochs: u32,
    /// Cap on images used for probe feature extraction.
    pub probe_samples: usize,
    pub workers: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            steps: 30,
            warmup_steps: 10,
            batch_size: 8,
            seed: 0,
            probe_epochs: 30,
            probe_samples: 512,
            workers: 1,
        }
    }
}

/// Parses grid rows `strategy,r,t` (commas or whitespace); `#` comments and
/// blank lines are skipped.
pub fn parse_grid(text: &str) -> Result<Vec<(StrategyKind, f64, f64)>> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> =
            line.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()).collect();
        if parts.len() != 3 {
            return Err(Error::Format(format!(
                "grid line {} needs 'strategy,r,t': '{line}'",
                lineno + 1
            )));
        }
        let strategy: StrategyKind = parts[0].parse()?;
        let r: f64 = parts[1]
            .parse()
            .map_err(|_| Error::Format(format!("bad mask ratio '{}' on line {}", parts[1], lineno + 1)))?;
        let t: f64 = parts[2]
            .parse()
            .map_err(|_| Error::Format(format!("bad throw ratio '{}' on line {}", parts[2], lineno + 1)))?;
        rows.push((strategy, r, t));
    }
    if rows.is_empty() {
        return Err(Error::Format("empty benchmark grid".into()));
    }
    Ok(rows)
}

/// Encoder tokens per step from the floor rule: `batch · (N - C_m - C_t + 1)`.
/// Masking-only strategies force the throw count to zero.
pub fn analytic_tokens_per_step(
    n_patches: usize,
    strategy: StrategyKind,
    mask_ratio: f64,
    throw_ratio: f64,
    batch: usize,
) -> u64 {
    let throw_ratio = if strategy.forces_no_throw() { 0.0 } else { throw_ratio };
    let (c_m, c_t) = counts(n_patches, mask_ratio, throw_ratio);
    (batch * (n_patches - c_m - c_t + 1)) as u64
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Runs the grid. Every row sees the same seed and data; the baseline
/// (random, 0.75, 0) row is prepended when missing so relative cost is
/// always defined.
pub fn run_bench(
    grid: &[(StrategyKind, f64, f64)],
    data: &Dataset,
    vit_cfg: &ViTConfig,
    bcfg: &BenchConfig,
) -> Result<BenchReport> {
    if data.is_empty() {
        return Err(Error::Parameter("empty dataset".into()));
    }
    let mut grid: Vec<(StrategyKind, f64, f64)> = grid.to_vec();
    let has_baseline = grid
        .iter()
        .any(|&(s, r, t)| s == BASELINE.0 && r == BASELINE.1 && t == BASELINE.2);
    if !has_baseline {
        grid.insert(0, BASELINE);
    }

    let mut rows = Vec::with_capacity(grid.len());
    let mut baseline_tokens = None;
    for &(strategy, mask_ratio, throw_ratio) in &grid {
        let row = run_row(strategy, mask_ratio, throw_ratio, data, vit_cfg, bcfg)?;
        if strategy == BASELINE.0 && mask_ratio == BASELINE.1 && throw_ratio == BASELINE.2 {
            baseline_tokens.get_or_insert(row.tokens_per_step);
        }
        rows.push(row);
    }
    let base = baseline_tokens.expect("baseline row always present") as f64;
    for row in rows.iter_mut() {
        row.relative_cost = row.tokens_per_step as f64 / base;
    }
    Ok(BenchReport { rows })
}

fn run_row(
    strategy: StrategyKind,
    mask_ratio: f64,
    throw_ratio: f64,
    data: &Dataset,
    vit_cfg: &ViTConfig,
    bcfg: &BenchConfig,
) -> Result<BenchRow> {
    let cfg = TrainConfig {
        strategy,
        mask_ratio,
        throw_ratio,
        warmup_epochs: 0,
        seed: bcfg.seed,
        batch_size: bcfg.batch_size,
        workers: bcfg.workers,
        epochs: 1, // unused; the harness drives steps directly
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(vit_cfg.clone(), cfg)?;
    if strategy.uses_weights() {
        trainer.refresh_weights(data, 0)?;
    }

    let total_steps = bcfg.warmup_steps + bcfg.steps;
    let n = data.len();
    let mut final_loss = 0.0;
    let mut times_ms = Vec::with_capacity(bcfg.steps);
    let mut tokens_measured = 0u64;
    for step in 0..total_steps {
        let start_idx = (step * bcfg.batch_size) % n;
        let ids: Vec<usize> = (0..bcfg.batch_size.min(n)).map(|k| (start_idx + k) % n).collect();
        let batch: Vec<&crate::data::LabeledImage> =
            ids.iter().map(|&i| &data.images[i]).collect();
        let plans = ids
            .iter()
            .map(|&i| trainer.plan_for(step as u32, i, strategy))
            .collect::<Result<Vec<_>>>()?;
        let lr = 1e-4; // fixed small rate: the harness compares cost, not convergence
        let timing = step >= bcfg.warmup_steps;
        let tokens_before = trainer.model.tokens_processed();
        let start = Instant::now();
        let (loss, trace) =
            pretrain_step(&mut trainer.model, &mut trainer.opt, &batch, &plans, &trainer.cfg, lr)?;
        if timing {
            times_ms.push(start.elapsed().as_secs_f64() * 1000.0);
            tokens_measured += trainer.model.tokens_processed() - tokens_before;
            debug_assert_eq!(
                trace.encoder_tokens,
                trainer.model.tokens_processed() - tokens_before
            );
        }
        final_loss = loss;
    }

    if tokens_measured % bcfg.steps as u64 != 0 {
        return Err(Error::Numeric(format!(
            "measured tokens {tokens_measured} not divisible by {} steps",
            bcfg.steps
        )));
    }
    let tokens_per_step = tokens_measured / bcfg.steps as u64;
    let analytic = analytic_tokens_per_step(
        vit_cfg.num_patches(),
        strategy,
        mask_ratio,
        throw_ratio,
        bcfg.batch_size.min(n),
    );
    if tokens_per_step != analytic {
        return Err(Error::Numeric(format!(
            "instrumented tokens/step {tokens_per_step} disagrees with analytic {analytic} \
             for strategy {} r={mask_ratio} t={throw_ratio}",
            strategy.name()
        )));
    }

    let probe_top1 = if bcfg.probe_epochs > 0 {
        let cap = bcfg.probe_samples.min(data.len());
        let subset = Dataset {
            channels: data.channels,
            height: data.height,
            width: data.width,
            images: data.images[..cap].to_vec(),
        };
        let feats = extract_features(&trainer.model, &subset, bcfg.workers)?;
        let labels: Vec<usize> = subset.images.iter().map(|i| i.label).collect();
        let pc = ProbeConfig { epochs: bcfg.probe_epochs, seed: bcfg.seed, ..Default::default() };
        match linear_probe(&feats, &labels, subset.num_classes().max(2), &pc) {
            Ok((_, report)) => report.top1,
            Err(Error::Degenerate(_)) => f64::NAN,
            Err(e) => return Err(e),
        }
    } else {
        f64::NAN
    };

    Ok(BenchRow {
        strategy,
        mask_ratio,
        throw_ratio,
        tokens_per_step,
        ms_per_step: median(times_ms),
        relative_cost: 1.0, // filled in by run_bench against the baseline
        final_loss,
        probe_top1,
    })
}
