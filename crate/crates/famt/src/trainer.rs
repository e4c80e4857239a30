//! MAE-style pretraining with strategy-driven masking and throwing.
//!
//! Each step builds one gradient tape per sample (the visible set differs
//! per sample), sums per-sample gradients in sample order and averages, so
//! results are bit-identical for any worker count. Thrown positions never
//! reach the encoder, the decoder, or the loss.

use std::sync::Arc;
use std::time::Instant;

use crate::data::{Dataset, LabeledImage};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, ValueId};
use crate::parallel::ordered_map;
use crate::rng::{stream, KeyedRng};
use crate::sampler::{plan, MaskPlan, StrategyKind, ThrowMode};
use crate::vit::{
    decoder_forward, embed_tokens, encoder_forward, patchify, ModelVars, ViTConfig, ViTModel,
};
use crate::weights::{refresh, WeightStore};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub strategy: StrategyKind,
    pub mask_ratio: f64,
    pub throw_ratio: f64,
    pub sigma: f64,
    /// Epoch interval between weight refreshes (weighted strategies).
    pub refresh_interval: u32,
    /// Epochs of random masking before the configured strategy kicks in;
    /// the first refresh fires when warmup ends.
    pub warmup_epochs: u32,
    /// Reconstruction loss exponent: 1 or 2.
    pub loss_p: u8,
    pub epochs: u32,
    pub batch_size: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub lr_warmup_steps: u64,
    pub weight_decay: f64,
    pub seed: u64,
    pub throw_mode: ThrowMode,
    /// Normalize target patches to zero mean / unit variance (off: raw
    /// pixels are reconstructed).
    pub norm_pix: bool,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            strategy: StrategyKind::Famt,
            mask_ratio: 0.45,
            throw_ratio: 0.40,
            sigma: 16.0,
            refresh_interval: 10,
            warmup_epochs: 10,
            loss_p: 2,
            epochs: 20,
            batch_size: 16,
            base_lr: 2e-3,
            min_lr: 1e-5,
            lr_warmup_steps: 20,
            weight_decay: 0.05,
            seed: 0,
            throw_mode: ThrowMode::Middle,
            norm_pix: false,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_patches: usize) -> Result<()> {
        if self.mask_ratio < 0.0 || self.throw_ratio < 0.0 {
            return Err(Error::Parameter("ratios must be nonnegative".into()));
        }
        if self.mask_ratio + self.throw_ratio > 1.0 {
            return Err(Error::Parameter(format!(
                "mask ratio + throw ratio must not exceed 1: {} + {}",
                self.mask_ratio, self.throw_ratio
            )));
        }
        if !matches!(self.loss_p, 1 | 2) {
            return Err(Error::Parameter(format!("loss exponent must be 1 or 2, got {}", self.loss_p)));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch size must be positive".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Parameter("sigma must be positive".into()));
        }
        let masked = (n_patches as f64 * self.mask_ratio).floor() as usize;
        if masked == 0 {
            return Err(Error::Parameter(format!(
                "mask ratio {} masks zero of {n_patches} patches; no learning signal",
                self.mask_ratio
            )));
        }
        Ok(())
    }
}

// ── optimizer ────────────────────────────────────────────────────────────

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &[&Tensor]) -> Self {
        AdamW {
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    /// One in-place update; `grads` aligns with the parameter order used at
    /// construction.
    pub fn update(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Vec<f64>],
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} parameters, got {} params / {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            if g.len() != p.numel() {
                return Err(Error::Shape(format!(
                    "gradient length {} vs parameter {:?}",
                    g.len(),
                    p.dims()
                )));
            }
            let data = p.data_mut();
            for i in 0..data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + weight_decay * data[i]);
            }
        }
        Ok(())
    }
}

/// Cosine decay to `min_lr` with linear warmup over the first
/// `lr_warmup_steps` steps.
pub fn lr_at(step: u64, total_steps: u64, cfg: &TrainConfig) -> f64 {
    if step < cfg.lr_warmup_steps {
        return cfg.base_lr * (step + 1) as f64 / cfg.lr_warmup_steps as f64;
    }
    if total_steps <= cfg.lr_warmup_steps {
        return cfg.base_lr;
    }
    let t = (step - cfg.lr_warmup_steps) as f64 / (total_steps - cfg.lr_warmup_steps) as f64;
    let t = t.min(1.0);
    cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
}

// ── loss ─────────────────────────────────────────────────────────────────

/// Reconstruction loss over masked patches only: the mean over masked
/// positions and pixels of |Y − X|^p. `preds` covers `kept_positions` (the
/// decoder output); target rows are indexed by original patch position.
pub fn masked_loss(
    tape: &mut Tape,
    preds: ValueId,
    kept_positions: &[usize],
    targets: &Tensor,
    mask_idx: &[usize],
    loss_p: u8,
) -> Result<ValueId> {
    if mask_idx.is_empty() {
        return Err(Error::Degenerate("empty mask set gives no learning signal".into()));
    }
    if !matches!(loss_p, 1 | 2) {
        return Err(Error::Parameter(format!("loss exponent must be 1 or 2, got {loss_p}")));
    }
    let mut pred_rows = Vec::with_capacity(mask_idx.len());
    for &pos in mask_idx {
        let row = kept_positions.binary_search(&pos).map_err(|_| {
            Error::Usage(format!("masked position {pos} is not covered by the decoder output"))
        })?;
        pred_rows.push(row);
    }
    let y = tape.gather_rows(preds, &pred_rows)?;
    let x_all = tape.constant(targets.dims(), targets.data().to_vec())?;
    let x = tape.gather_rows(x_all, mask_idx)?;
    let diff = tape.sub(y, x)?;
    let per_element = match loss_p {
        1 => tape.abs(diff),
        _ => tape.mul(diff, diff)?,
    };
    Ok(tape.mean_all(per_element))
}

// ── one training step ────────────────────────────────────────────────────

/// Per-sample record of exactly which positions reached which stage.
#[derive(Debug, Clone)]
pub struct SampleTrace {
    pub encoder_positions: Vec<usize>,
    pub decoder_positions: Vec<usize>,
    pub loss_positions: Vec<usize>,
}

/// What one optimizer step observed, for instrumentation and accounting.
#[derive(Debug, Clone)]
pub struct StepTrace {
    pub samples: Vec<SampleTrace>,
    /// Encoder tokens processed this step (CLS included, per sample).
    pub encoder_tokens: u64,
}

struct SampleOutcome {
    loss: f64,
    grads: Vec<Vec<f64>>,
    trace: SampleTrace,
}

fn run_sample(
    model: &ViTModel,
    image: &LabeledImage,
    plan: &MaskPlan,
    loss_p: u8,
    norm_pix: bool,
) -> Result<SampleOutcome> {
    plan.validate()?;
    let cfg = &model.cfg;
    if plan.num_patches() != cfg.num_patches() {
        return Err(Error::Shape(format!(
            "plan covers {} patches, model expects {}",
            plan.num_patches(),
            cfg.num_patches()
        )));
    }
    let mut tape = Tape::new();
    let vars = ModelVars::register(&mut tape, model, true);

    let patches = patchify(&image.pixels, cfg)?;
    let targets = if norm_pix { normalize_patch_rows(&patches) } else { patches.clone() };

    let mut visible = plan.visible_idx.clone();
    visible.sort_unstable();
    let mut masked = plan.mask_idx.clone();
    masked.sort_unstable();

    let visible_rows_data: Vec<f64> = visible
        .iter()
        .flat_map(|&i| patches.data()[i * cfg.patch_dim()..(i + 1) * cfg.patch_dim()].to_vec())
        .collect();
    let visible_rows = tape.constant(&[visible.len(), cfg.patch_dim()], visible_rows_data)?;

    let z = embed_tokens(&mut tape, &vars, visible_rows, &visible)?;
    let (encoded, _) = encoder_forward(&mut tape, &vars, model, z, false)?;
    let (preds, kept) = decoder_forward(&mut tape, &vars, model, encoded, &visible, &masked)?;
    let loss = masked_loss(&mut tape, preds, &kept, &targets, &masked, loss_p)?;
    let loss_value = tape.value(loss)[0];
    if !loss_value.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss {loss_value} on sample {}",
            image.sample_id
        )));
    }
    tape.backward(loss)?;
    let grads = vars
        .flat
        .iter()
        .map(|&id| tape.grad(id).expect("tracked leaf has a gradient").to_vec())
        .collect();
    Ok(SampleOutcome {
        loss: loss_value,
        grads,
        trace: SampleTrace {
            encoder_positions: visible,
            decoder_positions: kept,
            loss_positions: masked,
        },
    })
}

fn normalize_patch_rows(patches: &Tensor) -> Tensor {
    let (rows, cols) = (patches.dims()[0], patches.dims()[1]);
    let mut out = patches.clone();
    for r in 0..rows {
        let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + 1e-6).sqrt();
        for x in row.iter_mut() {
            *x = (*x - mean) * inv;
        }
    }
    out
}

/// Runs one optimizer step over a batch: per-sample forward/backward on
/// separate tapes, gradients averaged in sample order, one AdamW update.
/// Returns the batch loss and the step trace.
pub fn pretrain_step(
    model: &mut ViTModel,
    opt: &mut AdamW,
    batch: &[&LabeledImage],
    plans: &[MaskPlan],
    cfg: &TrainConfig,
    lr: f64,
) -> Result<(f64, StepTrace)> {
    if batch.len() != plans.len() {
        return Err(Error::Shape(format!(
            "{} samples vs {} plans",
            batch.len(),
            plans.len()
        )));
    }
    if batch.is_empty() {
        return Err(Error::Parameter("empty batch".into()));
    }
    let model_ref: &ViTModel = model;
    let jobs: Vec<(usize, &LabeledImage)> = batch.iter().copied().enumerate().collect();
    let outcomes = ordered_map(&jobs, cfg.workers, |_, &(i, image)| {
        run_sample(model_ref, image, &plans[i], cfg.loss_p, cfg.norm_pix)
    });

    let mut total_loss = 0.0;
    let mut grads: Vec<Vec<f64>> = Vec::new();
    let mut traces = Vec::with_capacity(batch.len());
    let mut encoder_tokens = 0u64;
    let inv_b = 1.0 / batch.len() as f64;
    for outcome in outcomes {
        let outcome = outcome?;
        total_loss += outcome.loss * inv_b;
        encoder_tokens += outcome.trace.encoder_positions.len() as u64 + 1;
        if grads.is_empty() {
            grads = outcome
                .grads
                .into_iter()
                .map(|g| g.into_iter().map(|x| x * inv_b).collect())
                .collect();
        } else {
            for (acc, g) in grads.iter_mut().zip(outcome.grads) {
                for (a, x) in acc.iter_mut().zip(g) {
                    *a += x * inv_b;
                }
            }
        }
        traces.push(outcome.trace);
    }
    let mut params = model.params_mut();
    opt.update(&mut params, &grads, lr, cfg.weight_decay)?;
    Ok((total_loss, StepTrace { samples: traces, encoder_tokens }))
}

// ── schedule ─────────────────────────────────────────────────────────────

/// What the epoch schedule dictates: the strategy in force and whether a
/// weight refresh fires at this epoch boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpochPlan {
    pub strategy: StrategyKind,
    pub refresh: bool,
}

/// Random masking during warmup, the configured strategy afterwards; a
/// refresh fires when warmup ends and every `refresh_interval` epochs after.
pub fn schedule(epoch: u32, cfg: &TrainConfig) -> EpochPlan {
    if cfg.strategy == StrategyKind::Random || epoch < cfg.warmup_epochs {
        return EpochPlan { strategy: StrategyKind::Random, refresh: false };
    }
    let since_warmup = epoch - cfg.warmup_epochs;
    let refresh = cfg.refresh_interval > 0 && since_warmup % cfg.refresh_interval == 0;
    EpochPlan { strategy: cfg.strategy, refresh }
}

// ── full training loop ───────────────────────────────────────────────────

/// One metrics line per step: "epoch step loss tokens_encoder ms_per_step".
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub epoch: u32,
    pub step: u64,
    pub loss: f64,
    pub tokens_encoder: u64,
    pub ms_per_step: f64,
}

impl std::fmt::Display for MetricsRow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {} {:.6e} {} {:.3}",
            self.epoch, self.step, self.loss, self.tokens_encoder, self.ms_per_step
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: u64,
    pub encoder_tokens: u64,
    pub refreshes: u32,
}

/// Owns everything a training run mutates; checkpointing serializes this
/// plus the config.
pub struct Trainer {
    pub model: ViTModel,
    pub opt: AdamW,
    pub weights: Option<Arc<WeightStore>>,
    pub cfg: TrainConfig,
    pub next_epoch: u32,
    pub global_step: u64,
}

impl Trainer {
    pub fn new(vit_cfg: ViTConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate(vit_cfg.num_patches())?;
        let model = ViTModel::new(vit_cfg, cfg.seed)?;
        let opt = AdamW::new(&model.params());
        Ok(Trainer { model, opt, weights: None, cfg, next_epoch: 0, global_step: 0 })
    }

    /// Deterministic per-epoch sample order, keyed by (seed, epoch).
    fn epoch_order(&self, epoch: u32, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = KeyedRng::from_key(self.cfg.seed, &[stream::SHUFFLE, epoch as u64]);
        rng.shuffle(&mut order);
        order
    }

    /// Builds the plan for one sample at one epoch, keyed so the draw is
    /// independent of batch assembly and worker scheduling.
    pub fn plan_for(&self, epoch: u32, sample_id: usize, strategy: StrategyKind) -> Result<MaskPlan> {
        let n = self.model.cfg.num_patches();
        let mut rng =
            KeyedRng::from_key(self.cfg.seed, &[stream::PLAN, epoch as u64, sample_id as u64]);
        let weights = match (strategy.uses_weights(), &self.weights) {
            (true, Some(store)) => Some(
                store
                    .get(sample_id)
                    .ok_or_else(|| {
                        Error::Usage(format!("no weights for sample {sample_id} in current store"))
                    })?
                    .p_a
                    .clone(),
            ),
            (true, None) => {
                return Err(Error::Usage(format!(
                    "strategy {} is active but no weight store exists",
                    strategy.name()
                )))
            }
            (false, _) => None,
        };
        plan(
            weights.as_deref(),
            n,
            strategy,
            self.cfg.mask_ratio,
            self.cfg.throw_ratio,
            self.cfg.throw_mode,
            &mut rng,
        )
    }

    /// Runs epochs `next_epoch..cfg.epochs`, invoking `sink` once per step.
    /// Aborts with a diagnostic on non-finite loss.
    pub fn run(&mut self, data: &Dataset, mut sink: impl FnMut(&MetricsRow)) -> Result<TrainSummary> {
        self.cfg.validate(self.model.cfg.num_patches())?;
        if data.is_empty() {
            return Err(Error::Parameter("empty dataset".into()));
        }
        let steps_per_epoch = data.len().div_ceil(self.cfg.batch_size) as u64;
        let total_steps = steps_per_epoch * self.cfg.epochs as u64;
        let mut initial_loss = None;
        let mut final_loss = 0.0;
        let mut refreshes = 0;
        let tokens_start = self.model.tokens_processed();

        for epoch in self.next_epoch..self.cfg.epochs {
            let plan_of_epoch = schedule(epoch, &self.cfg);
            if plan_of_epoch.refresh {
                self.refresh_weights(data, epoch)?;
                refreshes += 1;
            }
            let order = self.epoch_order(epoch, data.len());
            for chunk in order.chunks(self.cfg.batch_size) {
                let start = Instant::now();
                let batch: Vec<&LabeledImage> = chunk.iter().map(|&i| &data.images[i]).collect();
                let plans = chunk
                    .iter()
                    .map(|&i| self.plan_for(epoch, i, plan_of_epoch.strategy))
                    .collect::<Result<Vec<_>>>()?;
                let lr = lr_at(self.global_step, total_steps, &self.cfg);
                let tokens_before = self.model.tokens_processed();
                let (loss, _trace) =
                    pretrain_step(&mut self.model, &mut self.opt, &batch, &plans, &self.cfg, lr)
                        .map_err(|e| match e {
                            Error::Numeric(msg) => Error::Numeric(format!(
                                "aborting at epoch {epoch} step {}: {msg}",
                                self.global_step
                            )),
                            other => other,
                        })?;
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!(
                        "aborting at epoch {epoch} step {}: loss is {loss}",
                        self.global_step
                    )));
                }
                let row = MetricsRow {
                    epoch,
                    step: self.global_step,
                    loss,
                    tokens_encoder: self.model.tokens_processed() - tokens_before,
                    ms_per_step: start.elapsed().as_secs_f64() * 1000.0,
                };
                sink(&row);
                initial_loss.get_or_insert(loss);
                final_loss = loss;
                self.global_step += 1;
            }
            self.next_epoch = epoch + 1;
        }
        Ok(TrainSummary {
            initial_loss: initial_loss.unwrap_or(0.0),
            final_loss,
            steps: self.global_step,
            encoder_tokens: self.model.tokens_processed() - tokens_start,
            refreshes,
        })
    }

    /// Builds the next weight-store generation and swaps it in.
    pub fn refresh_weights(&mut self, data: &Dataset, epoch: u32) -> Result<()> {
        let generation = self.weights.as_ref().map(|w| w.generation + 1).unwrap_or(1);
        let outcome = refresh(
            &data.images,
            &self.model,
            self.cfg.sigma,
            self.cfg.strategy,
            generation,
            epoch,
            self.cfg.workers,
        )?;
        if let Some(out) = outcome {
            log::info!(
                "weight refresh generation {generation} at epoch {epoch} took {:.1} ms",
                out.elapsed.as_secs_f64() * 1000.0
            );
            self.weights = Some(Arc::new(out.store));
        }
        Ok(())
    }
}
