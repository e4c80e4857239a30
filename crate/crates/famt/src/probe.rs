//! Frozen-feature linear probing with a batch-normalized head, supervised
//! fine-tuning, and top-1 accuracy.
//!
//! The probe trains only `BN(d) → Linear(d → K)` on CLS features with
//! momentum SGD and cross-entropy; the encoder is never touched. At
//! evaluation time the BN uses its running statistics, so predictions are a
//! fixed affine map of the features and independent of batch composition.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor};
use crate::parallel::ordered_map;
use crate::rng::{stream, KeyedRng};
use crate::trainer::{AdamW, TrainConfig};
use crate::vit::{embed_tokens, encoder_forward, patchify, ModelVars, ViTModel};

const BN_EPS: f64 = 1e-5;

/// Batch-norm statistics plus the linear classifier.
#[derive(Debug, Clone)]
pub struct ProbeHead {
    pub bn_gain: Tensor,
    pub bn_bias: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ProbeHead {
    fn new(dim: usize, classes: usize, seed: u64) -> Self {
        let mut rng = KeyedRng::from_key(seed, &[stream::HEAD]);
        ProbeHead {
            bn_gain: Tensor::full(&[dim], 1.0).with_grad(),
            bn_bias: Tensor::zeros(&[dim]).with_grad(),
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            weight: Tensor::trunc_normal(&[dim, classes], 0.01, &mut rng).with_grad(),
            bias: Tensor::zeros(&[classes]).with_grad(),
        }
    }

    /// Inference logits: fixed affine BN (running stats) then the linear map.
    pub fn logits(&self, features: &[f64]) -> Vec<f64> {
        let d = self.bn_gain.numel();
        let k = self.bias.numel();
        let mut out = self.bias.data().to_vec();
        for j in 0..d {
            let x = (features[j] - self.running_mean[j]) / (self.running_var[j] + BN_EPS).sqrt();
            let scaled = x * self.bn_gain.data()[j] + self.bn_bias.data()[j];
            for c in 0..k {
                out[c] += scaled * self.weight.data()[j * k + c];
            }
        }
        out
    }

    pub fn predict(&self, features: &[f64]) -> usize {
        argmax_tie_low(&self.logits(features))
    }
}

/// Index of the per-row maximum; logit ties resolve to the lowest class.
pub fn argmax_tie_low(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub top1: f64,
    pub per_class: Vec<f64>,
    pub samples: usize,
}

impl EvalReport {
    fn from_predictions(preds: &[usize], labels: &[usize], classes: usize) -> Result<Self> {
        let top1 = top1(preds, labels)?;
        let mut hits = vec![0usize; classes];
        let mut totals = vec![0usize; classes];
        for (&p, &l) in preds.iter().zip(labels) {
            totals[l] += 1;
            if p == l {
                hits[l] += 1;
            }
        }
        let per_class = hits
            .iter()
            .zip(&totals)
            .map(|(&h, &t)| if t == 0 { 0.0 } else { h as f64 / t as f64 })
            .collect();
        Ok(EvalReport { top1, per_class, samples: labels.len() })
    }
}

/// Exact-match fraction; prediction ties were already resolved upstream.
pub fn top1(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Parameter("top1 needs at least one sample".into()));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// CLS features of the last encoder block for every image, row per sample.
/// The model is read-only; extraction parallelizes over images.
pub fn extract_features(model: &ViTModel, data: &Dataset, workers: usize) -> Result<Tensor> {
    if data.is_empty() {
        return Err(Error::Parameter("empty dataset".into()));
    }
    let d = model.cfg.embed_dim;
    let rows = ordered_map(&data.images, workers, |_, img| -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = ModelVars::register(&mut tape, model, false);
        let patches = patchify(&img.pixels, &model.cfg)?;
        let patch_rows = tape.constant(patches.dims(), patches.data().to_vec())?;
        let positions: Vec<usize> = (0..model.cfg.num_patches()).collect();
        let z = embed_tokens(&mut tape, &vars, patch_rows, &positions)?;
        let (out, _) = encoder_forward(&mut tape, &vars, model, z, false)?;
        Ok(tape.value(out)[..d].to_vec())
    });
    let mut data_out = Vec::with_capacity(data.len() * d);
    for r in rows {
        data_out.extend(r?);
    }
    Tensor::new(vec![data.len(), d], data_out)
}

#[derive(Debug, Clone)]
pub struct ProbeConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub bn_momentum: f64,
    /// Fraction of samples held out for evaluation (fixed-seed split).
    pub holdout: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 60,
            batch_size: 64,
            lr: 0.1,
            momentum: 0.9,
            bn_momentum: 0.1,
            holdout: 0.2,
            seed: 0,
        }
    }
}

fn split_indices(n: usize, holdout: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = KeyedRng::from_key(seed, &[stream::PROBE]);
    rng.shuffle(&mut order);
    let held = ((n as f64 * holdout).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let eval = order[..held].to_vec();
    let train = order[held..].to_vec();
    (train, eval)
}

/// Trains the BN + linear head on frozen features and reports held-out
/// top-1. Erroring on a single-class training split keeps the probe from
/// silently reporting 100%.
pub fn linear_probe(
    features: &Tensor,
    labels: &[usize],
    num_classes: usize,
    cfg: &ProbeConfig,
) -> Result<(ProbeHead, EvalReport)> {
    let n = features.dims()[0];
    let d = features.dims()[1];
    if labels.len() != n {
        return Err(Error::Shape(format!("{n} feature rows vs {} labels", labels.len())));
    }
    if num_classes < 2 {
        return Err(Error::Parameter("need at least two classes".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Parameter(format!("label {bad} out of range")));
    }
    let (train_idx, eval_idx) = split_indices(n, cfg.holdout, cfg.seed);
    let first = labels[train_idx[0]];
    if train_idx.iter().all(|&i| labels[i] == first) {
        return Err(Error::Degenerate("training split contains a single class".into()));
    }

    let mut head = ProbeHead::new(d, num_classes, cfg.seed);
    let mut velocity: Vec<Vec<f64>> = vec![
        vec![0.0; d],
        vec![0.0; d],
        vec![0.0; d * num_classes],
        vec![0.0; num_classes],
    ];
    let mut order = train_idx.clone();
    for epoch in 0..cfg.epochs {
        let mut rng = KeyedRng::from_key(cfg.seed, &[stream::PROBE, 1 + epoch as u64]);
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue; // batch statistics need at least two rows
            }
            let mut batch = Vec::with_capacity(chunk.len() * d);
            let mut batch_labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                batch.extend_from_slice(&features.data()[i * d..(i + 1) * d]);
                batch_labels.push(labels[i]);
            }
            let mut tape = Tape::new();
            let x = tape.constant(&[chunk.len(), d], batch)?;
            let gain = tape.leaf(&head.bn_gain);
            let bias = tape.leaf(&head.bn_bias);
            let normed = tape.batch_norm(x, gain, bias, BN_EPS)?;
            let w = tape.leaf(&head.weight);
            let b = tape.leaf(&head.bias);
            let logits0 = tape.matmul(normed, w)?;
            let logits = tape.add_row(logits0, b)?;
            let loss = tape.cross_entropy(logits, &batch_labels)?;
            let (mean, var) = tape.batch_stats(normed).expect("batch_norm node");
            for j in 0..d {
                head.running_mean[j] =
                    (1.0 - cfg.bn_momentum) * head.running_mean[j] + cfg.bn_momentum * mean[j];
                head.running_var[j] =
                    (1.0 - cfg.bn_momentum) * head.running_var[j] + cfg.bn_momentum * var[j];
            }
            tape.backward(loss)?;
            let ids = [gain, bias, w, b];
            let mut tensors = [
                &mut head.bn_gain,
                &mut head.bn_bias,
                &mut head.weight,
                &mut head.bias,
            ];
            for ((id, tensor), vel) in ids.iter().zip(tensors.iter_mut()).zip(velocity.iter_mut())
            {
                let grad = tape.grad(*id).expect("tracked head parameter");
                let data = tensor.data_mut();
                for i in 0..data.len() {
                    vel[i] = cfg.momentum * vel[i] + grad[i];
                    data[i] -= cfg.lr * vel[i];
                }
            }
        }
    }

    let preds: Vec<usize> =
        eval_idx.iter().map(|&i| head.predict(&features.data()[i * d..(i + 1) * d])).collect();
    let eval_labels: Vec<usize> = eval_idx.iter().map(|&i| labels[i]).collect();
    let report = EvalReport::from_predictions(&preds, &eval_labels, num_classes)?;
    Ok((head, report))
}

#[derive(Debug, Clone)]
pub struct FinetuneConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub holdout: f64,
    pub seed: u64,
    pub workers: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 20,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 0.05,
            holdout: 0.2,
            seed: 0,
            workers: 1,
        }
    }
}

/// Supervised fine-tuning: every encoder parameter plus a fresh linear head
/// on the CLS token, cross-entropy over classes, AdamW. With zero epochs
/// this reduces to evaluating the initialized head on frozen features.
pub fn finetune(model: &mut ViTModel, data: &Dataset, cfg: &FinetuneConfig) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Parameter("empty dataset".into()));
    }
    let classes = data.num_classes();
    if classes < 2 {
        return Err(Error::Degenerate("dataset has a single class".into()));
    }
    let d = model.cfg.embed_dim;
    let mut rng = KeyedRng::from_key(cfg.seed, &[stream::HEAD, 1]);
    let mut head_w = Tensor::trunc_normal(&[d, classes], 0.01, &mut rng).with_grad();
    let mut head_b = Tensor::zeros(&[classes]).with_grad();

    let (train_idx, eval_idx) = split_indices(data.len(), cfg.holdout, cfg.seed);
    let n_params = model.params().len();
    let mut opt = {
        let mut all = model.params();
        all.push(&head_w);
        all.push(&head_b);
        AdamW::new(&all)
    };
    let train_cfg = TrainConfig { seed: cfg.seed, ..TrainConfig::default() };

    let mut order = train_idx.clone();
    for epoch in 0..cfg.epochs {
        let mut shuffle_rng = KeyedRng::from_key(cfg.seed, &[stream::HEAD, 2 + epoch as u64]);
        shuffle_rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let model_ref: &ViTModel = model;
            let head_w_ref = &head_w;
            let head_b_ref = &head_b;
            let jobs: Vec<usize> = chunk.to_vec();
            let outcomes = ordered_map(&jobs, cfg.workers, |_, &i| -> Result<(f64, Vec<Vec<f64>>)> {
                let img = &data.images[i];
                let mut tape = Tape::new();
                let vars = ModelVars::register(&mut tape, model_ref, true);
                let patches = patchify(&img.pixels, &model_ref.cfg)?;
                let rows = tape.constant(patches.dims(), patches.data().to_vec())?;
                let positions: Vec<usize> = (0..model_ref.cfg.num_patches()).collect();
                let z = embed_tokens(&mut tape, &vars, rows, &positions)?;
                let (out, _) = encoder_forward(&mut tape, &vars, model_ref, z, false)?;
                let cls = tape.gather_rows(out, &[0])?;
                let w = tape.leaf(head_w_ref);
                let b = tape.leaf(head_b_ref);
                let logits0 = tape.matmul(cls, w)?;
                let logits = tape.add_row(logits0, b)?;
                let loss = tape.cross_entropy(logits, &[img.label])?;
                let loss_value = tape.value(loss)[0];
                if !loss_value.is_finite() {
                    return Err(Error::Numeric(format!("non-finite loss on sample {i}")));
                }
                tape.backward(loss)?;
                let mut grads: Vec<Vec<f64>> = vars
                    .flat
                    .iter()
                    .map(|&id| tape.grad(id).expect("tracked parameter").to_vec())
                    .collect();
                grads.push(tape.grad(w).expect("head weight grad").to_vec());
                grads.push(tape.grad(b).expect("head bias grad").to_vec());
                Ok((loss_value, grads))
            });
            let inv = 1.0 / chunk.len() as f64;
            let mut grads: Vec<Vec<f64>> = Vec::new();
            for outcome in outcomes {
                let (_, g) = outcome?;
                if grads.is_empty() {
                    grads = g.into_iter().map(|v| v.into_iter().map(|x| x * inv).collect()).collect();
                } else {
                    for (acc, gv) in grads.iter_mut().zip(g) {
                        for (a, x) in acc.iter_mut().zip(gv) {
                            *a += x * inv;
                        }
                    }
                }
            }
            let mut params = model.params_mut();
            params.push(&mut head_w);
            params.push(&mut head_b);
            debug_assert_eq!(params.len(), n_params + 2);
            opt.update(&mut params, &grads, cfg.lr, train_cfg.weight_decay)?;
        }
    }

    // evaluate on the held-out split with the (now frozen) model and head
    let preds_labels = ordered_map(&eval_idx, cfg.workers, |_, &i| -> Result<(usize, usize)> {
        let img = &data.images[i];
        let mut tape = Tape::new();
        let vars = ModelVars::register(&mut tape, model, false);
        let patches = patchify(&img.pixels, &model.cfg)?;
        let rows = tape.constant(patches.dims(), patches.data().to_vec())?;
        let positions: Vec<usize> = (0..model.cfg.num_patches()).collect();
        let z = embed_tokens(&mut tape, &vars, rows, &positions)?;
        let (out, _) = encoder_forward(&mut tape, &vars, model, z, false)?;
        let cls = &tape.value(out)[..d];
        let mut logits = head_b.data().to_vec();
        for (j, &x) in cls.iter().enumerate() {
            for c in 0..classes {
                logits[c] += x * head_w.data()[j * classes + c];
            }
        }
        Ok((argmax_tie_low(&logits), img.label))
    });
    let mut preds = Vec::with_capacity(eval_idx.len());
    let mut labels = Vec::with_capacity(eval_idx.len());
    for r in preds_labels {
        let (p, l) = r?;
        preds.push(p);
        labels.push(l);
    }
    EvalReport::from_predictions(&preds, &labels, classes)
}
