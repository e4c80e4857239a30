//! Per-token frequency scores γ and the combined sampling weights P_A,
//! refreshed periodically from full unmasked forward passes.
//!
//! γ_j is the low-pass energy fraction of token j: each non-CLS token row is
//! transformed along the embedding axis, filtered by [`gaussian_lowpass`]
//! gains, inverted, and its L2 norm divided by the Frobenius norm of all
//! non-CLS tokens. P_A normalizes the elementwise product γ ⊙ a_w; both
//! factors may be rescaled by any positive constant without changing P_A.

use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::parallel::ordered_map;
use crate::sampler::StrategyKind;
use crate::spectral::{fft, gaussian_lowpass, ifft, ComplexVector};
use crate::vit::{full_unmasked_forward, ViTModel};

/// Per-sample sampling weights for one refresh generation.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleWeights {
    pub sample_id: usize,
    pub a_w: Vec<f64>,
    pub gamma: Vec<f64>,
    pub p_a: Vec<f64>,
    pub refresh_epoch: u32,
}

/// Immutable map from sample id to weights; entries all share the same
/// refresh epoch within a generation. Readers clone the `Arc` holding a
/// store while the trainer builds and swaps in the next generation.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightStore {
    pub entries: Vec<SampleWeights>,
    pub generation: u32,
    pub refresh_epoch: u32,
}

impl WeightStore {
    pub fn get(&self, sample_id: usize) -> Option<&SampleWeights> {
        self.entries.get(sample_id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Low-frequency energy fraction per non-CLS token (row 0 is CLS).
///
/// For token j: `γ_j = ‖ifft(gains(σ) ⊙ fft(Z[j,:]))‖₂ / ‖Z[1:,:]‖_F`. The
/// transform runs along the embedding axis, length d.
pub fn gamma_scores(tokens: &Tensor, sigma: f64) -> Result<Vec<f64>> {
    let dims = tokens.dims();
    if dims.len() != 2 || dims[0] < 2 {
        return Err(Error::Shape(format!(
            "gamma_scores needs a (N+1)xd token matrix with N >= 1, got {dims:?}"
        )));
    }
    let d = dims[1];
    let n = dims[0] - 1;
    let filter = gaussian_lowpass(d, sigma)?;
    let data = tokens.data();
    let denom_sq: f64 = data[d..].iter().map(|&x| x * x).sum();
    if denom_sq <= 0.0 {
        return Err(Error::Degenerate("all non-CLS tokens are zero".into()));
    }
    let denom = denom_sq.sqrt();
    let mut gamma = Vec::with_capacity(n);
    for j in 1..=n {
        let row = ComplexVector::from_real(&data[j * d..(j + 1) * d]);
        let filtered = ifft(&filter.apply(&fft(&row))?);
        gamma.push(filtered.energy().sqrt() / denom);
    }
    Ok(gamma)
}

/// Normalized sampling weights: `P_A[i] = γ_i·a_w_i / Σ_j γ_j·a_w_j`.
pub fn sampling_weights(a_w: &[f64], gamma: &[f64]) -> Result<Vec<f64>> {
    if a_w.len() != gamma.len() {
        return Err(Error::Shape(format!(
            "{} attention weights vs {} gamma scores",
            a_w.len(),
            gamma.len()
        )));
    }
    if a_w.is_empty() {
        return Err(Error::Shape("sampling_weights needs at least one token".into()));
    }
    let products: Vec<f64> = a_w.iter().zip(gamma).map(|(&a, &g)| a * g).collect();
    let total: f64 = products.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("all weight products are zero".into()));
    }
    Ok(products.into_iter().map(|p| p / total).collect())
}

/// Output of [`refresh`]: the new generation plus the wall-clock cost of the
/// full-forward sweep (reported so the refresh overhead stays observable).
pub struct RefreshOutcome {
    pub store: WeightStore,
    pub elapsed: Duration,
}

/// Recomputes a_w (always) and γ (frequency strategies only; all-ones
/// otherwise) with one full unmasked forward per image, then normalizes
/// P_A. Degenerate products fall back to uniform weights with a warning.
/// Returns `None` for the random strategy, which has no weights to refresh.
pub fn refresh(
    images: &[crate::data::LabeledImage],
    model: &ViTModel,
    sigma: f64,
    strategy: StrategyKind,
    generation: u32,
    refresh_epoch: u32,
    workers: usize,
) -> Result<Option<RefreshOutcome>> {
    if !strategy.uses_weights() {
        log::warn!("refresh requested for the random strategy; nothing to compute");
        return Ok(None);
    }
    let start = Instant::now();
    let results = ordered_map(images, workers, |_, img| {
        compute_sample_weights(model, img, sigma, strategy, refresh_epoch)
    });
    let mut entries = Vec::with_capacity(results.len());
    for r in results {
        entries.push(r?);
    }
    let store = WeightStore { entries, generation, refresh_epoch };
    Ok(Some(RefreshOutcome { store, elapsed: start.elapsed() }))
}

fn compute_sample_weights(
    model: &ViTModel,
    img: &crate::data::LabeledImage,
    sigma: f64,
    strategy: StrategyKind,
    refresh_epoch: u32,
) -> Result<SampleWeights> {
    let fwd = full_unmasked_forward(model, &img.pixels)?;
    let n = fwd.a_w.len();
    let gamma = if strategy.uses_frequency() {
        gamma_scores(&fwd.tokens, sigma)?
    } else {
        vec![1.0; n]
    };
    let p_a = match sampling_weights(&fwd.a_w, &gamma) {
        Ok(p) => p,
        Err(Error::Degenerate(msg)) => {
            log::warn!("sample {}: {msg}; falling back to uniform weights", img.sample_id);
            vec![1.0 / n as f64; n]
        }
        Err(e) => return Err(e),
    };
    Ok(SampleWeights { sample_id: img.sample_id, a_w: fwd.a_w, gamma, p_a, refresh_epoch })
}
