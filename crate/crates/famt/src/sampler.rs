//! Weighted ordering of patch indices and the mask/throw/visible partition.
//!
//! Ordering uses sequential inverse-CDF draws without replacement: at each
//! step the remaining weights are renormalized, a uniform variate picks the
//! first index whose cumulative weight reaches it, and the index is removed.
//! The partition then takes the top of the ordering as masked, the middle as
//! thrown, and the tail as visible.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::rng::KeyedRng;

/// Token-selection strategy. `Am`/`Fam` are masking-only (throw ratio is
/// forced to zero); `Fam`/`Famt` add the frequency term to the attention
/// weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrategyKind {
    Random,
    Am,
    Amt,
    Fam,
    Famt,
}

impl StrategyKind {
    /// Whether plans need sampling weights (everything but `Random`).
    pub fn uses_weights(self) -> bool {
        !matches!(self, StrategyKind::Random)
    }

    /// Whether γ comes from the frequency scores (otherwise all-ones).
    pub fn uses_frequency(self) -> bool {
        matches!(self, StrategyKind::Fam | StrategyKind::Famt)
    }

    /// Masking-only variants ignore the configured throw ratio.
    pub fn forces_no_throw(self) -> bool {
        matches!(self, StrategyKind::Am | StrategyKind::Fam)
    }

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Random => "random",
            StrategyKind::Am => "am",
            StrategyKind::Amt => "amt",
            StrategyKind::Fam => "fam",
            StrategyKind::Famt => "famt",
        }
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "random" => Ok(StrategyKind::Random),
            "am" => Ok(StrategyKind::Am),
            "amt" => Ok(StrategyKind::Amt),
            "fam" => Ok(StrategyKind::Fam),
            "famt" => Ok(StrategyKind::Famt),
            other => Err(Error::Parameter(format!(
                "unknown strategy '{other}' (expected random|am|amt|fam|famt)"
            ))),
        }
    }
}

/// Which segment of the ordering gets thrown.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThrowMode {
    /// Throw the middle segment (default): top masked, bottom visible.
    Middle,
    /// Throw the bottom segment: the middle stays visible.
    Bottom,
}

impl ThrowMode {
    pub fn name(self) -> &'static str {
        match self {
            ThrowMode::Middle => "middle",
            ThrowMode::Bottom => "bottom",
        }
    }
}

impl std::str::FromStr for ThrowMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "middle" => Ok(ThrowMode::Middle),
            "bottom" => Ok(ThrowMode::Bottom),
            other => Err(Error::Parameter(format!(
                "unknown throw mode '{other}' (expected middle|bottom)"
            ))),
        }
    }
}

/// Disjoint, exhaustive partition of patch indices 0..N-1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub mask_idx: Vec<usize>,
    pub throw_idx: Vec<usize>,
    pub visible_idx: Vec<usize>,
    pub strategy: StrategyKind,
    pub rng_seed: u64,
}

impl MaskPlan {
    pub fn num_patches(&self) -> usize {
        self.mask_idx.len() + self.throw_idx.len() + self.visible_idx.len()
    }

    /// Checks the partition invariant: pairwise disjoint, union = 0..N-1.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_patches();
        let mut seen = vec![false; n];
        for &i in self.mask_idx.iter().chain(&self.throw_idx).chain(&self.visible_idx) {
            if i >= n {
                return Err(Error::Usage(format!("plan index {i} out of range for {n} patches")));
            }
            if seen[i] {
                return Err(Error::Usage(format!("plan index {i} appears twice")));
            }
            seen[i] = true;
        }
        Ok(())
    }

    /// One-line debug form: `id mask=...​ throw=...` with comma lists.
    pub fn debug_line(&self, sample_id: usize) -> String {
        let join = |xs: &[usize]| {
            let mut s = String::new();
            for (k, &i) in xs.iter().enumerate() {
                if k > 0 {
                    s.push(',');
                }
                let _ = write!(s, "{i}");
            }
            s
        };
        format!("{sample_id} mask={} throw={}", join(&self.mask_idx), join(&self.throw_idx))
    }
}

/// Counts of masked and thrown tokens under the floor rule.
pub fn counts(n: usize, mask_ratio: f64, throw_ratio: f64) -> (usize, usize) {
    let c_m = (n as f64 * mask_ratio).floor() as usize;
    let c_t = (n as f64 * throw_ratio).floor() as usize;
    (c_m, c_t)
}

/// Orders all indices by sequential without-replacement inverse-CDF draws
/// over `weights` (nonnegative, not all zero). If the remaining weights ever
/// sum to zero, the tail is drawn uniformly.
pub fn weighted_order(weights: &[f64], rng: &mut KeyedRng) -> Result<Vec<usize>> {
    let n = weights.len();
    if n == 0 {
        return Err(Error::Parameter("weighted_order needs at least one weight".into()));
    }
    if weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
        return Err(Error::Parameter("weights must be finite and nonnegative".into()));
    }
    if weights.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Degenerate("all sampling weights are zero".into()));
    }
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut order = Vec::with_capacity(n);
    while !remaining.is_empty() {
        let total: f64 = remaining.iter().map(|&i| weights[i]).sum();
        let u = rng.uniform();
        let pick = if total > 0.0 {
            // first index whose renormalized cumulative weight reaches u
            let target = u * total;
            let mut cum = 0.0;
            let mut pick = remaining.len() - 1;
            for (k, &i) in remaining.iter().enumerate() {
                cum += weights[i];
                if cum >= target && cum > 0.0 {
                    pick = k;
                    break;
                }
            }
            pick
        } else {
            // remaining weights are all zero: uniform over what is left
            (u * remaining.len() as f64).min(remaining.len() as f64 - 1.0) as usize
        };
        order.push(remaining.remove(pick));
    }
    Ok(order)
}

/// Splits an ordering into the mask/throw/visible partition.
///
/// `Middle` throws `M[C_m..C_m+C_t]`; `Bottom` throws `M[N-C_t..]` and keeps
/// the middle visible.
pub fn throw_variant(
    order: &[usize],
    mask_ratio: f64,
    throw_ratio: f64,
    mode: ThrowMode,
    strategy: StrategyKind,
    rng_seed: u64,
) -> Result<MaskPlan> {
    validate_ratios(mask_ratio, throw_ratio)?;
    let n = order.len();
    let (c_m, c_t) = counts(n, mask_ratio, throw_ratio);
    let mask_idx = order[..c_m].to_vec();
    let (throw_idx, visible_idx) = match mode {
        ThrowMode::Middle => {
            (order[c_m..c_m + c_t].to_vec(), order[c_m + c_t..].to_vec())
        }
        ThrowMode::Bottom => {
            (order[n - c_t..].to_vec(), order[c_m..n - c_t].to_vec())
        }
    };
    Ok(MaskPlan { mask_idx, throw_idx, visible_idx, strategy, rng_seed })
}

fn validate_ratios(mask_ratio: f64, throw_ratio: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&mask_ratio) || !(0.0..=1.0).contains(&throw_ratio) {
        return Err(Error::Parameter(format!(
            "ratios must lie in [0, 1]: r={mask_ratio}, t={throw_ratio}"
        )));
    }
    if mask_ratio + throw_ratio > 1.0 {
        return Err(Error::Parameter(format!(
            "mask ratio + throw ratio must not exceed 1: r={mask_ratio} + t={throw_ratio}"
        )));
    }
    Ok(())
}

/// Builds the per-sample plan. `Random` permutes uniformly; weighted
/// strategies order by `weights`. Masking-only strategies force the throw
/// ratio to zero.
pub fn plan(
    weights: Option<&[f64]>,
    n: usize,
    strategy: StrategyKind,
    mask_ratio: f64,
    throw_ratio: f64,
    mode: ThrowMode,
    rng: &mut KeyedRng,
) -> Result<MaskPlan> {
    validate_ratios(mask_ratio, throw_ratio)?;
    let throw_ratio = if strategy.forces_no_throw() { 0.0 } else { throw_ratio };
    let rng_seed = rng.key();
    let order = if strategy.uses_weights() {
        let w = weights.ok_or_else(|| {
            Error::Usage(format!("strategy {} requires sampling weights", strategy.name()))
        })?;
        if w.len() != n {
            return Err(Error::Shape(format!("{} weights for {n} patches", w.len())));
        }
        weighted_order(w, rng)?
    } else {
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        order
    };
    throw_variant(&order, mask_ratio, throw_ratio, mode, strategy, rng_seed)
}
