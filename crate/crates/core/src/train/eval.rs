//! Evaluation driver: final-step predictions in original coordinates,
//! scored best-of-K per window.

use rayon::prelude::*;

use crate::data::Window;
use crate::error::{Error, Result};
use crate::metrics::{score_best_of, HorizonMetrics, MetricReport};
use crate::model::{Batch, ForwardOptions, Mode, Sgnet};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    /// Proposal count; `None` uses the model's. Ignored by deterministic
    /// models.
    pub k: Option<usize>,
    /// Step cutoffs; empty means the full prediction length.
    pub horizons: Vec<usize>,
    pub seed: u64,
    /// Windows per forward pass.
    pub chunk: usize,
    pub parallel: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            k: None,
            horizons: Vec::new(),
            seed: 0,
            chunk: 128,
            parallel: true,
        }
    }
}

/// Final-step proposals of one window, `K × ℓ_d × d`, de-normalized.
pub type Proposals = Vec<Vec<Vec<f64>>>;

/// Predicts every window. Each window's noise is keyed by its id, so the
/// result is independent of chunking and of parallel execution.
pub fn predict_windows(model: &Sgnet<f32>, windows: &[Window], opts: &EvalOptions) -> Result<Vec<Proposals>> {
    if opts.chunk == 0 {
        return Err(Error::Config("evaluation chunk size must be at least 1".into()));
    }
    let fwd = ForwardOptions {
        k: opts.k,
        ..ForwardOptions::infer(opts.seed)
    };
    let run = |chunk: &[Window]| -> Result<Vec<Proposals>> {
        let refs: Vec<&Window> = chunk.iter().collect();
        let batch = Batch::<f32>::from_windows(&refs, false)?;
        let sets = model.predict(&batch, &fwd)?;
        let last = sets.into_iter().last().ok_or_else(|| Error::Contract("no decoded step".into()))?;
        Ok(last
            .into_iter()
            .zip(chunk)
            .map(|(s, w)| s.trajectories.iter().map(|t| w.denormalize(t)).collect())
            .collect())
    };
    let parts: Vec<Result<Vec<Proposals>>> = if opts.parallel {
        windows.par_chunks(opts.chunk).map(run).collect()
    } else {
        windows.chunks(opts.chunk).map(run).collect()
    };
    let mut out = Vec::with_capacity(windows.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Effective proposal count for a model under `opts`.
pub fn effective_k(model: &Sgnet<f32>, opts: &EvalOptions) -> usize {
    match model.config().mode {
        Mode::Deterministic => 1,
        Mode::Stochastic => opts.k.unwrap_or(model.config().k),
    }
}

/// Scores final-step predictions against each window's future in original
/// coordinates.
pub fn evaluate(model: &Sgnet<f32>, windows: &[Window], opts: &EvalOptions) -> Result<MetricReport> {
    if windows.is_empty() {
        return Err(Error::Validation("no windows to evaluate".into()));
    }
    if model.config().mode == Mode::Deterministic && opts.k.is_some_and(|k| k != 1) {
        log::warn!("deterministic model produces one proposal; ignoring k = {}", opts.k.unwrap_or(1));
    }
    let preds = predict_windows(model, windows, opts)?;
    score_windows(&preds, windows, &opts.horizons, effective_k(model, opts), model.config().output_dim)
}

/// Best-of-K scores of given proposals, averaged over windows.
pub fn score_windows(
    preds: &[Proposals],
    windows: &[Window],
    horizons: &[usize],
    k: usize,
    output_dim: usize,
) -> Result<MetricReport> {
    let full = windows.first().map(|w| w.future().len()).unwrap_or(0);
    let horizons = if horizons.is_empty() { vec![full] } else { horizons.to_vec() };
    let per_window: Vec<Vec<HorizonMetrics>> = preds
        .iter()
        .zip(windows)
        .map(|(p, w)| score_best_of(p, &w.future_raw(), &horizons))
        .collect::<Result<_>>()?;
    MetricReport::average(&per_window, k, output_dim)
}
