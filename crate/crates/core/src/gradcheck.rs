//! Central finite differences, the relative-error measure used to validate
//! analytic gradients, and the end-to-end check of the full model.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Fault, Graph};
use crate::model::{Batch, ForwardOptions, ModelConfig, Sgnet};
use crate::rng;
use crate::tensor::Tensor;

/// Default probe step.
pub const STEP: f64 = 1e-5;

/// Default acceptance threshold on relative error.
pub const TOLERANCE: f64 = 1e-4;

/// Denominator floor of [`relative_error`]; keeps gradients that are
/// numerically zero from producing huge ratios out of rounding noise.
pub const REL_FLOOR: f64 = 1e-6;

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h`
pub fn central_difference<F>(mut f: F, x: &mut [f64], i: usize, step: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let orig = x[i];
    x[i] = orig + step;
    let plus = f(x);
    x[i] = orig - step;
    let minus = f(x);
    x[i] = orig;
    (plus - minus) / (2.0 * step)
}

/// Full numerical gradient of `f` at `x`.
pub fn numerical_gradient<F>(mut f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| central_difference(&mut f, &mut work, i, step))
        .collect()
}

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Worst relative error seen in one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockReport {
    pub name: String,
    pub probes: usize,
    pub worst: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheck {
    pub blocks: Vec<BlockReport>,
    pub tolerance: f64,
    /// Probes redrawn because the perturbation crossed a non-smooth point.
    pub redrawn: usize,
}

impl ModelCheck {
    pub fn probes(&self) -> usize {
        self.blocks.iter().map(|b| b.probes).sum()
    }

    pub fn worst(&self) -> f64 {
        self.blocks.iter().map(|b| b.worst).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst() <= self.tolerance
    }
}

/// Random two-sample batch shaped for `cfg`, with smooth positions so the
/// targets resemble trajectories.
pub fn probe_batch(cfg: &ModelConfig, seed: u64) -> Result<Batch<f64>> {
    let mut r = rng::stream(seed, &[0xBA7C]);
    let b = 2;
    let len = cfg.obs_len + cfg.pred_len;
    let mut obs = Vec::new();
    let mut aux = Vec::new();
    let mut pos = Vec::new();
    for _ in 0..b {
        let vel: Vec<f64> = (0..cfg.output_dim).map(|_| r.random_range(-0.5..0.5)).collect();
        let p: Vec<Vec<f64>> = (0..len)
            .map(|t| {
                vel.iter()
                    .map(|v| v * (t as f64 - cfg.obs_len as f64 + 1.0) + 0.05 * r.random_range(-1.0..1.0))
                    .collect()
            })
            .collect();
        let o: Vec<Vec<f64>> = p[..cfg.obs_len]
            .iter()
            .map(|row| {
                let mut x = row.clone();
                x.extend((cfg.output_dim..cfg.input_dim).map(|_| r.random_range(-1.0..1.0)));
                x
            })
            .collect();
        let a: Vec<Vec<f64>> = (0..if cfg.aux_dim > 0 { cfg.obs_len } else { 0 })
            .map(|_| (0..cfg.aux_dim).map(|_| r.random_range(-1.0..1.0)).collect())
            .collect();
        obs.push(o);
        aux.push(a);
        pos.push(p);
    }
    fn view(v: &[Vec<Vec<f64>>]) -> Vec<&[Vec<f64>]> {
        v.iter().map(|s| s.as_slice()).collect()
    }
    let aux_view = if cfg.aux_dim > 0 { view(&aux) } else { Vec::new() };
    Batch::from_samples(&view(&obs), &aux_view, &view(&pos), (0..b as u64).collect())
}

/// Compares the analytic gradient of the full training objective against
/// central differences on `probes` parameter entries (at least one per
/// parameter tensor). A probe whose perturbation flips a rectifier, a
/// square root or a best-of-K choice is redrawn, since central differences
/// across a kink do not estimate the derivative. Runs in 64-bit precision. `fault` corrupts the
/// analytic side only.
pub fn check_model(cfg: &ModelConfig, seed: u64, probes: usize, fault: Option<Fault>) -> Result<ModelCheck> {
    let mut model = Sgnet::<f64>::new(cfg.clone(), seed)?;
    let batch = probe_batch(cfg, seed)?;
    let opts = ForwardOptions::train(seed);

    let mut g = Graph::new();
    g.inject_fault(fault);
    let p = model.params().bind(&mut g);
    let out = model.forward(&mut g, &p, &batch, &opts)?;
    let obj = out.objective(&mut g, batch.size())?;
    g.backward(obj.total)?;
    let analytic: Vec<Tensor<f64>> = p
        .vars()
        .iter()
        .zip(model.params().tensors())
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let base_pattern = g.branch_pattern();
    let loss = |m: &Sgnet<f64>| -> Result<(f64, Vec<usize>)> {
        let mut g = Graph::new();
        let p = m.params().bind(&mut g);
        let out = m.forward(&mut g, &p, &batch, &opts)?;
        let obj = out.objective(&mut g, batch.size())?;
        Ok((g.value(obj.total).item()?, g.branch_pattern()))
    };

    let n_blocks = model.params().len();
    let sizes: Vec<usize> = model.params().tensors().iter().map(|t| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut r = rng::stream(seed, &[0x9A0B]);
    let mut blocks: Vec<BlockReport> = (0..n_blocks)
        .map(|i| BlockReport {
            name: model.params().name(i).to_string(),
            probes: 0,
            worst: 0.0,
        })
        .collect();
    let mut redrawn = 0;
    let mut done = 0;
    // one probe per tensor first, then uniformly over all entries
    while done < probes.max(n_blocks) {
        let (block, idx) = if done < n_blocks {
            (done, r.random_range(0..sizes[done]))
        } else {
            let mut flat = r.random_range(0..total);
            let mut block = 0;
            while flat >= sizes[block] {
                flat -= sizes[block];
                block += 1;
            }
            (block, flat)
        };
        let orig = model.params().tensors()[block].data()[idx];
        model.params_mut().tensors_mut()[block].data_mut()[idx] = orig + STEP;
        let (plus, plus_pattern) = loss(&model)?;
        model.params_mut().tensors_mut()[block].data_mut()[idx] = orig - STEP;
        let (minus, minus_pattern) = loss(&model)?;
        model.params_mut().tensors_mut()[block].data_mut()[idx] = orig;
        if plus_pattern != base_pattern || minus_pattern != base_pattern {
            redrawn += 1;
            if redrawn > 10 * probes.max(n_blocks) {
                return Err(Error::Validation("too many probes straddle non-smooth points".into()));
            }
            continue;
        }
        let numeric = (plus - minus) / (2.0 * STEP);
        let err = relative_error(analytic[block].data()[idx], numeric);
        let b = &mut blocks[block];
        b.probes += 1;
        b.worst = b.worst.max(err);
        done += 1;
    }
    Ok(ModelCheck {
        blocks,
        tolerance: TOLERANCE,
        redrawn,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let g = numerical_gradient(|v| v[0] * v[0] + 3.0 * v[1], &[3.0, -1.0], STEP);
        assert!((g[0] - 6.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn relative_error_is_symmetric_and_floored() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert_eq!(relative_error(1.0, 2.0), relative_error(2.0, 1.0));
        assert!(relative_error(1e-12, -1e-12) < 1e-5);
    }
}
