//! Training objective: best-of-many trajectory RMSE, goal RMSE and the
//! Gaussian KL term.
//!
//! Two routes compute the same quantities. The plain `f64` functions score
//! one sample at a time and serve as the reference; [`graph_step_loss`]
//! builds the batched, differentiable version on a [`Graph`].

use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Real;

/// Diagonal Gaussian stored as mean and log-variance.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGaussian {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl LatentGaussian {
    pub fn standard(dim: usize) -> Self {
        Self {
            mu: vec![0.0; dim],
            logvar: vec![0.0; dim],
        }
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.logvar.iter().map(|lv| (0.5 * lv).exp()).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub bom_rmse: f64,
    pub goal_rmse: f64,
    /// Absent in deterministic mode.
    pub kld: Option<f64>,
    pub total: f64,
}

fn check_pair(op: &'static str, pred: &[Vec<f64>], gt: &[Vec<f64>]) -> Result<()> {
    if pred.len() != gt.len() || pred.iter().zip(gt).any(|(p, g)| p.len() != g.len()) {
        return dim_err(op, "prediction and ground truth differ in shape");
    }
    Ok(())
}

/// Root of the mean squared residual over every step and coordinate.
pub fn rmse_traj(pred: &[Vec<f64>], gt: &[Vec<f64>]) -> Result<f64> {
    check_pair("rmse_traj", pred, gt)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, g) in pred.iter().zip(gt) {
        for (a, b) in p.iter().zip(g) {
            sum += (a - b) * (a - b);
            n += 1;
        }
    }
    if n == 0 {
        return dim_err("rmse_traj", "empty trajectory");
    }
    Ok((sum / n as f64).sqrt())
}

/// Smallest per-proposal RMSE and the index achieving it (lowest on ties).
pub fn bom_loss(preds: &[Vec<Vec<f64>>], gt: &[Vec<f64>]) -> Result<(f64, usize)> {
    if preds.is_empty() {
        return Err(Error::Contract("bom_loss needs at least one proposal".into()));
    }
    let mut best = (f64::INFINITY, 0);
    for (k, p) in preds.iter().enumerate() {
        let r = rmse_traj(p, gt)?;
        if r < best.0 {
            best = (r, k);
        }
    }
    Ok(best)
}

/// KL(q‖p) for diagonal Gaussians, summed over dimensions.
pub fn kld_gaussian(q: &LatentGaussian, p: &LatentGaussian) -> Result<f64> {
    let n = q.mu.len();
    if q.logvar.len() != n || p.mu.len() != n || p.logvar.len() != n {
        return dim_err("kld_gaussian", "distributions differ in dimension");
    }
    for s in q.sigma().into_iter().chain(p.sigma()) {
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::NonFinite(format!("standard deviation {} is not positive", s)));
        }
    }
    let mut kl = 0.0;
    for i in 0..n {
        let (mq, lq, mp, lp) = (q.mu[i], q.logvar[i], p.mu[i], p.logvar[i]);
        kl += 0.5 * (lp - lq + ((lq.exp() + (mq - mp).powi(2)) / lp.exp()) - 1.0);
    }
    Ok(kl)
}

/// Per-sample objective. `latent` is `(recognition, prior)` in stochastic
/// mode and `None` in deterministic mode.
pub fn total_loss(
    preds: &[Vec<Vec<f64>>],
    goal_positions: &[Vec<f64>],
    gt: &[Vec<f64>],
    latent: Option<(&LatentGaussian, &LatentGaussian)>,
) -> Result<LossBreakdown> {
    let (bom_rmse, _) = bom_loss(preds, gt)?;
    let goal_rmse = rmse_traj(goal_positions, gt)?;
    let kld = latent.map(|(q, p)| kld_gaussian(q, p)).transpose()?;
    Ok(LossBreakdown {
        bom_rmse,
        goal_rmse,
        kld,
        total: bom_rmse + goal_rmse + kld.unwrap_or(0.0),
    })
}

/// Differentiable loss terms for one decoded encoder step, each summed over
/// the batch.
#[derive(Clone, Copy, Debug)]
pub struct StepLossVars {
    /// Per-sample total, `B×1`.
    pub per_sample: Var,
    pub total: Var,
    pub bom: Var,
    pub goal: Var,
    pub kld: Option<Var>,
}

/// Latent parameters on a graph: recognition mean/log-variance, then prior.
#[derive(Clone, Copy, Debug)]
pub struct LatentVars {
    pub q_mu: Var,
    pub q_logvar: Var,
    pub p_mu: Var,
    pub p_logvar: Var,
}

/// Row-wise RMSE over a sequence of `R×d` steps, giving `R×1`.
fn graph_rmse<T: Real>(g: &mut Graph<T>, pred: &[Var], gt: &[Var]) -> Result<Var> {
    if pred.len() != gt.len() || pred.is_empty() {
        return dim_err("rmse", "sequence lengths differ or are empty");
    }
    let d = g.shape(gt[0])[1];
    let mut acc: Option<Var> = None;
    for (&p, &y) in pred.iter().zip(gt) {
        let r = g.sub(p, y)?;
        let sq = g.square(r);
        let s = g.row_sum(sq)?;
        acc = Some(match acc {
            Some(a) => g.add(a, s)?,
            None => s,
        });
    }
    let mean = g.scale(acc.expect("non-empty"), 1.0 / (pred.len() * d) as f64);
    Ok(g.sqrt(mean))
}

/// Closed-form KL per row, `B×1`.
fn graph_kld<T: Real>(g: &mut Graph<T>, l: &LatentVars) -> Result<Var> {
    let dlv = g.sub(l.p_logvar, l.q_logvar)?;
    let var_q = g.exp(l.q_logvar);
    let dmu = g.sub(l.q_mu, l.p_mu)?;
    let dmu2 = g.square(dmu);
    let num = g.add(var_q, dmu2)?;
    let neg_lp = g.scale(l.p_logvar, -1.0);
    let inv_var_p = g.exp(neg_lp);
    let ratio = g.mul(num, inv_var_p)?;
    let inner = g.add(dlv, ratio)?;
    let inner = g.add_scalar(inner, -1.0);
    let s = g.row_sum(inner)?;
    Ok(g.scale(s, 0.5))
}

/// Builds the objective for one decoded encoder step.
///
/// `traj` holds `ℓ_d` tensors of shape `(K·B)×d` with proposal-major rows
/// (`k·B + b`), `goals` and `targets` hold `ℓ_d` tensors of shape `B×d`.
pub fn graph_step_loss<T: Real>(
    g: &mut Graph<T>,
    traj: &[Var],
    goals: &[Var],
    targets: &[Var],
    k: usize,
    latent: Option<&LatentVars>,
) -> Result<StepLossVars> {
    let tiled: Vec<Var> = targets
        .iter()
        .map(|&y| g.tile(y, k))
        .collect::<Result<_>>()?;
    let per_proposal = graph_rmse(g, traj, &tiled)?;
    let by_sample = g.unstack(per_proposal, k)?;
    let (bom_rows, _) = g.row_min(by_sample)?;
    let goal_rows = graph_rmse(g, goals, targets)?;
    let mut per_sample = g.add(bom_rows, goal_rows)?;
    let kld_rows = match latent {
        Some(l) => {
            let rows = graph_kld(g, l)?;
            per_sample = g.add(per_sample, rows)?;
            Some(rows)
        }
        None => None,
    };
    let total = g.sum(per_sample);
    let bom = g.sum(bom_rows);
    let goal = g.sum(goal_rows);
    let kld = kld_rows.map(|r| g.sum(r));
    Ok(StepLossVars {
        per_sample,
        total,
        bom,
        goal,
        kld,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn traj(points: &[[f64; 2]]) -> Vec<Vec<f64>> {
        points.iter().map(|p| p.to_vec()).collect()
    }

    #[test]
    fn rmse_examples() {
        let gt = traj(&[[0.0, 1.0], [1.0, 3.0]]);
        assert_eq!(rmse_traj(&gt, &gt).unwrap(), 0.0);
        let pred = traj(&[[0.0, 0.0], [1.0, 1.0]]);
        assert!((rmse_traj(&pred, &gt).unwrap() - 1.25f64.sqrt()).abs() < 1e-12);
        let shifted = traj(&[[-0.7, 0.3], [0.3, 2.3]]);
        assert!((rmse_traj(&shifted, &gt).unwrap() - 0.7).abs() < 1e-12);
        assert!(rmse_traj(&pred[..1], &gt).is_err());
    }

    #[test]
    fn bom_examples() {
        let gt = traj(&[[0.0, 1.0], [1.0, 3.0]]);
        let bad = traj(&[[0.0, 0.0], [1.0, 1.0]]);
        assert_eq!(bom_loss(std::slice::from_ref(&bad), &gt).unwrap().0, rmse_traj(&bad, &gt).unwrap());
        assert_eq!(bom_loss(&[bad.clone(), gt.clone()], &gt).unwrap(), (0.0, 1));
        // exact tie resolves to the first proposal
        assert_eq!(bom_loss(&[gt.clone(), gt.clone()], &gt).unwrap(), (0.0, 0));
        assert!(bom_loss(&[], &gt).is_err());
    }

    #[test]
    fn kld_examples() {
        let p = LatentGaussian::standard(1);
        assert_eq!(kld_gaussian(&p, &p).unwrap(), 0.0);
        let q = LatentGaussian {
            mu: vec![1.0],
            logvar: vec![0.0],
        };
        assert!((kld_gaussian(&q, &p).unwrap() - 0.5).abs() < 1e-12);
        let degenerate = LatentGaussian {
            mu: vec![0.0],
            logvar: vec![f64::NEG_INFINITY],
        };
        assert!(matches!(kld_gaussian(&degenerate, &p), Err(Error::NonFinite(_))));
    }

    #[test]
    fn total_examples() {
        let gt = traj(&[[0.0, 1.0], [1.0, 3.0]]);
        let q = LatentGaussian::standard(3);
        let zero = total_loss(std::slice::from_ref(&gt), &gt, &gt, Some((&q, &q))).unwrap();
        assert_eq!(zero.total, 0.0);
        assert_eq!(zero.kld, Some(0.0));
        let pred = traj(&[[0.0, 0.0], [1.0, 1.0]]);
        let det = total_loss(std::slice::from_ref(&pred), &pred, &gt, None).unwrap();
        assert!(det.kld.is_none());
        assert_eq!(det.total, det.bom_rmse + det.goal_rmse);
    }

    /// Graph route against the per-sample reference on random data.
    #[test]
    fn graph_loss_matches_reference() {
        use rand::Rng;
        let mut rng = crate::rng::stream(3, &[]);
        let (b, k, steps, d, lat) = (3usize, 2usize, 4usize, 2usize, 3usize);
        let mut rnd = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let traj_v: Vec<Vec<f64>> = (0..steps).map(|_| rnd(k * b * d)).collect();
        let goal_v: Vec<Vec<f64>> = (0..steps).map(|_| rnd(b * d)).collect();
        let tgt_v: Vec<Vec<f64>> = (0..steps).map(|_| rnd(b * d)).collect();
        let lat_v: Vec<Vec<f64>> = (0..4).map(|_| rnd(b * lat)).collect();

        let mut g = Graph::<f64>::new();
        let load = |g: &mut Graph<f64>, v: &Vec<f64>, rows: usize, cols: usize| {
            g.constant(Tensor::from_f64(&[rows, cols], v).unwrap())
        };
        let traj: Vec<Var> = traj_v.iter().map(|v| load(&mut g, v, k * b, d)).collect();
        let goals: Vec<Var> = goal_v.iter().map(|v| load(&mut g, v, b, d)).collect();
        let tgts: Vec<Var> = tgt_v.iter().map(|v| load(&mut g, v, b, d)).collect();
        let lv: Vec<Var> = lat_v.iter().map(|v| load(&mut g, v, b, lat)).collect();
        let latent = LatentVars {
            q_mu: lv[0],
            q_logvar: lv[1],
            p_mu: lv[2],
            p_logvar: lv[3],
        };
        let out = graph_step_loss(&mut g, &traj, &goals, &tgts, k, Some(&latent)).unwrap();

        let mut sum = 0.0;
        for s in 0..b {
            let rows = |src: &Vec<Vec<f64>>, r: usize| -> Vec<Vec<f64>> {
                src.iter().map(|t| t[r * d..(r + 1) * d].to_vec()).collect()
            };
            let preds: Vec<_> = (0..k).map(|kk| rows(&traj_v, kk * b + s)).collect();
            let gauss = |m: usize, l: usize| LatentGaussian {
                mu: lat_v[m][s * lat..(s + 1) * lat].to_vec(),
                logvar: lat_v[l][s * lat..(s + 1) * lat].to_vec(),
            };
            let (q, p) = (gauss(0, 1), gauss(2, 3));
            let want = total_loss(&preds, &rows(&goal_v, s), &rows(&tgt_v, s), Some((&q, &p))).unwrap();
            let got = g.value(out.per_sample).data()[s];
            assert!((got - want.total).abs() < 1e-12, "sample {}: {} vs {}", s, got, want.total);
            sum += want.total;
        }
        assert!((g.value(out.total).data()[0] - sum).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn bom_is_lower_bound(vals in prop::collection::vec(-5.0f64..5.0, 3 * 6 + 6)) {
            let gt: Vec<Vec<f64>> = vals[..6].chunks(2).map(|c| c.to_vec()).collect();
            let preds: Vec<Vec<Vec<f64>>> = vals[6..]
                .chunks(6)
                .map(|p| p.chunks(2).map(|c| c.to_vec()).collect())
                .collect();
            let (best, idx) = bom_loss(&preds, &gt).unwrap();
            for p in &preds {
                prop_assert!(best <= rmse_traj(p, &gt).unwrap());
            }
            prop_assert_eq!(best, rmse_traj(&preds[idx], &gt).unwrap());
        }

        #[test]
        fn kld_nonnegative(vals in prop::collection::vec(-3.0f64..3.0, 16)) {
            let q = LatentGaussian { mu: vals[0..4].to_vec(), logvar: vals[4..8].to_vec() };
            let p = LatentGaussian { mu: vals[8..12].to_vec(), logvar: vals[12..16].to_vec() };
            prop_assert!(kld_gaussian(&q, &p).unwrap() >= 0.0);
            prop_assert!(kld_gaussian(&q, &q).unwrap().abs() <= 1e-9);
        }
    }
}
