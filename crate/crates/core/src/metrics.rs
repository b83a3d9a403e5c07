//! Displacement and bounding-box metrics, scored best-of-K per window.
//!
//! Trajectories are `ℓ × d` slices of rows. Centroid data has `d = 2`;
//! box data stores `x1, y1, x2, y2` with `d = 4`, in which case ADE and FDE
//! are measured between box centroids.

use serde_json::{Map, Value};

use crate::error::{dim_err, Error, Result};

fn centroid(row: &[f64]) -> [f64; 2] {
    if row.len() >= 4 {
        [(row[0] + row[2]) / 2.0, (row[1] + row[3]) / 2.0]
    } else {
        [row[0], row[1]]
    }
}

fn check(op: &'static str, pred: &[Vec<f64>], gt: &[Vec<f64>], min_d: usize) -> Result<()> {
    if pred.is_empty() {
        return dim_err(op, "empty trajectory");
    }
    if pred.len() != gt.len() {
        return dim_err(op, format!("{} predicted steps vs {} ground-truth steps", pred.len(), gt.len()));
    }
    for (p, g) in pred.iter().zip(gt) {
        if p.len() != g.len() || p.len() < min_d {
            return dim_err(op, format!("rows need {} matching coordinates", min_d));
        }
    }
    Ok(())
}

fn check_horizon(op: &'static str, horizon: usize, len: usize) -> Result<()> {
    if horizon == 0 || horizon > len {
        return dim_err(op, format!("horizon {} outside 1..={}", horizon, len));
    }
    Ok(())
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Mean Euclidean distance over all steps.
pub fn ade(pred: &[Vec<f64>], gt: &[Vec<f64>]) -> Result<f64> {
    check("ade", pred, gt, 2)?;
    let total: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| dist(centroid(p), centroid(g)))
        .sum();
    Ok(total / pred.len() as f64)
}

/// Euclidean distance at the last step.
pub fn fde(pred: &[Vec<f64>], gt: &[Vec<f64>]) -> Result<f64> {
    check("fde", pred, gt, 2)?;
    let (p, g) = (pred.last().expect("non-empty"), gt.last().expect("non-empty"));
    Ok(dist(centroid(p), centroid(g)))
}

/// Mean squared error over the four stored box coordinates of the first
/// `horizon` steps.
pub fn mse_bbox(pred: &[Vec<f64>], gt: &[Vec<f64>], horizon: usize) -> Result<f64> {
    check("mse_bbox", pred, gt, 4)?;
    check_horizon("mse_bbox", horizon, pred.len())?;
    let mut sum = 0.0;
    for (p, g) in pred.iter().zip(gt).take(horizon) {
        for c in 0..4 {
            sum += (p[c] - g[c]).powi(2);
        }
    }
    Ok(sum / (4 * horizon) as f64)
}

fn centroid_sq(p: &[f64], g: &[f64]) -> f64 {
    let (a, b) = (centroid(p), centroid(g));
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)) / 2.0
}

/// Mean squared centroid error over the first `horizon` steps, averaged
/// over the two centroid coordinates.
pub fn c_mse(pred: &[Vec<f64>], gt: &[Vec<f64>], horizon: usize) -> Result<f64> {
    check("c_mse", pred, gt, 4)?;
    check_horizon("c_mse", horizon, pred.len())?;
    let sum: f64 = pred.iter().zip(gt).take(horizon).map(|(p, g)| centroid_sq(p, g)).sum();
    Ok(sum / horizon as f64)
}

/// Squared centroid error at step `horizon`, averaged over the two coordinates.
pub fn cf_mse(pred: &[Vec<f64>], gt: &[Vec<f64>], horizon: usize) -> Result<f64> {
    check("cf_mse", pred, gt, 4)?;
    check_horizon("cf_mse", horizon, pred.len())?;
    Ok(centroid_sq(&pred[horizon - 1], &gt[horizon - 1]))
}

/// Intersection over union of two `x1, y1, x2, y2` boxes.
pub fn fiou(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() < 4 || gt.len() < 4 {
        return dim_err("fiou", "boxes need four coordinates");
    }
    for b in [pred, gt] {
        if b[2] < b[0] || b[3] < b[1] {
            return Err(Error::Contract(format!("box {:?} has negative extent", &b[..4])));
        }
    }
    let w = (pred[2].min(gt[2]) - pred[0].max(gt[0])).max(0.0);
    let h = (pred[3].min(gt[3]) - pred[1].max(gt[1])).max(0.0);
    let inter = w * h;
    let area = |b: &[f64]| (b[2] - b[0]) * (b[3] - b[1]);
    let union = area(pred) + area(gt) - inter;
    if union <= 0.0 {
        return Ok(0.0);
    }
    Ok(inter / union)
}

/// Metrics for one horizon. Box-only fields are `None` for centroid data.
#[derive(Clone, Debug, PartialEq)]
pub struct HorizonMetrics {
    pub horizon: usize,
    pub ade: f64,
    pub fde: f64,
    pub mse: Option<f64>,
    pub c_mse: Option<f64>,
    pub cf_mse: Option<f64>,
    pub fiou: Option<f64>,
}

impl HorizonMetrics {
    fn fields(&self) -> Vec<(&'static str, f64)> {
        let mut out = vec![("ade", self.ade), ("fde", self.fde)];
        for (name, v) in [
            ("mse", self.mse),
            ("c_mse", self.c_mse),
            ("cf_mse", self.cf_mse),
            ("fiou", self.fiou),
        ] {
            if let Some(v) = v {
                out.push((name, v));
            }
        }
        out
    }
}

/// Scores one proposal against the ground truth for each horizon.
pub fn score_single(pred: &[Vec<f64>], gt: &[Vec<f64>], horizons: &[usize]) -> Result<Vec<HorizonMetrics>> {
    check("score", pred, gt, 2)?;
    let boxes = gt[0].len() >= 4;
    horizons
        .iter()
        .map(|&h| {
            check_horizon("score", h, gt.len())?;
            let (p, g) = (&pred[..h], &gt[..h]);
            Ok(HorizonMetrics {
                horizon: h,
                ade: ade(p, g)?,
                fde: fde(p, g)?,
                mse: boxes.then(|| mse_bbox(p, g, h)).transpose()?,
                c_mse: boxes.then(|| c_mse(p, g, h)).transpose()?,
                cf_mse: boxes.then(|| cf_mse(p, g, h)).transpose()?,
                fiou: boxes.then(|| fiou(&p[h - 1], &g[h - 1])).transpose()?,
            })
        })
        .collect()
}

/// Best-of-K scoring: each metric takes its own best proposal (minimum
/// error, maximum overlap).
pub fn score_best_of(proposals: &[Vec<Vec<f64>>], gt: &[Vec<f64>], horizons: &[usize]) -> Result<Vec<HorizonMetrics>> {
    let mut best: Option<Vec<HorizonMetrics>> = None;
    for p in proposals {
        let s = score_single(p, gt, horizons)?;
        best = Some(match best {
            None => s,
            Some(b) => b
                .into_iter()
                .zip(s)
                .map(|(a, c)| HorizonMetrics {
                    horizon: a.horizon,
                    ade: a.ade.min(c.ade),
                    fde: a.fde.min(c.fde),
                    mse: a.mse.zip(c.mse).map(|(x, y)| x.min(y)),
                    c_mse: a.c_mse.zip(c.c_mse).map(|(x, y)| x.min(y)),
                    cf_mse: a.cf_mse.zip(c.cf_mse).map(|(x, y)| x.min(y)),
                    fiou: a.fiou.zip(c.fiou).map(|(x, y)| x.max(y)),
                })
                .collect(),
        });
    }
    best.ok_or_else(|| Error::Contract("no proposals to score".into()))
}

/// Window-averaged metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub windows: usize,
    pub k: usize,
    pub output_dim: usize,
    pub horizons: Vec<HorizonMetrics>,
}

impl MetricReport {
    /// Averages per-window scores (each already best-of-K).
    pub fn average(per_window: &[Vec<HorizonMetrics>], k: usize, output_dim: usize) -> Result<Self> {
        let first = per_window
            .first()
            .ok_or_else(|| Error::Validation("no windows to evaluate".into()))?;
        let n = per_window.len() as f64;
        let mean = |f: &dyn Fn(&HorizonMetrics) -> Option<f64>, i: usize| -> Option<f64> {
            let mut s = 0.0;
            for w in per_window {
                s += f(&w[i])?;
            }
            Some(s / n)
        };
        let horizons = first
            .iter()
            .enumerate()
            .map(|(i, h)| HorizonMetrics {
                horizon: h.horizon,
                ade: mean(&|m| Some(m.ade), i).expect("always present"),
                fde: mean(&|m| Some(m.fde), i).expect("always present"),
                mse: mean(&|m| m.mse, i),
                c_mse: mean(&|m| m.c_mse, i),
                cf_mse: mean(&|m| m.cf_mse, i),
                fiou: mean(&|m| m.fiou, i),
            })
            .collect();
        Ok(Self {
            windows: per_window.len(),
            k,
            output_dim,
            horizons,
        })
    }

    /// Header and one value row, columns named `metric_horizon`.
    pub fn to_csv(&self) -> String {
        let mut names = vec!["windows".to_string(), "k".to_string()];
        let mut values = vec![self.windows.to_string(), self.k.to_string()];
        for h in &self.horizons {
            for (name, v) in h.fields() {
                names.push(format!("{}_{}", name, h.horizon));
                values.push(format!("{}", v));
            }
        }
        format!("{}\n{}\n", names.join(","), values.join(","))
    }

    pub fn to_json(&self) -> String {
        let mut obj = Map::new();
        obj.insert("windows".into(), self.windows.into());
        obj.insert("k".into(), self.k.into());
        obj.insert("output_dim".into(), self.output_dim.into());
        if self.output_dim >= 4 {
            obj.insert("mse_averages_over".into(), "x1,y1,x2,y2".into());
        }
        for h in &self.horizons {
            for (name, v) in h.fields() {
                obj.insert(format!("{}_{}", name, h.horizon), Value::from(v));
            }
        }
        let mut s = serde_json::to_string_pretty(&Value::Object(obj)).expect("serializable");
        s.push('\n');
        s
    }

    /// Looks up a metric by name at a horizon.
    pub fn get(&self, metric: &str, horizon: usize) -> Option<f64> {
        let h = self.horizons.iter().find(|h| h.horizon == horizon)?;
        h.fields().into_iter().find(|(n, _)| *n == metric).map(|(_, v)| v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rows(v: &[&[f64]]) -> Vec<Vec<f64>> {
        v.iter().map(|r| r.to_vec()).collect()
    }

    #[test]
    fn displacement_examples() {
        let pred = rows(&[&[1.0, 1.0], &[2.0, 2.0]]);
        let gt = rows(&[&[1.0, 2.0], &[2.0, 4.0]]);
        assert_eq!(ade(&gt, &gt).unwrap(), 0.0);
        assert_eq!(fde(&gt, &gt).unwrap(), 0.0);
        assert!((ade(&pred, &gt).unwrap() - 1.5).abs() < 1e-9);
        assert!((fde(&pred, &gt).unwrap() - 2.0).abs() < 1e-9);
        assert!(ade(&[], &[]).is_err());
    }

    #[test]
    fn box_examples() {
        let gt = rows(&[&[0.0, 0.0, 2.0, 2.0], &[1.0, 1.0, 3.0, 5.0]]);
        let shifted: Vec<Vec<f64>> = gt
            .iter()
            .map(|b| vec![b[0] + 3.0, b[1] + 4.0, b[2] + 3.0, b[3] + 4.0])
            .collect();
        for h in 1..=2 {
            assert_eq!(mse_bbox(&gt, &gt, h).unwrap(), 0.0);
            assert_eq!(c_mse(&gt, &gt, h).unwrap(), 0.0);
            assert_eq!(cf_mse(&gt, &gt, h).unwrap(), 0.0);
            assert!((c_mse(&shifted, &gt, h).unwrap() - 12.5).abs() < 1e-9);
        }
        assert_eq!(c_mse(&shifted[..1], &gt[..1], 1).unwrap(), cf_mse(&shifted[..1], &gt[..1], 1).unwrap());
        assert!(mse_bbox(&gt, &gt, 3).is_err());
    }

    #[test]
    fn fiou_examples() {
        let unit = [0.0, 0.0, 1.0, 1.0];
        assert_eq!(fiou(&unit, &unit).unwrap(), 1.0);
        assert_eq!(fiou(&unit, &[2.0, 2.0, 3.0, 3.0]).unwrap(), 0.0);
        assert!((fiou(&unit, &[0.5, 0.0, 1.5, 1.0]).unwrap() - 1.0 / 3.0).abs() < 1e-9);
        assert_eq!(fiou(&[0.0; 4], &[0.0; 4]).unwrap(), 0.0);
        assert!(matches!(fiou(&[1.0, 0.0, 0.0, 1.0], &unit), Err(Error::Contract(_))));
    }

    #[test]
    fn report_serialization() {
        let gt = rows(&[&[0.0, 0.0, 2.0, 2.0], &[1.0, 1.0, 3.0, 5.0]]);
        let s = score_single(&gt, &gt, &[1, 2]).unwrap();
        let r = MetricReport::average(&[s], 1, 4).unwrap();
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.starts_with("windows,k,ade_1,fde_1,mse_1,c_mse_1,cf_mse_1,fiou_1,ade_2"));
        let json: Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(json["fiou_2"], 1.0);
        assert_eq!(r.get("mse", 2), Some(0.0));
        assert!(MetricReport::average(&[], 1, 4).is_err());
    }

    fn box_traj(v: &[f64]) -> Vec<Vec<f64>> {
        v.chunks(4)
            .map(|c| vec![c[0], c[1], c[0] + c[2].abs(), c[1] + c[3].abs()])
            .collect()
    }

    proptest! {
        /// Best-of-K equals a brute-force scan over proposals, metric by metric.
        #[test]
        fn best_of_matches_scan(gt in prop::collection::vec(-5.0f64..5.0, 12),
                                props in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 12), 1..6)) {
            let gt = box_traj(&gt);
            let props: Vec<_> = props.iter().map(|p| box_traj(p)).collect();
            let best = score_best_of(&props, &gt, &[2, 3]).unwrap();
            for (i, &h) in [2usize, 3].iter().enumerate() {
                let mut scan = [f64::INFINITY, f64::INFINITY, f64::INFINITY, f64::INFINITY, f64::INFINITY, 0.0];
                for p in &props {
                    scan[0] = scan[0].min(ade(&p[..h], &gt[..h]).unwrap());
                    scan[1] = scan[1].min(fde(&p[..h], &gt[..h]).unwrap());
                    scan[2] = scan[2].min(mse_bbox(p, &gt, h).unwrap());
                    scan[3] = scan[3].min(c_mse(p, &gt, h).unwrap());
                    scan[4] = scan[4].min(cf_mse(p, &gt, h).unwrap());
                    scan[5] = f64::max(scan[5], fiou(&p[h - 1], &gt[h - 1]).unwrap());
                }
                let b = &best[i];
                prop_assert_eq!(b.horizon, h);
                prop_assert_eq!([b.ade, b.fde, b.mse.unwrap(), b.c_mse.unwrap(), b.cf_mse.unwrap(), b.fiou.unwrap()], scan);
            }
        }

        #[test]
        fn translation_and_scaling(pred in prop::collection::vec(-5.0f64..5.0, 8),
                                   gt in prop::collection::vec(-5.0f64..5.0, 8),
                                   dx in -10.0f64..10.0, dy in -10.0f64..10.0, s in 0.1f64..4.0) {
            let to = |v: &[f64], f: &dyn Fn(f64, usize) -> f64| -> Vec<Vec<f64>> {
                v.chunks(2).map(|c| vec![f(c[0], 0), f(c[1], 1)]).collect()
            };
            let (p, g) = (to(&pred, &|x, _| x), to(&gt, &|x, _| x));
            let shift = |x: f64, i: usize| x + if i == 0 { dx } else { dy };
            let (pt, gt_t) = (to(&pred, &shift), to(&gt, &shift));
            prop_assert!((ade(&p, &g).unwrap() - ade(&pt, &gt_t).unwrap()).abs() < 1e-9);
            prop_assert!((fde(&p, &g).unwrap() - fde(&pt, &gt_t).unwrap()).abs() < 1e-9);
            let (ps, gs) = (to(&pred, &|x, _| x * s), to(&gt, &|x, _| x * s));
            prop_assert!((ade(&ps, &gs).unwrap() - s * ade(&p, &g).unwrap()).abs() < 1e-9);
            prop_assert!((fde(&ps, &gs).unwrap() - s * fde(&p, &g).unwrap()).abs() < 1e-9);
        }
    }
}
