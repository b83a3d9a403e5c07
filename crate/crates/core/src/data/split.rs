use std::collections::BTreeSet;

use rand::seq::SliceRandom;

use super::AgentTrack;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Partitions<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

impl<T> Default for Partitions<T> {
    fn default() -> Self {
        Partitions {
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        }
    }
}

/// How tracks are assigned to partitions. Whole tracks move together, so no
/// window can straddle two partitions.
#[derive(Clone, Debug, PartialEq)]
pub enum SplitPlan {
    /// Seeded shuffle, then contiguous shares of `ratios` (train, val, test).
    Ratio { ratios: [f64; 3], seed: u64 },
    /// One scene is the test set; the rest is split into train and val.
    LeaveOneOut { test_scene: String, val_ratio: f64, seed: u64 },
    /// Explicit scene lists.
    ByScene {
        train: Vec<String>,
        val: Vec<String>,
        test: Vec<String>,
    },
}

/// Index partition of `n` items: a seeded shuffle, then
/// `round(ratio·n)` items for the first two parts and the rest for the last.
pub fn split_ratio(n: usize, ratios: [f64; 3], seed: u64) -> Result<[Vec<usize>; 3]> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {:?} must be in [0, 1] and sum to 1", ratios)));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, &[0x5911]));
    let a = ((ratios[0] * n as f64).round() as usize).min(n);
    let b = ((ratios[1] * n as f64).round() as usize).min(n - a);
    Ok([idx[..a].to_vec(), idx[a..a + b].to_vec(), idx[a + b..].to_vec()])
}

/// One fold per distinct scene: `(test scene, training scenes)`.
pub fn leave_one_out(scenes: &[String]) -> Vec<(String, Vec<String>)> {
    let distinct: BTreeSet<&String> = scenes.iter().collect();
    distinct
        .iter()
        .map(|&test| {
            let rest = distinct.iter().filter(|s| **s != test).map(|s| (*s).clone()).collect();
            (test.clone(), rest)
        })
        .collect()
}

/// Assigns tracks by scene name; scenes in no list are dropped.
pub fn split_by_scene(tracks: Vec<AgentTrack>, train: &[String], val: &[String], test: &[String]) -> Result<Partitions<AgentTrack>> {
    let mut seen = BTreeSet::new();
    for s in train.iter().chain(val).chain(test) {
        if !seen.insert(s) {
            return Err(Error::Validation(format!("scene '{}' is assigned to more than one partition", s)));
        }
    }
    let mut out = Partitions::default();
    for t in tracks {
        if train.contains(&t.scene) {
            out.train.push(t);
        } else if val.contains(&t.scene) {
            out.val.push(t);
        } else if test.contains(&t.scene) {
            out.test.push(t);
        }
    }
    Ok(out)
}

/// Fails when any track (scene, agent, first frame) appears in two
/// partitions.
pub fn validate_disjoint(p: &Partitions<AgentTrack>) -> Result<()> {
    let mut seen = BTreeSet::new();
    for (name, part) in [("train", &p.train), ("val", &p.val), ("test", &p.test)] {
        let mut local = BTreeSet::new();
        for t in part {
            let key = (t.scene.clone(), t.agent, t.start_frame);
            if seen.contains(&key) {
                return Err(Error::Validation(format!(
                    "track {:?} of the {} partition also appears in an earlier partition",
                    key, name
                )));
            }
            local.insert(key);
        }
        seen.extend(local);
    }
    Ok(())
}

fn pick(tracks: &[AgentTrack], idx: &[usize]) -> Vec<AgentTrack> {
    let mut idx = idx.to_vec();
    idx.sort_unstable();
    idx.iter().map(|&i| tracks[i].clone()).collect()
}

impl SplitPlan {
    pub fn apply(&self, tracks: Vec<AgentTrack>) -> Result<Partitions<AgentTrack>> {
        let out = match self {
            SplitPlan::Ratio { ratios, seed } => {
                let [a, b, c] = split_ratio(tracks.len(), *ratios, *seed)?;
                Partitions {
                    train: pick(&tracks, &a),
                    val: pick(&tracks, &b),
                    test: pick(&tracks, &c),
                }
            }
            SplitPlan::LeaveOneOut {
                test_scene,
                val_ratio,
                seed,
            } => {
                let (test, rest): (Vec<_>, Vec<_>) = tracks.into_iter().partition(|t| &t.scene == test_scene);
                if test.is_empty() {
                    return Err(Error::Validation(format!("no tracks in held-out scene '{}'", test_scene)));
                }
                let [a, b, _] = split_ratio(rest.len(), [1.0 - val_ratio, *val_ratio, 0.0], *seed)?;
                Partitions {
                    train: pick(&rest, &a),
                    val: pick(&rest, &b),
                    test,
                }
            }
            SplitPlan::ByScene { train, val, test } => split_by_scene(tracks, train, val, test)?,
        };
        validate_disjoint(&out)?;
        Ok(out)
    }
}
