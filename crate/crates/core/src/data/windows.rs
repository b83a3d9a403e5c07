use std::fmt;
use std::str::FromStr;

use super::{AgentTrack, DatasetSpec};
use crate::error::{Error, Result};

/// Coordinate normalization applied to each window.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NormKind {
    None,
    /// Subtract the last observed position.
    Offset,
    /// Divide x coordinates by the frame width and y by the height.
    Pixel { width: f64, height: f64 },
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NormKind::None => f.write_str("none"),
            NormKind::Offset => f.write_str("offset"),
            NormKind::Pixel { width, height } => write!(f, "pixel:{}x{}", width, height),
        }
    }
}

impl FromStr for NormKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "none" => return Ok(NormKind::None),
            "offset" => return Ok(NormKind::Offset),
            _ => {}
        }
        let dims = s
            .strip_prefix("pixel:")
            .and_then(|r| r.split_once('x'))
            .and_then(|(w, h)| Some((w.parse::<f64>().ok()?, h.parse::<f64>().ok()?)))
            .filter(|(w, h)| *w > 0.0 && *h > 0.0);
        match dims {
            Some((width, height)) => Ok(NormKind::Pixel { width, height }),
            None => Err(Error::Config(format!(
                "unknown normalization '{}' (expected none, offset or pixel:WxH)",
                s
            ))),
        }
    }
}

/// One sample: `ℓ_e` observed feature rows and the `ℓ_e + ℓ_d` positions of
/// the whole window.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub id: u64,
    pub scene: String,
    pub agent: u64,
    pub start_frame: i64,
    pub obs: Vec<Vec<f64>>,
    pub aux: Vec<Vec<f64>>,
    pub positions: Vec<Vec<f64>>,
    /// Last observed position before normalization.
    pub anchor: Vec<f64>,
    pub norm: NormKind,
}

impl Window {
    pub fn obs_len(&self) -> usize {
        self.obs.len()
    }

    /// The `ℓ_d` future positions in the window's (normalized) frame.
    pub fn future(&self) -> &[Vec<f64>] {
        &self.positions[self.obs_len()..]
    }

    /// Maps rows from the normalized frame back to original coordinates.
    pub fn denormalize(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .map(|(c, &v)| match self.norm {
                        NormKind::None => v,
                        NormKind::Offset => v + self.anchor[c],
                        NormKind::Pixel { width, height } => v * if c % 2 == 0 { width } else { height },
                    })
                    .collect()
            })
            .collect()
    }

    pub fn future_raw(&self) -> Vec<Vec<f64>> {
        self.denormalize(self.future())
    }
}

/// Start-to-start distance of consecutive windows, `⌈(1 − overlap)·L⌉`.
pub fn window_stride(spec: &DatasetSpec) -> usize {
    let len = spec.window_len() as f64;
    // the small slack keeps exact products such as 0.5·20 from rounding up
    (((1.0 - spec.overlap) * len) - 1e-9).ceil().max(1.0) as usize
}

/// Number of windows `make_windows` cuts from a track of `len` states.
pub fn count_windows(len: usize, spec: &DatasetSpec) -> usize {
    let w = spec.window_len();
    if len < w {
        0
    } else {
        (len - w) / window_stride(spec) + 1
    }
}

/// Sliding windows over one track. `features` holds the observed feature
/// row of every state (positions, optionally with motion columns).
pub fn make_windows(track: &AgentTrack, features: &[Vec<f64>], spec: &DatasetSpec) -> Vec<Window> {
    let w = spec.window_len();
    let stride = window_stride(spec);
    let mut out = Vec::new();
    let mut s = 0;
    while s + w <= track.len() {
        let obs_end = s + spec.obs_len;
        out.push(Window {
            id: 0,
            scene: track.scene.clone(),
            agent: track.agent,
            start_frame: track.frame(s),
            obs: features[s..obs_end].to_vec(),
            aux: if track.aux.is_empty() {
                Vec::new()
            } else {
                track.aux[s..obs_end].to_vec()
            },
            positions: track.states[s..s + w].to_vec(),
            anchor: track.states[obs_end - 1].clone(),
            norm: NormKind::None,
        });
        s += stride;
    }
    out
}

/// Normalizes a raw window. Position columns of the observed features are
/// treated like positions; for pixel scaling every coordinate-like column
/// group (velocity, acceleration) is scaled as well.
pub fn normalize(mut w: Window, kind: NormKind) -> Result<Window> {
    if w.norm != NormKind::None {
        return Err(Error::Contract("window is already normalized".into()));
    }
    let d = w.anchor.len();
    match kind {
        NormKind::None => {}
        NormKind::Offset => {
            for r in w.positions.iter_mut() {
                r.iter_mut().zip(&w.anchor).for_each(|(v, a)| *v -= a);
            }
            for r in w.obs.iter_mut() {
                r[..d].iter_mut().zip(&w.anchor).for_each(|(v, a)| *v -= a);
            }
        }
        NormKind::Pixel { width, height } => {
            let scale = |r: &mut Vec<f64>| {
                for (c, v) in r.iter_mut().enumerate() {
                    *v /= if c % 2 == 0 { width } else { height };
                }
            };
            w.positions.iter_mut().for_each(scale);
            w.obs.iter_mut().for_each(scale);
        }
    }
    w.norm = kind;
    Ok(w)
}
