//! Tracks, windows and the dataset pipeline.
//!
//! Raw files become [`AgentTrack`]s, optional motion features are derived
//! per track, fixed-length windows are cut, and each window is normalized
//! around its last observed position.

mod features;
mod io;
mod split;
mod synth;
mod windows;

pub use features::derive_motion_features;
pub use io::{load_bbox_csv, load_bev_text, load_paths, write_bev_text};
pub use split::{leave_one_out, split_by_scene, split_ratio, validate_disjoint, Partitions, SplitPlan};
pub use synth::{circular, constant_velocity, piecewise_goal, synth_generate, SynthKind, SynthSpec};
pub use windows::{count_windows, make_windows, normalize, window_stride, NormKind, Window};

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Whether states are centroids `(x, y)` or boxes `(x1, y1, x2, y2)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CoordKind {
    Centroid,
    Box,
}

impl CoordKind {
    pub fn dim(self) -> usize {
        match self {
            CoordKind::Centroid => 2,
            CoordKind::Box => 4,
        }
    }
}

/// One agent's observations at a constant frame stride.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentTrack {
    pub scene: String,
    pub agent: u64,
    pub start_frame: i64,
    /// Frames between consecutive states.
    pub stride: i64,
    pub fps: f64,
    pub states: Vec<Vec<f64>>,
    /// Per-frame auxiliary columns; empty when the source has none.
    pub aux: Vec<Vec<f64>>,
}

impl AgentTrack {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn frame(&self, i: usize) -> i64 {
        self.start_frame + i as i64 * self.stride
    }

    /// Seconds between consecutive states.
    pub fn dt(&self) -> f64 {
        self.stride as f64 / self.fps
    }

    pub fn duration_secs(&self) -> f64 {
        self.len() as f64 * self.dt()
    }
}

/// Centroid of a box row, or the row itself for centroids.
pub fn box_centroid(row: &[f64]) -> [f64; 2] {
    if row.len() >= 4 {
        [(row[0] + row[2]) / 2.0, (row[1] + row[3]) / 2.0]
    } else {
        [row[0], row[1]]
    }
}

/// Width and height of a box row.
pub fn box_size(row: &[f64]) -> [f64; 2] {
    [row[2] - row[0], row[3] - row[1]]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    BevText,
    BboxCsv,
    Synthetic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureSet {
    /// Positions only.
    Position,
    /// Positions, velocities and accelerations.
    Motion,
}

macro_rules! named_enum {
    ($ty:ty, $what:literal, $($variant:path => $name:literal),+ $(,)?) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $name),+ })
            }
        }

        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.trim() {
                    $($name => Ok($variant),)+
                    other => Err(Error::Config(format!(concat!("unknown ", $what, " '{}'"), other))),
                }
            }
        }
    };
}

named_enum!(Format, "data format", Format::BevText => "bev-text", Format::BboxCsv => "bbox-csv", Format::Synthetic => "synthetic");
named_enum!(CoordKind, "coordinate kind", CoordKind::Centroid => "centroid", CoordKind::Box => "box");
named_enum!(FeatureSet, "feature set", FeatureSet::Position => "position", FeatureSet::Motion => "motion");

/// How a dataset is read and windowed.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub format: Format,
    pub fps: f64,
    /// Annotation stride in frames; inferred from the data when `None`.
    pub stride: Option<i64>,
    pub obs_len: usize,
    pub pred_len: usize,
    pub overlap: f64,
    pub coords: CoordKind,
    pub features: FeatureSet,
    pub norm: NormKind,
    /// Tracks shorter than this many seconds are discarded.
    pub min_track_secs: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            format: Format::BevText,
            fps: 2.5,
            stride: None,
            obs_len: 8,
            pred_len: 12,
            overlap: 0.5,
            coords: CoordKind::Centroid,
            features: FeatureSet::Motion,
            norm: NormKind::Offset,
            min_track_secs: 0.0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(Error::Config(format!("data.fps must be positive, got {}", self.fps)));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::Config(format!("data.overlap must lie in [0, 1), got {}", self.overlap)));
        }
        if self.obs_len == 0 || self.pred_len == 0 {
            return Err(Error::Config("data.obs_len and data.pred_len must be at least 1".into()));
        }
        if matches!(self.stride, Some(s) if s <= 0) {
            return Err(Error::Config("data.stride must be positive".into()));
        }
        if self.min_track_secs < 0.0 {
            return Err(Error::Config("data.min_track_secs must be non-negative".into()));
        }
        Ok(())
    }

    pub fn window_len(&self) -> usize {
        self.obs_len + self.pred_len
    }

    /// Width of one observed feature row.
    pub fn input_dim(&self) -> usize {
        let d = self.coords.dim();
        match self.features {
            FeatureSet::Position => d,
            FeatureSet::Motion => 3 * d,
        }
    }

    /// Number of steps covering `secs` seconds at this spec's rate.
    pub fn steps_for_secs(&self, secs: f64, stride: i64) -> usize {
        (secs * self.fps / stride as f64).round() as usize
    }
}

/// Features, windows and normalization for a set of tracks. Window ids are
/// assigned sequentially from `first_id`.
pub fn build_windows(tracks: &[AgentTrack], spec: &DatasetSpec, first_id: u64) -> Result<Vec<Window>> {
    spec.validate()?;
    let mut out = Vec::new();
    for t in tracks {
        if t.duration_secs() < spec.min_track_secs {
            continue;
        }
        let features = match spec.features {
            FeatureSet::Position => t.states.clone(),
            FeatureSet::Motion => match derive_motion_features(t) {
                Some(f) => f,
                None => continue,
            },
        };
        for mut w in make_windows(t, &features, spec) {
            w = normalize(w, spec.norm)?;
            w.id = first_id + out.len() as u64;
            out.push(w);
        }
    }
    Ok(out)
}

/// Inference window from one agent's position history. The last `obs_len`
/// rows are observed; earlier rows only feed the motion features, exactly
/// as they would inside a longer track. The unknown future is filled with
/// the last position. `aux` is empty or has one row per history row.
pub fn observed_window(history: &[Vec<f64>], aux: &[Vec<f64>], spec: &DatasetSpec, step_secs: f64) -> Result<Window> {
    spec.validate()?;
    let d = spec.coords.dim();
    if history.len() < spec.obs_len {
        return Err(Error::Validation(format!(
            "history has {} rows, the model observes {}",
            history.len(),
            spec.obs_len
        )));
    }
    if let Some(r) = history.iter().find(|r| r.len() != d) {
        return Err(Error::Validation(format!("history rows need {} columns, got {}", d, r.len())));
    }
    if !aux.is_empty() && aux.len() != history.len() {
        return Err(Error::Validation("aux needs one row per history row".into()));
    }
    if !(step_secs > 0.0 && step_secs.is_finite()) {
        return Err(Error::Validation(format!("step duration must be positive, got {}", step_secs)));
    }
    let last = history[history.len() - 1].clone();
    let mut states = history.to_vec();
    states.extend(std::iter::repeat_n(last, spec.pred_len));
    let track = AgentTrack {
        scene: String::new(),
        agent: 0,
        start_frame: 0,
        stride: 1,
        fps: 1.0 / step_secs,
        states,
        aux: Vec::new(),
    };
    let features = match spec.features {
        FeatureSet::Position => track.states.clone(),
        FeatureSet::Motion => derive_motion_features(&track)
            .ok_or_else(|| Error::Validation("motion features need at least three history rows".into()))?,
    };
    let start = history.len() - spec.obs_len;
    let end = start + spec.window_len();
    let window = Window {
        id: 0,
        scene: String::new(),
        agent: 0,
        start_frame: start as i64,
        obs: features[start..history.len()].to_vec(),
        aux: if aux.is_empty() { Vec::new() } else { aux[start..].to_vec() },
        positions: track.states[start..end].to_vec(),
        anchor: history[history.len() - 1].clone(),
        norm: NormKind::None,
    };
    normalize(window, spec.norm)
}
