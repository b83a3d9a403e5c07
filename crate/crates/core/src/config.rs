//! Run configuration: flat `key = value` lines with `data.`, `split.`,
//! `model.` and `train.` prefixes. `#` starts a comment.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;

use crate::data::{
    build_windows, load_paths, synth_generate, AgentTrack, DatasetSpec, Format, Partitions, SplitPlan, SynthKind,
    SynthSpec, Window,
};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::{Checkpoint, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitKind {
    Ratio,
    LeaveOneOut,
    ByScene,
}

impl SplitKind {
    fn name(self) -> &'static str {
        match self {
            SplitKind::Ratio => "ratio",
            SplitKind::LeaveOneOut => "leave-one-out",
            SplitKind::ByScene => "by-scene",
        }
    }
}

/// Split settings as written in the config; [`SplitSettings::plan`] turns
/// them into a [`SplitPlan`].
#[derive(Clone, Debug, PartialEq)]
pub struct SplitSettings {
    pub kind: SplitKind,
    pub ratios: [f64; 3],
    pub test_scene: Option<String>,
    pub val_ratio: f64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

impl Default for SplitSettings {
    fn default() -> Self {
        Self {
            kind: SplitKind::Ratio,
            ratios: [0.7, 0.1, 0.2],
            test_scene: None,
            val_ratio: 0.1,
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
            seed: 0,
        }
    }
}

impl SplitSettings {
    pub fn plan(&self) -> Result<SplitPlan> {
        Ok(match self.kind {
            SplitKind::Ratio => SplitPlan::Ratio {
                ratios: self.ratios,
                seed: self.seed,
            },
            SplitKind::LeaveOneOut => SplitPlan::LeaveOneOut {
                test_scene: self
                    .test_scene
                    .clone()
                    .ok_or_else(|| Error::Config("split.test_scene is required for leave-one-out".into()))?,
                val_ratio: self.val_ratio,
                seed: self.seed,
            },
            SplitKind::ByScene => SplitPlan::ByScene {
                train: self.train.clone(),
                val: self.val.clone(),
                test: self.test.clone(),
            },
        })
    }
}

/// Windows of every partition plus the time between consecutive states.
#[derive(Clone, Debug)]
pub struct LoadedData {
    pub windows: Partitions<Window>,
    /// `None` when no tracks were loaded.
    pub step_secs: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: DatasetSpec,
    pub paths: Vec<PathBuf>,
    /// Generator settings used when `data.format = synthetic`.
    pub synth: SynthSpec,
    pub split: SplitSettings,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Keys set explicitly, by the file or by overrides.
    explicit: BTreeSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DatasetSpec::default(),
            paths: Vec::new(),
            synth: SynthSpec {
                kind: SynthKind::ConstantVelocity,
                n: 100,
                len: 20,
                seed: 0,
                noise: 0.0,
            },
            split: SplitSettings::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            explicit: BTreeSet::new(),
        }
    }
}

fn list(v: &str) -> Vec<String> {
    v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
}

fn parse<T: std::str::FromStr>(key: &str, v: &str, what: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{}: expected {}, got '{}'", key, what, v.trim())))
}

impl RunConfig {
    /// Parses config text. Unknown keys, malformed lines and repeated keys
    /// are errors naming the line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected 'key = value', got '{}'", line),
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("{} is set twice", key),
                });
            }
            cfg.set(key, value.trim()).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    /// Applies one fully qualified key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let known = if let Some(k) = key.strip_prefix("model.") {
            self.model.set(k, value)?
        } else if let Some(k) = key.strip_prefix("train.") {
            self.train.set(k, value)?
        } else if let Some(k) = key.strip_prefix("data.") {
            self.set_data(k, value)?
        } else if let Some(k) = key.strip_prefix("split.") {
            self.set_split(k, value)?
        } else {
            false
        };
        if !known {
            return Err(Error::Config(format!("unknown key '{}'", key)));
        }
        self.explicit.insert(key.to_string());
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{}' is not key=value", o)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    fn set_data(&mut self, key: &str, v: &str) -> Result<bool> {
        let full = format!("data.{}", key);
        let d = &mut self.data;
        match key {
            "format" => d.format = v.parse()?,
            "paths" => self.paths = list(v).into_iter().map(PathBuf::from).collect(),
            "fps" => d.fps = parse(&full, v, "a number")?,
            "stride" => {
                d.stride = match v.trim() {
                    "auto" => None,
                    s => Some(parse(&full, s, "an integer or 'auto'")?),
                }
            }
            "obs_len" => d.obs_len = parse(&full, v, "an integer")?,
            "pred_len" => d.pred_len = parse(&full, v, "an integer")?,
            "overlap" => d.overlap = parse(&full, v, "a number")?,
            "coords" => d.coords = v.parse()?,
            "features" => d.features = v.parse()?,
            "norm" => d.norm = v.parse()?,
            "min_track_secs" => d.min_track_secs = parse(&full, v, "a number")?,
            "synth_kind" => self.synth.kind = v.parse()?,
            "synth_n" => self.synth.n = parse(&full, v, "an integer")?,
            "synth_len" => self.synth.len = parse(&full, v, "an integer")?,
            "synth_noise" => self.synth.noise = parse(&full, v, "a number")?,
            "synth_seed" => self.synth.seed = parse(&full, v, "an integer")?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn set_split(&mut self, key: &str, v: &str) -> Result<bool> {
        let full = format!("split.{}", key);
        let s = &mut self.split;
        match key {
            "kind" => {
                s.kind = match v.trim() {
                    "ratio" => SplitKind::Ratio,
                    "leave-one-out" => SplitKind::LeaveOneOut,
                    "by-scene" => SplitKind::ByScene,
                    other => {
                        return Err(Error::Config(format!(
                            "{}: expected ratio, leave-one-out or by-scene, got '{}'",
                            full, other
                        )))
                    }
                }
            }
            "ratios" => {
                let parts = list(v);
                if parts.len() != 3 {
                    return Err(Error::Config(format!("{}: expected three comma-separated shares", full)));
                }
                for (dst, p) in s.ratios.iter_mut().zip(&parts) {
                    *dst = parse(&full, p, "a number")?;
                }
            }
            "test_scene" => s.test_scene = Some(v.trim().to_string()),
            "val_ratio" => s.val_ratio = parse(&full, v, "a number")?,
            "train" => s.train = list(v),
            "val" => s.val = list(v),
            "test" => s.test = list(v),
            "seed" => s.seed = parse(&full, v, "an integer")?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Derives the model's data-dependent sizes from the data section and
    /// validates everything. `aux_dim` is the width of auxiliary columns
    /// found in the data.
    pub fn finalize(&mut self, aux_dim: usize) -> Result<()> {
        self.data.validate()?;
        let derived = [
            ("model.input_dim", self.data.input_dim()),
            ("model.output_dim", self.data.coords.dim()),
            ("model.obs_len", self.data.obs_len),
            ("model.pred_len", self.data.pred_len),
            ("model.aux_dim", aux_dim),
        ];
        for (key, want) in derived {
            let slot = match key {
                "model.input_dim" => &mut self.model.input_dim,
                "model.output_dim" => &mut self.model.output_dim,
                "model.obs_len" => &mut self.model.obs_len,
                "model.pred_len" => &mut self.model.pred_len,
                _ => &mut self.model.aux_dim,
            };
            if self.explicit.contains(key) && *slot != want {
                return Err(Error::Config(format!(
                    "{} = {} conflicts with the data section, which implies {}",
                    key, slot, want
                )));
            }
            *slot = want;
        }
        self.model.validate()?;
        self.train.validate()?;
        self.split.plan()?;
        if self.data.format == Format::Synthetic {
            if self.synth.n == 0 || self.synth.len == 0 {
                return Err(Error::Config("data.synth_n and data.synth_len must be at least 1".into()));
            }
        } else if self.paths.is_empty() {
            return Err(Error::Config("data.paths is required unless data.format = synthetic".into()));
        }
        Ok(())
    }

    /// Loads or generates the tracks named by the data section.
    pub fn load_tracks(&self) -> Result<Vec<AgentTrack>> {
        match self.data.format {
            Format::Synthetic => Ok(synth_generate(&self.synth)),
            _ => load_paths(&self.paths, &self.data),
        }
    }

    /// Loads the data, finalizes the config against it, splits the tracks
    /// and cuts windows. Window ids are unique across the partitions.
    pub fn load_partitions(&mut self) -> Result<LoadedData> {
        let tracks = self.load_tracks()?;
        let aux_dim = tracks.first().and_then(|t| t.aux.first()).map_or(0, |r| r.len());
        if tracks.iter().any(|t| t.aux.iter().any(|r| r.len() != aux_dim)) {
            return Err(Error::Validation("tracks disagree on the number of auxiliary columns".into()));
        }
        self.finalize(aux_dim)?;
        let step_secs = tracks.first().map(|t| t.dt());
        let parts = self.split.plan()?.apply(tracks)?;
        let train = build_windows(&parts.train, &self.data, 0)?;
        let val = build_windows(&parts.val, &self.data, train.len() as u64)?;
        let test = build_windows(&parts.test, &self.data, (train.len() + val.len()) as u64)?;
        Ok(LoadedData {
            windows: Partitions { train, val, test },
            step_secs,
        })
    }

    /// Every setting as `key = value` pairs, grouped by section.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let d = &self.data;
        let p = |k: &str, v: String| (k.to_string(), v);
        let mut out = vec![
            p("data.format", d.format.to_string()),
            p(
                "data.paths",
                self.paths.iter().map(|x| x.display().to_string()).collect::<Vec<_>>().join(","),
            ),
            p("data.fps", d.fps.to_string()),
            p("data.stride", d.stride.map_or("auto".into(), |s| s.to_string())),
            p("data.obs_len", d.obs_len.to_string()),
            p("data.pred_len", d.pred_len.to_string()),
            p("data.overlap", d.overlap.to_string()),
            p("data.coords", d.coords.to_string()),
            p("data.features", d.features.to_string()),
            p("data.norm", d.norm.to_string()),
            p("data.min_track_secs", d.min_track_secs.to_string()),
            p("data.synth_kind", self.synth.kind.to_string()),
            p("data.synth_n", self.synth.n.to_string()),
            p("data.synth_len", self.synth.len.to_string()),
            p("data.synth_noise", self.synth.noise.to_string()),
            p("data.synth_seed", self.synth.seed.to_string()),
        ];
        let s = &self.split;
        out.push(p("split.kind", s.kind.name().into()));
        out.push(p(
            "split.ratios",
            s.ratios.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(","),
        ));
        if let Some(t) = &s.test_scene {
            out.push(p("split.test_scene", t.clone()));
        }
        out.push(p("split.val_ratio", s.val_ratio.to_string()));
        out.push(p("split.train", s.train.join(",")));
        out.push(p("split.val", s.val.join(",")));
        out.push(p("split.test", s.test.join(",")));
        out.push(p("split.seed", s.seed.to_string()));
        out.extend(self.model.to_pairs());
        out.extend(self.train.to_pairs());
        out
    }

    /// Data, split and train settings, the part of a run a checkpoint
    /// records next to the model.
    pub fn recorded_pairs(&self) -> Vec<(String, String)> {
        self.to_pairs()
            .into_iter()
            .filter(|(k, _)| !k.starts_with("model."))
            .collect()
    }

    /// Rebuilds a run from a checkpoint's recorded settings. Model keys are
    /// explicit, so data that disagrees with the checkpoint fails to
    /// finalize.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in ckpt.extra.iter().chain(&ckpt.model.to_pairs()) {
            cfg.set(k, v)
                .map_err(|e| Error::Checkpoint(format!("recorded setting {}: {}", k, e)))?;
        }
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(s, "{} = {}", k, v);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Ablation;

    #[test]
    fn parses_sections_and_comments() {
        let text = "# run\n data.format = synthetic \ndata.synth_n = 12 # agents\nmodel.ablation = E\ntrain.epochs = 3\nsplit.ratios = 0.5, 0.25, 0.25\n";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.data.format, Format::Synthetic);
        assert_eq!(c.synth.n, 12);
        assert_eq!(c.model.ablation, Ablation::E);
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.split.ratios, [0.5, 0.25, 0.25]);
        assert!(c.is_explicit("model.ablation"));
    }

    #[test]
    fn errors_name_the_field_or_line() {
        let e = RunConfig::parse("data.fps = 2.5\nmodel.hidden = 3\n").unwrap_err();
        assert!(matches!(&e, Error::Parse { line: 2, msg } if msg.contains("model.hidden")), "{}", e);
        let e = RunConfig::parse("train.lr = fast").unwrap_err();
        assert!(e.to_string().contains("train.lr"), "{}", e);
        assert!(matches!(RunConfig::parse("data.fps 2"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(RunConfig::parse("data.fps = 2\ndata.fps = 3"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn finalize_derives_and_checks_model_sizes() {
        let mut c = RunConfig::parse("data.format = synthetic\ndata.obs_len = 5").unwrap();
        c.finalize(0).unwrap();
        assert_eq!((c.model.obs_len, c.model.input_dim), (5, 6));
        let mut c = RunConfig::parse("data.format = synthetic\nmodel.pred_len = 4").unwrap();
        let e = c.finalize(0).unwrap_err();
        assert!(e.to_string().contains("model.pred_len"), "{}", e);
        let mut c = RunConfig::parse("data.format = bev-text").unwrap();
        assert!(c.finalize(0).unwrap_err().to_string().contains("data.paths"));
    }

    #[test]
    fn effective_text_reparses_to_the_same_config() {
        let mut c = RunConfig::parse("data.format = synthetic\nsplit.kind = leave-one-out\nsplit.test_scene = zara1\ntrain.k = 4").unwrap();
        c.apply_overrides(&["model.ablation=D", "train.seed = 7"]).unwrap();
        c.finalize(0).unwrap();
        let mut back = RunConfig::parse(&c.to_text()).unwrap();
        back.finalize(0).unwrap();
        assert_eq!(back.to_pairs(), c.to_pairs());
        assert!(c.to_text().contains("model.ablation = D"));
    }
}
