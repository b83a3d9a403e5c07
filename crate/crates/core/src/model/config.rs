use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// How the goal estimator turns one encoder state into a goal sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SgeVariant {
    Recurrent,
    Feedforward,
    Convolutional,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Conditional VAE producing `k` proposals.
    Stochastic,
    /// Single proposal from a non-linear embedding of the encoder state.
    Deterministic,
}

/// Which side of the network receives the aggregated goals.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    /// Encoder and decoder.
    ED,
    /// Encoder only.
    E,
    /// Decoder only.
    D,
}

/// Activation applied to regressed coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputActivation {
    Identity,
    /// Rectified outputs, reproducing the regressor equation literally.
    FaithfulRelu,
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
                    other => Err(Error::Config(format!(
                        concat!("unknown ", $what, " '{}'"), other
                    ))),
                }
            }
        }
    };
}

named_enum!(SgeVariant, "goal estimator variant",
    SgeVariant::Recurrent => "recurrent",
    SgeVariant::Feedforward => "feedforward",
    SgeVariant::Convolutional => "convolutional");
named_enum!(Mode, "mode", Mode::Stochastic => "stochastic", Mode::Deterministic => "deterministic");
named_enum!(Ablation, "ablation", Ablation::ED => "ED", Ablation::E => "E", Ablation::D => "D");
named_enum!(OutputActivation, "output activation",
    OutputActivation::Identity => "identity",
    OutputActivation::FaithfulRelu => "faithful-relu");

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Columns of the observed feature rows embedded by the main input layer.
    /// The first `output_dim` of them are positions.
    pub input_dim: usize,
    /// Auxiliary columns (e.g. optical flow) embedded by a separate layer.
    pub aux_dim: usize,
    /// 2 for centroids, 4 for boxes.
    pub output_dim: usize,
    pub embed_dim: usize,
    pub aux_embed_dim: usize,
    pub enc_hidden: usize,
    pub dec_hidden: usize,
    pub goal_hidden: usize,
    pub latent_dim: usize,
    pub obs_len: usize,
    pub pred_len: usize,
    pub k: usize,
    pub sge: SgeVariant,
    pub mode: Mode,
    pub ablation: Ablation,
    pub output_activation: OutputActivation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 6,
            aux_dim: 0,
            output_dim: 2,
            embed_dim: 512,
            aux_embed_dim: 128,
            enc_hidden: 512,
            dec_hidden: 512,
            goal_hidden: 128,
            latent_dim: 32,
            obs_len: 8,
            pred_len: 12,
            k: 20,
            sge: SgeVariant::Recurrent,
            mode: Mode::Stochastic,
            ablation: Ablation::ED,
            output_activation: OutputActivation::Identity,
        }
    }
}

impl ModelConfig {
    /// The small configuration used for end-to-end gradient checks.
    pub fn tiny() -> Self {
        Self {
            input_dim: 2,
            output_dim: 2,
            embed_dim: 8,
            aux_embed_dim: 4,
            enc_hidden: 8,
            dec_hidden: 8,
            goal_hidden: 4,
            latent_dim: 2,
            obs_len: 3,
            pred_len: 3,
            k: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("output_dim", self.output_dim),
            ("embed_dim", self.embed_dim),
            ("enc_hidden", self.enc_hidden),
            ("dec_hidden", self.dec_hidden),
            ("goal_hidden", self.goal_hidden),
            ("latent_dim", self.latent_dim),
            ("obs_len", self.obs_len),
            ("pred_len", self.pred_len),
            ("k", self.k),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{} must be at least 1", name)));
            }
        }
        if self.aux_dim > 0 && self.aux_embed_dim == 0 {
            return Err(Error::Config("model.aux_embed_dim must be at least 1".into()));
        }
        if self.input_dim < self.output_dim {
            return Err(Error::Config(format!(
                "model.input_dim {} is smaller than model.output_dim {}",
                self.input_dim, self.output_dim
            )));
        }
        Ok(())
    }

    /// Number of proposals actually produced.
    pub fn proposals(&self) -> usize {
        match self.mode {
            Mode::Deterministic => 1,
            Mode::Stochastic => self.k,
        }
    }

    pub fn encoder_goals(&self) -> bool {
        matches!(self.ablation, Ablation::ED | Ablation::E)
    }

    pub fn decoder_goals(&self) -> bool {
        matches!(self.ablation, Ablation::ED | Ablation::D)
    }

    /// Width of the concatenated input embedding.
    pub fn embedding_width(&self) -> usize {
        self.embed_dim + if self.aux_dim > 0 { self.aux_embed_dim } else { 0 }
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let p = |k: &str, v: String| (format!("model.{}", k), v);
        vec![
            p("input_dim", self.input_dim.to_string()),
            p("aux_dim", self.aux_dim.to_string()),
            p("output_dim", self.output_dim.to_string()),
            p("embed_dim", self.embed_dim.to_string()),
            p("aux_embed_dim", self.aux_embed_dim.to_string()),
            p("enc_hidden", self.enc_hidden.to_string()),
            p("dec_hidden", self.dec_hidden.to_string()),
            p("goal_hidden", self.goal_hidden.to_string()),
            p("latent_dim", self.latent_dim.to_string()),
            p("obs_len", self.obs_len.to_string()),
            p("pred_len", self.pred_len.to_string()),
            p("k", self.k.to_string()),
            p("sge", self.sge.to_string()),
            p("mode", self.mode.to_string()),
            p("ablation", self.ablation.to_string()),
            p("output_activation", self.output_activation.to_string()),
        ]
    }

    /// Apply one `model.*` key (without the prefix). Returns false for
    /// unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num(key: &str, v: &str) -> Result<usize> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("model.{}: expected an integer, got '{}'", key, v)))
        }
        match key {
            "input_dim" => self.input_dim = num(key, value)?,
            "aux_dim" => self.aux_dim = num(key, value)?,
            "output_dim" => self.output_dim = num(key, value)?,
            "embed_dim" => self.embed_dim = num(key, value)?,
            "aux_embed_dim" => self.aux_embed_dim = num(key, value)?,
            "enc_hidden" => self.enc_hidden = num(key, value)?,
            "dec_hidden" => self.dec_hidden = num(key, value)?,
            "goal_hidden" => self.goal_hidden = num(key, value)?,
            "latent_dim" => self.latent_dim = num(key, value)?,
            "obs_len" => self.obs_len = num(key, value)?,
            "pred_len" => self.pred_len = num(key, value)?,
            "k" => self.k = num(key, value)?,
            "sge" => self.sge = value.parse()?,
            "mode" => self.mode = value.parse()?,
            "ablation" => self.ablation = value.parse()?,
            "output_activation" => self.output_activation = value.parse()?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_forces_single_proposal() {
        let cfg = ModelConfig {
            mode: Mode::Deterministic,
            k: 20,
            ..ModelConfig::default()
        };
        assert_eq!(cfg.proposals(), 1);
        assert_eq!(ModelConfig::default().proposals(), 20);
    }

    #[test]
    fn ablation_flags() {
        let mk = |a| ModelConfig {
            ablation: a,
            ..ModelConfig::default()
        };
        assert!(mk(Ablation::ED).encoder_goals() && mk(Ablation::ED).decoder_goals());
        assert!(mk(Ablation::E).encoder_goals() && !mk(Ablation::E).decoder_goals());
        assert!(!mk(Ablation::D).encoder_goals() && mk(Ablation::D).decoder_goals());
    }

    #[test]
    fn pairs_round_trip() {
        let cfg = ModelConfig {
            sge: SgeVariant::Convolutional,
            ablation: Ablation::D,
            output_activation: OutputActivation::FaithfulRelu,
            aux_dim: 3,
            ..ModelConfig::tiny()
        };
        let mut back = ModelConfig::default();
        for (k, v) in cfg.to_pairs() {
            assert!(back.set(k.strip_prefix("model.").unwrap(), &v).unwrap());
        }
        assert_eq!(back, cfg);
    }

    #[test]
    fn invalid_values_rejected() {
        let mut cfg = ModelConfig::default();
        assert!(cfg.set("sge", "transformer").is_err());
        assert!(cfg.set("k", "-1").is_err());
        assert!(!cfg.set("nonsense", "1").unwrap());
        cfg.pred_len = 0;
        assert!(cfg.validate().is_err());
    }
}
