//! The stepwise goal-driven recurrent predictor.
//!
//! At every observed step the encoder advances, the goal estimator proposes
//! one goal hidden state per future step, and (when decoding) a latent
//! sample seeds a decoder that attends to the not-yet-reached goals. The
//! aggregated goals also feed the encoder's next input.
//!
//! All coordinates handled here live in the normalized frame produced by
//! [`crate::data`]; de-normalization happens at evaluation time.

mod config;
mod forward;

pub use config::{Ablation, Mode, ModelConfig, OutputActivation, SgeVariant};
pub use forward::{
    latent_noise, Batch, DecodeSteps, ForwardOptions, ForwardOutput, GoalPath, ObjectiveVars, Phase,
    PredictionSet, StepOutput,
};
pub use crate::loss::LatentGaussian;

use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Bound, GruLayer, Linear, ParamStore};
use crate::rng;
use crate::tensor::{Real, Tensor};

/// Stream index used for parameter initialization.
const INIT_STREAM: u64 = 0x1417;

#[derive(Clone, Debug)]
enum SgeLayers {
    Recurrent { cell: GruLayer, feedback: Linear },
    Feedforward { hidden: Linear, out: Linear },
    Convolutional { seed: Linear, down: [Linear; 2], up: [Linear; 2] },
}

#[derive(Clone, Debug)]
enum LatentLayers {
    Cvae {
        target_encoder: GruLayer,
        recognition: Linear,
        prior: Linear,
        generation: Linear,
    },
    Deterministic { embed: Linear },
}

#[derive(Clone, Debug)]
struct Layers {
    embed: Linear,
    aux_embed: Option<Linear>,
    encoder: GruLayer,
    goal_init: Linear,
    sge: SgeLayers,
    goal_regressor: Linear,
    enc_attention: Option<Linear>,
    dec_attention: Option<Linear>,
    latent: LatentLayers,
    dec_input: Linear,
    decoder: GruLayer,
    regressor: Linear,
}

/// Attention output: aggregated feature and, when the path is enabled, the
/// `B×n` weights.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub feature: Var,
    pub weights: Option<Var>,
}

/// Mean and log-variance variables, each `rows×latent_dim`.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mu: Var,
    pub logvar: Var,
}

#[derive(Clone, Debug)]
pub struct Sgnet<T: Real> {
    cfg: ModelConfig,
    params: ParamStore<T>,
    layers: Layers,
}

impl<T: Real> Sgnet<T> {
    /// Fresh model with seeded initialization.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(seed, &[INIT_STREAM]);
        let rng = &mut rng;
        let mut s = ParamStore::new();
        let (g, he, hd) = (cfg.goal_hidden, cfg.enc_hidden, cfg.dec_hidden);
        let embed = Linear::new(&mut s, "embed", cfg.input_dim, cfg.embed_dim, rng);
        let aux_embed =
            (cfg.aux_dim > 0).then(|| Linear::new(&mut s, "aux_embed", cfg.aux_dim, cfg.aux_embed_dim, rng));
        let encoder = GruLayer::new(&mut s, "encoder", cfg.embedding_width() + g, he, rng);
        let goal_init = Linear::new(&mut s, "goal_init", he, g, rng);
        let sge = match cfg.sge {
            SgeVariant::Recurrent => SgeLayers::Recurrent {
                cell: GruLayer::new(&mut s, "sge.cell", g, g, rng),
                feedback: Linear::new(&mut s, "sge.feedback", g, g, rng),
            },
            SgeVariant::Feedforward => SgeLayers::Feedforward {
                hidden: Linear::new(&mut s, "sge.hidden", g, g, rng),
                out: Linear::new(&mut s, "sge.out", g, cfg.pred_len * g, rng),
            },
            SgeVariant::Convolutional => SgeLayers::Convolutional {
                seed: Linear::new(&mut s, "sge.seed", g, cfg.pred_len * g, rng),
                down: [
                    Linear::new(&mut s, "sge.conv1", 3 * g, g, rng),
                    Linear::new(&mut s, "sge.conv2", 3 * g, g, rng),
                ],
                up: [
                    Linear::new(&mut s, "sge.deconv1", 3 * g, g, rng),
                    Linear::new(&mut s, "sge.deconv2", 3 * g, g, rng),
                ],
            },
        };
        let goal_regressor = Linear::new(&mut s, "goal_regressor", g, cfg.output_dim, rng);
        let enc_attention = cfg
            .encoder_goals()
            .then(|| Linear::new(&mut s, "enc_attention", g, 1, rng));
        let dec_attention = cfg
            .decoder_goals()
            .then(|| Linear::new(&mut s, "dec_attention", g, 1, rng));
        let latent = match cfg.mode {
            Mode::Stochastic => LatentLayers::Cvae {
                target_encoder: GruLayer::new(&mut s, "target_encoder", cfg.output_dim, g, rng),
                recognition: Linear::new(&mut s, "recognition", he + g, 2 * cfg.latent_dim, rng),
                prior: Linear::new(&mut s, "prior", he, 2 * cfg.latent_dim, rng),
                generation: Linear::new(&mut s, "generation", he + cfg.latent_dim, hd, rng),
            },
            Mode::Deterministic => LatentLayers::Deterministic {
                embed: Linear::new(&mut s, "hidden_embed", he, hd, rng),
            },
        };
        let dec_input = Linear::new(&mut s, "dec_input", hd, hd, rng);
        let decoder = GruLayer::new(&mut s, "decoder", hd + g, hd, rng);
        let regressor = Linear::new(&mut s, "regressor", hd, cfg.output_dim, rng);
        Ok(Self {
            cfg,
            params: s,
            layers: Layers {
                embed,
                aux_embed,
                encoder,
                goal_init,
                sge,
                goal_regressor,
                enc_attention,
                dec_attention,
                latent,
                dec_input,
                decoder,
                regressor,
            },
        })
    }

    /// Model whose parameters are replaced by `named` tensors, matched by name
    /// and shape.
    pub fn from_named(cfg: ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut m = Self::new(cfg, 0)?;
        m.params.assign(named)?;
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Copy with parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> Sgnet<U> {
        Sgnet {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            layers: self.layers.clone(),
        }
    }

    fn activate(&self, g: &mut Graph<T>, x: Var) -> Var {
        match self.cfg.output_activation {
            OutputActivation::Identity => x,
            OutputActivation::FaithfulRelu => g.relu(x),
        }
    }

    fn rows(g: &Graph<T>, v: Var) -> usize {
        g.shape(v)[0]
    }

    /// Rectified embedding of the observed features, concatenated with the
    /// rectified auxiliary embedding when auxiliary columns are configured.
    pub fn embed_input(&self, g: &mut Graph<T>, p: &Bound, x: Var, aux: Option<Var>) -> Result<Var> {
        let e = self.layers.embed.apply(g, p, x)?;
        let e = g.relu(e);
        match (self.layers.aux_embed, aux) {
            (Some(layer), Some(a)) => {
                let ae = layer.apply(g, p, a)?;
                let ae = g.relu(ae);
                g.concat(&[e, ae])
            }
            (None, None) => Ok(e),
            (Some(_), None) => Err(Error::Contract("auxiliary features are configured but missing".into())),
            (None, Some(_)) => Err(Error::Contract("auxiliary features given but not configured".into())),
        }
    }

    /// Advances the encoder on `[x^e, x̃^e]`. Ablation D feeds zeros in place
    /// of the goal feature.
    pub fn encoder_step(&self, g: &mut Graph<T>, p: &Bound, xe: Var, goal: Var, h: Var) -> Result<Var> {
        let goal = if self.cfg.encoder_goals() {
            goal
        } else {
            let rows = Self::rows(g, goal);
            g.zeros(rows, self.cfg.goal_hidden)
        };
        let inp = g.concat(&[xe, goal])?;
        self.layers.encoder.step(g, p, inp, h)
    }

    /// Goal hidden states for the `ℓ_d` future steps, each `B×goal_hidden`.
    pub fn sge_forward(&self, g: &mut Graph<T>, p: &Bound, h_e: Var) -> Result<Vec<Var>> {
        let u = self.layers.goal_init.apply(g, p, h_e)?;
        let u = g.relu(u);
        let (b, gh, len) = (Self::rows(g, h_e), self.cfg.goal_hidden, self.cfg.pred_len);
        match &self.layers.sge {
            SgeLayers::Recurrent { cell, feedback } => {
                let mut out = Vec::with_capacity(len);
                let mut h = u;
                let mut inp = g.zeros(b, gh);
                for j in 0..len {
                    h = cell.step(g, p, inp, h)?;
                    out.push(h);
                    if j + 1 < len {
                        let f = feedback.apply(g, p, h)?;
                        inp = g.relu(f);
                    }
                }
                Ok(out)
            }
            SgeLayers::Feedforward { hidden, out } => {
                let hdn = hidden.apply(g, p, u)?;
                let hdn = g.relu(hdn);
                let flat = out.apply(g, p, hdn)?;
                (0..len).map(|j| g.slice_cols(flat, j * gh, (j + 1) * gh)).collect()
            }
            SgeLayers::Convolutional { seed, down, up } => {
                let flat = seed.apply(g, p, u)?;
                let flat = g.relu(flat);
                let seq: Vec<Var> = (0..len)
                    .map(|j| g.slice_cols(flat, j * gh, (j + 1) * gh))
                    .collect::<Result<_>>()?;
                let zero = g.zeros(b, gh);
                let l1 = seq.len().div_ceil(2);
                let s1 = temporal_conv(g, p, &down[0], &seq, l1, zero, true, conv_taps)?;
                let l2 = s1.len().div_ceil(2);
                let s2 = temporal_conv(g, p, &down[1], &s1, l2, zero, true, conv_taps)?;
                let s3 = temporal_conv(g, p, &up[0], &s2, l1, zero, true, deconv_taps)?;
                temporal_conv(g, p, &up[1], &s3, len, zero, false, deconv_taps)
            }
        }
    }

    /// One regressed `B×d` goal position per goal hidden.
    pub fn regress_goal_positions(&self, g: &mut Graph<T>, p: &Bound, hiddens: &[Var]) -> Result<Vec<Var>> {
        hiddens
            .iter()
            .map(|&h| {
                let y = self.layers.goal_regressor.apply(g, p, h)?;
                Ok(self.activate(g, y))
            })
            .collect()
    }

    /// Attention over all goals for the next encoder input. Ablation D
    /// returns a zero feature and no weights.
    pub fn aggregate_goals_encoder(&self, g: &mut Graph<T>, p: &Bound, hiddens: &[Var]) -> Result<Attended> {
        match self.layers.enc_attention {
            Some(layer) => {
                let scores = goal_scores(g, p, &layer, hiddens)?;
                attend(g, &scores, hiddens)
            }
            None => self.disabled(g, hiddens),
        }
    }

    /// Attention over the goal suffix starting at decoder step `i` (1-based).
    /// Ablation E returns a zero feature and no weights.
    pub fn aggregate_goals_decoder(&self, g: &mut Graph<T>, p: &Bound, hiddens: &[Var], i: usize) -> Result<Attended> {
        if i == 0 || i > hiddens.len() {
            return Err(Error::Contract(format!(
                "decoder step {} outside 1..={}",
                i,
                hiddens.len()
            )));
        }
        match self.layers.dec_attention {
            Some(layer) => {
                let suffix = &hiddens[i - 1..];
                let scores = goal_scores(g, p, &layer, suffix)?;
                attend(g, &scores, suffix)
            }
            None => self.disabled(g, hiddens),
        }
    }

    fn disabled(&self, g: &mut Graph<T>, hiddens: &[Var]) -> Result<Attended> {
        let first = hiddens
            .first()
            .ok_or_else(|| Error::Contract("empty goal sequence".into()))?;
        let rows = Self::rows(g, *first);
        Ok(Attended {
            feature: g.zeros(rows, self.cfg.goal_hidden),
            weights: None,
        })
    }

    fn cvae(&self) -> Result<(&GruLayer, &Linear, &Linear, &Linear)> {
        match &self.layers.latent {
            LatentLayers::Cvae {
                target_encoder,
                recognition,
                prior,
                generation,
            } => Ok((target_encoder, recognition, prior, generation)),
            LatentLayers::Deterministic { .. } => {
                Err(Error::Mode("the deterministic model has no latent networks".into()))
            }
        }
    }

    /// Final hidden of the target encoder run over the `ℓ_d` future
    /// positions.
    pub fn encode_target(&self, g: &mut Graph<T>, p: &Bound, future: &[Var]) -> Result<Var> {
        let (enc, ..) = self.cvae()?;
        let first = future
            .first()
            .ok_or_else(|| Error::Contract("empty target sequence".into()))?;
        let rows = Self::rows(g, *first);
        let mut h = g.zeros(rows, self.cfg.goal_hidden);
        for &y in future {
            h = enc.step(g, p, y, h)?;
        }
        Ok(h)
    }

    fn split_gaussian(&self, g: &mut Graph<T>, out: Var) -> Result<GaussianVars> {
        let l = self.cfg.latent_dim;
        Ok(GaussianVars {
            mu: g.slice_cols(out, 0, l)?,
            logvar: g.slice_cols(out, l, 2 * l)?,
        })
    }

    /// Recognition distribution from the encoder state and the encoded
    /// future. Only valid while training.
    pub fn cvae_recognize(&self, g: &mut Graph<T>, p: &Bound, h_e: Var, h_y: Var, phase: Phase) -> Result<GaussianVars> {
        if phase != Phase::Train {
            return Err(Error::Mode("the recognition network needs ground truth and runs only in training".into()));
        }
        let (_, recognition, ..) = self.cvae()?;
        let inp = g.concat(&[h_e, h_y])?;
        let out = recognition.apply(g, p, inp)?;
        self.split_gaussian(g, out)
    }

    pub fn cvae_prior(&self, g: &mut Graph<T>, p: &Bound, h_e: Var) -> Result<GaussianVars> {
        let (_, _, prior, _) = self.cvae()?;
        let out = prior.apply(g, p, h_e)?;
        self.split_gaussian(g, out)
    }

    /// Reparameterized samples `tile(μ) + tile(σ) ⊙ ε`, with `ε` a constant
    /// `(k·B)×latent_dim` matrix in proposal-major row order.
    pub fn sample_latent(g: &mut Graph<T>, dist: &GaussianVars, eps: Var, k: usize) -> Result<Var> {
        let half = g.scale(dist.logvar, 0.5);
        let sigma = g.exp(half);
        let mu = g.tile(dist.mu, k)?;
        let sigma = g.tile(sigma, k)?;
        let noise = g.mul(sigma, eps)?;
        g.add(mu, noise)
    }

    /// Initial decoder hidden from `[h^e, z]`; `h_e` must already be tiled to
    /// the rows of `z`.
    pub fn cvae_generate(&self, g: &mut Graph<T>, p: &Bound, h_e: Var, z: Var) -> Result<Var> {
        let (.., generation) = self.cvae()?;
        let inp = g.concat(&[h_e, z])?;
        generation.apply(g, p, inp)
    }

    /// Deterministic-mode replacement for the latent branch.
    pub fn embed_hidden(&self, g: &mut Graph<T>, p: &Bound, h_e: Var) -> Result<Var> {
        match &self.layers.latent {
            LatentLayers::Deterministic { embed } => {
                let h = embed.apply(g, p, h_e)?;
                Ok(g.relu(h))
            }
            LatentLayers::Cvae { .. } => Err(Error::Mode("the stochastic model samples its decoder state".into())),
        }
    }

    /// One decoder step: self-conditioned input `ReLU(ψ h^d)` concatenated
    /// with the goal feature, recurrent update, then the regressor.
    pub fn decoder_step(&self, g: &mut Graph<T>, p: &Bound, h_d: Var, goal: Var) -> Result<(Var, Var)> {
        let x = self.layers.dec_input.apply(g, p, h_d)?;
        let x = g.relu(x);
        let inp = g.concat(&[x, goal])?;
        let h = self.layers.decoder.step(g, p, inp, h_d)?;
        let y = self.layers.regressor.apply(g, p, h)?;
        let y = self.activate(g, y);
        Ok((h, y))
    }
}

/// `B×1` attention logits, one per goal hidden.
fn goal_scores<T: Real>(g: &mut Graph<T>, p: &Bound, layer: &Linear, hiddens: &[Var]) -> Result<Vec<Var>> {
    hiddens
        .iter()
        .map(|&h| {
            let t = g.tanh(h);
            layer.apply(g, p, t)
        })
        .collect()
}

/// Softmax over the given logits and the weighted sum of the hiddens.
fn attend<T: Real>(g: &mut Graph<T>, scores: &[Var], hiddens: &[Var]) -> Result<Attended> {
    if scores.is_empty() || scores.len() != hiddens.len() {
        return dim_err("attend", "scores and hiddens must be non-empty and aligned");
    }
    let logits = g.concat(scores)?;
    let w = g.softmax(logits)?;
    let mut acc: Option<Var> = None;
    for (j, &h) in hiddens.iter().enumerate() {
        let wj = g.slice_cols(w, j, j + 1)?;
        let term = g.mul_col(h, wj)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    Ok(Attended {
        feature: acc.expect("non-empty"),
        weights: Some(w),
    })
}

/// Input index for kernel tap `k` of output `o` in a stride-2, padding-1,
/// width-3 convolution.
fn conv_taps(o: usize, k: usize, len_in: usize) -> Option<usize> {
    (2 * o + k).checked_sub(1).filter(|&i| i < len_in)
}

/// Transposed counterpart: output `o` receives input `i` through tap `k`
/// when `o = 2i − 1 + k`.
fn deconv_taps(o: usize, k: usize, len_in: usize) -> Option<usize> {
    let num = (o + 1).checked_sub(k)?;
    (num % 2 == 0).then_some(num / 2).filter(|&i| i < len_in)
}

/// Width-3 temporal convolution over a sequence of `B×C` steps, realized as
/// a matrix product on the concatenated taps.
#[allow(clippy::too_many_arguments)]
fn temporal_conv<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    layer: &Linear,
    seq: &[Var],
    len_out: usize,
    zero: Var,
    relu: bool,
    taps: fn(usize, usize, usize) -> Option<usize>,
) -> Result<Vec<Var>> {
    (0..len_out)
        .map(|o| {
            let parts: Vec<Var> = (0..3).map(|k| taps(o, k, seq.len()).map_or(zero, |i| seq[i])).collect();
            let x = g.concat(&parts)?;
            let y = layer.apply(g, p, x)?;
            Ok(if relu { g.relu(y) } else { y })
        })
        .collect()
}
