//! Batched forward pass over one window of observations.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{attend, goal_scores, GaussianVars, Mode, ModelConfig, Sgnet};
use crate::data::Window;
use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::loss::{graph_step_loss, LatentVars};
use crate::nn::Bound;
use crate::rng;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Latent samples come from the recognition network (needs the future).
    Train,
    /// Latent samples come from the prior.
    Infer,
}

/// Encoder steps at which the decoder is rolled out.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeSteps {
    All,
    Last,
}

/// Route of goal hiddens into one of the two aggregators.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GoalPath {
    Encoder,
    Decoder,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub phase: Phase,
    pub decode: DecodeSteps,
    /// Seed of the latent noise; each sample draws from its own stream keyed
    /// by its id, so results do not depend on batch composition.
    pub seed: u64,
    /// Proposal count override for stochastic models.
    pub k: Option<usize>,
    /// Multiplier on the latent noise; 0 collapses every sample onto the mean.
    pub noise_scale: f64,
    /// Adds seeded offsets of the given size to the goal hiddens entering one
    /// aggregator. Used to probe which paths goals can influence.
    pub perturb_goals: Option<(GoalPath, f64)>,
}

impl ForwardOptions {
    pub fn train(seed: u64) -> Self {
        Self {
            phase: Phase::Train,
            decode: DecodeSteps::All,
            seed,
            k: None,
            noise_scale: 1.0,
            perturb_goals: None,
        }
    }

    pub fn infer(seed: u64) -> Self {
        Self {
            phase: Phase::Infer,
            decode: DecodeSteps::Last,
            ..Self::train(seed)
        }
    }
}

/// Column-stacked inputs for `B` windows.
#[derive(Clone, Debug)]
pub struct Batch<T: Real> {
    /// `ℓ_e` tensors of `B×input_dim`.
    pub obs: Vec<Tensor<T>>,
    /// `ℓ_e` tensors of `B×aux_dim`, empty when no auxiliary columns.
    pub aux: Vec<Tensor<T>>,
    /// Window positions `0..ℓ_e+ℓ_d`, each `B×d`; empty at pure inference.
    pub positions: Vec<Tensor<T>>,
    /// Per-sample noise stream ids.
    pub ids: Vec<u64>,
}

impl<T: Real> Batch<T> {
    pub fn size(&self) -> usize {
        self.ids.len()
    }

    /// Stacks per-sample rows: `obs[b][t]`, `aux[b][t]` and `positions[b][t]`.
    pub fn from_samples(
        obs: &[&[Vec<f64>]],
        aux: &[&[Vec<f64>]],
        positions: &[&[Vec<f64>]],
        ids: Vec<u64>,
    ) -> Result<Self> {
        fn stack<T: Real>(samples: &[&[Vec<f64>]]) -> Result<Vec<Tensor<T>>> {
            let Some(first) = samples.first() else {
                return Ok(Vec::new());
            };
            (0..first.len())
                .map(|t| {
                    let width = first[t].len();
                    let mut data = Vec::with_capacity(samples.len() * width);
                    for s in samples {
                        let row = s
                            .get(t)
                            .filter(|r| r.len() == width)
                            .ok_or_else(|| Error::Dimension {
                                op: "batch",
                                detail: "samples differ in length or width".into(),
                            })?;
                        data.extend(row.iter().map(|&v| T::of_f64(v)));
                    }
                    Tensor::new(vec![samples.len(), width], data)
                })
                .collect()
        }
        Ok(Self {
            obs: stack(obs)?,
            aux: stack(aux)?,
            positions: stack(positions)?,
            ids,
        })
    }

    /// Stacks windows, using each window's id as its noise stream id.
    /// `with_future` keeps the positions needed for training objectives.
    pub fn from_windows(windows: &[&Window], with_future: bool) -> Result<Self> {
        let obs: Vec<&[Vec<f64>]> = windows.iter().map(|w| w.obs.as_slice()).collect();
        let aux: Vec<&[Vec<f64>]> = windows
            .iter()
            .filter(|w| !w.aux.is_empty())
            .map(|w| w.aux.as_slice())
            .collect();
        if !aux.is_empty() && aux.len() != windows.len() {
            return dim_err("batch", "some windows lack auxiliary features");
        }
        let positions: Vec<&[Vec<f64>]> = if with_future {
            windows.iter().map(|w| w.positions.as_slice()).collect()
        } else {
            Vec::new()
        };
        Self::from_samples(&obs, &aux, &positions, windows.iter().map(|w| w.id).collect())
    }

    fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let b = self.size();
        if b == 0 {
            return Err(Error::Contract("empty batch".into()));
        }
        let check = |what: &str, ts: &[Tensor<T>], len: usize, width: usize| -> Result<()> {
            if ts.len() != len {
                return dim_err("forward", format!("{} has {} steps, expected {}", what, ts.len(), len));
            }
            for t in ts {
                if t.shape() != [b, width] {
                    return dim_err("forward", format!("{} step shaped {:?}, expected [{}, {}]", what, t.shape(), b, width));
                }
            }
            Ok(())
        };
        check("observations", &self.obs, cfg.obs_len, cfg.input_dim)?;
        let aux_len = if cfg.aux_dim > 0 { cfg.obs_len } else { 0 };
        check("auxiliary features", &self.aux, aux_len, cfg.aux_dim)?;
        if !self.positions.is_empty() {
            check("positions", &self.positions, cfg.obs_len + cfg.pred_len, cfg.output_dim)?;
        }
        Ok(())
    }
}

/// Standard normal noise for encoder step `t`, shaped `(k·B)×dim` with row
/// `j·B + b` drawn from the stream of sample `ids[b]`.
pub fn latent_noise(seed: u64, ids: &[u64], t: usize, k: usize, dim: usize) -> Tensor<f64> {
    let b = ids.len();
    let mut data = vec![0.0; k * b * dim];
    for (s, &id) in ids.iter().enumerate() {
        let mut r = rng::stream(seed, &[id, t as u64]);
        for j in 0..k {
            for c in 0..dim {
                data[(j * b + s) * dim + c] = r.sample(StandardNormal);
            }
        }
    }
    Tensor::new(vec![k * b, dim], data).expect("sized")
}

/// Graph variables produced at one decoded encoder step.
#[derive(Clone, Debug)]
pub struct StepOutput {
    /// Encoder step, 0-based.
    pub t: usize,
    pub goal_hiddens: Vec<Var>,
    /// `ℓ_d` tensors of `B×d`.
    pub goals: Vec<Var>,
    /// `ℓ_d` tensors of `(K·B)×d`, proposal-major rows.
    pub traj: Vec<Var>,
    /// Decoder attention at each step `i`, shaped `B×(ℓ_d−i+1)`; empty in
    /// ablation E.
    pub dec_weights: Vec<Var>,
    /// Ground-truth positions `t+1..=t+ℓ_d`, when the batch carries them.
    pub targets: Vec<Var>,
    pub posterior: Option<GaussianVars>,
    pub prior: Option<GaussianVars>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub batch: usize,
    pub k: usize,
    pub enc_hiddens: Vec<Var>,
    /// Encoder attention computed at each encoder step (`B×ℓ_d`).
    pub enc_weights: Vec<Option<Var>>,
    pub steps: Vec<StepOutput>,
}

/// Scalar objective terms. Each is summed over samples, averaged over the
/// decoded steps and divided by the normalizing batch size.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveVars {
    pub total: Var,
    pub bom: Var,
    pub goal: Var,
    pub kld: Option<Var>,
    /// Per-sample objective averaged over decoded steps, `B×1`.
    pub per_sample: Var,
}

/// Plain-value predictions for one sample at one encoder step.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    /// `K × ℓ_d × d`.
    pub trajectories: Vec<Vec<Vec<f64>>>,
    /// `ℓ_d × d`.
    pub goal_positions: Vec<Vec<f64>>,
    /// `ℓ_d` weights; absent in ablation D.
    pub enc_attention: Option<Vec<f64>>,
    /// Row `i−1` holds `ℓ_d−i+1` weights; empty in ablation E.
    pub dec_attention: Vec<Vec<f64>>,
}

fn row_of<T: Real>(g: &Graph<T>, v: Var, r: usize) -> Vec<f64> {
    g.value(v).row(r).iter().map(|x| x.as_f64()).collect()
}

impl ForwardOutput {
    pub fn objective<T: Real>(&self, g: &mut Graph<T>, denom: usize) -> Result<ObjectiveVars> {
        if self.steps.is_empty() || denom == 0 {
            return Err(Error::Contract("objective needs decoded steps and a positive batch size".into()));
        }
        let mut sums: Option<(Var, Var, Var, Option<Var>, Var)> = None;
        for s in &self.steps {
            if s.targets.is_empty() {
                return Err(Error::Contract("objective needs ground-truth positions".into()));
            }
            let latent = s.posterior.zip(s.prior).map(|(q, p)| LatentVars {
                q_mu: q.mu,
                q_logvar: q.logvar,
                p_mu: p.mu,
                p_logvar: p.logvar,
            });
            let l = graph_step_loss(g, &s.traj, &s.goals, &s.targets, self.k, latent.as_ref())?;
            sums = Some(match sums {
                None => (l.total, l.bom, l.goal, l.kld, l.per_sample),
                Some((t, b, go, k, ps)) => (
                    g.add(t, l.total)?,
                    g.add(b, l.bom)?,
                    g.add(go, l.goal)?,
                    match (k, l.kld) {
                        (Some(a), Some(c)) => Some(g.add(a, c)?),
                        _ => None,
                    },
                    g.add(ps, l.per_sample)?,
                ),
            });
        }
        let (t, b, go, k, ps) = sums.expect("non-empty");
        let n = self.steps.len() as f64;
        let c = 1.0 / (n * denom as f64);
        Ok(ObjectiveVars {
            total: g.scale(t, c),
            bom: g.scale(b, c),
            goal: g.scale(go, c),
            kld: k.map(|k| g.scale(k, c)),
            per_sample: g.scale(ps, 1.0 / n),
        })
    }

    /// Per-sample predictions at decoded step `index` (into `steps`).
    pub fn predictions<T: Real>(&self, g: &Graph<T>, index: usize) -> Result<Vec<PredictionSet>> {
        let s = self
            .steps
            .get(index)
            .ok_or_else(|| Error::Contract(format!("no decoded step {}", index)))?;
        let enc = self.enc_weights[s.t];
        Ok((0..self.batch)
            .map(|b| PredictionSet {
                trajectories: (0..self.k)
                    .map(|k| s.traj.iter().map(|&y| row_of(g, y, k * self.batch + b)).collect())
                    .collect(),
                goal_positions: s.goals.iter().map(|&y| row_of(g, y, b)).collect(),
                enc_attention: enc.map(|w| row_of(g, w, b)),
                dec_attention: s.dec_weights.iter().map(|&w| row_of(g, w, b)).collect(),
            })
            .collect())
    }

    /// Predictions at the final encoder step.
    pub fn final_predictions<T: Real>(&self, g: &Graph<T>) -> Result<Vec<PredictionSet>> {
        self.predictions(g, self.steps.len().saturating_sub(1))
    }
}

impl<T: Real> Sgnet<T> {
    fn perturbed(&self, g: &mut Graph<T>, hiddens: &[Var], t: usize, path: GoalPath, opts: &ForwardOptions) -> Result<Vec<Var>> {
        let Some((which, size)) = opts.perturb_goals.filter(|(w, _)| *w == path) else {
            return Ok(hiddens.to_vec());
        };
        let tag = match which {
            GoalPath::Encoder => 1,
            GoalPath::Decoder => 2,
        };
        hiddens
            .iter()
            .enumerate()
            .map(|(j, &h)| {
                let shape = g.shape(h).to_vec();
                let mut r = rng::stream(opts.seed, &[tag, t as u64, j as u64]);
                let data = (0..shape.iter().product::<usize>())
                    .map(|_| T::of_f64(size * r.random_range(-1.0..1.0)))
                    .collect();
                let c = g.constant(Tensor::new(shape, data)?);
                g.add(h, c)
            })
            .collect()
    }

    /// Runs the encoder over the window, decoding at the requested steps.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, batch: &Batch<T>, opts: &ForwardOptions) -> Result<ForwardOutput> {
        let cfg = &self.cfg;
        batch.validate(cfg)?;
        let b = batch.size();
        let k = match cfg.mode {
            Mode::Deterministic => 1,
            Mode::Stochastic => opts.k.unwrap_or(cfg.k),
        };
        if k == 0 {
            return Err(Error::Contract("at least one proposal is required".into()));
        }
        let needs_future = opts.phase == super::Phase::Train && cfg.mode == Mode::Stochastic;
        if needs_future && batch.positions.is_empty() {
            return Err(Error::Mode("training needs the future positions of every window".into()));
        }
        let positions: Vec<Var> = batch.positions.iter().map(|t| g.constant(t.clone())).collect();

        let mut h = g.zeros(b, cfg.enc_hidden);
        let mut goal_feat = g.zeros(b, cfg.goal_hidden);
        let mut out = ForwardOutput {
            batch: b,
            k,
            enc_hiddens: Vec::with_capacity(cfg.obs_len),
            enc_weights: Vec::with_capacity(cfg.obs_len),
            steps: Vec::new(),
        };
        for t in 0..cfg.obs_len {
            let x = g.constant(batch.obs[t].clone());
            let aux = batch.aux.get(t).map(|a| g.constant(a.clone()));
            let xe = self.embed_input(g, p, x, aux)?;
            h = self.encoder_step(g, p, xe, goal_feat, h)?;
            out.enc_hiddens.push(h);
            let hiddens = self.sge_forward(g, p, h)?;

            let enc_in = self.perturbed(g, &hiddens, t, GoalPath::Encoder, opts)?;
            let att = self.aggregate_goals_encoder(g, p, &enc_in)?;
            goal_feat = att.feature;
            out.enc_weights.push(att.weights);

            if opts.decode == DecodeSteps::All || t + 1 == cfg.obs_len {
                let step = self.decode(g, p, t, h, hiddens, &positions, k, batch, opts)?;
                out.steps.push(step);
            }
        }
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn decode(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        t: usize,
        h_e: Var,
        hiddens: Vec<Var>,
        positions: &[Var],
        k: usize,
        batch: &Batch<T>,
        opts: &ForwardOptions,
    ) -> Result<StepOutput> {
        let cfg = &self.cfg;
        let goals = self.regress_goal_positions(g, p, &hiddens)?;
        let targets = if positions.is_empty() {
            Vec::new()
        } else {
            positions[t + 1..=t + cfg.pred_len].to_vec()
        };
        let (mut h_d, posterior, prior) = match cfg.mode {
            Mode::Deterministic => (self.embed_hidden(g, p, h_e)?, None, None),
            Mode::Stochastic => {
                let prior = self.cvae_prior(g, p, h_e)?;
                let posterior = if opts.phase == super::Phase::Train {
                    let h_y = self.encode_target(g, p, &targets)?;
                    Some(self.cvae_recognize(g, p, h_e, h_y, opts.phase)?)
                } else {
                    None
                };
                let noise = latent_noise(opts.seed, &batch.ids, t, k, cfg.latent_dim);
                let noise = Tensor::new(
                    noise.shape().to_vec(),
                    noise.data().iter().map(|&v| T::of_f64(v * opts.noise_scale)).collect(),
                )?;
                let eps = g.constant(noise);
                let z = Self::sample_latent(g, posterior.as_ref().unwrap_or(&prior), eps, k)?;
                let h_tiled = g.tile(h_e, k)?;
                (self.cvae_generate(g, p, h_tiled, z)?, posterior, Some(prior))
            }
        };

        let dec_in = self.perturbed(g, &hiddens, t, GoalPath::Decoder, opts)?;
        let scores = match self.layers.dec_attention {
            Some(layer) => Some(goal_scores(g, p, &layer, &dec_in)?),
            None => None,
        };
        let mut traj = Vec::with_capacity(cfg.pred_len);
        let mut dec_weights = Vec::new();
        for i in 1..=cfg.pred_len {
            let feature = match &scores {
                Some(s) => {
                    let att = attend(g, &s[i - 1..], &dec_in[i - 1..])?;
                    dec_weights.push(att.weights.expect("enabled path"));
                    att.feature
                }
                None => g.zeros(batch.size(), cfg.goal_hidden),
            };
            let feature = g.tile(feature, k)?;
            let (h, y) = self.decoder_step(g, p, h_d, feature)?;
            h_d = h;
            traj.push(y);
        }
        Ok(StepOutput {
            t,
            goal_hiddens: hiddens,
            goals,
            traj,
            dec_weights,
            targets,
            posterior,
            prior,
        })
    }

    /// Predictions of one window at every encoder step, sampling latents
    /// from the prior.
    pub fn forward_window(&self, window: &Window, seed: u64) -> Result<Vec<PredictionSet>> {
        let batch = Batch::from_windows(&[window], false)?;
        let opts = ForwardOptions {
            decode: DecodeSteps::All,
            ..ForwardOptions::infer(seed)
        };
        Ok(self.predict(&batch, &opts)?.into_iter().map(|mut s| s.remove(0)).collect())
    }

    /// Convenience wrapper: builds a graph, runs the forward pass and
    /// extracts every decoded step's predictions (`[step][sample]`).
    pub fn predict(&self, batch: &Batch<T>, opts: &ForwardOptions) -> Result<Vec<Vec<PredictionSet>>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let out = self.forward(&mut g, &p, batch, opts)?;
        (0..out.steps.len()).map(|i| out.predictions(&g, i)).collect()
    }
}
