use std::f64::consts::{FRAC_PI_2, TAU};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::AgentTrack;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    ConstantVelocity,
    /// Steers toward a goal resampled every `every` steps.
    PiecewiseGoal { every: usize },
    Circular,
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SynthKind::ConstantVelocity => f.write_str("constant-velocity"),
            SynthKind::PiecewiseGoal { every } => write!(f, "piecewise-goal:{}", every),
            SynthKind::Circular => f.write_str("circular"),
        }
    }
}

impl FromStr for SynthKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "constant-velocity" => Ok(SynthKind::ConstantVelocity),
            "circular" => Ok(SynthKind::Circular),
            "piecewise-goal" => Ok(SynthKind::PiecewiseGoal { every: 6 }),
            other => other
                .strip_prefix("piecewise-goal:")
                .and_then(|n| n.parse().ok())
                .filter(|&n: &usize| n > 0)
                .map(|every| SynthKind::PiecewiseGoal { every })
                .ok_or_else(|| Error::Config(format!("unknown synthetic kind '{}'", other))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthSpec {
    pub kind: SynthKind,
    /// Number of agents; each gets one track.
    pub n: usize,
    /// States per track.
    pub len: usize,
    pub seed: u64,
    /// Standard deviation of the Gaussian position noise.
    pub noise: f64,
}

/// `start + t·v` for `t = 0..steps`.
pub fn constant_velocity(start: [f64; 2], v: [f64; 2], steps: usize) -> Vec<[f64; 2]> {
    (0..steps)
        .map(|t| [start[0] + t as f64 * v[0], start[1] + t as f64 * v[1]])
        .collect()
}

/// Points on a circle at constant angular velocity.
pub fn circular(center: [f64; 2], radius: f64, theta0: f64, omega: f64, steps: usize) -> Vec<[f64; 2]> {
    (0..steps)
        .map(|t| {
            let a = theta0 + omega * t as f64;
            [center[0] + radius * a.cos(), center[1] + radius * a.sin()]
        })
        .collect()
}

/// Goal-seeking walk. At steps `0, G, 2G, …` a new goal is placed at
/// distance `[0.5, 0.95]·speed·G` in a direction within ±90° of the current
/// heading; the agent moves straight toward it at `speed` per step and
/// waits once there. Returns positions and the goals in order.
pub fn piecewise_goal<R: Rng>(
    start: [f64; 2],
    heading: f64,
    speed: f64,
    every: usize,
    steps: usize,
    rng: &mut R,
) -> (Vec<[f64; 2]>, Vec<[f64; 2]>) {
    let mut pos = vec![start];
    let mut goals = Vec::new();
    let mut heading = heading;
    let mut goal = start;
    for t in 1..steps {
        let p = pos[t - 1];
        if (t - 1) % every == 0 {
            heading += rng.random_range(-FRAC_PI_2..=FRAC_PI_2);
            let dist = rng.random_range(0.5..=0.95) * speed * every as f64;
            goal = [p[0] + dist * heading.cos(), p[1] + dist * heading.sin()];
            goals.push(goal);
        }
        let (dx, dy) = (goal[0] - p[0], goal[1] - p[1]);
        let remaining = dx.hypot(dy);
        pos.push(if remaining <= speed {
            goal
        } else {
            [p[0] + speed * dx / remaining, p[1] + speed * dy / remaining]
        });
    }
    (pos, goals)
}

/// `n` synthetic agents in scene `synth`, one state per frame at 1 fps.
/// Agent `i` draws its parameters from its own seeded stream, so a prefix
/// of agents does not depend on `n`.
pub fn synth_generate(spec: &SynthSpec) -> Vec<AgentTrack> {
    (0..spec.n)
        .map(|i| {
            let mut r = rng::stream(spec.seed, &[i as u64]);
            let start = [r.random_range(-5.0..5.0), r.random_range(-5.0..5.0)];
            let heading = r.random_range(0.0..TAU);
            let speed = r.random_range(0.1..0.5);
            let clean = match spec.kind {
                SynthKind::ConstantVelocity => {
                    constant_velocity(start, [speed * heading.cos(), speed * heading.sin()], spec.len)
                }
                SynthKind::PiecewiseGoal { every } => piecewise_goal(start, heading, speed, every, spec.len, &mut r).0,
                SynthKind::Circular => {
                    let radius = r.random_range(1.0..3.0);
                    let omega = r.random_range(0.05..0.2) * if r.random_bool(0.5) { 1.0 } else { -1.0 };
                    circular(start, radius, heading, omega, spec.len)
                }
            };
            let mut noise_rng = rng::stream(spec.seed, &[i as u64, 1]);
            let normal = Normal::new(0.0, spec.noise.max(0.0)).expect("finite deviation");
            let states = clean
                .iter()
                .map(|p| {
                    if spec.noise > 0.0 {
                        vec![p[0] + normal.sample(&mut noise_rng), p[1] + normal.sample(&mut noise_rng)]
                    } else {
                        p.to_vec()
                    }
                })
                .collect();
            AgentTrack {
                scene: "synth".into(),
                agent: i as u64,
                start_frame: 0,
                stride: 1,
                fps: 1.0,
                states,
                aux: Vec::new(),
            }
        })
        .collect()
}
