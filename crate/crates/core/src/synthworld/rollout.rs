use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    derive_seed, dist, ground_truth_reward, TaskSpec, ViewRenderer, WorldConfig, EFFECTOR, GRASP,
    OBJECT,
};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyTag {
    Expert,
    Suboptimal,
    Random,
}

impl PolicyTag {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyTag::Expert => "expert",
            PolicyTag::Suboptimal => "suboptimal",
            PolicyTag::Random => "random",
        }
    }

    fn code(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for PolicyTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expert" => Ok(PolicyTag::Expert),
            "suboptimal" => Ok(PolicyTag::Suboptimal),
            "random" => Ok(PolicyTag::Random),
            _ => Err(Error::Config(format!("unknown policy '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub task_id: String,
    pub goal_id: u32,
    pub policy: PolicyTag,
    pub seed: u64,
    /// `[T × latent_dim]`
    pub states: Tensor,
    pub rewards: Vec<f64>,
    /// One `[T × obs_dim]` matrix per view.
    pub obs: Vec<Tensor>,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn n_views(&self) -> usize {
        self.obs.len()
    }

    pub fn observation(&self, t: usize, view: usize) -> Result<&[f64]> {
        let v = self
            .obs
            .get(view)
            .ok_or_else(|| Error::Data(format!("rollout has no view {view}")))?;
        if t >= self.len() {
            return Err(Error::Range(format!("timestep {t} >= {}", self.len())));
        }
        Ok(v.row(t))
    }
}

fn toward(from: &[f64], to: &[f64], speed: f64) -> [f64; 3] {
    let d = dist(from, to);
    if d == 0.0 {
        return [0.0; 3];
    }
    let step = speed.min(d) / d;
    [0, 1, 2].map(|a| (to[a] - from[a]) * step)
}

fn expert_action(task: &TaskSpec, s: &[f64], speed: f64) -> [f64; 3] {
    if task.stages == 2 && s[GRASP] >= 0.5 {
        toward(&s[OBJECT], &task.goal, speed)
    } else {
        toward(&s[EFFECTOR], &s[OBJECT], speed)
    }
}

fn update_grasp(task: &TaskSpec, s: &mut [f64]) {
    if task.stages == 2 && s[GRASP] < 0.5 && dist(&s[EFFECTOR], &s[OBJECT]) <= task.success_radius {
        s[GRASP] = 1.0;
    }
}

/// Moves the effector (and a grasped object) by `a`, staying inside the box.
fn step<R: Rng>(task: &TaskSpec, s: &mut [f64], a: [f64; 3], rng: &mut R) {
    let grasped = s[GRASP] >= 0.5;
    for ax in 0..3 {
        let before = s[EFFECTOR.start + ax];
        let after = (before + a[ax]).clamp(-1.0, 1.0);
        s[EFFECTOR.start + ax] = after;
        if grasped {
            let o = &mut s[OBJECT.start + ax];
            *o = (*o + after - before).clamp(-1.0, 1.0);
        }
    }
    for x in &mut s[GRASP + 1..] {
        *x = (*x + 0.05 * rng.random_range(-1.0..1.0)).clamp(-1.0, 1.0);
    }
    update_grasp(task, s);
}

fn clip_norm(a: [f64; 3], max: f64) -> [f64; 3] {
    let n = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > max {
        a.map(|x| x * max / n)
    } else {
        a
    }
}

/// Simulates `policy` on `task` for `horizon` steps and renders every view.
///
/// The expert moves in straight lines at a constant speed chosen so it
/// finishes within `expert_budget` of the horizon.
pub fn gen_rollout(
    task: &TaskSpec,
    policy: PolicyTag,
    horizon: usize,
    seed: u64,
    renderer: &ViewRenderer,
    cfg: &WorldConfig,
) -> Result<Rollout> {
    if horizon < 4 {
        return Err(Error::Config(format!(
            "rollout horizon must be at least 4, got {horizon}"
        )));
    }
    if renderer.latent_dim != task.latent_dim {
        return Err(Error::shape(
            "gen_rollout",
            &[task.latent_dim],
            &[renderer.latent_dim],
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[policy.code()]));
    let mut render_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[policy.code(), 0x0b5]));

    let mut s = vec![0.0; task.latent_dim];
    for ax in 0..3 {
        s[EFFECTOR.start + ax] = rng.random_range(-1.0..1.0);
        s[OBJECT.start + ax] =
            task.object_home[ax] + rng.random_range(-task.object_jitter..=task.object_jitter);
    }
    for x in &mut s[GRASP + 1..] {
        *x = rng.random_range(-1.0..1.0);
    }
    update_grasp(task, &mut s);

    let plan = match task.stages {
        1 => dist(&s[EFFECTOR], &s[OBJECT]),
        _ => dist(&s[EFFECTOR], &s[OBJECT]) + dist(&s[OBJECT], &task.goal),
    };
    let speed = (plan / (cfg.expert_budget * (horizon - 1) as f64)).min(cfg.max_step);
    let noise = Normal::new(0.0, (cfg.suboptimal_noise * speed).max(1e-12))
        .map_err(|e| Error::Config(e.to_string()))?;

    let mut states = Vec::with_capacity(horizon * task.latent_dim);
    let mut rewards = Vec::with_capacity(horizon);
    let mut obs = vec![Vec::with_capacity(horizon * renderer.obs_dim); renderer.n_views()];
    for t in 0..horizon {
        states.extend_from_slice(&s);
        rewards.push(ground_truth_reward(task, &s)?);
        for (v, o) in obs.iter_mut().enumerate() {
            o.extend(renderer.render_with(&s, v, &mut render_rng)?);
        }
        if t + 1 == horizon {
            break;
        }
        let a = match policy {
            PolicyTag::Expert => expert_action(task, &s, speed),
            PolicyTag::Suboptimal => {
                if rng.random_bool(cfg.stall_prob) {
                    [0.0; 3]
                } else {
                    let e = expert_action(task, &s, speed);
                    clip_norm(e.map(|x| x + noise.sample(&mut rng)), cfg.max_step)
                }
            }
            PolicyTag::Random => [0; 3].map(|_| rng.random_range(-cfg.max_step..cfg.max_step)),
        };
        step(task, &mut s, a, &mut rng);
    }
    Ok(Rollout {
        task_id: task.task_id.clone(),
        goal_id: task.goal_id,
        policy,
        seed,
        states: Tensor::matrix(horizon, task.latent_dim, states)?,
        rewards,
        obs: obs
            .into_iter()
            .map(|o| Tensor::matrix(horizon, renderer.obs_dim, o))
            .collect::<Result<_>>()?,
    })
}
