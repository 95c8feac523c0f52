//! A small parametric stand-in for a tabletop manipulation benchmark.
//!
//! The latent state is `[effector(3), object(3), grasp, distractors...]` in
//! the box `[-1, 1]^3`. One-stage tasks ("reach") only need the effector on
//! the object. Two-stage tasks ("fetch") need the effector to reach and grasp
//! the object, then carry it to a goal point. Observations are noisy affine
//! projections of the state seen from several views.

mod archive;
mod render;
mod rollout;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use archive::{load_archive, save_archive, RolloutArchive, ARCHIVE_VERSION};
pub use render::{render_view, ViewRenderer};
pub use rollout::{gen_rollout, PolicyTag, Rollout};

pub(crate) const EFFECTOR: std::ops::Range<usize> = 0..3;
pub(crate) const OBJECT: std::ops::Range<usize> = 3..6;
pub(crate) const GRASP: usize = 6;
/// Smallest latent state holding effector, object and grasp flag.
pub const MIN_LATENT_DIM: usize = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub n_train_tasks: usize,
    pub n_heldout_tasks: usize,
    pub latent_dim: usize,
    pub obs_dim: usize,
    pub n_views: usize,
    pub horizon: usize,
    pub obs_noise: f64,
    /// Chance, per suite, that one view loses the object coordinates.
    pub occlusion_prob: f64,
    pub success_radius: f64,
    /// Largest per-step displacement of the effector.
    pub max_step: f64,
    /// Fraction of the horizon the expert needs to finish.
    pub expert_budget: f64,
    /// Action noise of the suboptimal policy, relative to the expert speed.
    pub suboptimal_noise: f64,
    pub stall_prob: f64,
    pub expert_per_train_task: usize,
    pub expert_per_heldout_task: usize,
    pub suboptimal_per_heldout_task: usize,
    pub random_per_heldout_task: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_train_tasks: 12,
            n_heldout_tasks: 3,
            latent_dim: 8,
            obs_dim: 32,
            n_views: 3,
            horizon: 64,
            obs_noise: 0.05,
            occlusion_prob: 0.3,
            success_radius: 0.05,
            max_step: 0.2,
            expert_budget: 0.8,
            suboptimal_noise: 1.5,
            stall_prob: 0.25,
            expert_per_train_task: 3,
            expert_per_heldout_task: 50,
            suboptimal_per_heldout_task: 10,
            random_per_heldout_task: 10,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.latent_dim < MIN_LATENT_DIM {
            return fail(format!("latent_dim must be at least {MIN_LATENT_DIM}"));
        }
        if self.obs_dim == 0 || self.n_views == 0 {
            return fail("obs_dim and n_views must be positive".into());
        }
        if self.horizon < 4 {
            return fail(format!("horizon must be at least 4, got {}", self.horizon));
        }
        if !(self.obs_noise >= 0.0) || !(0.0..=1.0).contains(&self.occlusion_prob) {
            return fail("obs_noise must be >= 0 and occlusion_prob in [0, 1]".into());
        }
        if !(self.success_radius > 0.0 && self.max_step > 0.0) {
            return fail("success_radius and max_step must be positive".into());
        }
        if !(self.expert_budget > 0.0 && self.expert_budget <= 1.0) {
            return fail("expert_budget must lie in (0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.stall_prob) || !(self.suboptimal_noise >= 0.0) {
            return fail("stall_prob must lie in [0, 1] and suboptimal_noise be >= 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub goal_id: u32,
    pub stages: u8,
    pub latent_dim: usize,
    /// Where the object rests at the start of an episode.
    pub object_home: [f64; 3],
    /// Where a two-stage task wants the object. Equals `object_home` for one-stage tasks.
    pub goal: [f64; 3],
    /// Per-axis jitter of the object's starting position.
    pub object_jitter: f64,
    pub success_radius: f64,
    /// Distance at which stage progress reaches zero.
    pub shaping_scale: f64,
    pub held_out: bool,
}

/// Distance at which progress vanishes: the diagonal of the state box.
pub const SHAPING_SCALE: f64 = 2.0 * 1.732_050_807_568_877_2;

fn progress(d: f64, radius: f64, scale: f64) -> f64 {
    (1.0 - (d - radius).max(0.0) / (scale - radius)).clamp(0.0, 1.0)
}

pub(crate) fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

impl TaskSpec {
    /// Goal descriptor used to seed the text tower: stage one-hot, object home, goal.
    pub fn descriptor(&self) -> Vec<f64> {
        let mut d = vec![f64::from(self.stages == 1), f64::from(self.stages == 2)];
        d.extend_from_slice(&self.object_home);
        d.extend_from_slice(&self.goal);
        d
    }

    pub fn is_success(&self, state: &[f64]) -> Result<bool> {
        Ok(ground_truth_reward(self, state)? >= 1.0)
    }
}

pub const DESCRIPTOR_DIM: usize = 8;

/// Shaped reward in `[0, 1]`; 1 exactly on success.
///
/// One-stage: progress of the effector towards the object. Two-stage: half of
/// that before the grasp, `0.5 + 0.5 · progress` of the object towards the goal after.
pub fn ground_truth_reward(task: &TaskSpec, state: &[f64]) -> Result<f64> {
    if state.len() != task.latent_dim {
        return Err(Error::shape(
            "ground_truth_reward",
            &[task.latent_dim],
            &[state.len()],
        ));
    }
    let e = &state[EFFECTOR];
    let o = &state[OBJECT];
    let reach = progress(dist(e, o), task.success_radius, task.shaping_scale);
    Ok(match task.stages {
        1 => reach,
        _ if state[GRASP] < 0.5 => 0.5 * reach.min(1.0),
        _ => 0.5 + 0.5 * progress(dist(o, &task.goal), task.success_radius, task.shaping_scale),
    })
}

/// Deterministic seed for a sub-stream, so rollouts do not depend on generation order.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut h = base ^ 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        h = splitmix(h ^ p.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn point<R: Rng>(rng: &mut R, bound: f64) -> [f64; 3] {
    [0; 3].map(|_| rng.random_range(-bound..bound))
}

/// Minimum distance between the object homes (and goals) of two tasks.
const MIN_SEPARATION: f64 = 0.25;

/// Builds train tasks followed by held-out tasks.
///
/// Held-out stages go 1, 2, 2, 1, 2, 2, ... so any split of two or more
/// holds both kinds; train tasks alternate 1, 2.
pub fn make_task_suite(seed: u64, cfg: &WorldConfig) -> Result<Vec<TaskSpec>> {
    cfg.validate()?;
    let (n_train, n_held) = (cfg.n_train_tasks, cfg.n_heldout_tasks);
    if n_held == 0 {
        return Err(Error::Config("need at least one held-out task".into()));
    }
    if n_train == 0 {
        return Err(Error::Config("need at least one training task".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5017e]));
    let mut tasks: Vec<TaskSpec> = Vec::with_capacity(n_train + n_held);
    for idx in 0..n_train + n_held {
        let held_out = idx >= n_train;
        let stages = if held_out {
            if (idx - n_train) % 3 == 0 {
                1
            } else {
                2
            }
        } else if idx % 2 == 0 {
            1
        } else {
            2
        };
        let mut attempts = 0;
        let (home, goal) = loop {
            attempts += 1;
            if attempts > 10_000 {
                return Err(Error::Config(
                    "could not place tasks far enough apart".into(),
                ));
            }
            let home = point(&mut rng, 0.7);
            let goal = if stages == 1 {
                home
            } else {
                // carry the object 0.4..0.8 away, staying inside the box
                let dir = point(&mut rng, 1.0);
                let n = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
                let len = rng.random_range(0.4..0.8);
                [0, 1, 2].map(|a| (home[a] + dir[a] / n * len).clamp(-0.9, 0.9))
            };
            let clear = tasks.iter().all(|t| {
                dist(&t.object_home, &home) >= MIN_SEPARATION
                    && dist(&t.goal, &goal) >= MIN_SEPARATION
            });
            if clear && (stages == 1 || dist(&home, &goal) > 2.0 * cfg.success_radius) {
                break (home, goal);
            }
        };
        let kind = if stages == 1 { "reach" } else { "fetch" };
        tasks.push(TaskSpec {
            task_id: format!("{kind}-{idx:02}"),
            goal_id: idx as u32,
            stages,
            latent_dim: cfg.latent_dim,
            object_home: home,
            goal,
            object_jitter: 0.05,
            success_radius: cfg.success_radius,
            shaping_scale: SHAPING_SCALE,
            held_out,
        });
    }
    Ok(tasks)
}
