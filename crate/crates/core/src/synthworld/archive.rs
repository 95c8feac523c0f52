use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    derive_seed, gen_rollout, make_task_suite, PolicyTag, Rollout, TaskSpec, ViewRenderer,
    WorldConfig,
};
use crate::container;
use crate::error::{Error, Result};
use crate::numcore::Tensor;

const MAGIC: &[u8; 8] = b"RWBROLL\0";
pub const ARCHIVE_VERSION: u32 = 1;

/// A task suite, its renderer and every generated rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutArchive {
    pub suite_seed: u64,
    pub world: WorldConfig,
    pub tasks: Vec<TaskSpec>,
    pub renderer: ViewRenderer,
    pub rollouts: Vec<Rollout>,
}

#[derive(Serialize, Deserialize)]
struct RolloutMeta {
    task_id: String,
    goal_id: u32,
    policy: PolicyTag,
    seed: u64,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    suite_seed: u64,
    world: WorldConfig,
    tasks: Vec<TaskSpec>,
    renderer: ViewRenderer,
    rollouts: Vec<RolloutMeta>,
}

impl RolloutArchive {
    /// Expert demos for training tasks; expert, suboptimal and random
    /// rollouts for held-out tasks.
    pub fn generate(suite_seed: u64, world: &WorldConfig) -> Result<Self> {
        let tasks = make_task_suite(suite_seed, world)?;
        let renderer = ViewRenderer::new(suite_seed, world)?;
        let mut rollouts = Vec::new();
        for (ti, task) in tasks.iter().enumerate() {
            let plan: &[(PolicyTag, usize)] = if task.held_out {
                &[
                    (PolicyTag::Expert, world.expert_per_heldout_task),
                    (PolicyTag::Suboptimal, world.suboptimal_per_heldout_task),
                    (PolicyTag::Random, world.random_per_heldout_task),
                ]
            } else {
                &[(PolicyTag::Expert, world.expert_per_train_task)]
            };
            for &(policy, n) in plan {
                for k in 0..n {
                    let seed = derive_seed(suite_seed, &[ti as u64, policy as u64, k as u64]);
                    rollouts.push(gen_rollout(
                        task,
                        policy,
                        world.horizon,
                        seed,
                        &renderer,
                        world,
                    )?);
                }
            }
        }
        Ok(Self {
            suite_seed,
            world: world.clone(),
            tasks,
            renderer,
            rollouts,
        })
    }

    pub fn task(&self, task_id: &str) -> Result<&TaskSpec> {
        self.tasks
            .iter()
            .find(|t| t.task_id == task_id)
            .ok_or_else(|| Error::Lookup(format!("unknown task '{task_id}'")))
    }

    pub fn train_tasks(&self) -> impl Iterator<Item = &TaskSpec> {
        self.tasks.iter().filter(|t| !t.held_out)
    }

    pub fn heldout_tasks(&self) -> impl Iterator<Item = &TaskSpec> {
        self.tasks.iter().filter(|t| t.held_out)
    }

    pub fn rollouts_for<'a>(
        &'a self,
        task_id: &'a str,
        policy: PolicyTag,
    ) -> impl Iterator<Item = &'a Rollout> + 'a {
        self.rollouts
            .iter()
            .filter(move |r| r.task_id == task_id && r.policy == policy)
    }

    /// Expert demonstrations of the training tasks, in archive order.
    pub fn training_demos(&self) -> Vec<&Rollout> {
        let train: Vec<&str> = self.train_tasks().map(|t| t.task_id.as_str()).collect();
        self.rollouts
            .iter()
            .filter(|r| r.policy == PolicyTag::Expert && train.contains(&r.task_id.as_str()))
            .collect()
    }

    /// Goal ids and descriptor rows of every task, in suite order.
    pub fn goal_table(&self) -> Result<(Vec<u32>, Tensor)> {
        let ids = self.tasks.iter().map(|t| t.goal_id).collect();
        let rows: Vec<f64> = self.tasks.iter().flat_map(|t| t.descriptor()).collect();
        let t = Tensor::matrix(self.tasks.len(), super::DESCRIPTOR_DIM, rows)?;
        Ok((ids, t))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut metas = Vec::with_capacity(self.rollouts.len());
        for r in &self.rollouts {
            if r.n_views() != self.renderer.n_views() {
                return Err(Error::Data(format!(
                    "rollout of {} has {} views",
                    r.task_id,
                    r.n_views()
                )));
            }
            payload.extend_from_slice(r.states.data());
            payload.extend_from_slice(&r.rewards);
            for o in &r.obs {
                payload.extend_from_slice(o.data());
            }
            metas.push(RolloutMeta {
                task_id: r.task_id.clone(),
                goal_id: r.goal_id,
                policy: r.policy,
                seed: r.seed,
                len: r.len(),
            });
        }
        let header = Header {
            suite_seed: self.suite_seed,
            world: self.world.clone(),
            tasks: self.tasks.clone(),
            renderer: self.renderer.clone(),
            rollouts: metas,
        };
        container::encode(MAGIC, ARCHIVE_VERSION, &header, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, payload): (Header, Vec<f64>) = container::decode(MAGIC, ARCHIVE_VERSION, bytes)?;
        let (lat, od, nv) = (
            h.renderer.latent_dim,
            h.renderer.obs_dim,
            h.renderer.n_views(),
        );
        let mut at = 0;
        let mut take = |n: usize| -> Result<Vec<f64>> {
            let s = payload
                .get(at..at + n)
                .ok_or_else(|| Error::Format("rollout payload is truncated".into()))?;
            at += n;
            Ok(s.to_vec())
        };
        let mut rollouts = Vec::with_capacity(h.rollouts.len());
        for m in h.rollouts {
            let states = Tensor::matrix(m.len, lat, take(m.len * lat)?)?;
            let rewards = take(m.len)?;
            let obs = (0..nv)
                .map(|_| Tensor::matrix(m.len, od, take(m.len * od)?))
                .collect::<Result<Vec<_>>>()?;
            rollouts.push(Rollout {
                task_id: m.task_id,
                goal_id: m.goal_id,
                policy: m.policy,
                seed: m.seed,
                states,
                rewards,
                obs,
            });
        }
        if at != payload.len() {
            return Err(Error::Format(format!(
                "{} trailing floats in archive",
                payload.len() - at
            )));
        }
        Ok(Self {
            suite_seed: h.suite_seed,
            world: h.world,
            tasks: h.tasks,
            renderer: h.renderer,
            rollouts,
        })
    }
}

pub fn save_archive(archive: &RolloutArchive, path: &Path) -> Result<()> {
    container::write_file(path, &archive.to_bytes()?)
}

pub fn load_archive(path: &Path) -> Result<RolloutArchive> {
    RolloutArchive::from_bytes(&std::fs::read(path)?)
}
