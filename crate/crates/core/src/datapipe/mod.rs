//! Finetuning tuples drawn from expert demonstrations.
//!
//! Timestep indices are fixed when a dataset is built; only the view each
//! role is read from changes between epochs.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{ObjectiveTag, TupleFamily};
use crate::synthworld::{derive_seed, PolicyTag, Rollout, RolloutArchive};

/// Default sample cap.
pub const DEFAULT_CAP: usize = 50_000;
pub const DEFAULT_VAL_SPLIT: f64 = 0.1;

/// Timestep indices of one tuple. `j1` and `k` are present only for the
/// families that use them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Steps {
    pub i: usize,
    pub j: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub j1: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
}

impl Steps {
    /// Whether the ordering constraints of `family` hold strictly.
    pub fn is_valid(&self, family: TupleFamily, len: usize) -> bool {
        let Steps { i, j, j1, k } = *self;
        let base = i < j && j < len;
        match family {
            TupleFamily::Pair => base && j1.is_none() && k.is_none(),
            TupleFamily::Tcn => base && j1.is_none() && matches!(k, Some(k) if j < k && k < len),
            TupleFamily::Vip => {
                base && j1 == Some(j + 1) && matches!(k, Some(k) if j < k && k < len)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleTuple {
    /// Position in [`FinetuneDataset::trajectories`].
    pub traj: usize,
    pub goal_id: u32,
    pub steps: Steps,
    /// View of each image role, in [`ObjectiveTag::image_roles`] order.
    pub views: Vec<usize>,
}

/// A demonstration the dataset draws from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajRef {
    /// Index into the archive's rollout list.
    pub rollout: usize,
    pub task_id: String,
    pub goal_id: u32,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneDataset {
    pub tag: ObjectiveTag,
    pub cap: usize,
    pub seed: u64,
    pub suite_seed: u64,
    pub n_views: usize,
    pub trajectories: Vec<TrajRef>,
    pub tuples: Vec<SampleTuple>,
}

impl FinetuneDataset {
    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    /// Draws every role's view independently and uniformly.
    pub fn reassign_views(&mut self, epoch_seed: u64) {
        let all: Vec<usize> = (0..self.len()).collect();
        self.reassign_subset(&all, epoch_seed);
    }

    /// [`Self::reassign_views`] restricted to the tuples at `idx`.
    pub fn reassign_subset(&mut self, idx: &[usize], seed: u64) {
        let v = self.n_views;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x71e3]));
        for &t in idx {
            for slot in &mut self.tuples[t].views {
                *slot = if v > 1 { rng.random_range(0..v) } else { 0 };
            }
        }
    }

    /// Every role reads view 0.
    pub fn canonical_views(&mut self) {
        for t in &mut self.tuples {
            t.views.iter_mut().for_each(|v| *v = 0);
        }
    }

    /// Tuples per trajectory.
    pub fn allocation(&self) -> Vec<usize> {
        let mut counts = vec![0; self.trajectories.len()];
        for t in &self.tuples {
            counts[t.traj] += 1;
        }
        counts
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            tuples: idx.iter().map(|&i| self.tuples[i].clone()).collect(),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Self {
        Self {
            tag: self.tag,
            cap: self.cap,
            seed: self.seed,
            suite_seed: self.suite_seed,
            n_views: self.n_views,
            trajectories: self.trajectories.clone(),
            tuples: Vec::new(),
        }
    }
}

/// Free-function form of [`FinetuneDataset::reassign_views`].
pub fn reassign_views(ds: &FinetuneDataset, epoch_seed: u64) -> FinetuneDataset {
    let mut out = ds.clone();
    out.reassign_views(epoch_seed);
    out
}

/// Shortest trajectory the family's index pattern fits in.
pub fn min_len(family: TupleFamily) -> usize {
    match family {
        TupleFamily::Pair => 2,
        TupleFamily::Tcn | TupleFamily::Vip => 3,
    }
}

/// `i` uniform, then each later index uniform in what remains.
pub fn sample_steps<R: Rng>(family: TupleFamily, len: usize, rng: &mut R) -> Result<Steps> {
    if len < min_len(family) {
        return Err(Error::Data(format!(
            "trajectory of length {len} is too short"
        )));
    }
    Ok(match family {
        TupleFamily::Pair => {
            let i = rng.random_range(0..len - 1);
            let j = rng.random_range(i + 1..len);
            Steps {
                i,
                j,
                j1: None,
                k: None,
            }
        }
        TupleFamily::Tcn => {
            let i = rng.random_range(0..len - 2);
            let j = rng.random_range(i + 1..len - 1);
            let k = rng.random_range(j + 1..len);
            Steps {
                i,
                j,
                j1: None,
                k: Some(k),
            }
        }
        TupleFamily::Vip => {
            let i = rng.random_range(0..len - 2);
            let j = rng.random_range(i + 1..len - 1);
            let k = rng.random_range(j + 1..len);
            Steps {
                i,
                j,
                j1: Some(j + 1),
                k: Some(k),
            }
        }
    })
}

/// `cap` split as evenly as possible over `n` slots, larger shares first.
pub fn even_allocation(cap: usize, n: usize) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    (0..n).map(|t| cap / n + usize::from(t < cap % n)).collect()
}

/// Samples up to `cap` tuples spread evenly over the training demonstrations.
pub fn build_dataset(
    archive: &RolloutArchive,
    tag: ObjectiveTag,
    cap: usize,
    seed: u64,
) -> Result<FinetuneDataset> {
    let train: Vec<&str> = archive.train_tasks().map(|t| t.task_id.as_str()).collect();
    let demos: Vec<(usize, &Rollout)> = archive
        .rollouts
        .iter()
        .enumerate()
        .filter(|(_, r)| r.policy == PolicyTag::Expert && train.contains(&r.task_id.as_str()))
        .collect();
    build_from(
        &demos,
        archive.suite_seed,
        archive.renderer.n_views(),
        tag,
        cap,
        seed,
    )
}

/// [`build_dataset`] over an explicit list of `(archive index, rollout)`.
pub fn build_from(
    demos: &[(usize, &Rollout)],
    suite_seed: u64,
    n_views: usize,
    tag: ObjectiveTag,
    cap: usize,
    seed: u64,
) -> Result<FinetuneDataset> {
    if n_views == 0 {
        return Err(Error::Config("archive has no views".into()));
    }
    let family = tag.family();
    let mut trajectories = Vec::new();
    for &(idx, r) in demos {
        if r.len() < min_len(family) {
            log::warn!(
                "skipping rollout {idx} of {}: length {} is too short for {tag}",
                r.task_id,
                r.len()
            );
            continue;
        }
        trajectories.push(TrajRef {
            rollout: idx,
            task_id: r.task_id.clone(),
            goal_id: r.goal_id,
            len: r.len(),
        });
    }
    if trajectories.is_empty() {
        return Err(Error::Data(
            "no trajectory is long enough to sample from".into(),
        ));
    }
    let slots = tag.image_roles().len();
    let alloc = even_allocation(cap, trajectories.len());
    let mut tuples = Vec::with_capacity(cap);
    for (t, (traj, &n)) in trajectories.iter().zip(&alloc).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[t as u64]));
        for _ in 0..n {
            tuples.push(SampleTuple {
                traj: t,
                goal_id: traj.goal_id,
                steps: sample_steps(family, traj.len, &mut rng)?,
                views: vec![0; slots],
            });
        }
    }
    let mut ds = FinetuneDataset {
        tag,
        cap,
        seed,
        suite_seed,
        n_views,
        trajectories,
        tuples,
    };
    ds.reassign_views(seed);
    Ok(ds)
}

/// Stratified split: each trajectory gives up its share of validation
/// tuples, with leftover slots going to the largest remainders.
pub fn split(
    ds: &FinetuneDataset,
    r_val: f64,
    seed: u64,
) -> Result<(FinetuneDataset, FinetuneDataset)> {
    let (train, val) = split_indices(ds, r_val, seed)?;
    Ok((ds.subset(&train), ds.subset(&val)))
}

/// Sorted `(train, val)` tuple indices of [`split`].
pub fn split_indices(
    ds: &FinetuneDataset,
    r_val: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(r_val > 0.0 && r_val < 1.0) {
        return Err(Error::Config(format!(
            "validation split must lie in (0, 1), got {r_val}"
        )));
    }
    let n = ds.len();
    let n_val = (r_val * n as f64).round() as usize;
    if n_val == 0 || n_val == n {
        return Err(Error::Config(format!(
            "split of {n} tuples at {r_val} leaves an empty side"
        )));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); ds.trajectories.len()];
    for (i, t) in ds.tuples.iter().enumerate() {
        members[t.traj].push(i);
    }
    let exact: Vec<f64> = members.iter().map(|m| r_val * m.len() as f64).collect();
    let mut quota: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..members.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = n_val.saturating_sub(quota.iter().sum());
    for &t in order.iter().cycle().take(order.len() * 2) {
        if left == 0 {
            break;
        }
        if quota[t] < members[t].len() {
            quota[t] += 1;
            left -= 1;
        }
    }

    let mut val = Vec::with_capacity(n_val);
    let mut train = Vec::with_capacity(n - n_val);
    for (t, m) in members.iter().enumerate() {
        let mut shuffled = m.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5b1, t as u64]));
        shuffled.shuffle(&mut rng);
        val.extend_from_slice(&shuffled[..quota[t]]);
        train.extend_from_slice(&shuffled[quota[t]..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

/// Reassigns views for the epoch, then returns shuffled full batches of tuple indices.
pub fn batch_iter(
    ds: &mut FinetuneDataset,
    batch: usize,
    epoch_seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let order = batch_order(ds, batch, epoch_seed)?;
    ds.reassign_views(epoch_seed);
    Ok(order)
}

/// Shuffled full batches without touching views.
pub fn batch_order(ds: &FinetuneDataset, batch: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch == 0 || batch > ds.len() {
        return Err(Error::Config(format!(
            "batch size {batch} must be in [1, {}]",
            ds.len()
        )));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(epoch_seed, &[0xba7c]));
    idx.shuffle(&mut rng);
    Ok(idx.chunks_exact(batch).map(<[usize]>::to_vec).collect())
}

/// On-disk description of a dataset and its split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset: FinetuneDataset,
    pub r_val: f64,
    pub split_seed: u64,
    /// Indices into `dataset.tuples` held out for validation.
    pub val_indices: Vec<usize>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec(self)?;
        crate::container::write_file(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}
