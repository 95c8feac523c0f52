//! Finetuning loop: batches of tuples are encoded, scored by an objective
//! and optimized with Adam under a cosine learning-rate schedule.

mod optim;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optim::{clip_grad_norm, cosine_lr, Adam, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

use crate::datapipe::{self, FinetuneDataset, SampleTuple};
use crate::encoders::{EncoderConfig, RewardModel};
use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor};
use crate::objectives::{
    loss, sample_negatives, EmbeddingBatch, ObjectiveConfig, ObjectiveTag, Role,
};
use crate::synthworld::{derive_seed, RolloutArchive};

pub const DEFAULT_LR: f64 = 1e-4;
pub const DEFAULT_MIN_LR: f64 = 1e-6;
/// Learning rate LIV needs to train stably.
pub const LIV_LR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ViewSchedule {
    /// New views once per epoch.
    #[default]
    PerEpoch,
    /// New views for every batch.
    PerBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    /// Learning rate used for LIV instead of `lr`.
    pub liv_lr: f64,
    pub cap: usize,
    pub val_split: f64,
    pub views: ViewSchedule,
    /// Global gradient-norm clip, off by default.
    pub grad_clip: Option<f64>,
    pub objective: ObjectiveConfig,
    pub encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 32,
            lr: DEFAULT_LR,
            min_lr: DEFAULT_MIN_LR,
            liv_lr: LIV_LR,
            cap: datapipe::DEFAULT_CAP,
            val_split: datapipe::DEFAULT_VAL_SPLIT,
            views: ViewSchedule::PerEpoch,
            grad_clip: None,
            objective: ObjectiveConfig::default(),
            encoder: EncoderConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Learning rate actually used for `tag`.
    pub fn resolved_lr(&self, tag: ObjectiveTag) -> f64 {
        if tag == ObjectiveTag::Liv {
            self.liv_lr
        } else {
            self.lr
        }
    }

    pub fn validate(&self, tag: ObjectiveTag) -> Result<()> {
        let lr = self.resolved_lr(tag);
        if !(lr > self.min_lr && self.min_lr > 0.0) {
            return Err(Error::Config(format!(
                "need lr > min_lr > 0, got lr {lr} and min_lr {}",
                self.min_lr
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!(
                    "grad_clip must be positive, got {c}"
                )));
            }
        }
        if tag.uses_in_batch_negatives() {
            self.objective.validate(self.batch_size)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate of the epoch's last update.
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after the epoch with the lowest validation loss.
    pub model: RewardModel,
    pub best_epoch: usize,
    pub metrics: Vec<EpochMetrics>,
    /// Learning rate of every update, in order.
    pub lr_trace: Vec<f64>,
    /// Loss of the very first batch, before any update.
    pub initial_loss: f64,
}

/// Builds a model whose text table holds the goal descriptors of `archive`.
pub fn init_model(cfg: &EncoderConfig, archive: &RolloutArchive, seed: u64) -> Result<RewardModel> {
    let (ids, features) = archive.goal_table()?;
    RewardModel::new(cfg, archive.renderer.obs_dim, ids, features, seed)
}

/// Observations of every image role of the tuples at `idx`, stacked role-major.
fn gather_inputs(
    archive: &RolloutArchive,
    ds: &FinetuneDataset,
    idx: &[usize],
) -> Result<(Tensor, Vec<u32>)> {
    let roles = ds.tag.image_roles();
    let obs_dim = archive.renderer.obs_dim;
    let mut data = Vec::with_capacity(roles.len() * idx.len() * obs_dim);
    for (slot, role) in roles.iter().enumerate() {
        for &t in idx {
            let tup: &SampleTuple = &ds.tuples[t];
            let traj = &ds.trajectories[tup.traj];
            let rollout = archive.rollouts.get(traj.rollout).ok_or_else(|| {
                Error::Data(format!("dataset names missing rollout {}", traj.rollout))
            })?;
            if rollout.goal_id != tup.goal_id {
                return Err(Error::Data(format!(
                    "rollout {} does not match the dataset; was it built from another archive?",
                    traj.rollout
                )));
            }
            let step = match role {
                Role::I => tup.steps.i,
                Role::J => tup.steps.j,
                Role::J1 => tup
                    .steps
                    .j1
                    .ok_or_else(|| Error::Data("tuple lacks j+1".into()))?,
                Role::K => tup
                    .steps
                    .k
                    .ok_or_else(|| Error::Data("tuple lacks k".into()))?,
            };
            data.extend_from_slice(rollout.observation(step, tup.views[slot])?);
        }
    }
    let goals = idx.iter().map(|&t| ds.tuples[t].goal_id).collect();
    Ok((
        Tensor::matrix(roles.len() * idx.len(), obs_dim, data)?,
        goals,
    ))
}

/// Loss of one batch, with gradients for every trainable parameter when `grad` is set.
fn batch_loss(
    model: &RewardModel,
    archive: &RolloutArchive,
    ds: &FinetuneDataset,
    idx: &[usize],
    cfg: &ObjectiveConfig,
    negatives_seed: u64,
    grad: bool,
) -> Result<(f64, Vec<Option<Tensor>>)> {
    let tag = ds.tag;
    let b = idx.len();
    let (obs, goals) = gather_inputs(archive, ds, idx)?;
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let z = bound.encode_images(tape.constant(obs))?;
    let mut batch = EmbeddingBatch {
        v: Some(bound.encode_goals(&goals)?),
        ..Default::default()
    };
    for (slot, role) in tag.image_roles().iter().enumerate() {
        let rows: Vec<usize> = (slot * b..(slot + 1) * b).collect();
        let zr = Some(z.gather_rows(&rows)?);
        match role {
            Role::I => batch.z_i = zr,
            Role::J => batch.z_j = zr,
            Role::J1 => batch.z_j1 = zr,
            Role::K => batch.z_k = zr,
        }
    }
    if tag.uses_in_batch_negatives() {
        let mut rng = ChaCha8Rng::seed_from_u64(negatives_seed);
        batch.negatives = Some(sample_negatives(b, cfg.negatives, &mut rng)?);
    }
    let l = loss(tag, &batch, cfg)?;
    let value = l.item()?;
    if !grad {
        return Ok((value, Vec::new()));
    }
    let grads = l.backward()?;
    Ok((value, bound.vars().iter().map(|v| grads.get(*v)).collect()))
}

fn with_context(e: Error, what: &str, idx: &[usize]) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("{m} ({what}, tuples {idx:?})")),
        other => other,
    }
}

/// Mean loss over fixed, canonical-view validation batches.
pub fn validation_loss(
    model: &RewardModel,
    archive: &RolloutArchive,
    val: &FinetuneDataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<f64> {
    let b = cfg.batch_size.min(val.len());
    if b == 0 {
        return Err(Error::Data("empty validation set".into()));
    }
    let mut total = 0.0;
    let mut n = 0;
    for (k, chunk) in (0..val.len())
        .collect::<Vec<_>>()
        .chunks_exact(b)
        .enumerate()
    {
        let (l, _) = batch_loss(
            model,
            archive,
            val,
            chunk,
            &cfg.objective,
            derive_seed(seed, &[0xa1, k as u64]),
            false,
        )
        .map_err(|e| with_context(e, "validation", chunk))?;
        total += l;
        n += 1;
    }
    Ok(total / n as f64)
}

/// Runs the full schedule on `train` and keeps the parameters with the best
/// validation loss.
pub fn train(
    cfg: &TrainConfig,
    model: RewardModel,
    archive: &RolloutArchive,
    train: &FinetuneDataset,
    val: &FinetuneDataset,
    seed: u64,
) -> Result<TrainOutcome> {
    let tag = train.tag;
    if val.tag != tag {
        return Err(Error::Config(
            "train and validation datasets use different objectives".into(),
        ));
    }
    cfg.validate(tag)?;
    let lr = cfg.resolved_lr(tag);
    if tag == ObjectiveTag::Liv && lr > LIV_LR {
        log::warn!("LIV at lr {lr} tends to diverge; {LIV_LR} is recommended");
    }
    let steps_per_epoch = train.len() / cfg.batch_size;
    if steps_per_epoch == 0 {
        return Err(Error::Config(format!(
            "batch size {} exceeds the {} training tuples",
            cfg.batch_size,
            train.len()
        )));
    }
    let total_updates = steps_per_epoch * cfg.epochs;
    let last = total_updates - 1;

    let mut val = val.clone();
    val.canonical_views();
    let mut train = train.clone();
    let mut model = model;
    let mut opt = Adam::new(&model.params());
    let mut best: Option<(f64, usize, RewardModel)> = None;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut lr_trace = Vec::with_capacity(total_updates);
    let mut initial_loss = f64::NAN;

    for epoch in 0..cfg.epochs {
        let epoch_seed = derive_seed(seed, &[0xe0, epoch as u64]);
        let batches = datapipe::batch_iter(&mut train, cfg.batch_size, epoch_seed)?;
        let mut sum = 0.0;
        for (s, idx) in batches.iter().enumerate() {
            if cfg.views == ViewSchedule::PerBatch {
                train.reassign_subset(idx, derive_seed(epoch_seed, &[s as u64]));
            }
            let step = epoch * steps_per_epoch + s;
            let (l, mut grads) = batch_loss(
                &model,
                archive,
                &train,
                idx,
                &cfg.objective,
                derive_seed(epoch_seed, &[0x9e, s as u64]),
                true,
            )
            .map_err(|e| with_context(e, &format!("epoch {} step {s}", epoch + 1), idx))?;
            if step == 0 {
                initial_loss = l;
            }
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&mut grads, c);
            }
            let rate = cosine_lr(step, last, lr, cfg.min_lr);
            opt.step(&mut model.params_mut(), &grads, rate)?;
            lr_trace.push(rate);
            sum += l;
        }
        let train_loss = sum / steps_per_epoch as f64;
        let val_loss = validation_loss(&model, archive, &val, cfg, seed)?;
        log::info!(
            "{tag} epoch {}/{}: train {train_loss:.5} val {val_loss:.5}",
            epoch + 1,
            cfg.epochs
        );
        metrics.push(EpochMetrics {
            epoch: epoch + 1,
            train_loss,
            val_loss,
            lr: *lr_trace.last().expect("at least one update per epoch"),
        });
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch + 1, model.clone()));
        }
    }
    let (_, best_epoch, best_model) = best.expect("epochs >= 1");
    Ok(TrainOutcome {
        model: best_model,
        best_epoch,
        metrics,
        lr_trace,
        initial_loss,
    })
}

/// `epoch,train_loss,val_loss,lr` rows with a header line.
pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,lr\n");
    for m in metrics {
        s.push_str(&format!(
            "{},{:e},{:e},{:e}\n",
            m.epoch, m.train_loss, m.val_loss, m.lr
        ));
    }
    s
}
