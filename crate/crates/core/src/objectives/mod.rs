//! Contrastive reward-model objectives.
//!
//! Every loss takes an [`EmbeddingBatch`] of tape variables and returns a
//! scalar variable. Notation follows the tuple roles used by the data
//! pipeline: `z_i` an earlier frame, `z_j` a later frame, `z_j1` the frame
//! right after `z_j`, `z_k` a far frame, and `v` the goal embedding. Softmax
//! denominators are evaluated with `logsumexp`.
//!
//! | objective            | loss                                  |
//! |----------------------|---------------------------------------|
//! | `triplet`            | [`loss_triplet`]                      |
//! | `tcn_text`           | [`loss_tcn_text`]                     |
//! | `r3m`                | [`loss_tcn`] + [`loss_tcn_text`]      |
//! | `vip_text`           | [`loss_vip_text`]                     |
//! | `vip_text_plus_vip`  | [`loss_vip_text`] + [`loss_vip`]      |
//! | `liv`                | `vip + vip_text + infonce`            |

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::SimilarityFn;
use crate::error::{Error, Result};
use crate::numcore::{concat_cols, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveTag {
    Triplet,
    TcnText,
    R3m,
    VipText,
    VipTextPlusVip,
    Liv,
}

impl ObjectiveTag {
    pub const ALL: [ObjectiveTag; 6] = [
        ObjectiveTag::Triplet,
        ObjectiveTag::TcnText,
        ObjectiveTag::R3m,
        ObjectiveTag::VipText,
        ObjectiveTag::VipTextPlusVip,
        ObjectiveTag::Liv,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ObjectiveTag::Triplet => "triplet",
            ObjectiveTag::TcnText => "tcn_text",
            ObjectiveTag::R3m => "r3m",
            ObjectiveTag::VipText => "vip_text",
            ObjectiveTag::VipTextPlusVip => "vip_text_plus_vip",
            ObjectiveTag::Liv => "liv",
        }
    }

    /// Column label used in report tables.
    pub fn label(self) -> &'static str {
        match self {
            ObjectiveTag::Triplet => "Triplet",
            ObjectiveTag::TcnText => "TCN-text",
            ObjectiveTag::R3m => "R3M",
            ObjectiveTag::VipText => "VIP-text",
            ObjectiveTag::VipTextPlusVip => "VIP-text+VIP",
            ObjectiveTag::Liv => "LIV",
        }
    }

    /// Which sampling pattern the tuples for this objective follow.
    pub fn family(self) -> TupleFamily {
        match self {
            ObjectiveTag::Triplet | ObjectiveTag::TcnText => TupleFamily::Pair,
            ObjectiveTag::R3m => TupleFamily::Tcn,
            ObjectiveTag::VipText | ObjectiveTag::VipTextPlusVip | ObjectiveTag::Liv => {
                TupleFamily::Vip
            }
        }
    }

    /// Image roles the loss reads, in slot order.
    pub fn image_roles(self) -> &'static [Role] {
        match self {
            ObjectiveTag::Triplet | ObjectiveTag::TcnText => &[Role::I, Role::J],
            ObjectiveTag::R3m => &[Role::I, Role::J, Role::K],
            ObjectiveTag::VipText => &[Role::I, Role::J, Role::J1],
            ObjectiveTag::VipTextPlusVip | ObjectiveTag::Liv => {
                &[Role::I, Role::J, Role::J1, Role::K]
            }
        }
    }

    pub fn uses_in_batch_negatives(self) -> bool {
        matches!(self, ObjectiveTag::TcnText | ObjectiveTag::R3m)
    }
}

impl fmt::Display for ObjectiveTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ObjectiveTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ObjectiveTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown objective tag '{s}'")))
    }
}

/// Index pattern of a sample tuple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TupleFamily {
    /// `i < j`
    Pair,
    /// `i < j < k`
    Tcn,
    /// `i < j`, `j + 1 <= k`
    Vip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    I,
    J,
    J1,
    K,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    /// Triplet margin.
    pub margin: f64,
    /// VIP discount.
    pub gamma: f64,
    /// In-batch negatives per anchor for the TCN losses.
    pub negatives: usize,
    pub similarity: SimilarityFn,
    /// Batch reduction of the triplet hinge terms.
    pub triplet_reduction: Reduction,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            margin: 0.3,
            gamma: 0.98,
            negatives: 3,
            similarity: SimilarityFn::Cosine,
            triplet_reduction: Reduction::Sum,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self, batch_size: usize) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::Config(format!(
                "margin must be positive, got {}",
                self.margin
            )));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!(
                "gamma must lie in (0, 1), got {}",
                self.gamma
            )));
        }
        if self.negatives == 0 || self.negatives >= batch_size {
            return Err(Error::Config(format!(
                "negatives must be in [1, batch size), got {} with batch size {}",
                self.negatives, batch_size
            )));
        }
        Ok(())
    }
}

/// Embeddings of one batch, keyed by tuple role. Each present role is `[B×d]`.
#[derive(Clone, Default)]
pub struct EmbeddingBatch<'t> {
    pub z_i: Option<Var<'t>>,
    pub z_j: Option<Var<'t>>,
    pub z_j1: Option<Var<'t>>,
    pub z_k: Option<Var<'t>>,
    pub v: Option<Var<'t>>,
    /// Per anchor, the other batch elements used as in-batch negatives.
    pub negatives: Option<Vec<Vec<usize>>>,
}

impl<'t> EmbeddingBatch<'t> {
    pub fn batch_size(&self) -> Result<usize> {
        let mut size = None;
        for (name, role) in self.roles() {
            if let Some(v) = role {
                let shape = v.shape();
                if shape.len() != 2 {
                    return Err(Error::Batch(format!(
                        "role {name} must be a matrix, got {shape:?}"
                    )));
                }
                match size {
                    None => size = Some((shape[0], shape[1])),
                    Some(s) if s != (shape[0], shape[1]) => {
                        return Err(Error::Batch(format!(
                            "role {name} has shape {shape:?}, expected [{}, {}]",
                            s.0, s.1
                        )))
                    }
                    _ => {}
                }
            }
        }
        size.map(|s| s.0)
            .ok_or_else(|| Error::Batch("empty batch".into()))
    }

    fn roles(&self) -> [(&'static str, Option<Var<'t>>); 5] {
        [
            ("z_i", self.z_i),
            ("z_j", self.z_j),
            ("z_j1", self.z_j1),
            ("z_k", self.z_k),
            ("v", self.v),
        ]
    }

    fn require(&self, role: Option<Var<'t>>, name: &str) -> Result<Var<'t>> {
        role.ok_or_else(|| Error::Batch(format!("missing role {name}")))
    }

    fn negatives_for(&self, b: usize, count: usize) -> Result<&Vec<Vec<usize>>> {
        let negs = self
            .negatives
            .as_ref()
            .ok_or_else(|| Error::Batch("in-batch negatives not provided".into()))?;
        if negs.len() != b || negs.iter().any(|n| n.len() != count) {
            return Err(Error::Batch(format!(
                "negatives table must be {b} rows of {count} indices"
            )));
        }
        for (a, row) in negs.iter().enumerate() {
            if row.iter().any(|&n| n == a || n >= b) {
                return Err(Error::Batch(format!("bad negative index for anchor {a}")));
            }
        }
        Ok(negs)
    }
}

/// Draws `count` distinct negatives for each of `b` anchors, never the anchor itself.
pub fn sample_negatives<R: Rng>(b: usize, count: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if count == 0 || count >= b {
        return Err(Error::Config(format!(
            "need 1 <= negatives < batch size, got {count} with batch size {b}"
        )));
    }
    Ok((0..b)
        .map(|a| {
            index::sample(rng, b - 1, count)
                .into_iter()
                .map(|n| if n >= a { n + 1 } else { n })
                .collect()
        })
        .collect())
}

fn tcn_config_check(cfg: &ObjectiveConfig, b: usize) -> Result<()> {
    if b <= cfg.negatives {
        return Err(Error::Config(format!(
            "batch size {b} must exceed negatives count {}",
            cfg.negatives
        )));
    }
    cfg.validate(b)
}

/// Similarities `S(x[a], y[o])` for every `(a, o)` in `pairs`, as `[B×m]`.
fn pair_similarities<'t>(
    sim: SimilarityFn,
    x: Var<'t>,
    y: Var<'t>,
    pairs: &[(usize, usize)],
    b: usize,
) -> Result<Var<'t>> {
    let (xs, ys): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
    let s = sim.rows(x.gather_rows(&xs)?, y.gather_rows(&ys)?)?;
    s.reshape(vec![b, pairs.len() / b])
}

/// `-(1/B) Σ log softmax_0([pos, other, negs...])`, the shared TCN form.
fn softmax_nll<'t>(pos: Var<'t>, parts: &[Var<'t>]) -> Result<Var<'t>> {
    let mut all = vec![pos];
    all.extend_from_slice(parts);
    let logits = concat_cols(&all)?;
    // shifting by the positive first keeps its own term exactly zero
    let shift = concat_cols(&vec![pos; logits.shape()[1]])?;
    logits.sub(shift)?.logsumexp(1)?.mean()
}

/// Image-only time-contrastive loss.
///
/// For each anchor `z_i`, the later frame `z_j` competes against the far
/// frame `z_k` and `negatives` other anchors `z_i^{≠b}` from the batch.
pub fn loss_tcn<'t>(batch: &EmbeddingBatch<'t>, cfg: &ObjectiveConfig) -> Result<Var<'t>> {
    let zi = batch.require(batch.z_i, "z_i")?;
    let zj = batch.require(batch.z_j, "z_j")?;
    let zk = batch.require(batch.z_k, "z_k")?;
    let b = batch.batch_size()?;
    tcn_config_check(cfg, b)?;
    let negs = batch.negatives_for(b, cfg.negatives)?;
    let sim = cfg.similarity;

    let pos = sim.rows(zi, zj)?;
    let far = sim.rows(zi, zk)?;
    let pairs: Vec<(usize, usize)> = negs
        .iter()
        .enumerate()
        .flat_map(|(a, row)| row.iter().map(move |&n| (a, n)))
        .collect();
    let neg = pair_similarities(sim, zi, zi, &pairs, b)?;
    softmax_nll(pos, &[far, neg])
}

/// Language variant of [`loss_tcn`]: the goal embedding `v` is the anchor,
/// the later frame `z_j` the positive, the earlier frame `z_i` and other
/// elements' later frames `z_j^{≠b}` the competitors.
pub fn loss_tcn_text<'t>(batch: &EmbeddingBatch<'t>, cfg: &ObjectiveConfig) -> Result<Var<'t>> {
    let zi = batch.require(batch.z_i, "z_i")?;
    let zj = batch.require(batch.z_j, "z_j")?;
    let v = batch.require(batch.v, "v")?;
    let b = batch.batch_size()?;
    tcn_config_check(cfg, b)?;
    let negs = batch.negatives_for(b, cfg.negatives)?;
    let sim = cfg.similarity;

    let pos = sim.rows(zj, v)?;
    let earlier = sim.rows(zi, v)?;
    // rows index the anchor's goal, columns the other element's later frame
    let pairs: Vec<(usize, usize)> = negs
        .iter()
        .enumerate()
        .flat_map(|(a, row)| row.iter().map(move |&n| (n, a)))
        .collect();
    let neg = pair_similarities(sim, zj, v, &pairs, b)?;
    softmax_nll(pos, &[earlier, neg])
}

fn vip_core<'t>(
    zi: Var<'t>,
    zj: Var<'t>,
    zj1: Var<'t>,
    goal: Var<'t>,
    b: usize,
    cfg: &ObjectiveConfig,
) -> Result<Var<'t>> {
    if !(cfg.gamma > 0.0 && cfg.gamma < 1.0) {
        return Err(Error::Config(format!(
            "gamma must lie in (0, 1), got {}",
            cfg.gamma
        )));
    }
    let sim = cfg.similarity;
    let g = cfg.gamma;
    let first = sim.rows(zi, goal)?.mean()?.scale(-(1.0 - g))?;
    let inner = sim
        .rows(zj, goal)?
        .add_scalar(1.0)?
        .sub(sim.rows(zj1, goal)?.scale(g)?)?;
    let second = inner.logsumexp(0)?.add_scalar(-(b as f64).ln())?;
    first.add(second)
}

/// Goal-conditioned value loss with an image goal `z_k`.
///
/// `(1-γ)/B Σ -S(z_i, z_k) + log (1/B) Σ exp(S(z_j, z_k) + 1 - γ S(z_j1, z_k))`
pub fn loss_vip<'t>(batch: &EmbeddingBatch<'t>, cfg: &ObjectiveConfig) -> Result<Var<'t>> {
    let zi = batch.require(batch.z_i, "z_i")?;
    let zj = batch.require(batch.z_j, "z_j")?;
    let zj1 = batch.require(batch.z_j1, "z_j1")?;
    let zk = batch.require(batch.z_k, "z_k")?;
    let b = batch.batch_size()?;
    vip_core(zi, zj, zj1, zk, b, cfg)
}

/// [`loss_vip`] with the goal embedding `v` in place of `z_k`.
pub fn loss_vip_text<'t>(batch: &EmbeddingBatch<'t>, cfg: &ObjectiveConfig) -> Result<Var<'t>> {
    let zi = batch.require(batch.z_i, "z_i")?;
    let zj = batch.require(batch.z_j, "z_j")?;
    let zj1 = batch.require(batch.z_j1, "z_j1")?;
    let v = batch.require(batch.v, "v")?;
    let b = batch.batch_size()?;
    vip_core(zi, zj, zj1, v, b, cfg)
}

/// Image-goal InfoNCE: `(1/B) Σ_b -log(e^{S(z_k^b, v^b)} / ((1/B) Σ_{j≠b} e^{S(z_k^j, v^b)}))`.
///
/// The positive is left out of the denominator.
pub fn loss_infonce<'t>(batch: &EmbeddingBatch<'t>, cfg: &ObjectiveConfig) -> Result<Var<'t>> {
    let zk = batch.require(batch.z_k, "z_k")?;
    let v = batch.require(batch.v, "v")?;
    let b = batch.batch_size()?;
    if b < 2 {
        return Err(Error::Config("InfoNCE needs a batch of at least 2".into()));
    }
    let sim = cfg.similarity;
    let pos = sim.rows(zk, v)?;
    let pairs: Vec<(usize, usize)> = (0..b)
        .flat_map(|a| (0..b).filter(move |&j| j != a).map(move |j| (j, a)))
        .collect();
    let others = pair_similarities(sim, zk, v, &pairs, b)?;
    others
        .logsumexp(1)?
        .sub(pos)?
        .mean()?
        .add_scalar(-(b as f64).ln())
}

pub fn loss_r3m<'t>(batch: &EmbeddingBatch<'t>, cfg: &ObjectiveConfig) -> Result<Var<'t>> {
    loss_tcn(batch, cfg)?.add(loss_tcn_text(batch, cfg)?)
}

pub fn loss_liv<'t>(batch: &EmbeddingBatch<'t>, cfg: &ObjectiveConfig) -> Result<Var<'t>> {
    loss_vip(batch, cfg)?
        .add(loss_vip_text(batch, cfg)?)?
        .add(loss_infonce(batch, cfg)?)
}

/// Hinge ranking loss with the goal as anchor, the later frame `z_j` as
/// positive and the earlier frame `z_i` as negative:
/// `Σ_b max(0, S(v, z_i) - S(v, z_j) + α)`.
pub fn loss_triplet<'t>(batch: &EmbeddingBatch<'t>, cfg: &ObjectiveConfig) -> Result<Var<'t>> {
    let zi = batch.require(batch.z_i, "z_i")?;
    let zj = batch.require(batch.z_j, "z_j")?;
    let v = batch.require(batch.v, "v")?;
    batch.batch_size()?;
    if !(cfg.margin > 0.0) {
        return Err(Error::Config(format!(
            "margin must be positive, got {}",
            cfg.margin
        )));
    }
    let sim = cfg.similarity;
    let hinge = sim
        .rows(v, zi)?
        .sub(sim.rows(v, zj)?)?
        .add_scalar(cfg.margin)?
        .hinge()?;
    match cfg.triplet_reduction {
        Reduction::Sum => hinge.sum(),
        Reduction::Mean => hinge.mean(),
    }
}

/// The training loss of an objective configuration.
pub fn loss<'t>(
    tag: ObjectiveTag,
    batch: &EmbeddingBatch<'t>,
    cfg: &ObjectiveConfig,
) -> Result<Var<'t>> {
    match tag {
        ObjectiveTag::Triplet => loss_triplet(batch, cfg),
        ObjectiveTag::TcnText => loss_tcn_text(batch, cfg),
        ObjectiveTag::R3m => loss_r3m(batch, cfg),
        ObjectiveTag::VipText => loss_vip_text(batch, cfg),
        ObjectiveTag::VipTextPlusVip => loss_vip_text(batch, cfg)?.add(loss_vip(batch, cfg)?),
        ObjectiveTag::Liv => loss_liv(batch, cfg),
    }
}
