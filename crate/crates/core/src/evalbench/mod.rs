//! Held-out benchmarks: pairwise consistency with the ground-truth reward
//! and value-order correlation (VOC) along expert trajectories.

mod report;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use report::{accuracy_markdown, curves_csv, results_csv, voc_markdown};

use crate::encoders::RewardModel;
use crate::error::{Error, Result};
use crate::synthworld::{derive_seed, PolicyTag, RolloutArchive, TaskSpec};

pub const DEFAULT_PAIRS: usize = 10_000;
pub const DEFAULT_VOC_TRAJECTORIES: usize = 50;
/// Rewards closer than this count as tied and are never paired.
pub const REWARD_TIE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViewMode {
    View(usize),
    Multi,
}

impl ViewMode {
    pub fn label(self) -> String {
        match self {
            ViewMode::View(v) => format!("view{}", v + 1),
            ViewMode::Multi => "multi".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VocMethod {
    /// Rank correlation with average ranks for ties.
    #[default]
    Spearman,
    /// Tau-b over all timestep pairs.
    Kendall,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeRef {
    /// Index into the archive's rollout list.
    pub rollout: usize,
    pub t: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub a: TimeRef,
    pub b: TimeRef,
    /// True when `a` has the higher ground-truth reward.
    pub a_higher: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseBenchmark {
    pub task_id: String,
    pub goal_id: u32,
    pub pairs: Vec<LabeledPair>,
}

/// Samples `n_pairs` timestep pairs with distinct rewards from the task's
/// random and suboptimal rollouts.
pub fn build_pairwise(
    task: &TaskSpec,
    archive: &RolloutArchive,
    n_pairs: usize,
    seed: u64,
) -> Result<PairwiseBenchmark> {
    let mut refs = Vec::new();
    for (ri, r) in archive.rollouts.iter().enumerate() {
        if r.task_id == task.task_id
            && matches!(r.policy, PolicyTag::Random | PolicyTag::Suboptimal)
        {
            refs.extend((0..r.len()).map(|t| (TimeRef { rollout: ri, t }, r.rewards[t])));
        }
    }
    if refs.is_empty() {
        return Err(Error::Data(format!(
            "no random or suboptimal rollouts for {}",
            task.task_id
        )));
    }
    let (lo, hi) = refs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
            (lo.min(r.1), hi.max(r.1))
        });
    if hi - lo < REWARD_TIE {
        return Err(Error::Data(format!(
            "rollouts of {} never change reward; no pair can be labeled",
            task.task_id
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[u64::from(task.goal_id), 0x9a1]));
    let mut pairs = Vec::with_capacity(n_pairs);
    let budget = 1000 * n_pairs.max(1);
    let mut draws = 0;
    while pairs.len() < n_pairs {
        draws += 1;
        if draws > budget {
            return Err(Error::Data(format!(
                "too few distinct rewards in {} to draw {n_pairs} pairs",
                task.task_id
            )));
        }
        let (a, ra) = refs[rng.random_range(0..refs.len())];
        let (b, rb) = refs[rng.random_range(0..refs.len())];
        if (ra - rb).abs() < REWARD_TIE {
            continue;
        }
        pairs.push(LabeledPair {
            a,
            b,
            a_higher: ra > rb,
        });
    }
    Ok(PairwiseBenchmark {
        task_id: task.task_id.clone(),
        goal_id: task.goal_id,
        pairs,
    })
}

/// Predicted reward of every timestep of a set of rollouts, per view.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    n_views: usize,
    /// `scores[rollout][view][t]`, `None` for rollouts not scored.
    scores: Vec<Option<Vec<Vec<f64>>>>,
}

impl ScoreTable {
    /// Goal similarity of the task's goal for each listed rollout.
    pub fn from_model(
        model: &RewardModel,
        archive: &RolloutArchive,
        rollouts: &[usize],
        goal: u32,
    ) -> Result<Self> {
        let n_views = archive.renderer.n_views();
        Self::build(archive, rollouts, n_views, |ri, v| {
            model.score(&archive.rollouts[ri].obs[v], goal)
        })
    }

    /// Table filled by `f(rollout, view, t)`.
    pub fn from_fn<F>(
        archive: &RolloutArchive,
        rollouts: &[usize],
        n_views: usize,
        f: F,
    ) -> Result<Self>
    where
        F: Fn(usize, usize, usize) -> f64,
    {
        Self::build(archive, rollouts, n_views, |ri, v| {
            Ok((0..archive.rollouts[ri].len())
                .map(|t| f(ri, v, t))
                .collect())
        })
    }

    fn build<F>(archive: &RolloutArchive, rollouts: &[usize], n_views: usize, f: F) -> Result<Self>
    where
        F: Fn(usize, usize) -> Result<Vec<f64>>,
    {
        let mut scores = vec![None; archive.rollouts.len()];
        for &ri in rollouts {
            let r = archive
                .rollouts
                .get(ri)
                .ok_or_else(|| Error::Range(format!("rollout {ri} out of range")))?;
            if r.n_views() < n_views {
                return Err(Error::Data(format!(
                    "rollout {ri} has only {} views",
                    r.n_views()
                )));
            }
            scores[ri] = Some((0..n_views).map(|v| f(ri, v)).collect::<Result<Vec<_>>>()?);
        }
        Ok(Self { n_views, scores })
    }

    pub fn n_views(&self) -> usize {
        self.n_views
    }

    /// Predicted reward of one timestep; the multi-view score is the mean over views.
    pub fn get(&self, at: TimeRef, mode: ViewMode) -> Result<f64> {
        let per = self
            .scores
            .get(at.rollout)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::Data(format!("rollout {} was not scored", at.rollout)))?;
        let pick = |v: usize| -> Result<f64> {
            per.get(v)
                .ok_or_else(|| Error::Data(format!("missing view {v}")))?
                .get(at.t)
                .copied()
                .ok_or_else(|| Error::Range(format!("timestep {} out of range", at.t)))
        };
        match mode {
            ViewMode::View(v) => pick(v),
            ViewMode::Multi => {
                let mut s = 0.0;
                for v in 0..self.n_views {
                    s += pick(v)?;
                }
                Ok(s / self.n_views as f64)
            }
        }
    }

    /// Scores of a whole rollout under `mode`.
    pub fn curve(&self, rollout: usize, mode: ViewMode) -> Result<Vec<f64>> {
        let len = self
            .scores
            .get(rollout)
            .and_then(Option::as_ref)
            .map(|s| s[0].len())
            .ok_or_else(|| Error::Data(format!("rollout {rollout} was not scored")))?;
        (0..len)
            .map(|t| self.get(TimeRef { rollout, t }, mode))
            .collect()
    }
}

/// Percentage of pairs ordered like the ground truth; prediction ties score half.
pub fn pairwise_accuracy(
    scores: &ScoreTable,
    bench: &PairwiseBenchmark,
    mode: ViewMode,
) -> Result<f64> {
    if bench.pairs.is_empty() {
        return Err(Error::Data("empty pairwise benchmark".into()));
    }
    let mut correct = 0.0;
    for p in &bench.pairs {
        let sa = scores.get(p.a, mode)?;
        let sb = scores.get(p.b, mode)?;
        correct += if sa == sb {
            0.5
        } else if (sa > sb) == p.a_higher {
            1.0
        } else {
            0.0
        };
    }
    Ok(100.0 * correct / bench.pairs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Voc {
    /// Correlation in `[-100, 100]`.
    pub value: f64,
    /// Set when the predictions had no variance; `value` is then 0.
    pub degenerate: bool,
}

/// Average ranks, 1-based; tied values share the mean of their ranks.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
}

fn kendall_tau_b(x: &[f64]) -> Option<f64> {
    // the reference sequence is the timestep index, which has no ties
    let n = x.len();
    let mut concordant = 0i64;
    let mut discordant = 0i64;
    let mut tied = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            if x[j] > x[i] {
                concordant += 1;
            } else if x[j] < x[i] {
                discordant += 1;
            } else {
                tied += 1;
            }
        }
    }
    let pairs = (n * (n - 1) / 2) as i64;
    let denom = ((pairs - tied) as f64 * pairs as f64).sqrt();
    (denom > 0.0).then(|| (concordant - discordant) as f64 / denom)
}

/// Rank correlation of `pred` with the timestep index, as a percentage.
pub fn voc(pred: &[f64], method: VocMethod) -> Result<Voc> {
    if pred.len() < 2 {
        return Err(Error::Data(format!(
            "VOC needs at least 2 timesteps, got {}",
            pred.len()
        )));
    }
    if pred.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("non-finite predicted reward".into()));
    }
    let r = match method {
        VocMethod::Spearman => {
            let time: Vec<f64> = (1..=pred.len()).map(|t| t as f64).collect();
            pearson(&average_ranks(pred), &time)
        }
        VocMethod::Kendall => kendall_tau_b(pred),
    };
    Ok(match r {
        Some(r) => Voc {
            value: 100.0 * r.clamp(-1.0, 1.0),
            degenerate: false,
        },
        None => Voc {
            value: 0.0,
            degenerate: true,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSem {
    pub mean: f64,
    /// Standard error of the mean (sample standard deviation over `√n`).
    pub sem: f64,
    pub n: usize,
}

pub fn mean_sem(values: &[f64]) -> Result<MeanSem> {
    let n = values.len();
    if n == 0 {
        return Err(Error::Data("mean of an empty list".into()));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let sem = if n > 1 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    Ok(MeanSem { mean, sem, n })
}

/// VOC over the first `n` expert rollouts of a task, per view and multi-view.
pub fn voc_report(
    scores: &ScoreTable,
    expert: &[usize],
    n: usize,
    method: VocMethod,
) -> Result<Vec<(ViewMode, MeanSem, usize)>> {
    if expert.len() < n || n == 0 {
        return Err(Error::Config(format!(
            "need {n} expert rollouts, archive holds {}",
            expert.len()
        )));
    }
    let mut out = Vec::new();
    for mode in modes(scores.n_views()) {
        let mut vals = Vec::with_capacity(n);
        let mut degenerate = 0;
        for &ri in &expert[..n] {
            let v = voc(&scores.curve(ri, mode)?, method)?;
            degenerate += usize::from(v.degenerate);
            vals.push(v.value);
        }
        out.push((mode, mean_sem(&vals)?, degenerate));
    }
    Ok(out)
}

/// Each single view, then the multi-view mode.
pub fn modes(n_views: usize) -> Vec<ViewMode> {
    let mut m: Vec<ViewMode> = (0..n_views).map(ViewMode::View).collect();
    m.push(ViewMode::Multi);
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_pairs: usize,
    pub n_expert_trajectories: usize,
    pub voc_method: VocMethod,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_pairs: DEFAULT_PAIRS,
            n_expert_trajectories: DEFAULT_VOC_TRAJECTORIES,
            voc_method: VocMethod::Spearman,
        }
    }
}

/// One task × view row of the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub task_id: String,
    pub view: String,
    pub accuracy: f64,
    pub voc: f64,
    pub voc_sem: f64,
    /// Trajectories whose predictions were constant.
    pub voc_degenerate: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub rows: Vec<EvalRow>,
    /// Mean over all rows; the error column is the mean of the row errors.
    pub average: EvalRow,
    pub n_pairs: usize,
    pub n_expert_trajectories: usize,
}

impl EvalReport {
    pub fn row(&self, task_id: &str, view: &str) -> Option<&EvalRow> {
        self.rows
            .iter()
            .find(|r| r.task_id == task_id && r.view == view)
    }
}

/// Benchmarks built once and shared by every model under evaluation.
#[derive(Debug, Clone)]
pub struct Benchmarks {
    pub tasks: Vec<TaskSpec>,
    pub pairwise: Vec<PairwiseBenchmark>,
    /// Expert rollout indices per task.
    pub expert: Vec<Vec<usize>>,
    /// Rollouts that need scores per task.
    pub needed: Vec<Vec<usize>>,
}

pub fn build_benchmarks(
    archive: &RolloutArchive,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<Benchmarks> {
    let tasks: Vec<TaskSpec> = archive.heldout_tasks().cloned().collect();
    if tasks.is_empty() {
        return Err(Error::Config("suite has no held-out tasks".into()));
    }
    let mut pairwise = Vec::new();
    let mut expert = Vec::new();
    let mut needed = Vec::new();
    for task in &tasks {
        let bench = build_pairwise(task, archive, cfg.n_pairs, seed)?;
        let ex: Vec<usize> = archive
            .rollouts
            .iter()
            .enumerate()
            .filter(|(_, r)| r.task_id == task.task_id && r.policy == PolicyTag::Expert)
            .map(|(i, _)| i)
            .take(cfg.n_expert_trajectories)
            .collect();
        if ex.len() < cfg.n_expert_trajectories {
            return Err(Error::Config(format!(
                "{} has {} expert rollouts, {} requested",
                task.task_id,
                ex.len(),
                cfg.n_expert_trajectories
            )));
        }
        let mut need: Vec<usize> = bench
            .pairs
            .iter()
            .flat_map(|p| [p.a.rollout, p.b.rollout])
            .collect();
        need.extend_from_slice(&ex);
        need.sort_unstable();
        need.dedup();
        pairwise.push(bench);
        expert.push(ex);
        needed.push(need);
    }
    Ok(Benchmarks {
        tasks,
        pairwise,
        expert,
        needed,
    })
}

/// Score tables of one model for every held-out task.
pub fn score_model(
    model: &RewardModel,
    archive: &RolloutArchive,
    b: &Benchmarks,
) -> Result<Vec<ScoreTable>> {
    if model.image.obs_dim() != archive.renderer.obs_dim {
        return Err(Error::Format(format!(
            "checkpoint expects {}-dim observations, archive has {}",
            model.image.obs_dim(),
            archive.renderer.obs_dim
        )));
    }
    b.tasks
        .iter()
        .zip(&b.needed)
        .map(|(t, need)| ScoreTable::from_model(model, archive, need, t.goal_id))
        .collect()
}

/// Both benchmarks over every held-out task and view mode, plus the average row.
pub fn evaluate_scores(
    name: &str,
    tables: &[ScoreTable],
    b: &Benchmarks,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let mut rows = Vec::new();
    for (((task, bench), ex), table) in b.tasks.iter().zip(&b.pairwise).zip(&b.expert).zip(tables) {
        let vocs = voc_report(table, ex, cfg.n_expert_trajectories, cfg.voc_method)?;
        for (mode, ms, degenerate) in vocs {
            rows.push(EvalRow {
                task_id: task.task_id.clone(),
                view: mode.label(),
                accuracy: pairwise_accuracy(table, bench, mode)?,
                voc: ms.mean,
                voc_sem: ms.sem,
                voc_degenerate: degenerate,
            });
        }
    }
    let n = rows.len() as f64;
    let average = EvalRow {
        task_id: "Average".into(),
        view: String::new(),
        accuracy: rows.iter().map(|r| r.accuracy).sum::<f64>() / n,
        voc: rows.iter().map(|r| r.voc).sum::<f64>() / n,
        voc_sem: rows.iter().map(|r| r.voc_sem).sum::<f64>() / n,
        voc_degenerate: rows.iter().map(|r| r.voc_degenerate).sum(),
    };
    Ok(EvalReport {
        model: name.to_string(),
        rows,
        average,
        n_pairs: cfg.n_pairs,
        n_expert_trajectories: cfg.n_expert_trajectories,
    })
}

/// [`score_model`] followed by [`evaluate_scores`].
pub fn full_eval(
    name: &str,
    model: &RewardModel,
    archive: &RolloutArchive,
    b: &Benchmarks,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let tables = score_model(model, archive, b)?;
    evaluate_scores(name, &tables, b, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn voc_extremes() {
        let up: Vec<f64> = (0..10).map(|t| t as f64).collect();
        let down: Vec<f64> = up.iter().rev().cloned().collect();
        for m in [VocMethod::Spearman, VocMethod::Kendall] {
            assert_eq!(voc(&up, m).unwrap().value, 100.0);
            assert_eq!(voc(&down, m).unwrap().value, -100.0);
            let flat = voc(&[2.0; 5], m).unwrap();
            assert!(flat.degenerate && flat.value == 0.0);
        }
        assert!(voc(&[1.0], VocMethod::Spearman).is_err());
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(
            average_ranks(&[3.0, 1.0, 3.0, 2.0]),
            vec![3.5, 1.0, 3.5, 2.0]
        );
    }

    #[test]
    fn sem_hand_values() {
        let m = mean_sem(&[100.0, 0.0]).unwrap();
        assert_eq!((m.mean, m.sem), (50.0, 50.0));
        let flat = mean_sem(&[42.0; 7]).unwrap();
        assert_eq!(flat.sem, 0.0);
        assert!(mean_sem(&[]).is_err());
    }

    #[test]
    fn view_labels() {
        assert_eq!(ViewMode::View(0).label(), "view1");
        assert_eq!(ViewMode::Multi.label(), "multi");
        assert_eq!(modes(3).len(), 4);
    }
}
