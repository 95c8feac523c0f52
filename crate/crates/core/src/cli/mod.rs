//! The `rewardbench` command line: generate the suite, train each objective,
//! evaluate, and write the report tables.

mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

pub use config::{ExperimentConfig, Objective, BASELINE, ENV_PREFIX};

use crate::container::write_file;
use crate::datapipe::{build_dataset, split_indices, DatasetManifest};
use crate::encoders::{load_checkpoint, save_checkpoint, RewardModel};
use crate::error::{Error, Result};
use crate::evalbench::{
    accuracy_markdown, build_benchmarks, curves_csv, evaluate_scores, results_csv, score_model,
    voc_markdown, EvalReport, ViewMode,
};
use crate::synthworld::{
    load_archive, save_archive, PolicyTag, RolloutArchive, TaskSpec, WorldConfig,
};
use crate::training::{init_model, metrics_csv, train, TrainConfig};

#[derive(Debug, Parser)]
#[command(
    name = "rewardbench",
    version,
    about = "Train and compare contrastive reward objectives on a synthetic suite"
)]
pub struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Suite seed; all other seeds derive from it.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Objectives to act on; repeat or comma-separate. Replaces the configured list.
    #[arg(long, global = true, value_name = "TAG", value_delimiter = ',')]
    pub objective: Vec<String>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Worker threads for training and scoring.
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate the task suite and rollout archive.
    Gen,
    /// Train the configured objectives, or those given with --objective.
    Train,
    /// Score every configured model and write the reports.
    Eval,
    /// gen, train and eval, skipping completed stages.
    All,
    /// Re-render the tables from the stored evaluation.
    Report,
}

impl Cli {
    /// Resolved config: defaults, then file, then environment, then flags.
    pub fn resolve<I>(&self, env: I) -> Result<ExperimentConfig>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut cfg = ExperimentConfig::load(self.config.as_deref(), env)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(j) = self.jobs {
            cfg.jobs = j;
        }
        if !self.objective.is_empty() {
            cfg.objectives = self.objective.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with<A, I>(args: A, env: I) -> i32
where
    A: IntoIterator,
    A::Item: Into<OsString> + Clone,
    I: IntoIterator<Item = (String, String)>,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match cli.resolve(env).and_then(|cfg| run(cli.command, &cfg)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command, cfg: &ExperimentConfig) -> Result<()> {
    match command {
        Command::Gen => cmd_gen(cfg).map(drop),
        Command::Train => {
            let archive = open_archive(cfg)?;
            parallel_map(&cfg.objectives()?, cfg.jobs, |&o| {
                cmd_train(cfg, &archive, o)
            })
            .map(drop)
        }
        Command::Eval => {
            let archive = open_archive(cfg)?;
            cmd_eval(cfg, &archive).map(drop)
        }
        Command::All => cmd_all(cfg).map(drop),
        Command::Report => cmd_report(cfg).map(drop),
    }
}

/// Where every artifact of an experiment lives.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            root: cfg.out.clone(),
        }
    }

    pub fn archive(&self) -> PathBuf {
        self.root.join("archive.bin")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn run_dir(&self, o: Objective) -> PathBuf {
        self.root.join("runs").join(o.name())
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutEntry {
    pub task_id: String,
    pub policy: PolicyTag,
    pub seed: u64,
    pub len: usize,
}

/// `manifest.json`: everything needed to regenerate and audit the archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenManifest {
    pub seed: u64,
    pub world: WorldConfig,
    pub occluded_view: Option<usize>,
    pub tasks: Vec<TaskSpec>,
    pub rollouts: Vec<RolloutEntry>,
}

impl GenManifest {
    fn of(a: &RolloutArchive) -> Self {
        Self {
            seed: a.suite_seed,
            world: a.world.clone(),
            occluded_view: a.renderer.occluded_view,
            tasks: a.tasks.clone(),
            rollouts: a
                .rollouts
                .iter()
                .map(|r| RolloutEntry {
                    task_id: r.task_id.clone(),
                    policy: r.policy,
                    seed: r.seed,
                    len: r.len(),
                })
                .collect(),
        }
    }
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(v)?;
    bytes.push(b'\n');
    write_file(path, &bytes)
}

pub fn cmd_gen(cfg: &ExperimentConfig) -> Result<RolloutArchive> {
    let t = Instant::now();
    let layout = Layout::new(cfg);
    let archive = RolloutArchive::generate(cfg.seed, &cfg.world)?;
    if layout.manifest().exists() {
        std::fs::remove_file(layout.manifest())?;
    }
    save_archive(&archive, &layout.archive())?;
    // the manifest goes last and marks the archive as complete
    write_json(&layout.manifest(), &GenManifest::of(&archive))?;
    log::info!(
        "generated {} rollouts over {} tasks in {:.1?}",
        archive.rollouts.len(),
        archive.tasks.len(),
        t.elapsed()
    );
    Ok(archive)
}

fn manifest_matches(layout: &Layout, cfg: &ExperimentConfig) -> bool {
    let Ok(bytes) = std::fs::read(layout.manifest()) else {
        return false;
    };
    serde_json::from_slice::<GenManifest>(&bytes)
        .is_ok_and(|m| m.seed == cfg.seed && m.world == cfg.world)
        && layout.archive().is_file()
}

/// The archive for `cfg`, which must already exist on disk.
pub fn open_archive(cfg: &ExperimentConfig) -> Result<RolloutArchive> {
    let layout = Layout::new(cfg);
    if !layout.manifest().is_file() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} not found; run `gen` first", layout.manifest().display()),
        )));
    }
    if !manifest_matches(&layout, cfg) {
        return Err(Error::Config(format!(
            "archive in {} was generated with a different seed or world config; rerun `gen`",
            layout.root.display()
        )));
    }
    let archive = load_archive(&layout.archive())?;
    if archive.suite_seed != cfg.seed || archive.world != cfg.world {
        return Err(Error::Format("archive does not match its manifest".into()));
    }
    Ok(archive)
}

/// `runs/<name>/config.toml`: the exact inputs of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub objective: String,
    pub suite_seed: u64,
    pub model_seed: u64,
    /// Dataset, split and batch-order seed; unused by the baseline.
    pub train_seed: u64,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn of(cfg: &ExperimentConfig, o: Objective) -> Result<Self> {
        let (train, train_seed) = match o {
            Objective::Baseline => (cfg.train.clone(), 0),
            Objective::Trained(tag) => (cfg.train_config(tag)?, cfg.train_seed(tag)),
        };
        Ok(Self {
            objective: o.name().to_string(),
            suite_seed: cfg.seed,
            model_seed: cfg.model_seed(),
            train_seed,
            train,
        })
    }

    fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// True when the run directory holds a checkpoint produced by exactly this config.
pub fn run_complete(cfg: &ExperimentConfig, o: Objective) -> Result<bool> {
    let dir = Layout::new(cfg).run_dir(o);
    let want = RunConfig::of(cfg, o)?.to_toml()?;
    Ok(dir.join("checkpoint.bin").is_file()
        && std::fs::read_to_string(dir.join("config.toml")).is_ok_and(|s| s == want))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub objective: Objective,
    pub dir: PathBuf,
    /// Best epoch, `None` for the baseline.
    pub best_epoch: Option<usize>,
}

/// Trains one objective (or snapshots the baseline) into its run directory.
pub fn cmd_train(
    cfg: &ExperimentConfig,
    archive: &RolloutArchive,
    o: Objective,
) -> Result<RunSummary> {
    let dir = Layout::new(cfg).run_dir(o);
    let run_cfg = RunConfig::of(cfg, o)?;
    let ckpt = dir.join("checkpoint.bin");
    if ckpt.exists() {
        std::fs::remove_file(&ckpt)?;
    }
    write_file(&dir.join("config.toml"), run_cfg.to_toml()?.as_bytes())?;
    let model = init_model(&run_cfg.train.encoder, archive, run_cfg.model_seed)?;
    let Objective::Trained(tag) = o else {
        save_checkpoint(&model, &ckpt)?;
        log::info!("{BASELINE}: saved untrained encoder");
        return Ok(RunSummary {
            objective: o,
            dir,
            best_epoch: None,
        });
    };
    let t = Instant::now();
    let tc = &run_cfg.train;
    let seed = run_cfg.train_seed;
    let ds = build_dataset(archive, tag, tc.cap, seed)?;
    let (tr_idx, val_idx) = split_indices(&ds, tc.val_split, seed)?;
    DatasetManifest {
        dataset: ds.clone(),
        r_val: tc.val_split,
        split_seed: seed,
        val_indices: val_idx.clone(),
    }
    .save(&dir.join("dataset.json"))?;
    let out = train(
        tc,
        model,
        archive,
        &ds.subset(&tr_idx),
        &ds.subset(&val_idx),
        seed,
    )?;
    write_file(
        &dir.join("metrics.csv"),
        metrics_csv(&out.metrics).as_bytes(),
    )?;
    save_checkpoint(&out.model, &ckpt)?;
    log::info!(
        "{tag}: trained {} epochs in {:.1?}, best epoch {}",
        tc.epochs,
        t.elapsed(),
        out.best_epoch
    );
    Ok(RunSummary {
        objective: o,
        dir,
        best_epoch: Some(out.best_epoch),
    })
}

fn load_model(cfg: &ExperimentConfig, o: Objective) -> Result<RewardModel> {
    let dir = Layout::new(cfg).run_dir(o);
    if !run_complete(cfg, o)? {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!(
                "{} holds no finished run for this config; train {} first",
                dir.display(),
                o.name()
            ),
        )));
    }
    load_checkpoint(&dir.join("checkpoint.bin"))
}

/// Scores every configured model and writes `eval/`.
pub fn cmd_eval(cfg: &ExperimentConfig, archive: &RolloutArchive) -> Result<Vec<EvalReport>> {
    let t = Instant::now();
    let objectives = cfg.objectives()?;
    let bench = build_benchmarks(archive, &cfg.eval, cfg.eval_seed())?;
    let scored = parallel_map(&objectives, cfg.jobs, |&o| {
        let model = load_model(cfg, o)?;
        let tables = score_model(&model, archive, &bench)?;
        let report = evaluate_scores(o.name(), &tables, &bench, &cfg.eval)?;
        let curves = bench
            .expert
            .iter()
            .zip(&tables)
            .map(|(ex, table)| table.curve(ex[0], ViewMode::Multi))
            .collect::<Result<Vec<_>>>()?;
        Ok((report, curves))
    })?;
    let dir = Layout::new(cfg).eval_dir();
    let reports: Vec<EvalReport> = scored.iter().map(|(r, _)| r.clone()).collect();
    write_json(&dir.join("reports.json"), &reports)?;
    for (k, task) in bench.tasks.iter().enumerate() {
        let gt = &archive.rollouts[bench.expert[k][0]].rewards;
        let models: Vec<(String, Vec<f64>)> = scored
            .iter()
            .map(|(r, c)| (r.model.clone(), c[k].clone()))
            .collect();
        write_file(
            &dir.join(format!("curves_{}.csv", task.task_id)),
            curves_csv(gt, &models)?.as_bytes(),
        )?;
    }
    write_tables(&dir, &reports)?;
    log::info!("evaluated {} models in {:.1?}", reports.len(), t.elapsed());
    Ok(reports)
}

fn write_tables(dir: &Path, reports: &[EvalReport]) -> Result<()> {
    write_file(
        &dir.join("accuracy.md"),
        accuracy_markdown(reports)?.as_bytes(),
    )?;
    write_file(&dir.join("voc.md"), voc_markdown(reports)?.as_bytes())?;
    write_file(&dir.join("results.csv"), results_csv(reports)?.as_bytes())
}

/// Rewrites the tables from `eval/reports.json`, restricted to the configured models.
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<Vec<EvalReport>> {
    let dir = Layout::new(cfg).eval_dir();
    let stored: Vec<EvalReport> =
        serde_json::from_slice(&std::fs::read(dir.join("reports.json"))?)?;
    let reports = cfg
        .objectives()?
        .iter()
        .map(|o| {
            stored
                .iter()
                .find(|r| r.model == o.name())
                .cloned()
                .ok_or_else(|| Error::Data(format!("no stored evaluation of {}", o.name())))
        })
        .collect::<Result<Vec<_>>>()?;
    write_tables(&dir, &reports)?;
    print!("{}", accuracy_markdown(&reports)?);
    println!();
    print!("{}", voc_markdown(&reports)?);
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllSummary {
    pub generated: bool,
    /// Objectives trained by this invocation; the rest were already complete.
    pub trained: Vec<Objective>,
    pub reports: Vec<EvalReport>,
}

/// gen, train and eval, reusing the archive and any finished runs.
pub fn cmd_all(cfg: &ExperimentConfig) -> Result<AllSummary> {
    let layout = Layout::new(cfg);
    let generated = !manifest_matches(&layout, cfg);
    if generated {
        if layout.root.join("runs").exists() {
            log::warn!("archive config changed; existing runs will be retrained");
        }
        cmd_gen(cfg)?;
    } else {
        log::info!("reusing archive in {}", layout.root.display());
    }
    let archive = open_archive(cfg)?;
    let mut todo = Vec::new();
    for o in cfg.objectives()? {
        if run_complete(cfg, o)? {
            log::info!("{}: already trained, skipping", o.name());
        } else {
            todo.push(o);
        }
    }
    parallel_map(&todo, cfg.jobs, |&o| cmd_train(cfg, &archive, o))?;
    let reports = cmd_eval(cfg, &archive)?;
    Ok(AllSummary {
        generated,
        trained: todo,
        reports,
    })
}

/// `f` over `items` on up to `jobs` threads. Results keep item order and the
/// first failing item's error wins.
pub fn parallel_map<T, R, F>(items: &[T], jobs: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    let workers = jobs.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().unwrap_or_else(|e| e.into_inner())[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .unwrap_or_else(|e| e.into_inner())
        .into_iter()
        .map(|r| r.expect("every item ran"))
        .collect()
}
