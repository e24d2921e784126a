//! Batched trials, success-rate tables, skill aggregation and heatmaps.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::DualArmModel;
use crate::policy::{self, LoopConfig, NullPolicy, OraclePolicy, Policy, PolicyError};
use crate::recorder::{episode_file_name, record_episode, DatasetIndex, EpisodeHeader, RecorderError};
use crate::scene::Scene;
use crate::task::{Skill, TaskError, TaskId, TaskManifest};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("heatmap needs at least one bin per axis, got {nx}x{ny}")]
    EmptyBins { nx: usize, ny: usize },
    #[error("task {0} has no spawn region for its heatmap object")]
    NoSpawnRegion(TaskId),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Recorder(#[from] RecorderError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("thread pool: {0}")]
    Pool(String),
}

/// `oracle`, `null` or `external:<host:port>`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum PolicySpec {
    #[default]
    Oracle,
    Null,
    External(String),
}

impl FromStr for PolicySpec {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "oracle" => Ok(PolicySpec::Oracle),
            "null" => Ok(PolicySpec::Null),
            _ => match s.strip_prefix("external:") {
                Some(addr) if !addr.is_empty() => Ok(PolicySpec::External(addr.to_string())),
                _ => Err(format!("unknown policy {s:?}; expected oracle, null or external:<addr>")),
            },
        }
    }
}

impl fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicySpec::Oracle => f.write_str("oracle"),
            PolicySpec::Null => f.write_str("null"),
            PolicySpec::External(a) => write!(f, "external:{a}"),
        }
    }
}

impl Serialize for PolicySpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PolicySpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

impl PolicySpec {
    pub fn build(&self, horizon: usize, timeout: Duration) -> Result<Box<dyn Policy>, PolicyError> {
        match self {
            PolicySpec::Oracle => Ok(Box::new(OraclePolicy::new(horizon))),
            PolicySpec::Null => Ok(Box::new(NullPolicy { horizon })),
            #[cfg(feature = "net")]
            PolicySpec::External(addr) => Ok(Box::new(policy::ExternalPolicy::connect(addr, timeout)?)),
            #[cfg(not(feature = "net"))]
            PolicySpec::External(_) => {
                let _ = timeout;
                Err(PolicyError::Protocol("built without network support".into()))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct TaskPlan {
    pub task: TaskId,
    pub trials: u64,
    #[serde(default)]
    pub seed_base: u64,
    #[serde(default)]
    pub policy: PolicySpec,
    #[serde(default)]
    pub max_ticks: Option<u64>,
}

fn default_chunk_every() -> u64 {
    policy::DEFAULT_CHUNK_EVERY
}
fn default_horizon() -> usize {
    policy::DEFAULT_HORIZON
}
fn default_decay() -> f64 {
    policy::DEFAULT_DECAY
}
fn default_timeout_ms() -> u64 {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct EvalPlan {
    pub tasks: Vec<TaskPlan>,
    /// Worker threads; 0 uses every core.
    #[serde(default)]
    pub jobs: usize,
    #[serde(default = "default_chunk_every")]
    pub chunk_every: u64,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_decay")]
    pub decay: f64,
    #[serde(default = "default_timeout_ms")]
    pub policy_timeout_ms: u64,
}

impl EvalPlan {
    /// Every task with its benchmark trial count.
    pub fn benchmark(policy: PolicySpec) -> Self {
        Self::uniform(policy, None)
    }

    /// Every task with `trials` trials.
    pub fn smoke(policy: PolicySpec, trials: u64) -> Self {
        Self::uniform(policy, Some(trials))
    }

    fn uniform(policy: PolicySpec, trials: Option<u64>) -> Self {
        EvalPlan {
            tasks: TaskId::ALL
                .iter()
                .map(|&task| TaskPlan {
                    task,
                    trials: trials.unwrap_or(task.default_trials() as u64),
                    seed_base: 0,
                    policy: policy.clone(),
                    max_ticks: None,
                })
                .collect(),
            jobs: 0,
            chunk_every: default_chunk_every(),
            horizon: default_horizon(),
            decay: default_decay(),
            policy_timeout_ms: default_timeout_ms(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        let p: EvalPlan = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: String| Err(EvalError::InvalidPlan(m));
        if self.tasks.is_empty() {
            return bad("no tasks".into());
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if t.trials == 0 {
                return bad(format!("{}: trials must be positive", t.task));
            }
            if self.tasks[..i].iter().any(|o| o.task == t.task) {
                return bad(format!("{} listed twice", t.task));
            }
        }
        if self.chunk_every == 0 || self.horizon == 0 {
            return bad("chunkEvery and horizon must be positive".into());
        }
        if !(self.decay >= 0.0) {
            return bad("decay must be non-negative".into());
        }
        Ok(())
    }

    pub fn total_trials(&self) -> u64 {
        self.tasks.iter().map(|t| t.trials).sum()
    }

    fn loop_config(&self, max_ticks: Option<u64>, record: bool) -> LoopConfig {
        LoopConfig {
            chunk_every: self.chunk_every,
            max_ticks,
            decay: self.decay,
            record,
            ..LoopConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TrialRecord {
    pub task: TaskId,
    pub seed: u64,
    pub success: bool,
    pub ticks: u64,
    /// Spawn (x, y) of the task's heatmap object.
    pub spawn: [f64; 2],
    pub timeouts: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TaskResult {
    pub task: TaskId,
    pub policy: PolicySpec,
    pub successes: u64,
    pub trials: u64,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SkillResult {
    pub skill: Skill,
    pub tasks: Vec<TaskId>,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EvalReport {
    pub tasks: Vec<TaskResult>,
    pub average: f64,
    pub skills: Vec<SkillResult>,
    pub trials: Vec<TrialRecord>,
}

/// `100 * successes / trials` in hundredths, rounded half-up.
pub fn rate_hundredths(successes: u64, trials: u64) -> u64 {
    assert!(trials > 0 && successes <= trials);
    (20_000 * successes + trials) / (2 * trials)
}

fn hundredths(rate: f64) -> u64 {
    (rate * 100.0).round() as u64
}

/// Half-up mean of two-decimal rates.
pub fn mean_rate(rates: &[f64]) -> f64 {
    if rates.is_empty() {
        return 0.0;
    }
    let n = rates.len() as u64;
    let sum: u64 = rates.iter().map(|&r| hundredths(r)).sum();
    ((2 * sum + n) / (2 * n)) as f64 / 100.0
}

/// Per-skill unweighted mean over the evaluated tasks assessing it. Skills
/// with no evaluated task are omitted.
pub fn skill_aggregate(tasks: &[TaskResult], skill_map: &BTreeMap<TaskId, Vec<Skill>>) -> Vec<SkillResult> {
    Skill::ALL
        .iter()
        .filter_map(|&skill| {
            let rows: Vec<&TaskResult> = tasks
                .iter()
                .filter(|t| skill_map.get(&t.task).is_some_and(|s| s.contains(&skill)))
                .collect();
            (!rows.is_empty()).then(|| SkillResult {
                skill,
                tasks: rows.iter().map(|t| t.task).collect(),
                rate: mean_rate(&rows.iter().map(|t| t.rate).collect::<Vec<_>>()),
            })
        })
        .collect()
}

/// Parses `{"task": ["skill", ...]}` with task and skill names validated.
pub fn parse_skill_map(json: &str) -> Result<BTreeMap<TaskId, Vec<Skill>>, EvalError> {
    let raw: BTreeMap<String, Vec<String>> = serde_json::from_str(json)?;
    raw.into_iter()
        .map(|(t, skills)| {
            let skills = skills.iter().map(|s| s.parse()).collect::<Result<Vec<Skill>, _>>()?;
            Ok((t.parse()?, skills))
        })
        .collect()
}

impl EvalReport {
    /// Trials are listed in plan order then by seed, whatever order they arrive in.
    pub fn from_trials(plan: &EvalPlan, mut trials: Vec<TrialRecord>, skill_map: &BTreeMap<TaskId, Vec<Skill>>) -> Self {
        let rank = |t: TaskId| plan.tasks.iter().position(|tp| tp.task == t).unwrap_or(usize::MAX);
        trials.sort_by_key(|r| (rank(r.task), r.task, r.seed));
        let tasks: Vec<TaskResult> = plan
            .tasks
            .iter()
            .map(|tp| {
                let rows = trials.iter().filter(|r| r.task == tp.task);
                let (n, s) = rows.fold((0, 0), |(n, s), r| (n + 1, s + r.success as u64));
                TaskResult {
                    task: tp.task,
                    policy: tp.policy.clone(),
                    successes: s,
                    trials: n,
                    rate: rate_hundredths(s, n) as f64 / 100.0,
                }
            })
            .collect();
        let average = mean_rate(&tasks.iter().map(|t| t.rate).collect::<Vec<_>>());
        EvalReport {
            skills: skill_aggregate(&tasks, skill_map),
            average,
            tasks,
            trials,
        }
    }

    fn column(&self) -> String {
        let mut names: Vec<String> = self.tasks.iter().map(|t| t.policy.to_string()).collect();
        names.dedup();
        names.join(" / ")
    }

    /// Markdown tables mirroring the benchmark layout.
    pub fn to_markdown(&self) -> String {
        let col = self.column();
        let mut s = String::new();
        let _ = writeln!(s, "| Task | {col} |\n|:--|--:|");
        for t in &self.tasks {
            let _ = writeln!(s, "| {} | {:.2} |", t.task.label(), t.rate);
        }
        let _ = writeln!(s, "| **Avg** | {:.2} |\n", self.average);
        let _ = writeln!(s, "| Skill | {col} |\n|:--|--:|");
        for k in &self.skills {
            let _ = writeln!(s, "| {} | {:.2} |", k.skill.label(), k.rate);
        }
        let _ = writeln!(s, "\n| Task | Successes | Trials |\n|:--|--:|--:|");
        for t in &self.tasks {
            let _ = writeln!(s, "| {} | {} | {} |", t.task.label(), t.successes, t.trials);
        }
        s
    }

    pub fn rate(&self, task: TaskId) -> Option<f64> {
        self.tasks.iter().find(|t| t.task == task).map(|t| t.rate)
    }
}

/// Manifests and robot model shared by all trials.
#[derive(Debug, Clone)]
pub struct Assets {
    pub manifests: BTreeMap<TaskId, Arc<TaskManifest>>,
    pub model: Arc<DualArmModel>,
}

impl Assets {
    pub fn canonical() -> Self {
        Assets {
            manifests: TaskId::ALL
                .iter()
                .map(|&t| (t, Arc::new(TaskManifest::canonical(t))))
                .collect(),
            model: Arc::new(DualArmModel::canonical()),
        }
    }

    /// Manifests from `dir`, falling back to the bundled ones per task.
    pub fn from_dir(dir: &Path) -> Result<Self, EvalError> {
        let mut a = Self::canonical();
        for t in TaskId::ALL {
            if dir.join(format!("{}.json", t.as_str())).exists() {
                a.manifests.insert(t, Arc::new(TaskManifest::load(dir, t)?));
            }
        }
        Ok(a)
    }

    pub fn scene(&self, task: TaskId, seed: u64) -> Scene {
        Scene::reset(self.manifests[&task].clone(), self.model.clone(), seed)
    }
}

/// One closed-loop trial; returns the record and the finished outcome.
pub fn run_trial(assets: &Assets, plan: &EvalPlan, tp: &TaskPlan, seed: u64, record: bool) -> (TrialRecord, Scene, policy::LoopOutcome) {
    let mut scene = assets.scene(tp.task, seed);
    let spawn = scene.primary_spawn();
    let cfg = plan.loop_config(tp.max_ticks, record);
    let outcome = match tp.policy.build(plan.horizon, Duration::from_millis(plan.policy_timeout_ms)) {
        Ok(mut p) => policy::run_closed_loop(&mut scene, p.as_mut(), &cfg),
        Err(e) => policy::LoopOutcome {
            success: false,
            ticks: 0,
            requests: 0,
            timeouts: 0,
            error: Some(e.to_string()),
            report: scene.evaluate_success(),
            frames: Vec::new(),
        },
    };
    let record = TrialRecord {
        task: tp.task,
        seed,
        success: outcome.success,
        ticks: outcome.ticks,
        spawn,
        timeouts: outcome.timeouts,
        failure: (!outcome.report.success).then(|| outcome.report.failed_criteria()),
        error: outcome.error.clone(),
    };
    (record, scene, outcome)
}

fn trial_list(plan: &EvalPlan) -> Vec<(&TaskPlan, u64)> {
    plan.tasks
        .iter()
        .flat_map(|tp| (tp.seed_base..tp.seed_base + tp.trials).map(move |s| (tp, s)))
        .collect()
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool, EvalError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| EvalError::Pool(e.to_string()))
}

/// Runs every trial of `plan`. The report does not depend on `plan.jobs`.
pub fn run_evaluation(plan: &EvalPlan, assets: &Assets) -> Result<EvalReport, EvalError> {
    plan.validate()?;
    let list = trial_list(plan);
    let trials: Vec<TrialRecord> = pool(plan.jobs)?.install(|| {
        list.par_iter()
            .map(|(tp, seed)| run_trial(assets, plan, tp, *seed, false).0)
            .collect()
    });
    Ok(EvalReport::from_trials(plan, trials, &crate::task::default_skill_map()))
}

/// Runs `plan` with recording on and writes one episode per trial plus the
/// dataset index into `dir`.
pub fn record_dataset(plan: &EvalPlan, assets: &Assets, dir: &Path, name: &str) -> Result<DatasetIndex, EvalError> {
    plan.validate()?;
    std::fs::create_dir_all(dir)?;
    let list = trial_list(plan);
    pool(plan.jobs)?.install(|| {
        list.par_iter().try_for_each(|(tp, seed)| {
            let (rec, scene, out) = run_trial(assets, plan, tp, *seed, true);
            let header = EpisodeHeader::for_scene(&scene, Some(rec.success));
            record_episode(&dir.join(episode_file_name(tp.task, *seed)), header, &out.frames)?;
            Ok::<_, EvalError>(())
        })
    })?;
    let index = DatasetIndex::rebuild(dir, name)?;
    index.write(dir)?;
    Ok(index)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct HeatmapBin {
    pub trials: u64,
    pub successes: u64,
    /// `None` when no trial landed in the bin.
    pub rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct HeatmapGrid {
    pub task: TaskId,
    pub x_edges: Vec<f64>,
    pub y_edges: Vec<f64>,
    /// `bins[iy][ix]`.
    pub bins: Vec<Vec<HeatmapBin>>,
    pub gridded_trials: u64,
    pub outside: u64,
}

fn edges(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect()
}

fn bin_of(v: f64, lo: f64, hi: f64, n: usize) -> Option<usize> {
    if !(v >= lo && v <= hi) {
        return None;
    }
    let span = hi - lo;
    if span <= 0.0 {
        return Some(0);
    }
    Some((((v - lo) / span * n as f64) as usize).min(n - 1))
}

/// Bins trial outcomes of `task` by spawn position over `[x0, x1] x [y0, y1]`.
pub fn build_heatmap(
    records: &[TrialRecord],
    task: TaskId,
    x: [f64; 2],
    y: [f64; 2],
    nx: usize,
    ny: usize,
) -> Result<HeatmapGrid, EvalError> {
    if nx == 0 || ny == 0 {
        return Err(EvalError::EmptyBins { nx, ny });
    }
    let mut bins = vec![vec![HeatmapBin::default(); nx]; ny];
    let (mut gridded, mut outside) = (0, 0);
    for r in records.iter().filter(|r| r.task == task) {
        match (bin_of(r.spawn[0], x[0], x[1], nx), bin_of(r.spawn[1], y[0], y[1], ny)) {
            (Some(ix), Some(iy)) => {
                let b = &mut bins[iy][ix];
                b.trials += 1;
                b.successes += r.success as u64;
                gridded += 1;
            }
            _ => outside += 1,
        }
    }
    for b in bins.iter_mut().flatten() {
        b.rate = (b.trials > 0).then(|| b.successes as f64 / b.trials as f64);
    }
    Ok(HeatmapGrid {
        task,
        x_edges: edges(x[0], x[1], nx),
        y_edges: edges(y[0], y[1], ny),
        bins,
        gridded_trials: gridded,
        outside,
    })
}

/// Heatmap over the spawn box of the task's heatmap object.
pub fn task_heatmap(records: &[TrialRecord], manifest: &TaskManifest, nx: usize, ny: usize) -> Result<HeatmapGrid, EvalError> {
    let obj = manifest
        .object_index(&manifest.heatmap.primary)
        .and_then(|i| manifest.objects[i].spawn_box)
        .ok_or(EvalError::NoSpawnRegion(manifest.task_id))?;
    build_heatmap(records, manifest.task_id, [obj.min[0], obj.max[0]], [obj.min[1], obj.max[1]], nx, ny)
}

/// No-data pixels.
pub const NO_DATA_RGB: [u8; 3] = [128, 0, 0];

impl HeatmapGrid {
    /// Binary PPM; success rate as grey level, `cell` pixels per bin, +y up.
    pub fn to_ppm(&self, cell: usize) -> Vec<u8> {
        let cell = cell.max(1);
        let (ny, nx) = (self.bins.len(), self.bins.first().map_or(0, Vec::len));
        let (w, h) = (nx * cell, ny * cell);
        let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
        for row in 0..h {
            let iy = ny - 1 - row / cell;
            for col in 0..w {
                let px = match self.bins[iy][col / cell].rate {
                    Some(r) => [(r * 255.0).round() as u8; 3],
                    None => NO_DATA_RGB,
                };
                out.extend_from_slice(&px);
            }
        }
        out
    }

    pub fn write(&self, dir: &Path, cell: usize) -> Result<(), EvalError> {
        let stem = format!("heatmap_{}", self.task.as_str());
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_vec_pretty(self)?)?;
        std::fs::write(dir.join(format!("{stem}.ppm")), self.to_ppm(cell))?;
        Ok(())
    }
}

/// Writes `report.json`, `report.md` and one heatmap per evaluated task.
pub fn write_report(report: &EvalReport, assets: &Assets, dir: &Path, bins: (usize, usize)) -> Result<(), EvalError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.json"), serde_json::to_vec_pretty(report)?)?;
    std::fs::write(dir.join("report.md"), report.to_markdown())?;
    for t in &report.tasks {
        task_heatmap(&report.trials, &assets.manifests[&t.task], bins.0, bins.1)?.write(dir, 16)?;
    }
    Ok(())
}
