mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use mirrorlink::align_io::{read_correspondences, read_intrinsics, read_ply, read_transform, transform_json};
use mirrorlink::evaluator::{run_evaluation, task_heatmap, write_report, Assets, EvalPlan, EvalReport, PolicySpec, TaskPlan};
use mirrorlink::geom::SimilarityTransform;
use mirrorlink::motion_filter::FilterConfig;
use mirrorlink::protocol::DEFAULT_PORT;
use mirrorlink::recorder::{dataset_stats, read_episode, replay_episode, RecorderError};
use mirrorlink::server::{stream_server, ServerConfig};
use mirrorlink::session::{LiveSession, SessionConfig};
use mirrorlink::sim2real::{compose_frame_chain, estimate_similarity, icp_register_from, register_camera, IcpConfig};
use mirrorlink::task::TaskId;

use config::HarnessConfig;

const DEFAULT_BINS: &str = "10x10";
const HEATMAP_CELL_PX: usize = 16;

#[derive(Parser, Debug)]
#[command(name = "mirrorlink", version, about = "Bimanual teleoperation and benchmark harness")]
struct Cli {
    /// Emit exactly one JSON document on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Harness config file (JSON).
    #[arg(long, global = true, env = "MIRRORLINK_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the teleoperation server against a live scene.
    Serve(ServeArgs),
    /// Roll out a policy and write episodes plus the dataset index.
    Record(RecordArgs),
    /// Re-simulate an episode and check it against its recorded states.
    Replay(ReplayArgs),
    /// Run an evaluation plan and write the report and heatmaps.
    Eval(EvalArgs),
    /// Estimate sim-to-real transforms.
    Align {
        #[command(subcommand)]
        method: AlignCmd,
    },
    /// Measure one-way latency against a server.
    Latency(LatencyArgs),
    /// Summarize a recorded dataset.
    Stats(StatsArgs),
    /// Render success heatmaps from an evaluation report.
    Heatmap(HeatmapArgs),
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long)]
    bind: Option<String>,
    #[arg(long)]
    tick_hz: Option<f64>,
    #[arg(long)]
    teleop_hz_expected: Option<f64>,
    #[arg(long, default_value = "kitchen")]
    task: TaskId,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where operator-delimited episodes are written.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Stop after this many seconds; runs until killed otherwise.
    #[arg(long)]
    duration_s: Option<f64>,
}

#[derive(Args, Debug)]
struct RecordArgs {
    /// Task id, or `all`.
    #[arg(long)]
    task: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Episodes per task, seeds `seed..seed+count`.
    #[arg(long, default_value_t = 1)]
    count: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    policy: Option<PolicySpec>,
    #[arg(long)]
    jobs: Option<usize>,
    /// Dataset name stored in the index.
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    #[arg(long)]
    episode: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Evaluation plan; the full benchmark when omitted.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
    /// Replaces the policy of every task in the plan.
    #[arg(long)]
    policy: Option<PolicySpec>,
    /// Replaces every task's trial count.
    #[arg(long)]
    trials: Option<u64>,
    /// Comma-separated subset of tasks.
    #[arg(long, value_delimiter = ',')]
    tasks: Vec<TaskId>,
    #[arg(long, default_value = DEFAULT_BINS)]
    bins: Bins,
}

#[derive(Subcommand, Debug)]
enum AlignCmd {
    /// Closed-form similarity between clouds with matching point order.
    Umeyama {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Also estimate a uniform scale.
        #[arg(long)]
        scale: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Iterative closest point registration.
    Icp {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Initial transform JSON.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, default_value_t = IcpConfig::default().max_iter)]
        max_iter: usize,
        #[arg(long, default_value_t = IcpConfig::default().tol)]
        tol: f64,
        #[arg(long)]
        scale: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Camera pose from 3D-2D correspondences.
    Camera {
        #[arg(long)]
        intrinsics: PathBuf,
        /// CSV with header `id,X,Y,Z,u,v`.
        #[arg(long)]
        correspondences: PathBuf,
        /// Simulation-to-reconstruction transform; adds the camera pose in
        /// simulation coordinates to the output.
        #[arg(long)]
        sim_to_recon: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct LatencyArgs {
    /// Server URL, e.g. ws://127.0.0.1:8765.
    #[arg(long, conflicts_with = "loopback", required_unless_present = "loopback")]
    url: Option<String>,
    /// Measure against a server started in this process.
    #[arg(long)]
    loopback: bool,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 30.0)]
    timeout_s: f64,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct HeatmapArgs {
    /// `report.json` written by `eval`.
    #[arg(long)]
    report: PathBuf,
    /// Defaults to every task in the report.
    #[arg(long)]
    task: Option<TaskId>,
    #[arg(long, default_value = DEFAULT_BINS)]
    bins: Bins,
    #[arg(long)]
    out: PathBuf,
}

/// `NxM` heatmap bin counts.
#[derive(Debug, Clone, Copy)]
struct Bins(usize, usize);

impl std::str::FromStr for Bins {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let bad = || format!("expected NxM with positive integers, got {s:?}");
        let (a, b) = s.split_once(['x', 'X']).ok_or_else(bad)?;
        match (a.parse(), b.parse()) {
            (Ok(nx), Ok(ny)) if nx > 0 && ny > 0 => Ok(Bins(nx, ny)),
            _ => Err(bad()),
        }
    }
}

enum CliError {
    /// Bad invocation or unusable input files; exit 2.
    Usage(String),
    /// The command ran and the task failed; exit 1.
    Failed(String),
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

/// Usage error prefixed with the offending path.
fn bad_file<E: std::fmt::Display>(p: &Path) -> impl Fn(E) -> CliError + '_ {
    move |e| usage(format!("{}: {e}", p.display()))
}

fn failed(e: impl std::fmt::Display) -> CliError {
    CliError::Failed(e.to_string())
}

/// Result of a command: a JSON document, its human rendering, and whether the
/// task it performed succeeded.
struct Output {
    json: Value,
    text: String,
    ok: bool,
}

struct Ctx {
    cfg: HarnessConfig,
}

impl Ctx {
    fn assets(&self) -> Result<Assets, CliError> {
        match &self.cfg.task_dir {
            Some(d) => Assets::from_dir(d).map_err(usage),
            None => Ok(Assets::canonical()),
        }
    }

    fn filter(&self) -> FilterConfig {
        self.cfg.filter.unwrap_or_default()
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let json = cli.json;
    let result = load_config(cli.config.as_deref()).and_then(|cfg| dispatch(&Ctx { cfg }, cli.cmd));
    match result {
        Ok(out) => {
            let body = if json {
                serde_json::to_string_pretty(&out.json).expect("json output") + "\n"
            } else {
                out.text
            };
            // A closed stdout (e.g. `| head`) is not a command failure.
            let _ = std::io::stdout().write_all(body.as_bytes());
            if out.ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            let (code, kind, msg) = match e {
                CliError::Usage(m) => (2, "usage", m),
                CliError::Failed(m) => (1, "failed", m),
            };
            if json {
                let _ = writeln!(std::io::stdout(), "{}", json!({ "ok": false, "error": kind, "message": msg }));
            }
            eprintln!("error: {msg}");
            if code == 2 {
                eprintln!("\nFor more information, try '--help'.");
            }
            ExitCode::from(code)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<HarnessConfig, CliError> {
    path.map(HarnessConfig::load).transpose().map(Option::unwrap_or_default).map_err(usage)
}

fn dispatch(ctx: &Ctx, cmd: Command) -> Result<Output, CliError> {
    match cmd {
        Command::Serve(a) => serve(ctx, a),
        Command::Record(a) => record(ctx, a),
        Command::Replay(a) => replay(ctx, a),
        Command::Eval(a) => eval(ctx, a),
        Command::Align { method } => align(method),
        Command::Latency(a) => latency(a),
        Command::Stats(a) => stats(ctx, a),
        Command::Heatmap(a) => heatmap(ctx, a),
    }
}

fn serve(ctx: &Ctx, a: ServeArgs) -> Result<Output, CliError> {
    let cfg = ServerConfig {
        bind: a
            .bind
            .or(ctx.cfg.bind.clone())
            .unwrap_or_else(|| format!("127.0.0.1:{DEFAULT_PORT}")),
        tick_hz: a.tick_hz.or(ctx.cfg.tick_hz).unwrap_or(ServerConfig::default().tick_hz),
        teleop_hz_expected: a
            .teleop_hz_expected
            .or(ctx.cfg.teleop_hz_expected)
            .unwrap_or(ServerConfig::default().teleop_hz_expected),
    };
    let dataset_dir = a.dataset.or(ctx.cfg.dataset_dir.clone());
    let session = LiveSession::new(
        SessionConfig {
            task: a.task,
            seed: a.seed,
            dataset_name: dataset_name(&dataset_dir),
            dataset_dir,
            filter: ctx.filter(),
        },
        ctx.assets()?,
    );
    let log = session.log();
    let handle = stream_server(&cfg, session).map_err(usage)?;
    log::info!("serving {} at {} Hz", handle.url(), cfg.tick_hz);
    eprintln!("listening on {}", handle.url());
    let start = Instant::now();
    let limit = a.duration_s.map(Duration::from_secs_f64);
    loop {
        let left = limit.map(|l| l.saturating_sub(start.elapsed()));
        if left.is_some_and(|l| l.is_zero()) {
            break;
        }
        std::thread::sleep(left.unwrap_or(Duration::MAX).min(Duration::from_secs(5)));
        let s = handle.stats();
        log::info!("ticks {} consumed {} connections {}", s.ticks, s.consumed, s.connections.len());
    }
    let url = handle.url();
    let stats = handle.shutdown();
    let log = log.lock().expect("session log").clone();
    let mut text = format!("served {url}: {} ticks, {} teleop frames consumed\n", stats.ticks, stats.consumed);
    for c in &stats.connections {
        text += &format!(
            "  conn {} {} {:?}: received {} dropped {} outOfOrder {}\n",
            c.id, c.peer, c.role, c.received, c.dropped, c.out_of_order
        );
    }
    text += &format!("episodes written: {}\n", log.episodes.len());
    Ok(Output {
        json: json!({
            "ok": true,
            "url": url,
            "stats": stats,
            "episodes": log.episodes,
            "warnings": log.warnings,
            "resets": log.resets,
            "ingestErrors": log.ingest_errors,
        }),
        text,
        ok: true,
    })
}

fn dataset_name(dir: &Option<PathBuf>) -> String {
    dir.as_ref()
        .and_then(|d| d.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into())
}

fn record(ctx: &Ctx, a: RecordArgs) -> Result<Output, CliError> {
    let tasks: Vec<TaskId> = if a.task == "all" {
        TaskId::ALL.to_vec()
    } else {
        vec![a.task.parse().map_err(usage)?]
    };
    let out = a
        .out
        .or(ctx.cfg.dataset_dir.clone())
        .ok_or_else(|| usage("--out is required (or datasetDir in the config)"))?;
    let policy = a.policy.or(ctx.cfg.policy.clone()).unwrap_or_default();
    let mut plan = EvalPlan::smoke(policy, a.count);
    plan.tasks = tasks
        .iter()
        .map(|&task| TaskPlan {
            task,
            trials: a.count,
            seed_base: a.seed,
            policy: plan.tasks[0].policy.clone(),
            max_ticks: None,
        })
        .collect();
    plan.jobs = a.jobs.unwrap_or(0);
    plan.validate().map_err(usage)?;
    let name = a.name.unwrap_or_else(|| dataset_name(&Some(out.clone())));
    let index = mirrorlink::evaluator::record_dataset(&plan, &ctx.assets()?, &out, &name).map_err(failed)?;
    // The index may list earlier episodes in the same directory.
    let mine: Vec<_> = index
        .episodes
        .iter()
        .filter(|e| tasks.iter().any(|t| t.as_str() == e.task_id) && (a.seed..a.seed + a.count).contains(&e.seed))
        .collect();
    let failures: Vec<_> = mine.iter().filter(|e| e.success != Some(true)).map(|e| e.file.clone()).collect();
    let mut text = format!("recorded {} episodes into {}\n", mine.len(), out.display());
    for f in &failures {
        text += &format!("  unsuccessful: {f}\n");
    }
    Ok(Output {
        json: json!({
            "ok": failures.is_empty(),
            "dir": out,
            "recorded": mine.len(),
            "unsuccessful": failures,
            "indexed": index.episodes.len(),
        }),
        text,
        ok: failures.is_empty(),
    })
}

fn replay(ctx: &Ctx, a: ReplayArgs) -> Result<Output, CliError> {
    let ep = read_episode(&a.episode).map_err(bad_file(&a.episode))?;
    let assets = ctx.assets()?;
    let task = ep.header.task().map_err(usage)?;
    let result = replay_episode(&ep, assets.manifests[&task].clone(), assets.model.clone());
    let frames = ep.frames.len();
    let (ok, detail, success) = match result {
        Ok(r) => (true, None, Some(r.success)),
        Err(e @ (RecorderError::DivergenceDetected { .. } | RecorderError::SuccessMismatch { .. })) => {
            (false, Some(e.to_string()), None)
        }
        Err(e) => return Err(usage(e)),
    };
    let text = match &detail {
        None => format!("{}: {frames} frames replayed without divergence\n", a.episode.display()),
        Some(d) => format!("{}: {d}\n", a.episode.display()),
    };
    Ok(Output {
        json: json!({
            "ok": ok,
            "episode": a.episode,
            "task": task,
            "frames": frames,
            "success": success,
            "divergence": detail,
        }),
        text,
        ok,
    })
}

fn eval(ctx: &Ctx, a: EvalArgs) -> Result<Output, CliError> {
    let policy = a.policy.or(ctx.cfg.policy.clone());
    let mut plan = match a.plan.or(ctx.cfg.eval_plan.clone()) {
        Some(p) => {
            let text = std::fs::read_to_string(&p).map_err(bad_file(&p))?;
            EvalPlan::from_json(&text).map_err(bad_file(&p))?
        }
        None => EvalPlan::benchmark(policy.clone().unwrap_or_default()),
    };
    if !a.tasks.is_empty() {
        plan.tasks.retain(|t| a.tasks.contains(&t.task));
    }
    for t in &mut plan.tasks {
        if let Some(p) = &policy {
            t.policy = p.clone();
        }
        if let Some(n) = a.trials {
            t.trials = n;
        }
    }
    if let Some(j) = a.jobs {
        plan.jobs = j;
    }
    plan.validate().map_err(usage)?;
    let assets = ctx.assets()?;
    let report = run_evaluation(&plan, &assets).map_err(failed)?;
    if let Some(dir) = &a.out {
        write_report(&report, &assets, dir, (a.bins.0, a.bins.1)).map_err(failed)?;
    }
    // Trials that could not run at all (e.g. unreachable policy) fail the command.
    let errored = report.trials.iter().filter(|t| t.error.is_some()).count();
    Ok(Output {
        json: json!({
            "ok": errored == 0,
            "tasks": report.tasks,
            "average": report.average,
            "skills": report.skills,
            "trials": report.trials.len(),
            "erroredTrials": errored,
            "out": a.out,
        }),
        text: report.to_markdown(),
        ok: errored == 0,
    })
}

fn emit_transform(t: &SimilarityTransform, extra: Value, out: Option<PathBuf>) -> Result<Output, CliError> {
    let tj = transform_json(t);
    if let Some(p) = &out {
        std::fs::write(p, serde_json::to_vec_pretty(&tj).expect("json")).map_err(failed)?;
    }
    let mut doc = tj;
    if let (Some(d), Value::Object(e)) = (doc.as_object_mut(), extra) {
        d.extend(e);
    }
    let text = serde_json::to_string_pretty(&doc).expect("json") + "\n";
    Ok(Output { json: doc, text, ok: true })
}

fn align(cmd: AlignCmd) -> Result<Output, CliError> {
    match cmd {
        AlignCmd::Umeyama { source, target, scale, out } => {
            let (s, t) = (read_ply(&source).map_err(bad_file(&source))?, read_ply(&target).map_err(bad_file(&target))?);
            let tr = estimate_similarity(&s.points, &t.points, scale).map_err(failed)?;
            let rmse = (s.points.iter().zip(&t.points).map(|(p, q)| (tr.apply(p) - q).norm_squared()).sum::<f64>()
                / s.len() as f64)
                .sqrt();
            emit_transform(&tr, json!({ "rmse": rmse }), out)
        }
        AlignCmd::Icp { source, target, init, max_iter, tol, scale, out } => {
            let (s, t) = (read_ply(&source).map_err(bad_file(&source))?, read_ply(&target).map_err(bad_file(&target))?);
            let init = match &init {
                Some(p) => read_transform(p).map_err(bad_file(p))?,
                None => SimilarityTransform::identity(),
            };
            let cfg = IcpConfig { max_iter, tol, with_scale: scale };
            let r = icp_register_from(&s, &t, &cfg, init).map_err(failed)?;
            emit_transform(
                &r.transform,
                json!({ "rmse": r.rmse, "iterations": r.iterations, "converged": r.converged }),
                out,
            )
        }
        AlignCmd::Camera { intrinsics, correspondences, sim_to_recon, out } => {
            let k = read_intrinsics(&intrinsics).map_err(bad_file(&intrinsics))?;
            let c = read_correspondences(&correspondences).map_err(bad_file(&correspondences))?;
            let r = register_camera(&k, &c).map_err(failed)?;
            let mut extra = json!({ "rmsePx": r.rmse_px, "iterations": r.iterations });
            if let Some(p) = sim_to_recon {
                let chain = read_transform(&p).map_err(bad_file(&p))?;
                let cam = compose_frame_chain(&chain, &r.pose.inverse());
                extra["cameraInSim"] = transform_json(&SimilarityTransform::from_pose(&cam));
            }
            emit_transform(&SimilarityTransform::from_pose(&r.pose), extra, out)
        }
    }
}

fn latency(a: LatencyArgs) -> Result<Output, CliError> {
    let timeout = Duration::from_secs_f64(a.timeout_s);
    let server = if a.loopback {
        let cfg = ServerConfig {
            bind: "127.0.0.1:0".into(),
            ..ServerConfig::default()
        };
        Some(stream_server(&cfg, |_: Option<&_>, _: &[_], _| Default::default()).map_err(failed)?)
    } else {
        None
    };
    let url = match (&server, a.url) {
        (Some(s), _) => s.url(),
        (None, Some(u)) => u,
        (None, None) => return Err(usage("--url or --loopback is required")),
    };
    let mut client = mirrorlink::server::TeleopClient::connect(&url).map_err(failed)?;
    let stats = mirrorlink::protocol::measure_latency(&mut client, a.samples, timeout).map_err(failed)?;
    client.close();
    let text = format!(
        "{url}: {} samples, one-way mean {:.1} us, p50 {:.1} us, p99 {:.1} us\n",
        stats.samples, stats.mean_us, stats.p50_us, stats.p99_us
    );
    Ok(Output {
        json: json!({ "ok": true, "url": url, "latency": stats }),
        text,
        ok: true,
    })
}

fn stats(ctx: &Ctx, a: StatsArgs) -> Result<Output, CliError> {
    let dir = a
        .dataset
        .or(ctx.cfg.dataset_dir.clone())
        .ok_or_else(|| usage("--dataset is required (or datasetDir in the config)"))?;
    if !dir.is_dir() {
        return Err(usage(format!("{} is not a directory", dir.display())));
    }
    let s = dataset_stats(&dir).map_err(usage)?;
    let mut text = String::new();
    for (task, t) in &s.per_task {
        text += &format!("{task:<12} {:>6} trajectories  mean {:.3} s\n", t.trajectories, t.mean_duration_s);
    }
    text += &format!("total {}\nmean duration {:.3} s\n", s.total, s.mean_duration_s);
    Ok(Output {
        json: json!({ "ok": true, "dataset": dir, "stats": s }),
        text,
        ok: true,
    })
}

fn heatmap(ctx: &Ctx, a: HeatmapArgs) -> Result<Output, CliError> {
    let text = std::fs::read_to_string(&a.report).map_err(bad_file(&a.report))?;
    let report: EvalReport = serde_json::from_str(&text).map_err(bad_file(&a.report))?;
    let tasks: Vec<TaskId> = match a.task {
        Some(t) => vec![t],
        None => report.tasks.iter().map(|t| t.task).collect(),
    };
    let assets = ctx.assets()?;
    std::fs::create_dir_all(&a.out).map_err(failed)?;
    let mut grids = Vec::new();
    for t in tasks {
        let g = task_heatmap(&report.trials, &assets.manifests[&t], a.bins.0, a.bins.1).map_err(usage)?;
        g.write(&a.out, HEATMAP_CELL_PX).map_err(failed)?;
        grids.push(g);
    }
    let text = grids
        .iter()
        .map(|g| {
            format!(
                "{}: {} trials in {}x{} bins ({} outside)\n",
                g.task,
                g.gridded_trials,
                a.bins.0,
                a.bins.1,
                g.outside
            )
        })
        .collect();
    Ok(Output {
        json: json!({ "ok": true, "out": a.out, "heatmaps": grids }),
        text,
        ok: true,
    })
}
