//! Command-line entry points: dataset generation, training, evaluation,
//! gradient verification, and checkpoint inspection.
//!
//! Every command resolves one run configuration — built-in defaults, then
//! the `--config` file, then `--set key=value` overrides in order — does its
//! work, and writes a `manifest-<command>.json` into the configured output
//! directory recording the resolved config, seed ranges, and metrics. The
//! process exits 0 only when the command fully succeeded.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use ghostpoint::checkpoint::{load_checkpoint, save_checkpoint, verify_params_match, Checkpoint};
use ghostpoint::config::{load_config, RunConfig};
use ghostpoint::gradcheck::standard_battery;
use ghostpoint::keypose::{read_dataset, write_dataset, Dataset, EeState};
use ghostpoint::manifest::RunManifest;
use ghostpoint::model::{predict_traced, SceneInputs, StageTrace};
use ghostpoint::policy::KeyposeAction;
use ghostpoint::synth::{gen_scene, home_state, render, task_keyposes};
use ghostpoint::tensor::Graph;
use ghostpoint::train::{generate_training_data, run_eval, run_training};
use ghostpoint::util::rng_stream;
use ghostpoint::{Real, Vec3r};
use serde::Serialize;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "ghostpoint",
    version,
    about = "Coarse-to-fine 3D keypose detector: data generation, training, evaluation, inspection"
)]
struct Cli {
    /// TOML run configuration; built-in defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.steps=2000`. Repeatable,
    /// applied after the file in the order given.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Script demonstrations for the configured task into a dataset file.
    Gen,
    /// Train on the configured dataset file; writes checkpoints and a
    /// per-step loss log.
    Train {
        /// Resume from this checkpoint instead of initializing fresh.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on held-out episodes; writes metrics and
    /// per-episode logs.
    Eval {
        /// Checkpoint to evaluate (default: the configured path).
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Verify every graph operation and the full attention stack against
    /// central finite differences.
    Gradcheck {
        /// Random evaluation points per check.
        #[arg(long, default_value_t = 10)]
        seeds: usize,
    },
    /// Run the detector on one scene and dump per-stage ghost clouds,
    /// scores, and chosen foci as JSON for offline plotting.
    Inspect {
        /// Checkpoint to load (default: the configured path).
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Seed of the scene to rebuild and run on.
        #[arg(long)]
        scene_seed: u64,
        /// Which keypose of the episode to trace; the detector's own
        /// predictions advance the gripper state up to it, as in eval.
        #[arg(long, default_value_t = 0)]
        keypose: usize,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(cli.config.as_deref(), &cli.overrides)?;
    let started = Instant::now();
    let mut manifest = RunManifest::new(command_name(&cli.command), &cfg);

    match &cli.command {
        Command::Gen => cmd_gen(&cfg, &mut manifest)?,
        Command::Train { resume } => cmd_train(&cfg, resume.as_deref(), &mut manifest)?,
        Command::Eval { checkpoint } => cmd_eval(&cfg, checkpoint.as_deref(), &mut manifest)?,
        Command::Gradcheck { seeds } => cmd_gradcheck(*seeds, &mut manifest)?,
        Command::Inspect { checkpoint, scene_seed, keypose } => {
            cmd_inspect(&cfg, checkpoint.as_deref(), *scene_seed, *keypose, &mut manifest)?
        }
    }

    manifest.wall_seconds = started.elapsed().as_secs_f64();
    let path = manifest.write(Path::new(&cfg.paths.out_dir))?;
    println!("manifest: {}", path.display());
    Ok(())
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Gen => "gen",
        Command::Train { .. } => "train",
        Command::Eval { .. } => "eval",
        Command::Gradcheck { .. } => "gradcheck",
        Command::Inspect { .. } => "inspect",
    }
}

fn cmd_gen(cfg: &RunConfig, manifest: &mut RunManifest) -> Result<()> {
    let dataset = generate_training_data::<Real>(cfg)?;
    let path = Path::new(&cfg.data.path);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))?;
    }
    let mut w = BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    );
    write_dataset(&mut w, &dataset)?;
    w.flush()?;
    println!(
        "scripted {} demonstrations (seeds {}..{}) for task {:?}",
        dataset.demos.len(),
        cfg.data.seed0,
        cfg.data.seed0 + cfg.data.demos as u64,
        cfg.task.id,
    );
    println!("{} training tuples -> {}", dataset.samples.len(), path.display());
    manifest.metrics.insert("demos".into(), dataset.demos.len() as f64);
    manifest.metrics.insert("tuples".into(), dataset.samples.len() as f64);
    *manifest = manifest.clone().with_dataset(path)?;
    Ok(())
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset<Real>> {
    let path = Path::new(&cfg.data.path);
    let mut r = BufReader::new(File::open(path).with_context(|| {
        format!("opening dataset {} (run `ghostpoint gen` first?)", path.display())
    })?);
    Ok(read_dataset(&mut r)?)
}

fn cmd_train(
    cfg: &RunConfig,
    resume: Option<&Path>,
    manifest: &mut RunManifest,
) -> Result<()> {
    let dataset = load_dataset(cfg)?;
    println!("{} tuples from {}", dataset.samples.len(), cfg.data.path);
    let resume_ckpt = match resume {
        Some(p) => {
            let ckpt: Checkpoint<Real> = load_checkpoint(p)?;
            println!("resuming from {} at step {}", p.display(), ckpt.store.step);
            Some(ckpt)
        }
        None => None,
    };

    let log_every = cfg.train.log_every.max(1) as u64;
    let steps = cfg.train.steps;
    let (ckpt, losses) = run_training(cfg, &dataset, resume_ckpt, |step, loss| {
        if step % log_every == 0 || step == steps as u64 {
            println!("step {step:>6}  loss {loss:.6}");
        }
    })?;

    let out_dir = Path::new(&cfg.paths.out_dir);
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let loss_path = out_dir.join("loss.txt");
    let mut w = BufWriter::new(File::create(&loss_path)?);
    let first_step = ckpt.store.step + 1 - losses.len() as u64;
    for (i, loss) in losses.iter().enumerate() {
        // `{}` on f64 prints the shortest digits that round-trip, so the
        // log is exact enough to compare runs bit-for-bit.
        writeln!(w, "{} {}", first_step + i as u64, loss)?;
    }
    w.flush()?;

    let ckpt_path = Path::new(&cfg.paths.checkpoint);
    save_checkpoint(ckpt_path, &ckpt)?;
    println!("checkpoint: {} (step {})", ckpt_path.display(), ckpt.store.step);
    println!("loss log: {}", loss_path.display());
    if let Some(last) = losses.last() {
        manifest.metrics.insert("final_loss".into(), *last);
    }
    manifest.metrics.insert("steps".into(), ckpt.store.step as f64);
    *manifest = manifest.clone().with_dataset(Path::new(&cfg.data.path))?;
    Ok(())
}

fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    manifest: &mut RunManifest,
) -> Result<()> {
    let path = checkpoint.unwrap_or_else(|| Path::new(&cfg.paths.checkpoint));
    let ckpt: Checkpoint<Real> = load_checkpoint(path)?;
    let report = run_eval(cfg, &ckpt)?;

    let out_dir = Path::new(&cfg.paths.out_dir);
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let episodes_path = out_dir.join("episodes.jsonl");
    let mut w = BufWriter::new(File::create(&episodes_path)?);
    for ep in &report.per_episode {
        writeln!(w, "{}", serde_json::to_string(ep)?)?;
    }
    w.flush()?;

    println!(
        "{} episodes: {} successes ({:.1}%)",
        report.episodes,
        report.successes,
        100.0 * report.success_rate,
    );
    println!(
        "median position error {:.4} m, median rotation error {:.4} rad",
        report.median_pos_err, report.median_rot_err,
    );
    println!("episode logs: {}", episodes_path.display());
    manifest.metrics.insert("episodes".into(), report.episodes as f64);
    manifest.metrics.insert("successes".into(), report.successes as f64);
    manifest.metrics.insert("success_rate".into(), report.success_rate);
    manifest.metrics.insert("median_pos_err".into(), report.median_pos_err);
    manifest.metrics.insert("median_rot_err".into(), report.median_rot_err);
    Ok(())
}

fn cmd_gradcheck(seeds: usize, manifest: &mut RunManifest) -> Result<()> {
    let reports = standard_battery(seeds)?;
    let mut failed = 0usize;
    for r in &reports {
        let verdict = if r.pass { "pass" } else { "FAIL" };
        println!("{verdict}  {:<28}  rel err {:>9.3e}", r.name, r.max_rel_err);
        manifest.metrics.insert(format!("rel_err.{}", r.name), r.max_rel_err);
        failed += usize::from(!r.pass);
    }
    println!(
        "{}/{} checks passed ({} seeds each)",
        reports.len() - failed,
        reports.len(),
        seeds,
    );
    if failed > 0 {
        bail!("{failed} gradient check(s) exceeded tolerance");
    }
    Ok(())
}

/// JSON dump of one traced prediction, written by `inspect`.
#[derive(Serialize)]
struct InspectDump {
    scene_seed: u64,
    instruction: String,
    keypose_index: usize,
    gt: KeyposeAction<Real>,
    prediction: KeyposeAction<Real>,
    open_prob: Real,
    col_prob: Real,
    stages: Vec<StageDump>,
}

#[derive(Serialize)]
struct StageDump {
    stage: usize,
    center: Vec3r,
    chosen: usize,
    /// Candidate ghost positions, row-aligned with `logits`.
    positions: Vec<Vec3r>,
    logits: Vec<Real>,
}

fn stage_dump(t: &StageTrace<Real>) -> StageDump {
    StageDump {
        stage: t.stage,
        center: t.center,
        chosen: t.chosen,
        positions: t.positions.clone(),
        logits: t.logits.clone(),
    }
}

fn cmd_inspect(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    scene_seed: u64,
    keypose: usize,
    manifest: &mut RunManifest,
) -> Result<()> {
    let path = checkpoint.unwrap_or_else(|| Path::new(&cfg.paths.checkpoint));
    let ckpt: Checkpoint<Real> = load_checkpoint(path)?;
    let model_cfg = cfg.eval_model();
    verify_params_match(&model_cfg, &ckpt.store)?;

    let spec = gen_scene::<Real>(scene_seed, cfg.task.id, &cfg.env)?;
    let observation = render(&spec, &cfg.env)?;
    let gts = task_keyposes(&spec);
    if keypose >= gts.len() {
        bail!("episode has {} keyposes; --keypose {keypose} is out of range", gts.len());
    }
    let workspace = cfg.workspace.aabb::<Real>()?;

    // Reproduce the eval-time prediction chain: the detector's own output
    // advances the gripper state, and ghost sampling draws from the same
    // per-(scene, keypose) streams evaluation uses.
    let mut proprio = home_state::<Real>();
    let mut final_trace = None;
    for k in 0..=keypose {
        let mut rng = rng_stream(scene_seed, "eval-ghost", k as u64);
        let mut g = Graph::new();
        let binding = ckpt.store.bind(&mut g)?;
        let inputs = SceneInputs {
            views: &observation,
            tokens: &spec.tokens,
            proprio: &proprio,
            workspace: &workspace,
        };
        let (pred, traces) = predict_traced(&mut g, &binding, &model_cfg, &inputs, &mut rng)?;
        proprio = EeState {
            pos: pred.action.pos,
            rot: pred.action.rot,
            open: pred.action.open,
            col: pred.action.col,
        };
        final_trace = Some((pred, traces));
    }
    let (pred, traces) = final_trace.expect("at least one keypose traced");

    println!("scene {scene_seed}: {:?}", spec.instruction);
    for t in &traces {
        let p = t.positions[t.chosen];
        println!(
            "stage {}: {} ghosts around ({:+.3}, {:+.3}, {:+.3}), chose #{} at ({:+.3}, {:+.3}, {:+.3}) score {:+.3}",
            t.stage,
            t.positions.len(),
            t.center.x,
            t.center.y,
            t.center.z,
            t.chosen,
            p.x,
            p.y,
            p.z,
            t.logits[t.chosen],
        );
    }
    let gt = gts[keypose];
    println!(
        "keypose {keypose}: predicted pos ({:+.4}, {:+.4}, {:+.4}), gt ({:+.4}, {:+.4}, {:+.4}), err {:.4} m",
        pred.action.pos.x,
        pred.action.pos.y,
        pred.action.pos.z,
        gt.pos.x,
        gt.pos.y,
        gt.pos.z,
        pred.action.pos.dist(gt.pos),
    );

    let dump = InspectDump {
        scene_seed,
        instruction: spec.instruction.clone(),
        keypose_index: keypose,
        gt,
        prediction: pred.action,
        open_prob: pred.open_prob,
        col_prob: pred.col_prob,
        stages: traces.iter().map(stage_dump).collect(),
    };
    let out_dir = Path::new(&cfg.paths.out_dir);
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let dump_path = out_dir.join(format!("inspect-{scene_seed}.json"));
    fs::write(&dump_path, serde_json::to_string_pretty(&dump)?)?;
    println!("full dump: {}", dump_path.display());
    manifest.metrics.insert("pos_err".into(), pred.action.pos.dist(gt.pos));
    manifest.metrics.insert("rot_err".into(), pred.action.rot.angle_to(gt.rot));
    Ok(())
}
