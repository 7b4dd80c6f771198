//! The supervised training loop and the evaluation runner: deterministic
//! single-threaded loops where every random draw comes from a named stream
//! of the master seed, so a config reproduces its loss curve bit for bit.

use crate::checkpoint::{
    save_checkpoint, verify_params_match, Checkpoint, CheckpointError,
};
use crate::config::{ConfigError, RunConfig};
use crate::ghost::NUM_STAGES;
use crate::keypose::{random_crop, Dataset, KeyposeError};
use crate::model::{forward_train, predict, register_model_params, ModelError, SceneInputs};
use crate::optim::{OptimError, ParamStore};
use crate::policy::{total_loss, PolicyError};
use crate::scalar::Scalar;
use crate::synth::{evaluate, generate_dataset, EvalReport, SynthError};
use crate::tensor::{Graph, TensorError};
use crate::util::rng_stream;
use rand::Rng;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset has no training tuples")]
    EmptyDataset,
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Keypose(#[from] KeyposeError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geom(#[from] crate::geom::GeomError),
}

/// Script the training dataset described by the config.
pub fn generate_training_data<F: Scalar>(cfg: &RunConfig) -> Result<Dataset<F>, TrainError> {
    let seeds = cfg.data.seed0..cfg.data.seed0 + cfg.data.demos as u64;
    Ok(generate_dataset(cfg.task.id, &cfg.env, cfg.extract.to_extract(), seeds)?)
}

/// Train from scratch or resume, returning the final checkpoint and the
/// per-step mean batch loss. `on_step` observes `(step, mean_loss)` after
/// each optimizer step (step counts are 1-based and cumulative across
/// resumes).
pub fn run_training<F: Scalar>(
    cfg: &RunConfig,
    dataset: &Dataset<F>,
    resume: Option<Checkpoint<F>>,
    mut on_step: impl FnMut(u64, f64),
) -> Result<(Checkpoint<F>, Vec<f64>), TrainError> {
    cfg.validate()?;
    if dataset.samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let master = cfg.train.master_seed;
    let mut store = match resume {
        Some(ckpt) => {
            verify_params_match(&cfg.model, &ckpt.store)?;
            ckpt.store
        }
        None => {
            let mut store = ParamStore::new();
            let mut rng = rng_stream(master, "init", 0);
            register_model_params(&mut store, &cfg.model, &mut rng)?;
            store
        }
    };

    let workspace = cfg.workspace.aabb::<F>()?;
    let adam = cfg.train.adam::<F>();
    let weights = cfg.train.loss_weights::<F>();
    let batch = cfg.train.batch_size;
    let scale = F::from_f64(1.0 / batch as f64);
    let mut losses = Vec::new();

    while store.step < cfg.train.steps as u64 {
        let step = store.step;
        let mut pick = rng_stream(master, "batch", step);
        let mut buf = store.zero_grad_buffer();
        let mut loss_sum = 0.0;
        for i in 0..batch {
            let (demo_ix, tuple) = &dataset.samples[pick.gen_range(0..dataset.samples.len())];
            let demo = &dataset.demos[*demo_ix];
            let sample_ix = step * batch as u64 + i as u64;
            let observation;
            let views = if cfg.train.crop {
                let mut crop_rng = rng_stream(master, "crop", sample_ix);
                observation = random_crop(
                    &demo.observations[tuple.frame],
                    cfg.train.crop_size,
                    cfg.train.crop_size,
                    &mut crop_rng,
                )?;
                &observation
            } else {
                &demo.observations[tuple.frame]
            };
            let mut g = Graph::new();
            let binding = store.bind(&mut g)?;
            let inputs = SceneInputs {
                views,
                tokens: &demo.tokens,
                proprio: &demo.states[tuple.frame],
                workspace: &workspace,
            };
            let mut ghost_rng = rng_stream(master, "ghost", sample_ix);
            let fwd = forward_train(&mut g, &binding, &cfg.model, &inputs, &tuple.action, &mut ghost_rng)?;
            let loss = total_loss(&mut g, &fwd.loss_inputs, &weights, NUM_STAGES)?;
            loss_sum += g.value(loss)[0].to_f64().unwrap_or(f64::NAN);
            g.backward(loss)?;
            store.accumulate(&g, &binding, &mut buf)?;
        }
        store.adam_step(&buf, scale, &adam)?;
        let mean = loss_sum / batch as f64;
        losses.push(mean);
        on_step(store.step, mean);
        if cfg.train.checkpoint_every > 0
            && store.step % cfg.train.checkpoint_every as u64 == 0
            && (store.step as usize) < cfg.train.steps
        {
            let path =
                Path::new(&cfg.paths.out_dir).join(format!("step-{:06}.ckpt", store.step));
            save_checkpoint(
                &path,
                &Checkpoint { config: cfg.clone(), store: store.clone(), master_seed: master },
            )?;
        }
    }

    let ckpt = Checkpoint { config: cfg.clone(), store, master_seed: master };
    Ok((ckpt, losses))
}

/// Evaluate a checkpoint on held-out episodes. Ghost sampling at inference
/// draws from per-(episode, keypose) streams of the episode seed, so
/// evaluation is deterministic and episode-order independent.
pub fn run_eval<F: Scalar>(
    cfg: &RunConfig,
    ckpt: &Checkpoint<F>,
) -> Result<EvalReport<F>, TrainError> {
    cfg.validate()?;
    let model_cfg = cfg.eval_model();
    verify_params_match(&model_cfg, &ckpt.store)?;
    let workspace = cfg.workspace.aabb::<F>()?;
    let mut keypose_counts: std::collections::HashMap<u64, u64> = Default::default();
    let report = evaluate(cfg.task.id, &cfg.env, &cfg.eval.to_eval(), |input| {
        let k = keypose_counts.entry(input.scene_seed).or_insert(0);
        let mut rng = rng_stream(input.scene_seed, "eval-ghost", *k);
        *k += 1;
        let mut g = Graph::new();
        let binding =
            ckpt.store.bind(&mut g).map_err(|e| SynthError::Policy(e.to_string()))?;
        let inputs = SceneInputs {
            views: input.observation,
            tokens: input.tokens,
            proprio: input.proprio,
            workspace: &workspace,
        };
        let p = predict(&mut g, &binding, &model_cfg, &inputs, &mut rng)
            .map_err(|e| SynthError::Policy(e.to_string()))?;
        Ok(p.action)
    })?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_run_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model.d = 12;
        cfg.model.widths = [4, 6, 8];
        cfg.model.ghost_budget = 30;
        cfg.env.views = 1;
        cfg.data.demos = 2;
        cfg.train.steps = 3;
        cfg.train.batch_size = 2;
        cfg.eval.episodes = 2;
        cfg
    }

    #[test]
    fn training_is_bit_deterministic() {
        let cfg = tiny_run_config();
        let ds = generate_training_data::<f64>(&cfg).unwrap();
        let (_, a) = run_training(&cfg, &ds, None, |_, _| {}).unwrap();
        let (_, b) = run_training(&cfg, &ds, None, |_, _| {}).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        assert!(a.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn different_master_seed_changes_the_losses() {
        let cfg = tiny_run_config();
        let ds = generate_training_data::<f64>(&cfg).unwrap();
        let (_, a) = run_training(&cfg, &ds, None, |_, _| {}).unwrap();
        let mut cfg2 = cfg.clone();
        cfg2.train.master_seed = 2;
        let (_, b) = run_training(&cfg2, &ds, None, |_, _| {}).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn resume_continues_the_exact_run() {
        let cfg = tiny_run_config();
        let ds = generate_training_data::<f64>(&cfg).unwrap();
        let (full_ckpt, full) = run_training(&cfg, &ds, None, |_, _| {}).unwrap();
        let mut short = cfg.clone();
        short.train.steps = 1;
        let (mid, head) = run_training(&short, &ds, None, |_, _| {}).unwrap();
        assert_eq!(head, full[..1]);
        let (resumed_ckpt, tail) = run_training(&cfg, &ds, Some(mid), |_, _| {}).unwrap();
        assert_eq!(tail, full[1..]);
        for (a, b) in resumed_ckpt.store.iter().zip(full_ckpt.store.iter()) {
            assert_eq!(a.value, b.value, "{} diverged after resume", a.name);
            assert_eq!(a.m, b.m);
        }
    }

    #[test]
    fn crop_training_runs_and_differs_from_uncropped() {
        let mut cfg = tiny_run_config();
        let ds = generate_training_data::<f64>(&cfg).unwrap();
        let (_, plain) = run_training(&cfg, &ds, None, |_, _| {}).unwrap();
        cfg.train.crop = true;
        let (_, cropped) = run_training(&cfg, &ds, None, |_, _| {}).unwrap();
        assert_ne!(plain, cropped);
        assert!(cropped.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn eval_runs_a_fresh_model_end_to_end() {
        let cfg = tiny_run_config();
        let ds = generate_training_data::<f64>(&cfg).unwrap();
        let (ckpt, _) = run_training(&cfg, &ds, None, |_, _| {}).unwrap();
        let a = run_eval(&cfg, &ckpt).unwrap();
        let b = run_eval(&cfg, &ckpt).unwrap();
        assert_eq!(a, b, "evaluation must be deterministic");
        assert_eq!(a.episodes, 2);
        // An untrained tiny model almost surely fails, but the report must
        // be well-formed either way.
        assert!(a.success_rate >= 0.0 && a.success_rate <= 1.0);
        assert_eq!(a.per_episode.len(), 2);
    }

    #[test]
    fn eval_budget_override_keeps_the_same_checkpoint_usable() {
        let cfg = tiny_run_config();
        let ds = generate_training_data::<f64>(&cfg).unwrap();
        let (ckpt, _) = run_training(&cfg, &ds, None, |_, _| {}).unwrap();
        let mut big = cfg.clone();
        big.eval.ghost_budget = 300;
        let report = run_eval(&big, &ckpt).unwrap();
        assert_eq!(report.episodes, 2);
    }

    #[test]
    fn architecture_change_rejects_a_checkpoint() {
        let cfg = tiny_run_config();
        let ds = generate_training_data::<f64>(&cfg).unwrap();
        let (ckpt, _) = run_training(&cfg, &ds, None, |_, _| {}).unwrap();
        let mut other = cfg.clone();
        other.model.d = 24;
        other.model.widths = [4, 6, 8];
        let err = run_eval(&other, &ckpt).unwrap_err();
        assert!(matches!(err, TrainError::Checkpoint(CheckpointError::ParamMismatch { .. })));
    }
}
