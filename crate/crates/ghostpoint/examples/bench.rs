use ghostpoint::checkpoint::Checkpoint;
use ghostpoint::config::RunConfig;
use ghostpoint::keypose::Dataset;
use ghostpoint::model::{forward_train, SceneInputs};
use ghostpoint::tensor::Graph;
use ghostpoint::train::{generate_training_data, run_eval, run_training};
use ghostpoint::util::rng_stream;
use std::time::Instant;

/// Teacher-forced probe on the first `n` training tuples: per-stage
/// classification accuracy, per-stage CE, distance of the argmax ghost to
/// the ground truth, and head errors.
fn probe(cfg: &RunConfig, ds: &Dataset<f64>, ckpt: &Checkpoint<f64>, n: usize) {
    let workspace = cfg.workspace.aabb::<f64>().unwrap();
    let mut acc = [0.0f64; 3];
    let mut ce = [0.0f64; 3];
    let mut argdist = [0.0f64; 3];
    let mut rot_err = 0.0f64;
    let mut bits_ok = 0.0f64;
    let take = n.min(ds.samples.len());
    for (i, (demo_ix, tuple)) in ds.samples.iter().take(take).enumerate() {
        let demo = &ds.demos[*demo_ix];
        let mut g = Graph::new();
        let binding = ckpt.store.bind(&mut g).unwrap();
        let inputs = SceneInputs {
            views: &demo.observations[tuple.frame],
            tokens: &demo.tokens,
            proprio: &demo.states[tuple.frame],
            workspace: &workspace,
        };
        let mut rng = rng_stream(12345, "probe-ghost", i as u64);
        let fwd =
            forward_train(&mut g, &binding, &cfg.model, &inputs, &tuple.action, &mut rng).unwrap();
        for (s, sup) in fwd.loss_inputs.stages.iter().enumerate() {
            let logits = g.value(sup.logits);
            let best = logits
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            acc[s] += (best == sup.target) as usize as f64;
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
            ce[s] += lse - logits[sup.target];
        }
        // Re-derive per-stage argmax positions from a fresh forward pass is
        // costly; approximate argdist via nearest_dist + target/argmax gap
        // is not available, so report nearest (quantization floor) instead.
        for (s, d) in fwd.nearest_dist.iter().enumerate() {
            argdist[s] += d;
        }
        let (rot, open_p, col_p) =
            ghostpoint::policy::decode_action(&mut g, &fwd.loss_inputs.head).unwrap();
        rot_err += rot.angle_to(tuple.action.rot);
        let ok = ((open_p > 0.5) == tuple.action.open) && ((col_p > 0.5) == tuple.action.col);
        bits_ok += ok as usize as f64;
    }
    let k = take as f64;
    println!(
        "  probe: acc [{:.2} {:.2} {:.2}]  ce [{:.2} {:.2} {:.2}]  qfloor [{:.3} {:.3} {:.3}]  rot {:.3}  bits {:.2}",
        acc[0] / k,
        acc[1] / k,
        acc[2] / k,
        ce[0] / k,
        ce[1] / k,
        ce[2] / k,
        argdist[0] / k,
        argdist[1] / k,
        argdist[2] / k,
        rot_err / k,
        bits_ok / k,
    );
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let overrides: Vec<String> = args[1..].to_vec();
    let cfg = ghostpoint::config::parse_config("", &overrides).unwrap();
    let t0 = Instant::now();
    let ds = generate_training_data::<f64>(&cfg).unwrap();
    println!("gen {} demos, {} tuples: {:.2?}", cfg.data.demos, ds.samples.len(), t0.elapsed());

    let segments = 5usize;
    let seg_steps = cfg.train.steps / segments;
    let mut ckpt = None;
    for seg in 1..=segments {
        let mut c = cfg.clone();
        c.train.steps = seg_steps * seg;
        let t0 = Instant::now();
        let (new_ckpt, losses) = run_training(&c, &ds, ckpt.take(), |_, _| {}).unwrap();
        let mean_tail: f64 = losses.iter().rev().take(50).sum::<f64>() / 50.0_f64.min(losses.len() as f64);
        let mut ec = cfg.clone();
        ec.eval.episodes = 100;
        let rep = run_eval(&ec, &new_ckpt).unwrap();
        println!(
            "step {:5}: loss(tail50) {:8.4}  success {:5.1}%  med_pos {:.4} m  med_rot {:.4} rad  [{:.1?}]",
            seg_steps * seg, mean_tail, rep.success_rate * 100.0, rep.median_pos_err, rep.median_rot_err, t0.elapsed()
        );
        probe(&cfg, &ds, &new_ckpt, 32);
        ckpt = Some(new_ckpt);
    }
}
