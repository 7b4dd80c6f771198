//! Single-scene overfit probe: how fast does each stage's classification
//! learn under a given architecture/optimizer setting?

use ghostpoint::config::parse_config;
use ghostpoint::model::{forward_train, register_model_params, SceneInputs};
use ghostpoint::optim::ParamStore;
use ghostpoint::policy::total_loss;
use ghostpoint::tensor::Graph;
use ghostpoint::train::generate_training_data;
use ghostpoint::util::rng_stream;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let overrides: Vec<String> = args[1..].to_vec();
    let cfg = parse_config("", &overrides).unwrap();
    let ds = generate_training_data::<f64>(&cfg).unwrap();
    let workspace = cfg.workspace.aabb::<f64>().unwrap();

    let mut store = ParamStore::new();
    let mut rng = rng_stream(cfg.train.master_seed, "init", 0);
    register_model_params(&mut store, &cfg.model, &mut rng).unwrap();

    let adam = cfg.train.adam::<f64>();
    let weights = cfg.train.loss_weights::<f64>();
    let n_scenes = 4usize;
    let steps = cfg.train.steps;

    for step in 0..steps {
        let mut buf = store.zero_grad_buffer();
        let mut ce_sum = [0.0f64; 3];
        let mut acc = [0.0f64; 3];
        for i in 0..n_scenes {
            let (demo_ix, tuple) = &ds.samples[i * 7];
            let demo = &ds.demos[*demo_ix];
            let mut g = Graph::new();
            let binding = store.bind(&mut g).unwrap();
            let inputs = SceneInputs {
                views: &demo.observations[tuple.frame],
                tokens: &demo.tokens,
                proprio: &demo.states[tuple.frame],
                workspace: &workspace,
            };
            let mut ghost_rng = rng_stream(7, "ghost", (step * n_scenes + i) as u64);
            let fwd = forward_train(&mut g, &binding, &cfg.model, &inputs, &tuple.action, &mut ghost_rng)
                .unwrap();
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
                ce_sum[s] += lse - logits[sup.target];
            }
            let loss = total_loss(&mut g, &fwd.loss_inputs, &weights, 3).unwrap();
            g.backward(loss).unwrap();
            store.accumulate(&g, &binding, &mut buf).unwrap();
        }
        store.adam_step(&buf, 1.0 / n_scenes as f64, &adam).unwrap();
        if step % 25 == 0 || step + 1 == steps {
            let k = n_scenes as f64;
            println!(
                "step {:4}  ce [{:5.2} {:5.2} {:5.2}]  acc [{:.2} {:.2} {:.2}]",
                step,
                ce_sum[0] / k,
                ce_sum[1] / k,
                ce_sum[2] / k,
                acc[0] / k,
                acc[1] / k,
                acc[2] / k,
            );
        }
    }
}
