// Scratch probe for pretraining dynamics. Not part of the deliverable tests.

use modelmark::data::{gen_task_dataset, TaskFamily, TaskSpec};
use modelmark::vlm::{decode_accuracy, pretrain_base, ModelConfig, TrainOptions};
use modelmark::vocab::Vocabulary;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.15);
    let steps: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(6000);
    let dim: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(32);
    let model_seed: u64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0);

    let cfg = ModelConfig {
        embed_dim: dim,
        seed: model_seed,
        ..ModelConfig::default()
    };
    println!("embed_dim={dim}");
    let vocab = Vocabulary::closed(cfg.vocab_size).unwrap();
    let tasks: Vec<TaskSpec> = TaskFamily::ALL
        .iter()
        .enumerate()
        .map(|(i, &family)| TaskSpec {
            family,
            seed: model_seed * 31 + 100 + i as u64,
            count: 500,
        })
        .collect();
    let opts = TrainOptions {
        steps,
        lr,
        seed: model_seed.wrapping_add(7),
        loss_threshold: 10.0,
        ..TrainOptions::default()
    };
    let t0 = std::time::Instant::now();
    let out = pretrain_base(&cfg, &tasks, &opts, &vocab, &[]).unwrap();
    let dt = t0.elapsed();
    let curve = &out.loss_curve;
    let window = 200.min(curve.len());
    let tail: f64 = curve[curve.len() - window..].iter().sum::<f64>() / window as f64;
    println!(
        "lr={lr} steps={steps} wall={:.1}s tail_mean_loss={tail:.4}",
        dt.as_secs_f64()
    );
    for (i, chunk) in curve.chunks(500).enumerate() {
        let m: f64 = chunk.iter().sum::<f64>() / chunk.len() as f64;
        println!("  window {i:2}: mean loss {m:.4}");
    }

    // held-in and held-out accuracy
    for (label, seed_base) in [("held-in", 100u64), ("held-out", 900u64)] {
        let mut total = 0.0;
        for (i, &family) in TaskFamily::ALL.iter().enumerate() {
            let spec = TaskSpec {
                family,
                seed: seed_base + i as u64,
                count: 25,
            };
            let data = gen_task_dataset(&spec, &vocab, &[]).unwrap();
            let acc = decode_accuracy(&out.params, &cfg, &data, 6).unwrap();
            println!("  {label} {:<20} acc {:.2}", family.as_str(), acc);
            total += acc;
        }
        println!("  {label} mean acc {:.3}", total / 4.0);
    }
}
