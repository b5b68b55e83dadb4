use ggd_core::data::{gen_synthetic, SyntheticTaskSpec};
use ggd_core::model::{ModelConfig, ModelParams};
use ggd_core::rng::RngHandle;
use ggd_core::training::*;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1);
    let task = gen_synthetic(&SyntheticTaskSpec::default(), &RngHandle::new(1234)).unwrap();
    let cfg = ModelConfig {
        src_vocab: task.vocab.size(),
        tgt_vocab: task.vocab.size(),
        ..ModelConfig::default()
    };
    let mut params = ModelParams::init(cfg, &mut RngHandle::new(seed)).unwrap();
    let tcfg = TrainConfig {
        optimizer: OptimizerKind::adadelta(),
        batch_size: 32,
        eval_every: 156,           // ~half an epoch
        patience: 8,
        max_epochs: 60,
        max_updates: 12_000,
        seed,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let mut log = MetricsLog::to_file(std::path::Path::new(&format!("/tmp/mle_probe_{seed}.csv"))).unwrap();
    let out = mle_train(&task.train, &task.valid, &mut params, &tcfg, &mut log).unwrap();
    println!(
        "seed {seed}: best_bleu={:.4} final_bleu={:.4} updates={} elapsed={:?}",
        out.best_val_bleu, out.final_val_bleu, out.updates, t0.elapsed()
    );
}
