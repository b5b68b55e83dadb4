use ggd_core::data::{gen_synthetic, epoch_batches, SyntheticTaskSpec, EOS};
use ggd_core::model::{ModelConfig, ModelParams};
use ggd_core::rng::RngHandle;
use ggd_core::training::*;
use std::time::Instant;

fn main() {
    let spec = SyntheticTaskSpec::default();
    let t0 = Instant::now();
    let task = gen_synthetic(&spec, &RngHandle::new(1)).unwrap();
    println!("gen_synthetic: {:?}", t0.elapsed());

    let cfg = ModelConfig {
        src_vocab: task.vocab.size(),
        tgt_vocab: task.vocab.size(),
        ..ModelConfig::default()
    };
    let mut params = ModelParams::init(cfg, &mut RngHandle::new(2)).unwrap();
    let tcfg = TrainConfig { optimizer: OptimizerKind::adadelta(), ..TrainConfig::default() };
    let mut opt = Optimizer::new(tcfg.optimizer.clone(), &params);

    let mut rng = RngHandle::new(3);
    let batches = epoch_batches(&task.train, 32, &mut rng);
    let t0 = Instant::now();
    for b in batches.iter().take(10) {
        teacher_forcing_step(b, &mut params, &mut opt).unwrap();
    }
    let dt = t0.elapsed();
    println!("teacher forcing: {:?}/update ({} sent/batch) -> {:.1}s/epoch", dt / 10, 32, dt.as_secs_f64() / 10.0 * (10000.0/32.0));

    let t0 = Instant::now();
    let snap = evaluate(&params, &params, &task.valid).unwrap();
    println!("evaluate(1000 valid): {:?}  bleu={:.4}", t0.elapsed(), snap.greedy_bleu);

    // GGD generator step timing
    let disc = params.clone();
    let mut opt_g = Optimizer::new(OptimizerKind::rmsprop(1e-4), &params);
    let b = &batches[0];
    let sources: Vec<&[u32]> = (0..b.len()).map(|i| b.src.seq(i)).collect();
    let t0 = Instant::now();
    for _ in 0..3 {
        let frozen = params.clone();
        let mut srng = rng.split("g");
        ggd_generator_step(&sources, &mut params, &disc, Some(&frozen), &tcfg, &mut opt_g, &mut srng).unwrap();
    }
    println!("ggd generator step: {:?}/update", t0.elapsed() / 3);

    let pairs: Vec<(&[u32], &[u32])> = (0..b.len()).map(|i| (b.src.seq(i), b.tgt.seq(i))).collect();
    let mut opt_d = Optimizer::new(OptimizerKind::rmsprop(1e-4), &disc.clone());
    let mut disc2 = disc.clone();
    let t0 = Instant::now();
    let mut srng = rng.split("d");
    ggd_discriminator_step(&pairs, &params, &mut disc2, &tcfg, &mut opt_d, &mut srng).unwrap();
    println!("ggd discriminator step: {:?}/update", t0.elapsed());
    let _ = EOS;
}
