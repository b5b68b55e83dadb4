use ggd_core::checkpoint::Checkpoint;
use ggd_core::data::{gen_synthetic, SyntheticTaskSpec, Vocab};
use ggd_core::decoding::{beam_search, decode_corpus_greedy, default_max_len};
use ggd_core::metrics::corpus_bleu;
use ggd_core::model::{ModelConfig, ModelParams};
use ggd_core::rng::RngHandle;
use ggd_core::training::*;
use std::time::Instant;

fn task() -> (ggd_core::data::SyntheticTask,) {
    (gen_synthetic(&SyntheticTaskSpec::default(), &RngHandle::new(1234)).unwrap(),)
}

fn beam_bleu(params: &ModelParams, valid: &ggd_core::data::Corpus, width: usize, n: usize) -> f64 {
    let pairs: Vec<(Vec<u32>, Vec<u32>)> = valid.pairs.iter().take(n).map(|(x, y)| {
        let r = beam_search(params, x, width, default_max_len(x.len())).unwrap();
        (r.tokens, y.clone())
    }).collect();
    corpus_bleu(&pairs).unwrap()
}

fn greedy_bleu(params: &ModelParams, valid: &ggd_core::data::Corpus) -> f64 {
    let sources: Vec<Vec<u32>> = valid.pairs.iter().map(|(x, _)| x.clone()).collect();
    let d = decode_corpus_greedy(params, &sources, None).unwrap();
    let pairs: Vec<(Vec<u32>, Vec<u32>)> = d.iter().zip(&valid.pairs).map(|(d, (_, y))| (d.tokens.clone(), y.clone())).collect();
    corpus_bleu(&pairs).unwrap()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let cmd = args.get(1).cloned().unwrap_or_default();
    let (task,) = task();
    let vs = task.vocab.size();

    match cmd.as_str() {
        "mle" => {
            // args: mle <embed> <hidden> <attn> <seed> <max_updates> <eval_every> <patience>
            let e: usize = args[2].parse().unwrap();
            let h: usize = args[3].parse().unwrap();
            let a: usize = args[4].parse().unwrap();
            let seed: u64 = args[5].parse().unwrap();
            let max_updates: usize = args[6].parse().unwrap();
            let eval_every: usize = args[7].parse().unwrap();
            let patience: usize = args[8].parse().unwrap();
            let cfg = ModelConfig { src_vocab: vs, tgt_vocab: vs, embed_dim: e, hidden_dim: h, attn_dim: a, eos: 1 };
            let mut params = ModelParams::init(cfg, &mut RngHandle::new(seed)).unwrap();
            let tcfg = TrainConfig {
                optimizer: OptimizerKind::adadelta(), batch_size: 32,
                eval_every, patience, max_epochs: 100, max_updates, seed,
                ..TrainConfig::default()
            };
            let t0 = Instant::now();
            let mut log = MetricsLog::to_file(std::path::Path::new(&format!("/tmp/tune_mle_{e}_{h}_{seed}.csv"))).unwrap();
            let out = mle_train(&task.train, &task.valid, &mut params, &tcfg, &mut log).unwrap();
            let bb = beam_bleu(&params, &task.valid, 5, 200);
            let gb = greedy_bleu(&params, &task.valid);
            println!("mle {e}/{h}/{a} seed={seed}: best={:.4} final={:.4} updates={} greedy={:.4} beam5(200)={:.4} dт={:?}",
                out.best_val_bleu, out.final_val_bleu, out.updates, gb, bb, t0.elapsed());
            let ck = Checkpoint::new(params, task.vocab.clone(), task.vocab.clone(), seed).unwrap();
            ck.save(std::path::Path::new(&format!("/tmp/tune_mle_{e}_{h}_{seed}.ckpt"))).unwrap();
        }
        "ggd" => {
            // args: ggd <ckpt> <seed> <lr> <max_updates> <eval_every> <tau> <entropy:0|1> <estimator> <tag>
            let ck = Checkpoint::load(std::path::Path::new(&args[2])).unwrap();
            let seed: u64 = args[3].parse().unwrap();
            let lr: f64 = args[4].parse().unwrap();
            let max_updates: usize = args[5].parse().unwrap();
            let eval_every: usize = args[6].parse().unwrap();
            let tau: f64 = args[7].parse().unwrap();
            let entropy: bool = args[8] == "1";
            let estimator = ggd_core::gumbel::Estimator::parse(&args[9]).unwrap();
            let tag = args.get(10).cloned().unwrap_or_default();
            let tcfg = TrainConfig {
                optimizer: OptimizerKind::rmsprop(lr), batch_size: 32,
                tau, n_g: 10, n_d: 1, entropy_reg: entropy, estimator,
                gen_mode: GenMode::Sampling,
                max_updates, eval_every, patience: 1_000_000, seed,
                ..TrainConfig::default()
            };
            let t0 = Instant::now();
            let mut log = MetricsLog::to_file(std::path::Path::new(&format!("/tmp/tune_ggd_{tag}_{seed}.csv"))).unwrap();
            let out = ggd_train(&task.train, &task.valid, &ck.params, &tcfg, &mut log).unwrap();
            println!("ggd tag={tag} seed={seed} lr={lr} tau={tau} ent={entropy}: best={:.4} final={:.4} updates={} dt={:?}",
                out.best_val_bleu, out.final_val_bleu, out.generator_updates, t0.elapsed());
        }
        _ => {
            eprintln!("usage: tune mle|ggd ...");
            std::process::exit(2);
        }
    }
    let _: Option<Vocab> = None;
}
