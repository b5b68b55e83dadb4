//! Subcommand implementations.

use std::io::Write;
use std::path::Path;

use ggd_core::checkpoint::Checkpoint;
use ggd_core::data::{gen_synthetic, load_corpus, save_corpus, strip_special, Corpus, Split, Vocab};
use ggd_core::decoding::{
    beam_search, decode_corpus_greedy, default_max_len, greedy_decode, gumbel_dec, sample_decode,
    DecodeMode,
};
use ggd_core::metrics::{avg_log_likelihood, corpus_bleu, sentence_bleu_smoothed};
use ggd_core::model::{prefix_log_prob, ModelParams};
use ggd_core::rng::RngHandle;
use ggd_core::stats::{gumbel_cdf, ks_test};
use ggd_core::training::{ggd_train, mle_train, rl_train, MetricsLog};
use ggd_core::{GgdError, Result};

use crate::config::Resolved;

fn log_warnings(cfg: &ggd_core::training::TrainConfig) -> Result<()> {
    for w in cfg.validate()? {
        eprintln!("warning: {w}");
    }
    Ok(())
}

/// Generate the synthetic task and write corpora + vocabularies.
pub fn gen_data(resolved: &Resolved) -> Result<()> {
    let dir = &resolved.data.dir;
    std::fs::create_dir_all(dir)?;
    let rng = RngHandle::new(resolved.seed).split("gen-data");
    let task = gen_synthetic(&resolved.task_spec(), &rng)?;
    for (corpus, name) in [(&task.train, "train"), (&task.valid, "valid"), (&task.test, "test")] {
        save_corpus(
            corpus,
            &task.vocab,
            &dir.join(format!("{name}.src")),
            &dir.join(format!("{name}.tgt")),
        )?;
    }
    task.vocab.save(&dir.join("vocab.src"))?;
    task.vocab.save(&dir.join("vocab.tgt"))?;
    resolved.write(dir)?;
    println!(
        "wrote {} train / {} valid / {} test pairs to {} (vocab {})",
        task.train.len(),
        task.valid.len(),
        task.test.len(),
        dir.display(),
        task.vocab.size()
    );
    Ok(())
}

struct LoadedData {
    src_vocab: Vocab,
    tgt_vocab: Vocab,
    train: Corpus,
    valid: Corpus,
}

fn load_data(resolved: &Resolved) -> Result<LoadedData> {
    let dir = &resolved.data.dir;
    let src_vocab = Vocab::load(&dir.join("vocab.src"))?;
    let tgt_vocab = Vocab::load(&dir.join("vocab.tgt"))?;
    let cap = resolved.data.load_cap;
    let load = |name: &str, split: Split| -> Result<Corpus> {
        load_corpus(
            &dir.join(format!("{name}.src")),
            &dir.join(format!("{name}.tgt")),
            &src_vocab,
            &tgt_vocab,
            cap,
            split,
        )
    };
    Ok(LoadedData {
        train: load("train", Split::Train)?,
        valid: load("valid", Split::Valid)?,
        src_vocab,
        tgt_vocab,
    })
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(GgdError::Input(format!(
            "checkpoint {} does not exist",
            path.display()
        )));
    }
    Checkpoint::load(path)
}

/// Teacher-forcing pretraining from random initialization.
pub fn train_mle(resolved: &Resolved) -> Result<()> {
    let data = load_data(resolved)?;
    let cfg = resolved.train_config()?;
    log_warnings(&cfg)?;
    let out_dir = &resolved.out_dir;
    std::fs::create_dir_all(out_dir)?;
    resolved.write(out_dir)?;
    let mcfg = resolved.model_config(data.src_vocab.size(), data.tgt_vocab.size());
    let mut rng = RngHandle::new(resolved.seed).split("init");
    let mut params = ModelParams::init(mcfg, &mut rng)?;
    let mut log = MetricsLog::to_file(&out_dir.join("metrics.csv"))?;
    let outcome = mle_train(&data.train, &data.valid, &mut params, &cfg, &mut log)?;
    let ck = Checkpoint::new(params, data.src_vocab, data.tgt_vocab, resolved.seed)?;
    ck.save(&out_dir.join("checkpoint.ckpt"))?;
    println!(
        "mle: {} updates, best validation BLEU {:.4} -> {}",
        outcome.updates,
        outcome.best_val_bleu,
        out_dir.display()
    );
    Ok(())
}

/// Policy-gradient fine-tuning from a pretrained checkpoint.
pub fn train_rl(resolved: &Resolved, checkpoint: &Path) -> Result<()> {
    let data = load_data(resolved)?;
    let cfg = resolved.train_config()?;
    log_warnings(&cfg)?;
    let ck = load_checkpoint(checkpoint)?;
    let out_dir = &resolved.out_dir;
    std::fs::create_dir_all(out_dir)?;
    resolved.write(out_dir)?;
    let mut params = ck.params;
    let mut log = MetricsLog::to_file(&out_dir.join("metrics.csv"))?;
    let outcome = rl_train(&data.train, &data.valid, &mut params, &cfg, &mut log)?;
    let out = Checkpoint::new(params, data.src_vocab, data.tgt_vocab, resolved.seed)?;
    out.save(&out_dir.join("checkpoint.ckpt"))?;
    println!(
        "rl: {} updates, best validation BLEU {:.4} -> {}",
        outcome.updates,
        outcome.best_val_bleu,
        out_dir.display()
    );
    Ok(())
}

/// Alternating generator/discriminator training from a pretrained scorer.
pub fn train_ggd(resolved: &Resolved, checkpoint: &Path) -> Result<()> {
    let data = load_data(resolved)?;
    let cfg = resolved.train_config()?;
    log_warnings(&cfg)?;
    let ck = load_checkpoint(checkpoint)?;
    let out_dir = &resolved.out_dir;
    std::fs::create_dir_all(out_dir)?;
    resolved.write(out_dir)?;
    let mut log = MetricsLog::to_file(&out_dir.join("metrics.csv"))?;
    let outcome = ggd_train(&data.train, &data.valid, &ck.params, &cfg, &mut log)?;
    Checkpoint::new(
        outcome.generator,
        data.src_vocab.clone(),
        data.tgt_vocab.clone(),
        resolved.seed,
    )?
    .save(&out_dir.join("generator.ckpt"))?;
    Checkpoint::new(outcome.discriminator, data.src_vocab, data.tgt_vocab, resolved.seed)?
        .save(&out_dir.join("discriminator.ckpt"))?;
    println!(
        "ggd: {} generator updates, best validation BLEU {:.4} (final {:.4}) -> {}",
        outcome.generator_updates,
        outcome.best_val_bleu,
        outcome.final_val_bleu,
        out_dir.display()
    );
    Ok(())
}

fn read_sources(path: &Path, vocab: &Vocab) -> Result<Vec<Vec<u32>>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(|line| {
            let mut ids: Vec<u32> = line.split_whitespace().map(|t| vocab.id(t)).collect();
            ids.push(ggd_core::data::EOS);
            ids
        })
        .collect())
}

fn render(ids: &[u32], vocab: &Vocab) -> String {
    strip_special(ids)
        .iter()
        .map(|&id| vocab.token(id))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Decode an input file; hypotheses mirror the corpus text format and the
/// per-sentence log-probabilities go to a sibling file.
pub fn decode(
    checkpoint: &Path,
    input: &Path,
    mode: &str,
    seed: u64,
    out_hyp: &Path,
    out_logp: Option<&Path>,
    tau: f64,
) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let mode = DecodeMode::parse(mode)?;
    let sources = read_sources(input, &ck.src_vocab)?;
    let rng = RngHandle::new(seed).split("decode");
    let mut hyp_file = std::fs::File::create(out_hyp)?;
    let default_logp = out_hyp.with_extension("logp");
    let logp_path: &Path = out_logp.unwrap_or(&default_logp);
    let mut logp_file = std::fs::File::create(logp_path)?;
    for (i, x) in sources.iter().enumerate() {
        let cap = default_max_len(x.len());
        let res = match mode {
            DecodeMode::Greedy => greedy_decode(&ck.params, x, cap)?,
            DecodeMode::Beam(width) => beam_search(&ck.params, x, width, cap)?,
            DecodeMode::Sampling => {
                let mut srng = rng.split(&format!("s{i}"));
                sample_decode(&ck.params, x, cap, tau, &mut srng)?
            }
        };
        writeln!(hyp_file, "{}", render(&res.tokens, &ck.tgt_vocab))?;
        writeln!(logp_file, "{}", res.log_prob)?;
    }
    println!("decoded {} sentences (seed {seed})", sources.len());
    Ok(())
}

/// Corpus BLEU under greedy and beam decoding plus mean per-token
/// log-likelihood, with a per-sentence CSV report.
pub fn eval(
    checkpoint: &Path,
    src: &Path,
    reference: &Path,
    beam: usize,
    report: Option<&Path>,
) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let corpus = load_corpus(src, reference, &ck.src_vocab, &ck.tgt_vocab, usize::MAX, Split::Test)?;
    if corpus.is_empty() {
        return Err(GgdError::Input("empty evaluation corpus".into()));
    }
    let sources: Vec<Vec<u32>> = corpus.pairs.iter().map(|(x, _)| x.clone()).collect();
    let greedy = decode_corpus_greedy(&ck.params, &sources, None)?;
    let greedy_pairs: Vec<(Vec<u32>, Vec<u32>)> = greedy
        .iter()
        .zip(&corpus.pairs)
        .map(|(d, (_, y))| (d.tokens.clone(), y.clone()))
        .collect();
    let greedy_bleu = corpus_bleu(&greedy_pairs)?;
    let beam_pairs: Vec<(Vec<u32>, Vec<u32>)> = corpus
        .pairs
        .iter()
        .map(|(x, y)| -> Result<(Vec<u32>, Vec<u32>)> {
            let res = beam_search(&ck.params, x, beam, default_max_len(x.len()))?;
            Ok((res.tokens, y.clone()))
        })
        .collect::<Result<_>>()?;
    let beam_bleu = corpus_bleu(&beam_pairs)?;
    let avg_ll = avg_log_likelihood(&ck.params, &corpus.pairs)?;
    println!("greedy_bleu,{greedy_bleu}");
    println!("beam{beam}_bleu,{beam_bleu}");
    println!("avg_log_likelihood,{avg_ll}");

    if let Some(report_path) = report {
        let mut f = std::fs::File::create(report_path)?;
        writeln!(f, "sentence_id,bleu,loglik,hyp_len,ref_len")?;
        for (i, ((x, y), d)) in corpus.pairs.iter().zip(&greedy).enumerate() {
            let bleu = sentence_bleu_smoothed(&d.tokens, y)?;
            let ll = prefix_log_prob(&ck.params, x, y)?;
            writeln!(
                f,
                "{i},{bleu},{ll},{},{}",
                strip_special(&d.tokens).len(),
                strip_special(y).len()
            )?;
        }
    }
    Ok(())
}

/// Run the noise-paired decode over a corpus and dump every noise component
/// for downstream consistency/distribution analysis, plus a summary.
pub fn inspect_noise(
    checkpoint: &Path,
    src: &Path,
    mode: &str,
    seed: u64,
    tau: f64,
    out: &Path,
) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let mode = DecodeMode::parse(mode)?;
    let sources = read_sources(src, &ck.src_vocab)?;
    let rng = RngHandle::new(seed).split("inspect-noise");
    let mut f = std::fs::File::create(out)?;
    writeln!(f, "sentence_id,step,component,noise,logit,selected")?;
    let mut violations = 0usize;
    let mut pooled: Vec<f64> = Vec::new();
    for (i, x) in sources.iter().enumerate() {
        let mut srng = rng.split(&format!("s{i}"));
        let (tokens, traj) = gumbel_dec(
            &ck.params,
            x,
            mode,
            tau,
            &mut srng,
            default_max_len(x.len()),
        )?;
        violations += traj.consistency_violations();
        for (t, step) in traj.steps.iter().enumerate() {
            for (c, (&g, &a)) in step.noise.iter().zip(&step.logits).enumerate() {
                let selected = (c == step.hard.index) as u8;
                writeln!(f, "{i},{t},{c},{g},{a},{selected}")?;
                pooled.push(g);
            }
        }
        debug_assert_eq!(tokens.len(), traj.steps.len());
    }
    let (d, p) = ks_test(&pooled, gumbel_cdf);
    println!("sentences,{}", sources.len());
    println!("pooled_noise_values,{}", pooled.len());
    println!("consistency_violations,{violations}");
    println!("ks_statistic,{d}");
    println!("ks_p_value,{p}");
    Ok(())
}

