//! Teacher forcing, policy-gradient fine-tuning, and the alternating
//! generator/discriminator training loop.
//!
//! The generator update is computed in two stages that together implement
//! the chain rule through the relaxed tokens: scoring passes first evaluate
//! the reward and its gradient with respect to each emitted token (the
//! tokens enter as one-hot leaves), then that token gradient is pushed
//! through the generator's straight-through variables, whose backward rule
//! is the relaxation Jacobian. Because the regularized reward is a
//! difference of two identically-coded scoring passes, its token gradient
//! cancels bit-exactly when the scorer and the frozen copy hold identical
//! parameters, which makes the zero-gradient fixed point testable exactly.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::data::{epoch_batches, Batch, Corpus, CyclingBatches};
use crate::decoding::{
    decode_corpus_greedy, decode_on_tape, default_max_len, greedy_decode, sample_decode,
    DecodeMode,
};
use crate::error::{GgdError, Result};
use crate::gumbel::Estimator;
use crate::metrics::{corpus_bleu, sentence_bleu_smoothed};
use crate::model::{prefix_log_prob, taped_log_prob_tokens, ModelParams, ModelVars, TokenInput};
use crate::rng::RngHandle;
use crate::tensor::{Gradients, Tape, Tensor, Var};

// ── optimizers ──────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub enum OptimizerKind {
    /// Learning-rate-free adaptive update.
    Adadelta { rho: f64, eps: f64 },
    RmsProp { lr: f64, decay: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adadelta() -> Self {
        OptimizerKind::Adadelta { rho: 0.95, eps: 1e-6 }
    }

    pub fn rmsprop(lr: f64) -> Self {
        OptimizerKind::RmsProp { lr, decay: 0.9, eps: 1e-8 }
    }
}

/// Per-tensor optimizer state carried across steps.
pub struct Optimizer {
    kind: OptimizerKind,
    sq_grad: Vec<Tensor>,
    sq_update: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        Optimizer { kind, sq_grad: zeros.clone(), sq_update: zeros }
    }

    /// Apply one descent step in place.
    pub fn step(&mut self, mut tensors: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if tensors.len() != grads.len() || tensors.len() != self.sq_grad.len() {
            return Err(GgdError::Contract(format!(
                "optimizer state over {} tensors, got {} params and {} grads",
                self.sq_grad.len(),
                tensors.len(),
                grads.len()
            )));
        }
        for ((t, g), i) in tensors.iter_mut().zip(grads).zip(0..) {
            if t.shape() != g.shape() {
                return Err(GgdError::Contract(format!(
                    "gradient shape {:?} does not match parameter shape {:?}",
                    g.shape(),
                    t.shape()
                )));
            }
            match self.kind {
                OptimizerKind::Adadelta { rho, eps } => {
                    let acc = self.sq_grad[i].data_mut();
                    let accd = self.sq_update[i].data_mut();
                    for ((x, &gv), (a, d)) in t
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(acc.iter_mut().zip(accd.iter_mut()))
                    {
                        *a = rho * *a + (1.0 - rho) * gv * gv;
                        let delta = -((*d + eps).sqrt() / (*a + eps).sqrt()) * gv;
                        *d = rho * *d + (1.0 - rho) * delta * delta;
                        *x += delta;
                    }
                }
                OptimizerKind::RmsProp { lr, decay, eps } => {
                    let acc = self.sq_grad[i].data_mut();
                    for ((x, &gv), a) in t.data_mut().iter_mut().zip(g.data()).zip(acc.iter_mut())
                    {
                        *a = decay * *a + (1.0 - decay) * gv * gv;
                        *x -= lr * gv / (*a + eps).sqrt();
                    }
                }
            }
        }
        Ok(())
    }
}

// ── configuration ───────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GenMode {
    Sampling,
    Greedy,
}

impl GenMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sampling" => Ok(GenMode::Sampling),
            "greedy" => Ok(GenMode::Greedy),
            other => Err(GgdError::Config(format!("unknown generator mode '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            GenMode::Sampling => "sampling",
            GenMode::Greedy => "greedy",
        }
    }

    fn decode_mode(&self) -> DecodeMode {
        match self {
            GenMode::Sampling => DecodeMode::Sampling,
            GenMode::Greedy => DecodeMode::Greedy,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub tau: f64,
    pub batch_size: usize,
    /// Generator updates per alternation cycle.
    pub n_g: usize,
    /// Discriminator updates per cycle; 0 keeps the discriminator fixed.
    pub n_d: usize,
    pub entropy_reg: bool,
    pub estimator: Estimator,
    pub gen_mode: GenMode,
    pub max_epochs: usize,
    pub max_updates: usize,
    pub eval_every: usize,
    /// Evaluations without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub baseline_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::rmsprop(1e-5),
            tau: 0.5,
            batch_size: 32,
            n_g: 10,
            n_d: 1,
            entropy_reg: true,
            estimator: Estimator::StGumbel,
            gen_mode: GenMode::Sampling,
            max_epochs: 50,
            max_updates: 100_000,
            eval_every: 100,
            patience: 10,
            seed: 1,
            baseline_decay: 0.95,
        }
    }
}

impl TrainConfig {
    /// Hard validation plus soft warnings (returned, not printed).
    pub fn validate(&self) -> Result<Vec<String>> {
        if self.n_g == 0 {
            return Err(GgdError::Config("n_g must be positive".into()));
        }
        if self.tau <= 0.0 {
            return Err(GgdError::Config("temperature must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(GgdError::Config("batch size must be positive".into()));
        }
        if !(0.0 < self.baseline_decay && self.baseline_decay < 1.0) {
            return Err(GgdError::Config("baseline decay must lie in (0,1)".into()));
        }
        if self.eval_every == 0 {
            return Err(GgdError::Config("eval_every must be positive".into()));
        }
        let mut warnings = Vec::new();
        if self.tau < 0.01 {
            warnings.push(format!(
                "temperature {} is below 0.01; relaxation gradients vanish and training will stall",
                self.tau
            ));
        }
        Ok(warnings)
    }
}

/// Exponential moving average of recent rewards.
#[derive(Clone, Debug)]
pub struct RewardBaseline {
    pub value: f64,
    pub decay: f64,
}

impl RewardBaseline {
    pub fn new(decay: f64) -> Self {
        RewardBaseline { value: 0.0, decay }
    }

    pub fn update(&mut self, reward: f64) {
        self.value = self.decay * self.value + (1.0 - self.decay) * reward;
    }
}

// ── gradient plumbing ───────────────────────────────────────────────

/// Gradients for every parameter in canonical order, zeros where a
/// parameter did not participate.
fn extract_grads(params: &ModelParams, mv: &ModelVars, grads: &mut Gradients) -> Vec<Tensor> {
    mv.list()
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect()
}

fn add_into(total: &mut Vec<Tensor>, part: &[Tensor]) {
    if total.is_empty() {
        total.extend_from_slice(part);
    } else {
        for (t, p) in total.iter_mut().zip(part) {
            t.add_assign(p);
        }
    }
}

fn grad_sq_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(|g| g.sq_norm()).sum()
}

// ── teacher forcing ─────────────────────────────────────────────────

/// Loss and parameter gradients of the mean negative log-likelihood per
/// target token, without applying an update.
pub fn teacher_forcing_loss(batch: &Batch, params: &ModelParams) -> Result<(f64, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(GgdError::Input("empty batch".into()));
    }
    let total_tokens: usize = batch.tgt.lens.iter().sum();
    let mut total_lp = 0.0;
    let mut grad_sum: Vec<Tensor> = Vec::new();
    for i in 0..batch.len() {
        let mut tape = Tape::new();
        let mv = params.vars(&mut tape, true);
        let tokens: Vec<TokenInput> = batch
            .tgt
            .seq(i)
            .iter()
            .map(|&t| TokenInput::Hard(t))
            .collect();
        let lp = taped_log_prob_tokens(&mut tape, &mv, batch.src.seq(i), &tokens)?;
        total_lp += tape.value(lp).as_scalar()?;
        let mut grads = tape.backward(lp)?;
        let part = extract_grads(params, &mv, &mut grads);
        add_into(&mut grad_sum, &part);
    }
    let scale = -1.0 / total_tokens as f64;
    for g in &mut grad_sum {
        g.scale_in_place(scale);
    }
    Ok((-total_lp / total_tokens as f64, grad_sum))
}

/// One maximum-likelihood update; returns the batch loss.
pub fn teacher_forcing_step(
    batch: &Batch,
    params: &mut ModelParams,
    opt: &mut Optimizer,
) -> Result<f64> {
    let (loss, grads) = teacher_forcing_loss(batch, params)?;
    opt.step(params.tensors_mut(), &grads)?;
    Ok(loss)
}

// ── policy gradient ─────────────────────────────────────────────────

/// One policy-gradient update with an injectable reward. Samples one
/// translation per sentence, weights the sequence log-likelihood gradient by
/// the centered reward, and refreshes the baseline with the batch mean.
pub(crate) fn reinforce_step_with_reward(
    batch: &Batch,
    params: &mut ModelParams,
    opt: &mut Optimizer,
    baseline: &mut RewardBaseline,
    rng: &mut RngHandle,
    reward: impl Fn(&[u32], &[u32]) -> Result<f64>,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(GgdError::Input("empty batch".into()));
    }
    let mut grad_sum: Vec<Tensor> = Vec::new();
    let mut reward_sum = 0.0;
    for i in 0..batch.len() {
        let x = batch.src.seq(i);
        let mut srng = rng.split(&format!("s{i}"));
        let sampled = sample_decode(params, x, default_max_len(x.len()), 1.0, &mut srng)?;
        let r = reward(&sampled.tokens, batch.tgt.seq(i))?;
        reward_sum += r;
        let w = r - baseline.value;

        let mut tape = Tape::new();
        let mv = params.vars(&mut tape, true);
        let tokens: Vec<TokenInput> = sampled
            .tokens
            .iter()
            .map(|&t| TokenInput::Hard(t))
            .collect();
        let lp = taped_log_prob_tokens(&mut tape, &mv, x, &tokens)?;
        let mut grads = tape.backward(lp)?;
        let mut part = extract_grads(params, &mv, &mut grads);
        for g in &mut part {
            g.scale_in_place(-w);
        }
        add_into(&mut grad_sum, &part);
    }
    let scale = 1.0 / batch.len() as f64;
    for g in &mut grad_sum {
        g.scale_in_place(scale);
    }
    opt.step(params.tensors_mut(), &grad_sum)?;
    let mean = reward_sum / batch.len() as f64;
    baseline.update(mean);
    Ok(mean)
}

/// One policy-gradient update rewarded by smoothed sentence-level BLEU.
pub fn reinforce_step(
    batch: &Batch,
    params: &mut ModelParams,
    opt: &mut Optimizer,
    baseline: &mut RewardBaseline,
    rng: &mut RngHandle,
) -> Result<f64> {
    reinforce_step_with_reward(batch, params, opt, baseline, rng, |hyp, reference| {
        sentence_bleu_smoothed(hyp, reference)
    })
}

// ── generator update ────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, Default)]
pub struct GenStepStats {
    /// Mean reward over the batch.
    pub objective: f64,
    /// Norm of the applied parameter gradient.
    pub grad_norm: f64,
    /// Norm of the reward gradient with respect to the emitted tokens (the
    /// quantity that cancels exactly at the shared-parameter fixed point).
    pub token_grad_norm: f64,
}

/// Reward value and its gradient with respect to each emitted token, with
/// the tokens entering the scoring passes as one-hot leaves.
fn reward_and_token_grads(
    tape: &mut Tape,
    x: &[u32],
    tokens: &[u32],
    token_leaves: &[Var],
    disc_vars: &ModelVars,
    frozen_vars: Option<&ModelVars>,
) -> Result<(f64, Vec<Tensor>)> {
    debug_assert_eq!(tokens.len(), token_leaves.len());
    let inputs: Vec<TokenInput> = token_leaves.iter().map(|&v| TokenInput::Dist(v)).collect();
    let lp_disc = taped_log_prob_tokens(tape, disc_vars, x, &inputs)?;
    let mut disc_grads = tape.backward(lp_disc)?;
    let mut reward = tape.value(lp_disc).as_scalar()?;
    let mut token_grads: Vec<Tensor> = token_leaves
        .iter()
        .map(|&v| {
            disc_grads
                .take(v)
                .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
        })
        .collect();
    if let Some(fv) = frozen_vars {
        let lp_frozen = taped_log_prob_tokens(tape, fv, x, &inputs)?;
        let mut frozen_grads = tape.backward(lp_frozen)?;
        reward -= tape.value(lp_frozen).as_scalar()?;
        for (&v, tg) in token_leaves.iter().zip(token_grads.iter_mut()) {
            if let Some(fg) = frozen_grads.take(v) {
                tg.sub_assign(&fg);
            }
        }
    }
    Ok((reward, token_grads))
}

/// Per-sentence generator objective and parameter gradients of the reward.
fn generator_sentence_grads(
    x: &[u32],
    gen: &ModelParams,
    disc: &ModelParams,
    frozen: Option<&ModelParams>,
    cfg: &TrainConfig,
    rng: &mut RngHandle,
) -> Result<(f64, Vec<Tensor>, f64)> {
    let mut tape = Tape::new();
    let gen_vars = gen.vars(&mut tape, true);
    let decode = decode_on_tape(
        &mut tape,
        gen,
        &gen_vars,
        x,
        cfg.gen_mode.decode_mode(),
        cfg.tau,
        cfg.estimator,
        rng,
        default_max_len(x.len()),
    )?;

    let disc_vars = disc.vars(&mut tape, false);
    let frozen_vars = frozen.map(|f| f.vars(&mut tape, false));
    let token_leaves: Vec<Var> = decode
        .tokens
        .iter()
        .map(|&t| tape.leaf(Tensor::one_hot(t as usize, gen.cfg.tgt_vocab)))
        .collect();
    let (reward, token_grads) = reward_and_token_grads(
        &mut tape,
        x,
        &decode.tokens,
        &token_leaves,
        &disc_vars,
        frozen_vars.as_ref(),
    )?;
    let token_sq_norm = grad_sq_norm(&token_grads);

    // Push the token gradient through the straight-through variables: the
    // scalar Σ_t <token_var_t, u_t> has exactly the reward's gradient.
    let mut terms = Vec::with_capacity(decode.token_vars.len());
    for (&yvar, u) in decode.token_vars.iter().zip(token_grads) {
        let u_const = tape.constant(u);
        terms.push(tape.dot(yvar, u_const)?);
    }
    let surrogate = tape.sum_scalars(&terms)?;
    let mut grads = tape.backward(surrogate)?;
    let reward_grads = extract_grads(gen, &gen_vars, &mut grads);
    Ok((reward, reward_grads, token_sq_norm))
}

/// One generator update: decode with paired noise, score the emitted
/// sequence under the discriminator (minus the frozen-copy score when the
/// entropy regularizer is on), and ascend the reward through the
/// straight-through estimator. Only the generator parameters move.
pub fn ggd_generator_step(
    sources: &[&[u32]],
    gen: &mut ModelParams,
    disc: &ModelParams,
    frozen: Option<&ModelParams>,
    cfg: &TrainConfig,
    opt: &mut Optimizer,
    rng: &mut RngHandle,
) -> Result<GenStepStats> {
    if sources.is_empty() {
        return Err(GgdError::Input("empty batch".into()));
    }
    let mut grad_sum: Vec<Tensor> = Vec::new();
    let mut objective = 0.0;
    let mut token_sq = 0.0;
    for (i, x) in sources.iter().enumerate() {
        let mut srng = rng.split(&format!("s{i}"));
        let (reward, part, tsq) =
            generator_sentence_grads(x, gen, disc, frozen, cfg, &mut srng)?;
        objective += reward;
        token_sq += tsq;
        add_into(&mut grad_sum, &part);
    }
    // Ascend the mean reward.
    let scale = -1.0 / sources.len() as f64;
    for g in &mut grad_sum {
        g.scale_in_place(scale);
    }
    let stats = GenStepStats {
        objective: objective / sources.len() as f64,
        grad_norm: grad_sq_norm(&grad_sum).sqrt(),
        token_grad_norm: token_sq.sqrt(),
    };
    opt.step(gen.tensors_mut(), &grad_sum)?;
    Ok(stats)
}

// ── discriminator update ────────────────────────────────────────────

/// Core of the discriminator update with the generations supplied by the
/// caller: widen the likelihood gap between ground truth and generations.
pub(crate) fn discriminator_step_with_generations(
    pairs: &[(&[u32], &[u32])],
    generations: &[Vec<u32>],
    disc: &mut ModelParams,
    opt: &mut Optimizer,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(GgdError::Input("empty batch".into()));
    }
    debug_assert_eq!(pairs.len(), generations.len());
    let mut grad_sum: Vec<Tensor> = Vec::new();
    let mut objective = 0.0;
    for ((x, y_real), y_gen) in pairs.iter().zip(generations) {
        let mut tape = Tape::new();
        let mv = disc.vars(&mut tape, true);
        let enc = crate::model::encode(&mut tape, &mv, x)?;
        let as_tokens = |ids: &[u32]| -> Vec<TokenInput> {
            ids.iter().map(|&t| TokenInput::Hard(t)).collect()
        };
        let lp_real = crate::model::taped_log_prob_with_enc(
            &mut tape,
            &mv,
            &enc,
            &as_tokens(y_real),
        )?;
        let lp_gen =
            crate::model::taped_log_prob_with_enc(&mut tape, &mv, &enc, &as_tokens(y_gen))?;
        objective += tape.value(lp_real).as_scalar()? - tape.value(lp_gen).as_scalar()?;
        let mut real_grads = tape.backward(lp_real)?;
        let real = extract_grads(disc, &mv, &mut real_grads);
        let mut gen_grads = tape.backward(lp_gen)?;
        let mut part = extract_grads(disc, &mv, &mut gen_grads);
        // Descend −(lp_real − lp_gen): gradient is g_gen − g_real.
        for (p, r) in part.iter_mut().zip(&real) {
            p.sub_assign(r);
        }
        add_into(&mut grad_sum, &part);
    }
    let scale = 1.0 / pairs.len() as f64;
    for g in &mut grad_sum {
        g.scale_in_place(scale);
    }
    opt.step(disc.tensors_mut(), &grad_sum)?;
    Ok(objective / pairs.len() as f64)
}

/// One discriminator update: draw one generation per sentence from the
/// current generator, then widen the real-versus-generated likelihood gap.
/// Only the discriminator parameters move.
pub fn ggd_discriminator_step(
    pairs: &[(&[u32], &[u32])],
    gen: &ModelParams,
    disc: &mut ModelParams,
    cfg: &TrainConfig,
    opt: &mut Optimizer,
    rng: &mut RngHandle,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(GgdError::Input("empty batch".into()));
    }
    let generations: Vec<Vec<u32>> = pairs
        .iter()
        .enumerate()
        .map(|(i, (x, _))| -> Result<Vec<u32>> {
            let cap = default_max_len(x.len());
            match cfg.gen_mode {
                GenMode::Sampling => {
                    let mut srng = rng.split(&format!("s{i}"));
                    Ok(sample_decode(gen, x, cap, cfg.tau, &mut srng)?.tokens)
                }
                GenMode::Greedy => Ok(greedy_decode(gen, x, cap)?.tokens),
            }
        })
        .collect::<Result<_>>()?;
    discriminator_step_with_generations(pairs, &generations, disc, opt)
}

// ── metrics log ─────────────────────────────────────────────────────

enum Sink {
    File(BufWriter<File>),
    Memory(Vec<u8>),
}

/// Append-only CSV of training progress.
pub struct MetricsLog {
    sink: Sink,
}

pub const METRICS_HEADER: &str =
    "update,phase,objective,greedy_bleu,disc_score_real,disc_score_gen,tau,seed";

fn fmt_float(x: f64) -> String {
    if x.is_nan() {
        "nan".to_string()
    } else {
        format!("{x}")
    }
}

impl MetricsLog {
    pub fn to_file(path: &Path) -> Result<Self> {
        let mut sink = Sink::File(BufWriter::new(File::create(path)?));
        write_line(&mut sink, METRICS_HEADER)?;
        Ok(MetricsLog { sink })
    }

    pub fn in_memory() -> Self {
        let mut sink = Sink::Memory(Vec::new());
        write_line(&mut sink, METRICS_HEADER).expect("memory write");
        MetricsLog { sink }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn row(
        &mut self,
        update: usize,
        phase: &str,
        objective: f64,
        greedy_bleu: f64,
        disc_score_real: f64,
        disc_score_gen: f64,
        tau: f64,
        seed: u64,
    ) -> Result<()> {
        let line = format!(
            "{update},{phase},{},{},{},{},{},{seed}",
            fmt_float(objective),
            fmt_float(greedy_bleu),
            fmt_float(disc_score_real),
            fmt_float(disc_score_gen),
            fmt_float(tau),
        );
        write_line(&mut self.sink, &line)
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Sink::File(f) = &mut self.sink {
            f.flush()?;
        }
        Ok(())
    }

    /// Contents so far (memory sinks only).
    pub fn bytes(&self) -> Option<&[u8]> {
        match &self.sink {
            Sink::Memory(v) => Some(v),
            Sink::File(_) => None,
        }
    }
}

fn write_line(sink: &mut Sink, line: &str) -> Result<()> {
    match sink {
        Sink::File(f) => {
            writeln!(f, "{line}")?;
        }
        Sink::Memory(v) => {
            v.extend_from_slice(line.as_bytes());
            v.push(b'\n');
        }
    }
    Ok(())
}

// ── evaluation snapshots ────────────────────────────────────────────

/// Sentences used for the likelihood columns of the metrics log; greedy
/// BLEU always uses the full validation set.
const SCORE_SUBSET: usize = 200;

#[derive(Clone, Copy, Debug)]
pub struct EvalSnapshot {
    pub greedy_bleu: f64,
    /// Mean per-sentence log-likelihood the scorer assigns to references.
    pub disc_score_real: f64,
    /// Mean per-sentence log-likelihood the scorer assigns to the
    /// generator's greedy outputs.
    pub disc_score_gen: f64,
}

/// Greedy-decode the validation sources with `gen` and score the outputs
/// (and references) under `scorer`.
pub fn evaluate(gen: &ModelParams, scorer: &ModelParams, valid: &Corpus) -> Result<EvalSnapshot> {
    if valid.is_empty() {
        return Err(GgdError::Input("empty validation corpus".into()));
    }
    let sources: Vec<Vec<u32>> = valid.pairs.iter().map(|(x, _)| x.clone()).collect();
    let decodes = decode_corpus_greedy(gen, &sources, None)?;
    let scored: Vec<(Vec<u32>, Vec<u32>)> = decodes
        .iter()
        .zip(&valid.pairs)
        .map(|(d, (_, y))| (d.tokens.clone(), y.clone()))
        .collect();
    let greedy_bleu = corpus_bleu(&scored)?;
    let subset = valid.len().min(SCORE_SUBSET);
    let mut real = 0.0;
    let mut gen_score = 0.0;
    for i in 0..subset {
        let (x, y) = &valid.pairs[i];
        real += prefix_log_prob(scorer, x, y)?;
        gen_score += prefix_log_prob(scorer, x, &decodes[i].tokens)?;
    }
    Ok(EvalSnapshot {
        greedy_bleu,
        disc_score_real: real / subset as f64,
        disc_score_gen: gen_score / subset as f64,
    })
}

// ── training loops ──────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, Default)]
pub struct TrainOutcome {
    pub best_val_bleu: f64,
    pub final_val_bleu: f64,
    pub updates: usize,
}

struct PatienceTracker {
    best: f64,
    since_best: usize,
    patience: usize,
}

impl PatienceTracker {
    fn new(patience: usize) -> Self {
        PatienceTracker { best: f64::NEG_INFINITY, since_best: 0, patience }
    }

    /// Returns true when the run should stop.
    fn observe(&mut self, value: f64) -> bool {
        if value > self.best {
            self.best = value;
            self.since_best = 0;
            false
        } else {
            self.since_best += 1;
            self.since_best >= self.patience
        }
    }
}

/// Teacher-forcing training to a validation plateau. Parameters are left at
/// the best-validation snapshot.
pub fn mle_train(
    train: &Corpus,
    valid: &Corpus,
    params: &mut ModelParams,
    cfg: &TrainConfig,
    log: &mut MetricsLog,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let root = RngHandle::new(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer.clone(), params);
    let mut outcome = TrainOutcome::default();
    let mut tracker = PatienceTracker::new(cfg.patience);
    let mut best_params = params.clone();
    let mut loss_sum = 0.0;
    let mut loss_n = 0usize;
    let mut stop = false;
    'outer: for epoch in 0..cfg.max_epochs {
        let mut erng = root.split(&format!("mle/epoch{epoch}"));
        for batch in epoch_batches(train, cfg.batch_size, &mut erng) {
            let loss = teacher_forcing_step(&batch, params, &mut opt)?;
            loss_sum += loss;
            loss_n += 1;
            outcome.updates += 1;
            if outcome.updates % cfg.eval_every == 0 {
                let snap = evaluate(params, params, valid)?;
                log.row(
                    outcome.updates,
                    "mle",
                    loss_sum / loss_n as f64,
                    snap.greedy_bleu,
                    snap.disc_score_real,
                    snap.disc_score_gen,
                    cfg.tau,
                    cfg.seed,
                )?;
                loss_sum = 0.0;
                loss_n = 0;
                outcome.final_val_bleu = snap.greedy_bleu;
                if snap.greedy_bleu > outcome.best_val_bleu {
                    outcome.best_val_bleu = snap.greedy_bleu;
                    best_params = params.clone();
                }
                if tracker.observe(snap.greedy_bleu) {
                    stop = true;
                }
            }
            if outcome.updates >= cfg.max_updates {
                stop = true;
            }
            if stop {
                break 'outer;
            }
        }
    }
    *params = best_params;
    log.flush()?;
    Ok(outcome)
}

/// Policy-gradient fine-tuning with smoothed sentence BLEU as the reward.
/// Parameters are left at the best-validation snapshot.
pub fn rl_train(
    train: &Corpus,
    valid: &Corpus,
    params: &mut ModelParams,
    cfg: &TrainConfig,
    log: &mut MetricsLog,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let root = RngHandle::new(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer.clone(), params);
    let mut baseline = RewardBaseline::new(cfg.baseline_decay);
    let noise = root.split("rl/noise");
    let mut outcome = TrainOutcome::default();
    let mut tracker = PatienceTracker::new(cfg.patience);
    let mut best_params = params.clone();
    let mut reward_sum = 0.0;
    let mut reward_n = 0usize;
    let mut stop = false;
    'outer: for epoch in 0..cfg.max_epochs {
        let mut erng = root.split(&format!("rl/epoch{epoch}"));
        for batch in epoch_batches(train, cfg.batch_size, &mut erng) {
            let mut srng = noise.split(&format!("u{}", outcome.updates));
            let mean_reward =
                reinforce_step(&batch, params, &mut opt, &mut baseline, &mut srng)?;
            reward_sum += mean_reward;
            reward_n += 1;
            outcome.updates += 1;
            if outcome.updates % cfg.eval_every == 0 {
                let snap = evaluate(params, params, valid)?;
                log.row(
                    outcome.updates,
                    "rl",
                    reward_sum / reward_n as f64,
                    snap.greedy_bleu,
                    snap.disc_score_real,
                    snap.disc_score_gen,
                    cfg.tau,
                    cfg.seed,
                )?;
                reward_sum = 0.0;
                reward_n = 0;
                outcome.final_val_bleu = snap.greedy_bleu;
                if snap.greedy_bleu > outcome.best_val_bleu {
                    outcome.best_val_bleu = snap.greedy_bleu;
                    best_params = params.clone();
                }
                if tracker.observe(snap.greedy_bleu) {
                    stop = true;
                }
            }
            if outcome.updates >= cfg.max_updates {
                stop = true;
            }
            if stop {
                break 'outer;
            }
        }
    }
    *params = best_params;
    log.flush()?;
    Ok(outcome)
}

pub struct GgdOutcome {
    /// Generator at its best validation BLEU.
    pub generator: ModelParams,
    /// Discriminator at the end of the run.
    pub discriminator: ModelParams,
    pub best_val_bleu: f64,
    pub final_val_bleu: f64,
    pub generator_updates: usize,
}

/// Alternating generator/discriminator training starting from a pretrained
/// scorer: the generator is initialized from it, the corpus is shuffled
/// twice into independent streams for the two loops, and every cycle runs
/// `n_g` generator updates then `n_d` discriminator updates. The frozen
/// regularizer copy is re-snapshotted before every generator update.
pub fn ggd_train(
    train: &Corpus,
    valid: &Corpus,
    pretrained: &ModelParams,
    cfg: &TrainConfig,
    log: &mut MetricsLog,
) -> Result<GgdOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(GgdError::Input("empty training corpus".into()));
    }
    let root = RngHandle::new(cfg.seed);
    let mut gen = pretrained.clone();
    let mut disc = pretrained.clone();
    let mut opt_gen = Optimizer::new(cfg.optimizer.clone(), &gen);
    let mut opt_disc = Optimizer::new(cfg.optimizer.clone(), &disc);
    let mut gen_stream = CyclingBatches::new(train, cfg.batch_size, root.split("ggd/data-gen"));
    let mut disc_stream = CyclingBatches::new(train, cfg.batch_size, root.split("ggd/data-disc"));
    let gen_noise = root.split("ggd/noise-gen");
    let disc_noise = root.split("ggd/noise-disc");

    let mut outcome = TrainOutcome::default();
    let mut tracker = PatienceTracker::new(cfg.patience);
    let mut best_gen = gen.clone();
    let mut obj_sum = 0.0;
    let mut obj_n = 0usize;
    let mut disc_updates = 0usize;
    let mut stop = false;

    let initial = evaluate(&gen, &disc, valid)?;
    log.row(
        0,
        "ggd",
        0.0,
        initial.greedy_bleu,
        initial.disc_score_real,
        initial.disc_score_gen,
        cfg.tau,
        cfg.seed,
    )?;
    outcome.best_val_bleu = initial.greedy_bleu;
    outcome.final_val_bleu = initial.greedy_bleu;
    tracker.observe(initial.greedy_bleu);

    while !stop {
        for _ in 0..cfg.n_g {
            let frozen = cfg.entropy_reg.then(|| gen.clone());
            let batch = gen_stream.next_batch();
            let sources: Vec<&[u32]> = (0..batch.len()).map(|i| batch.src.seq(i)).collect();
            let mut srng = gen_noise.split(&format!("u{}", outcome.updates));
            let stats = ggd_generator_step(
                &sources,
                &mut gen,
                &disc,
                frozen.as_ref(),
                cfg,
                &mut opt_gen,
                &mut srng,
            )?;
            obj_sum += stats.objective;
            obj_n += 1;
            outcome.updates += 1;
            if outcome.updates % cfg.eval_every == 0 {
                let snap = evaluate(&gen, &disc, valid)?;
                log.row(
                    outcome.updates,
                    "ggd",
                    obj_sum / obj_n as f64,
                    snap.greedy_bleu,
                    snap.disc_score_real,
                    snap.disc_score_gen,
                    cfg.tau,
                    cfg.seed,
                )?;
                obj_sum = 0.0;
                obj_n = 0;
                outcome.final_val_bleu = snap.greedy_bleu;
                if snap.greedy_bleu > outcome.best_val_bleu {
                    outcome.best_val_bleu = snap.greedy_bleu;
                    best_gen = gen.clone();
                }
                if tracker.observe(snap.greedy_bleu) {
                    stop = true;
                }
            }
            if outcome.updates >= cfg.max_updates {
                stop = true;
            }
            if stop {
                break;
            }
        }
        if stop {
            break;
        }
        for _ in 0..cfg.n_d {
            let batch = disc_stream.next_batch();
            let pairs: Vec<(&[u32], &[u32])> = (0..batch.len())
                .map(|i| (batch.src.seq(i), batch.tgt.seq(i)))
                .collect();
            let mut srng = disc_noise.split(&format!("u{disc_updates}"));
            ggd_discriminator_step(&pairs, &gen, &mut disc, cfg, &mut opt_disc, &mut srng)?;
            disc_updates += 1;
        }
    }
    log.flush()?;
    Ok(GgdOutcome {
        generator: best_gen,
        discriminator: disc,
        best_val_bleu: outcome.best_val_bleu,
        final_val_bleu: outcome.final_val_bleu,
        generator_updates: outcome.updates,
    })
}
