//! Attention-based GRU encoder-decoder.
//!
//! One parameter set serves both network roles: scoring a given translation
//! (teacher-forced log-likelihood) and generating one (recursive decoding).
//! Forward passes are written against the tape, so the same code path serves
//! evaluation (constants) and training (leaves). Previous-token inputs are
//! distributions over the vocabulary; a hard word is the one-hot special
//! case, and the input embedding is always the distribution-weighted mixture
//! of embedding rows.

use crate::error::{GgdError, Result};
use crate::rng::RngHandle;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub attn_dim: usize,
    /// End-of-sentence token id; also used as the start-of-decode input.
    pub eos: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            src_vocab: 30,
            tgt_vocab: 30,
            embed_dim: 32,
            hidden_dim: 64,
            attn_dim: 32,
            eos: crate::data::EOS,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.src_vocab == 0 || self.tgt_vocab == 0 {
            return Err(GgdError::Config("vocabulary sizes must be positive".into()));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.attn_dim == 0 {
            return Err(GgdError::Config("model dimensions must be positive".into()));
        }
        if self.eos as usize >= self.tgt_vocab {
            return Err(GgdError::Config("eos id outside target vocabulary".into()));
        }
        Ok(())
    }
}

/// Weights of one GRU cell.
#[derive(Clone, Debug)]
pub struct GruParams {
    pub wz: Tensor,
    pub uz: Tensor,
    pub bz: Tensor,
    pub wr: Tensor,
    pub ur: Tensor,
    pub br: Tensor,
    pub wh: Tensor,
    pub uh: Tensor,
    pub bh: Tensor,
}

const INIT_RANGE: f64 = 0.08;

fn init_tensor(shape: &[usize], rng: &mut RngHandle) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| (rng.uniform01() * 2.0 - 1.0) * INIT_RANGE)
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

impl GruParams {
    fn init(in_dim: usize, hidden: usize, rng: &mut RngHandle) -> Self {
        GruParams {
            wz: init_tensor(&[in_dim, hidden], rng),
            uz: init_tensor(&[hidden, hidden], rng),
            bz: init_tensor(&[hidden], rng),
            wr: init_tensor(&[in_dim, hidden], rng),
            ur: init_tensor(&[hidden, hidden], rng),
            br: init_tensor(&[hidden], rng),
            wh: init_tensor(&[in_dim, hidden], rng),
            uh: init_tensor(&[hidden, hidden], rng),
            bh: init_tensor(&[hidden], rng),
        }
    }

    fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.wz, &self.uz, &self.bz, &self.wr, &self.ur, &self.br, &self.wh, &self.uh,
            &self.bh,
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.wz, &mut self.uz, &mut self.bz, &mut self.wr, &mut self.ur, &mut self.br,
            &mut self.wh, &mut self.uh, &mut self.bh,
        ]
    }
}

/// All learnable weights of one encoder-decoder network.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub cfg: ModelConfig,
    pub src_embed: Tensor,
    pub tgt_embed: Tensor,
    pub enc_fwd: GruParams,
    pub enc_bwd: GruParams,
    pub dec: GruParams,
    pub attn_w: Tensor,
    pub attn_u: Tensor,
    pub attn_b: Tensor,
    pub attn_v: Tensor,
    pub init_w: Tensor,
    pub init_b: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

impl ModelParams {
    /// Seeded uniform initialization in [-0.08, 0.08]. Same config and seed
    /// always produce identical parameters.
    pub fn init(cfg: ModelConfig, rng: &mut RngHandle) -> Result<Self> {
        cfg.validate()?;
        let (e, h, a) = (cfg.embed_dim, cfg.hidden_dim, cfg.attn_dim);
        Ok(ModelParams {
            src_embed: init_tensor(&[cfg.src_vocab, e], rng),
            tgt_embed: init_tensor(&[cfg.tgt_vocab, e], rng),
            enc_fwd: GruParams::init(e, h, rng),
            enc_bwd: GruParams::init(e, h, rng),
            dec: GruParams::init(e + 2 * h, h, rng),
            attn_w: init_tensor(&[h, a], rng),
            attn_u: init_tensor(&[2 * h, a], rng),
            attn_b: init_tensor(&[a], rng),
            attn_v: init_tensor(&[a], rng),
            init_w: init_tensor(&[2 * h, h], rng),
            init_b: init_tensor(&[h], rng),
            out_w: init_tensor(&[h + 2 * h + e, cfg.tgt_vocab], rng),
            out_b: init_tensor(&[cfg.tgt_vocab], rng),
            cfg,
        })
    }

    /// Parameter tensors in the declared (checkpoint) order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.src_embed, &self.tgt_embed];
        out.extend(self.enc_fwd.tensors());
        out.extend(self.enc_bwd.tensors());
        out.extend(self.dec.tensors());
        out.extend([
            &self.attn_w, &self.attn_u, &self.attn_b, &self.attn_v, &self.init_w, &self.init_b,
            &self.out_w, &self.out_b,
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.src_embed, &mut self.tgt_embed];
        out.extend(self.enc_fwd.tensors_mut());
        out.extend(self.enc_bwd.tensors_mut());
        out.extend(self.dec.tensors_mut());
        out.extend([
            &mut self.attn_w,
            &mut self.attn_u,
            &mut self.attn_b,
            &mut self.attn_v,
            &mut self.init_w,
            &mut self.init_b,
            &mut self.out_w,
            &mut self.out_b,
        ]);
        out
    }

    pub fn n_tensors(&self) -> usize {
        2 + 9 * 3 + 8
    }

    /// Register every parameter on a tape. `trainable` decides whether they
    /// are gradient leaves or constants.
    pub fn vars(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        let mut reg = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let gru = |reg: &mut dyn FnMut(&Tensor) -> Var, g: &GruParams| GruVars {
            wz: reg(&g.wz),
            uz: reg(&g.uz),
            bz: reg(&g.bz),
            wr: reg(&g.wr),
            ur: reg(&g.ur),
            br: reg(&g.br),
            wh: reg(&g.wh),
            uh: reg(&g.uh),
            bh: reg(&g.bh),
        };
        let src_embed = reg(&self.src_embed);
        let tgt_embed = reg(&self.tgt_embed);
        let enc_fwd = gru(&mut reg, &self.enc_fwd);
        let enc_bwd = gru(&mut reg, &self.enc_bwd);
        let dec = gru(&mut reg, &self.dec);
        ModelVars {
            cfg: self.cfg.clone(),
            src_embed,
            tgt_embed,
            enc_fwd,
            enc_bwd,
            dec,
            attn_w: reg(&self.attn_w),
            attn_u: reg(&self.attn_u),
            attn_b: reg(&self.attn_b),
            attn_v: reg(&self.attn_v),
            init_w: reg(&self.init_w),
            init_b: reg(&self.init_b),
            out_w: reg(&self.out_w),
            out_b: reg(&self.out_b),
        }
    }
}

#[derive(Clone, Copy)]
pub struct GruVars {
    pub wz: Var,
    pub uz: Var,
    pub bz: Var,
    pub wr: Var,
    pub ur: Var,
    pub br: Var,
    pub wh: Var,
    pub uh: Var,
    pub bh: Var,
}

impl GruVars {
    fn list(&self) -> [Var; 9] {
        [
            self.wz, self.uz, self.bz, self.wr, self.ur, self.br, self.wh, self.uh, self.bh,
        ]
    }
}

/// Tape handles for one injected parameter set.
#[derive(Clone)]
pub struct ModelVars {
    pub cfg: ModelConfig,
    pub src_embed: Var,
    pub tgt_embed: Var,
    pub enc_fwd: GruVars,
    pub enc_bwd: GruVars,
    pub dec: GruVars,
    pub attn_w: Var,
    pub attn_u: Var,
    pub attn_b: Var,
    pub attn_v: Var,
    pub init_w: Var,
    pub init_b: Var,
    pub out_w: Var,
    pub out_b: Var,
}

impl ModelVars {
    /// Vars in the same canonical order as `ModelParams::tensors`.
    pub fn list(&self) -> Vec<Var> {
        let mut out = vec![self.src_embed, self.tgt_embed];
        out.extend(self.enc_fwd.list());
        out.extend(self.enc_bwd.list());
        out.extend(self.dec.list());
        out.extend([
            self.attn_w, self.attn_u, self.attn_b, self.attn_v, self.init_w, self.init_b,
            self.out_w, self.out_b,
        ]);
        out
    }
}

fn gru_step(tape: &mut Tape, g: &GruVars, x: Var, h: Var) -> Result<Var> {
    let affine = |tape: &mut Tape, w: Var, u: Var, b: Var| -> Result<Var> {
        let xw = tape.matmul(x, w)?;
        let hu = tape.matmul(h, u)?;
        let s = tape.add(xw, hu)?;
        tape.add(s, b)
    };
    let za = affine(tape, g.wz, g.uz, g.bz)?;
    let z = tape.sigmoid(za);
    let ra = affine(tape, g.wr, g.ur, g.br)?;
    let r = tape.sigmoid(ra);
    let rh = tape.mul(r, h)?;
    let xw = tape.matmul(x, g.wh)?;
    let ru = tape.matmul(rh, g.uh)?;
    let ha = tape.add(xw, ru)?;
    let hb = tape.add(ha, g.bh)?;
    let cand = tape.tanh(hb);
    // h' = (1 - z) ⊙ h + z ⊙ cand
    let neg_z = tape.scale(z, -1.0);
    let one_minus_z = tape.add_const(neg_z, 1.0);
    let keep = tape.mul(one_minus_z, h)?;
    let update = tape.mul(z, cand)?;
    tape.add(keep, update)
}

/// Per-source-position annotations plus the attention projection cache.
pub struct EncoderOutputs {
    /// [len, 2·hidden]: concatenated forward/backward states per position.
    pub annotations: Var,
    /// [len, attn]: annotations projected for the attention scorer.
    ann_proj: Var,
    pub len: usize,
}

/// Embed source tokens and run both GRU directions.
pub fn encode(tape: &mut Tape, mv: &ModelVars, x: &[u32]) -> Result<EncoderOutputs> {
    if x.is_empty() {
        return Err(GgdError::Input("cannot encode an empty sequence".into()));
    }
    for &id in x {
        if id as usize >= mv.cfg.src_vocab {
            return Err(GgdError::Input(format!(
                "source id {id} outside vocabulary of size {}",
                mv.cfg.src_vocab
            )));
        }
    }
    let embeds: Vec<Var> = x
        .iter()
        .map(|&id| {
            let one_hot = tape.constant(Tensor::one_hot(id as usize, mv.cfg.src_vocab));
            tape.matmul(one_hot, mv.src_embed)
        })
        .collect::<Result<_>>()?;

    let h0 = tape.constant(Tensor::zeros(&[mv.cfg.hidden_dim]));
    let mut fwd = Vec::with_capacity(x.len());
    let mut h = h0;
    for &e in &embeds {
        h = gru_step(tape, &mv.enc_fwd, e, h)?;
        fwd.push(h);
    }
    let mut bwd = vec![h0; x.len()];
    let mut hb = h0;
    for (i, &e) in embeds.iter().enumerate().rev() {
        hb = gru_step(tape, &mv.enc_bwd, e, hb)?;
        bwd[i] = hb;
    }
    let rows: Vec<Var> = fwd
        .iter()
        .zip(&bwd)
        .map(|(&f, &b)| tape.concat(&[f, b]))
        .collect::<Result<_>>()?;
    let annotations = tape.stack_rows(&rows)?;
    let ann_proj = tape.matmul(annotations, mv.attn_u)?;
    Ok(EncoderOutputs { annotations, ann_proj, len: x.len() })
}

/// Decoder state between steps.
#[derive(Clone, Copy)]
pub struct DecoderState {
    pub hidden: Var,
    pub prev_embed: Option<Var>,
    pub context: Option<Var>,
}

/// Initial decoder state: an affine map of the mean annotation.
pub fn init_state(tape: &mut Tape, mv: &ModelVars, enc: &EncoderOutputs) -> Result<DecoderState> {
    let w = 1.0 / enc.len as f64;
    let weights = tape.constant(Tensor::vector(vec![w; enc.len]));
    let mean = tape.matmul(weights, enc.annotations)?;
    let mw = tape.matmul(mean, mv.init_w)?;
    let mb = tape.add(mw, mv.init_b)?;
    let hidden = tape.tanh(mb);
    Ok(DecoderState { hidden, prev_embed: None, context: None })
}

/// Previous-token input to a decoder step: a hard word id or a distribution
/// over the vocabulary living on the tape.
#[derive(Clone, Copy)]
pub enum TokenInput {
    Hard(u32),
    Dist(Var),
}

fn token_embedding(tape: &mut Tape, mv: &ModelVars, tok: TokenInput) -> Result<Var> {
    let dist = match tok {
        TokenInput::Hard(id) => {
            if id as usize >= mv.cfg.tgt_vocab {
                return Err(GgdError::Input(format!(
                    "target id {id} outside vocabulary of size {}",
                    mv.cfg.tgt_vocab
                )));
            }
            tape.constant(Tensor::one_hot(id as usize, mv.cfg.tgt_vocab))
        }
        TokenInput::Dist(v) => {
            let val = tape.value(v);
            if val.rank() != 1 || val.numel() != mv.cfg.tgt_vocab {
                return Err(GgdError::Contract(format!(
                    "token distribution of shape {:?}, vocab {}",
                    val.shape(),
                    mv.cfg.tgt_vocab
                )));
            }
            v
        }
    };
    tape.matmul(dist, mv.tgt_embed)
}

fn attention(
    tape: &mut Tape,
    mv: &ModelVars,
    hidden: Var,
    enc: &EncoderOutputs,
) -> Result<(Var, Var)> {
    let zw = tape.matmul(hidden, mv.attn_w)?;
    let zwb = tape.add(zw, mv.attn_b)?;
    let mut scored = Vec::with_capacity(enc.len);
    for i in 0..enc.len {
        let proj = tape.row(enc.ann_proj, i)?;
        let pre = tape.add(zwb, proj)?;
        scored.push(tape.tanh(pre));
    }
    let stacked = tape.stack_rows(&scored)?;
    let scores = tape.matmul(stacked, mv.attn_v)?;
    let alpha = tape.softmax(scores)?;
    let context = tape.matmul(alpha, enc.annotations)?;
    Ok((context, alpha))
}

/// One decoder step: attention context from the previous hidden state, GRU
/// update on [prev embedding; context], logits from [hidden; context;
/// prev embedding].
pub fn decoder_step(
    tape: &mut Tape,
    mv: &ModelVars,
    state: &DecoderState,
    prev: TokenInput,
    enc: &EncoderOutputs,
) -> Result<(DecoderState, Var)> {
    let e_prev = token_embedding(tape, mv, prev)?;
    let (context, _alpha) = attention(tape, mv, state.hidden, enc)?;
    let gru_in = tape.concat(&[e_prev, context])?;
    let hidden = gru_step(tape, &mv.dec, gru_in, state.hidden)?;
    let out_in = tape.concat(&[hidden, context, e_prev])?;
    let proj = tape.matmul(out_in, mv.out_w)?;
    let logits = tape.add(proj, mv.out_b)?;
    Ok((
        DecoderState { hidden, prev_embed: Some(e_prev), context: Some(context) },
        logits,
    ))
}

/// Teacher-forced log-probability of a token sequence, with the conditioning
/// inputs given as `TokenInput`s so relaxed tokens can flow gradients both
/// into the selection inner products and into the next-step embeddings.
/// Scoring starts from the end-of-sentence token as the first input.
pub fn taped_log_prob_tokens(
    tape: &mut Tape,
    mv: &ModelVars,
    x: &[u32],
    tokens: &[TokenInput],
) -> Result<Var> {
    let enc = encode(tape, mv, x)?;
    taped_log_prob_with_enc(tape, mv, &enc, tokens)
}

/// Same as [`taped_log_prob_tokens`] but reusing an already-encoded source.
pub fn taped_log_prob_with_enc(
    tape: &mut Tape,
    mv: &ModelVars,
    enc: &EncoderOutputs,
    tokens: &[TokenInput],
) -> Result<Var> {
    if tokens.is_empty() {
        return Err(GgdError::Input("cannot score an empty sequence".into()));
    }
    let mut state = init_state(tape, mv, enc)?;
    let mut prev = TokenInput::Hard(mv.cfg.eos);
    let mut step_scores = Vec::with_capacity(tokens.len());
    for &tok in tokens {
        let (next, logits) = decoder_step(tape, mv, &state, prev, enc)?;
        let ls = tape.log_softmax(logits)?;
        let score_vec = match tok {
            TokenInput::Hard(id) => {
                if id as usize >= mv.cfg.tgt_vocab {
                    return Err(GgdError::Input(format!(
                        "target id {id} outside vocabulary of size {}",
                        mv.cfg.tgt_vocab
                    )));
                }
                tape.constant(Tensor::one_hot(id as usize, mv.cfg.tgt_vocab))
            }
            TokenInput::Dist(v) => v,
        };
        step_scores.push(tape.dot(ls, score_vec)?);
        state = next;
        prev = tok;
    }
    tape.sum_scalars(&step_scores)
}

/// Log-probability of a hard target sequence given a source sequence.
/// The target must end with the end-of-sentence token.
pub fn log_prob(params: &ModelParams, x: &[u32], y: &[u32]) -> Result<f64> {
    if y.last() != Some(&params.cfg.eos) {
        return Err(GgdError::Input(
            "target sequence does not end with the end-of-sentence token".into(),
        ));
    }
    prefix_log_prob(params, x, y)
}

/// Log-probability of an arbitrary (possibly unterminated) token sequence,
/// for scoring decodes that hit the length cap before emitting EOS.
pub fn prefix_log_prob(params: &ModelParams, x: &[u32], y: &[u32]) -> Result<f64> {
    let mut tape = Tape::new();
    let mv = params.vars(&mut tape, false);
    let tokens: Vec<TokenInput> = y.iter().map(|&id| TokenInput::Hard(id)).collect();
    let lp = taped_log_prob_tokens(&mut tape, &mv, x, &tokens)?;
    tape.value(lp).as_scalar()
}
