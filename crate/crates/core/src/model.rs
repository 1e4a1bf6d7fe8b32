//! The latent-state encoder–decoder.
//!
//! The encoder reads a whole dialogue laid out as
//! `[CLS] s1 u1 [SEP] [STATE_0] s2 u2 [SEP] ... [STATE_{t-2}] st ut [SEP]`
//! and projects the output at each pair's leading special token onto
//! `n_state` logits. The decoder sees only those logits, copied across the
//! pair's span and discretized with Gumbel-Softmax, plus position
//! embeddings, and must reconstruct every token of the dialogue.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Dialogue;
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{
    gumbel_softmax, kernels, linear, multi_head_self_attention, AttentionParams, GumbelNoise,
    Tape, Tensor, Var,
};
use crate::text::{tokenize, Vocabulary};

pub const CHECKPOINT_FORMAT: &str = "dsbert-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

const LN_EPS: f64 = 1e-5;

/// Linear decay of the Gumbel temperature, floored at `end`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_per_epoch: f64,
}

impl TauSchedule {
    /// Anneal from `start` to `end` over `epochs` epochs.
    pub fn linear(start: f64, end: f64, epochs: usize) -> Self {
        let span = epochs.saturating_sub(1).max(1) as f64;
        Self {
            start,
            end,
            decay_per_epoch: (start - end) / span,
        }
    }

    pub fn at(&self, epoch: usize) -> f64 {
        (self.start - self.decay_per_epoch * epoch as f64).max(self.end)
    }
}

impl Default for TauSchedule {
    fn default() -> Self {
        Self::linear(1.0, 0.5, 30)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_state: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub max_pairs: usize,
    pub vocab_size: usize,
    pub tau: TauSchedule,
    pub lambda: f64,
    /// Straight-through one-hot decoder input (soft Gumbel-Softmax if false).
    pub hard_gumbel: bool,
    /// Start the state projection and the vocabulary head at exactly zero.
    pub zero_init_heads: bool,
}

impl ModelConfig {
    pub fn new(n_state: usize, vocab_size: usize, max_pairs: usize) -> Self {
        Self {
            n_state,
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            d_ff: 256,
            max_seq_len: 256,
            max_pairs,
            vocab_size,
            tau: TauSchedule::default(),
            lambda: 1.0,
            hard_gumbel: true,
            zero_init_heads: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.n_state < 2 {
            return bad(format!("n_state must be >= 2, got {}", self.n_state));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.max_pairs == 0 || self.max_seq_len == 0 || self.d_ff == 0 {
            return bad("max_pairs, max_seq_len and d_ff must be positive".into());
        }
        if !(self.tau.end > 0.0) || self.tau.start < self.tau.end {
            return bad(format!("invalid temperature schedule {:?}", self.tau));
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        Ok(())
    }
}

/// A dialogue laid out for the encoder, plus the decoder's reconstruction
/// targets. Without keyword augmentation the two layouts coincide.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedDialogue {
    pub token_ids: Vec<usize>,
    /// Index of `[CLS]` / `[STATE_i]` for each pair.
    pub special_positions: Vec<usize>,
    /// Encoder span of each pair: special token, utterance tokens, `[SEP]`.
    pub pair_lengths: Vec<usize>,
    pub attention_mask: Vec<bool>,
    /// Token ids the decoder must reproduce (never keyword-augmented).
    pub target_ids: Vec<usize>,
    pub target_pair_lengths: Vec<usize>,
}

impl EncodedDialogue {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn n_pairs(&self) -> usize {
        self.special_positions.len()
    }

    /// For every decoder position, the pair it belongs to.
    pub fn target_pair_index(&self) -> Vec<usize> {
        self.target_pair_lengths
            .iter()
            .enumerate()
            .flat_map(|(i, &l)| std::iter::repeat(i).take(l))
            .collect()
    }
}

fn pair_span(
    vocab: &Vocabulary,
    special: usize,
    keywords: &[String],
    text: &str,
) -> Vec<usize> {
    let mut ids = Vec::with_capacity(keywords.len() + 16);
    ids.push(special);
    ids.extend(keywords.iter().map(|k| vocab.id_or_unk(k)));
    ids.extend(tokenize(text).iter().map(|t| vocab.id_or_unk(t)));
    ids.push(vocab.sep());
    ids
}

/// Lay out `dialogue` for the encoder. `keywords`, when given, holds one
/// list per pair; they are placed right after that pair's special token.
pub fn build_input(
    dialogue: &Dialogue,
    vocab: &Vocabulary,
    config: &ModelConfig,
    keywords: Option<&[Vec<String>]>,
) -> Result<EncodedDialogue> {
    let t = dialogue.pairs.len();
    if t == 0 {
        return Err(Error::Input(format!("dialogue {:?} is empty", dialogue.id)));
    }
    if t > config.max_pairs || t - 1 > vocab.n_state_tokens() {
        return Err(Error::Capacity(format!(
            "dialogue {:?} has {t} pairs; the model holds at most {}",
            dialogue.id,
            config.max_pairs.min(vocab.n_state_tokens() + 1)
        )));
    }
    if let Some(kw) = keywords {
        if kw.len() != t {
            return Err(Error::Input(format!(
                "{} keyword lists for {t} pairs",
                kw.len()
            )));
        }
    }
    let mut enc = EncodedDialogue {
        token_ids: Vec::new(),
        special_positions: Vec::with_capacity(t),
        pair_lengths: Vec::with_capacity(t),
        attention_mask: Vec::new(),
        target_ids: Vec::new(),
        target_pair_lengths: Vec::with_capacity(t),
    };
    for (i, pair) in dialogue.pairs.iter().enumerate() {
        let special = if i == 0 {
            vocab.cls()
        } else {
            vocab.state(i - 1).expect("checked against n_state_tokens")
        };
        let text = pair.text();
        let no_kw: &[String] = &[];
        let kw = keywords.map_or(no_kw, |k| k[i].as_slice());
        let span = pair_span(vocab, special, kw, &text);
        let target = if kw.is_empty() {
            span.clone()
        } else {
            pair_span(vocab, special, no_kw, &text)
        };
        enc.special_positions.push(enc.token_ids.len());
        enc.pair_lengths.push(span.len());
        enc.token_ids.extend(span);
        enc.target_pair_lengths.push(target.len());
        enc.target_ids.extend(target);
    }
    if enc.token_ids.len() > config.max_seq_len {
        return Err(Error::Capacity(format!(
            "dialogue {:?} encodes to {} tokens; max_seq_len is {}",
            dialogue.id,
            enc.token_ids.len(),
            config.max_seq_len
        )));
    }
    enc.attention_mask = vec![true; enc.token_ids.len()];
    Ok(enc)
}

/// Per-pair state distribution and hard assignment for one dialogue.
#[derive(Clone, Debug, PartialEq)]
pub struct StateAssignment {
    /// `t × n_state` row-stochastic.
    pub probs: Vec<Vec<f64>>,
    /// Row argmax of `probs`, lowest index on ties.
    pub states: Vec<usize>,
    /// Pre-softmax logits at the special positions.
    pub phi: Vec<Vec<f64>>,
}

/// Tape handles for one dialogue's encoder pass.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    /// `t × n_state` logits at the special positions.
    pub phi_special: Var,
    /// Row softmax of `phi_special`.
    pub probs: Var,
}

/// Result of [`DsbertModel::forward`] over a batch of dialogues.
#[derive(Debug)]
pub struct ForwardOutput {
    /// `U × n_state`, rows concatenated in batch order.
    pub p_batch: Var,
    pub states: Vec<Vec<usize>>,
    pub mlm: Var,
}

/// Parameters bound as leaves on a tape for one step.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DsbertModel {
    config: ModelConfig,
    vocab: Vocabulary,
    names: Vec<String>,
    params: Vec<Tensor>,
    index: HashMap<String, usize>,
}

struct Init<'a> {
    names: Vec<String>,
    params: Vec<Tensor>,
    rng: &'a mut RngState,
}

impl Init<'_> {
    fn push(&mut self, name: String, rows: usize, cols: usize, data: Vec<f64>) {
        self.names.push(name);
        self.params
            .push(Tensor::matrix(rows, cols, data).expect("sized by construction"));
    }

    fn normal(&mut self, name: String, rows: usize, cols: usize, std: f64) {
        let data = (0..rows * cols).map(|_| self.rng.normal() * std).collect();
        self.push(name, rows, cols, data);
    }

    fn glorot(&mut self, name: String, rows: usize, cols: usize) {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| (2.0 * self.rng.uniform() - 1.0) * a)
            .collect();
        self.push(name, rows, cols, data);
    }

    fn fill(&mut self, name: String, rows: usize, cols: usize, v: f64) {
        self.push(name, rows, cols, vec![v; rows * cols]);
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, zero: bool) {
        if zero {
            self.fill(format!("{prefix}.w"), fan_in, fan_out, 0.0);
        } else {
            self.glorot(format!("{prefix}.w"), fan_in, fan_out);
        }
        self.fill(format!("{prefix}.b"), 1, fan_out, 0.0);
    }

    fn layer_norm(&mut self, prefix: &str, d: usize) {
        self.fill(format!("{prefix}.g"), 1, d, 1.0);
        self.fill(format!("{prefix}.b"), 1, d, 0.0);
    }

    fn block(&mut self, prefix: &str, d: usize, d_ff: usize) {
        for p in ["q", "k", "v", "o"] {
            self.linear(&format!("{prefix}.attn.{p}"), d, d, false);
        }
        self.layer_norm(&format!("{prefix}.ln1"), d);
        self.linear(&format!("{prefix}.ff1"), d, d_ff, false);
        self.linear(&format!("{prefix}.ff2"), d_ff, d, false);
        self.layer_norm(&format!("{prefix}.ln2"), d);
    }
}

impl DsbertModel {
    pub fn new(config: ModelConfig, vocab: Vocabulary, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        if config.vocab_size != vocab.len() {
            return Err(Error::Parameter(format!(
                "config vocab_size {} but vocabulary has {} tokens",
                config.vocab_size,
                vocab.len()
            )));
        }
        let (d, v, n) = (config.d_model, config.vocab_size, config.n_state);
        let mut init = Init {
            names: Vec::new(),
            params: Vec::new(),
            rng,
        };
        init.normal("enc.tok_emb".into(), v, d, 0.1);
        init.normal("enc.pos_emb".into(), config.max_seq_len, d, 0.1);
        init.layer_norm("enc.ln_emb", d);
        for l in 0..config.n_layers {
            init.block(&format!("enc.l{l}"), d, config.d_ff);
        }
        init.linear("enc.state", d, n, config.zero_init_heads);
        init.linear("dec.state_emb", n, d, false);
        init.normal("dec.pos_emb".into(), config.max_seq_len, d, 0.1);
        init.layer_norm("dec.ln_emb", d);
        for l in 0..config.n_layers {
            init.block(&format!("dec.l{l}"), d, config.d_ff);
        }
        init.linear("dec.out", d, v, config.zero_init_heads);
        let Init { names, params, .. } = init;
        Self::from_parts(config, vocab, names, params)
    }

    fn from_parts(
        config: ModelConfig,
        vocab: Vocabulary,
        names: Vec<String>,
        params: Vec<Tensor>,
    ) -> Result<Self> {
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Ok(Self {
            config,
            vocab,
            names,
            params,
            index,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn build_input(
        &self,
        dialogue: &Dialogue,
        keywords: Option<&[Vec<String>]>,
    ) -> Result<EncodedDialogue> {
        build_input(dialogue, &self.vocab, &self.config, keywords)
    }

    /// Register every parameter on `tape`. With `trainable`, gradients are
    /// tracked for all of them.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.clone().with_requires_grad(trainable)))
            .collect();
        Bound { vars }
    }

    /// Copy gradients for the bound parameters into the parameter tensors.
    pub fn store_gradients(&mut self, bound: &Bound, grads: &mut crate::tensor::Gradients) -> Result<()> {
        for (p, v) in self.params.iter_mut().zip(&bound.vars) {
            match grads.take(*v) {
                Some(g) => p.set_grad(g)?,
                None => p.set_grad(vec![0.0; p.numel()])?,
            }
        }
        Ok(())
    }

    fn var(&self, bound: &Bound, name: &str) -> Var {
        bound.vars[self.index[name]]
    }

    fn block(&self, tape: &mut Tape, bound: &Bound, prefix: &str, x: Var) -> Result<Var> {
        let v = |n: &str| self.var(bound, &format!("{prefix}.{n}"));
        let attn = AttentionParams {
            wq: v("attn.q.w"),
            bq: v("attn.q.b"),
            wk: v("attn.k.w"),
            bk: v("attn.k.b"),
            wv: v("attn.v.w"),
            bv: v("attn.v.b"),
            wo: v("attn.o.w"),
            bo: v("attn.o.b"),
        };
        let a = multi_head_self_attention(tape, x, &attn, self.config.n_heads)?;
        let h = tape.add(x, a)?;
        let h = tape.layer_norm(h, v("ln1.g"), v("ln1.b"), LN_EPS)?;
        let f = linear(tape, h, v("ff1.w"), v("ff1.b"))?;
        let f = tape.gelu(f);
        let f = linear(tape, f, v("ff2.w"), v("ff2.b"))?;
        let out = tape.add(h, f)?;
        tape.layer_norm(out, v("ln2.g"), v("ln2.b"), LN_EPS)
    }

    fn positions(&self, len: usize) -> Result<Vec<usize>> {
        if len > self.config.max_seq_len {
            return Err(Error::Capacity(format!(
                "sequence of {len} tokens exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        Ok((0..len).collect())
    }

    /// Encoder pass: special-position logits and their softmax.
    pub fn encode(&self, tape: &mut Tape, bound: &Bound, enc: &EncodedDialogue) -> Result<EncoderOutput> {
        if let Some(&bad) = enc.token_ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::Index(format!(
                "token id {bad} with vocabulary size {}",
                self.config.vocab_size
            )));
        }
        let pos = self.positions(enc.len())?;
        let tok = tape.embedding_lookup(self.var(bound, "enc.tok_emb"), &enc.token_ids)?;
        let pe = tape.embedding_lookup(self.var(bound, "enc.pos_emb"), &pos)?;
        let x = tape.add(tok, pe)?;
        let mut x = tape.layer_norm(
            x,
            self.var(bound, "enc.ln_emb.g"),
            self.var(bound, "enc.ln_emb.b"),
            LN_EPS,
        )?;
        for l in 0..self.config.n_layers {
            x = self.block(tape, bound, &format!("enc.l{l}"), x)?;
        }
        // Projecting only the special rows gives the same rows of Φ as
        // projecting all L positions and gathering afterwards.
        let specials = tape.gather_rows(x, &enc.special_positions)?;
        let phi_special = linear(
            tape,
            specials,
            self.var(bound, "enc.state.w"),
            self.var(bound, "enc.state.b"),
        )?;
        let probs = tape.softmax_rows(phi_special)?;
        Ok(EncoderOutput { phi_special, probs })
    }

    /// Copy each pair's logit row across every decoder position of that pair.
    pub fn expand_features(tape: &mut Tape, phi_special: Var, enc: &EncodedDialogue) -> Result<Var> {
        let t = tape.value(phi_special).rows();
        if t != enc.target_pair_lengths.len() {
            return Err(Error::Internal(format!(
                "{t} special rows for {} pair spans",
                enc.target_pair_lengths.len()
            )));
        }
        let index = enc.target_pair_index();
        if index.len() != enc.target_ids.len() {
            return Err(Error::Internal(format!(
                "pair spans cover {} positions but the target has {}",
                index.len(),
                enc.target_ids.len()
            )));
        }
        tape.gather_rows(phi_special, &index)
    }

    /// Expand the pair logits over every decoder position and discretize.
    pub fn discretize(
        &self,
        tape: &mut Tape,
        phi_special: Var,
        enc: &EncodedDialogue,
        tau: f64,
        noise: GumbelNoise<'_>,
    ) -> Result<Var> {
        let phi_tilde = Self::expand_features(tape, phi_special, enc)?;
        gumbel_softmax(tape, phi_tilde, tau, noise, self.config.hard_gumbel)
    }

    /// Decoder vocabulary logits from the discretized state features only.
    pub fn decoder_logits(&self, tape: &mut Tape, bound: &Bound, p_tilde: Var) -> Result<Var> {
        let len = tape.value(p_tilde).rows();
        let pos = self.positions(len)?;
        let e_tilde = linear(
            tape,
            p_tilde,
            self.var(bound, "dec.state_emb.w"),
            self.var(bound, "dec.state_emb.b"),
        )?;
        let pe = tape.embedding_lookup(self.var(bound, "dec.pos_emb"), &pos)?;
        let x = tape.add(e_tilde, pe)?;
        let mut x = tape.layer_norm(
            x,
            self.var(bound, "dec.ln_emb.g"),
            self.var(bound, "dec.ln_emb.b"),
            LN_EPS,
        )?;
        for l in 0..self.config.n_layers {
            x = self.block(tape, bound, &format!("dec.l{l}"), x)?;
        }
        linear(
            tape,
            x,
            self.var(bound, "dec.out.w"),
            self.var(bound, "dec.out.b"),
        )
    }

    /// Mean reconstruction cross-entropy over the dialogue's non-pad tokens.
    pub fn decode_and_mlm_loss(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        p_tilde: Var,
        enc: &EncodedDialogue,
    ) -> Result<Var> {
        let logits = self.decoder_logits(tape, bound, p_tilde)?;
        let pad = self.vocab.pad();
        let targets: Vec<Option<usize>> = enc
            .target_ids
            .iter()
            .map(|&id| (id != pad).then_some(id))
            .collect();
        tape.cross_entropy(logits, &targets)
    }

    /// Encode and reconstruct a batch. `noise` supplies Gumbel perturbations
    /// for the decoder (one draw per decoder position).
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &[EncodedDialogue],
        tau: f64,
        noise: &mut BatchNoise<'_>,
    ) -> Result<ForwardOutput> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let total_tokens: usize = batch.iter().map(|e| e.target_ids.len()).sum();
        let mut probs = Vec::with_capacity(batch.len());
        let mut states = Vec::with_capacity(batch.len());
        let mut mlm: Option<Var> = None;
        for (i, enc) in batch.iter().enumerate() {
            let out = self.encode(tape, bound, enc)?;
            let p = tape.value(out.probs);
            states.push((0..p.rows()).map(|r| kernels::argmax(p.row(r))).collect());
            probs.push(out.probs);
            let p_tilde = self.discretize(tape, out.phi_special, enc, tau, noise.for_item(i))?;
            let ce = self.decode_and_mlm_loss(tape, bound, p_tilde, enc)?;
            let weighted = tape.scale(ce, enc.target_ids.len() as f64 / total_tokens as f64);
            mlm = Some(match mlm {
                None => weighted,
                Some(acc) => tape.add(acc, weighted)?,
            });
        }
        let p_batch = if probs.len() == 1 {
            probs[0]
        } else {
            tape.concat_rows(&probs)?
        };
        Ok(ForwardOutput {
            p_batch,
            states,
            mlm: mlm.expect("non-empty batch"),
        })
    }

    /// Deterministic state assignment (no Gumbel noise).
    pub fn assign(&self, enc: &EncodedDialogue) -> Result<StateAssignment> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let out = self.encode(&mut tape, &bound, enc)?;
        let probs = tape.value(out.probs).to_rows();
        let phi = tape.value(out.phi_special).to_rows();
        let states = probs.iter().map(|r| kernels::argmax(r)).collect();
        Ok(StateAssignment { probs, states, phi })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            vocab: self.vocab.tokens().to_vec(),
            params: self
                .names
                .iter()
                .zip(&self.params)
                .map(|(name, t)| NamedTensor {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        ck.config.validate()?;
        let vocab = Vocabulary::from_tokens(ck.vocab)?;
        // Re-initialize to learn the expected layout, then overwrite.
        let template = DsbertModel::new(ck.config.clone(), vocab.clone(), &mut RngState::new(0))?;
        if template.names.len() != ck.params.len() {
            return Err(Error::Parse(format!(
                "checkpoint has {} tensors, expected {}",
                ck.params.len(),
                template.names.len()
            )));
        }
        let mut params = Vec::with_capacity(ck.params.len());
        for (expected, nt) in template.names.iter().zip(ck.params) {
            let want = template.param(expected).expect("template param").shape().to_vec();
            if &nt.name != expected || nt.shape != want {
                return Err(Error::Parse(format!(
                    "checkpoint tensor {} {:?} where {expected} {want:?} was expected",
                    nt.name, nt.shape
                )));
            }
            params.push(Tensor::new(nt.shape, nt.data)?);
        }
        Self::from_parts(ck.config, vocab, template.names, params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_string(&self.to_checkpoint()).expect("json encoding");
        std::fs::write(path.as_ref(), json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        let ck: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::Parse(format!("checkpoint: {e}")))?;
        Self::from_checkpoint(ck)
    }
}

/// Gumbel noise for a batch: sampled from one stream, or fixed per item
/// (used by gradient checks so repeated evaluations see the same draw).
pub enum BatchNoise<'a> {
    Sample(&'a mut RngState),
    Fixed(&'a [Tensor]),
    Off,
}

impl BatchNoise<'_> {
    fn for_item(&mut self, i: usize) -> GumbelNoise<'_> {
        match self {
            BatchNoise::Sample(rng) => GumbelNoise::Sample(rng),
            BatchNoise::Fixed(list) => GumbelNoise::Fixed(&list[i]),
            BatchNoise::Off => GumbelNoise::Off,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub vocab: Vec<String>,
    pub params: Vec<NamedTensor>,
}
