use serde::{Deserialize, Serialize};

use crate::balance::{balance_loss, total_loss, BalanceLossKind, LossSchedule};
use crate::corpus::{gold_sequences, Dialogue};
use crate::error::{Error, Result};
use crate::eval::{evaluate, StateSequence, SCE_EPSILON};
use crate::model::{BatchNoise, DsbertModel, EncodedDialogue, ModelConfig, TauSchedule};
use crate::rng::RngState;
use crate::tensor::{Adam, AdamConfig, Tape};
use crate::text::{TfIdfModel, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Dialogues per optimizer step.
    pub batch_size: usize,
    pub loss: LossSchedule,
    pub adam: AdamConfig,
    pub tau_start: f64,
    pub tau_end: f64,
    /// Keywords are prepended to encoder input for this many leading epochs.
    pub keyword_epochs: usize,
    pub keyword_k: usize,
    pub seed: u64,
    /// Compute SED/SCE every this many epochs (and always on the last one).
    pub eval_every: usize,
    /// `None` means true states + 2 when labels exist, else 8.
    pub n_state: Option<usize>,
    /// `None` means the longest dialogue in the corpus.
    pub max_pairs: Option<usize>,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub hard_gumbel: bool,
    pub zero_init_heads: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            loss: LossSchedule::default(),
            adam: AdamConfig::default(),
            tau_start: 1.0,
            tau_end: 0.5,
            keyword_epochs: 3,
            keyword_k: 3,
            seed: 0,
            eval_every: 1,
            n_state: None,
            max_pairs: None,
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            d_ff: 256,
            max_seq_len: 256,
            hard_gumbel: true,
            zero_init_heads: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Parameter("eval_every must be at least 1".into()));
        }
        if !(self.loss.lambda >= 0.0) {
            return Err(Error::Parameter(format!("lambda must be >= 0, got {}", self.loss.lambda)));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Parameter(format!("learning rate must be > 0, got {}", self.adam.lr)));
        }
        Ok(())
    }
}

/// One record of the per-epoch training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_kind: BalanceLossKind,
    pub tau: f64,
    pub mlm: f64,
    pub balance: f64,
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sed: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sce: Option<f64>,
    /// Fraction of pairs assigned to each state by deterministic inference.
    pub usage: Vec<f64>,
}

pub fn write_log(log: &[EpochLog]) -> String {
    let mut out = String::new();
    for rec in log {
        out.push_str(&serde_json::to_string(rec).expect("json encoding"));
        out.push('\n');
    }
    out
}

pub struct TrainOutcome {
    pub model: DsbertModel,
    pub best_model: DsbertModel,
    /// `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    pub log: Vec<EpochLog>,
}

/// Model configuration implied by `config` for this corpus.
pub fn model_config(corpus: &[Dialogue], config: &TrainConfig, vocab_size: usize) -> ModelConfig {
    let longest = corpus.iter().map(Dialogue::len).max().unwrap_or(1);
    let n_state = config.n_state.unwrap_or_else(|| {
        gold_sequences(corpus)
            .and_then(|g| g.iter().flatten().max().map(|m| m + 3))
            .unwrap_or(8)
    });
    ModelConfig {
        n_state,
        d_model: config.d_model,
        n_layers: config.n_layers,
        n_heads: config.n_heads,
        d_ff: config.d_ff,
        max_seq_len: config.max_seq_len,
        max_pairs: config.max_pairs.unwrap_or(longest),
        vocab_size,
        tau: TauSchedule::linear(config.tau_start, config.tau_end, config.epochs),
        lambda: config.loss.lambda,
        hard_gumbel: config.hard_gumbel,
        zero_init_heads: config.zero_init_heads,
    }
}

/// Build the vocabulary and an initialized model for `corpus`.
pub fn init_model(corpus: &[Dialogue], config: &TrainConfig, rng: &mut RngState) -> Result<DsbertModel> {
    let longest = corpus.iter().map(Dialogue::len).max().unwrap_or(1);
    let max_pairs = config.max_pairs.unwrap_or(longest);
    let texts: Vec<String> = corpus.iter().flat_map(|d| d.pairs.iter().map(|p| p.text())).collect();
    let vocab = Vocabulary::build(texts.iter().map(String::as_str), max_pairs);
    let mc = model_config(corpus, config, vocab.len());
    DsbertModel::new(mc, vocab, rng)
}

fn keyword_lists(corpus: &[Dialogue], k: usize) -> Result<Vec<Vec<Vec<String>>>> {
    let docs: Vec<String> = corpus.iter().flat_map(|d| d.pairs.iter().map(|p| p.text())).collect();
    let tfidf = TfIdfModel::fit(&docs)?;
    corpus
        .iter()
        .map(|d| d.pairs.iter().map(|p| tfidf.extract_keywords(&p.text(), k)).collect())
        .collect()
}

fn usage(states: &[Vec<usize>], n_state: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_state];
    let mut total = 0;
    for &s in states.iter().flatten() {
        counts[s] += 1;
        total += 1;
    }
    counts
        .into_iter()
        .map(|c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
        .collect()
}

/// Train on `corpus`. Deterministic for a given `config.seed`.
pub fn train(corpus: &[Dialogue], config: &TrainConfig) -> Result<TrainOutcome> {
    if corpus.is_empty() {
        return Err(Error::Input("cannot train on an empty corpus".into()));
    }
    config.validate()?;
    for d in corpus {
        d.validate()?;
    }
    let mut rng = RngState::new(config.seed);
    let mut model = init_model(corpus, config, &mut rng)?;
    let mut best_model = model.clone();
    let mut best_epoch = None;
    let mut log = Vec::new();
    if config.epochs == 0 {
        return Ok(TrainOutcome { model, best_model, best_epoch, log });
    }

    let plain: Vec<EncodedDialogue> = corpus
        .iter()
        .map(|d| model.build_input(d, None))
        .collect::<Result<_>>()?;
    let augmented: Option<Vec<EncodedDialogue>> = if config.keyword_epochs > 0 && config.keyword_k > 0 {
        let kws = keyword_lists(corpus, config.keyword_k)?;
        Some(
            corpus
                .iter()
                .zip(&kws)
                .map(|(d, kw)| model.build_input(d, Some(kw)))
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };
    let gold = gold_sequences(corpus);
    let n_true = gold
        .as_ref()
        .and_then(|g| g.iter().flatten().max().map(|m| m + 1))
        .unwrap_or(0);
    let n_state = model.config().n_state;

    let mut adam = Adam::new(config.adam);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut best_score = f64::INFINITY;
    for epoch in 0..config.epochs {
        let kind = config.loss.active(epoch);
        let tau = model.config().tau.at(epoch);
        let inputs = match &augmented {
            Some(aug) if epoch < config.keyword_epochs => aug,
            _ => &plain,
        };
        rng.shuffle(&mut order);
        let (mut mlm_sum, mut bal_sum, mut tot_sum) = (0.0, 0.0, 0.0);
        let mut steps = 0;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<EncodedDialogue> = chunk.iter().map(|&i| inputs[i].clone()).collect();
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let out = model.forward(&mut tape, &bound, &batch, tau, &mut BatchNoise::Sample(&mut rng))?;
            let bal = balance_loss(&mut tape, kind, out.p_batch)?;
            let total = total_loss(&mut tape, out.mlm, bal, config.loss.lambda)?;
            let mlm_v = tape.value(out.mlm).item();
            let bal_v = bal.map_or(0.0, |b| tape.value(b).item());
            let tot_v = tape.value(total).item();
            if !tot_v.is_finite() {
                let ids: Vec<&str> = chunk.iter().map(|&i| corpus[i].id.as_str()).collect();
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch} step {step}: mlm {mlm_v}, balance {bal_v}, \
                     total {tot_v}, tau {tau}, dialogues {ids:?}"
                )));
            }
            let mut grads = tape.backward(total)?;
            model.store_gradients(&bound, &mut grads)?;
            adam.step(model.params_mut())?;
            mlm_sum += mlm_v;
            bal_sum += bal_v;
            tot_sum += tot_v;
            steps += 1;
        }

        let predicted: Vec<Vec<usize>> = plain
            .iter()
            .map(|e| model.assign(e).map(|a| a.states))
            .collect::<Result<_>>()?;
        let evaluated = match &gold {
            Some(g) if epoch % config.eval_every == 0 || epoch + 1 == config.epochs => {
                Some(evaluate(g, &predicted, n_true, n_state, SCE_EPSILON)?)
            }
            _ => None,
        };
        let steps = steps as f64;
        let rec = EpochLog {
            epoch,
            loss_kind: kind,
            tau,
            mlm: mlm_sum / steps,
            balance: bal_sum / steps,
            total: tot_sum / steps,
            sed: evaluated.as_ref().map(|e| e.sed),
            sce: evaluated.as_ref().map(|e| e.sce),
            usage: usage(&predicted, n_state),
        };
        let score = match (&gold, rec.sed) {
            (Some(_), Some(s)) => Some(s),
            (Some(_), None) => None,
            (None, _) => Some(rec.total),
        };
        if let Some(s) = score {
            if s < best_score || best_epoch.is_none() {
                best_score = s;
                best_epoch = Some(epoch);
                best_model = model.clone();
            }
        }
        log.push(rec);
    }
    Ok(TrainOutcome { model, best_model, best_epoch, log })
}

/// Deterministic state assignment for every dialogue. A dialogue the model
/// cannot hold yields an error without affecting the others.
pub fn predict_states(model: &DsbertModel, corpus: &[Dialogue]) -> Vec<Result<StateSequence>> {
    corpus
        .iter()
        .map(|d| {
            let enc = model.build_input(d, None)?;
            Ok(StateSequence {
                dialogue_id: d.id.clone(),
                states: model.assign(&enc)?.states,
            })
        })
        .collect()
}
