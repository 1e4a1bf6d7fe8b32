//! Reference structure learners: K-Means over tf-idf pair vectors, and an
//! HMM whose discrete observations are K-Means cluster ids.

pub mod hmm;
pub mod kmeans;

pub use hmm::{hmm_decode, hmm_fit, hmm_fit_from, Decoded, HmmFit, HmmModel};
pub use kmeans::{inertia, kmeans_assign, kmeans_fit, kmeans_fit_from, KMeansFit, KMeansModel};

use crate::corpus::Dialogue;
use crate::error::{Error, Result};
use crate::eval::StateSequence;
use crate::rng::RngState;
use crate::text::TfIdfModel;

pub const KMEANS_MAX_ITERS: usize = 300;
pub const HMM_MAX_ITERS: usize = 200;
pub const HMM_TOL: f64 = 1e-6;

/// One L2-normalized tf-idf row per utterance pair, dialogue by dialogue.
/// Pairs with no known tokens stay all-zero.
pub fn vectorize_pairs(corpus: &[Dialogue], tfidf: &TfIdfModel) -> Vec<Vec<f64>> {
    corpus
        .iter()
        .flat_map(|d| d.pairs.iter())
        .map(|p| {
            let mut v = tfidf.vector(&p.text());
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                v.iter_mut().for_each(|x| *x /= norm);
            }
            v
        })
        .collect()
}

/// Fit tf-idf on the pair texts of `corpus`.
pub fn fit_pair_tfidf(corpus: &[Dialogue]) -> Result<TfIdfModel> {
    let docs: Vec<String> = corpus.iter().flat_map(|d| d.pairs.iter().map(|p| p.text())).collect();
    TfIdfModel::fit(&docs)
}

fn split_by_dialogue(corpus: &[Dialogue], flat: &[usize]) -> Vec<StateSequence> {
    let mut out = Vec::with_capacity(corpus.len());
    let mut at = 0;
    for d in corpus {
        out.push(StateSequence {
            dialogue_id: d.id.clone(),
            states: flat[at..at + d.len()].to_vec(),
        });
        at += d.len();
    }
    out
}

/// Cluster every pair into `k` groups; the cluster id is the state.
pub fn kmeans_baseline(corpus: &[Dialogue], k: usize, seed: u64) -> Result<Vec<StateSequence>> {
    if corpus.is_empty() {
        return Err(Error::Input("empty corpus".into()));
    }
    let x = vectorize_pairs(corpus, &fit_pair_tfidf(corpus)?);
    let fit = kmeans_fit(&x, k, &mut RngState::new(seed), KMEANS_MAX_ITERS)?;
    Ok(split_by_dialogue(corpus, &fit.labels))
}

/// Quantize pairs into `n_symbols` K-Means clusters, fit an `n_hidden`-state
/// HMM on the symbol sequences, then Viterbi-decode each dialogue.
/// `n_symbols` is capped at the number of distinct pair vectors.
pub fn hmm_baseline(
    corpus: &[Dialogue],
    n_hidden: usize,
    n_symbols: usize,
    seed: u64,
) -> Result<Vec<StateSequence>> {
    if corpus.is_empty() {
        return Err(Error::Input("empty corpus".into()));
    }
    if n_symbols == 0 {
        return Err(Error::Parameter("n_symbols must be at least 1".into()));
    }
    let x = vectorize_pairs(corpus, &fit_pair_tfidf(corpus)?);
    let mut distinct: Vec<Vec<u64>> = x.iter().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
    distinct.sort();
    distinct.dedup();
    let mut rng = RngState::new(seed);
    let km = kmeans_fit(&x, n_symbols.min(distinct.len()), &mut rng, KMEANS_MAX_ITERS)?;
    let symbols = split_by_dialogue(corpus, &km.labels);
    let obs: Vec<Vec<usize>> = symbols.iter().map(|s| s.states.clone()).collect();
    let fit = hmm_fit(&obs, n_hidden, &mut rng, HMM_MAX_ITERS, HMM_TOL)?;
    Ok(symbols
        .into_iter()
        .map(|s| StateSequence {
            states: hmm_decode(&fit.model, &s.states).states,
            dialogue_id: s.dialogue_id,
        })
        .collect())
}
