use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;

const STOCHASTIC_TOL: f64 = 1e-9;

/// Discrete-emission hidden Markov model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HmmModel {
    pub init: Vec<f64>,
    pub trans: Vec<Vec<f64>>,
    pub emit: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HmmFit {
    pub model: HmmModel,
    pub loglik_history: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub states: Vec<usize>,
    pub log_prob: f64,
    /// Set when a symbol outside the emission alphabet was seen.
    pub unseen_symbol: bool,
}

fn check_row(row: &[f64], what: &str) -> Result<()> {
    let s: f64 = row.iter().sum();
    if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) || (s - 1.0).abs() > STOCHASTIC_TOL {
        return Err(Error::Numeric(format!("{what} is not a distribution (sum {s})")));
    }
    Ok(())
}

fn random_simplex(n: usize, rng: &mut RngState) -> Vec<f64> {
    // Mildly perturbed uniform so EM can break symmetry.
    let raw: Vec<f64> = (0..n).map(|_| 1.0 + rng.uniform()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

impl HmmModel {
    pub fn new(init: Vec<f64>, trans: Vec<Vec<f64>>, emit: Vec<Vec<f64>>) -> Result<Self> {
        let m = Self { init, trans, emit };
        m.validate()?;
        Ok(m)
    }

    pub fn random(n_hidden: usize, n_symbols: usize, rng: &mut RngState) -> Result<Self> {
        if n_hidden == 0 || n_symbols == 0 {
            return Err(Error::Parameter("HMM needs at least one state and one symbol".into()));
        }
        let init = random_simplex(n_hidden, rng);
        let trans = (0..n_hidden).map(|_| random_simplex(n_hidden, rng)).collect();
        let emit = (0..n_hidden).map(|_| random_simplex(n_symbols, rng)).collect();
        Ok(Self { init, trans, emit })
    }

    pub fn n_hidden(&self) -> usize {
        self.init.len()
    }

    pub fn n_symbols(&self) -> usize {
        self.emit.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_hidden();
        if n == 0 {
            return Err(Error::Parameter("HMM has no hidden states".into()));
        }
        if self.trans.len() != n || self.trans.iter().any(|r| r.len() != n) {
            return Err(Error::Dimension(format!("transition must be {n}x{n}")));
        }
        let v = self.n_symbols();
        if v == 0 || self.emit.len() != n || self.emit.iter().any(|r| r.len() != v) {
            return Err(Error::Dimension(format!("emission must be {n}xV with V >= 1")));
        }
        check_row(&self.init, "initial distribution")?;
        for (i, r) in self.trans.iter().enumerate() {
            check_row(r, &format!("transition row {i}"))?;
        }
        for (i, r) in self.emit.iter().enumerate() {
            check_row(r, &format!("emission row {i}"))?;
        }
        Ok(())
    }

    fn emission(&self, state: usize, symbol: usize) -> f64 {
        match self.emit[state].get(symbol) {
            Some(&p) => p,
            None => 1.0 / self.n_symbols() as f64,
        }
    }

    /// Log-likelihood of one sequence via the scaled forward pass.
    pub fn log_likelihood(&self, obs: &[usize]) -> f64 {
        forward_scaled(self, obs).1.iter().map(|c| c.ln()).sum()
    }

    /// Joint log-probability of an observation sequence and a state path.
    pub fn path_log_prob(&self, obs: &[usize], path: &[usize]) -> f64 {
        let mut lp = 0.0;
        for (t, (&o, &s)) in obs.iter().zip(path).enumerate() {
            lp += if t == 0 {
                self.init[s].ln()
            } else {
                self.trans[path[t - 1]][s].ln()
            };
            lp += self.emission(s, o).ln();
        }
        lp
    }

    /// Sample a (states, symbols) pair of the given length.
    pub fn sample(&self, len: usize, rng: &mut RngState) -> (Vec<usize>, Vec<usize>) {
        let mut states = Vec::with_capacity(len);
        let mut obs = Vec::with_capacity(len);
        for t in 0..len {
            let dist = if t == 0 { &self.init } else { &self.trans[states[t - 1]] };
            let s = rng.categorical(dist).expect("validated distribution");
            states.push(s);
            obs.push(rng.categorical(&self.emit[s]).expect("validated distribution"));
        }
        (states, obs)
    }
}

/// Returns normalized alphas and the per-step scaling constants.
fn forward_scaled(m: &HmmModel, obs: &[usize]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let n = m.n_hidden();
    let mut alpha = Vec::with_capacity(obs.len());
    let mut scale = Vec::with_capacity(obs.len());
    for (t, &o) in obs.iter().enumerate() {
        let mut a: Vec<f64> = (0..n)
            .map(|j| {
                let prior = if t == 0 {
                    m.init[j]
                } else {
                    let prev: &Vec<f64> = &alpha[t - 1];
                    (0..n).map(|i| prev[i] * m.trans[i][j]).sum()
                };
                prior * m.emission(j, o)
            })
            .collect();
        let c: f64 = a.iter().sum();
        let c = if c > 0.0 { c } else { f64::MIN_POSITIVE };
        a.iter_mut().for_each(|v| *v /= c);
        alpha.push(a);
        scale.push(c);
    }
    (alpha, scale)
}

fn backward_scaled(m: &HmmModel, obs: &[usize], scale: &[f64]) -> Vec<Vec<f64>> {
    let n = m.n_hidden();
    let len = obs.len();
    let mut beta = vec![vec![1.0; n]; len];
    for t in (0..len.saturating_sub(1)).rev() {
        for i in 0..n {
            let s: f64 = (0..n)
                .map(|j| m.trans[i][j] * m.emission(j, obs[t + 1]) * beta[t + 1][j])
                .sum();
            beta[t][i] = s / scale[t + 1];
        }
    }
    beta
}

fn normalize_or_uniform(row: &mut [f64]) {
    let s: f64 = row.iter().sum();
    if s > 0.0 {
        row.iter_mut().for_each(|v| *v /= s);
    } else {
        let u = 1.0 / row.len() as f64;
        row.iter_mut().for_each(|v| *v = u);
    }
}

fn check_observations(seqs: &[Vec<usize>]) -> Result<usize> {
    if seqs.is_empty() || seqs.iter().all(Vec::is_empty) {
        return Err(Error::Input("no observation sequences".into()));
    }
    Ok(seqs.iter().flatten().copied().max().map_or(0, |m| m + 1))
}

/// Baum-Welch from a random start. The symbol alphabet is `0..=max symbol`.
pub fn hmm_fit(
    seqs: &[Vec<usize>],
    n_hidden: usize,
    rng: &mut RngState,
    max_iters: usize,
    tol: f64,
) -> Result<HmmFit> {
    let n_symbols = check_observations(seqs)?;
    let init = HmmModel::random(n_hidden, n_symbols, rng)?;
    hmm_fit_from(seqs, init, max_iters, tol)
}

/// Baum-Welch from a given model. Stops when the log-likelihood gain
/// drops below `tol` or after `max_iters` updates.
pub fn hmm_fit_from(seqs: &[Vec<usize>], init: HmmModel, max_iters: usize, tol: f64) -> Result<HmmFit> {
    let n_symbols = check_observations(seqs)?;
    init.validate()?;
    if n_symbols > init.n_symbols() {
        return Err(Error::Parameter(format!(
            "observations use {n_symbols} symbols but the model emits {}",
            init.n_symbols()
        )));
    }
    let n = init.n_hidden();
    let v = init.n_symbols();
    let mut model = init;
    let mut history = Vec::new();
    for iter in 0..=max_iters {
        let mut ll = 0.0;
        let mut pi_acc = vec![0.0; n];
        let mut a_num = vec![vec![0.0; n]; n];
        let mut b_num = vec![vec![0.0; v]; n];
        for obs in seqs.iter().filter(|s| !s.is_empty()) {
            let (alpha, scale) = forward_scaled(&model, obs);
            let beta = backward_scaled(&model, obs, &scale);
            ll += scale.iter().map(|c| c.ln()).sum::<f64>();
            for t in 0..obs.len() {
                // With this scaling alpha*beta is already the state posterior.
                let mut gamma: Vec<f64> = (0..n).map(|i| alpha[t][i] * beta[t][i]).collect();
                normalize_or_uniform(&mut gamma);
                for i in 0..n {
                    if t == 0 {
                        pi_acc[i] += gamma[i];
                    }
                    b_num[i][obs[t]] += gamma[i];
                }
                if t + 1 < obs.len() {
                    let o = obs[t + 1];
                    for i in 0..n {
                        for j in 0..n {
                            a_num[i][j] += alpha[t][i] * model.trans[i][j] * model.emission(j, o)
                                * beta[t + 1][j]
                                / scale[t + 1];
                        }
                    }
                }
            }
        }
        if !ll.is_finite() {
            return Err(Error::Numeric(format!("log-likelihood became {ll} at iteration {iter}")));
        }
        let gain = history.last().map(|&prev| ll - prev);
        history.push(ll);
        if iter == max_iters || gain.is_some_and(|g| g < tol) {
            break;
        }
        normalize_or_uniform(&mut pi_acc);
        for row in a_num.iter_mut().chain(b_num.iter_mut()) {
            normalize_or_uniform(row);
        }
        model = HmmModel { init: pi_acc, trans: a_num, emit: b_num };
    }
    Ok(HmmFit { model, loglik_history: history })
}

/// Log-space Viterbi. Ties go to the lowest state index.
pub fn hmm_decode(model: &HmmModel, obs: &[usize]) -> Decoded {
    let n = model.n_hidden();
    let unseen_symbol = obs.iter().any(|&o| o >= model.n_symbols());
    if obs.is_empty() {
        return Decoded { states: Vec::new(), log_prob: 0.0, unseen_symbol };
    }
    let ln = |p: f64| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY };
    let mut delta: Vec<f64> = (0..n).map(|j| ln(model.init[j]) + ln(model.emission(j, obs[0]))).collect();
    let mut back: Vec<Vec<usize>> = Vec::with_capacity(obs.len());
    for &o in &obs[1..] {
        let mut next = vec![f64::NEG_INFINITY; n];
        let mut arg = vec![0usize; n];
        for j in 0..n {
            for i in 0..n {
                let v = delta[i] + ln(model.trans[i][j]);
                if v > next[j] {
                    next[j] = v;
                    arg[j] = i;
                }
            }
            next[j] += ln(model.emission(j, o));
        }
        back.push(arg);
        delta = next;
    }
    let mut last = 0;
    for j in 1..n {
        if delta[j] > delta[last] {
            last = j;
        }
    }
    let log_prob = delta[last];
    let mut states = vec![last; obs.len()];
    for t in (1..obs.len()).rev() {
        states[t - 1] = back[t - 1][states[t]];
    }
    Decoded { states, log_prob, unseen_symbol }
}
