//! Balance losses over the batch state-probability matrix `P` (`U × n`).
//!
//! All targets are built from the current values of `P` and enter the loss
//! as constants: no gradient flows through target construction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{kernels, Tape, Tensor, Var};

/// Allowed deviation of a row sum from 1.
const ROW_SUM_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceLossKind {
    None,
    BalanceKl,
    Greedy,
    Top,
}

impl BalanceLossKind {
    pub fn name(self) -> &'static str {
        match self {
            BalanceLossKind::None => "none",
            BalanceLossKind::BalanceKl => "balance_kl",
            BalanceLossKind::Greedy => "greedy",
            BalanceLossKind::Top => "top",
        }
    }
}

impl std::str::FromStr for BalanceLossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "balance_kl" => Ok(Self::BalanceKl),
            "greedy" => Ok(Self::Greedy),
            "top" => Ok(Self::Top),
            _ => Err(Error::Parameter(format!(
                "unknown loss {s:?}; expected balance_kl, greedy, top or none"
            ))),
        }
    }
}

/// Which balance loss applies at a given epoch. Greedy runs for the first
/// `greedy_epochs` epochs, then hands over to `after_greedy`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSchedule {
    pub kind: BalanceLossKind,
    pub lambda: f64,
    pub greedy_epochs: usize,
    pub after_greedy: BalanceLossKind,
}

impl Default for LossSchedule {
    fn default() -> Self {
        Self {
            kind: BalanceLossKind::BalanceKl,
            lambda: 1.0,
            greedy_epochs: 3,
            after_greedy: BalanceLossKind::None,
        }
    }
}

impl LossSchedule {
    pub fn active(&self, epoch: usize) -> BalanceLossKind {
        match self.kind {
            BalanceLossKind::Greedy if epoch >= self.greedy_epochs => match self.after_greedy {
                BalanceLossKind::Greedy => BalanceLossKind::None,
                other => other,
            },
            k => k,
        }
    }
}

fn check_stochastic(p: &Tensor) -> Result<()> {
    if p.shape().len() != 2 || p.rows() == 0 {
        return Err(Error::Input(format!(
            "expected a non-empty probability matrix, got shape {:?}",
            p.shape()
        )));
    }
    for i in 0..p.rows() {
        let s: f64 = p.row(i).iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOL || p.row(i).iter().any(|v| *v < 0.0) {
            return Err(Error::Input(format!("row {i} of P sums to {s}, not 1")));
        }
    }
    Ok(())
}

/// `Σ_j (Σ_i p_ij)²`
pub fn balance_regularizer(tape: &mut Tape, p: Var) -> Result<Var> {
    check_stochastic(tape.value(p))?;
    let cols = tape.column_sums(p);
    let sq = tape.square(cols);
    Ok(tape.sum(sq))
}

/// One-hot at each row's argmax (lowest index on ties).
pub fn hard_target(p: &Tensor) -> Tensor {
    let (u, n) = (p.rows(), p.cols());
    let mut t = vec![0.0; u * n];
    for i in 0..u {
        t[i * n + kernels::argmax(p.row(i))] = 1.0;
    }
    Tensor::matrix(u, n, t).expect("sized by construction")
}

/// `||P||_b + KL(T || P)` with `T` the hard target.
pub fn balance_kl_loss(tape: &mut Tape, p: Var) -> Result<Var> {
    let reg = balance_regularizer(tape, p)?;
    let target = hard_target(tape.value(p));
    let kl = tape.kl_divergence(&target, p)?;
    tape.add(reg, kl)
}

/// Round-robin greedy assignment: columns are visited in index order,
/// cyclically; each visit claims the unassigned row with the highest
/// probability in that column (lowest row on ties). Every row ends with
/// exactly one 1 and column counts differ by at most one.
pub fn greedy_target(p: &Tensor) -> Tensor {
    let (u, n) = (p.rows(), p.cols());
    let mut t = vec![0.0; u * n];
    let mut assigned = vec![false; u];
    let mut j = 0;
    for _ in 0..u {
        let mut best: Option<usize> = None;
        for i in 0..u {
            if assigned[i] {
                continue;
            }
            match best {
                Some(b) if p.get(i, j) <= p.get(b, j) => {}
                _ => best = Some(i),
            }
        }
        let i = best.expect("an unassigned row remains");
        assigned[i] = true;
        t[i * n + j] = 1.0;
        j = (j + 1) % n;
    }
    Tensor::matrix(u, n, t).expect("sized by construction")
}

/// `KL(T_greedy || P)`
pub fn greedy_balance_loss(tape: &mut Tape, p: Var) -> Result<Var> {
    check_stochastic(tape.value(p))?;
    let target = greedy_target(tape.value(p));
    tape.kl_divergence(&target, p)
}

/// For each column, the row holding that column's maximum (lowest row on
/// ties). The same row may be chosen by several columns.
pub fn top_rows(p: &Tensor) -> Vec<usize> {
    (0..p.cols())
        .map(|j| {
            let mut best = 0;
            for i in 1..p.rows() {
                if p.get(i, j) > p.get(best, j) {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// `KL(I || P')` where row `k` of `P'` is the row of `P` that maximizes
/// column `k`.
pub fn top_balance_loss(tape: &mut Tape, p: Var) -> Result<Var> {
    check_stochastic(tape.value(p))?;
    let rows = top_rows(tape.value(p));
    let n = rows.len();
    let selected = tape.gather_rows(p, &rows)?;
    let mut eye = vec![0.0; n * n];
    for k in 0..n {
        eye[k * n + k] = 1.0;
    }
    let target = Tensor::matrix(n, n, eye)?;
    tape.kl_divergence(&target, selected)
}

/// Dispatch on `kind`; `None` contributes nothing.
pub fn balance_loss(tape: &mut Tape, kind: BalanceLossKind, p: Var) -> Result<Option<Var>> {
    Ok(match kind {
        BalanceLossKind::None => None,
        BalanceLossKind::BalanceKl => Some(balance_kl_loss(tape, p)?),
        BalanceLossKind::Greedy => Some(greedy_balance_loss(tape, p)?),
        BalanceLossKind::Top => Some(top_balance_loss(tape, p)?),
    })
}

/// `mlm + λ·balance`
pub fn total_loss(tape: &mut Tape, mlm: Var, balance: Option<Var>, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::Parameter(format!("lambda must be >= 0, got {lambda}")));
    }
    match balance {
        None => Ok(mlm),
        Some(b) => {
            let scaled = tape.scale(b, lambda);
            tape.add(mlm, scaled)
        }
    }
}

/// Evaluate a loss on a constant matrix, returning its value.
pub fn evaluate_on(
    p: &Tensor,
    loss: impl FnOnce(&mut Tape, Var) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(p.clone());
    let out = loss(&mut tape, v)?;
    Ok(tape.value(out).item())
}
