//! Structure metrics: transition estimation, gold↔predicted mapping
//! matrices, projection of predicted transitions into gold-state space,
//! SED / SCE, and structure-graph export.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clamp applied to projected probabilities inside the SCE logarithm.
pub const SCE_EPSILON: f64 = 1e-12;

/// Row-stochastic bigram transition estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    pub n: usize,
    pub probs: Vec<Vec<f64>>,
    pub counts: Vec<Vec<usize>>,
    /// Unigram occurrences of each state.
    pub occupancy: Vec<usize>,
    /// Rows with no outgoing bigrams that were filled uniformly.
    pub uniform_rows: Vec<bool>,
}

impl TransitionMatrix {
    /// Wrap a known probability matrix (every state counted as occupied).
    pub fn from_probs(probs: Vec<Vec<f64>>) -> Result<Self> {
        let n = probs.len();
        if probs.iter().any(|r| r.len() != n) {
            return Err(Error::Dimension("transition matrix must be square".into()));
        }
        Ok(Self {
            n,
            counts: vec![vec![0; n]; n],
            occupancy: vec![1; n],
            uniform_rows: vec![false; n],
            probs,
        })
    }

    /// Indices of rows whose sum is off 1 by more than `tol`.
    pub fn non_stochastic_rows(&self, tol: f64) -> Vec<usize> {
        self.probs
            .iter()
            .enumerate()
            .filter(|(_, r)| (r.iter().sum::<f64>() - 1.0).abs() > tol)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Bigram counts over all sequences, normalized per row with additive
/// smoothing `epsilon`. Rows with no mass at all become uniform and are
/// flagged in `uniform_rows`.
pub fn estimate_transition(sequences: &[Vec<usize>], n: usize, epsilon: f64) -> Result<TransitionMatrix> {
    if !(epsilon >= 0.0) {
        return Err(Error::Parameter(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let mut counts = vec![vec![0usize; n]; n];
    let mut occupancy = vec![0usize; n];
    for (s, seq) in sequences.iter().enumerate() {
        if let Some(&bad) = seq.iter().find(|&&id| id >= n) {
            return Err(Error::Input(format!(
                "sequence {s} holds state {bad}, but only {n} states are declared"
            )));
        }
        for &id in seq {
            occupancy[id] += 1;
        }
        for w in seq.windows(2) {
            counts[w[0]][w[1]] += 1;
        }
    }
    let mut probs = vec![vec![0.0; n]; n];
    let mut uniform_rows = vec![false; n];
    for i in 0..n {
        let row_total: usize = counts[i].iter().sum();
        let denom = row_total as f64 + n as f64 * epsilon;
        if denom > 0.0 {
            for j in 0..n {
                probs[i][j] = (counts[i][j] as f64 + epsilon) / denom;
            }
        } else {
            probs[i] = vec![1.0 / n as f64; n];
            uniform_rows[i] = true;
        }
    }
    Ok(TransitionMatrix {
        n,
        probs,
        counts,
        occupancy,
        uniform_rows,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingDirection {
    GoldToPred,
    PredToGold,
}

/// Conditional co-occurrence frequencies between two labelings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MappingMatrix {
    pub rows: usize,
    pub cols: usize,
    pub probs: Vec<Vec<f64>>,
    /// Source states that never occur; their rows are uniform.
    pub unoccupied: Vec<bool>,
}

/// `P[a][b] = #(source = a, target = b) / #(source = a)`, where the source
/// labeling is `gold` for [`MappingDirection::GoldToPred`] and `pred`
/// otherwise.
pub fn mapping_matrix(
    gold: &[usize],
    pred: &[usize],
    n_gold: usize,
    n_pred: usize,
    direction: MappingDirection,
) -> Result<MappingMatrix> {
    if gold.len() != pred.len() {
        return Err(Error::Input(format!(
            "{} gold labels but {} predicted labels",
            gold.len(),
            pred.len()
        )));
    }
    if let Some(&g) = gold.iter().find(|&&g| g >= n_gold) {
        return Err(Error::Input(format!("gold label {g} >= {n_gold}")));
    }
    if let Some(&p) = pred.iter().find(|&&p| p >= n_pred) {
        return Err(Error::Input(format!("predicted label {p} >= {n_pred}")));
    }
    let (src, dst, rows, cols) = match direction {
        MappingDirection::GoldToPred => (gold, pred, n_gold, n_pred),
        MappingDirection::PredToGold => (pred, gold, n_pred, n_gold),
    };
    let mut counts = vec![vec![0usize; cols]; rows];
    for (&a, &b) in src.iter().zip(dst) {
        counts[a][b] += 1;
    }
    let mut probs = vec![vec![0.0; cols]; rows];
    let mut unoccupied = vec![false; rows];
    for a in 0..rows {
        let total: usize = counts[a].iter().sum();
        if total == 0 {
            probs[a] = vec![1.0 / cols as f64; cols];
            unoccupied[a] = true;
        } else {
            for b in 0..cols {
                probs[a][b] = counts[a][b] as f64 / total as f64;
            }
        }
    }
    Ok(MappingMatrix {
        rows,
        cols,
        probs,
        unoccupied,
    })
}

/// `T''[a][b] = Σ_{i,j} P[a][i] · T'[i][j] · P'[j][b]`, computed literally.
/// Rows are not renormalized; see [`TransitionMatrix::non_stochastic_rows`].
pub fn project_transition(
    t_pred: &TransitionMatrix,
    gold_to_pred: &MappingMatrix,
    pred_to_gold: &MappingMatrix,
) -> Result<TransitionMatrix> {
    let m = t_pred.n;
    let n = gold_to_pred.rows;
    if gold_to_pred.cols != m || pred_to_gold.rows != m || pred_to_gold.cols != n {
        return Err(Error::Input(format!(
            "cannot project {m}×{m} transitions with mappings {}×{} and {}×{}",
            gold_to_pred.rows, gold_to_pred.cols, pred_to_gold.rows, pred_to_gold.cols
        )));
    }
    // Each term is summed in sorted order, so relabeling the predicted states
    // (which only permutes the terms) leaves the result bit-for-bit unchanged.
    let mut probs = vec![vec![0.0; n]; n];
    let mut terms = Vec::with_capacity(m * m);
    for a in 0..n {
        for b in 0..n {
            terms.clear();
            for i in 0..m {
                let p = gold_to_pred.probs[a][i];
                if p == 0.0 {
                    continue;
                }
                for j in 0..m {
                    let term = p * t_pred.probs[i][j] * pred_to_gold.probs[j][b];
                    if term != 0.0 {
                        terms.push(term);
                    }
                }
            }
            terms.sort_by(f64::total_cmp);
            probs[a][b] = terms.iter().sum();
        }
    }
    let mut out = TransitionMatrix::from_probs(probs)?;
    out.occupancy = vec![0; n];
    for (a, occ) in out.occupancy.iter_mut().enumerate() {
        *occ = usize::from(!gold_to_pred.unoccupied[a]);
    }
    Ok(out)
}

fn same_shape(a: &TransitionMatrix, b: &TransitionMatrix) -> Result<()> {
    if a.n != b.n {
        return Err(Error::Input(format!(
            "transition matrices of size {} and {}",
            a.n, b.n
        )));
    }
    Ok(())
}

/// Structure Euclidean distance: Frobenius norm of the difference over `N`.
pub fn sed(t_true: &TransitionMatrix, t_proj: &TransitionMatrix) -> Result<f64> {
    same_shape(t_true, t_proj)?;
    let sq: f64 = t_true
        .probs
        .iter()
        .zip(&t_proj.probs)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (y - x).powi(2)))
        .sum();
    Ok(sq.sqrt() / t_true.n as f64)
}

/// SCE value together with whether any projected entry hit the clamp while
/// carrying true mass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceValue {
    pub value: f64,
    pub clamped: bool,
}

/// Structure cross-entropy: `(1/N) Σ −ln(max(T'', ε)) · T`.
pub fn sce(t_true: &TransitionMatrix, t_proj: &TransitionMatrix, epsilon: f64) -> Result<SceValue> {
    same_shape(t_true, t_proj)?;
    if !(epsilon > 0.0) {
        return Err(Error::Parameter(format!("SCE epsilon must be > 0, got {epsilon}")));
    }
    let mut total = 0.0;
    let mut clamped = false;
    for (a, b) in t_true.probs.iter().zip(&t_proj.probs) {
        for (&t, &p) in a.iter().zip(b) {
            if t == 0.0 {
                continue;
            }
            if p < epsilon {
                clamped = true;
            }
            total += -p.max(epsilon).ln() * t;
        }
    }
    Ok(SceValue {
        value: total / t_true.n as f64,
        clamped,
    })
}

/// Everything computed by [`evaluate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub sed: f64,
    pub sce: f64,
    pub n_true: usize,
    pub n_pred: usize,
    pub clamped: bool,
    pub t_true: TransitionMatrix,
    pub t_pred: TransitionMatrix,
    pub t_proj: TransitionMatrix,
    pub gold_to_pred: MappingMatrix,
    pub pred_to_gold: MappingMatrix,
}

/// The compact report written to disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sed: f64,
    pub sce: f64,
    pub n_true: usize,
    pub n_pred: usize,
    pub clamped: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrices: Option<ReportMatrices>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMatrices {
    pub t_true: Vec<Vec<f64>>,
    pub t_pred: Vec<Vec<f64>>,
    pub t_proj: Vec<Vec<f64>>,
    pub gold_to_pred: Vec<Vec<f64>>,
    pub pred_to_gold: Vec<Vec<f64>>,
}

impl Evaluation {
    pub fn report(&self, with_matrices: bool) -> EvalReport {
        EvalReport {
            sed: self.sed,
            sce: self.sce,
            n_true: self.n_true,
            n_pred: self.n_pred,
            clamped: self.clamped,
            matrices: with_matrices.then(|| ReportMatrices {
                t_true: self.t_true.probs.clone(),
                t_pred: self.t_pred.probs.clone(),
                t_proj: self.t_proj.probs.clone(),
                gold_to_pred: self.gold_to_pred.probs.clone(),
                pred_to_gold: self.pred_to_gold.probs.clone(),
            }),
        }
    }
}

/// Compare predicted state sequences with gold ones, aligned pair for pair.
/// `n_true` / `n_pred` are the declared state counts.
pub fn evaluate(
    gold: &[Vec<usize>],
    pred: &[Vec<usize>],
    n_true: usize,
    n_pred: usize,
    epsilon: f64,
) -> Result<Evaluation> {
    if gold.len() != pred.len() {
        return Err(Error::Input(format!(
            "{} gold sequences but {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    for (i, (g, p)) in gold.iter().zip(pred).enumerate() {
        if g.len() != p.len() {
            return Err(Error::Input(format!(
                "sequence {i}: {} gold labels but {} predicted",
                g.len(),
                p.len()
            )));
        }
    }
    let t_true = estimate_transition(gold, n_true, 0.0)?;
    let t_pred = estimate_transition(pred, n_pred, 0.0)?;
    let flat_gold: Vec<usize> = gold.concat();
    let flat_pred: Vec<usize> = pred.concat();
    let g2p = mapping_matrix(&flat_gold, &flat_pred, n_true, n_pred, MappingDirection::GoldToPred)?;
    let p2g = mapping_matrix(&flat_gold, &flat_pred, n_true, n_pred, MappingDirection::PredToGold)?;
    let t_proj = project_transition(&t_pred, &g2p, &p2g)?;
    let sed = sed(&t_true, &t_proj)?;
    let sce = sce(&t_true, &t_proj, epsilon)?;
    Ok(Evaluation {
        sed,
        sce: sce.value,
        n_true,
        n_pred,
        clamped: sce.clamped,
        t_true,
        t_pred,
        t_proj,
        gold_to_pred: g2p,
        pred_to_gold: p2g,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: usize,
    pub label: String,
    pub occupancy: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub from: usize,
    pub to: usize,
    pub prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureGraph {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
}

/// Keep states that occur and transitions with probability at or above
/// `threshold`. Rows with no observed transitions contribute no edges.
pub fn extract_structure(
    t: &TransitionMatrix,
    labels: Option<&[String]>,
    threshold: f64,
) -> Result<StructureGraph> {
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::Parameter(format!(
            "threshold must be in [0, 1), got {threshold}"
        )));
    }
    if let Some(l) = labels {
        if l.len() != t.n {
            return Err(Error::Input(format!("{} labels for {} states", l.len(), t.n)));
        }
    }
    let mut edges = Vec::new();
    for i in 0..t.n {
        if t.occupancy[i] == 0 || t.uniform_rows[i] {
            continue;
        }
        for j in 0..t.n {
            let p = t.probs[i][j];
            if p > 0.0 && p >= threshold && t.occupancy[j] > 0 {
                edges.push(GraphEdge { from: i, to: j, prob: p.min(1.0) });
            }
        }
    }
    let nodes = (0..t.n)
        .filter(|&i| t.occupancy[i] > 0)
        .map(|i| GraphNode {
            id: i,
            label: labels.map_or_else(|| format!("s{i}"), |l| l[i].clone()),
            occupancy: t.occupancy[i],
        })
        .collect();
    Ok(StructureGraph { nodes, edges })
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// Graphviz text. Nodes sorted by id, edges by `(from, to)`, edge labels
/// at two decimals.
pub fn export_dot(graph: &StructureGraph) -> String {
    let mut out = String::from("digraph structure {\n  rankdir=LR;\n  node [shape=ellipse];\n");
    let mut nodes: Vec<&GraphNode> = graph.nodes.iter().collect();
    nodes.sort_by_key(|n| n.id);
    for n in nodes {
        let _ = writeln!(out, "  s{} [label=\"{}\"];", n.id, escape(&n.label));
    }
    let mut edges: Vec<&GraphEdge> = graph.edges.iter().collect();
    edges.sort_by_key(|e| (e.from, e.to));
    for e in edges {
        let _ = writeln!(out, "  s{} -> s{} [label=\"{:.2}\"];", e.from, e.to, e.prob);
    }
    out.push_str("}\n");
    out
}

/// One line of a state-sequence file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateSequence {
    pub dialogue_id: String,
    pub states: Vec<usize>,
}

pub fn write_state_sequences(seqs: &[StateSequence]) -> String {
    let mut out = String::new();
    for s in seqs {
        out.push_str(&serde_json::to_string(s).expect("json encoding"));
        out.push('\n');
    }
    out
}

pub fn read_state_sequences(text: &str) -> Result<Vec<StateSequence>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Parse(format!("state sequence line {}: {e}", i + 1)))
        })
        .collect()
}
