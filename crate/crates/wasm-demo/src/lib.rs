//! Browser bindings. Each exported function returns a JSON string; the
//! plain `*_json` versions are the same logic callable from native tests.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use dsbert_core::balance::{
    balance_kl_loss, balance_regularizer, evaluate_on, greedy_balance_loss, greedy_target, top_balance_loss, top_rows,
};
use dsbert_core::baselines::{hmm_baseline, kmeans_baseline};
use dsbert_core::corpus::{generate_synthetic, gold_sequences, structure_by_name};
use dsbert_core::eval::{estimate_transition, evaluate, export_dot, extract_structure, SCE_EPSILON};
use dsbert_core::tensor::{Tape, Tensor, Var};
use dsbert_core::RngState;

/// Larger requests would freeze the page.
const MAX_DIALOGUES: usize = 2000;
const MAX_CELLS: usize = 4096;

#[derive(Serialize)]
struct StructureView {
    states: Vec<String>,
    true_trans: Vec<Vec<f64>>,
    estimated_trans: Vec<Vec<f64>>,
    occupancy: Vec<usize>,
    dot: String,
    sample: Vec<(String, String, String)>,
}

/// Sample a corpus from a built-in structure, re-estimate its transitions
/// from the gold labels and draw edges at or above `threshold`.
pub fn structure_json(name: &str, n_dialogues: usize, seed: u64, threshold: f64) -> Result<String, String> {
    if n_dialogues == 0 || n_dialogues > MAX_DIALOGUES {
        return Err(format!("dialogue count must be in 1..={MAX_DIALOGUES}"));
    }
    let s = structure_by_name(name).map_err(|e| e.to_string())?;
    let corpus = generate_synthetic(&s, n_dialogues, 6, 13, &mut RngState::new(seed)).map_err(|e| e.to_string())?;
    let gold = gold_sequences(&corpus).ok_or("generated corpus is labeled")?;
    let t = estimate_transition(&gold, s.n_states(), 0.0).map_err(|e| e.to_string())?;
    let graph = extract_structure(&t, Some(&s.states), threshold).map_err(|e| e.to_string())?;
    let sample = corpus[0]
        .pairs
        .iter()
        .map(|p| {
            let label = p.gold_state.map(|g| s.states[g].clone()).unwrap_or_default();
            (label, p.system_text.clone(), p.user_text.clone())
        })
        .collect();
    let view = StructureView {
        states: s.states.clone(),
        true_trans: s.trans.clone(),
        estimated_trans: t.probs.clone(),
        occupancy: t.occupancy.clone(),
        dot: export_dot(&graph),
        sample,
    };
    serde_json::to_string(&view).map_err(|e| e.to_string())
}

fn eval(p: &Tensor, f: fn(&mut Tape, Var) -> dsbert_core::Result<Var>) -> Result<f64, String> {
    evaluate_on(p, f).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct BalanceView {
    p: Vec<Vec<f64>>,
    column_sums: Vec<f64>,
    regularizer: f64,
    balance_kl: f64,
    greedy: f64,
    top: f64,
    greedy_assignment: Vec<usize>,
    top_rows: Vec<usize>,
}

/// Random `rows × cols` assignment matrix; larger `sharpness` gives more
/// peaked rows. `skew` pushes mass toward column 0 to imitate collapse.
pub fn balance_json(rows: usize, cols: usize, seed: u64, sharpness: f64, skew: f64) -> Result<String, String> {
    if rows == 0 || cols < 2 || rows * cols > MAX_CELLS {
        return Err(format!("need rows >= 1, cols >= 2 and at most {MAX_CELLS} cells"));
    }
    let mut rng = RngState::new(seed);
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let logits: Vec<f64> = (0..cols)
            .map(|j| sharpness * rng.normal() + if j == 0 { skew } else { 0.0 })
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        data.extend(e.into_iter().map(|v| v / z));
    }
    let p = Tensor::matrix(rows, cols, data).map_err(|e| e.to_string())?;
    let target = greedy_target(&p);
    let view = BalanceView {
        p: p.to_rows(),
        column_sums: (0..cols).map(|j| (0..rows).map(|i| p.row(i)[j]).sum()).collect(),
        regularizer: eval(&p, balance_regularizer)?,
        balance_kl: eval(&p, balance_kl_loss)?,
        greedy: eval(&p, greedy_balance_loss)?,
        top: eval(&p, top_balance_loss)?,
        greedy_assignment: (0..rows)
            .map(|i| target.row(i).iter().position(|&v| v == 1.0).unwrap_or(0))
            .collect(),
        top_rows: top_rows(&p),
    };
    serde_json::to_string(&view).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct MetricView {
    sed: f64,
    sce: f64,
    clamped: bool,
    n_true: usize,
    n_pred: usize,
    true_trans: Vec<Vec<f64>>,
    projected: Vec<Vec<f64>>,
    dot: String,
}

/// Run a baseline (`kmeans` or `hmm`) with `k` states on a sampled corpus
/// and score it against the gold structure.
pub fn metric_json(name: &str, method: &str, k: usize, n_dialogues: usize, seed: u64) -> Result<String, String> {
    if n_dialogues == 0 || n_dialogues > MAX_DIALOGUES {
        return Err(format!("dialogue count must be in 1..={MAX_DIALOGUES}"));
    }
    let s = structure_by_name(name).map_err(|e| e.to_string())?;
    let corpus = generate_synthetic(&s, n_dialogues, 6, 13, &mut RngState::new(seed)).map_err(|e| e.to_string())?;
    let pred = match method {
        "kmeans" => kmeans_baseline(&corpus, k, seed),
        "hmm" => hmm_baseline(&corpus, k, k, seed),
        other => return Err(format!("unknown method {other:?}")),
    }
    .map_err(|e| e.to_string())?;
    let pred: Vec<Vec<usize>> = pred.into_iter().map(|p| p.states).collect();
    let gold = gold_sequences(&corpus).ok_or("generated corpus is labeled")?;
    let ev = evaluate(&gold, &pred, s.n_states(), k, SCE_EPSILON).map_err(|e| e.to_string())?;
    let graph = extract_structure(&ev.t_proj, Some(&s.states), 0.15).map_err(|e| e.to_string())?;
    let view = MetricView {
        sed: ev.sed,
        sce: ev.sce,
        clamped: ev.clamped,
        n_true: ev.n_true,
        n_pred: ev.n_pred,
        true_trans: ev.t_true.probs.clone(),
        projected: ev.t_proj.probs.clone(),
        dot: export_dot(&graph),
    };
    serde_json::to_string(&view).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn structure_demo(name: &str, n_dialogues: usize, seed: u32, threshold: f64) -> Result<String, JsValue> {
    structure_json(name, n_dialogues, u64::from(seed), threshold).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn balance_demo(rows: usize, cols: usize, seed: u32, sharpness: f64, skew: f64) -> Result<String, JsValue> {
    balance_json(rows, cols, u64::from(seed), sharpness, skew).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn metric_demo(name: &str, method: &str, k: usize, n_dialogues: usize, seed: u32) -> Result<String, JsValue> {
    metric_json(name, method, k, n_dialogues, u64::from(seed)).map_err(|e| JsValue::from_str(&e))
}
