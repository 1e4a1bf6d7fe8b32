#![allow(dead_code)]

use std::path::PathBuf;
use std::time::Instant;

use dsbert_core::balance::{
    balance_kl_loss, balance_regularizer, evaluate_on, greedy_balance_loss, greedy_target, top_balance_loss,
    total_loss, BalanceLossKind,
};
use dsbert_core::baselines::{hmm_baseline, hmm_decode, hmm_fit, hmm_fit_from, kmeans_baseline, kmeans_fit, HmmModel};
use dsbert_core::corpus::{
    bus_structure, chain_structure, corpus_to_json, generate_synthetic, gold_sequences, Dialogue, UtterancePair,
};
use dsbert_core::eval::{
    estimate_transition, evaluate, export_dot, extract_structure, mapping_matrix, project_transition, sce, sed,
    MappingDirection, TransitionMatrix, SCE_EPSILON,
};
use dsbert_core::model::{BatchNoise, DsbertModel, ModelConfig};
use dsbert_core::tensor::{
    gumbel_softmax, linear, multi_head_self_attention, AttentionParams, GumbelNoise, Tape, Tensor, Var,
};
use dsbert_core::text::{tokenize, TfIdfModel, Vocabulary};
use dsbert_core::trainer::{predict_states, train, TrainConfig};
use dsbert_core::{Result, RngState};

/// `Ok(detail)` on pass, `Err(detail)` on failure.
pub type Outcome = std::result::Result<String, String>;

// ---------------------------------------------------------------- helpers

pub fn random_tensor(shape: &[usize], rng: &mut RngState) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

/// Random row-stochastic matrix with strictly positive entries.
pub fn random_stochastic(rows: usize, cols: usize, rng: &mut RngState) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let raw: Vec<f64> = (0..cols).map(|_| (1.5 * rng.normal()).exp()).collect();
        let s: f64 = raw.iter().sum();
        data.extend(raw.into_iter().map(|v| v / s));
    }
    Tensor::matrix(rows, cols, data).unwrap()
}

fn gold_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("golden").join(name)
}

/// Byte-compare `actual` against a checked-in golden file. With
/// `DSBERT_BLESS=1` the file is (re)written instead.
pub fn check_golden(name: &str, actual: &str) -> Outcome {
    let path = gold_path(name);
    if std::env::var("DSBERT_BLESS").as_deref() == Ok("1") {
        std::fs::write(&path, actual).map_err(|e| format!("{}: {e}", path.display()))?;
        return Ok(format!("{name} written"));
    }
    let want = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    if want == actual {
        Ok(format!("{name} matches"))
    } else {
        Err(format!("{name} differs:\n--- golden\n{want}--- actual\n{actual}"))
    }
}

// ------------------------------------------------------- gradient checks

pub const FD_STEP: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-3;
/// Magnitude below which the relative error is measured against this floor.
pub const GRAD_FLOOR: f64 = 1e-4;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_FLOOR)
}

type Graph = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

fn eval_graph(inputs: &[Tensor], f: &Graph) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    tape.value(out).item()
}

/// Worst relative error between analytic and central-difference gradients
/// over every entry of every input.
pub fn grad_check(inputs: &[Tensor], f: &Graph) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut tape, &vars).unwrap();
    let grads = tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (eval_graph(&plus, f) - eval_graph(&minus, f)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i], numeric));
        }
    }
    worst
}

/// Contract a tensor-valued node to a scalar with fixed random weights, so
/// that gradients do not cancel (a plain sum of softmax rows is constant).
fn weigh(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(v).shape().to_vec();
    let w = random_tensor(&shape, &mut RngState::new(seed));
    let wv = tape.constant(w);
    let m = tape.mul(v, wv)?;
    Ok(tape.sum(m))
}

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub graph: Box<Graph>,
}

fn case(name: &'static str, inputs: Vec<Tensor>, graph: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> OpCase {
    OpCase { name, inputs, graph: Box::new(graph) }
}

/// One case per differentiable operation.
pub fn op_cases() -> Vec<OpCase> {
    let mut rng = RngState::new(2024);
    let r = |shape: &[usize], rng: &mut RngState| random_tensor(shape, rng);
    let noise = Tensor::new(vec![4, 3], (0..12).map(|_| rng.gumbel()).collect()).unwrap();
    let kl_target = random_stochastic(4, 3, &mut rng);
    let shift = r(&[3, 4], &mut rng);
    vec![
        case("matmul", vec![r(&[3, 4], &mut rng), r(&[4, 2], &mut rng)], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weigh(t, y, 1)
        }),
        case("matmul_nt", vec![r(&[3, 4], &mut rng), r(&[2, 4], &mut rng)], |t, v| {
            let y = t.matmul_nt(v[0], v[1])?;
            weigh(t, y, 2)
        }),
        case("add", vec![r(&[3, 4], &mut rng), r(&[3, 4], &mut rng)], |t, v| {
            let y = t.add(v[0], v[1])?;
            weigh(t, y, 3)
        }),
        case("add_row", vec![r(&[3, 4], &mut rng), r(&[4], &mut rng)], |t, v| {
            let y = t.add_row(v[0], v[1])?;
            weigh(t, y, 4)
        }),
        case("mul", vec![r(&[3, 4], &mut rng), r(&[3, 4], &mut rng)], |t, v| {
            let y = t.mul(v[0], v[1])?;
            weigh(t, y, 5)
        }),
        case("scale", vec![r(&[3, 4], &mut rng)], |t, v| {
            let y = t.scale(v[0], -1.7);
            weigh(t, y, 6)
        }),
        case("add_const", vec![r(&[3, 4], &mut rng)], move |t, v| {
            let y = t.add_const(v[0], &shift)?;
            let y = t.square(y);
            weigh(t, y, 7)
        }),
        case("transpose", vec![r(&[3, 4], &mut rng)], |t, v| {
            let y = t.transpose(v[0])?;
            weigh(t, y, 8)
        }),
        case("softmax_axis0", vec![r(&[3, 4], &mut rng)], |t, v| {
            let y = t.softmax(v[0], 0)?;
            weigh(t, y, 9)
        }),
        case("softmax_axis1", vec![r(&[3, 4], &mut rng)], |t, v| {
            let y = t.softmax(v[0], 1)?;
            weigh(t, y, 10)
        }),
        case("softmax_rows", vec![r(&[3, 4], &mut rng)], |t, v| {
            let y = t.softmax_rows(v[0])?;
            weigh(t, y, 11)
        }),
        case("gelu", vec![r(&[3, 4], &mut rng)], |t, v| {
            let y = t.gelu(v[0]);
            weigh(t, y, 12)
        }),
        case(
            "layer_norm",
            vec![r(&[3, 5], &mut rng), r(&[5], &mut rng), r(&[5], &mut rng)],
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                weigh(t, y, 13)
            },
        ),
        case("slice_cols", vec![r(&[3, 5], &mut rng)], |t, v| {
            let y = t.slice_cols(v[0], 1, 3)?;
            weigh(t, y, 14)
        }),
        case("concat_cols", vec![r(&[3, 2], &mut rng), r(&[3, 3], &mut rng)], |t, v| {
            let y = t.concat_cols(&[v[0], v[1]])?;
            weigh(t, y, 15)
        }),
        case("concat_rows", vec![r(&[2, 3], &mut rng), r(&[1, 3], &mut rng)], |t, v| {
            let y = t.concat_rows(&[v[0], v[1]])?;
            weigh(t, y, 16)
        }),
        case("gather_rows", vec![r(&[4, 3], &mut rng)], |t, v| {
            let y = t.gather_rows(v[0], &[2, 0, 2, 3, 2])?;
            weigh(t, y, 17)
        }),
        case("embedding_lookup", vec![r(&[6, 3], &mut rng)], |t, v| {
            let y = t.embedding_lookup(v[0], &[5, 1, 1, 0])?;
            weigh(t, y, 18)
        }),
        case("sum", vec![r(&[3, 4], &mut rng)], |t, v| {
            let y = t.square(v[0]);
            Ok(t.sum(y))
        }),
        case("column_sums", vec![r(&[3, 4], &mut rng)], |t, v| {
            let y = t.column_sums(v[0]);
            weigh(t, y, 19)
        }),
        case("square", vec![r(&[3, 4], &mut rng)], |t, v| {
            let y = t.square(v[0]);
            weigh(t, y, 20)
        }),
        case("cross_entropy", vec![r(&[4, 5], &mut rng)], |t, v| {
            t.cross_entropy(v[0], &[Some(1), None, Some(4), Some(0)])
        }),
        case("kl_divergence", vec![r(&[4, 3], &mut rng)], move |t, v| {
            let p = t.softmax_rows(v[0])?;
            t.kl_divergence(&kl_target, p)
        }),
        case("linear", vec![r(&[3, 4], &mut rng), r(&[4, 2], &mut rng), r(&[2], &mut rng)], |t, v| {
            let y = linear(t, v[0], v[1], v[2])?;
            weigh(t, y, 21)
        }),
        case(
            "multi_head_self_attention",
            {
                let mut ins = vec![r(&[5, 4], &mut rng)];
                for _ in 0..4 {
                    ins.push(random_tensor(&[4, 4], &mut rng));
                    ins.push(random_tensor(&[4], &mut rng));
                }
                ins
            },
            |t, v| {
                let p = AttentionParams {
                    wq: v[1],
                    bq: v[2],
                    wk: v[3],
                    bk: v[4],
                    wv: v[5],
                    bv: v[6],
                    wo: v[7],
                    bo: v[8],
                };
                let y = multi_head_self_attention(t, v[0], &p, 2)?;
                weigh(t, y, 22)
            },
        ),
        case("gumbel_softmax_soft", vec![r(&[4, 3], &mut rng)], move |t, v| {
            let y = gumbel_softmax(t, v[0], 0.7, GumbelNoise::Fixed(&noise), false)?;
            weigh(t, y, 23)
        }),
        case("balance_regularizer", vec![r(&[6, 3], &mut rng)], |t, v| {
            let p = t.softmax_rows(v[0])?;
            balance_regularizer(t, p)
        }),
        case("balance_kl_loss", vec![r(&[6, 3], &mut rng)], |t, v| {
            let p = t.softmax_rows(v[0])?;
            balance_kl_loss(t, p)
        }),
        case("greedy_balance_loss", vec![r(&[7, 3], &mut rng)], |t, v| {
            let p = t.softmax_rows(v[0])?;
            greedy_balance_loss(t, p)
        }),
        case("top_balance_loss", vec![r(&[6, 3], &mut rng)], |t, v| {
            let p = t.softmax_rows(v[0])?;
            top_balance_loss(t, p)
        }),
    ]
}

/// Corpus whose vocabulary, with 3 pair slots, has exactly 20 entries.
pub fn micro_corpus() -> Vec<Dialogue> {
    let d = |id: &str, pairs: &[(&str, &str)]| {
        Dialogue::new(id, pairs.iter().map(|(s, u)| UtterancePair::new(*s, *u)).collect()).unwrap()
    };
    vec![
        d("m0", &[("alpha beta", "gamma"), ("delta epsilon", "zeta eta"), ("theta", "iota kappa")]),
        d("m1", &[("lambda mu", "alpha"), ("gamma delta", "mu")]),
    ]
}

pub fn micro_model(n_state: usize) -> DsbertModel {
    let corpus = micro_corpus();
    let texts: Vec<String> = corpus.iter().flat_map(|d| d.pairs.iter().map(|p| p.text())).collect();
    let vocab = Vocabulary::build(texts.iter().map(String::as_str), 3);
    assert_eq!(vocab.len(), 20);
    let mut cfg = ModelConfig::new(n_state, vocab.len(), 3);
    cfg.d_model = 8;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.d_ff = 16;
    cfg.max_seq_len = 24;
    cfg.hard_gumbel = false;
    DsbertModel::new(cfg, vocab, &mut RngState::new(31)).unwrap()
}

fn micro_loss(model: &DsbertModel, noise: &[Tensor], tape: &mut Tape, trainable: bool) -> (Var, dsbert_core::model::Bound) {
    let batch: Vec<_> = micro_corpus().iter().map(|d| model.build_input(d, None).unwrap()).collect();
    let bound = model.bind(tape, trainable);
    let out = model
        .forward(tape, &bound, &batch, 0.8, &mut BatchNoise::Fixed(noise))
        .unwrap();
    let bal = balance_kl_loss(tape, out.p_batch).unwrap();
    let total = total_loss(tape, out.mlm, Some(bal), 0.5).unwrap();
    (total, bound)
}

/// End-to-end gradient of `mlm + 0.5·balance_kl` for the micro-model.
pub fn micro_model_grad_check() -> (f64, usize) {
    let model = micro_model(3);
    let mut rng = RngState::new(77);
    let noise: Vec<Tensor> = micro_corpus()
        .iter()
        .map(|d| {
            let len = model.build_input(d, None).unwrap().target_ids.len();
            Tensor::new(vec![len, 3], (0..len * 3).map(|_| rng.gumbel()).collect()).unwrap()
        })
        .collect();
    let mut tape = Tape::new();
    let (total, bound) = micro_loss(&model, &noise, &mut tape, true);
    let grads = tape.backward(total).unwrap();
    let value = |m: &DsbertModel| {
        let mut t = Tape::new();
        let (v, _) = micro_loss(m, &noise, &mut t, false);
        t.value(v).item()
    };
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (k, var) in bound.vars().iter().enumerate() {
        let name = model.param_names()[k].clone();
        let n = model.params()[k].numel();
        let analytic = grads.get(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        for i in 0..n {
            let mut plus = model.clone();
            plus.param_mut(&name).unwrap().data_mut()[i] += FD_STEP;
            let mut minus = model.clone();
            minus.param_mut(&name).unwrap().data_mut()[i] -= FD_STEP;
            let numeric = (value(&plus) - value(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i], numeric));
            checked += 1;
        }
    }
    (worst, checked)
}

pub fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut worst_op: f64 = 0.0;
    let cases = op_cases();
    for c in &cases {
        let e = grad_check(&c.inputs, c.graph.as_ref());
        worst_op = worst_op.max(e);
        if !(e <= GRAD_TOL) {
            failures.push(format!("{} rel err {e:.2e}", c.name));
        }
    }
    let (e2e, n) = micro_model_grad_check();
    if !(e2e <= GRAD_TOL) {
        failures.push(format!("micro-model total loss rel err {e2e:.2e}"));
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 60.0 {
        failures.push(format!("took {secs:.1} s (budget 60 s)"));
    }
    let detail = format!(
        "{} ops worst {worst_op:.1e}; micro-model {n} params worst {e2e:.1e}; {secs:.1} s",
        cases.len()
    );
    if failures.is_empty() { Ok(detail) } else { Err(format!("{detail}; {}", failures.join("; "))) }
}

// ---------------------------------------------------------- loss oracles

pub fn oracle_regularizer(p: &[Vec<f64>]) -> f64 {
    let n = p[0].len();
    let mut total = 0.0;
    for j in 0..n {
        let mut col = 0.0;
        for row in p {
            col += row[j];
        }
        total += col * col;
    }
    total
}

fn oracle_argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for j in 1..row.len() {
        if row[j] > row[best] {
            best = j;
        }
    }
    best
}

pub fn oracle_balance_kl(p: &[Vec<f64>]) -> f64 {
    let kl: f64 = p.iter().map(|row| -row[oracle_argmax(row)].max(1e-12).ln()).sum();
    oracle_regularizer(p) + kl
}

/// Round-robin greedy assignment written as repeated candidate sorting.
pub fn oracle_greedy(p: &[Vec<f64>]) -> Vec<usize> {
    let u = p.len();
    let n = p[0].len();
    let mut owner = vec![usize::MAX; u];
    let mut remaining = u;
    let mut col = 0;
    while remaining > 0 {
        let mut cands: Vec<usize> = (0..u).filter(|&i| owner[i] == usize::MAX).collect();
        cands.sort_by(|&a, &b| p[b][col].partial_cmp(&p[a][col]).unwrap().then(a.cmp(&b)));
        owner[cands[0]] = col;
        remaining -= 1;
        col = (col + 1) % n;
    }
    owner
}

pub fn oracle_top(p: &[Vec<f64>]) -> f64 {
    let n = p[0].len();
    let mut total = 0.0;
    for k in 0..n {
        let mut r = 0;
        for i in 1..p.len() {
            if p[i][k] > p[r][k] {
                r = i;
            }
        }
        total += -p[r][k].max(1e-12).ln();
    }
    total
}

pub fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = RngState::new(99);
    let mut worst: f64 = 0.0;
    let trials = 200;
    for trial in 0..trials {
        let u = 1 + rng.below(12);
        let n = 2 + rng.below(5);
        let p = random_stochastic(u, n, &mut rng);
        let rows = p.to_rows();
        let reg = evaluate_on(&p, balance_regularizer).map_err(|e| e.to_string())?;
        let bkl = evaluate_on(&p, balance_kl_loss).map_err(|e| e.to_string())?;
        let top = evaluate_on(&p, top_balance_loss).map_err(|e| e.to_string())?;
        worst = worst
            .max((reg - oracle_regularizer(&rows)).abs())
            .max((bkl - oracle_balance_kl(&rows)).abs())
            .max((top - oracle_top(&rows)).abs());
        let t = greedy_target(&p);
        let owner = oracle_greedy(&rows);
        let mut counts = vec![0usize; n];
        for i in 0..u {
            let one_hot: Vec<f64> = (0..n).map(|j| f64::from(u8::from(j == owner[i]))).collect();
            if t.row(i) != one_hot.as_slice() {
                return Err(format!("trial {trial}: greedy row {i} {:?} != oracle {:?}", t.row(i), one_hot));
            }
            counts[owner[i]] += 1;
        }
        let (lo, hi) = (u / n, u.div_ceil(n));
        if counts.iter().any(|&c| c < lo || c > hi) {
            return Err(format!("trial {trial}: greedy column counts {counts:?} outside [{lo}, {hi}]"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if worst > 1e-10 {
        return Err(format!("max oracle deviation {worst:.2e} > 1e-10"));
    }
    if secs >= 30.0 {
        return Err(format!("took {secs:.1} s (budget 30 s)"));
    }
    Ok(format!("{trials} random matrices, max deviation {worst:.1e}, greedy counts balanced; {secs:.2} s"))
}

// -------------------------------------------------------- metric oracles

pub fn random_labels(len: usize, n: usize, rng: &mut RngState) -> Vec<usize> {
    (0..len).map(|_| rng.below(n)).collect()
}

pub fn random_sequences(n_seq: usize, n: usize, rng: &mut RngState) -> Vec<Vec<usize>> {
    (0..n_seq).map(|_| random_labels(1 + rng.below(8), n, rng)).collect()
}

pub fn oracle_transition(seqs: &[Vec<usize>], n: usize) -> Vec<Vec<f64>> {
    let mut t = vec![vec![0.0; n]; n];
    for i in 0..n {
        let mut row_total = 0.0;
        for s in seqs {
            for k in 1..s.len() {
                if s[k - 1] == i {
                    row_total += 1.0;
                }
            }
        }
        for j in 0..n {
            let mut c = 0.0;
            for s in seqs {
                for k in 1..s.len() {
                    if s[k - 1] == i && s[k] == j {
                        c += 1.0;
                    }
                }
            }
            t[i][j] = if row_total > 0.0 { c / row_total } else { 1.0 / n as f64 };
        }
    }
    t
}

pub fn oracle_mapping(src: &[usize], dst: &[usize], rows: usize, cols: usize) -> Vec<Vec<f64>> {
    let mut m = vec![vec![0.0; cols]; rows];
    for a in 0..rows {
        let total = src.iter().filter(|&&s| s == a).count();
        for b in 0..cols {
            let both = src.iter().zip(dst).filter(|(&s, &d)| s == a && d == b).count();
            m[a][b] = if total > 0 { both as f64 / total as f64 } else { 1.0 / cols as f64 };
        }
    }
    m
}

pub fn oracle_project(p: &[Vec<f64>], t: &[Vec<f64>], q: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = p.len();
    let m = t.len();
    let mut out = vec![vec![0.0; n]; n];
    for a in 0..n {
        for b in 0..n {
            let mut s = 0.0;
            for i in 0..m {
                for j in 0..m {
                    s += p[a][i] * t[i][j] * q[j][b];
                }
            }
            out[a][b] = s;
        }
    }
    out
}

pub fn oracle_sed(t: &[Vec<f64>], u: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    for a in 0..t.len() {
        for b in 0..t.len() {
            s += (u[a][b] - t[a][b]) * (u[a][b] - t[a][b]);
        }
    }
    s.sqrt() / t.len() as f64
}

pub fn oracle_sce(t: &[Vec<f64>], u: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    for a in 0..t.len() {
        for b in 0..t.len() {
            if t[a][b] > 0.0 {
                s += -u[a][b].max(SCE_EPSILON).ln() * t[a][b];
            }
        }
    }
    s / t.len() as f64
}

fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn random_bijection(n: usize, rng: &mut RngState) -> Vec<usize> {
    let mut sigma: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut sigma);
    sigma
}

pub fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut rng = RngState::new(5150);
    let mut worst: f64 = 0.0;
    for trial in 0..100 {
        let n = 1 + rng.below(5);
        let m = 1 + rng.below(6);
        let mut gold = random_sequences(1 + rng.below(6), n, &mut rng);
        // One sequence visiting every gold state, so the label sets match.
        gold.push(random_bijection(n, &mut rng));
        let pred: Vec<Vec<usize>> = gold.iter().map(|s| random_labels(s.len(), m, &mut rng)).collect();
        let ev = evaluate(&gold, &pred, n, m, SCE_EPSILON).map_err(|e| e.to_string())?;
        let fg = gold.concat();
        let fp = pred.concat();
        let tt = oracle_transition(&gold, n);
        let tp = oracle_transition(&pred, m);
        let g2p = oracle_mapping(&fg, &fp, n, m);
        let p2g = oracle_mapping(&fp, &fg, m, n);
        let proj = oracle_project(&g2p, &tp, &p2g);
        worst = worst
            .max(max_diff(&ev.t_true.probs, &tt))
            .max(max_diff(&ev.t_pred.probs, &tp))
            .max(max_diff(&ev.gold_to_pred.probs, &g2p))
            .max(max_diff(&ev.pred_to_gold.probs, &p2g))
            .max(max_diff(&ev.t_proj.probs, &proj))
            .max((ev.sed - oracle_sed(&tt, &proj)).abs())
            .max((ev.sce - oracle_sce(&tt, &proj)).abs());
        if worst > 1e-12 {
            return Err(format!("trial {trial}: oracle deviation {worst:.2e}"));
        }
        // Relabeling gold itself: exact zero distance.
        let sigma = random_bijection(n, &mut rng);
        let relabeled: Vec<Vec<usize>> = gold.iter().map(|s| s.iter().map(|&x| sigma[x]).collect()).collect();
        let self_ev = evaluate(&gold, &gold, n, n, SCE_EPSILON).map_err(|e| e.to_string())?;
        let perm_ev = evaluate(&gold, &relabeled, n, n, SCE_EPSILON).map_err(|e| e.to_string())?;
        if perm_ev.sed != 0.0 || perm_ev.sce != self_ev.sce {
            return Err(format!(
                "trial {trial}: permuted gold gives sed {} sce {} (identity sce {})",
                perm_ev.sed, perm_ev.sce, self_ev.sce
            ));
        }
        // Relabeling arbitrary predictions leaves both metrics unchanged.
        let tau = random_bijection(m, &mut rng);
        let pred_relabeled: Vec<Vec<usize>> = pred.iter().map(|s| s.iter().map(|&x| tau[x]).collect()).collect();
        let ev2 = evaluate(&gold, &pred_relabeled, n, m, SCE_EPSILON).map_err(|e| e.to_string())?;
        if ev2.sed != ev.sed || ev2.sce != ev.sce {
            return Err(format!(
                "trial {trial}: relabeling changed sed {} -> {}, sce {} -> {}",
                ev.sed, ev2.sed, ev.sce, ev2.sce
            ));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 30.0 {
        return Err(format!("took {secs:.1} s (budget 30 s)"));
    }
    Ok(format!("100 random instances, oracle deviation {worst:.1e}, relabeling invariance exact; {secs:.2} s"))
}

// ------------------------------------------------- uniform-logit exactness

pub fn criterion_4() -> Outcome {
    let corpus = generate_synthetic(&bus_structure(), 12, 6, 13, &mut RngState::new(4)).map_err(|e| e.to_string())?;
    let texts: Vec<String> = corpus.iter().flat_map(|d| d.pairs.iter().map(|p| p.text())).collect();
    let vocab = Vocabulary::build(texts.iter().map(String::as_str), 13);
    let mut cfg = ModelConfig::new(8, vocab.len(), 13);
    cfg.zero_init_heads = true;
    let v = vocab.len();
    let model = DsbertModel::new(cfg, vocab, &mut RngState::new(4)).map_err(|e| e.to_string())?;
    let batch: Vec<_> = corpus.iter().map(|d| model.build_input(d, None)).collect::<Result<_>>().map_err(|e| e.to_string())?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let mut rng = RngState::new(4);
    let out = model
        .forward(&mut tape, &bound, &batch, 1.0, &mut BatchNoise::Sample(&mut rng))
        .map_err(|e| e.to_string())?;
    let mlm = tape.value(out.mlm).item();
    let mlm_err = (mlm - (v as f64).ln()).abs();
    let p_err = tape
        .value(out.p_batch)
        .data()
        .iter()
        .map(|p| (p - 1.0 / 8.0).abs())
        .fold(0.0, f64::max);
    let detail = format!("V={v}: |mlm - ln V| = {mlm_err:.1e}, max |p - 1/8| = {p_err:.1e}");
    if mlm_err <= 1e-9 && p_err <= 1e-9 { Ok(detail) } else { Err(detail) }
}

// ---------------------------------------------------------- anti-collapse

pub const COLLAPSE_SEEDS: [u64; 3] = [1, 2, 3];

pub fn collapse_config(kind: BalanceLossKind, lambda: f64, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        epochs: 10,
        batch_size: 8,
        seed,
        n_state: Some(8),
        d_model: 32,
        n_layers: 1,
        n_heads: 2,
        d_ff: 64,
        eval_every: 10,
        ..TrainConfig::default()
    };
    cfg.loss.kind = kind;
    cfg.loss.lambda = lambda;
    cfg.adam.lr = 1e-3;
    cfg
}

/// States holding at least 5% of pairs under deterministic inference.
pub fn well_used_states(model: &DsbertModel, corpus: &[Dialogue]) -> std::result::Result<(usize, Vec<f64>), String> {
    let seqs: Vec<Vec<usize>> = predict_states(model, corpus)
        .into_iter()
        .map(|r| r.map(|s| s.states).map_err(|e| e.to_string()))
        .collect::<std::result::Result<_, _>>()?;
    let n = model.config().n_state;
    let mut counts = vec![0usize; n];
    for &s in seqs.iter().flatten() {
        counts[s] += 1;
    }
    let total: usize = counts.iter().sum();
    let usage: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    Ok((usage.iter().filter(|&&u| u >= 0.05).count(), usage))
}

/// Process CPU seconds (user + system) from procfs; wall time elsewhere.
pub fn cpu_seconds(wall: Instant) -> f64 {
    let from_proc = std::fs::read_to_string("/proc/self/stat").ok().and_then(|s| {
        // Fields after the parenthesized command name; utime and stime are 14 and 15.
        let rest = &s[s.rfind(')')? + 2..];
        let f: Vec<&str> = rest.split_whitespace().collect();
        let ticks = f.get(11)?.parse::<f64>().ok()? + f.get(12)?.parse::<f64>().ok()?;
        Some(ticks / 100.0)
    });
    from_proc.unwrap_or_else(|| wall.elapsed().as_secs_f64())
}

pub fn criterion_5() -> Outcome {
    let start = Instant::now();
    let cpu_start = cpu_seconds(start);
    let mut lines = Vec::new();
    let mut failed = false;
    for seed in COLLAPSE_SEEDS {
        let corpus = generate_synthetic(&bus_structure(), 500, 6, 13, &mut RngState::new(seed)).map_err(|e| e.to_string())?;
        for kind in [BalanceLossKind::BalanceKl, BalanceLossKind::Greedy, BalanceLossKind::Top] {
            let out = train(&corpus, &collapse_config(kind, 1.0, seed)).map_err(|e| e.to_string())?;
            let (used, _) = well_used_states(&out.model, &corpus)?;
            failed |= used < 4;
            lines.push(format!("{}/seed{seed}: {used}", kind.name()));
        }
    }
    let corpus = generate_synthetic(&bus_structure(), 500, 6, 13, &mut RngState::new(1)).map_err(|e| e.to_string())?;
    let out = train(&corpus, &collapse_config(BalanceLossKind::None, 0.0, 1)).map_err(|e| e.to_string())?;
    let (used0, usage0) = well_used_states(&out.model, &corpus)?;
    let usage0: Vec<String> = usage0.iter().map(|u| format!("{u:.2}")).collect();
    let cpu = cpu_seconds(start) - cpu_start;
    let wall = start.elapsed().as_secs_f64();
    failed |= cpu >= 900.0;
    let detail = format!(
        "states >=5%: {} | lambda=0 contrast: {used0} states, usage [{}] | {cpu:.0} s CPU, {wall:.0} s wall",
        lines.join(", "),
        usage0.join(" ")
    );
    if failed { Err(detail) } else { Ok(detail) }
}

// -------------------------------------------------- structure recovery

pub const RECOVERY_SEEDS: [u64; 3] = [1, 2, 3];

pub fn recovery_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        epochs: 15,
        batch_size: 8,
        seed,
        n_state: Some(5),
        d_model: 32,
        n_layers: 1,
        n_heads: 2,
        d_ff: 64,
        eval_every: 15,
        ..TrainConfig::default()
    };
    cfg.loss.kind = BalanceLossKind::BalanceKl;
    cfg.loss.lambda = 1e-4;
    cfg.adam.lr = 1e-3;
    cfg
}

fn sed_of(gold: &[Vec<usize>], pred: &[Vec<usize>], n_true: usize, n_pred: usize) -> std::result::Result<f64, String> {
    evaluate(gold, pred, n_true, n_pred, SCE_EPSILON).map(|e| e.sed).map_err(|e| e.to_string())
}

pub fn criterion_6() -> Outcome {
    let mut lines = Vec::new();
    let mut failed = false;
    for seed in RECOVERY_SEEDS {
        let start = Instant::now();
        let cpu_start = cpu_seconds(start);
        let corpus = generate_synthetic(&chain_structure(3).unwrap(), 300, 6, 13, &mut RngState::new(seed))
            .map_err(|e| e.to_string())?;
        let gold = gold_sequences(&corpus).ok_or("chain corpus is labeled")?;
        let cfg = recovery_config(seed);
        let out = train(&corpus, &cfg).map_err(|e| e.to_string())?;
        let pred: Vec<Vec<usize>> = predict_states(&out.model, &corpus)
            .into_iter()
            .map(|r| r.map(|s| s.states).map_err(|e| e.to_string()))
            .collect::<std::result::Result<_, _>>()?;
        let secs = cpu_seconds(start) - cpu_start;
        let dsbert = sed_of(&gold, &pred, 3, 5)?;
        let km: Vec<Vec<usize>> = kmeans_baseline(&corpus, 3, seed).map_err(|e| e.to_string())?.into_iter().map(|s| s.states).collect();
        let hm: Vec<Vec<usize>> = hmm_baseline(&corpus, 3, 3, seed).map_err(|e| e.to_string())?.into_iter().map(|s| s.states).collect();
        let km_sed = sed_of(&gold, &km, 3, 3)?;
        let hm_sed = sed_of(&gold, &hm, 3, 3)?;
        let ok = dsbert < 0.10 && dsbert <= km_sed.min(hm_sed) + 0.02 && secs < 600.0 && out.log.len() <= 30;
        failed |= !ok;
        lines.push(format!(
            "seed{seed}: dsbert {dsbert:.3} kmeans {km_sed:.3} hmm {hm_sed:.3} ({} epochs, {secs:.0} s CPU)",
            out.log.len()
        ));
    }
    let detail = lines.join(" | ");
    if failed { Err(detail) } else { Ok(detail) }
}

// --------------------------------------------------- baseline correctness

pub fn random_hmm(n: usize, v: usize, rng: &mut RngState) -> HmmModel {
    let simplex = |k: usize, rng: &mut RngState| {
        let raw: Vec<f64> = (0..k).map(|_| rng.uniform()).collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|x| x / s).collect::<Vec<f64>>()
    };
    let init = simplex(n, rng);
    let trans = (0..n).map(|_| simplex(n, rng)).collect();
    let emit = (0..n).map(|_| simplex(v, rng)).collect();
    HmmModel::new(init, trans, emit).unwrap()
}

/// Highest-probability path by enumerating all `n^len` paths.
pub fn brute_force_path(model: &HmmModel, obs: &[usize]) -> (Vec<usize>, f64) {
    let n = model.n_hidden();
    let total = n.pow(obs.len() as u32);
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    for code in 0..total {
        let mut c = code;
        let path: Vec<usize> = (0..obs.len())
            .map(|_| {
                let s = c % n;
                c /= n;
                s
            })
            .collect();
        let lp = model.path_log_prob(obs, &path);
        if lp > best.1 {
            best = (path, lp);
        }
    }
    best
}

pub fn hmm_recovery() -> std::result::Result<f64, String> {
    let truth = HmmModel::new(
        vec![0.5, 0.5],
        vec![vec![0.85, 0.15], vec![0.25, 0.75]],
        vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.2, 0.7]],
    )
    .map_err(|e| e.to_string())?;
    let mut rng = RngState::new(12);
    let seqs: Vec<Vec<usize>> = (0..1000).map(|_| truth.sample(20, &mut rng).1).collect();
    let fit = hmm_fit(&seqs, 2, &mut rng, 500, 1e-9).map_err(|e| e.to_string())?;
    let a = &fit.model.trans;
    let err = |perm: [usize; 2]| {
        let mut e: f64 = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                e = e.max((a[perm[i]][perm[j]] - truth.trans[i][j]).abs());
            }
        }
        e
    };
    Ok(err([0, 1]).min(err([1, 0])))
}

pub fn criterion_7() -> Outcome {
    let mut rng = RngState::new(7);
    let mut worst_drop: f64 = 0.0;
    for _ in 0..100 {
        let n = 2 + rng.below(3);
        let v = 2 + rng.below(4);
        let truth = random_hmm(n, v, &mut rng);
        let seqs: Vec<Vec<usize>> = (0..10).map(|_| truth.sample(2 + rng.below(15), &mut rng).1).collect();
        let start = random_hmm(n, v, &mut rng);
        let fit = hmm_fit_from(&seqs, start, 30, f64::NEG_INFINITY).map_err(|e| e.to_string())?;
        for w in fit.loglik_history.windows(2) {
            worst_drop = worst_drop.max(w[0] - w[1]);
        }
    }
    if worst_drop > 1e-9 {
        return Err(format!("Baum-Welch log-likelihood dropped by {worst_drop:.2e}"));
    }
    for trial in 0..50 {
        let m = random_hmm(3, 4, &mut rng);
        let obs: Vec<usize> = (0..5).map(|_| rng.below(4)).collect();
        let d = hmm_decode(&m, &obs);
        let (path, lp) = brute_force_path(&m, &obs);
        if d.states != path || (d.log_prob - lp).abs() > 1e-12 {
            return Err(format!("trial {trial}: viterbi {:?} ({}) vs exhaustive {path:?} ({lp})", d.states, d.log_prob));
        }
    }
    for trial in 0..20 {
        let k = 2 + rng.below(6);
        let x: Vec<Vec<f64>> = (0..100).map(|_| (0..4).map(|_| rng.normal()).collect()).collect();
        let fit = kmeans_fit(&x, k, &mut rng, 100).map_err(|e| e.to_string())?;
        if fit.inertia_history.windows(2).any(|w| w[1] > w[0] + 1e-12) {
            return Err(format!("trial {trial}: inertia increased {:?}", fit.inertia_history));
        }
    }
    let rec = hmm_recovery()?;
    let detail = format!(
        "BW worst drop {worst_drop:.1e} over 100 instances; Viterbi = exhaustive on 50; k-means inertia monotone on 20; 2-state A max error {rec:.3}"
    );
    if rec <= 0.05 { Ok(detail) } else { Err(detail) }
}

// ------------------------------------------------------------ determinism

pub fn determinism_run(seed: u64) -> std::result::Result<(String, String, String, String), String> {
    let corpus = generate_synthetic(&bus_structure(), 30, 6, 13, &mut RngState::new(seed)).map_err(|e| e.to_string())?;
    let corpus_json = corpus_to_json(&corpus);
    let cfg = TrainConfig {
        epochs: 2,
        seed,
        d_model: 16,
        n_layers: 1,
        d_ff: 32,
        ..TrainConfig::default()
    };
    let out = train(&corpus, &cfg).map_err(|e| e.to_string())?;
    let ckpt = serde_json::to_string(&out.model.to_checkpoint()).map_err(|e| e.to_string())?;
    let gold = gold_sequences(&corpus).ok_or("labeled")?;
    let pred: Vec<Vec<usize>> = predict_states(&out.model, &corpus)
        .into_iter()
        .map(|r| r.map(|s| s.states).map_err(|e| e.to_string()))
        .collect::<std::result::Result<_, _>>()?;
    let report = evaluate(&gold, &pred, 6, out.model.config().n_state, SCE_EPSILON).map_err(|e| e.to_string())?;
    let report_json = serde_json::to_string(&report.report(true)).map_err(|e| e.to_string())?;
    Ok((corpus_json, ckpt, dsbert_core::trainer::write_log(&out.log), report_json))
}

pub fn criterion_8() -> Outcome {
    let a = determinism_run(21)?;
    let b = determinism_run(21)?;
    let c = determinism_run(22)?;
    let same = [a.0 == b.0, a.1 == b.1, a.2 == b.2, a.3 == b.3];
    let names = ["corpus", "checkpoint", "log", "report"];
    let bad: Vec<&str> = names.iter().zip(same).filter(|(_, s)| !s).map(|(n, _)| *n).collect();
    if !bad.is_empty() {
        return Err(format!("not bitwise identical: {}", bad.join(", ")));
    }
    if a.0 == c.0 || a.1 == c.1 {
        return Err("a different seed produced identical artifacts".into());
    }
    Ok(format!(
        "corpus {} B, checkpoint {} B, log, report identical across runs; seed change alters output",
        a.0.len(),
        a.1.len()
    ))
}

// ---------------------------------------------------------------- goldens

pub const TOKENIZER_INPUTS: [&str; 6] = [
    "Where is the bus?",
    "QUERY loc=Penn time=5 PM RET bus=61C",
    "  hello ,   which stop do you start at ?  ",
    "Take bus 28, it departs 9 am.",
    "it's (almost) noon!",
    "",
];

pub fn tokenizer_table() -> String {
    let mut out = String::new();
    for s in TOKENIZER_INPUTS {
        out.push_str(&format!("{s:?}\t{}\n", tokenize(s).join(" ")));
    }
    out
}

pub const TFIDF_DOCS: [&str; 3] = ["the bus leaves now", "the bus is late the bus", "weather is sunny now"];

pub fn tfidf_table() -> String {
    let model = TfIdfModel::fit(&TFIDF_DOCS).unwrap();
    let mut out = String::from("term\tdf\tidf\td0\td1\td2\n");
    let vecs: Vec<Vec<f64>> = TFIDF_DOCS.iter().map(|d| model.vector(d)).collect();
    for (k, term) in model.terms().enumerate() {
        out.push_str(&format!("{term}\t{}\t{:.12}", model.doc_freq(term), model.idf(term)));
        for v in &vecs {
            out.push_str(&format!("\t{:.12}", v[k]));
        }
        out.push('\n');
    }
    out
}

pub fn bus_dot() -> String {
    let bus = bus_structure();
    let t = TransitionMatrix::from_probs(bus.trans.clone()).unwrap();
    let g = extract_structure(&t, Some(&bus.states), 0.15).unwrap();
    export_dot(&g)
}

pub fn metric_examples() -> (f64, f64, String) {
    let eye = TransitionMatrix::from_probs(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let swap = TransitionMatrix::from_probs(vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
    let uniform = TransitionMatrix::from_probs(vec![vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
    let truth = TransitionMatrix::from_probs(vec![vec![0.3, 0.7], vec![0.9, 0.1]]).unwrap();
    let s = sed(&eye, &swap).unwrap();
    let c = sce(&truth, &uniform, SCE_EPSILON).unwrap().value;
    (s, c, format!("sed_swap\t{s:.15}\nsce_uniform\t{c:.15}\n"))
}

pub fn criterion_9() -> Outcome {
    let mut parts = Vec::new();
    parts.push(check_golden("tokenizer.tsv", &tokenizer_table())?);
    parts.push(check_golden("tfidf_toy.tsv", &tfidf_table())?);
    parts.push(check_golden("bus_gold.dot", &bus_dot())?);
    let (s, c, text) = metric_examples();
    parts.push(check_golden("metrics.tsv", &text)?);
    if s != 1.0 || (c - std::f64::consts::LN_2).abs() > 1e-15 {
        return Err(format!("sed swap {s}, sce uniform {c}"));
    }
    Ok(parts.join(", "))
}

/// Unused-symbol guard so helpers referenced only by some test crates do
/// not trip the mapping and projection imports.
pub fn _touch() {
    let _ = (estimate_transition, mapping_matrix, project_transition, MappingDirection::GoldToPred);
}
