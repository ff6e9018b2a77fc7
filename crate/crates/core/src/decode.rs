//! Prediction: local predictive distributions, the iterative
//! refined-normalized-score decoder and a Viterbi baseline for
//! previous-label chains.

use ndarray::prelude::*;

use crate::corpus::{Corpus, Sentence};
use crate::error::{GpslError, Result};
use crate::kernel::{kernel_eval, solve_lower_vec};
use crate::model::{pair_index, TrainedModel};

/// Predictive mean and variance of every local latent function at every
/// position of one sentence (both L x J).
#[derive(Debug, Clone)]
pub struct PredictiveLocal {
    pub means: Array2<f64>,
    pub vars: Array2<f64>,
}

/// Per-position label distribution produced by the iterative decoder.
#[derive(Debug, Clone)]
pub struct RnsTable {
    /// L x J; every row sums to 1.
    pub probs: Array2<f64>,
    /// Refinement iterations performed (0 = the dependency-free table).
    pub iterations: usize,
    pub converged: bool,
    /// Tables after every iteration, when snapshot recording is on.
    pub snapshots: Option<Vec<Array2<f64>>>,
}

#[derive(Debug, Clone)]
pub struct RnsDecode {
    pub labels: Vec<usize>,
    pub table: RnsTable,
}

/// Negative predictive variances further below this are reported.
const VARIANCE_CLAMP_TOL: f64 = -1e-8;

/// Predictive distribution of each local latent function for one sentence:
/// mean `k_*^T K^{-1} m` and variance
/// `k_** - k_*^T (K^{-1} - K^{-1} V K^{-1}) k_*`, evaluated through the
/// cached site factors as `k_** - |L_B^{-1} S k_*|^2`.
pub fn predictive_local(model: &TrainedModel, sentence: &Sentence) -> Result<PredictiveLocal> {
    let cache = model.posterior()?;
    let j_count = model.label_count();
    let l_count = sentence.len();
    let xs: Vec<&[u32]> = model.x_train.iter().map(|r| r.as_slice()).collect();
    let mut means = Array2::<f64>::zeros((l_count, j_count));
    let mut vars = Array2::<f64>::zeros((l_count, j_count));
    let shared_kernel = model.kernels.len() == 1;
    for (l, token) in sentence.tokens.iter().enumerate() {
        let shared_k_star = shared_kernel
            .then(|| crate::kernel::kernel_vec(&model.kernels[0], &xs, &token.features));
        for j in 0..j_count {
            let spec = model.kernel_for_label(j);
            let own;
            let k_star = match &shared_k_star {
                Some(k) => k,
                None => {
                    own = crate::kernel::kernel_vec(spec, &xs, &token.features);
                    &own
                }
            };
            let post = &cache.labels[j];
            means[[l, j]] = k_star.dot(&post.alpha);
            let k_ss = kernel_eval(spec, &token.features, &token.features);
            let scaled = &post.sqrt_lambda * k_star;
            let w = solve_lower_vec(&post.l_b, &scaled)?;
            let mut v = k_ss - w.dot(&w);
            if v < 0.0 {
                if v < VARIANCE_CLAMP_TOL {
                    log::warn!(
                        "predictive variance {v:.3e} clamped to 0 at position {l}, label {j}"
                    );
                }
                v = 0.0;
            }
            vars[[l, j]] = v;
        }
    }
    Ok(PredictiveLocal { means, vars })
}

/// Contribution of dependent label `a` to target label `b` under
/// dependency `d`: `m^{Sd} + v^{Sd}/2` at the pair index.
pub fn g_term(model: &TrainedModel, d: usize, a: usize, b: usize) -> f64 {
    let k = pair_index(a, b, model.label_count());
    model.state.m_s[d][k] + 0.5 * model.state.v_s[d][k]
}

fn softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

fn argmax_row(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best // ties stay at the smaller label id
}

/// Decode one sentence by iterating the refined normalized score to a fixed
/// point (Jacobi updates from the previous table, out-of-range dependencies
/// omitted). Ties in the final argmax go to the smaller label id.
pub fn rns_decode(
    model: &TrainedModel,
    sentence: &Sentence,
    tol: f64,
    max_iter: usize,
) -> Result<RnsDecode> {
    rns_decode_with(model, sentence, tol, max_iter, false)
}

/// Like [`rns_decode`] but optionally keeping a snapshot of the table after
/// every iteration.
pub fn rns_decode_with(
    model: &TrainedModel,
    sentence: &Sentence,
    tol: f64,
    max_iter: usize,
    keep_snapshots: bool,
) -> Result<RnsDecode> {
    if !(tol > 0.0) {
        return Err(GpslError::Argument(format!("rns tolerance must be positive, got {tol}")));
    }
    if max_iter < 1 {
        return Err(GpslError::Argument("rns max_iter must be at least 1".into()));
    }
    let local = predictive_local(model, sentence)?;
    let j_count = model.label_count();
    let l_count = sentence.len();
    let r_count = model.dependency_count();
    // base scores m + v/2 and the dependency-free table
    let base = &local.means + &(&local.vars * 0.5);
    let mut table = softmax_rows(&base);
    let mut snapshots = keep_snapshots.then(|| vec![table.clone()]);
    // g matrices per dependency: g[d][[a, b]]
    let g: Vec<Array2<f64>> = (0..r_count)
        .map(|d| Array2::from_shape_fn((j_count, j_count), |(a, b)| g_term(model, d, a, b)))
        .collect();
    let mut iterations = 0;
    let mut converged = r_count == 0 && max_iter >= 1;
    for _ in 0..max_iter {
        iterations += 1;
        let mut scores = base.clone();
        for l in 0..l_count {
            for (d, &off) in model.deps.offsets().iter().enumerate() {
                let p = l as i64 + off as i64;
                if p < 0 || p >= l_count as i64 {
                    continue;
                }
                let neighbor = table.row(p as usize);
                for b in 0..j_count {
                    let mut acc = 0.0;
                    for a in 0..j_count {
                        acc += neighbor[a] * g[d][[a, b]];
                    }
                    scores[[l, b]] += acc;
                }
            }
        }
        let next = softmax_rows(&scores);
        let delta = (&next - &table)
            .iter()
            .map(|d| d.abs())
            .fold(0.0, f64::max);
        table = next;
        if let Some(s) = snapshots.as_mut() {
            s.push(table.clone());
        }
        if delta < tol {
            converged = true;
            break;
        }
    }
    let labels = (0..l_count).map(|l| argmax_row(table.row(l))).collect();
    Ok(RnsDecode {
        labels,
        table: RnsTable {
            probs: table,
            iterations,
            converged,
            snapshots,
        },
    })
}

/// Exact max-sum decoding for the previous-label chain {-1}: node scores
/// `m + v/2`, edge scores `g^1(prev, cur)`. Ties go to the smaller label id.
pub fn viterbi_decode(model: &TrainedModel, sentence: &Sentence) -> Result<Vec<usize>> {
    if !model.deps.is_previous_chain() {
        return Err(GpslError::UnsupportedDependency(format!(
            "viterbi requires the dependency set -1, model has {{{}}}",
            model.deps.to_string_list()
        )));
    }
    let local = predictive_local(model, sentence)?;
    let node = &local.means + &(&local.vars * 0.5);
    let j_count = model.label_count();
    let l_count = sentence.len();
    let mut delta = Array2::<f64>::zeros((l_count, j_count));
    let mut back = Array2::<usize>::zeros((l_count, j_count));
    for b in 0..j_count {
        delta[[0, b]] = node[[0, b]];
    }
    for l in 1..l_count {
        for b in 0..j_count {
            let mut best_a = 0;
            let mut best = f64::NEG_INFINITY;
            for a in 0..j_count {
                let score = delta[[l - 1, a]] + g_term(model, 0, a, b);
                if score > best {
                    best = score;
                    best_a = a;
                }
            }
            delta[[l, b]] = node[[l, b]] + best;
            back[[l, b]] = best_a;
        }
    }
    let mut path = vec![0usize; l_count];
    path[l_count - 1] = argmax_row(delta.row(l_count - 1));
    for l in (1..l_count).rev() {
        path[l - 1] = back[[l, path[l]]];
    }
    Ok(path)
}

/// Which decoder to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decoder {
    Rns,
    Viterbi,
}

impl Decoder {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "rns" => Ok(Decoder::Rns),
            "viterbi" => Ok(Decoder::Viterbi),
            other => Err(GpslError::Argument(format!("unknown decoder {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Decoder::Rns => "rns",
            Decoder::Viterbi => "viterbi",
        }
    }
}

/// Predictions for a whole corpus: label ids per sentence, with max-RNS
/// confidences and iteration counts where the RNS decoder ran.
#[derive(Debug, Clone)]
pub struct Predictions {
    pub labels: Vec<Vec<usize>>,
    pub confidences: Vec<Vec<f64>>,
    pub iterations: Vec<usize>,
    pub nonconverged: usize,
}

/// Decode every sentence of an expanded corpus.
pub fn decode_corpus(
    model: &TrainedModel,
    corpus: &Corpus,
    decoder: Decoder,
    rns_tol: f64,
    rns_max_iter: usize,
) -> Result<Predictions> {
    let mut labels = Vec::with_capacity(corpus.sentences.len());
    let mut confidences = Vec::with_capacity(corpus.sentences.len());
    let mut iterations = Vec::new();
    let mut nonconverged = 0;
    for sentence in &corpus.sentences {
        match decoder {
            Decoder::Rns => {
                let out = rns_decode(model, sentence, rns_tol, rns_max_iter)?;
                let conf = out
                    .labels
                    .iter()
                    .enumerate()
                    .map(|(l, &y)| out.table.probs[[l, y]])
                    .collect();
                if !out.table.converged {
                    nonconverged += 1;
                }
                iterations.push(out.table.iterations);
                labels.push(out.labels);
                confidences.push(conf);
            }
            Decoder::Viterbi => {
                let path = viterbi_decode(model, sentence)?;
                confidences.push(vec![1.0; path.len()]);
                labels.push(path);
            }
        }
    }
    Ok(Predictions {
        labels,
        confidences,
        iterations,
        nonconverged,
    })
}

impl Predictions {
    pub fn mean_iterations(&self) -> f64 {
        if self.iterations.is_empty() {
            return 0.0;
        }
        self.iterations.iter().sum::<usize>() as f64 / self.iterations.len() as f64
    }
}

/// Render predictions in the output format: the input columns plus one
/// appended column with the predicted label string, and optionally a second
/// appended column with the max-RNS confidence (6 decimal places).
pub fn format_predictions(
    model: &TrainedModel,
    corpus: &Corpus,
    predictions: &Predictions,
    with_confidence: bool,
) -> String {
    let mut out = String::new();
    for (si, sentence) in corpus.sentences.iter().enumerate() {
        if si > 0 {
            out.push('\n');
        }
        for (ti, token) in sentence.tokens.iter().enumerate() {
            out.push_str(&token.columns.join("\t"));
            out.push('\t');
            out.push_str(model.label_alphabet.name(predictions.labels[si][ti]));
            if with_confidence {
                out.push_str(&format!("\t{:.6}", predictions.confidences[si][ti]));
            }
            out.push('\n');
        }
    }
    out
}
