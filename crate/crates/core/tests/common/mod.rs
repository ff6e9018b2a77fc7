//! Shared fixtures and independent oracle implementations used by the
//! integration suites. Everything here deliberately avoids the library's
//! site-parameterized code paths: bounds and posteriors are evaluated with
//! dense inverses, decoders by exhaustive enumeration or plain loops.
#![allow(dead_code)]

use gpsl::corpus::{Alphabet, Corpus, Sentence, Token};
use gpsl::inference::{DepLabel, TokenContext};
use gpsl::kernel::{kernel_eval, KernelSpec};
use gpsl::model::{pair_index, DependencySet, TrainedModel, VariationalState};
use ndarray::prelude::*;
use ndarray_linalg::cholesky::{FactorizeC, UPLO};
use ndarray_linalg::eigh::Eigh;
use ndarray_linalg::solve::Inverse;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rel_err_norm(analytic: &Array1<f64>, fd: &Array1<f64>) -> f64 {
    let num = (analytic - fd).iter().map(|d| d * d).sum::<f64>().sqrt();
    let den = fd.iter().map(|d| d * d).sum::<f64>().sqrt().max(1e-8);
    num / den
}

pub fn rel_err_scalar(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / fd.abs().max(1e-8)
}

/// Hand-built corpus with controllable shape, feature sparsity and missing
/// labels; labels/features are interned in id order.
pub fn random_corpus(
    sentences: usize,
    max_len: usize,
    labels: usize,
    feature_dim: u32,
    missing_prob: f64,
    seed: u64,
) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut label_alphabet = Alphabet::new();
    for j in 0..labels {
        label_alphabet.intern(&format!("L{j}"));
    }
    let mut feature_alphabet = Alphabet::new();
    for f in 0..feature_dim {
        feature_alphabet.intern(&format!("F{f}"));
    }
    let mut sents = Vec::new();
    for _ in 0..sentences {
        let len = rng.random_range(1..=max_len);
        let tokens = (0..len)
            .map(|_| {
                let mut features: Vec<u32> = (0..feature_dim)
                    .filter(|_| rng.random::<f64>() < 0.45)
                    .collect();
                if features.is_empty() {
                    features.push(rng.random_range(0..feature_dim));
                }
                features.sort_unstable();
                let label = if rng.random::<f64>() < missing_prob {
                    None
                } else {
                    Some(rng.random_range(0..labels))
                };
                Token {
                    columns: vec!["w".into(), "?".into()],
                    features,
                    label,
                }
            })
            .collect();
        sents.push(Sentence { tokens });
    }
    // guarantee at least one observed label
    if sents
        .iter()
        .all(|s: &Sentence| s.tokens.iter().all(|t| t.label.is_none()))
    {
        sents[0].tokens[0].label = Some(0);
    }
    Corpus {
        sentences: sents,
        label_alphabet,
        feature_alphabet,
    }
}

/// Random interior point of the variational parameter space.
pub fn random_state(
    labels: usize,
    tokens: usize,
    deps: usize,
    seed: u64,
) -> VariationalState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
    let j2 = labels * labels;
    VariationalState {
        m_u: (0..labels)
            .map(|_| Array1::from_iter((0..tokens).map(|_| uniform(-0.8, 0.8))))
            .collect(),
        lambda_u: (0..labels)
            .map(|_| Array1::from_iter((0..tokens).map(|_| uniform(0.05, 0.95))))
            .collect(),
        m_s: (0..deps)
            .map(|_| Array1::from_iter((0..j2).map(|_| uniform(-0.8, 0.8))))
            .collect(),
        v_s: (0..deps)
            .map(|_| Array1::from_iter((0..j2).map(|_| uniform(0.3, 1.0))))
            .collect(),
    }
}

/// A random trained model over random inputs, for decoder tests.
pub fn random_model(
    labels: usize,
    train_tokens: usize,
    deps: DependencySet,
    feature_dim: u32,
    scale: f64,
    seed: u64,
) -> TrainedModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut label_alphabet = Alphabet::new();
    for j in 0..labels {
        label_alphabet.intern(&format!("L{j}"));
    }
    let mut feature_alphabet = Alphabet::new();
    for f in 0..feature_dim {
        feature_alphabet.intern(&format!("F{f}"));
    }
    let x_train: Vec<Vec<u32>> = (0..train_tokens)
        .map(|_| {
            let mut ids: Vec<u32> = (0..feature_dim)
                .filter(|_| rng.random::<f64>() < 0.4)
                .collect();
            if ids.is_empty() {
                ids.push(rng.random_range(0..feature_dim));
            }
            ids.sort_unstable();
            ids
        })
        .collect();
    let j2 = labels * labels;
    let mut uniform = |lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
    let state = VariationalState {
        m_u: (0..labels)
            .map(|_| Array1::from_iter((0..train_tokens).map(|_| scale * uniform(-1.0, 1.0))))
            .collect(),
        lambda_u: (0..labels)
            .map(|_| Array1::from_iter((0..train_tokens).map(|_| uniform(0.05, 0.95))))
            .collect(),
        m_s: (0..deps.len())
            .map(|_| Array1::from_iter((0..j2).map(|_| scale * uniform(-1.0, 1.0))))
            .collect(),
        v_s: (0..deps.len())
            .map(|_| Array1::from_iter((0..j2).map(|_| uniform(0.3, 1.0))))
            .collect(),
    };
    TrainedModel::new(
        label_alphabet,
        feature_alphabet,
        vec![KernelSpec::linear(1.0).with_jitter(1e-6)],
        deps,
        x_train,
        state,
    )
    .unwrap()
}

/// Random test sentence over the same feature space.
pub fn random_sentence(length: usize, feature_dim: u32, seed: u64) -> Sentence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Sentence {
        tokens: (0..length)
            .map(|_| {
                let mut ids: Vec<u32> = (0..feature_dim)
                    .filter(|_| rng.random::<f64>() < 0.4)
                    .collect();
                if ids.is_empty() {
                    ids.push(rng.random_range(0..feature_dim));
                }
                ids.sort_unstable();
                Token {
                    columns: vec!["w".into(), "?".into()],
                    features: ids,
                    label: None,
                }
            })
            .collect(),
    }
}

fn logsumexp_slice(row: &[f64]) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Dense Gram matrix (with jitter) assembled directly from kernel calls.
pub fn dense_gram(spec: &KernelSpec, xs: &[&[u32]]) -> Array2<f64> {
    let n = xs.len();
    let mut k = Array2::<f64>::zeros((n, n));
    for s in 0..n {
        for t in 0..n {
            k[[s, t]] = kernel_eval(spec, xs[s], xs[t]);
        }
        k[[s, s]] += spec.jitter;
    }
    k
}

fn ln_det_spd(m: &Array2<f64>) -> f64 {
    2.0 * m
        .factorizec(UPLO::Lower)
        .expect("SPD matrix")
        .into_lower()
        .diag()
        .iter()
        .map(|d| d.ln())
        .sum::<f64>()
}

/// Independent dense evaluation of the variational lower bound: V^{Uj}
/// formed by explicit inversion of (K^{-1} + diag(lambda)), all traces and
/// determinants dense, softmax re-implemented locally.
pub struct DenseBound {
    pub k: Vec<Array2<f64>>,
    pub omega: Vec<Array2<f64>>,
    pub contexts: Vec<TokenContext>,
    pub labels: usize,
}

impl DenseBound {
    pub fn new(corpus: &Corpus, deps: &DependencySet, kernels: &[KernelSpec]) -> Self {
        let xs = corpus.flat_features();
        let labels = corpus.label_count();
        let k: Vec<Array2<f64>> = if kernels.len() == 1 {
            vec![dense_gram(&kernels[0], &xs); labels]
        } else {
            kernels.iter().map(|s| dense_gram(s, &xs)).collect()
        };
        let omega = k.iter().map(|k| k.inv().expect("invertible Gram")).collect();
        DenseBound {
            k,
            omega,
            contexts: gpsl::inference::build_contexts(corpus, deps),
            labels,
        }
    }

    pub fn dense_v(&self, j: usize, lambda: &Array1<f64>) -> Array2<f64> {
        let mut prec = self.omega[j].clone();
        for t in 0..lambda.len() {
            prec[[t, t]] += lambda[t];
        }
        prec.inv().expect("invertible precision")
    }

    /// Scores s_t(q) given explicit V diagonals.
    pub fn scores(&self, state: &VariationalState, vdiags: &[Array1<f64>]) -> Array2<f64> {
        let n = self.contexts.len();
        let mut scores = Array2::<f64>::zeros((n, self.labels));
        for (t, ctx) in self.contexts.iter().enumerate() {
            for q in 0..self.labels {
                let mut s = state.m_u[q][t] + 0.5 * vdiags[q][t];
                for (d, dl) in ctx.dep_labels.iter().enumerate() {
                    if let DepLabel::Active(a) = dl {
                        let k = pair_index(*a, q, self.labels);
                        s += state.m_s[d][k] + 0.5 * state.v_s[d][k];
                    }
                }
                scores[[t, q]] = s;
            }
        }
        scores
    }

    pub fn bound_with_v(&self, state: &VariationalState, vs: &[Array2<f64>]) -> f64 {
        let mut kl_u = 0.0;
        for j in 0..self.labels {
            let v = &vs[j];
            let ln_det_vo = ln_det_spd(v) - ln_det_spd(&self.k[j]);
            let tr = v.dot(&self.omega[j]).diag().sum();
            let quad = state.m_u[j].dot(&self.omega[j].dot(&state.m_u[j]));
            kl_u += ln_det_vo - tr - quad;
        }
        kl_u *= 0.5;
        let mut kl_s = 0.0;
        for d in 0..state.m_s.len() {
            kl_s += state.v_s[d].iter().map(|&x| x.ln() - x).sum::<f64>()
                - state.m_s[d].dot(&state.m_s[d]);
        }
        kl_s *= 0.5;
        let vdiags: Vec<Array1<f64>> = vs.iter().map(|v| v.diag().to_owned()).collect();
        let scores = self.scores(state, &vdiags);
        let mut lik = 0.0;
        for (t, ctx) in self.contexts.iter().enumerate() {
            let Some(y) = ctx.label else { continue };
            let mut num = state.m_u[y][t];
            for (d, dl) in ctx.dep_labels.iter().enumerate() {
                if let DepLabel::Active(a) = dl {
                    num += state.m_s[d][pair_index(*a, y, self.labels)];
                }
            }
            let row: Vec<f64> = (0..self.labels).map(|q| scores[[t, q]]).collect();
            lik += num - logsumexp_slice(&row);
        }
        kl_u + kl_s + lik
    }

    /// Bound with V^{Uj} implied by the state's site parameters.
    pub fn bound(&self, state: &VariationalState) -> f64 {
        let vs: Vec<Array2<f64>> = (0..self.labels)
            .map(|j| self.dense_v(j, &state.lambda_u[j]))
            .collect();
        self.bound_with_v(state, &vs)
    }
}

/// Project a symmetric matrix onto the SPD cone by eigenvalue clamping.
pub fn project_spd(v: &Array2<f64>, floor: f64) -> Array2<f64> {
    let sym = 0.5 * (v + &v.t());
    let (vals, vecs) = sym.eigh(UPLO::Lower).expect("eigendecomposition");
    let clamped = vals.mapv(|x| x.max(floor));
    let scaled = &vecs * &clamped.view().insert_axis(Axis(0));
    scaled.dot(&vecs.t())
}

/// Maximize the bound over one dense V^{Uj} by projected gradient ascent,
/// everything else held fixed. Returns the optimal dense covariance.
pub fn dense_v_projected_gradient(
    db: &DenseBound,
    state: &VariationalState,
    j: usize,
    iterations: usize,
) -> Array2<f64> {
    let n = db.contexts.len();
    let omega = &db.omega[j];
    // score parts that do not move with V_j's diagonal
    let vdiags: Vec<Array1<f64>> = (0..db.labels)
        .map(|q| db.dense_v(q, &state.lambda_u[q]).diag().to_owned())
        .collect();
    let all_scores = db.scores(state, &vdiags);
    let base_j: Vec<f64> = (0..n)
        .map(|t| all_scores[[t, j]] - 0.5 * vdiags[j][t])
        .collect();
    let observed: Vec<usize> = db
        .contexts
        .iter()
        .enumerate()
        .filter_map(|(t, c)| c.label.map(|_| t))
        .collect();
    let objective = |v: &Array2<f64>| -> f64 {
        let ln_det = ln_det_spd(v);
        let tr = v.dot(omega).diag().sum();
        let mut lik = 0.0;
        for &t in &observed {
            let row: Vec<f64> = (0..db.labels)
                .map(|q| {
                    if q == j {
                        base_j[t] + 0.5 * v[[t, t]]
                    } else {
                        all_scores[[t, q]]
                    }
                })
                .collect();
            lik -= logsumexp_slice(&row);
        }
        0.5 * (ln_det - tr) + lik
    };
    let mut v = db.k[j].clone();
    let mut f_cur = objective(&v);
    let mut base_step = 1.0f64;
    let mut stalled = 0;
    for _ in 0..iterations {
        let v_inv = v.inv().expect("invertible V");
        let mut grad = 0.5 * (&v_inv - omega);
        for &t in &observed {
            let row: Vec<f64> = (0..db.labels)
                .map(|q| {
                    if q == j {
                        base_j[t] + 0.5 * v[[t, t]]
                    } else {
                        all_scores[[t, q]]
                    }
                })
                .collect();
            let lse = logsumexp_slice(&row);
            let sigma_j = (row[j] - lse).exp();
            grad[[t, t]] -= 0.5 * sigma_j;
        }
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm < 1e-13 {
            break;
        }
        // line search restarted from a base step every iteration
        let mut step = base_step;
        let mut advanced = false;
        while step > 1e-16 {
            let cand = project_spd(&(&v + &(&grad * step)), 1e-12);
            let f_cand = objective(&cand);
            if f_cand > f_cur {
                stalled = if f_cand - f_cur < 1e-15 * f_cur.abs().max(1.0) {
                    stalled + 1
                } else {
                    0
                };
                v = cand;
                f_cur = f_cand;
                base_step = (step * 4.0).min(4.0);
                advanced = true;
                break;
            }
            step *= 0.5;
        }
        if !advanced || stalled > 30 {
            break;
        }
    }
    v
}

/// Independent GP multi-class softmax trainer (no dependency structure):
/// dense covariances, plain gradient ascent on the means and a dense fixed
/// point on the covariances. Used as the R=0 oracle.
pub struct MulticlassOracle {
    pub k: Array2<f64>,
    pub omega: Array2<f64>,
    pub y: Vec<Option<usize>>,
    pub labels: usize,
    pub m: Vec<Array1<f64>>,
    pub v: Vec<Array2<f64>>,
}

impl MulticlassOracle {
    pub fn new(spec: &KernelSpec, xs: &[&[u32]], y: Vec<Option<usize>>, labels: usize) -> Self {
        let k = dense_gram(spec, xs);
        let omega = k.inv().expect("invertible Gram");
        let n = xs.len();
        MulticlassOracle {
            m: vec![Array1::zeros(n); labels],
            v: vec![k.clone(); labels],
            k,
            omega,
            y,
            labels,
        }
    }

    fn scores(&self) -> Array2<f64> {
        let n = self.y.len();
        Array2::from_shape_fn((n, self.labels), |(t, q)| {
            self.m[q][t] + 0.5 * self.v[q][[t, t]]
        })
    }

    pub fn bound(&self) -> f64 {
        let mut kl = 0.0;
        for j in 0..self.labels {
            let ln_det_vo = ln_det_spd(&self.v[j]) - ln_det_spd(&self.k);
            let tr = self.v[j].dot(&self.omega).diag().sum();
            let quad = self.m[j].dot(&self.omega.dot(&self.m[j]));
            kl += ln_det_vo - tr - quad;
        }
        kl *= 0.5;
        let scores = self.scores();
        let mut lik = 0.0;
        for (t, y) in self.y.iter().enumerate() {
            let Some(y) = y else { continue };
            let row: Vec<f64> = (0..self.labels).map(|q| scores[[t, q]]).collect();
            lik += self.m[*y][t] - logsumexp_slice(&row);
        }
        kl + lik
    }

    fn sigma(&self, t: usize, q: usize, scores: &Array2<f64>) -> f64 {
        let row: Vec<f64> = (0..self.labels).map(|r| scores[[t, r]]).collect();
        (scores[[t, q]] - logsumexp_slice(&row)).exp()
    }

    /// Alternate mean gradient-ascent steps and dense covariance fixed
    /// points until the bound stalls.
    pub fn train(&mut self, max_rounds: usize) {
        let mut bound = self.bound();
        for _ in 0..max_rounds {
            // mean steps
            for j in 0..self.labels {
                let mut step = 1.0;
                for _ in 0..200 {
                    let scores = self.scores();
                    let mut g = -self.omega.dot(&self.m[j]);
                    for (t, y) in self.y.iter().enumerate() {
                        if let Some(y) = y {
                            g[t] += if *y == j { 1.0 } else { 0.0 } - self.sigma(t, j, &scores);
                        }
                    }
                    if g.dot(&g).sqrt() < 1e-10 {
                        break;
                    }
                    let before = self.bound();
                    let saved = self.m[j].clone();
                    let mut advanced = false;
                    while step > 1e-14 {
                        self.m[j] = &saved + &(&g * step);
                        if self.bound() > before {
                            step = (step * 1.3).min(4.0);
                            advanced = true;
                            break;
                        }
                        step *= 0.5;
                    }
                    if !advanced {
                        self.m[j] = saved;
                        break;
                    }
                }
            }
            // covariance fixed points
            for j in 0..self.labels {
                for _ in 0..100 {
                    let scores = self.scores();
                    let mut prec = self.omega.clone();
                    for (t, y) in self.y.iter().enumerate() {
                        if y.is_some() {
                            prec[[t, t]] += self.sigma(t, j, &scores);
                        }
                    }
                    let v_new = prec.inv().expect("invertible precision");
                    let delta = (&v_new - &self.v[j])
                        .iter()
                        .map(|d| d.abs())
                        .fold(0.0, f64::max);
                    self.v[j] = v_new;
                    if delta < 1e-12 {
                        break;
                    }
                }
            }
            let new_bound = self.bound();
            if (new_bound - bound).abs() < 1e-12 * bound.abs().max(1.0) {
                break;
            }
            bound = new_bound;
        }
    }
}

/// Exhaustive max-sum search over all J^L paths for a previous-label chain.
pub fn exhaustive_viterbi(
    node: &Array2<f64>,
    edge: &Array2<f64>,
) -> (Vec<usize>, f64) {
    let l = node.nrows();
    let j = node.ncols();
    let mut best_path = vec![0usize; l];
    let mut best_score = f64::NEG_INFINITY;
    let total = (j as u64).pow(l as u32);
    for code in 0..total {
        let mut path = Vec::with_capacity(l);
        let mut c = code;
        for _ in 0..l {
            path.push((c % j as u64) as usize);
            c /= j as u64;
        }
        let mut score = node[[0, path[0]]];
        for p in 1..l {
            score += node[[p, path[p]]] + edge[[path[p - 1], path[p]]];
        }
        if score > best_score {
            best_score = score;
            best_path = path;
        }
    }
    (best_path, best_score)
}

/// Plain-loop reimplementation of the iterative score refinement, for
/// fixed-point comparisons against the library decoder.
pub fn brute_force_rns(
    base: &Array2<f64>,
    offsets: &[i32],
    g: &[Array2<f64>],
    tol: f64,
    max_iter: usize,
) -> Array2<f64> {
    let l = base.nrows();
    let j = base.ncols();
    let softmax = |scores: &Array2<f64>| -> Array2<f64> {
        let mut out = scores.clone();
        for mut row in out.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        out
    };
    let mut table = softmax(base);
    for _ in 0..max_iter {
        let mut scores = base.clone();
        for pos in 0..l {
            for (d, &off) in offsets.iter().enumerate() {
                let p = pos as i64 + off as i64;
                if p < 0 || p >= l as i64 {
                    continue;
                }
                for b in 0..j {
                    for a in 0..j {
                        scores[[pos, b]] += table[[p as usize, a]] * g[d][[a, b]];
                    }
                }
            }
        }
        let next = softmax(&scores);
        let delta = (&next - &table).iter().map(|d| d.abs()).fold(0.0, f64::max);
        table = next;
        if delta < tol {
            break;
        }
    }
    table
}

/// Joint score of a full labeling under the per-token conditionals
/// (the product of normalized per-position conditional probabilities).
pub fn pseudo_likelihood_score(
    labeling: &[usize],
    node: &Array2<f64>,
    offsets: &[i32],
    g: &[Array2<f64>],
) -> f64 {
    let l = labeling.len();
    let j = node.ncols();
    let mut total = 0.0;
    for pos in 0..l {
        let row: Vec<f64> = (0..j)
            .map(|b| {
                let mut s = node[[pos, b]];
                for (d, &off) in offsets.iter().enumerate() {
                    let p = pos as i64 + off as i64;
                    if p >= 0 && p < l as i64 {
                        s += g[d][[labeling[p as usize], b]];
                    }
                }
                s
            })
            .collect();
        total += row[labeling[pos]] - logsumexp_slice(&row);
    }
    total
}
