//! Variational inference for the pseudo-likelihood model: evidence lower
//! bound, analytic gradients, coordinate ascent over the variational
//! parameters and an outer hyperparameter step (variational EM).
//!
//! The local covariances `V^{Uj}` are held in site form
//! `V = (K^{-1} + diag(lambda))^{-1}`, so everything is expressed through
//! `B = I + S K S` with `S = diag(sqrt(lambda))`:
//! `log|V K^{-1}| = -log|B|`, `tr(V K^{-1}) = tr(B^{-1})` and
//! `diag(V) = diag(K - K S B^{-1} S K)`. One Cholesky of B per label per
//! sweep dominates the cost, which is cubic in the number of training
//! components and linear in the number of dependencies.

use std::time::Instant;

use ndarray::prelude::*;
use ndarray_linalg::cholesky::{FactorizeC, UPLO};

use crate::corpus::Corpus;
use crate::error::{GpslError, Result};
use crate::kernel::{solve_lower, GramMatrix, KernelSpec};
use crate::model::{pair_index, DependencySet, TrainedModel, VariationalState};

/// Label of a dependent output component, as seen from one token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepLabel {
    /// The dependent position is inside the sentence and labeled.
    Active(usize),
    /// The dependent position is inside the sentence but its label is missing.
    Missing,
    /// The dependent position falls outside the sentence.
    OutOfRange,
}

impl DepLabel {
    pub fn active(&self) -> Option<usize> {
        match self {
            DepLabel::Active(a) => Some(*a),
            _ => None,
        }
    }
}

/// Per-token view used during training: position, own label and the labels
/// referenced by the dependency set.
#[derive(Debug, Clone)]
pub struct TokenContext {
    pub sentence: usize,
    pub position: usize,
    pub label: Option<usize>,
    /// One entry per dependency relation, in dependency-set order.
    pub dep_labels: Vec<DepLabel>,
}

/// Resolve dependency labels for every token. Dependencies never cross
/// sentence boundaries.
pub fn build_contexts(corpus: &Corpus, deps: &DependencySet) -> Vec<TokenContext> {
    let mut out = Vec::with_capacity(corpus.token_count());
    for (n, sent) in corpus.sentences.iter().enumerate() {
        let labels = sent.labels();
        for l in 0..sent.len() {
            let dep_labels = deps
                .offsets()
                .iter()
                .map(|&off| {
                    let p = l as i64 + off as i64;
                    if p < 0 || p >= sent.len() as i64 {
                        DepLabel::OutOfRange
                    } else {
                        match labels[p as usize] {
                            Some(a) => DepLabel::Active(a),
                            None => DepLabel::Missing,
                        }
                    }
                })
                .collect();
            out.push(TokenContext {
                sentence: n,
                position: l,
                label: labels[l],
                dep_labels,
            });
        }
    }
    out
}

/// Tolerances and iteration limits for [`train`].
#[derive(Debug, Clone)]
pub struct TrainOptions {
    /// Relative bound increase below which the inner coordinate-ascent loop stops.
    pub inner_tol: f64,
    /// Relative bound increase below which the outer (EM) loop stops.
    pub outer_tol: f64,
    pub max_outer: usize,
    pub max_inner_sweeps: usize,
    /// Gradient-norm tolerance for the concave mean sub-problems.
    pub grad_tol: f64,
    pub max_newton: usize,
    /// Convergence tolerance for the site and pair-variance fixed points.
    pub fixedpoint_tol: f64,
    pub max_fixedpoint: usize,
    pub optimize_hyper: bool,
    /// Ascent steps per hyperparameter update (at most 20).
    pub max_hyper_steps: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            inner_tol: 1e-5,
            outer_tol: 1e-4,
            max_outer: 20,
            max_inner_sweeps: 50,
            grad_tol: 1e-6,
            max_newton: 100,
            fixedpoint_tol: 1e-8,
            max_fixedpoint: 50,
            optimize_hyper: true,
            max_hyper_steps: 10,
        }
    }
}

/// One accepted update in the bound trace.
#[derive(Debug, Clone)]
pub struct TraceEntry {
    pub step: usize,
    pub outer: usize,
    /// Which parameter block was updated (`init`, `m_U`, `V_U`, `m_S`, `v_S`, `theta`).
    pub update: &'static str,
    pub bound: f64,
    pub elapsed_secs: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub trace: Vec<TraceEntry>,
    pub outer_iterations: usize,
    pub final_bound: f64,
    pub wall_secs: f64,
    pub converged: bool,
}

impl TrainReport {
    /// Comma-separated `step,outer,update,bound,elapsed` lines.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("step,outer,update,bound,elapsed_secs\n");
        for e in &self.trace {
            out.push_str(&format!(
                "{},{},{},{:.10e},{:.6}\n",
                e.step, e.outer, e.update, e.bound, e.elapsed_secs
            ));
        }
        out
    }
}

/// Additive pieces of the lower bound.
#[derive(Debug, Clone, Copy)]
pub struct BoundParts {
    pub kl_u: f64,
    pub kl_s: f64,
    pub likelihood: f64,
}

impl BoundParts {
    pub fn total(&self) -> f64 {
        self.kl_u + self.kl_s + self.likelihood
    }
}

/// Site-form factors for one label.
#[derive(Debug, Clone)]
struct Site {
    /// Lower Cholesky factor of B = I + S K S.
    l_b: Array2<f64>,
    ln_det_b: f64,
    tr_b_inv: f64,
    /// Diagonal of V = (K^{-1} + diag(lambda))^{-1}.
    vdiag: Array1<f64>,
}

fn compute_site(gram: &GramMatrix, lambda: &Array1<f64>) -> Result<Site> {
    let n = gram.n();
    let k = gram.matrix();
    let s = lambda.mapv(f64::sqrt);
    let mut b = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for t in 0..n {
            b[[i, t]] = s[i] * k[[i, t]] * s[t];
        }
        b[[i, i]] += 1.0;
    }
    let l_b = b
        .factorizec(UPLO::Lower)
        .map_err(|_| GpslError::Numerical("site matrix factorization failed".into()))?
        .into_lower();
    let ln_det_b = 2.0 * l_b.diag().iter().map(|d| d.ln()).sum::<f64>();
    // Z = L^{-1}; tr(B^{-1}) = |Z|_F^2
    let z = solve_lower(&l_b, &Array2::eye(n))?;
    let tr_b_inv = z.iter().map(|v| v * v).sum();
    // W = L^{-1} S K; diag(V)_t = K_tt - sum_s W_{st}^2
    let mut sk = k.clone();
    for i in 0..n {
        let si = s[i];
        sk.row_mut(i).mapv_inplace(|v| v * si);
    }
    let w = solve_lower(&l_b, &sk)?;
    let vdiag = Array1::from_iter(
        (0..n).map(|t| k[[t, t]] - w.column(t).iter().map(|v| v * v).sum::<f64>()),
    );
    Ok(Site {
        l_b,
        ln_det_b,
        tr_b_inv,
        vdiag,
    })
}

/// Solve (K^{-1} + diag(w)) x = g without forming K^{-1}.
fn solve_precision_plus_diag(
    gram: &GramMatrix,
    w: &Array1<f64>,
    g: &Array1<f64>,
) -> Result<Array1<f64>> {
    let kg = gram.matrix().dot(g);
    if w.iter().all(|&x| x == 0.0) {
        return Ok(kg);
    }
    let n = gram.n();
    let s = w.mapv(f64::sqrt);
    let k = gram.matrix();
    let mut b = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for t in 0..n {
            b[[i, t]] = s[i] * k[[i, t]] * s[t];
        }
        b[[i, i]] += 1.0;
    }
    let f = b
        .factorizec(UPLO::Lower)
        .map_err(|_| GpslError::Numerical("Newton system factorization failed".into()))?;
    use ndarray_linalg::cholesky::SolveC;
    let rhs = &s * &kg;
    let y = f
        .solvec(&rhs)
        .map_err(|e| GpslError::Numerical(format!("Newton system solve failed: {e}")))?;
    Ok(&kg - &k.dot(&(&s * &y)))
}

fn logsumexp(row: ArrayView1<f64>) -> f64 {
    let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn rel_gain(before: f64, after: f64) -> f64 {
    (after - before) / before.abs().max(1e-12)
}

/// Coordinate-ascent trainer holding the corpus view, Gram factors, site
/// factors and the per-token score cache. The granular update methods are
/// public so each sub-problem can be exercised (and cross-checked) on its
/// own; [`Trainer::run`] composes them into the full training loop.
pub struct Trainer<'a> {
    corpus: &'a Corpus,
    deps: DependencySet,
    opts: TrainOptions,
    contexts: Vec<TokenContext>,
    observed: Vec<usize>,
    /// dep_tokens[d][a]: observed tokens whose d-th dependency is Active(a).
    dep_tokens: Vec<Vec<Vec<usize>>>,
    label_count: usize,
    kernels: Vec<KernelSpec>,
    grams: Vec<GramMatrix>,
    state: VariationalState,
    sites: Vec<Site>,
    /// alpha_j = K_j^{-1} m_j.
    alpha: Vec<Array1<f64>>,
    /// scores[t][q] = m^{Uq}_t + V^{Uq}_tt/2 + sum_d active pair terms.
    scores: Array2<f64>,
    probs: Array2<f64>,
    row_lse: Array1<f64>,
    trace: Vec<TraceEntry>,
    started: Instant,
    outer: usize,
}

impl<'a> Trainer<'a> {
    /// Build a trainer with the deterministic default initialization.
    pub fn new(
        corpus: &'a Corpus,
        deps: DependencySet,
        kernel: KernelSpec,
        opts: TrainOptions,
    ) -> Result<Self> {
        let state = VariationalState::init(
            corpus.label_count(),
            corpus.token_count(),
            deps.len(),
        );
        Self::with_state(corpus, deps, vec![kernel], state, opts)
    }

    /// Build a trainer from an explicit variational state (one kernel spec
    /// shared across labels, or one per label).
    pub fn with_state(
        corpus: &'a Corpus,
        deps: DependencySet,
        kernels: Vec<KernelSpec>,
        state: VariationalState,
        opts: TrainOptions,
    ) -> Result<Self> {
        let label_count = corpus.label_count();
        let token_count = corpus.token_count();
        if label_count < 2 {
            return Err(GpslError::Argument(format!(
                "training needs at least 2 labels, corpus has {label_count}"
            )));
        }
        if token_count == 0 {
            return Err(GpslError::EmptyCorpus("no tokens to train on".into()));
        }
        if !(kernels.len() == 1 || kernels.len() == label_count) {
            return Err(GpslError::Argument(format!(
                "expected 1 or {label_count} kernel specs, got {}",
                kernels.len()
            )));
        }
        state.validate(label_count, token_count, deps.len())?;
        let contexts = build_contexts(corpus, &deps);
        let observed: Vec<usize> = contexts
            .iter()
            .enumerate()
            .filter_map(|(t, c)| c.label.map(|_| t))
            .collect();
        let mut dep_tokens = vec![vec![Vec::new(); label_count]; deps.len()];
        for &t in &observed {
            for (d, dl) in contexts[t].dep_labels.iter().enumerate() {
                if let DepLabel::Active(a) = dl {
                    dep_tokens[d][*a].push(t);
                }
            }
        }
        let xs: Vec<&[u32]> = corpus.flat_features();
        let grams = kernels
            .iter()
            .map(|spec| GramMatrix::new(spec, &xs))
            .collect::<Result<Vec<_>>>()?;
        let gram_of = |j: usize| if grams.len() == 1 { &grams[0] } else { &grams[j] };
        let sites = (0..label_count)
            .map(|j| compute_site(gram_of(j), &state.lambda_u[j]))
            .collect::<Result<Vec<_>>>()?;
        let alpha = (0..label_count)
            .map(|j| gram_of(j).solve_vec(&state.m_u[j]))
            .collect::<Result<Vec<_>>>()?;
        let mut trainer = Trainer {
            corpus,
            deps,
            opts,
            contexts,
            observed,
            dep_tokens,
            label_count,
            kernels,
            grams,
            state,
            sites,
            alpha,
            scores: Array2::zeros((token_count, label_count)),
            probs: Array2::zeros((token_count, label_count)),
            row_lse: Array1::zeros(token_count),
            trace: Vec::new(),
            started: Instant::now(),
            outer: 0,
        };
        trainer.refresh_scores();
        trainer.record("init");
        Ok(trainer)
    }

    fn gram(&self, j: usize) -> &GramMatrix {
        if self.grams.len() == 1 {
            &self.grams[0]
        } else {
            &self.grams[j]
        }
    }

    pub fn corpus(&self) -> &Corpus {
        self.corpus
    }

    pub fn deps(&self) -> &DependencySet {
        &self.deps
    }

    pub fn state(&self) -> &VariationalState {
        &self.state
    }

    pub fn kernel_specs(&self) -> &[KernelSpec] {
        &self.kernels
    }

    pub fn contexts(&self) -> &[TokenContext] {
        &self.contexts
    }

    /// Current per-token conditional label probabilities (softmax cache).
    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn scores(&self) -> &Array2<f64> {
        &self.scores
    }

    /// Diagonal of the implied V^{Uj}.
    pub fn vdiag(&self, j: usize) -> &Array1<f64> {
        &self.sites[j].vdiag
    }

    pub fn gram_matrix(&self, j: usize) -> &Array2<f64> {
        self.gram(j).matrix()
    }

    /// Dense V^{Uj} = K - K S B^{-1} S K, for oracle comparisons.
    pub fn dense_v(&self, j: usize) -> Result<Array2<f64>> {
        let gram = self.gram(j);
        let n = gram.n();
        let s = self.state.lambda_u[j].mapv(f64::sqrt);
        let mut sk = gram.matrix().clone();
        for i in 0..n {
            let si = s[i];
            sk.row_mut(i).mapv_inplace(|v| v * si);
        }
        let w = solve_lower(&self.sites[j].l_b, &sk)?;
        Ok(gram.matrix() - &w.t().dot(&w))
    }

    /// Recompute the score/probability cache from the current state.
    fn refresh_scores(&mut self) {
        let j_count = self.label_count;
        for (t, ctx) in self.contexts.iter().enumerate() {
            for q in 0..j_count {
                let mut s = self.state.m_u[q][t] + 0.5 * self.sites[q].vdiag[t];
                for (d, dl) in ctx.dep_labels.iter().enumerate() {
                    if let DepLabel::Active(a) = dl {
                        let k = pair_index(*a, q, j_count);
                        s += self.state.m_s[d][k] + 0.5 * self.state.v_s[d][k];
                    }
                }
                self.scores[[t, q]] = s;
            }
            let lse = logsumexp(self.scores.row(t));
            self.row_lse[t] = lse;
            for q in 0..j_count {
                self.probs[[t, q]] = (self.scores[[t, q]] - lse).exp();
            }
        }
    }

    /// The variational lower bound at the current state.
    pub fn lower_bound(&self) -> f64 {
        self.bound_parts().total()
    }

    pub fn bound_parts(&self) -> BoundParts {
        let mut kl_u = 0.0;
        for j in 0..self.label_count {
            kl_u += -self.sites[j].ln_det_b
                - self.sites[j].tr_b_inv
                - self.state.m_u[j].dot(&self.alpha[j]);
        }
        kl_u *= 0.5;
        let mut kl_s = 0.0;
        for d in 0..self.deps.len() {
            let v = &self.state.v_s[d];
            let m = &self.state.m_s[d];
            kl_s += v.iter().map(|&x| x.ln() - x).sum::<f64>() - m.dot(m);
        }
        kl_s *= 0.5;
        let mut likelihood = 0.0;
        for &t in &self.observed {
            let y = self.contexts[t].label.unwrap();
            let mut num = self.state.m_u[y][t];
            for (d, dl) in self.contexts[t].dep_labels.iter().enumerate() {
                if let DepLabel::Active(a) = dl {
                    num += self.state.m_s[d][pair_index(*a, y, self.label_count)];
                }
            }
            likelihood += num - self.row_lse[t];
        }
        BoundParts {
            kl_u,
            kl_s,
            likelihood,
        }
    }

    /// Gradient of the bound with respect to m^{Uj}.
    pub fn grad_m_u(&self, j: usize) -> Array1<f64> {
        let mut g = -&self.alpha[j];
        for &t in &self.observed {
            let y = self.contexts[t].label.unwrap();
            g[t] += if y == j { 1.0 } else { 0.0 } - self.probs[[t, j]];
        }
        g
    }

    /// Gradient of the bound with respect to m^{Sd}.
    pub fn grad_m_s(&self, d: usize) -> Array1<f64> {
        let j_count = self.label_count;
        let mut g = -&self.state.m_s[d];
        for a in 0..j_count {
            for &t in &self.dep_tokens[d][a] {
                let y = self.contexts[t].label.unwrap();
                for b in 0..j_count {
                    let k = pair_index(a, b, j_count);
                    g[k] += if y == b { 1.0 } else { 0.0 } - self.probs[[t, b]];
                }
            }
        }
        g
    }

    /// Gradient of the bound with respect to the diagonal v^{Sd}.
    pub fn grad_v_s(&self, d: usize) -> Array1<f64> {
        let j_count = self.label_count;
        let mut g = Array1::zeros(j_count * j_count);
        for a in 0..j_count {
            let mut c = vec![0.0; j_count];
            for &t in &self.dep_tokens[d][a] {
                for b in 0..j_count {
                    c[b] += self.probs[[t, b]];
                }
            }
            for b in 0..j_count {
                let k = pair_index(a, b, j_count);
                g[k] = 0.5 * (1.0 / self.state.v_s[d][k] - 1.0 - c[b]);
            }
        }
        g
    }

    /// Maximize the bound over m^{Uj} (Newton with backtracking on the
    /// strictly concave sub-problem). The bound never decreases.
    pub fn update_m_u(&mut self, j: usize) -> Result<()> {
        let n = self.contexts.len();
        // score column j with the m contribution removed
        let base: Array1<f64> =
            Array1::from_iter((0..n).map(|t| self.scores[[t, j]] - self.state.m_u[j][t]));
        let other: Vec<Vec<f64>> = (0..n)
            .map(|t| {
                (0..self.label_count)
                    .filter(|&q| q != j)
                    .map(|q| self.scores[[t, q]])
                    .collect()
            })
            .collect();
        let objective = |m: &Array1<f64>, alpha_m: &Array1<f64>| -> f64 {
            let mut f = -0.5 * m.dot(alpha_m);
            for &t in &self.observed {
                let y = self.contexts[t].label.unwrap();
                let sj = base[t] + m[t];
                let mut lse_terms: Vec<f64> = other[t].clone();
                lse_terms.push(sj);
                let lse = logsumexp(ArrayView1::from(&lse_terms));
                f += if y == j { m[t] } else { 0.0 } - lse;
            }
            f
        };
        let prob_j = |m: &Array1<f64>, t: usize| -> f64 {
            let sj = base[t] + m[t];
            let mut lse_terms: Vec<f64> = other[t].clone();
            lse_terms.push(sj);
            (sj - logsumexp(ArrayView1::from(&lse_terms))).exp()
        };
        let mut m = self.state.m_u[j].clone();
        let mut alpha_m = self.alpha[j].clone();
        let mut f_cur = objective(&m, &alpha_m);
        for _ in 0..self.opts.max_newton {
            let mut g = -&alpha_m;
            let mut w = Array1::<f64>::zeros(n);
            for &t in &self.observed {
                let y = self.contexts[t].label.unwrap();
                let p = prob_j(&m, t);
                g[t] += if y == j { 1.0 } else { 0.0 } - p;
                w[t] = (p * (1.0 - p)).max(0.0);
            }
            let gnorm = g.dot(&g).sqrt();
            if gnorm < self.opts.grad_tol {
                break;
            }
            let dir = solve_precision_plus_diag(self.gram(j), &w, &g)?;
            let slope = g.dot(&dir);
            let mut step = 1.0;
            let mut accepted = false;
            while step > 1e-14 {
                let cand = &m + &(&dir * step);
                let alpha_cand = self.gram(j).solve_vec(&cand)?;
                let f_cand = objective(&cand, &alpha_cand);
                if f_cand >= f_cur + 1e-4 * step * slope {
                    m = cand;
                    alpha_m = alpha_cand;
                    f_cur = f_cand;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                if gnorm < self.opts.grad_tol.sqrt() {
                    break; // close enough that rounding blocks further ascent
                }
                return Err(GpslError::Numerical(format!(
                    "no ascent step found for m_U[{j}] (gradient norm {gnorm:.3e})"
                )));
            }
        }
        self.state.m_u[j] = m;
        self.alpha[j] = alpha_m;
        self.refresh_scores();
        Ok(())
    }

    /// Fixed-point update of the site parameters lambda^{Uj} (and hence
    /// V^{Uj}): lambda_t <- sigma_t(j) for observed tokens, 0 for missing
    /// ones, refactorizing after every sweep.
    pub fn fixedpoint_v_u(&mut self, j: usize) -> Result<()> {
        for _ in 0..self.opts.max_fixedpoint {
            let mut new_lambda = Array1::<f64>::zeros(self.contexts.len());
            for &t in &self.observed {
                new_lambda[t] = self.probs[[t, j]].clamp(1e-12, 1.0 - 1e-12);
            }
            let delta = new_lambda
                .iter()
                .zip(self.state.lambda_u[j].iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if delta < self.opts.fixedpoint_tol {
                break;
            }
            self.state.lambda_u[j] = new_lambda;
            self.sites[j] = compute_site(self.gram(j), &self.state.lambda_u[j])?;
            self.refresh_scores();
        }
        Ok(())
    }

    /// Maximize the bound over m^{Sd} (block Newton; the Hessian is block
    /// diagonal over the dependent label).
    pub fn update_m_s(&mut self, d: usize) -> Result<()> {
        let j_count = self.label_count;
        let j2 = j_count * j_count;
        // scores of affected tokens with this dependency's m contribution removed
        let affected: Vec<(usize, usize)> = (0..j_count)
            .flat_map(|a| self.dep_tokens[d][a].iter().map(move |&t| (t, a)))
            .collect();
        let base: Vec<Vec<f64>> = affected
            .iter()
            .map(|&(t, a)| {
                (0..j_count)
                    .map(|q| self.scores[[t, q]] - self.state.m_s[d][pair_index(a, q, j_count)])
                    .collect()
            })
            .collect();
        let row_probs = |m: &Array1<f64>, i: usize| -> (Vec<f64>, f64) {
            let (_, a) = affected[i];
            let row: Vec<f64> = (0..j_count)
                .map(|q| base[i][q] + m[pair_index(a, q, j_count)])
                .collect();
            let lse = logsumexp(ArrayView1::from(&row));
            (row.iter().map(|s| (s - lse).exp()).collect(), lse)
        };
        let objective = |m: &Array1<f64>| -> f64 {
            let mut f = -0.5 * m.dot(m);
            for (i, &(t, a)) in affected.iter().enumerate() {
                let y = self.contexts[t].label.unwrap();
                let row: Vec<f64> = (0..j_count)
                    .map(|q| base[i][q] + m[pair_index(a, q, j_count)])
                    .collect();
                f += m[pair_index(a, y, j_count)] - logsumexp(ArrayView1::from(&row));
            }
            f
        };
        let mut m = self.state.m_s[d].clone();
        let mut f_cur = objective(&m);
        for _ in 0..self.opts.max_newton {
            let mut g = -&m;
            let mut hess_blocks = vec![Array2::<f64>::eye(j_count); j_count];
            for (i, &(t, a)) in affected.iter().enumerate() {
                let y = self.contexts[t].label.unwrap();
                let (p, _) = row_probs(&m, i);
                for b in 0..j_count {
                    g[pair_index(a, b, j_count)] +=
                        if y == b { 1.0 } else { 0.0 } - p[b];
                    for b2 in 0..j_count {
                        hess_blocks[a][[b, b2]] +=
                            if b == b2 { p[b] } else { 0.0 } - p[b] * p[b2];
                    }
                }
            }
            let gnorm = g.dot(&g).sqrt();
            if gnorm < self.opts.grad_tol {
                break;
            }
            let mut dir = Array1::<f64>::zeros(j2);
            for a in 0..j_count {
                let ga = Array1::from_iter(
                    (0..j_count).map(|b| g[pair_index(a, b, j_count)]),
                );
                let f = hess_blocks[a]
                    .factorizec(UPLO::Lower)
                    .map_err(|_| GpslError::Numerical("pair Hessian factorization failed".into()))?;
                use ndarray_linalg::cholesky::SolveC;
                let da = f
                    .solvec(&ga)
                    .map_err(|e| GpslError::Numerical(format!("pair Newton solve failed: {e}")))?;
                for b in 0..j_count {
                    dir[pair_index(a, b, j_count)] = da[b];
                }
            }
            let slope = g.dot(&dir);
            let mut step = 1.0;
            let mut accepted = false;
            while step > 1e-14 {
                let cand = &m + &(&dir * step);
                let f_cand = objective(&cand);
                if f_cand >= f_cur + 1e-4 * step * slope {
                    m = cand;
                    f_cur = f_cand;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                if gnorm < self.opts.grad_tol.sqrt() {
                    break;
                }
                return Err(GpslError::Numerical(format!(
                    "no ascent step found for m_S[{d}] (gradient norm {gnorm:.3e})"
                )));
            }
        }
        self.state.m_s[d] = m;
        self.refresh_scores();
        Ok(())
    }

    /// Stationary update of the diagonal pair variances,
    /// v_k = 1/(1 + c_k) with c_k the summed probabilities of the target
    /// label over tokens activating the pair, iterated to self-consistency.
    pub fn update_v_s(&mut self, d: usize) {
        let j_count = self.label_count;
        for _ in 0..self.opts.max_fixedpoint {
            let mut v_new = Array1::<f64>::ones(j_count * j_count);
            for a in 0..j_count {
                let mut c = vec![0.0; j_count];
                for &t in &self.dep_tokens[d][a] {
                    for b in 0..j_count {
                        c[b] += self.probs[[t, b]];
                    }
                }
                for b in 0..j_count {
                    v_new[pair_index(a, b, j_count)] = 1.0 / (1.0 + c[b]);
                }
            }
            let delta = v_new
                .iter()
                .zip(self.state.v_s[d].iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if delta < self.opts.fixedpoint_tol {
                break;
            }
            self.state.v_s[d] = v_new;
            self.refresh_scores();
        }
    }

    /// Derivative matrices of the Gram matrix of `spec_idx` with respect to
    /// each positive hyperparameter.
    fn gram_param_derivatives(&self, spec_idx: usize) -> Vec<Array2<f64>> {
        let gram = &self.grams[spec_idx];
        let spec = gram.spec();
        let n = gram.n();
        let mut base = gram.matrix().clone();
        for i in 0..n {
            base[[i, i]] -= spec.jitter;
        }
        match spec.family {
            crate::kernel::KernelFamily::Linear => vec![&base / spec.sigma_f2],
            crate::kernel::KernelFamily::SquaredExponential => {
                let d2 = gram.sq_dists().expect("SE Gram keeps distances");
                let dk_kappa = Array2::from_shape_fn((n, n), |(s, t)| {
                    -0.5 * d2[[s, t]] * base[[s, t]]
                });
                vec![&base / spec.sigma_f2, dk_kappa]
            }
        }
    }

    /// Analytic gradient of the bound with respect to the positive kernel
    /// hyperparameters, holding the means and the dense covariances fixed:
    /// d/dtheta = 1/2 sum_j tr[(alpha alpha^T - S B^{-1} S) dK/dtheta],
    /// which is the site-free form of
    /// 1/2 sum_j tr[(Omega V Omega + Omega m m^T Omega - Omega) dK/dtheta].
    /// One entry per spec, in `param_names` order.
    pub fn hyper_gradient(&self) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(self.kernels.len());
        for si in 0..self.kernels.len() {
            let dks = self.gram_param_derivatives(si);
            let mut grads = vec![0.0; dks.len()];
            let labels: Vec<usize> = if self.kernels.len() == 1 {
                (0..self.label_count).collect()
            } else {
                vec![si]
            };
            for &j in &labels {
                let site = &self.sites[j];
                let n = self.contexts.len();
                let s = self.state.lambda_u[j].mapv(f64::sqrt);
                let z = solve_lower(&site.l_b, &Array2::eye(n))?;
                for (pi, dk) in dks.iter().enumerate() {
                    let quad = self.alpha[j].dot(&dk.dot(&self.alpha[j]));
                    let mut sdks = dk.clone();
                    for r in 0..n {
                        let sr = s[r];
                        for c in 0..n {
                            sdks[[r, c]] *= sr * s[c];
                        }
                    }
                    let w = solve_lower(&site.l_b, &sdks)?;
                    let tr_q_dk = w.iter().zip(z.iter()).map(|(a, b)| a * b).sum::<f64>();
                    grads[pi] += 0.5 * (quad - tr_q_dk);
                }
            }
            out.push(grads);
        }
        Ok(out)
    }

    /// The bound as a function of candidate kernel specs with the means and
    /// the *dense* covariances frozen at their current values. This is the
    /// objective whose gradient [`Trainer::hyper_gradient`] computes; the
    /// likelihood part does not depend on the candidate.
    pub fn hyper_objective(&self, candidates: &[KernelSpec]) -> Result<f64> {
        if candidates.len() != self.kernels.len() {
            return Err(GpslError::Argument("candidate spec count mismatch".into()));
        }
        let parts = self.bound_parts();
        let xs: Vec<&[u32]> = self.corpus.flat_features();
        let new_grams: Vec<GramMatrix> = candidates
            .iter()
            .map(|spec| GramMatrix::new(spec, &xs))
            .collect::<Result<Vec<_>>>()?;
        let mut kl_u = 0.0;
        for j in 0..self.label_count {
            let v = self.dense_v(j)?;
            let ln_det_v = 2.0
                * v.factorizec(UPLO::Lower)
                    .map_err(|_| GpslError::Numerical("frozen V factorization failed".into()))?
                    .into_lower()
                    .diag()
                    .iter()
                    .map(|d| d.ln())
                    .sum::<f64>();
            let gram = if new_grams.len() == 1 {
                &new_grams[0]
            } else {
                &new_grams[j]
            };
            let tr = gram.solve_mat(&v)?.diag().sum();
            let quad = self.state.m_u[j].dot(&gram.solve_vec(&self.state.m_u[j])?);
            kl_u += ln_det_v - gram.logdet() - tr - quad;
        }
        Ok(0.5 * kl_u + parts.kl_s + parts.likelihood)
    }

    /// Everything that depends on the kernels, rebuilt for a candidate.
    fn rebuild_for(&self, specs: &[KernelSpec]) -> Result<RebuiltKernels> {
        let grams: Vec<GramMatrix> = specs
            .iter()
            .zip(&self.grams)
            .map(|(spec, gram)| gram.rebuild(spec))
            .collect::<Result<Vec<_>>>()?;
        let gram_of = |j: usize| if grams.len() == 1 { &grams[0] } else { &grams[j] };
        let sites = (0..self.label_count)
            .map(|j| compute_site(gram_of(j), &self.state.lambda_u[j]))
            .collect::<Result<Vec<_>>>()?;
        let alpha = (0..self.label_count)
            .map(|j| gram_of(j).solve_vec(&self.state.m_u[j]))
            .collect::<Result<Vec<_>>>()?;
        Ok(RebuiltKernels {
            grams,
            sites,
            alpha,
        })
    }

    /// One variational-EM hyperparameter update: gradient ascent in the log
    /// domain of the positive hyperparameters. The search direction comes
    /// from [`Trainer::hyper_gradient`]; a candidate is accepted only if the
    /// actual (site-parameterized) bound does not decrease, so the recorded
    /// bound trace stays monotone. Returns the updated spec(s).
    pub fn hyper_step(&mut self) -> Result<Vec<KernelSpec>> {
        let mut bound_cur = self.lower_bound();
        let mut step = 0.25;
        for _ in 0..self.opts.max_hyper_steps.min(20) {
            let grads = self.hyper_gradient()?;
            // gradient with respect to log-parameters
            let g_log: Vec<Vec<f64>> = grads
                .iter()
                .zip(&self.kernels)
                .map(|(g, spec)| {
                    g.iter()
                        .zip(spec.params())
                        .map(|(gi, p)| gi * p)
                        .collect()
                })
                .collect();
            let norm = g_log
                .iter()
                .flat_map(|g| g.iter())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if norm < 1e-5 {
                break;
            }
            let mut advanced = false;
            while step > 1e-10 {
                let candidates: Vec<KernelSpec> = self
                    .kernels
                    .iter()
                    .zip(&g_log)
                    .map(|(spec, g)| {
                        let params: Vec<f64> = spec
                            .params()
                            .iter()
                            .zip(g)
                            .map(|(p, gi)| (p.ln() + step * gi / norm).exp())
                            .collect();
                        spec.with_params(&params)
                    })
                    .collect();
                match self.rebuild_for(&candidates) {
                    Ok(rebuilt) => {
                        // evaluate the true bound under the candidate
                        let saved_sites = std::mem::replace(&mut self.sites, rebuilt.sites);
                        let saved_alpha = std::mem::replace(&mut self.alpha, rebuilt.alpha);
                        self.refresh_scores();
                        let bound_cand = self.lower_bound();
                        if bound_cand > bound_cur {
                            self.kernels = candidates;
                            self.grams = rebuilt.grams;
                            bound_cur = bound_cand;
                            step = (step * 1.5).min(1.0);
                            advanced = true;
                            break;
                        }
                        // revert
                        self.sites = saved_sites;
                        self.alpha = saved_alpha;
                        self.refresh_scores();
                        step *= 0.5;
                    }
                    // non-SPD candidate: shrink and retry
                    Err(GpslError::Numerical(_)) => step *= 0.5,
                    Err(e) => return Err(e),
                }
            }
            if !advanced {
                break;
            }
        }
        Ok(self.kernels.clone())
    }

    fn record(&mut self, update: &'static str) {
        let entry = TraceEntry {
            step: self.trace.len(),
            outer: self.outer,
            update,
            bound: self.lower_bound(),
            elapsed_secs: self.started.elapsed().as_secs_f64(),
        };
        self.trace.push(entry);
    }

    /// Run the full doubly nested training loop: coordinate ascent over all
    /// variational parameters until the relative bound increase falls below
    /// `inner_tol`, then a hyperparameter step, repeated until the outer
    /// relative increase falls below `outer_tol` or `max_outer` is reached.
    pub fn run(mut self) -> Result<(TrainedModel, TrainReport)> {
        if self.observed.is_empty() {
            return Err(GpslError::Argument(
                "training needs at least one observed label".into(),
            ));
        }
        self.started = Instant::now();
        let wrap = |e: GpslError, outer: usize, phase: &str| match e {
            GpslError::Numerical(msg) => {
                GpslError::Numerical(format!("outer iteration {outer}, {phase}: {msg}"))
            }
            other => other,
        };
        let mut converged = false;
        while self.outer < self.opts.max_outer {
            self.outer += 1;
            let outer_start = self.lower_bound();
            for _sweep in 0..self.opts.max_inner_sweeps {
                let sweep_start = self.lower_bound();
                for j in 0..self.label_count {
                    self.update_m_u(j)
                        .map_err(|e| wrap(e, self.outer, "m_U update"))?;
                    self.record("m_U");
                    self.fixedpoint_v_u(j)
                        .map_err(|e| wrap(e, self.outer, "V_U fixed point"))?;
                    self.record("V_U");
                }
                for d in 0..self.deps.len() {
                    self.update_m_s(d)
                        .map_err(|e| wrap(e, self.outer, "m_S update"))?;
                    self.record("m_S");
                    self.update_v_s(d);
                    self.record("v_S");
                }
                if rel_gain(sweep_start, self.lower_bound()) < self.opts.inner_tol {
                    break;
                }
            }
            if self.opts.optimize_hyper {
                self.hyper_step()
                    .map_err(|e| wrap(e, self.outer, "hyperparameter step"))?;
                self.record("theta");
            }
            if rel_gain(outer_start, self.lower_bound()) < self.opts.outer_tol {
                converged = true;
                break;
            }
        }
        let final_bound = self.lower_bound();
        let report = TrainReport {
            outer_iterations: self.outer,
            final_bound,
            wall_secs: self.started.elapsed().as_secs_f64(),
            converged,
            trace: std::mem::take(&mut self.trace),
        };
        let model = self.into_model()?;
        Ok((model, report))
    }

    /// Freeze the current state into a serializable model.
    pub fn into_model(self) -> Result<TrainedModel> {
        TrainedModel::new(
            self.corpus.label_alphabet.clone(),
            self.corpus.feature_alphabet.clone(),
            self.kernels,
            self.deps,
            self.corpus
                .sentences
                .iter()
                .flat_map(|s| s.tokens.iter().map(|t| t.features.clone()))
                .collect(),
            self.state,
        )
    }

    // --- test-support setters: replace one block and refresh caches ---

    pub fn set_m_u(&mut self, j: usize, m: Array1<f64>) -> Result<()> {
        if m.len() != self.contexts.len() {
            return Err(GpslError::Dimension("m_U length mismatch".into()));
        }
        self.alpha[j] = self.gram(j).solve_vec(&m)?;
        self.state.m_u[j] = m;
        self.refresh_scores();
        Ok(())
    }

    pub fn set_lambda_u(&mut self, j: usize, lambda: Array1<f64>) -> Result<()> {
        if lambda.len() != self.contexts.len() {
            return Err(GpslError::Dimension("lambda_U length mismatch".into()));
        }
        self.state.lambda_u[j] = lambda;
        self.sites[j] = compute_site(self.gram(j), &self.state.lambda_u[j])?;
        self.refresh_scores();
        Ok(())
    }

    pub fn set_m_s(&mut self, d: usize, m: Array1<f64>) -> Result<()> {
        if m.len() != self.label_count * self.label_count {
            return Err(GpslError::Dimension("m_S length mismatch".into()));
        }
        self.state.m_s[d] = m;
        self.refresh_scores();
        Ok(())
    }

    pub fn set_v_s(&mut self, d: usize, v: Array1<f64>) -> Result<()> {
        if v.len() != self.label_count * self.label_count {
            return Err(GpslError::Dimension("v_S length mismatch".into()));
        }
        if v.iter().any(|&x| x <= 0.0) {
            return Err(GpslError::Argument("v_S entries must be positive".into()));
        }
        self.state.v_s[d] = v;
        self.refresh_scores();
        Ok(())
    }
}

struct RebuiltKernels {
    grams: Vec<GramMatrix>,
    sites: Vec<Site>,
    alpha: Vec<Array1<f64>>,
}

/// Train a model with the deterministic initialization (Algorithm-style
/// doubly nested coordinate ascent plus variational EM).
pub fn train(
    corpus: &Corpus,
    deps: DependencySet,
    kernel: KernelSpec,
    opts: TrainOptions,
) -> Result<(TrainedModel, TrainReport)> {
    Trainer::new(corpus, deps, kernel, opts)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_generate, SynthSpec};
    use approx::assert_abs_diff_eq;

    fn tiny_corpus(labels: usize, length: usize, sentences: usize, seed: u64) -> Corpus {
        synth_generate(&SynthSpec {
            labels,
            length,
            sentences,
            transition_strength: 1.5,
            emission_dim: 2,
            seed,
        })
        .unwrap()
    }

    /// One token, J=2, R=0, K=I: at the deterministic initialization the
    /// bound has the closed form -(1 + ln 3).
    ///
    /// Per label: V = (1 + 1/2)^{-1} = 2/3, so log|VK^{-1}| = ln(2/3) and
    /// tr(VK^{-1}) = 2/3; KL part = ln(2/3) - 2/3. Scores are 0 + V/2 = 1/3
    /// for both labels, so the likelihood part is 0 - ln(2 e^{1/3}).
    /// Total: ln(2/3) - 2/3 - ln 2 - 1/3 = -(1 + ln 3).
    #[test]
    fn lower_bound_scalar_example() {
        let corpus = one_token_corpus();
        let spec = KernelSpec::linear(1.0).with_jitter(0.0);
        let trainer = Trainer::new(
            &corpus,
            DependencySet::none(),
            spec,
            TrainOptions::default(),
        )
        .unwrap();
        let expected = -(1.0 + 3.0f64.ln());
        assert_abs_diff_eq!(trainer.lower_bound(), expected, epsilon = 1e-12);
    }

    /// A corpus with one token carrying one feature, two labels; the linear
    /// kernel Gram is the 1x1 identity.
    fn one_token_corpus() -> Corpus {
        use crate::corpus::{apply_templates, RawCorpus, TemplateSet};
        let raw = RawCorpus {
            sentences: vec![
                vec![vec!["w".into(), "A".into()]],
                vec![vec!["w".into(), "B".into()]],
            ],
            column_count: 2,
        };
        let mut corpus = apply_templates(&raw, &TemplateSet::word_only()).unwrap();
        // keep only the first sentence: one token, but both labels interned
        corpus.sentences.truncate(1);
        corpus
    }

    #[test]
    fn all_missing_bound_is_kl_only() {
        let corpus = tiny_corpus(2, 3, 2, 5);
        let masked = crate::corpus::mask_labels(&corpus, 1.0, 1).unwrap();
        let trainer = Trainer::new(
            &masked,
            DependencySet::previous(),
            KernelSpec::linear(1.0),
            TrainOptions::default(),
        )
        .unwrap();
        let parts = trainer.bound_parts();
        assert_eq!(parts.likelihood, 0.0);
        assert_abs_diff_eq!(
            trainer.lower_bound(),
            parts.kl_u + parts.kl_s,
            epsilon = 1e-14
        );
    }

    #[test]
    fn probs_rows_are_normalized() {
        let corpus = tiny_corpus(3, 4, 3, 7);
        let trainer = Trainer::new(
            &corpus,
            DependencySet::new(vec![-1, 1]).unwrap(),
            KernelSpec::linear(1.0),
            TrainOptions::default(),
        )
        .unwrap();
        for t in 0..corpus.token_count() {
            let sum: f64 = trainer.probs().row(t).sum();
            assert!((sum - 1.0).abs() < 1e-12, "row {t} sums to {sum}");
        }
    }

    #[test]
    fn all_missing_gradient_is_prior_only() {
        let corpus = tiny_corpus(2, 3, 2, 9);
        let masked = crate::corpus::mask_labels(&corpus, 1.0, 2).unwrap();
        let mut trainer = Trainer::new(
            &masked,
            DependencySet::none(),
            KernelSpec::linear(1.0),
            TrainOptions::default(),
        )
        .unwrap();
        // at m = 0 the prior-only gradient vanishes
        let g = trainer.grad_m_u(0);
        assert!(g.iter().all(|&x| x.abs() < 1e-14));
        // at random m it equals -K^{-1} m
        let m = Array1::from_iter((0..masked.token_count()).map(|t| 0.1 * (t as f64 + 1.0)));
        trainer.set_m_u(0, m.clone()).unwrap();
        let g = trainer.grad_m_u(0);
        let expected = -trainer.gram(0).solve_vec(&m).unwrap();
        for (a, b) in g.iter().zip(expected.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn all_missing_fixedpoint_recovers_prior() {
        let corpus = tiny_corpus(2, 3, 2, 9);
        let masked = crate::corpus::mask_labels(&corpus, 1.0, 2).unwrap();
        let mut trainer = Trainer::new(
            &masked,
            DependencySet::none(),
            KernelSpec::linear(1.0),
            TrainOptions::default(),
        )
        .unwrap();
        trainer.fixedpoint_v_u(0).unwrap();
        assert!(trainer.state().lambda_u[0].iter().all(|&l| l == 0.0));
        // V = K when no likelihood curvature remains
        let v = trainer.dense_v(0).unwrap();
        let diff = (&v - trainer.gram_matrix(0))
            .iter()
            .map(|d| d.abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-10, "V deviates from K by {diff}");
    }

    #[test]
    fn lambda_stays_in_open_unit_interval() {
        let corpus = tiny_corpus(3, 4, 3, 11);
        let mut trainer = Trainer::new(
            &corpus,
            DependencySet::previous(),
            KernelSpec::linear(1.0),
            TrainOptions::default(),
        )
        .unwrap();
        for _ in 0..3 {
            for j in 0..3 {
                trainer.update_m_u(j).unwrap();
                trainer.fixedpoint_v_u(j).unwrap();
                for &l in trainer.state().lambda_u[j].iter() {
                    assert!((0.0..1.0).contains(&l), "lambda {l} out of range");
                }
            }
        }
    }

    #[test]
    fn inactive_dependency_mean_shrinks_to_zero() {
        // length-1 sentences: offset -1 is always out of range
        let corpus = tiny_corpus(2, 1, 4, 13);
        let mut trainer = Trainer::new(
            &corpus,
            DependencySet::previous(),
            KernelSpec::linear(1.0),
            TrainOptions::default(),
        )
        .unwrap();
        trainer
            .set_m_s(0, Array1::from_vec(vec![0.5, -0.3, 0.2, 0.9]))
            .unwrap();
        trainer.update_m_s(0).unwrap();
        assert!(trainer.state().m_s[0].iter().all(|&x| x.abs() < 1e-12));
    }

    #[test]
    fn v_s_prior_variance_when_pair_inactive() {
        let corpus = tiny_corpus(2, 1, 4, 13);
        let mut trainer = Trainer::new(
            &corpus,
            DependencySet::previous(),
            KernelSpec::linear(1.0),
            TrainOptions::default(),
        )
        .unwrap();
        trainer
            .set_v_s(0, Array1::from_vec(vec![0.5, 0.4, 0.8, 0.6]))
            .unwrap();
        trainer.update_v_s(0);
        assert!(trainer.state().v_s[0].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn updates_never_decrease_bound_and_are_idempotent() {
        let corpus = tiny_corpus(3, 3, 3, 15);
        let mut trainer = Trainer::new(
            &corpus,
            DependencySet::new(vec![-1, 1]).unwrap(),
            KernelSpec::linear(1.0),
            TrainOptions::default(),
        )
        .unwrap();
        let mut bound = trainer.lower_bound();
        for _ in 0..2 {
            for j in 0..3 {
                trainer.update_m_u(j).unwrap();
                let b = trainer.lower_bound();
                assert!(b >= bound - 1e-9 * bound.abs(), "m_U[{j}] decreased bound");
                bound = b;
                trainer.fixedpoint_v_u(j).unwrap();
                let b = trainer.lower_bound();
                assert!(b >= bound - 1e-9 * bound.abs(), "V_U[{j}] decreased bound");
                bound = b;
            }
            for d in 0..2 {
                trainer.update_m_s(d).unwrap();
                let b = trainer.lower_bound();
                assert!(b >= bound - 1e-9 * bound.abs(), "m_S[{d}] decreased bound");
                bound = b;
                trainer.update_v_s(d);
                let b = trainer.lower_bound();
                assert!(b >= bound - 1e-9 * bound.abs(), "v_S[{d}] decreased bound");
                bound = b;
            }
        }
        // the sub-problem is solved to its own optimum: an immediate second
        // call moves nothing measurable
        trainer.update_m_u(0).unwrap();
        let m_before = trainer.state().m_u[0].clone();
        trainer.update_m_u(0).unwrap();
        let diff = (&trainer.state().m_u[0] - &m_before)
            .iter()
            .map(|d| d.abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-8, "converged update moved m by {diff}");
    }

    #[test]
    fn hyper_gradient_zero_at_prior() {
        // m = 0, lambda = 0 => V = K, prior matches posterior
        let corpus = tiny_corpus(2, 3, 2, 17);
        let mut trainer = Trainer::new(
            &corpus,
            DependencySet::none(),
            KernelSpec::linear(1.0),
            TrainOptions::default(),
        )
        .unwrap();
        let n = corpus.token_count();
        for j in 0..2 {
            trainer.set_lambda_u(j, Array1::zeros(n)).unwrap();
        }
        let grads = trainer.hyper_gradient().unwrap();
        for g in &grads[0] {
            assert!(g.abs() < 1e-10, "gradient {g} not zero at prior");
        }
    }

    #[test]
    fn missing_token_only_affects_prior_dimension() {
        // appending a sentence consisting of one missing-label token (site
        // parameter 0, as the fixed point leaves it) changes the prior
        // dimension but leaves the likelihood part untouched, even though
        // the token's features overlap the others
        let corpus = tiny_corpus(2, 2, 2, 19);
        let mut extended = corpus.clone();
        let mut tok = extended.sentences[0].tokens[0].clone();
        tok.label = None;
        extended
            .sentences
            .push(crate::corpus::Sentence { tokens: vec![tok] });
        let t1 = Trainer::new(
            &corpus,
            DependencySet::previous(),
            KernelSpec::linear(1.0),
            TrainOptions::default(),
        )
        .unwrap();
        let mut t2 = Trainer::new(
            &extended,
            DependencySet::previous(),
            KernelSpec::linear(1.0),
            TrainOptions::default(),
        )
        .unwrap();
        let n2 = extended.token_count();
        for j in 0..2 {
            let mut lambda = Array1::from_elem(n2, 0.5);
            lambda[n2 - 1] = 0.0;
            t2.set_lambda_u(j, lambda).unwrap();
        }
        assert_abs_diff_eq!(
            t1.bound_parts().likelihood,
            t2.bound_parts().likelihood,
            epsilon = 1e-12
        );
        assert!(t1.bound_parts().kl_u != t2.bound_parts().kl_u);
    }
}
