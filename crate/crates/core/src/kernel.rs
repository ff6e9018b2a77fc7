//! Covariance functions and Gram-matrix utilities.
//!
//! Inputs are sparse binary vectors (sorted feature-id lists), so the linear
//! kernel is a shared-feature count and the squared-exponential distance is
//! `|a| + |b| - 2|a ∩ b|`. Factorizations go through LAPACK via
//! `ndarray-linalg`; the Cholesky factor is computed once per Gram matrix
//! and reused for every solve.

use ndarray::prelude::*;
use ndarray_linalg::cholesky::{FactorizeC, UPLO};
use ndarray_linalg::triangular::{Diag, SolveTriangular};

use crate::error::{GpslError, Result};

/// Default jitter as a multiple of the signal variance.
pub const DEFAULT_JITTER_FACTOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelFamily {
    Linear,
    SquaredExponential,
}

impl KernelFamily {
    pub fn name(&self) -> &'static str {
        match self {
            KernelFamily::Linear => "linear",
            KernelFamily::SquaredExponential => "se",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "linear" => Ok(KernelFamily::Linear),
            "se" | "squared_exponential" => Ok(KernelFamily::SquaredExponential),
            other => Err(GpslError::Argument(format!("unknown kernel family {other:?}"))),
        }
    }
}

/// Covariance family plus hyperparameters.
///
/// `jitter` is an absolute diagonal stabilizer fixed at construction; it is
/// not re-derived from `sigma_f2` when hyperparameters move.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub family: KernelFamily,
    /// Signal variance, > 0.
    pub sigma_f2: f64,
    /// Inverse squared length-scale (SE family only), > 0.
    pub kappa: f64,
    /// Diagonal stabilizer added to the training Gram matrix, >= 0.
    pub jitter: f64,
}

impl KernelSpec {
    pub fn linear(sigma_f2: f64) -> Self {
        KernelSpec {
            family: KernelFamily::Linear,
            sigma_f2,
            kappa: 1.0,
            jitter: DEFAULT_JITTER_FACTOR * sigma_f2,
        }
    }

    pub fn squared_exponential(sigma_f2: f64, kappa: f64) -> Self {
        KernelSpec {
            family: KernelFamily::SquaredExponential,
            sigma_f2,
            kappa,
            jitter: DEFAULT_JITTER_FACTOR * sigma_f2,
        }
    }

    pub fn with_jitter(mut self, jitter: f64) -> Self {
        self.jitter = jitter;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_f2 > 0.0) {
            return Err(GpslError::Argument(format!(
                "sigma_f2 must be positive, got {}",
                self.sigma_f2
            )));
        }
        if self.family == KernelFamily::SquaredExponential && !(self.kappa > 0.0) {
            return Err(GpslError::Argument(format!(
                "kappa must be positive, got {}",
                self.kappa
            )));
        }
        if self.jitter < 0.0 {
            return Err(GpslError::Argument(format!(
                "jitter must be non-negative, got {}",
                self.jitter
            )));
        }
        Ok(())
    }

    /// Positive hyperparameters subject to optimization.
    pub fn param_names(&self) -> &'static [&'static str] {
        match self.family {
            KernelFamily::Linear => &["sigma_f2"],
            KernelFamily::SquaredExponential => &["sigma_f2", "kappa"],
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match self.family {
            KernelFamily::Linear => vec![self.sigma_f2],
            KernelFamily::SquaredExponential => vec![self.sigma_f2, self.kappa],
        }
    }

    pub fn with_params(&self, params: &[f64]) -> Self {
        let mut out = *self;
        out.sigma_f2 = params[0];
        if self.family == KernelFamily::SquaredExponential {
            out.kappa = params[1];
        }
        out
    }
}

/// Number of shared ids between two strictly increasing id lists.
fn shared(a: &[u32], b: &[u32]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Squared Euclidean distance between two sparse binary vectors.
fn sq_dist(a: &[u32], b: &[u32]) -> f64 {
    (a.len() + b.len() - 2 * shared(a, b)) as f64
}

/// Covariance between two sparse binary inputs (no jitter).
pub fn kernel_eval(spec: &KernelSpec, a: &[u32], b: &[u32]) -> f64 {
    match spec.family {
        KernelFamily::Linear => spec.sigma_f2 * shared(a, b) as f64,
        KernelFamily::SquaredExponential => {
            spec.sigma_f2 * (-0.5 * spec.kappa * sq_dist(a, b)).exp()
        }
    }
}

/// Cross-covariance vector between `x` and every row of `xs`.
pub fn kernel_vec(spec: &KernelSpec, xs: &[&[u32]], x: &[u32]) -> Array1<f64> {
    Array1::from_iter(xs.iter().map(|row| kernel_eval(spec, row, x)))
}

/// Symmetric positive-definite Gram matrix over all training components,
/// with its Cholesky factorization and log-determinant.
#[derive(Debug, Clone)]
pub struct GramMatrix {
    spec: KernelSpec,
    /// K + jitter * I.
    k: Array2<f64>,
    /// Lower-triangular Cholesky factor of `k`.
    factor: Array2<f64>,
    logdet: f64,
    /// Pairwise squared distances, kept for SE hyperparameter derivatives.
    sq_dists: Option<Array2<f64>>,
}

fn cholesky_lower(m: &Array2<f64>) -> Result<(Array2<f64>, f64)> {
    let f = m.factorizec(UPLO::Lower).map_err(|_| {
        GpslError::Numerical(
            "Gram factorization failed (matrix not positive definite); try a larger jitter".into(),
        )
    })?;
    let lower = f.into_lower();
    let logdet = 2.0 * lower.diag().iter().map(|d| d.ln()).sum::<f64>();
    if !logdet.is_finite() {
        return Err(GpslError::Numerical(
            "Gram factorization produced a non-finite log-determinant; try a larger jitter".into(),
        ));
    }
    Ok((lower, logdet))
}

impl GramMatrix {
    /// Assemble and factorize the Gram matrix for `xs`.
    pub fn new(spec: &KernelSpec, xs: &[&[u32]]) -> Result<Self> {
        spec.validate()?;
        let n = xs.len();
        if n == 0 {
            return Err(GpslError::Argument("empty input set for Gram matrix".into()));
        }
        let keep_dists = spec.family == KernelFamily::SquaredExponential;
        let mut dists = keep_dists.then(|| Array2::<f64>::zeros((n, n)));
        let mut k = Array2::<f64>::zeros((n, n));
        for s in 0..n {
            for t in s..n {
                let v = kernel_eval(spec, xs[s], xs[t]);
                k[[s, t]] = v;
                k[[t, s]] = v;
                if let Some(d) = dists.as_mut() {
                    let dv = sq_dist(xs[s], xs[t]);
                    d[[s, t]] = dv;
                    d[[t, s]] = dv;
                }
            }
            k[[s, s]] += spec.jitter;
        }
        let (factor, logdet) = cholesky_lower(&k)?;
        Ok(GramMatrix {
            spec: *spec,
            k,
            factor,
            logdet,
            sq_dists: dists,
        })
    }

    /// Re-evaluate under new hyperparameters without touching the inputs.
    /// The base kernel values are recovered from the stored matrix.
    pub fn rebuild(&self, spec: &KernelSpec) -> Result<Self> {
        spec.validate()?;
        if spec.family != self.spec.family {
            return Err(GpslError::Argument(
                "rebuild requires the same kernel family".into(),
            ));
        }
        let n = self.n();
        let mut k = match self.spec.family {
            KernelFamily::Linear => {
                let scale = spec.sigma_f2 / self.spec.sigma_f2;
                let mut k = &self.k * scale;
                for s in 0..n {
                    k[[s, s]] += spec.jitter - self.spec.jitter * scale;
                }
                k
            }
            KernelFamily::SquaredExponential => {
                let d = self.sq_dists.as_ref().expect("SE Gram keeps distances");
                let mut k = d.mapv(|d2| spec.sigma_f2 * (-0.5 * spec.kappa * d2).exp());
                for s in 0..n {
                    k[[s, s]] += spec.jitter;
                }
                k
            }
        };
        // enforce exact symmetry against accumulated rounding
        for s in 0..n {
            for t in 0..s {
                k[[s, t]] = k[[t, s]];
            }
        }
        let (factor, logdet) = cholesky_lower(&k)?;
        Ok(GramMatrix {
            spec: *spec,
            k,
            factor,
            logdet,
            sq_dists: self.sq_dists.clone(),
        })
    }

    pub fn n(&self) -> usize {
        self.k.nrows()
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    /// The factorized matrix K + jitter * I.
    pub fn matrix(&self) -> &Array2<f64> {
        &self.k
    }

    /// Lower-triangular Cholesky factor.
    pub fn factor(&self) -> &Array2<f64> {
        &self.factor
    }

    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    /// Pairwise squared distances (SE family only).
    pub(crate) fn sq_dists(&self) -> Option<&Array2<f64>> {
        self.sq_dists.as_ref()
    }

    /// Solve K x = b via the two triangular solves.
    pub fn solve_vec(&self, b: &Array1<f64>) -> Result<Array1<f64>> {
        if b.len() != self.n() {
            return Err(GpslError::Dimension(format!(
                "solve_vec: got length {}, expected {}",
                b.len(),
                self.n()
            )));
        }
        let y = self
            .factor
            .solve_triangular(UPLO::Lower, Diag::NonUnit, b)
            .map_err(|e| GpslError::Numerical(format!("triangular solve failed: {e}")))?;
        let x = self
            .factor
            .t()
            .solve_triangular(UPLO::Upper, Diag::NonUnit, &y)
            .map_err(|e| GpslError::Numerical(format!("triangular solve failed: {e}")))?;
        Ok(x)
    }

    /// Solve K X = B for a matrix of right-hand sides.
    pub fn solve_mat(&self, b: &Array2<f64>) -> Result<Array2<f64>> {
        if b.nrows() != self.n() {
            return Err(GpslError::Dimension(format!(
                "solve_mat: got {} rows, expected {}",
                b.nrows(),
                self.n()
            )));
        }
        let y = self
            .factor
            .solve_triangular(UPLO::Lower, Diag::NonUnit, b)
            .map_err(|e| GpslError::Numerical(format!("triangular solve failed: {e}")))?;
        let x = self
            .factor
            .t()
            .solve_triangular(UPLO::Upper, Diag::NonUnit, &y)
            .map_err(|e| GpslError::Numerical(format!("triangular solve failed: {e}")))?;
        Ok(x)
    }

    /// Dense inverse. The only place K^{-1} is ever formed explicitly.
    pub fn inverse(&self) -> Result<Array2<f64>> {
        self.solve_mat(&Array2::eye(self.n()))
    }
}

/// Solve L y = b for a lower-triangular L and matrix RHS.
pub(crate) fn solve_lower(l: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    l.solve_triangular(UPLO::Lower, Diag::NonUnit, b)
        .map_err(|e| GpslError::Numerical(format!("triangular solve failed: {e}")))
}

/// Solve L y = b for a lower-triangular L and vector RHS.
pub(crate) fn solve_lower_vec(l: &Array2<f64>, b: &Array1<f64>) -> Result<Array1<f64>> {
    l.solve_triangular(UPLO::Lower, Diag::NonUnit, b)
        .map_err(|e| GpslError::Numerical(format!("triangular solve failed: {e}")))
}
