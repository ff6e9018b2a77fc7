//! Model definition: dependency sets, variational state, indexing
//! conventions and versioned (de)serialization of trained models.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::prelude::*;
use once_cell::sync::OnceCell;

use crate::corpus::Alphabet;
use crate::error::{GpslError, Result};
use crate::kernel::{GramMatrix, KernelFamily, KernelSpec};

/// Format tag written as the first line of model files.
pub const MODEL_VERSION: &str = "gpsl-model-v1";

/// The set S of signed positional offsets whose labels condition each
/// output component. GPSL1 = {-1}, GPSL2 = {-1,+1}, GPSL4 = {-2,-1,+1,+2}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DependencySet {
    offsets: Vec<i32>,
}

impl DependencySet {
    pub fn new(offsets: Vec<i32>) -> Result<Self> {
        for (i, &o) in offsets.iter().enumerate() {
            if o == 0 {
                return Err(GpslError::Argument("dependency offset 0 is not allowed".into()));
            }
            if offsets[..i].contains(&o) {
                return Err(GpslError::Argument(format!("duplicate dependency offset {o}")));
            }
        }
        Ok(DependencySet { offsets })
    }

    /// The empty set (independent per-token model).
    pub fn none() -> Self {
        DependencySet { offsets: vec![] }
    }

    /// Previous-label chain {-1}.
    pub fn previous() -> Self {
        DependencySet { offsets: vec![-1] }
    }

    pub fn offsets(&self) -> &[i32] {
        &self.offsets
    }

    /// Number of dependency relations R.
    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// True when the set is exactly {-1} (the Viterbi-compatible chain).
    pub fn is_previous_chain(&self) -> bool {
        self.offsets == [-1]
    }

    /// Parse a comma-separated list such as `-2,-1,1,2`.
    pub fn parse(text: &str) -> Result<Self> {
        let text = text.trim();
        if text.is_empty() {
            return Ok(DependencySet::none());
        }
        let offsets = text
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<i32>()
                    .map_err(|_| GpslError::Argument(format!("bad dependency offset {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        DependencySet::new(offsets)
    }

    pub fn to_string_list(&self) -> String {
        self.offsets
            .iter()
            .map(|o| o.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Row-major index of the ordered label pair (dependent `a`, target `b`).
pub fn pair_index(a: usize, b: usize, label_count: usize) -> usize {
    assert!(
        a < label_count && b < label_count,
        "label pair ({a},{b}) out of range for J={label_count}"
    );
    a * label_count + b
}

/// Variational parameters: means and diagonal site/covariance parameters
/// for the local functions (per label) and pair functions (per dependency).
///
/// `V^{Uj}` is represented implicitly as `(Omega^{Uj} + diag(lambda^{Uj}))^{-1}`
/// and is never stored densely; `V^{Sd}` is diagonal and stored directly.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    /// J vectors of length NL.
    pub m_u: Vec<Array1<f64>>,
    /// J vectors of length NL; entries in (0,1) for observed tokens, 0 for
    /// missing ones.
    pub lambda_u: Vec<Array1<f64>>,
    /// R vectors of length J^2.
    pub m_s: Vec<Array1<f64>>,
    /// R vectors of length J^2, entries in (0,1].
    pub v_s: Vec<Array1<f64>>,
}

impl VariationalState {
    /// Deterministic initialization: zero means, lambda = 1/J, v_S = 1.
    pub fn init(label_count: usize, token_count: usize, dependency_count: usize) -> Self {
        let j2 = label_count * label_count;
        VariationalState {
            m_u: vec![Array1::zeros(token_count); label_count],
            lambda_u: vec![
                Array1::from_elem(token_count, 1.0 / label_count as f64);
                label_count
            ],
            m_s: vec![Array1::zeros(j2); dependency_count],
            v_s: vec![Array1::ones(j2); dependency_count],
        }
    }

    pub fn validate(&self, label_count: usize, token_count: usize, dependency_count: usize) -> Result<()> {
        let j2 = label_count * label_count;
        if self.m_u.len() != label_count || self.lambda_u.len() != label_count {
            return Err(GpslError::Dimension(format!(
                "expected {} local parameter vectors, found {}/{}",
                label_count,
                self.m_u.len(),
                self.lambda_u.len()
            )));
        }
        if self.m_s.len() != dependency_count || self.v_s.len() != dependency_count {
            return Err(GpslError::Dimension(format!(
                "expected {} pair parameter vectors, found {}/{}",
                dependency_count,
                self.m_s.len(),
                self.v_s.len()
            )));
        }
        for (v, name, len) in self
            .m_u
            .iter()
            .map(|v| (v, "m_U", token_count))
            .chain(self.lambda_u.iter().map(|v| (v, "lambda_U", token_count)))
            .chain(self.m_s.iter().map(|v| (v, "m_S", j2)))
            .chain(self.v_s.iter().map(|v| (v, "v_S", j2)))
        {
            if v.len() != len {
                return Err(GpslError::Dimension(format!(
                    "{name} has length {}, expected {len}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(GpslError::Numerical(format!("{name} contains non-finite values")));
            }
        }
        for l in &self.lambda_u {
            if l.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
                return Err(GpslError::Dimension("lambda_U entries must lie in [0,1]".into()));
            }
        }
        for v in &self.v_s {
            if v.iter().any(|&x| !(x > 0.0 && x <= 1.0)) {
                return Err(GpslError::Dimension("v_S entries must lie in (0,1]".into()));
            }
        }
        Ok(())
    }
}

/// Per-label posterior factors used by prediction, built lazily on first
/// use and shared across threads.
#[derive(Debug, Clone)]
pub(crate) struct LabelPosterior {
    /// alpha = K^{-1} m (dual coefficients).
    pub alpha: Array1<f64>,
    /// Lower Cholesky factor of B = I + S K S, S = diag(sqrt(lambda)).
    pub l_b: Array2<f64>,
    pub sqrt_lambda: Array1<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct PosteriorCache {
    pub labels: Vec<LabelPosterior>,
}

/// A trained GPSL model: alphabets, kernel(s), dependency set, training
/// inputs and the variational state. Gram matrices and posterior factors
/// are not stored; they are recomputed on first prediction.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub label_alphabet: Alphabet,
    pub feature_alphabet: Alphabet,
    /// One shared spec, or one per label.
    pub kernels: Vec<KernelSpec>,
    pub deps: DependencySet,
    /// NL sparse training inputs in (sentence, position) order.
    pub x_train: Vec<Vec<u32>>,
    pub state: VariationalState,
    posterior: OnceCell<PosteriorCache>,
}

impl TrainedModel {
    pub fn new(
        label_alphabet: Alphabet,
        feature_alphabet: Alphabet,
        kernels: Vec<KernelSpec>,
        deps: DependencySet,
        x_train: Vec<Vec<u32>>,
        state: VariationalState,
    ) -> Result<Self> {
        let model = TrainedModel {
            label_alphabet,
            feature_alphabet,
            kernels,
            deps,
            x_train,
            state,
            posterior: OnceCell::new(),
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        let j = self.label_count();
        if j < 2 {
            return Err(GpslError::Dimension("model needs at least 2 labels".into()));
        }
        if !(self.kernels.len() == 1 || self.kernels.len() == j) {
            return Err(GpslError::Dimension(format!(
                "expected 1 or {} kernel specs, found {}",
                j,
                self.kernels.len()
            )));
        }
        for spec in &self.kernels {
            spec.validate()?;
        }
        let p = self.feature_alphabet.len() as u32;
        for row in &self.x_train {
            if row.windows(2).any(|w| w[0] >= w[1]) {
                return Err(GpslError::Dimension(
                    "training feature ids must be strictly increasing".into(),
                ));
            }
            if row.last().is_some_and(|&id| id >= p) {
                return Err(GpslError::Dimension("training feature id out of range".into()));
            }
        }
        self.state.validate(j, self.token_count(), self.deps.len())
    }

    pub fn label_count(&self) -> usize {
        self.label_alphabet.len()
    }

    pub fn feature_count(&self) -> usize {
        self.feature_alphabet.len()
    }

    pub fn token_count(&self) -> usize {
        self.x_train.len()
    }

    pub fn dependency_count(&self) -> usize {
        self.deps.len()
    }

    pub fn kernel_for_label(&self, j: usize) -> &KernelSpec {
        if self.kernels.len() == 1 {
            &self.kernels[0]
        } else {
            &self.kernels[j]
        }
    }

    /// Posterior factors, computed exactly once on first use.
    pub(crate) fn posterior(&self) -> Result<&PosteriorCache> {
        self.posterior.get_or_try_init(|| self.build_posterior())
    }

    fn build_posterior(&self) -> Result<PosteriorCache> {
        let xs: Vec<&[u32]> = self.x_train.iter().map(|r| r.as_slice()).collect();
        let shared = if self.kernels.len() == 1 {
            Some(GramMatrix::new(&self.kernels[0], &xs)?)
        } else {
            None
        };
        let n = self.token_count();
        let mut labels = Vec::with_capacity(self.label_count());
        for j in 0..self.label_count() {
            let own;
            let gram = match &shared {
                Some(g) => g,
                None => {
                    own = GramMatrix::new(&self.kernels[j], &xs)?;
                    &own
                }
            };
            let sqrt_lambda = self.state.lambda_u[j].mapv(f64::sqrt);
            let mut b = Array2::<f64>::zeros((n, n));
            for s in 0..n {
                for t in 0..n {
                    b[[s, t]] = sqrt_lambda[s] * gram.matrix()[[s, t]] * sqrt_lambda[t];
                }
                b[[s, s]] += 1.0;
            }
            use ndarray_linalg::cholesky::{FactorizeC, UPLO};
            let l_b = b
                .factorizec(UPLO::Lower)
                .map_err(|_| {
                    GpslError::Numerical("posterior factorization failed (non-SPD site matrix)".into())
                })?
                .into_lower();
            let alpha = gram.solve_vec(&self.state.m_u[j])?;
            labels.push(LabelPosterior {
                alpha,
                l_b,
                sqrt_lambda,
            });
        }
        Ok(PosteriorCache { labels })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        self.write_text(&mut out);
        let mut file = fs::File::create(path).map_err(|e| GpslError::io(path, e))?;
        file.write_all(out.as_bytes())
            .map_err(|e| GpslError::io(path, e))?;
        Ok(())
    }

    fn write_text(&self, out: &mut String) {
        use std::fmt::Write;
        let j = self.label_count();
        let nl = self.token_count();
        writeln!(out, "{MODEL_VERSION}").unwrap();
        writeln!(out, "J {j}").unwrap();
        writeln!(out, "P {}", self.feature_count()).unwrap();
        writeln!(out, "NL {nl}").unwrap();
        writeln!(out, "R {}", self.deps.len()).unwrap();
        write!(out, "offsets").unwrap();
        for o in self.deps.offsets() {
            write!(out, " {o}").unwrap();
        }
        out.push('\n');
        writeln!(out, "kernels {}", self.kernels.len()).unwrap();
        for spec in &self.kernels {
            writeln!(
                out,
                "kernel {} {:.16e} {:.16e} {:.16e}",
                spec.family.name(),
                spec.sigma_f2,
                spec.kappa,
                spec.jitter
            )
            .unwrap();
        }
        writeln!(out, "labels {j}").unwrap();
        for name in self.label_alphabet.names() {
            writeln!(out, "{name}").unwrap();
        }
        writeln!(out, "features {}", self.feature_count()).unwrap();
        for name in self.feature_alphabet.names() {
            writeln!(out, "{name}").unwrap();
        }
        write!(out, "indptr 0").unwrap();
        let mut acc = 0usize;
        for row in &self.x_train {
            acc += row.len();
            write!(out, " {acc}").unwrap();
        }
        out.push('\n');
        write!(out, "ids").unwrap();
        for row in &self.x_train {
            for id in row {
                write!(out, " {id}").unwrap();
            }
        }
        out.push('\n');
        let mut write_arrays = |name: &str, arrays: &[Array1<f64>]| {
            for (i, arr) in arrays.iter().enumerate() {
                write!(out, "{name} {i}").unwrap();
                for v in arr {
                    write!(out, " {v:.16e}").unwrap();
                }
                out.push('\n');
            }
        };
        write_arrays("m_U", &self.state.m_u);
        write_arrays("lambda_U", &self.state.lambda_u);
        write_arrays("m_S", &self.state.m_s);
        write_arrays("v_S", &self.state.v_s);
        writeln!(out, "end").unwrap();
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| GpslError::io(path, e))?;
        Self::parse_text(&text)
    }

    fn parse_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| GpslError::Format(format!("model file truncated, expected {what}")))
        };
        let version = next("version tag")?;
        if version != MODEL_VERSION {
            return Err(GpslError::UnsupportedVersion(version.to_string()));
        }
        fn keyed_usize(line: &str, key: &str) -> Result<usize> {
            let rest = line
                .strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .ok_or_else(|| GpslError::Format(format!("expected `{key} <n>`, got {line:?}")))?;
            rest.trim()
                .parse()
                .map_err(|_| GpslError::Format(format!("bad integer in {line:?}")))
        }
        let j = keyed_usize(next("J")?, "J")?;
        let p = keyed_usize(next("P")?, "P")?;
        let nl = keyed_usize(next("NL")?, "NL")?;
        let r = keyed_usize(next("R")?, "R")?;
        let offsets_line = next("offsets")?;
        if !offsets_line.starts_with("offsets") {
            return Err(GpslError::Format(format!("expected offsets line, got {offsets_line:?}")));
        }
        let offsets = offsets_line["offsets".len()..]
            .split_whitespace()
            .map(|s| {
                s.parse::<i32>()
                    .map_err(|_| GpslError::Format(format!("bad offset {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if offsets.len() != r {
            return Err(GpslError::Dimension(format!(
                "R={r} but {} offsets listed",
                offsets.len()
            )));
        }
        let deps = DependencySet::new(offsets)?;
        let kernel_count = keyed_usize(next("kernels")?, "kernels")?;
        if kernel_count != 1 && kernel_count != j {
            return Err(GpslError::Dimension(format!(
                "kernel count must be 1 or J={j}, got {kernel_count}"
            )));
        }
        let mut kernels = Vec::with_capacity(kernel_count);
        for _ in 0..kernel_count {
            let line = next("kernel spec")?;
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 5 || parts[0] != "kernel" {
                return Err(GpslError::Format(format!("bad kernel line {line:?}")));
            }
            let family = KernelFamily::from_name(parts[1])
                .map_err(|_| GpslError::Format(format!("unknown kernel family {:?}", parts[1])))?;
            let nums: Vec<f64> = parts[2..]
                .iter()
                .map(|s| {
                    s.parse()
                        .map_err(|_| GpslError::Format(format!("bad number {s:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            kernels.push(KernelSpec {
                family,
                sigma_f2: nums[0],
                kappa: nums[1],
                jitter: nums[2],
            });
        }
        let label_count = keyed_usize(next("labels")?, "labels")?;
        if label_count != j {
            return Err(GpslError::Dimension(format!("label count {label_count} != J={j}")));
        }
        let mut label_alphabet = Alphabet::new();
        for _ in 0..j {
            label_alphabet.intern(next("label name")?);
        }
        if label_alphabet.len() != j {
            return Err(GpslError::Format("duplicate label names in model file".into()));
        }
        let feature_count = keyed_usize(next("features")?, "features")?;
        if feature_count != p {
            return Err(GpslError::Dimension(format!("feature count {feature_count} != P={p}")));
        }
        let mut feature_alphabet = Alphabet::new();
        for _ in 0..p {
            feature_alphabet.intern(next("feature name")?);
        }
        if feature_alphabet.len() != p {
            return Err(GpslError::Format("duplicate feature names in model file".into()));
        }
        let indptr_line = next("indptr")?;
        let indptr: Vec<usize> = indptr_line
            .strip_prefix("indptr")
            .ok_or_else(|| GpslError::Format("expected indptr line".into()))?
            .split_whitespace()
            .map(|s| {
                s.parse()
                    .map_err(|_| GpslError::Format(format!("bad indptr entry {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if indptr.len() != nl + 1 || indptr[0] != 0 || indptr.windows(2).any(|w| w[0] > w[1]) {
            return Err(GpslError::Dimension("malformed sparse row pointers".into()));
        }
        let ids_line = next("ids")?;
        let ids: Vec<u32> = ids_line
            .strip_prefix("ids")
            .ok_or_else(|| GpslError::Format("expected ids line".into()))?
            .split_whitespace()
            .map(|s| {
                s.parse()
                    .map_err(|_| GpslError::Format(format!("bad feature id {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if ids.len() != *indptr.last().unwrap() {
            return Err(GpslError::Dimension(format!(
                "expected {} feature ids, found {}",
                indptr.last().unwrap(),
                ids.len()
            )));
        }
        let x_train: Vec<Vec<u32>> = indptr
            .windows(2)
            .map(|w| ids[w[0]..w[1]].to_vec())
            .collect();
        let mut read_arrays = |name: &str, count: usize, len: usize| -> Result<Vec<Array1<f64>>> {
            let mut arrays = Vec::with_capacity(count);
            for i in 0..count {
                let line = lines.next().ok_or_else(|| {
                    GpslError::Format(format!("model file truncated, expected {name} {i}"))
                })?;
                let mut parts = line.split_whitespace();
                if parts.next() != Some(name) || parts.next() != Some(i.to_string().as_str()) {
                    return Err(GpslError::Format(format!("expected `{name} {i} ...`, got {line:?}")));
                }
                let values: Vec<f64> = parts
                    .map(|s| {
                        s.parse()
                            .map_err(|_| GpslError::Format(format!("bad number {s:?} in {name} {i}")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                if values.len() != len {
                    return Err(GpslError::Dimension(format!(
                        "{name} {i} has {} values, expected {len}",
                        values.len()
                    )));
                }
                arrays.push(Array1::from_vec(values));
            }
            Ok(arrays)
        };
        let j2 = j * j;
        let state = VariationalState {
            m_u: read_arrays("m_U", j, nl)?,
            lambda_u: read_arrays("lambda_U", j, nl)?,
            m_s: read_arrays("m_S", r, j2)?,
            v_s: read_arrays("v_S", r, j2)?,
        };
        let end = lines
            .next()
            .ok_or_else(|| GpslError::Format("model file truncated, expected end marker".into()))?;
        if end != "end" {
            return Err(GpslError::Format(format!("expected end marker, got {end:?}")));
        }
        TrainedModel::new(label_alphabet, feature_alphabet, kernels, deps, x_train, state)
    }
}
