//! Corpus ingestion: CoNLL-style column data, unigram feature templates,
//! label/feature alphabets, missing-label masks and synthetic data.
//!
//! The on-disk format is UTF-8, whitespace-separated columns, one token per
//! line, blank line between sentences. The final column is the label; the
//! label string `?` marks a missing label.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{GpslError, Result};

/// Label string that marks a missing label in CoNLL files.
pub const MISSING_LABEL: &str = "?";

/// Bijection between strings and dense ids, in first-seen order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Alphabet {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Alphabet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Id for `name`, interning it if unseen.
    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn lookup(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|s| s.as_str())
    }
}

/// One input component: raw columns, expanded sparse features and a label.
///
/// `features` is a strictly increasing list of feature ids (a sparse binary
/// vector); `label` is `None` when the label is missing.
#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub columns: Vec<String>,
    pub features: Vec<u32>,
    pub label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sentence {
    pub tokens: Vec<Token>,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Gold labels, `None` where missing.
    pub fn labels(&self) -> Vec<Option<usize>> {
        self.tokens.iter().map(|t| t.label).collect()
    }
}

/// A parsed but not yet feature-expanded file: sentences of raw column rows.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCorpus {
    pub sentences: Vec<Vec<Vec<String>>>,
    pub column_count: usize,
}

/// Feature-expanded corpus with its alphabets.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub sentences: Vec<Sentence>,
    pub label_alphabet: Alphabet,
    pub feature_alphabet: Alphabet,
}

impl Corpus {
    /// Number of labels J.
    pub fn label_count(&self) -> usize {
        self.label_alphabet.len()
    }

    /// Feature-space dimension P.
    pub fn feature_count(&self) -> usize {
        self.feature_alphabet.len()
    }

    /// Total number of tokens NL.
    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(Sentence::len).sum()
    }

    pub fn observed_label_count(&self) -> usize {
        self.sentences
            .iter()
            .flat_map(|s| s.tokens.iter())
            .filter(|t| t.label.is_some())
            .count()
    }

    /// Feature rows flattened in (sentence, position) order.
    pub fn flat_features(&self) -> Vec<&[u32]> {
        self.sentences
            .iter()
            .flat_map(|s| s.tokens.iter().map(|t| t.features.as_slice()))
            .collect()
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| GpslError::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Parse a CoNLL-style file into raw column rows.
///
/// Column counts must agree across the whole file; an empty file (no token
/// lines) is an error.
pub fn read_conll(path: impl AsRef<Path>) -> Result<RawCorpus> {
    let path = path.as_ref();
    let lines = read_lines(path)?;
    let mut sentences = Vec::new();
    let mut current: Vec<Vec<String>> = Vec::new();
    let mut column_count = None;
    for (lineno, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            if !current.is_empty() {
                sentences.push(std::mem::take(&mut current));
            }
            continue;
        }
        let cols: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        match column_count {
            None => column_count = Some(cols.len()),
            Some(n) if n != cols.len() => {
                return Err(GpslError::Format(format!(
                    "{}:{}: expected {} columns, found {}",
                    path.display(),
                    lineno + 1,
                    n,
                    cols.len()
                )));
            }
            _ => {}
        }
        current.push(cols);
    }
    if !current.is_empty() {
        sentences.push(current);
    }
    if sentences.is_empty() {
        return Err(GpslError::EmptyCorpus(format!(
            "{} contains no token lines",
            path.display()
        )));
    }
    Ok(RawCorpus {
        sentences,
        column_count: column_count.unwrap(),
    })
}

#[derive(Debug, Clone, PartialEq)]
enum TemplatePart {
    Literal(String),
    /// `%x[row,col]` macro: relative row offset and absolute column index.
    Macro {
        row: i32,
        col: usize,
    },
}

/// One unigram (`U`-type) feature template.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    raw: String,
    parts: Vec<TemplatePart>,
}

impl Template {
    fn parse(raw: &str) -> Result<Self> {
        let mut parts = Vec::new();
        let mut literal = String::new();
        let bytes = raw.as_bytes();
        let mut i = 0;
        while i < bytes.len() {
            if bytes[i] == b'%' && raw[i..].starts_with("%x[") {
                if !literal.is_empty() {
                    parts.push(TemplatePart::Literal(std::mem::take(&mut literal)));
                }
                let close = raw[i..].find(']').ok_or_else(|| {
                    GpslError::Template(format!("unterminated %x macro in {raw:?}"))
                })? + i;
                let inner = &raw[i + 3..close];
                let (row_s, col_s) = inner.split_once(',').ok_or_else(|| {
                    GpslError::Template(format!("bad %x macro {:?} in {raw:?}", &raw[i..=close]))
                })?;
                let row: i32 = row_s.trim().parse().map_err(|_| {
                    GpslError::Template(format!("bad row offset {row_s:?} in {raw:?}"))
                })?;
                let col: usize = col_s.trim().parse().map_err(|_| {
                    GpslError::Template(format!("bad column index {col_s:?} in {raw:?}"))
                })?;
                parts.push(TemplatePart::Macro { row, col });
                i = close + 1;
            } else {
                let ch = raw[i..].chars().next().unwrap();
                literal.push(ch);
                i += ch.len_utf8();
            }
        }
        if !literal.is_empty() {
            parts.push(TemplatePart::Literal(literal));
        }
        Ok(Template {
            raw: raw.to_string(),
            parts,
        })
    }

    /// Expand the template for token `pos` of a sentence given as raw rows.
    ///
    /// Rows outside the sentence yield CRF++-style padding values `_B-1_`,
    /// `_B+1_`, ... `observable_cols` is the column count excluding the
    /// label column.
    fn expand(&self, rows: &[Vec<String>], pos: usize, observable_cols: usize) -> Result<String> {
        let mut out = String::new();
        for part in &self.parts {
            match part {
                TemplatePart::Literal(s) => out.push_str(s),
                TemplatePart::Macro { row, col } => {
                    if *col >= observable_cols {
                        return Err(GpslError::Template(format!(
                            "template {:?} references column {} but only {} observable columns exist",
                            self.raw, col, observable_cols
                        )));
                    }
                    let r = pos as i64 + *row as i64;
                    if r < 0 {
                        write!(out, "_B{r}_").unwrap();
                    } else if r >= rows.len() as i64 {
                        write!(out, "_B+{}_", r - rows.len() as i64 + 1).unwrap();
                    } else {
                        out.push_str(&rows[r as usize][*col]);
                    }
                }
            }
        }
        Ok(out)
    }
}

/// The unigram templates applied to every token.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSet {
    templates: Vec<Template>,
}

impl TemplateSet {
    /// Parse template lines. `#` comments and blank lines are skipped; only
    /// `U`-type templates are accepted.
    pub fn parse_lines<'a>(lines: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut templates = Vec::new();
        for line in lines {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if !line.starts_with('U') {
                return Err(GpslError::Template(format!(
                    "only unigram (U) templates are supported, got {line:?}"
                )));
            }
            templates.push(Template::parse(line)?);
        }
        if templates.is_empty() {
            return Err(GpslError::Template("no templates defined".into()));
        }
        Ok(TemplateSet { templates })
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let lines = read_lines(path)?;
        TemplateSet::parse_lines(lines.iter().map(String::as_str))
            .map_err(|e| GpslError::Template(format!("{}: {e}", path.display())))
    }

    /// The single-template set `U00:%x[0,0]` used for synthetic data.
    pub fn word_only() -> Self {
        TemplateSet::parse_lines(["U00:%x[0,0]"]).unwrap()
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }
}

/// Expand `raw` into a feature-expanded [`Corpus`] with fresh alphabets.
///
/// Every expanded template string becomes one binary feature; the label is
/// taken from the last column (`?` for missing).
pub fn apply_templates(raw: &RawCorpus, templates: &TemplateSet) -> Result<Corpus> {
    expand_corpus(raw, templates, None)
}

/// Expand `raw` against frozen alphabets (e.g. a trained model's). Feature
/// strings absent from `features` are dropped; label strings absent from
/// `labels` are an error.
pub fn apply_templates_frozen(
    raw: &RawCorpus,
    templates: &TemplateSet,
    labels: &Alphabet,
    features: &Alphabet,
) -> Result<Corpus> {
    expand_corpus(raw, templates, Some((labels, features)))
}

fn expand_corpus(
    raw: &RawCorpus,
    templates: &TemplateSet,
    frozen: Option<(&Alphabet, &Alphabet)>,
) -> Result<Corpus> {
    let mut label_alphabet = frozen.map(|(l, _)| l.clone()).unwrap_or_default();
    let mut feature_alphabet = frozen.map(|(_, f)| f.clone()).unwrap_or_default();
    let freeze = frozen.is_some();
    if raw.column_count < 1 {
        return Err(GpslError::Format("tokens have no columns".into()));
    }
    let observable_cols = raw.column_count - 1;
    let mut sentences = Vec::with_capacity(raw.sentences.len());
    for rows in &raw.sentences {
        let mut tokens = Vec::with_capacity(rows.len());
        for pos in 0..rows.len() {
            let mut features = Vec::with_capacity(templates.templates.len());
            for tpl in &templates.templates {
                let name = tpl.expand(rows, pos, observable_cols)?;
                let id = if freeze {
                    match feature_alphabet.lookup(&name) {
                        Some(id) => id,
                        None => continue, // unseen feature under a frozen alphabet
                    }
                } else {
                    feature_alphabet.intern(&name)
                };
                features.push(id as u32);
            }
            features.sort_unstable();
            features.dedup();
            let label_str = rows[pos].last().unwrap();
            let label = if label_str == MISSING_LABEL {
                None
            } else if freeze {
                Some(label_alphabet.lookup(label_str).ok_or_else(|| {
                    GpslError::Format(format!("label {label_str:?} not in the frozen alphabet"))
                })?)
            } else {
                Some(label_alphabet.intern(label_str))
            };
            tokens.push(Token {
                columns: rows[pos].clone(),
                features,
                label,
            });
        }
        sentences.push(Sentence { tokens });
    }
    Ok(Corpus {
        sentences,
        label_alphabet,
        feature_alphabet,
    })
}

/// Replace exactly `round(fraction * token_count)` labels by MISSING,
/// uniformly at random under `seed`. The input must have no missing labels.
pub fn mask_labels(corpus: &Corpus, fraction: f64, seed: u64) -> Result<Corpus> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(GpslError::Argument(format!(
            "mask fraction must lie in [0,1], got {fraction}"
        )));
    }
    let total = corpus.token_count();
    if corpus.observed_label_count() != total {
        return Err(GpslError::Argument(
            "mask_labels requires a fully labeled corpus".into(),
        ));
    }
    let k = (fraction * total as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut rng);
    let mut mask = vec![false; total];
    for &i in order.iter().take(k) {
        mask[i] = true;
    }
    let mut out = corpus.clone();
    let mut flat = 0;
    for sent in &mut out.sentences {
        for tok in &mut sent.tokens {
            if mask[flat] {
                tok.label = None;
                if let Some(last) = tok.columns.last_mut() {
                    *last = MISSING_LABEL.to_string();
                }
            }
            flat += 1;
        }
    }
    Ok(out)
}

/// Write a corpus back to CoNLL format (tab-separated raw columns).
pub fn write_conll(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = String::new();
    for (i, sent) in corpus.sentences.iter().enumerate() {
        if i > 0 {
            buf.push('\n');
        }
        for tok in &sent.tokens {
            buf.push_str(&tok.columns.join("\t"));
            buf.push('\n');
        }
    }
    let mut file = fs::File::create(path).map_err(|e| GpslError::io(path, e))?;
    file.write_all(buf.as_bytes())
        .map_err(|e| GpslError::io(path, e))?;
    Ok(())
}

/// Parameters for [`synth_generate`].
#[derive(Debug, Clone)]
pub struct SynthSpec {
    /// Number of labels J (>= 2).
    pub labels: usize,
    /// Sentence length L (>= 1).
    pub length: usize,
    /// Number of sentences N (>= 1).
    pub sentences: usize,
    /// Log-weight on the dominant (cyclic shift) transition; 0 gives
    /// uniform transitions.
    pub transition_strength: f64,
    /// Distinct indicator words per label.
    pub emission_dim: usize,
    pub seed: u64,
}

/// Probability of the dominant transition under `strength` with `j` labels.
pub fn dominant_transition_prob(strength: f64, j: usize) -> f64 {
    strength.exp() / (strength.exp() + (j - 1) as f64)
}

/// Fraction of tokens whose emitted word indicates their own label.
const SYNTH_EMISSION_FIDELITY: f64 = 0.8;

/// Sample a labeled corpus from a first-order Markov chain over labels.
///
/// The transition matrix puts weight proportional to
/// `exp(transition_strength)` on the cyclic shift `a -> (a+1) mod J` and
/// weight 1 on every other label. Each token emits one word: with
/// probability 0.8 a word indicating its own label, otherwise a word of a
/// uniformly random other label; words are drawn from `emission_dim`
/// variants per label. Deterministic given the seed.
pub fn synth_generate(spec: &SynthSpec) -> Result<Corpus> {
    if spec.labels < 2 {
        return Err(GpslError::Argument("synth needs at least 2 labels".into()));
    }
    if spec.length < 1 || spec.sentences < 1 {
        return Err(GpslError::Argument(
            "synth needs length >= 1 and sentences >= 1".into(),
        ));
    }
    if spec.transition_strength < 0.0 {
        return Err(GpslError::Argument(
            "transition strength must be non-negative".into(),
        ));
    }
    if spec.emission_dim < 1 {
        return Err(GpslError::Argument("emission_dim must be >= 1".into()));
    }
    let j = spec.labels;
    let p_dominant = dominant_transition_prob(spec.transition_strength, j);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut sentences = Vec::with_capacity(spec.sentences);
    for _ in 0..spec.sentences {
        let mut rows = Vec::with_capacity(spec.length);
        let mut label = rng.random_range(0..j);
        for pos in 0..spec.length {
            if pos > 0 {
                label = if rng.random::<f64>() < p_dominant {
                    (label + 1) % j
                } else {
                    // uniform over the J-1 non-dominant labels
                    let mut other = rng.random_range(0..j - 1);
                    if other >= (label + 1) % j {
                        other += 1;
                    }
                    other
                };
            }
            let word_label = if rng.random::<f64>() < SYNTH_EMISSION_FIDELITY {
                label
            } else {
                let mut other = rng.random_range(0..j - 1);
                if other >= label {
                    other += 1;
                }
                other
            };
            let variant = rng.random_range(0..spec.emission_dim);
            rows.push(vec![format!("v{word_label}_{variant}"), format!("y{label}")]);
        }
        sentences.push(rows);
    }
    let raw = RawCorpus {
        sentences,
        column_count: 2,
    };
    apply_templates(&raw, &TemplateSet::word_only())
}
