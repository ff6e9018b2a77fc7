//! Hamming-loss evaluation, paired decoder comparison and the
//! missing-labels sweep harness.

use std::time::Instant;

use crate::corpus::{mask_labels, Corpus};
use crate::decode::{decode_corpus, Decoder, Predictions};
use crate::error::{GpslError, Result};
use crate::inference::{train, TrainOptions};
use crate::kernel::KernelSpec;
use crate::model::{DependencySet, TrainedModel};

/// Mismatch count over positions with an observed gold label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HammingCount {
    pub mismatches: usize,
    /// Positions that entered the count (gold label present).
    pub counted: usize,
}

/// Hamming loss between a gold sequence (possibly with missing labels) and
/// a predicted sequence. Positions with missing gold labels are excluded
/// from both the mismatch count and the token count.
pub fn hamming(y_true: &[Option<usize>], y_pred: &[usize]) -> Result<HammingCount> {
    if y_true.len() != y_pred.len() {
        return Err(GpslError::Dimension(format!(
            "hamming: sequence lengths differ ({} vs {})",
            y_true.len(),
            y_pred.len()
        )));
    }
    let mut mismatches = 0;
    let mut counted = 0;
    for (t, p) in y_true.iter().zip(y_pred) {
        if let Some(t) = t {
            counted += 1;
            if t != p {
                mismatches += 1;
            }
        }
    }
    Ok(HammingCount {
        mismatches,
        counted,
    })
}

/// Format a percentage with two decimals. Rust's float formatting rounds
/// ties to the even digit, which is the convention reports use.
pub fn format_percent(pct: f64) -> String {
    format!("{pct:.2}")
}

/// Evaluation result over one corpus with one decoder.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub decoder: Decoder,
    pub per_sentence: Vec<HammingCount>,
    pub total_mismatches: usize,
    pub total_counted: usize,
    /// Fraction of counted tokens mislabeled.
    pub mean_loss: f64,
    /// 1 - mean_loss, exactly.
    pub accuracy: f64,
    pub mean_iterations: f64,
    pub max_iterations: usize,
    pub nonconverged_sentences: usize,
}

impl EvalReport {
    pub fn loss_percent(&self) -> String {
        format_percent(100.0 * self.mean_loss)
    }
}

fn report_from(
    decoder: Decoder,
    corpus: &Corpus,
    predictions: &Predictions,
) -> Result<EvalReport> {
    let mut per_sentence = Vec::with_capacity(corpus.sentences.len());
    let mut total_mismatches = 0;
    let mut total_counted = 0;
    for (s, labels) in corpus.sentences.iter().zip(&predictions.labels) {
        let count = hamming(&s.labels(), labels)?;
        total_mismatches += count.mismatches;
        total_counted += count.counted;
        per_sentence.push(count);
    }
    if total_counted == 0 {
        return Err(GpslError::EmptyCorpus(
            "evaluation corpus has no observed gold labels".into(),
        ));
    }
    let mean_loss = total_mismatches as f64 / total_counted as f64;
    Ok(EvalReport {
        decoder,
        per_sentence,
        total_mismatches,
        total_counted,
        mean_loss,
        accuracy: 1.0 - mean_loss,
        mean_iterations: predictions.mean_iterations(),
        max_iterations: predictions.iterations.iter().copied().max().unwrap_or(0),
        nonconverged_sentences: predictions.nonconverged,
    })
}

/// Decode `corpus` (already expanded under the model's frozen alphabets)
/// and report the average Hamming loss.
pub fn evaluate(
    model: &TrainedModel,
    corpus: &Corpus,
    decoder: Decoder,
    rns_tol: f64,
    rns_max_iter: usize,
) -> Result<EvalReport> {
    if corpus.sentences.is_empty() {
        return Err(GpslError::EmptyCorpus("nothing to evaluate".into()));
    }
    let predictions = decode_corpus(model, corpus, decoder, rns_tol, rns_max_iter)?;
    report_from(decoder, corpus, &predictions)
}

/// Paired comparison of the iterative decoder against Viterbi on the same
/// data, with the t statistic over per-sentence loss differences.
#[derive(Debug, Clone)]
pub struct PairedReport {
    pub rns: EvalReport,
    pub viterbi: EvalReport,
    /// Per-sentence loss differences (viterbi - rns), on sentences with
    /// at least one counted token.
    pub differences: Vec<f64>,
    /// Paired t statistic of the differences (0 when they are constant).
    pub t_value: f64,
}

pub fn paired_compare(
    model: &TrainedModel,
    corpus: &Corpus,
    rns_tol: f64,
    rns_max_iter: usize,
) -> Result<PairedReport> {
    let rns = evaluate(model, corpus, Decoder::Rns, rns_tol, rns_max_iter)?;
    let viterbi = evaluate(model, corpus, Decoder::Viterbi, rns_tol, rns_max_iter)?;
    let differences: Vec<f64> = rns
        .per_sentence
        .iter()
        .zip(&viterbi.per_sentence)
        .filter(|(a, _)| a.counted > 0)
        .map(|(a, b)| {
            b.mismatches as f64 / b.counted as f64 - a.mismatches as f64 / a.counted as f64
        })
        .collect();
    let t_value = t_statistic(&differences);
    Ok(PairedReport {
        rns,
        viterbi,
        differences,
        t_value,
    })
}

fn t_statistic(diffs: &[f64]) -> f64 {
    let n = diffs.len();
    if n < 2 || diffs.windows(2).all(|w| w[0] == w[1]) {
        return 0.0; // constant differences carry no evidence
    }
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var <= 0.0 {
        return 0.0;
    }
    mean / (var / n as f64).sqrt()
}

/// One cell of the missing-labels sweep grid.
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub fraction: f64,
    pub offsets: String,
    pub loss: f64,
    pub accuracy: f64,
    pub mean_iterations: f64,
    pub wall_secs: f64,
}

/// Accuracy grid over (missing fraction) x (dependency set): rows follow
/// `variants`, columns follow `fractions`.
#[derive(Debug, Clone)]
pub struct SweepGrid {
    pub fractions: Vec<f64>,
    pub variants: Vec<DependencySet>,
    pub cells: Vec<Vec<SweepCell>>,
}

impl SweepGrid {
    /// Comma-separated table: one row per (decoder, fraction, deps).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("decoder,fraction,deps,loss_percent,accuracy,mean_iterations,wall_secs\n");
        for row in &self.cells {
            for cell in row {
                out.push_str(&format!(
                    "rns,{},{},{},{:.6},{:.2},{:.3}\n",
                    cell.fraction,
                    cell.offsets,
                    format_percent(100.0 * cell.loss),
                    cell.accuracy,
                    cell.mean_iterations,
                    cell.wall_secs
                ));
            }
        }
        out
    }
}

/// For each (fraction, dependency set): mask that fraction of the training
/// labels, train, and evaluate on the held-out test corpus. Deterministic
/// under `seed` (each cell masks with `seed + cell_index`).
#[allow(clippy::too_many_arguments)]
pub fn missing_sweep(
    train_corpus: &Corpus,
    test_corpus: &Corpus,
    fractions: &[f64],
    variants: &[DependencySet],
    kernel: KernelSpec,
    opts: &TrainOptions,
    rns_tol: f64,
    rns_max_iter: usize,
    seed: u64,
) -> Result<SweepGrid> {
    for &f in fractions {
        if !(0.0..=1.0).contains(&f) {
            return Err(GpslError::Argument(format!(
                "sweep fraction {f} outside [0,1]"
            )));
        }
    }
    let mut cells = Vec::with_capacity(variants.len());
    let mut cell_index = 0u64;
    for deps in variants {
        let mut row = Vec::with_capacity(fractions.len());
        for &fraction in fractions {
            let started = Instant::now();
            let masked = mask_labels(train_corpus, fraction, seed.wrapping_add(cell_index))?;
            let context = |e: GpslError| {
                GpslError::Numerical(format!(
                    "sweep cell (fraction {fraction}, deps {}): {e}",
                    deps.to_string_list()
                ))
            };
            let (model, _) = train(&masked, deps.clone(), kernel, opts.clone())
                .map_err(context)?;
            let report = evaluate(&model, test_corpus, Decoder::Rns, rns_tol, rns_max_iter)
                .map_err(context)?;
            row.push(SweepCell {
                fraction,
                offsets: deps.to_string_list(),
                loss: report.mean_loss,
                accuracy: report.accuracy,
                mean_iterations: report.mean_iterations,
                wall_secs: started.elapsed().as_secs_f64(),
            });
            cell_index += 1;
        }
        cells.push(row);
    }
    Ok(SweepGrid {
        fractions: fractions.to_vec(),
        variants: variants.to_vec(),
        cells,
    })
}
