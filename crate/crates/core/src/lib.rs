//! Gaussian-process sequence labeling with a pseudo-likelihood model.
//!
//! Each output component is scored by per-label latent functions with GP
//! priors over the inputs, plus pairwise latent functions over the labels
//! referenced by a configurable set of signed neighbor offsets. Training is
//! variational: coordinate ascent on a concave evidence lower bound with an
//! O(NL)-parameter site form for the local covariances, alternated with
//! gradient-based kernel hyperparameter updates. Prediction iterates a
//! refined normalized score per token to a fixed point; a Viterbi baseline
//! is available for previous-label chains.
//!
//! End-to-end flow: read a CoNLL file, expand unigram feature templates,
//! [`train`], [`save`](model::TrainedModel::save), then decode and
//! [`evaluate`](eval::evaluate) held-out data.

pub mod corpus;
pub mod decode;
pub mod error;
pub mod eval;
pub mod inference;
pub mod kernel;
pub mod model;

pub use corpus::{
    apply_templates, apply_templates_frozen, mask_labels, read_conll, synth_generate, write_conll,
    Alphabet, Corpus, RawCorpus, Sentence, SynthSpec, TemplateSet, Token, MISSING_LABEL,
};
pub use decode::{
    decode_corpus, format_predictions, g_term, predictive_local, rns_decode, viterbi_decode,
    Decoder, Predictions, PredictiveLocal, RnsDecode, RnsTable,
};
pub use error::{GpslError, Result};
pub use eval::{
    evaluate, format_percent, hamming, missing_sweep, paired_compare, EvalReport, HammingCount,
    PairedReport, SweepGrid,
};
pub use inference::{
    build_contexts, train, BoundParts, DepLabel, TokenContext, TraceEntry, TrainOptions,
    TrainReport, Trainer,
};
pub use kernel::{kernel_eval, GramMatrix, KernelFamily, KernelSpec};
pub use model::{pair_index, DependencySet, TrainedModel, VariationalState, MODEL_VERSION};
