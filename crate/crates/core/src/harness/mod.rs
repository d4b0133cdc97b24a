//! Synthetic phantoms with known deformations, TRE/DSC evaluation and the
//! file-level commands used by the `weakreg` binary.
//!
//! A phantom is an ellipsoidal gland holding a few spherical landmark blobs.
//! The moving and fixed images render the same anatomy with different
//! intensity mappings and noise, the fixed one pulled through a smooth
//! ground-truth field, so raw intensity matching is no help and only the
//! label pairs carry correspondence.

mod commands;
mod evaluate;
mod metrics;
mod phantom;

pub use commands::{
    evaluate_command, inspect_command, register_command, synth_command, train_command, warp_command,
    write_corpus, CaseFiles, CorpusManifest, InspectSummary, PairFiles, RunConfig, SynthConfig, CORPUS_FORMAT,
    CORPUS_MANIFEST,
};
pub use evaluate::{audit_split, evaluate, evaluate_fields, CaseReport, EvalMetadata, EvalReport};
pub use metrics::{centroid_distance, dsc, percentile, summarize, tre, Percentiles, Tre, DSC_THRESHOLD};
pub use phantom::{
    case_anatomy, synth_case, synth_cases, synth_corpus, training_corpus, Anatomy, DeformationSpec, GlandSpec,
    LandmarkSpec, PhantomSpec, RenderSpec, SyntheticCase, MAX_ATTEMPTS,
};
