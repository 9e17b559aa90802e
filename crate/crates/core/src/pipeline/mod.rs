//! Orchestration: manifest ingest, the preprocessing cache, training
//! stages, generation, evaluation and artifact inspection.
//!
//! Every stage reads and writes under one output directory:
//!
//! ```text
//! out/cache/<id>.cmx, out/cache/index.json
//! out/checkpoints/{tokenizer,ar}.ckpt (+ periodic -<step>.ckpt)
//! out/logs/{tokenizer,ar}.jsonl
//! out/tokens/<id>.toks
//! out/generated/gen-s<seed>-<i>.{wav,json,toks}
//! out/reports/<mode>.{txt,json}
//! ```

mod cache;
mod config;
mod evaluate;
mod inspect;
mod manifest;
mod stages;
mod synth;

pub use cache::{
    decode_cmx_file, encode_cmx_file, load_index, load_split, preprocess, read_cmx_file, CacheIndex, PreprocessReport,
};
pub use config::{
    CmxConfig, DataConfig, GenerateConfig, MetricsConfig, ProviderKind, RunConfig, TrainConfig, NSYNTH_FAMILIES,
};
pub use evaluate::{evaluate_sets, run_evaluate, EvalMode, LabelledClips};
pub use inspect::inspect;
pub use manifest::{ingest, load_clip, resample_linear, DatasetManifest, IngestReport, ManifestRecord, Split};
pub use stages::{
    checkpoint_path, load_ar, load_checkpoint, load_tokenizer, parse_condition, run_generate, run_train_ar,
    run_train_tokenizer, tokenize_split, GenerationMeta, TrainSummary,
};
pub use synth::{synth_note, synthetic_split, write_synthetic_dataset};
