//! Task streams, the incremental run loop, baselines and reports.

mod embed;
mod report;
mod run;
mod stream;

pub use embed::{
    decode_embeddings, decode_embeddings_csv, encode_embeddings, encode_embeddings_csv, load_embedding_stream,
    read_embedding_file, stream_to_table, write_embedding_file, EmbeddingTable, EMBEDDING_MAGIC,
};
pub use report::{
    compute_metrics, AdapterConfig, ExperimentSpec, MeanStd, Method, PhaseTimes, RunConfig, RunReport, RunSummary,
    StreamSource,
};
pub use run::{
    init_seed, run_acmap, run_ensemble_baseline, run_experiment, run_method, run_simplecil, task_seed,
    train_consecutive_adapters, RunArtifacts, RunOutput,
};
pub use stream::{
    generate_synthetic_stream, partition_classes, stream_from_rows, DriftModel, PrototypeSource, Sample, Split,
    SplitSpec, StreamGuard, StreamSpec, TaskDataset, TaskStream,
};
