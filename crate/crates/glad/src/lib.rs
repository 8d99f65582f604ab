pub mod embed;
pub mod error;
pub mod eval;
pub mod fields;
pub mod graph;
pub mod ingest;
pub mod model;
pub mod numeric;
pub mod pipeline;
pub mod synth;
pub mod template;
pub mod train;
