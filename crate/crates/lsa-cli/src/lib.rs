//! File-facing companion to the core library: JSON and CSV formats, the
//! method mini-language used on the command line, and a replicate runner
//! with optional thread parallelism.

pub mod formats;
pub mod methods;
pub mod runner;
