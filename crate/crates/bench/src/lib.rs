//! Criterion benchmarks for the training and retrieval hot paths; see
//! `benches/training.rs`.
