//! Criterion benchmarks for the vocoder kernels; see `benches/kernels.rs`.
