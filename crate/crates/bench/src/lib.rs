//! Criterion benchmarks for the numeric and model kernels live under `benches/`.
