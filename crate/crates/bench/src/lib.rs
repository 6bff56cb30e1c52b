//! Criterion benchmarks for the lab kernels live under `benches/`.
