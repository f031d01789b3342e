//! Criterion benchmarks for rkv-core live under `benches/`.
