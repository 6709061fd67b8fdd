//! Criterion benchmarks for the rank-1 layers live under `benches/`.
