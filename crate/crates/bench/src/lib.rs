//! Criterion benchmarks for the hot paths of `mtrnet`; see `benches/`.
