//! Criterion benchmarks for the `ftppi` solvers; see `benches/`.
