//! Benchmarks for the frglab pipeline; see `benches/`.
