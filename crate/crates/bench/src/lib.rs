//! Criterion benchmarks for aggregation and local training; see `benches/`.
