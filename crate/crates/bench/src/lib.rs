//! Criterion benchmarks for the fovsearch pipeline; see `benches/`.
