//! Criterion benchmarks for `partquad`; see `benches/`.
