//! Criterion benchmarks for the slpd hot paths live in `benches/`.
