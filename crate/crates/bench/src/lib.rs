//! Criterion benchmarks for routing and the full model; see `benches/deca.rs`.
