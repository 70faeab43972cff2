//! Criterion benchmarks for the `slamon` crate; see `benches/slamon.rs`.
