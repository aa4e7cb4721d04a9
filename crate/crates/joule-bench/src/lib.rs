//! Benchmark-only crate; the interesting parts live in `benches/`.
