//! Benchmarks live in `benches/`; run them with `cargo bench -p grcgan-bench`.
