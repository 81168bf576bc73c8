//! Benchmarks live in `benches/`; run them with `cargo bench -p lcdr-bench`.
