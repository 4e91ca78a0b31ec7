//! Benchmark-only crate; see benches/training.rs.
