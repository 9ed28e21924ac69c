//! Placeholder library target; the benchmarks under `benches/` drive the
//! `eigmg` crate directly.
