//! Criterion benchmarks for steppers, STM propagation and control shooting; see `benches/`.
