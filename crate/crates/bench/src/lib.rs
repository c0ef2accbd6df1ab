//! Criterion benchmarks for the geoflow kernels live in `benches/`.
