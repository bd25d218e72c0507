//! Criterion benchmarks of the hot paths: OPTICS, decoding, AP and per-example
//! gradients under the merge strategies. Run with `cargo bench -p forkfield-bench`.
