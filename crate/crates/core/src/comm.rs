//! Per-device traffic charged for ring-style collectives.

/// Bytes one rank sends for an all-gather or reduce-scatter of a `tensor_bytes`
/// tensor across `group` ranks: `(n-1)/n · N`.
pub fn scatter_gather_bytes(group: usize, tensor_bytes: f64) -> f64 {
    if group <= 1 {
        return 0.0;
    }
    let n = group as f64;
    (n - 1.0) / n * tensor_bytes
}

/// All-reduce is a reduce-scatter followed by an all-gather: `2(n-1)/n · N`.
pub fn all_reduce_bytes(group: usize, tensor_bytes: f64) -> f64 {
    2.0 * scatter_gather_bytes(group, tensor_bytes)
}
