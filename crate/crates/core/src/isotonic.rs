//! Pool-adjacent-violators projection onto monotone sequences.

/// Weighted least-squares projection of `values` onto non-decreasing
/// sequences.
pub fn non_decreasing(values: &[f64], weights: &[f64]) -> Vec<f64> {
    assert_eq!(values.len(), weights.len());
    // Each block: (weighted mean, total weight, number of points).
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(values.len());
    for (&v, &w) in values.iter().zip(weights) {
        let mut cur = (v, w, 1usize);
        while let Some(&(m, bw, len)) = blocks.last() {
            if m <= cur.0 {
                break;
            }
            blocks.pop();
            let total = bw + cur.1;
            let mean = if total > 0.0 {
                (m * bw + cur.0 * cur.1) / total
            } else {
                0.5 * (m + cur.0)
            };
            cur = (mean, total, len + cur.2);
        }
        blocks.push(cur);
    }
    blocks
        .into_iter()
        .flat_map(|(m, _, len)| std::iter::repeat_n(m, len))
        .collect()
}

/// Weighted least-squares projection onto non-increasing sequences.
pub fn non_increasing(values: &[f64], weights: &[f64]) -> Vec<f64> {
    let neg: Vec<f64> = values.iter().map(|v| -v).collect();
    non_decreasing(&neg, weights).into_iter().map(|v| -v).collect()
}
