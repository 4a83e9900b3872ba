//! Half-open histogram bins `[k·w, (k+1)·w)` on distances.

/// Slack absorbing representation error, so that e.g. `0.15` lands in bin 15
/// of width `0.01` even though `0.15 / 0.01 < 15` in binary64.
const SLACK: f64 = 1e-9;

/// Bin index of `value` for bins of `width`.
pub fn index(value: f64, width: f64) -> usize {
    let k = (value / width + SLACK).floor();
    if k <= 0.0 {
        0
    } else {
        k as usize
    }
}

/// Number of bins of `width` covering `[0, 1]`; the value 1 falls in the
/// last bin.
pub fn count_unit(width: f64) -> usize {
    ((1.0 / width) - SLACK).ceil().max(1.0) as usize
}

/// Bin index clamped into `[0, count_unit(width))`.
pub fn index_unit(value: f64, width: f64) -> usize {
    index(value, width).min(count_unit(width) - 1)
}

pub fn center(k: usize, width: f64) -> f64 {
    (k as f64 + 0.5) * width
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decimal_edges_land_in_their_bin() {
        assert_eq!(index(0.15, 0.01), 15);
        assert_eq!(index(0.19, 0.01), 19);
        assert_eq!(index(0.149, 0.01), 14);
        assert_eq!(index(0.0, 0.02), 0);
        assert_eq!(count_unit(0.02), 50);
        assert_eq!(count_unit(0.01), 100);
        assert_eq!(index_unit(1.0, 0.02), 49);
        assert_eq!(index_unit(0.98, 0.02), 49);
        assert_eq!(index_unit(0.97, 0.02), 48);
    }
}
