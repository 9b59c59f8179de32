//! Statistical helpers shared by unit, integration and acceptance
//! tests. Not part of the public API.

/// Critical value of the chi-square distribution, 255 degrees of
/// freedom, p = 0.01 (Wilson-Hilferty).
pub const CHI2_DF255_P01: f64 = 310.457;

/// Chi-square statistic of observed byte counts against a uniform
/// distribution over 256 bins.
pub fn chi_square_256(counts: &[u64; 256]) -> f64 {
    let total: u64 = counts.iter().sum();
    let expected = total as f64 / 256.0;
    counts
        .iter()
        .map(|&c| {
            let d = c as f64 - expected;
            d * d / expected
        })
        .sum()
}
