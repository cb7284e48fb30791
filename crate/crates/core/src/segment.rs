//! Direct / early / tail segment boundaries shared by the encoder's energy
//! ratios and the decoder's gain solve.

use std::ops::Range;

/// Half-width of the direct-path window: 0.5 ms.
pub fn direct_half_width(sample_rate: u32) -> usize {
    (0.0005 * sample_rate as f64).round() as usize
}

/// Length of the early-reflection window after the direct path: 24 ms.
pub fn early_window(sample_rate: u32) -> usize {
    (0.024 * sample_rate as f64).round() as usize
}

/// Mixing point for a direct path at `k_d`.
pub fn mixing_point(k_d: f64, sample_rate: u32) -> usize {
    k_d.round().max(0.0) as usize + early_window(sample_rate)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segments {
    pub direct: Range<usize>,
    pub early: Range<usize>,
    pub tail: Range<usize>,
}

impl Segments {
    /// Direct window `round(k_d) ± 0.5 ms`, early `(direct end, n_m)`, tail
    /// `[n_m, len)`, all clipped to the signal.
    pub fn new(k_d: f64, n_m: usize, len: usize, sample_rate: u32) -> Self {
        let hw = direct_half_width(sample_rate);
        let centre = k_d.round().max(0.0) as usize;
        let d_start = centre.saturating_sub(hw).min(len);
        let d_end = (centre + hw + 1).min(len);
        let n_m = n_m.min(len);
        let early = d_end.min(n_m)..n_m;
        Self {
            direct: d_start..d_end,
            early,
            tail: n_m..len,
        }
    }

    pub fn energies(&self, x: &[f64]) -> (f64, f64, f64) {
        let e = |r: &Range<usize>| x[r.clone()].iter().map(|v| v * v).sum::<f64>();
        (e(&self.direct), e(&self.early), e(&self.tail))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundaries_at_16k() {
        assert_eq!(direct_half_width(16_000), 8);
        assert_eq!(early_window(16_000), 384);
        let s = Segments::new(100.4, mixing_point(100.4, 16_000), 1000, 16_000);
        assert_eq!(s.direct, 92..109);
        assert_eq!(s.early, 109..484);
        assert_eq!(s.tail, 484..1000);
    }

    #[test]
    fn clipped_at_origin() {
        let s = Segments::new(3.0, 387, 500, 16_000);
        assert_eq!(s.direct, 0..12);
        assert_eq!(s.early.start, 12);
    }
}
