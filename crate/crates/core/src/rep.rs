//! The fixed-length encoding vector and the tail model it carries.
//!
//! Layout (170 values):
//!
//! | index     | content                              |
//! |-----------|--------------------------------------|
//! | 0         | T60 in seconds                       |
//! | 1, 2      | direct-to-early and direct-to-tail energy ratios |
//! | 3..8      | IIR denominator `a_1..a_5`           |
//! | 8..14     | IIR numerator `b_0..b_5`             |
//! | 14..92    | `78 - D` zeros, then the D reflection TOAs |
//! | 92..170   | `78 - D` zeros, then the D reflection scales |
//!
//! TOAs are in samples relative to the direct path and scales relative to the
//! direct-path scale.

use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use crate::poly::{self, Complex64};

pub const DENOM_ORDER: usize = 5;
pub const NUMER_LEN: usize = 6;
pub const MAX_REFLECTIONS: usize = 78;
pub const REP_LEN: usize = 3 + DENOM_ORDER + NUMER_LEN + 2 * MAX_REFLECTIONS;

pub const IDX_T60: usize = 0;
pub const IDX_ETA1: usize = 1;
pub const IDX_ETA2: usize = 2;
pub const IDX_A: usize = 3;
pub const IDX_B: usize = IDX_A + DENOM_ORDER;
pub const IDX_TOA: usize = IDX_B + NUMER_LEN;
pub const IDX_SCALE: usize = IDX_TOA + MAX_REFLECTIONS;

/// Poles must sit at least this far inside the unit circle.
pub const POLE_MARGIN: f64 = 1e-6;
pub const MAX_T60: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RepError {
    #[error("encoding vector has {0} values, expected {REP_LEN}")]
    Length(usize),
    #[error("value {index} is not finite")]
    NonFinite { index: usize },
    #[error("T60 {0} outside (0, {MAX_T60}]")]
    T60(f64),
    #[error("energy ratio {name} = {value} must be positive")]
    Ratio { name: &'static str, value: f64 },
    #[error("TOA block: {0}")]
    Toas(String),
    #[error("scale block: {0}")]
    Scales(String),
    #[error("{0} reflections exceed the maximum of {MAX_REFLECTIONS}")]
    TooManyReflections(usize),
    #[error("cannot parse encoding vector: {0}")]
    Parse(String),
}

/// Reverberant-tail parameters: decay time and IIR colouring filter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailModel {
    pub t60: f64,
    pub b: [f64; NUMER_LEN],
    pub a: [f64; DENOM_ORDER],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stabilization {
    /// All poles were already inside the margin.
    Unchanged,
    /// This many poles were removed.
    Removed(usize),
    /// Root finding failed; the denominator was zeroed.
    Fallback,
}

impl TailModel {
    pub fn max_pole_magnitude(&self) -> Option<f64> {
        poly::max_pole_magnitude(&self.a)
    }

    pub fn is_stable(&self) -> bool {
        self.max_pole_magnitude()
            .is_some_and(|m| m <= 1.0 - POLE_MARGIN)
    }

    /// Removes poles on or outside `1 - POLE_MARGIN` and re-expands the
    /// remaining ones into a reduced-order denominator. `b` is untouched.
    pub fn stabilized(&self) -> (TailModel, Stabilization) {
        let (a, outcome) = stabilize_denominator(&self.a);
        (TailModel { a, ..*self }, outcome)
    }
}

pub fn stabilize_denominator(a: &[f64; DENOM_ORDER]) -> ([f64; DENOM_ORDER], Stabilization) {
    if a.iter().any(|x| !x.is_finite()) {
        return ([0.0; DENOM_ORDER], Stabilization::Fallback);
    }
    let Some(poles) = poly::denominator_poles(a) else {
        return ([0.0; DENOM_ORDER], Stabilization::Fallback);
    };
    let limit = 1.0 - POLE_MARGIN;
    if poles.iter().all(|p| p.norm() <= limit) {
        return (*a, Stabilization::Unchanged);
    }

    // Keep conjugate pairs together so the re-expansion stays real.
    let mut kept: Vec<Complex64> = Vec::new();
    let mut removed = 0;
    for p in &poles {
        let is_real = p.im.abs() <= 1e-9 * p.norm().max(1.0);
        if is_real {
            if p.norm() <= limit {
                kept.push(Complex64::new(p.re, 0.0));
            } else {
                removed += 1;
            }
        } else if p.im > 0.0 {
            if p.norm() <= limit {
                kept.push(*p);
                kept.push(p.conj());
            } else {
                removed += 2;
            }
        }
    }
    let coeffs = poly::from_roots(&kept);
    let mut out = [0.0; DENOM_ORDER];
    for (slot, c) in out.iter_mut().zip(coeffs.iter().skip(1)) {
        *slot = *c;
    }
    match poly::max_pole_magnitude(&out) {
        Some(m) if m <= limit => (out, Stabilization::Removed(removed)),
        _ => ([0.0; DENOM_ORDER], Stabilization::Fallback),
    }
}

/// The 170-value encoding of one AIR.
#[derive(Debug, Clone, PartialEq)]
pub struct LowDimRep {
    vector: Vec<f64>,
    d_count: usize,
}

impl LowDimRep {
    /// Builds a rep from its parts. `toas` must be strictly increasing and
    /// positive; `scales` must have the same length.
    pub fn from_parts(
        t60: f64,
        eta1: f64,
        eta2: f64,
        tail_a: [f64; DENOM_ORDER],
        tail_b: [f64; NUMER_LEN],
        toas: &[f64],
        scales: &[f64],
    ) -> Result<Self, RepError> {
        if toas.len() != scales.len() {
            return Err(RepError::Scales(format!(
                "{} scales for {} TOAs",
                scales.len(),
                toas.len()
            )));
        }
        if toas.len() > MAX_REFLECTIONS {
            return Err(RepError::TooManyReflections(toas.len()));
        }
        let mut v = vec![0.0; REP_LEN];
        v[IDX_T60] = t60;
        v[IDX_ETA1] = eta1;
        v[IDX_ETA2] = eta2;
        v[IDX_A..IDX_B].copy_from_slice(&tail_a);
        v[IDX_B..IDX_TOA].copy_from_slice(&tail_b);
        let pad = MAX_REFLECTIONS - toas.len();
        v[IDX_TOA + pad..IDX_SCALE].copy_from_slice(toas);
        v[IDX_SCALE + pad..].copy_from_slice(scales);
        Self::from_vector(v)
    }

    pub fn from_vector(vector: Vec<f64>) -> Result<Self, RepError> {
        let d_count = validate(&vector)?;
        Ok(Self { vector, d_count })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.vector
    }

    pub fn into_vector(self) -> Vec<f64> {
        self.vector
    }

    pub fn d_count(&self) -> usize {
        self.d_count
    }

    pub fn t60(&self) -> f64 {
        self.vector[IDX_T60]
    }

    pub fn eta1(&self) -> f64 {
        self.vector[IDX_ETA1]
    }

    pub fn eta2(&self) -> f64 {
        self.vector[IDX_ETA2]
    }

    pub fn a(&self) -> [f64; DENOM_ORDER] {
        self.vector[IDX_A..IDX_B].try_into().unwrap()
    }

    pub fn b(&self) -> [f64; NUMER_LEN] {
        self.vector[IDX_B..IDX_TOA].try_into().unwrap()
    }

    /// Reflection TOAs (samples after the direct path), ascending.
    pub fn toas(&self) -> &[f64] {
        &self.vector[IDX_SCALE - self.d_count..IDX_SCALE]
    }

    pub fn scales(&self) -> &[f64] {
        &self.vector[REP_LEN - self.d_count..]
    }

    pub fn tail(&self) -> TailModel {
        TailModel {
            t60: self.t60(),
            b: self.b(),
            a: self.a(),
        }
    }

    pub fn with_tail(&self, tail: TailModel) -> Result<Self, RepError> {
        let mut v = self.vector.clone();
        v[IDX_T60] = tail.t60;
        v[IDX_A..IDX_B].copy_from_slice(&tail.a);
        v[IDX_B..IDX_TOA].copy_from_slice(&tail.b);
        Self::from_vector(v)
    }

    pub fn with_ratios(&self, eta1: f64, eta2: f64) -> Result<Self, RepError> {
        let mut v = self.vector.clone();
        v[IDX_ETA1] = eta1;
        v[IDX_ETA2] = eta2;
        Self::from_vector(v)
    }

    pub fn with_scales(&self, scales: &[f64]) -> Result<Self, RepError> {
        Self::from_parts(
            self.t60(),
            self.eta1(),
            self.eta2(),
            self.a(),
            self.b(),
            self.toas(),
            scales,
        )
    }

    /// One CSV row of 170 values, full round-trip precision.
    pub fn to_csv_row(&self) -> String {
        let mut s = String::with_capacity(REP_LEN * 12);
        for (i, v) in self.vector.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            write!(s, "{v:?}").unwrap();
        }
        s
    }
}

impl FromStr for LowDimRep {
    type Err = RepError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let row = s
            .lines()
            .find(|l| !l.trim().is_empty())
            .ok_or_else(|| RepError::Parse("empty input".into()))?;
        let values = row
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| RepError::Parse(e.to_string()))?;
        Self::from_vector(values)
    }
}

/// Checks every layout invariant and returns D.
fn validate(v: &[f64]) -> Result<usize, RepError> {
    if v.len() != REP_LEN {
        return Err(RepError::Length(v.len()));
    }
    if let Some(index) = v.iter().position(|x| !x.is_finite()) {
        return Err(RepError::NonFinite { index });
    }
    let t60 = v[IDX_T60];
    if !(t60 > 0.0 && t60 <= MAX_T60) {
        return Err(RepError::T60(t60));
    }
    for (name, idx) in [("eta1", IDX_ETA1), ("eta2", IDX_ETA2)] {
        if v[idx] <= 0.0 {
            return Err(RepError::Ratio {
                name,
                value: v[idx],
            });
        }
    }

    let toa_block = &v[IDX_TOA..IDX_SCALE];
    let pad = toa_block
        .iter()
        .position(|&x| x != 0.0)
        .unwrap_or(MAX_REFLECTIONS);
    let toas = &toa_block[pad..];
    if let Some(bad) = toas.iter().position(|&x| x <= 0.0) {
        return Err(RepError::Toas(format!(
            "non-positive TOA {} inside the data region",
            toas[bad]
        )));
    }
    if toas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(RepError::Toas("TOAs not strictly increasing".into()));
    }
    let scale_pad = &v[IDX_SCALE..IDX_SCALE + pad];
    if scale_pad.iter().any(|&x| x != 0.0) {
        return Err(RepError::Scales(
            "non-zero value inside the zero-padding region".into(),
        ));
    }
    Ok(MAX_REFLECTIONS - pad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base(toas: &[f64], scales: &[f64]) -> Result<LowDimRep, RepError> {
        LowDimRep::from_parts(
            0.5,
            1.0,
            1.0,
            [0.0; 5],
            [1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            toas,
            scales,
        )
    }

    #[test]
    fn length_is_170() {
        assert_eq!(REP_LEN, 170);
        assert_eq!(REP_LEN, 3 + 5 + 6 + 2 * 78);
    }

    #[test]
    fn toa_block_layout() {
        let rep = base(&[10.0, 20.0], &[0.5, -0.25]).unwrap();
        let v = rep.as_slice();
        assert_eq!(rep.d_count(), 2);
        assert!(v[14..90].iter().all(|&x| x == 0.0));
        assert_eq!(&v[90..92], &[10.0, 20.0]);
        assert!(v[92..168].iter().all(|&x| x == 0.0));
        assert_eq!(&v[168..170], &[0.5, -0.25]);
        assert_eq!(rep.toas(), &[10.0, 20.0]);
        assert_eq!(rep.scales(), &[0.5, -0.25]);
    }

    #[test]
    fn invalid_vectors_are_rejected() {
        assert_eq!(
            LowDimRep::from_vector(vec![0.0; 10]).unwrap_err(),
            RepError::Length(10)
        );
        let good = base(&[3.0], &[1.0]).unwrap().into_vector();

        let mut v = good.clone();
        v[0] = -0.1;
        assert!(matches!(LowDimRep::from_vector(v), Err(RepError::T60(_))));
        let mut v = good.clone();
        v[2] = 0.0;
        assert!(matches!(LowDimRep::from_vector(v), Err(RepError::Ratio { .. })));
        let mut v = good.clone();
        v[100] = 0.3;
        assert!(matches!(LowDimRep::from_vector(v), Err(RepError::Scales(_))));
        let mut v = good.clone();
        v[50] = f64::NAN;
        assert!(matches!(
            LowDimRep::from_vector(v),
            Err(RepError::NonFinite { index: 50 })
        ));
        assert!(matches!(base(&[5.0, 4.0], &[1.0, 1.0]), Err(RepError::Toas(_))));
        assert!(matches!(base(&[5.0], &[1.0, 1.0]), Err(RepError::Scales(_))));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let rep = base(&[1.25, 7.0 / 3.0], &[0.1, 1e-17]).unwrap();
        let back: LowDimRep = rep.to_csv_row().parse().unwrap();
        assert_eq!(back, rep);
    }

    #[test]
    fn stabilize_keeps_stable_filters() {
        let a = [-0.5, 0.06, 0.0, 0.0, 0.0];
        assert_eq!(stabilize_denominator(&a), (a, Stabilization::Unchanged));
    }

    #[test]
    fn stabilize_drops_outside_pole() {
        // poles {1.2, 0.5}: (1 - 1.2 z^-1)(1 - 0.5 z^-1) = 1 - 1.7 z^-1 + 0.6 z^-2
        let (a, outcome) = stabilize_denominator(&[-1.7, 0.6, 0.0, 0.0, 0.0]);
        assert_eq!(outcome, Stabilization::Removed(1));
        assert!((a[0] + 0.5).abs() < 1e-12);
        assert!(a[1..].iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn stabilize_drops_conjugate_pairs() {
        let p = Complex64::from_polar(1.05, 0.7);
        let roots = [p, p.conj(), Complex64::new(0.3, 0.0)];
        let c = poly::from_roots(&roots);
        let mut a = [0.0; 5];
        a[..3].copy_from_slice(&c[1..]);
        let (out, outcome) = stabilize_denominator(&a);
        assert_eq!(outcome, Stabilization::Removed(2));
        assert!((out[0] + 0.3).abs() < 1e-10);
    }
}
