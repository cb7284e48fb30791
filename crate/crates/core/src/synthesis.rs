//! Decoder: FIR taps from an encoding vector and an excitation.
//!
//! The decoded AIR places the direct-path excitation at the origin. The
//! excitation's centre sample is the direct-path arrival, and the mixing
//! point sits 24 ms after it, so the encoder's segment boundaries apply to
//! decoded output unchanged.

use std::f64::consts::{LN_10, PI};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::air::{sinc, AirSignal, DATASET_LENGTH, DATASET_SAMPLE_RATE};
use crate::bank::ExcitationBank;
use crate::poly;
use crate::rep::LowDimRep;
use crate::segment::{early_window, Segments};

/// Half-width of the fractional-delay kernel in samples.
pub const KERNEL_HALF_WIDTH: usize = 128;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("TOA {toa} outside [0, {length})")]
    ToaOutOfRange { toa: f64, length: usize },
    #[error("excitation is empty")]
    EmptyExcitation,
    #[error("T60 must be positive, got {0}")]
    T60(f64),
    #[error("IIR denominator is unstable (max pole magnitude {0})")]
    Unstable(f64),
    #[error("cross-fade requires 0 <= k_d < n_m < length (k_d {k_d}, n_m {n_m}, length {length})")]
    CrossfadeBounds { k_d: usize, n_m: usize, length: usize },
    #[error("tail starts at zero; cannot normalise")]
    ZeroTailOrigin,
    #[error("output length {length} does not reach past the mixing point {n_m}")]
    TooShort { length: usize, n_m: usize },
    #[error("degenerate segment energies: {0}")]
    Degenerate(String),
    #[error("excitation bank is empty")]
    EmptyBank,
    #[error("sample rate must be positive")]
    ZeroSampleRate,
}

/// How the stochastic tail is faded in around the mixing point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixMode {
    /// Literal mirror arguments `2 n_m - n + k_d` and `n - n_m - k_d`.
    Verbatim,
    /// Arguments `n_m - n` and `n - n_m`: unity at `n_m`, symmetric around it.
    #[default]
    Continuous,
}

impl FromStr for MixMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "verbatim" => Ok(Self::Verbatim),
            "continuous" => Ok(Self::Continuous),
            other => Err(format!("unknown mix mode `{other}` (verbatim|continuous)")),
        }
    }
}

impl fmt::Display for MixMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Verbatim => "verbatim",
            Self::Continuous => "continuous",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisConfig {
    pub length: usize,
    pub sample_rate: u32,
    pub mix_mode: MixMode,
    pub seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            length: DATASET_LENGTH,
            sample_rate: DATASET_SAMPLE_RATE,
            mix_mode: MixMode::Continuous,
            seed: 0,
        }
    }
}

/// Unit-DC-gain fractional-delay kernel for `delay`; returns the index of
/// its first tap and the taps.
pub fn delay_kernel(delay: f64) -> (isize, Vec<f64>) {
    if delay.fract() == 0.0 {
        return (delay as isize, vec![1.0]);
    }
    let hw = KERNEL_HALF_WIDTH as f64;
    let start = (delay - hw).ceil() as isize;
    let end = (delay + hw).floor() as isize;
    let mut taps: Vec<f64> = (start..=end)
        .map(|m| {
            let x = m as f64 - delay;
            sinc(x) * 0.5 * (1.0 + (PI * x / hw).cos())
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    (start, taps)
}

/// Adds `scale * (excitation * kernel(toa))` into `out`, dropping anything
/// outside `out`.
pub fn add_atom(out: &mut [f64], scale: f64, toa: f64, excitation: &[f64]) {
    if scale == 0.0 {
        return;
    }
    let (start, kernel) = delay_kernel(toa);
    let len = out.len() as isize;
    for (j, &e) in excitation.iter().enumerate() {
        let se = scale * e;
        if se == 0.0 {
            continue;
        }
        let base = start + j as isize;
        let lo = (-base).max(0) as usize;
        let hi = ((len - base).max(0) as usize).min(kernel.len());
        for (k, &kv) in kernel.iter().enumerate().take(hi).skip(lo) {
            out[(base + k as isize) as usize] += se * kv;
        }
    }
}

/// One reflection term: `scale * [excitation * sinc(n - toa)]` over `length`
/// taps, the excitation starting at `toa`.
pub fn place_atom(
    scale: f64,
    toa: f64,
    excitation: &[f64],
    length: usize,
) -> Result<Vec<f64>, SynthError> {
    if excitation.is_empty() {
        return Err(SynthError::EmptyExcitation);
    }
    if !(toa >= 0.0 && toa < length as f64) {
        return Err(SynthError::ToaOutOfRange { toa, length });
    }
    let mut out = vec![0.0; length];
    add_atom(&mut out, scale, toa, excitation);
    Ok(out)
}

/// Index of the excitation sample treated as the arrival instant.
pub fn excitation_centre(excitation: &[f64]) -> usize {
    excitation.len().saturating_sub(1) / 2
}

/// Direct sound: unit-scale excitation at the origin.
pub fn synth_direct(excitation: &[f64], cfg: &SynthesisConfig) -> Result<Vec<f64>, SynthError> {
    place_atom(1.0, 0.0, excitation, cfg.length)
}

/// Sparse early reflections, each starting at its relative TOA.
pub fn synth_early(
    rep: &LowDimRep,
    excitation: &[f64],
    cfg: &SynthesisConfig,
) -> Result<Vec<f64>, SynthError> {
    if excitation.is_empty() {
        return Err(SynthError::EmptyExcitation);
    }
    let mut out = vec![0.0; cfg.length];
    for (&toa, &scale) in rep.toas().iter().zip(rep.scales()) {
        if !(toa >= 0.0 && toa < cfg.length as f64) {
            return Err(SynthError::ToaOutOfRange {
                toa,
                length: cfg.length,
            });
        }
        add_atom(&mut out, scale, toa, excitation);
    }
    Ok(out)
}

/// Exponential-decay envelope `exp(-3 n T_s ln 10 / T60)`.
pub fn polack_envelope(n: f64, t60: f64, sample_rate: u32) -> f64 {
    (-3.0 * n * LN_10 / (t60 * sample_rate as f64)).exp()
}

/// White Gaussian noise under the T60 decay envelope.
pub fn synth_polack(
    t60: f64,
    length: usize,
    sample_rate: u32,
    rng: &mut impl Rng,
) -> Result<Vec<f64>, SynthError> {
    if !(t60 > 0.0) {
        return Err(SynthError::T60(t60));
    }
    if sample_rate == 0 {
        return Err(SynthError::ZeroSampleRate);
    }
    let step = polack_envelope(1.0, t60, sample_rate);
    let mut env = 1.0;
    Ok((0..length)
        .map(|_| {
            let nu: f64 = rng.sample(StandardNormal);
            let v = nu * env;
            env *= step;
            v
        })
        .collect())
}

/// Seeded convenience wrapper around [`synth_polack`].
pub fn synth_polack_seeded(
    t60: f64,
    length: usize,
    sample_rate: u32,
    seed: u64,
) -> Result<Vec<f64>, SynthError> {
    synth_polack(t60, length, sample_rate, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Colours the tail with the pole-zero filter. Rejects poles on or outside
/// the unit circle.
pub fn apply_tail_iir(tail: &[f64], b: &[f64], a: &[f64]) -> Result<Vec<f64>, SynthError> {
    let max_pole = poly::max_pole_magnitude(a).unwrap_or(f64::INFINITY);
    if max_pole >= 1.0 {
        return Err(SynthError::Unstable(max_pole));
    }
    Ok(poly::iir_filter(tail, b, a))
}

/// Fades the filtered tail in towards the mixing point `n_m`.
pub fn apply_crossfade(
    tail: &[f64],
    k_d: usize,
    n_m: usize,
    mode: MixMode,
) -> Result<Vec<f64>, SynthError> {
    let length = tail.len();
    if !(k_d < n_m && n_m < length) {
        return Err(SynthError::CrossfadeBounds { k_d, n_m, length });
    }
    let origin = tail[0];
    if origin == 0.0 {
        return Err(SynthError::ZeroTailOrigin);
    }
    let at = |m: isize| -> f64 {
        if m < 0 || m as usize >= length {
            0.0
        } else {
            tail[m as usize] / origin
        }
    };
    let (n_m, k_d) = (n_m as isize, k_d as isize);
    Ok((0..length as isize)
        .map(|n| {
            if n < k_d {
                0.0
            } else if n < n_m {
                match mode {
                    MixMode::Verbatim => at(2 * n_m - n + k_d),
                    MixMode::Continuous => at(n_m - n),
                }
            } else {
                match mode {
                    MixMode::Verbatim => at(n - n_m - k_d),
                    MixMode::Continuous => at(n - n_m),
                }
            }
        })
        .collect())
}

/// A decoded AIR together with the gains applied to the early and late parts.
#[derive(Debug, Clone)]
pub struct Assembly {
    pub air: AirSignal,
    pub early_gain: f64,
    pub late_gain: f64,
    pub direct_arrival: usize,
    pub mixing_point: usize,
}

impl Assembly {
    pub fn segments(&self) -> Segments {
        Segments::new(
            self.direct_arrival as f64,
            self.mixing_point,
            self.air.len(),
            self.air.sample_rate(),
        )
    }
}

const MAX_TAIL_DRAWS: usize = 8;

/// Full reconstruction: direct sound plus early reflections and late
/// reverberation, each gained so that the direct/early and direct/tail energy
/// ratios over the segments equal the rep's.
pub fn assemble(
    rep: &LowDimRep,
    excitation: &[f64],
    cfg: &SynthesisConfig,
) -> Result<Assembly, SynthError> {
    if excitation.is_empty() {
        return Err(SynthError::EmptyExcitation);
    }
    if cfg.sample_rate == 0 {
        return Err(SynthError::ZeroSampleRate);
    }
    let k_d = excitation_centre(excitation);
    let n_m = k_d + early_window(cfg.sample_rate);
    if cfg.length <= n_m + 1 {
        return Err(SynthError::TooShort {
            length: cfg.length,
            n_m,
        });
    }
    let tail_model = rep.tail();

    let direct = synth_direct(excitation, cfg)?;
    let early = synth_early(rep, excitation, cfg)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut late = None;
    for _ in 0..MAX_TAIL_DRAWS {
        let noise = synth_polack(tail_model.t60, cfg.length, cfg.sample_rate, &mut rng)?;
        let filtered = apply_tail_iir(&noise, &tail_model.b, &tail_model.a)?;
        match apply_crossfade(&filtered, k_d, n_m, cfg.mix_mode) {
            Ok(l) => {
                late = Some(l);
                break;
            }
            Err(SynthError::ZeroTailOrigin) => continue,
            Err(e) => return Err(e),
        }
    }
    let late = late.ok_or(SynthError::ZeroTailOrigin)?;

    let segments = Segments::new(k_d as f64, n_m, cfg.length, cfg.sample_rate);
    let use_early = rep.d_count() > 0;
    let (early_gain, late_gain) = solve_gains(
        &segments,
        &direct,
        use_early.then_some(early.as_slice()),
        &late,
        rep.eta1(),
        rep.eta2(),
    )?;

    let taps: Vec<f64> = (0..cfg.length)
        .map(|n| {
            let r = if use_early { early_gain * early[n] } else { 0.0 };
            direct[n] + r + late_gain * late[n]
        })
        .collect();
    let air = AirSignal::new(taps, cfg.sample_rate)
        .map_err(|e| SynthError::Degenerate(e.to_string()))?;
    Ok(Assembly {
        air,
        early_gain: if use_early { early_gain } else { 0.0 },
        late_gain,
        direct_arrival: k_d,
        mixing_point: n_m,
    })
}

/// Picks a bank excitation (seeded) and assembles.
pub fn decode(
    rep: &LowDimRep,
    bank: &ExcitationBank,
    cfg: &SynthesisConfig,
) -> Result<Assembly, SynthError> {
    if bank.is_empty() {
        return Err(SynthError::EmptyBank);
    }
    let mut pick = ChaCha8Rng::seed_from_u64(cfg.seed);
    pick.set_stream(1);
    let idx = pick.gen_range(0..bank.len());
    assemble(rep, bank.excitation(idx), cfg)
}

/// Second-order energy of `u + g1 r + g2 l` over one segment.
#[derive(Debug, Clone, Copy, Default)]
struct Quadratic {
    uu: f64,
    ur: f64,
    ul: f64,
    rr: f64,
    rl: f64,
    ll: f64,
}

impl Quadratic {
    fn over(range: std::ops::Range<usize>, u: &[f64], r: Option<&[f64]>, l: &[f64]) -> Self {
        let mut q = Quadratic::default();
        for n in range {
            let (un, ln) = (u[n], l[n]);
            let rn = r.map_or(0.0, |r| r[n]);
            q.uu += un * un;
            q.ur += un * rn;
            q.ul += un * ln;
            q.rr += rn * rn;
            q.rl += rn * ln;
            q.ll += ln * ln;
        }
        q
    }

    fn value(&self, g1: f64, g2: f64) -> f64 {
        self.uu
            + 2.0 * g1 * self.ur
            + 2.0 * g2 * self.ul
            + g1 * g1 * self.rr
            + 2.0 * g1 * g2 * self.rl
            + g2 * g2 * self.ll
    }

    fn grad(&self, g1: f64, g2: f64) -> (f64, f64) {
        (
            2.0 * (self.ur + g1 * self.rr + g2 * self.rl),
            2.0 * (self.ul + g1 * self.rl + g2 * self.ll),
        )
    }
}

/// Finds positive gains so that, over the segments of the summed signal,
/// `E_direct / E_early = eta1` (when early is present) and
/// `E_direct / E_tail = eta2`.
///
/// Starts from the per-component ratio `sqrt(E_d / (eta E_x))` and refines
/// with damped Newton in log-gain space to absorb the overlap between parts.
fn solve_gains(
    seg: &Segments,
    direct: &[f64],
    early: Option<&[f64]>,
    late: &[f64],
    eta1: f64,
    eta2: f64,
) -> Result<(f64, f64), SynthError> {
    let qd = Quadratic::over(seg.direct.clone(), direct, early, late);
    let qe = Quadratic::over(seg.early.clone(), direct, early, late);
    let qt = Quadratic::over(seg.tail.clone(), direct, early, late);

    if qd.uu <= 0.0 {
        return Err(SynthError::Degenerate("direct window has no energy".into()));
    }
    if qt.ll <= 0.0 {
        return Err(SynthError::Degenerate("tail segment has no energy".into()));
    }
    let with_early = early.is_some();
    if with_early && qe.rr <= 0.0 {
        return Err(SynthError::Degenerate(
            "early reflections have no energy in the early segment".into(),
        ));
    }

    let residual = |g1: f64, g2: f64| -> (f64, f64) {
        let ed = qd.value(g1, g2);
        let f1 = if with_early {
            (ed - eta1 * qe.value(g1, g2)) / ed
        } else {
            0.0
        };
        let f2 = (ed - eta2 * qt.value(g1, g2)) / ed;
        (f1, f2)
    };

    let mut x1 = if with_early {
        (qd.uu / (eta1 * qe.rr)).sqrt().ln()
    } else {
        0.0
    };
    let mut x2 = (qd.uu / (eta2 * qt.ll)).sqrt().ln();
    let g = |x1: f64| if with_early { x1.exp() } else { 0.0 };

    let tol = 1e-12;
    for _ in 0..200 {
        let (g1, g2) = (g(x1), x2.exp());
        let (f1, f2) = residual(g1, g2);
        let norm = f1.hypot(f2);
        if norm < tol {
            return Ok((g1, g2));
        }
        // Jacobian of F_i = 1 - eta_i E_i / E_d with respect to log gains.
        let ed = qd.value(g1, g2);
        let (dd1, dd2) = qd.grad(g1, g2);
        let jac = |q: &Quadratic, eta: f64| {
            let e = q.value(g1, g2);
            let (d1, d2) = q.grad(g1, g2);
            (
                -eta * (d1 * ed - e * dd1) / (ed * ed) * g1,
                -eta * (d2 * ed - e * dd2) / (ed * ed) * g2,
            )
        };
        let (dx1, dx2) = if with_early {
            let (j11, j12) = jac(&qe, eta1);
            let (j21, j22) = jac(&qt, eta2);
            let det = j11 * j22 - j12 * j21;
            if det.abs() < 1e-300 {
                break;
            }
            ((-f1 * j22 + f2 * j12) / det, (-f2 * j11 + f1 * j21) / det)
        } else {
            let (_, j22) = jac(&qt, eta2);
            if j22 == 0.0 {
                break;
            }
            (0.0, -f2 / j22)
        };
        let mut step = 1.0;
        let mut accepted = false;
        while step > 1e-6 {
            let (n1, n2) = (x1 + step * dx1, x2 + step * dx2);
            let (r1, r2) = residual(g(n1), n2.exp());
            if r1.hypot(r2) < norm {
                x1 = n1;
                x2 = n2;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Err(SynthError::Degenerate(format!(
        "no positive gains reproduce eta1 = {eta1}, eta2 = {eta2}"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rep::LowDimRep;

    fn rep_with(toas: &[f64], scales: &[f64], eta1: f64, eta2: f64) -> LowDimRep {
        LowDimRep::from_parts(
            0.5,
            eta1,
            eta2,
            [0.0; 5],
            [1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            toas,
            scales,
        )
        .unwrap()
    }

    fn excitation() -> Vec<f64> {
        (0..17)
            .map(|i| {
                let x = i as f64 - 8.0;
                (-(x * x) / 6.0).exp() * (1.0 - 0.1 * x)
            })
            .collect()
    }

    #[test]
    fn integer_toa_is_a_shift() {
        let out = place_atom(1.0, 5.0, &[1.0], 64).unwrap();
        for (n, v) in out.iter().enumerate() {
            let want = if n == 5 { 1.0 } else { 0.0 };
            assert!((v - want).abs() < 1e-3, "n={n} v={v}");
        }
    }

    #[test]
    fn zero_scale_is_silent() {
        assert!(place_atom(0.0, 7.3, &[1.0, 2.0], 32)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn half_sample_atom_matches_ideal_sinc() {
        let length = 600;
        let out = place_atom(1.0, 5.5, &[1.0], length).unwrap();
        let ideal: Vec<f64> = (0..length).map(|n| sinc(n as f64 - 5.5)).collect();
        let dot: f64 = out.iter().zip(&ideal).map(|(a, b)| a * b).sum();
        let na: f64 = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = ideal.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(dot / (na * nb) >= 0.999, "correlation {}", dot / (na * nb));
    }

    #[test]
    fn atom_errors() {
        assert_eq!(
            place_atom(1.0, 10.0, &[1.0], 10),
            Err(SynthError::ToaOutOfRange {
                toa: 10.0,
                length: 10
            })
        );
        assert!(place_atom(1.0, -1.0, &[1.0], 10).is_err());
        assert_eq!(
            place_atom(1.0, 1.0, &[], 10),
            Err(SynthError::EmptyExcitation)
        );
    }

    #[test]
    fn integer_shift_equivariance() {
        let e = excitation();
        let a = place_atom(0.7, 300.3, &e, 1200).unwrap();
        let b = place_atom(0.7, 317.3, &e, 1200).unwrap();
        let max_err = (0..1200 - 17)
            .map(|n| (a[n] - b[n + 17]).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 1e-12);
    }

    #[test]
    fn direct_energy_equals_excitation_energy() {
        let e = excitation();
        let cfg = SynthesisConfig::default();
        let d = synth_direct(&e, &cfg).unwrap();
        let ed: f64 = d.iter().map(|v| v * v).sum();
        let ee: f64 = e.iter().map(|v| v * v).sum();
        assert!((ed - ee).abs() < 1e-6 * ee);
        assert_eq!(&d[..17], &e[..]);
        let half: Vec<f64> = d.iter().map(|v| 0.5 * v).collect();
        let eh: f64 = half.iter().map(|v| v * v).sum();
        assert!((eh - 0.25 * ee).abs() < 1e-12);
    }

    #[test]
    fn early_model_is_linear_and_single_term_matches_atom() {
        let e = excitation();
        let cfg = SynthesisConfig {
            length: 2000,
            ..Default::default()
        };
        let none = rep_with(&[], &[], 1.0, 1.0);
        assert!(synth_early(&none, &e, &cfg).unwrap().iter().all(|&v| v == 0.0));

        let one = rep_with(&[40.25], &[0.6], 1.0, 1.0);
        assert_eq!(
            synth_early(&one, &e, &cfg).unwrap(),
            place_atom(0.6, 40.25, &e, 2000).unwrap()
        );

        let r = rep_with(&[20.0, 55.5, 90.75], &[0.5, -0.3, 0.2], 1.0, 1.0);
        let r2 = r.with_scales(&[1.0, -0.6, 0.4]).unwrap();
        let a = synth_early(&r, &e, &cfg).unwrap();
        let b = synth_early(&r2, &e, &cfg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn polack_envelope_reaches_minus_60_db_at_t60() {
        let t60 = 0.5;
        let n = t60 * 16_000.0;
        assert!((polack_envelope(n, t60, 16_000) - 1e-3).abs() < 1e-15);
        assert_eq!(polack_envelope(0.0, t60, 16_000), 1.0);
    }

    #[test]
    fn polack_is_reproducible() {
        let a = synth_polack_seeded(0.4, 1000, 16_000, 9).unwrap();
        let b = synth_polack_seeded(0.4, 1000, 16_000, 9).unwrap();
        let c = synth_polack_seeded(0.4, 1000, 16_000, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(
            synth_polack_seeded(0.0, 10, 16_000, 1),
            Err(SynthError::T60(0.0))
        );
    }

    #[test]
    fn iir_identity_and_long_division() {
        let x: Vec<f64> = (0..50).map(|n| (n as f64 * 0.37).sin()).collect();
        assert_eq!(
            apply_tail_iir(&x, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0], &[0.0; 5]).unwrap(),
            x
        );

        // H(z) = (1 + 0.5 z^-1) / (1 - 0.9 z^-1 + 0.2 z^-2), expanded by
        // polynomial long division.
        let b = [1.0, 0.5, 0.0, 0.0, 0.0, 0.0];
        let a = [-0.9, 0.2, 0.0, 0.0, 0.0];
        let mut imp = vec![0.0; 64];
        imp[0] = 1.0;
        let h = apply_tail_iir(&imp, &b, &a).unwrap();
        let mut rem: Vec<f64> = b.to_vec();
        rem.resize(64 + 3, 0.0);
        let den = [1.0, -0.9, 0.2];
        for n in 0..64 {
            let q = rem[n] / den[0];
            assert!((h[n] - q).abs() < 1e-12, "n={n}");
            for (k, d) in den.iter().enumerate() {
                rem[n + k] -= q * d;
            }
        }
    }

    #[test]
    fn iir_bibo_bound_and_rejection() {
        let b = [0.3, -0.2, 0.1, 0.0, 0.05, 0.0];
        let a = [-1.2, 0.5, 0.0, 0.0, 0.0];
        let ir = poly::impulse_response(&b, &a, 4000);
        let l1: f64 = ir.iter().map(|v| v.abs()).sum();
        let x: Vec<f64> = (0..4000).map(|n| ((n * 7919) % 13) as f64 / 6.0 - 1.0).collect();
        let max_in = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let y = apply_tail_iir(&x, &b, &a).unwrap();
        assert!(y.iter().all(|v| v.abs() <= max_in * l1 + 1e-12));

        assert!(matches!(
            apply_tail_iir(&x, &b, &[-1.7, 0.6, 0.0, 0.0, 0.0]),
            Err(SynthError::Unstable(_))
        ));
    }

    #[test]
    fn crossfade_is_zero_before_direct() {
        let tail = synth_polack_seeded(0.3, 1000, 16_000, 3).unwrap();
        for mode in [MixMode::Verbatim, MixMode::Continuous] {
            let out = apply_crossfade(&tail, 20, 400, mode).unwrap();
            assert!(out[..20].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn continuous_crossfade_is_unity_and_symmetric_at_mixing_point() {
        let tail = synth_polack_seeded(0.3, 2000, 16_000, 4).unwrap();
        let n_m = 400;
        let out = apply_crossfade(&tail, 8, n_m, MixMode::Continuous).unwrap();
        assert_eq!(out[n_m], 1.0);
        for delta in 1..(n_m - 8) {
            assert_eq!(out[n_m - delta], out[n_m + delta]);
        }
        // Deterministic envelope: unity at n_m and decaying away from it.
        let env = |n: usize| polack_envelope((n as f64 - n_m as f64).abs(), 0.3, 16_000);
        assert_eq!(env(n_m), 1.0);
        assert!(env(n_m - 100) < 1.0 && (env(n_m - 100) - env(n_m + 100)).abs() < 1e-15);
    }

    #[test]
    fn verbatim_crossfade_argument_map() {
        let tail = synth_polack_seeded(0.3, 3000, 16_000, 5).unwrap();
        let (k_d, n_m) = (10usize, 400usize);
        let out = apply_crossfade(&tail, k_d, n_m, MixMode::Verbatim).unwrap();
        for delta in 1..(n_m - k_d) {
            // Branch two at n_m - delta reads tail sample n_m + delta + k_d,
            // which branch three reads again at 2 n_m + delta + 2 k_d.
            let a = out[n_m - delta];
            let b = out[2 * n_m + delta + 2 * k_d];
            assert!((a - b).abs() < 1e-9);
            let env_a = polack_envelope((n_m + delta + k_d) as f64, 0.3, 16_000);
            let env_b = polack_envelope(((2 * n_m + delta + 2 * k_d) - n_m - k_d) as f64, 0.3, 16_000);
            assert!((env_a - env_b).abs() < 1e-9);
        }
        // The literal third branch leaves k_d zero samples after n_m.
        assert!(out[n_m..n_m + k_d].iter().all(|&v| v == 0.0));
        assert_eq!(out[n_m + k_d], 1.0);
    }

    #[test]
    fn crossfade_errors() {
        let mut tail = vec![1.0; 100];
        assert!(matches!(
            apply_crossfade(&tail, 50, 40, MixMode::Continuous),
            Err(SynthError::CrossfadeBounds { .. })
        ));
        tail[0] = 0.0;
        assert_eq!(
            apply_crossfade(&tail, 0, 40, MixMode::Continuous),
            Err(SynthError::ZeroTailOrigin)
        );
    }

    fn segment_ratios(asm: &Assembly) -> (f64, f64) {
        let (ed, ee, et) = asm.segments().energies(asm.air.taps());
        (ed / ee, ed / et)
    }

    #[test]
    fn assembled_ratios_are_exact() {
        let e = excitation();
        let rep = rep_with(&[30.0, 97.5, 210.25], &[0.8, -0.5, 0.4], 1.5, 2.0);
        for mode in [MixMode::Verbatim, MixMode::Continuous] {
            let cfg = SynthesisConfig {
                mix_mode: mode,
                seed: 11,
                ..Default::default()
            };
            let asm = assemble(&rep, &e, &cfg).unwrap();
            let (r1, r2) = segment_ratios(&asm);
            assert!((r1 / 1.5 - 1.0).abs() < 1e-6, "eta1 {r1}");
            assert!((r2 / 2.0 - 1.0).abs() < 1e-6, "eta2 {r2}");
            assert_eq!(asm.air.len(), 33_600);
        }
    }

    #[test]
    fn unit_ratios_give_equal_part_energies() {
        let e = excitation();
        let rep = rep_with(&[120.0], &[1.0], 1.0, 1.0);
        let asm = assemble(&rep, &e, &SynthesisConfig::default()).unwrap();
        let (ed, ee, et) = asm.segments().energies(asm.air.taps());
        assert!((ed / ee - 1.0).abs() < 1e-6);
        assert!((ed / et - 1.0).abs() < 1e-6);
    }

    #[test]
    fn decode_is_deterministic_and_ratios_are_excitation_independent() {
        let rep = rep_with(&[44.0, 150.0], &[0.6, 0.3], 2.0, 1.0);
        let e1 = excitation();
        let e2: Vec<f64> = e1.iter().rev().map(|v| v * 0.5).collect();
        let bank = ExcitationBank::from_excitations(vec![e1.clone(), e2.clone()]).unwrap();
        let cfg = SynthesisConfig {
            seed: 3,
            ..Default::default()
        };
        let a = decode(&rep, &bank, &cfg).unwrap();
        let b = decode(&rep, &bank, &cfg).unwrap();
        assert_eq!(a.air.taps(), b.air.taps());

        let x = segment_ratios(&assemble(&rep, &e1, &cfg).unwrap());
        let y = segment_ratios(&assemble(&rep, &e2, &cfg).unwrap());
        assert!((x.0 / y.0 - 1.0).abs() < 1e-6 && (x.1 / y.1 - 1.0).abs() < 1e-6);
        assert_eq!(
            decode(&rep, &ExcitationBank::empty(17), &cfg).unwrap_err(),
            SynthError::EmptyBank
        );
    }

    #[test]
    fn defaults_rep_decodes_to_direct_plus_tail() {
        let rep = rep_with(&[], &[], 1.0, 1.0);
        let e = excitation();
        let cfg = SynthesisConfig::default();
        let asm = assemble(&rep, &e, &cfg).unwrap();
        assert_eq!(asm.early_gain, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let noise = synth_polack(0.5, cfg.length, cfg.sample_rate, &mut rng).unwrap();
        let late = apply_crossfade(&noise, 8, 392, MixMode::Continuous).unwrap();
        let direct = synth_direct(&e, &cfg).unwrap();
        for n in 0..cfg.length {
            let want = direct[n] + asm.late_gain * late[n];
            assert!((asm.air.taps()[n] - want).abs() < 1e-12);
        }
        let (ed, _, et) = asm.segments().energies(asm.air.taps());
        assert!((ed / et - 1.0).abs() < 1e-6);
    }
}
