//! Encoder: estimates every parameter of the encoding vector from a measured
//! AIR, plus the PCA excitation bank.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::air::{AirSignal, DATASET_SAMPLE_RATE};
use crate::bank::ExcitationBank;
use crate::pca::Pca;
use crate::rep::{
    stabilize_denominator, LowDimRep, RepError, Stabilization, DENOM_ORDER, MAX_REFLECTIONS,
    MAX_T60, NUMER_LEN,
};
use crate::segment::{early_window, mixing_point, Segments};
use crate::synthesis::{delay_kernel, excitation_centre};

/// Default direct-path window: ±0.5 ms at 16 kHz.
pub const DEFAULT_WINDOW_LEN: usize = 17;
/// Fraction of variance the excitation bank keeps.
pub const BANK_VARIANCE: f64 = 0.95;
/// Fractional-delay search grid for reflections, in samples.
pub const TOA_GRID: f64 = 0.25;
/// Matching pursuit stops when the best atom removes less than this fraction
/// of the direct-plus-early energy.
pub const MIN_ENERGY_REDUCTION: f64 = 1e-3;
/// Prony fits use at most this many tail samples.
pub const PRONY_MAX_SAMPLES: usize = 4000;
pub const PRONY_MIN_SAMPLES: usize = 50;
/// Ratio reported when a segment has no energy.
/// Diagonal loading of the Prony normal equations, relative to their mean
/// diagonal.
pub const PRONY_RIDGE: f64 = 1e-12;
pub const RATIO_CAP: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimationError {
    #[error("impulse response is silent")]
    Silent,
    #[error("early-reflection window is empty")]
    EmptyWindow,
    #[error("excitation is empty")]
    EmptyExcitation,
    #[error("at most {MAX_REFLECTIONS} reflections can be encoded, {0} requested")]
    TooManyReflections(usize),
    #[error("need at least 2 impulse responses for an excitation bank, got {0}")]
    TooFewAirs(usize),
    #[error("energy decay spans only {0:.2} dB")]
    DecaySpan(f64),
    #[error("energy decay is not exponential (line fit R^2 = {0:.3})")]
    NoDecay(f64),
    #[error("tail has {0} samples, at least {PRONY_MIN_SAMPLES} needed")]
    TailTooShort(usize),
    #[error("mixing point {n_m} outside the {len}-tap response")]
    MixingPoint { n_m: usize, len: usize },
    #[error("sample rate {0} Hz: resample first to {DATASET_SAMPLE_RATE} Hz")]
    ResampleFirst(u32),
    #[error("direct-path energy is zero")]
    NoDirectEnergy,
    #[error(transparent)]
    Rep(#[from] RepError),
}

/// Direct-path arrival and amplitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectPath {
    pub k_d: f64,
    pub beta_d: f64,
}

/// First tap reaching half the peak magnitude, moved to the local maximum
/// it belongs to and refined by a parabola through the squared taps.
pub fn detect_direct_path(air: &AirSignal) -> Result<DirectPath, EstimationError> {
    let x = air.taps();
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return Err(EstimationError::Silent);
    }
    let mut i = x.iter().position(|v| v.abs() >= 0.5 * peak).unwrap();
    while i + 1 < x.len() && x[i + 1].abs() > x[i].abs() {
        i += 1;
    }
    let sq = |j: usize| x[j] * x[j];
    let (offset, peak_sq) = if i > 0 && i + 1 < x.len() {
        let (y0, y1, y2) = (sq(i - 1), sq(i), sq(i + 1));
        let denom = y0 - 2.0 * y1 + y2;
        if denom < 0.0 {
            let off = (0.5 * (y0 - y2) / denom).clamp(-0.5, 0.5);
            (off, y1 - 0.25 * (y0 - y2) * off)
        } else {
            (0.0, y1)
        }
    } else {
        (0.0, sq(i))
    };
    Ok(DirectPath {
        k_d: i as f64 + offset,
        beta_d: x[i].signum() * peak_sq.max(0.0).sqrt(),
    })
}

/// `window_len` taps centred on the rounded direct-path arrival, zero outside
/// the response.
pub fn direct_path_window(air: &AirSignal, k_d: f64, window_len: usize) -> Vec<f64> {
    let x = air.taps();
    let centre = k_d.round() as isize;
    let half = excitation_centre(&vec![0.0; window_len]) as isize;
    (0..window_len as isize)
        .map(|j| {
            let n = centre - half + j;
            if n >= 0 && (n as usize) < x.len() {
                x[n as usize]
            } else {
                0.0
            }
        })
        .collect()
}

fn unit_peak(mut v: Vec<f64>) -> Vec<f64> {
    let peak = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if peak > 0.0 {
        v.iter_mut().for_each(|x| *x /= peak);
    }
    v
}

/// Unit-peak direct-path windows of every AIR, reduced to the principal
/// components that explain 95% of their variance.
pub fn build_excitation_bank(
    airs: &[AirSignal],
    window_len: usize,
) -> Result<ExcitationBank, EstimationError> {
    if airs.len() < 2 {
        return Err(EstimationError::TooFewAirs(airs.len()));
    }
    let windows = airs
        .iter()
        .map(|air| {
            let dp = detect_direct_path(air)?;
            Ok(unit_peak(direct_path_window(air, dp.k_d, window_len)))
        })
        .collect::<Result<Vec<_>, EstimationError>>()?;
    let pca = Pca::fit(&windows);
    let k = pca.components_for(BANK_VARIANCE);
    let excitations = windows
        .iter()
        .map(|w| unit_peak(pca.reconstruct(w, k)))
        .collect();
    Ok(ExcitationBank::new(excitations, window_len, k).expect("window lengths agree"))
}

/// Direct path and sparse reflections found in the first 24 ms.
///
/// `kappa` are arrival instants of the excitation centre, in samples, like
/// `k_d`.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyReflectionSet {
    pub k_d: f64,
    pub beta_d: f64,
    pub kappa: Vec<f64>,
    pub beta: Vec<f64>,
}

impl EarlyReflectionSet {
    pub fn len(&self) -> usize {
        self.kappa.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kappa.is_empty()
    }

    /// TOAs relative to the direct path.
    pub fn relative_toas(&self) -> Vec<f64> {
        self.kappa.iter().map(|k| k - self.k_d).collect()
    }

    /// Scales relative to the direct path.
    pub fn relative_scales(&self) -> Vec<f64> {
        self.beta.iter().map(|b| b / self.beta_d).collect()
    }
}

/// An excitation convolved with the fractional-delay kernel, starting at
/// `offset` in the response.
#[derive(Debug, Clone)]
struct Atom {
    start: f64,
    offset: isize,
    taps: Vec<f64>,
}

impl Atom {
    fn new(excitation: &[f64], start: f64) -> Self {
        let (k0, kernel) = delay_kernel(start);
        let mut taps = vec![0.0; excitation.len() + kernel.len() - 1];
        for (j, &e) in excitation.iter().enumerate() {
            for (k, &kv) in kernel.iter().enumerate() {
                taps[j + k] += e * kv;
            }
        }
        Self {
            start,
            offset: k0,
            taps,
        }
    }

    /// Restricted to indices `[0, len)`.
    fn dot(&self, x: &[f64]) -> f64 {
        self.taps
            .iter()
            .enumerate()
            .filter_map(|(i, &t)| {
                let n = self.offset + i as isize;
                (n >= 0 && (n as usize) < x.len()).then(|| t * x[n as usize])
            })
            .sum()
    }

    fn norm_sq(&self, len: usize) -> f64 {
        self.taps
            .iter()
            .enumerate()
            .filter(|(i, _)| {
                let n = self.offset + *i as isize;
                n >= 0 && (n as usize) < len
            })
            .map(|(_, t)| t * t)
            .sum()
    }

    fn overlap(&self, other: &Atom, len: usize) -> f64 {
        let lo = self.offset.max(other.offset).max(0);
        let hi = (self.offset + self.taps.len() as isize)
            .min(other.offset + other.taps.len() as isize)
            .min(len as isize);
        (lo..hi)
            .map(|n| self.taps[(n - self.offset) as usize] * other.taps[(n - other.offset) as usize])
            .sum()
    }

    fn add_to(&self, x: &mut [f64], scale: f64) {
        for (i, &t) in self.taps.iter().enumerate() {
            let n = self.offset + i as isize;
            if n >= 0 && (n as usize) < x.len() {
                x[n as usize] += scale * t;
            }
        }
    }
}

/// Least-squares scales for `atoms` against `x`.
fn fit_scales(atoms: &[Atom], x: &[f64]) -> Vec<f64> {
    let k = atoms.len();
    let len = x.len();
    let mut gram = DMatrix::<f64>::zeros(k, k);
    let mut rhs = DVector::<f64>::zeros(k);
    for i in 0..k {
        rhs[i] = atoms[i].dot(x);
        for j in i..k {
            let g = if i == j {
                atoms[i].norm_sq(len)
            } else {
                atoms[i].overlap(&atoms[j], len)
            };
            gram[(i, j)] = g;
            gram[(j, i)] = g;
        }
    }
    let ridge = 1e-12 * (0..k).map(|i| gram[(i, i)]).sum::<f64>() / k as f64;
    for i in 0..k {
        gram[(i, i)] += ridge;
    }
    match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs).iter().copied().collect(),
        None => gram
            .svd(true, true)
            .solve(&rhs, 1e-12)
            .map(|v| v.iter().copied().collect())
            .unwrap_or_else(|_| vec![0.0; k]),
    }
}

fn residual(atoms: &[Atom], scales: &[f64], x: &[f64]) -> Vec<f64> {
    let mut r = x.to_vec();
    for (a, &s) in atoms.iter().zip(scales) {
        a.add_to(&mut r, -s);
    }
    r
}

/// Best grid start in `starts` for the residual, with its energy reduction.
fn best_start(bank: &PhaseBank, r: &[f64], starts: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let mut best: Option<(f64, f64)> = None;
    for s in starts {
        let (c, norm) = bank.correlate(r, s);
        if norm <= 0.0 {
            continue;
        }
        let gain = c * c / norm;
        if best.is_none_or(|(_, g)| gain > g) {
            best = Some((s, gain));
        }
    }
    best
}

/// Atoms for each fractional phase of the grid, shifted by integers at
/// correlation time.
struct PhaseBank {
    phases: Vec<Atom>,
    steps: usize,
}

impl PhaseBank {
    fn new(excitation: &[f64], grid: f64) -> Self {
        let steps = (1.0 / grid).round() as usize;
        let phases = (0..steps)
            .map(|p| Atom::new(excitation, p as f64 / steps as f64))
            .collect();
        Self { phases, steps }
    }

    fn correlate(&self, x: &[f64], start: f64) -> (f64, f64) {
        let whole = start.floor();
        let phase = (((start - whole) * self.steps as f64).round() as usize) % self.steps;
        let shift = whole as isize + if phase == 0 && start - whole > 0.5 { 1 } else { 0 };
        let atom = &self.phases[phase];
        let mut c = 0.0;
        let mut norm = 0.0;
        for (i, &t) in atom.taps.iter().enumerate() {
            let n = atom.offset + shift + i as isize;
            if n >= 0 && (n as usize) < x.len() {
                c += t * x[n as usize];
                norm += t * t;
            }
        }
        (c, norm)
    }
}

/// Greedy sparse decomposition of the first 24 ms after the direct path into
/// excitation-shaped fractional-delay atoms.
///
/// The direct path is fitted first. Each round adds the grid delay whose atom
/// removes the most residual energy, then re-solves every scale jointly.
/// Selection stops after `max_reflections` atoms or when the best atom
/// removes less than 0.1% of the direct-plus-early energy. Selected delays
/// are then refined on a 1/32-sample grid.
pub fn estimate_reflections(
    air: &AirSignal,
    excitation: &[f64],
    max_reflections: usize,
) -> Result<EarlyReflectionSet, EstimationError> {
    if excitation.is_empty() {
        return Err(EstimationError::EmptyExcitation);
    }
    if max_reflections > MAX_REFLECTIONS {
        return Err(EstimationError::TooManyReflections(max_reflections));
    }
    let dp = detect_direct_path(air)?;
    let x = air.taps();
    let fs = air.sample_rate();
    let centre = excitation_centre(excitation) as f64;
    let window = early_window(fs) as f64;

    let phase_bank = PhaseBank::new(excitation, TOA_GRID);
    let grid = |lo: f64, hi: f64| {
        let n = ((hi - lo) / TOA_GRID).round() as usize;
        (0..=n).map(move |i| lo + i as f64 * TOA_GRID)
    };

    // Direct path: search around the detected arrival.
    let guess = dp.k_d - centre;
    let (direct_start, _) = best_start(
        &phase_bank,
        x,
        grid((guess - 1.0).max(0.0).floor(), (guess + 1.0).ceil()).filter(|s| *s >= 0.0),
    )
    .ok_or(EstimationError::Silent)?;
    let direct_start = refine_start(excitation, x, direct_start);

    let first = direct_start + TOA_GRID;
    let last = (direct_start + window).min((x.len() - 1) as f64);
    if last < first {
        return Err(EstimationError::EmptyWindow);
    }

    let ref_lo = direct_start.floor().max(0.0) as usize;
    let ref_hi = ((direct_start + window).ceil() as usize + excitation.len()).min(x.len());
    let reference: f64 = x[ref_lo..ref_hi].iter().map(|v| v * v).sum();
    if reference == 0.0 {
        return Err(EstimationError::Silent);
    }

    let mut atoms = vec![Atom::new(excitation, direct_start)];
    let mut scales = fit_scales(&atoms, x);
    let mut r = residual(&atoms, &scales, x);

    while atoms.len() <= max_reflections {
        let Some((start, gain)) = best_start(&phase_bank, &r, grid(first, last)) else {
            break;
        };
        if gain < MIN_ENERGY_REDUCTION * reference {
            break;
        }
        atoms.push(Atom::new(excitation, start));
        scales = fit_scales(&atoms, x);
        r = residual(&atoms, &scales, x);
    }

    // Cyclic re-selection: each reflection is removed and picked again over
    // the whole window against what the others leave, which undoes early
    // greedy picks that straddle two nearby arrivals.
    for _ in 0..4 {
        let mut moved = false;
        for i in 0..atoms.len() {
            let others = without(&atoms, i);
            let other_scales = fit_scales(&others, x);
            let r = residual(&others, &other_scales, x);
            let coarse = if i == 0 {
                atoms[0].start
            } else {
                match best_start(&phase_bank, &r, grid(first, last)) {
                    Some((s, _)) => s,
                    None => continue,
                }
            };
            let refined = refine_start(excitation, &r, coarse);
            moved |= (refined - atoms[i].start).abs() > 1e-9;
            atoms[i] = Atom::new(excitation, refined);
        }
        if !moved {
            break;
        }
    }

    let threshold = MIN_ENERGY_REDUCTION * reference;
    resolve_clusters(&mut atoms, excitation, x, threshold, (first, last));
    polish(&mut atoms, excitation, x);

    // Prune reflections whose removal costs less than the stopping threshold.
    // Nearby atoms are re-placed before the cost is taken, so a pair fitted
    // with three atoms can collapse back to two.
    while atoms.len() > 1 {
        let base = {
            let s = fit_scales(&atoms, x);
            energy(&residual(&atoms, &s, x))
        };
        let (cost, candidate) = (1..atoms.len())
            .map(|i| {
                let mut others = without(&atoms, i);
                replace_near(&mut others, atoms[i].start, excitation, x, &phase_bank, (first, last));
                let s = fit_scales(&others, x);
                (energy(&residual(&others, &s, x)) - base, others)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .expect("at least one reflection");
        if cost >= threshold {
            break;
        }
        atoms = candidate;
    }
    resolve_clusters(&mut atoms, excitation, x, threshold, (first, last));
    polish(&mut atoms, excitation, x);
    scales = fit_scales(&atoms, x);

    let direct = &atoms[0];
    let k_d = direct.start + centre;
    let beta_d = scales[0];
    let mut refl: Vec<(f64, f64)> = atoms[1..]
        .iter()
        .zip(&scales[1..])
        .map(|(a, &s)| (a.start + centre, s))
        .filter(|&(k, s)| k > k_d && k <= k_d + window && s != 0.0)
        .collect();
    refl.sort_by(|a, b| a.0.total_cmp(&b.0));
    refl.dedup_by(|b, a| {
        if b.0 - a.0 < 1e-9 {
            a.1 += b.1;
            true
        } else {
            false
        }
    });
    Ok(EarlyReflectionSet {
        k_d,
        beta_d,
        kappa: refl.iter().map(|p| p.0).collect(),
        beta: refl.iter().map(|p| p.1).collect(),
    })
}

/// Reflections closer than this (in samples) are solved jointly.
const CLUSTER_GAP: f64 = 6.0;

/// Re-solves each group of nearby reflections by exhaustive search over one
/// and two atoms on the TOA grid, keeping the fewest atoms that explain the
/// group as well as the current fit does (within `threshold`).
fn resolve_clusters(
    atoms: &mut Vec<Atom>,
    excitation: &[f64],
    x: &[f64],
    threshold: f64,
    (first, last): (f64, f64),
) {
    let mut order: Vec<usize> = (1..atoms.len()).collect();
    order.sort_by(|&a, &b| atoms[a].start.total_cmp(&atoms[b].start));
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match clusters.last_mut() {
            Some(c) if atoms[i].start - atoms[*c.last().unwrap()].start <= CLUSTER_GAP => c.push(i),
            _ => clusters.push(vec![i]),
        }
    }
    let mut replaced: Vec<(Vec<usize>, Vec<f64>)> = Vec::new();
    for cluster in clusters.into_iter().filter(|c| c.len() >= 2) {
        let others: Vec<Atom> = (0..atoms.len())
            .filter(|j| !cluster.contains(j))
            .map(|j| atoms[j].clone())
            .collect();
        let s = fit_scales(&others, x);
        let r = residual(&others, &s, x);
        let current: Vec<Atom> = cluster.iter().map(|&j| atoms[j].clone()).collect();
        let cur_gain = energy(&r) - {
            let cs = fit_scales(&current, &r);
            energy(&residual(&current, &cs, &r))
        };

        let lo = first + ((current[0].start - 2.0 - first) / TOA_GRID).floor().max(0.0) * TOA_GRID;
        let hi = (current.last().unwrap().start + 2.0).min(last);
        let n = ((hi - lo) / TOA_GRID).floor() as usize;
        let cands: Vec<Atom> = (0..=n)
            .map(|k| Atom::new(excitation, lo + k as f64 * TOA_GRID))
            .collect();
        let len = x.len();
        let corr: Vec<f64> = cands.iter().map(|a| a.dot(&r)).collect();
        let norm: Vec<f64> = cands.iter().map(|a| a.norm_sq(len)).collect();

        let mut best1 = (f64::MIN, 0);
        for p in 0..cands.len() {
            if norm[p] > 0.0 {
                let g = corr[p] * corr[p] / norm[p];
                if g > best1.0 {
                    best1 = (g, p);
                }
            }
        }
        let mut best2 = (f64::MIN, 0, 0);
        for p in 0..cands.len() {
            for q in p + 1..cands.len() {
                let g = cands[p].overlap(&cands[q], len);
                let det = norm[p] * norm[q] - g * g;
                if det <= 1e-9 * norm[p] * norm[q] {
                    continue;
                }
                let gain = (norm[q] * corr[p] * corr[p] - 2.0 * g * corr[p] * corr[q]
                    + norm[p] * corr[q] * corr[q])
                    / det;
                if gain > best2.0 {
                    best2 = (gain, p, q);
                }
            }
        }
        let best_gain = cur_gain.max(best1.0).max(best2.0);
        let starts = if best1.0 >= best_gain - threshold {
            vec![cands[best1.1].start]
        } else if best2.0 >= best_gain - threshold && (cluster.len() > 2 || best2.0 > cur_gain) {
            vec![cands[best2.1].start, cands[best2.2].start]
        } else {
            continue;
        };
        replaced.push((cluster, starts));
    }
    if replaced.is_empty() {
        return;
    }
    let drop: Vec<usize> = replaced.iter().flat_map(|(c, _)| c.clone()).collect();
    let mut kept: Vec<Atom> = (0..atoms.len())
        .filter(|j| !drop.contains(j))
        .map(|j| atoms[j].clone())
        .collect();
    for (_, starts) in replaced {
        kept.extend(starts.into_iter().map(|s| Atom::new(excitation, s)));
    }
    *atoms = kept;
}

/// Coordinate sweeps of the 1/32-sample placement over all reflections until
/// nothing moves. Each trial position re-fits the atom jointly with its
/// neighbours, so closely spaced pairs are placed together.
fn polish(atoms: &mut [Atom], excitation: &[f64], x: &[f64]) {
    let reach = 2.0 * excitation.len() as f64;
    let steps = 8;
    for _ in 0..8 {
        let mut moved = false;
        for i in 1..atoms.len() {
            let scales = fit_scales(atoms, x);
            let near: Vec<Atom> = (0..atoms.len())
                .filter(|&j| j != i && (atoms[j].start - atoms[i].start).abs() <= reach)
                .map(|j| atoms[j].clone())
                .collect();
            let mut r = x.to_vec();
            for (j, a) in atoms.iter().enumerate() {
                if j != i && (a.start - atoms[i].start).abs() > reach {
                    a.add_to(&mut r, -scales[j]);
                }
            }
            let current = atoms[i].start;
            let mut best = (current, f64::MIN);
            for k in -steps..=steps {
                let start = current + k as f64 * TOA_GRID / steps as f64;
                if start < 0.0 {
                    continue;
                }
                let mut set = near.clone();
                set.push(Atom::new(excitation, start));
                let gain = fit_gain(&set, &r);
                if gain > best.1 + 1e-15 * gain.abs() {
                    best = (start, gain);
                }
            }
            if best.0 != current {
                moved = true;
                atoms[i] = Atom::new(excitation, best.0);
            }
        }
        if !moved {
            break;
        }
    }
}

/// Energy removed from `x` by the least-squares fit of `atoms`.
fn fit_gain(atoms: &[Atom], x: &[f64]) -> f64 {
    let scales = fit_scales(atoms, x);
    atoms.iter().zip(&scales).map(|(a, s)| s * a.dot(x)).sum()
}

/// Coordinate descent over the reflections within one excitation length of
/// `pos`, each searched ±2 samples around its current start.
fn replace_near(
    atoms: &mut [Atom],
    pos: f64,
    excitation: &[f64],
    x: &[f64],
    bank: &PhaseBank,
    (first, last): (f64, f64),
) {
    let reach = excitation.len() as f64;
    let near: Vec<usize> = (1..atoms.len())
        .filter(|&j| (atoms[j].start - pos).abs() <= reach)
        .collect();
    for _ in 0..3 {
        for &j in &near {
            let others = without(atoms, j);
            let s = fit_scales(&others, x);
            let r = residual(&others, &s, x);
            let lo = (atoms[j].start - 2.0).max(first);
            let hi = (atoms[j].start + 2.0).min(last);
            let n = ((hi - lo) / TOA_GRID).floor() as usize;
            if let Some((coarse, _)) = best_start(bank, &r, (0..=n).map(|k| lo + k as f64 * TOA_GRID)) {
                atoms[j] = Atom::new(excitation, refine_start(excitation, &r, coarse));
            }
        }
    }
}

fn without(atoms: &[Atom], i: usize) -> Vec<Atom> {
    atoms
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(_, a)| a.clone())
        .collect()
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Moves an atom within ±`TOA_GRID` on a 1/32-sample grid to the position
/// that best explains the residual `r`.
fn refine_start(excitation: &[f64], r: &[f64], start: f64) -> f64 {
    let steps = 8;
    let mut best = (start, f64::MIN);
    for i in -steps..=steps {
        let s = start + i as f64 * TOA_GRID / steps as f64;
        if s < 0.0 {
            continue;
        }
        let atom = Atom::new(excitation, s);
        let norm = atom.norm_sq(r.len());
        if norm <= 0.0 {
            continue;
        }
        let c = atom.dot(r);
        let gain = c * c / norm;
        if gain > best.1 {
            best = (s, gain);
        }
    }
    best.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct T60Estimate {
    pub t60: f64,
    /// Set when the fitted value exceeded the sanity bound and was clamped.
    pub flagged: bool,
    pub r_squared: f64,
}

/// Reverberation time from the backward-integrated energy decay, fitted by
/// least squares between -5 dB and -35 dB.
pub fn estimate_t60(air: &AirSignal) -> Result<T60Estimate, EstimationError> {
    let x = air.taps();
    let total: f64 = x.iter().map(|v| v * v).sum();
    if total <= 0.0 {
        return Err(EstimationError::Silent);
    }
    let mut curve = vec![0.0; x.len()];
    let mut acc = 0.0;
    for n in (0..x.len()).rev() {
        acc += x[n] * x[n];
        curve[n] = 10.0 * (acc / total).log10();
    }
    let lo = curve.iter().position(|&d| d <= -5.0);
    let hi = curve.iter().position(|&d| d <= -35.0);
    let (lo, hi) = match (lo, hi) {
        (Some(lo), Some(hi)) if hi > lo + 1 => (lo, hi),
        _ => {
            let floor = curve
                .iter()
                .copied()
                .filter(|d| d.is_finite())
                .fold(0.0, f64::min);
            return Err(EstimationError::DecaySpan(-floor));
        }
    };
    let fs = air.sample_rate() as f64;
    let pts: Vec<(f64, f64)> = (lo..=hi).map(|n| (n as f64 / fs, curve[n])).collect();
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r_squared = sxy * sxy / (sxx * syy);
    if r_squared < 0.9 || slope >= 0.0 {
        return Err(EstimationError::NoDecay(r_squared));
    }
    let t60 = -60.0 / slope;
    Ok(if t60 > MAX_T60 {
        T60Estimate {
            t60: MAX_T60,
            flagged: true,
            r_squared,
        }
    } else {
        T60Estimate {
            t60,
            flagged: false,
            r_squared,
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailFit {
    pub b: [f64; NUMER_LEN],
    pub a: [f64; DENOM_ORDER],
    /// The normal equations were singular and the identity filter was used.
    pub singular: bool,
    pub stabilization: Stabilization,
}

/// Prony fit of a 5-pole, 5-zero filter to the response from `n_m` onwards.
///
/// The denominator solves the linear-prediction normal equations over the
/// first `min(4000, len)` tail samples; the numerator then matches the first
/// six samples exactly. Poles outside the unit circle are removed and the
/// numerator scaled to unit norm (the decoder is invariant to its scale).
pub fn estimate_tail_iir(air: &AirSignal, n_m: usize) -> Result<TailFit, EstimationError> {
    let x = air.taps();
    if n_m >= x.len() {
        return Err(EstimationError::MixingPoint {
            n_m,
            len: x.len(),
        });
    }
    let tail = &x[n_m..];
    if tail.len() < PRONY_MIN_SAMPLES {
        return Err(EstimationError::TailTooShort(tail.len()));
    }
    let tail = &tail[..tail.len().min(PRONY_MAX_SAMPLES)];
    Ok(prony(tail))
}

fn prony(x: &[f64]) -> TailFit {
    let r = DENOM_ORDER;
    let p = NUMER_LEN - 1;
    let mut normal = DMatrix::<f64>::zeros(r, r);
    let mut rhs = DVector::<f64>::zeros(r);
    for n in (p + 1).max(r)..x.len() {
        for i in 0..r {
            let xi = x[n - 1 - i];
            rhs[i] -= xi * x[n];
            for j in 0..r {
                normal[(i, j)] += xi * x[n - 1 - j];
            }
        }
    }
    let trace: f64 = (0..r).map(|i| normal[(i, i)]).sum();
    let energy: f64 = x.iter().map(|v| v * v).sum();
    let identity = |singular| TailFit {
        b: [1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        a: [0.0; DENOM_ORDER],
        singular,
        stabilization: Stabilization::Unchanged,
    };
    if !(trace > 1e-12 * energy) || energy == 0.0 {
        return identity(true);
    }
    let ridge = PRONY_RIDGE * trace / r as f64;
    for i in 0..r {
        normal[(i, i)] += ridge;
    }
    let Some(chol) = normal.cholesky() else {
        return identity(true);
    };
    let sol = chol.solve(&rhs);
    let mut a = [0.0; DENOM_ORDER];
    a.iter_mut().zip(sol.iter()).for_each(|(d, s)| *d = *s);

    let (a, stabilization) = stabilize_denominator(&a);
    let mut b = [0.0; NUMER_LEN];
    for (i, bi) in b.iter_mut().enumerate() {
        let mut v = x[i];
        for j in 1..=i.min(r) {
            v += a[j - 1] * x[i - j];
        }
        *bi = v;
    }
    let norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        b.iter_mut().for_each(|v| *v /= norm);
    } else {
        b[0] = 1.0;
    }
    TailFit {
        b,
        a,
        singular: false,
        stabilization,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DrrMeasurement {
    pub eta1: f64,
    pub eta2: f64,
    /// A segment had no energy and its ratio was capped.
    pub capped: bool,
}

/// Direct-to-early and direct-to-tail energy ratios over the segments
/// defined by `k_d` and `n_m`.
pub fn measure_drr(air: &AirSignal, k_d: f64, n_m: usize) -> Result<DrrMeasurement, EstimationError> {
    let seg = Segments::new(k_d, n_m, air.len(), air.sample_rate());
    let (ed, ee, et) = seg.energies(air.taps());
    if ed <= 0.0 {
        return Err(EstimationError::NoDirectEnergy);
    }
    let mut capped = false;
    let mut ratio = |e: f64| {
        if e > 0.0 && ed / e <= RATIO_CAP {
            ed / e
        } else {
            capped = true;
            RATIO_CAP
        }
    };
    let eta1 = ratio(ee);
    let eta2 = ratio(et);
    Ok(DrrMeasurement { eta1, eta2, capped })
}

/// Pipeline stage that produced an encode error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    SampleRate,
    DirectPath,
    Reflections,
    T60,
    TailFilter,
    EnergyRatios,
    Assembly,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::SampleRate => "sample rate",
            Stage::DirectPath => "direct path",
            Stage::Reflections => "reflections",
            Stage::T60 => "T60",
            Stage::TailFilter => "tail filter",
            Stage::EnergyRatios => "energy ratios",
            Stage::Assembly => "vector assembly",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("encode failed at {stage}: {source}")]
pub struct EncodeError {
    pub stage: Stage,
    #[source]
    pub source: EstimationError,
}

/// Everything `encode` estimated, with the quality flags raised on the way.
#[derive(Debug, Clone)]
pub struct Encoding {
    pub rep: LowDimRep,
    pub excitation: Vec<f64>,
    pub reflections: EarlyReflectionSet,
    pub mixing_point: usize,
    pub t60: T60Estimate,
    pub tail: TailFit,
    pub drr: DrrMeasurement,
}

/// Encodes a 16 kHz AIR into its 170-value representation and returns the
/// AIR's own unit-peak direct-path window as its excitation.
pub fn encode(air: &AirSignal, window_len: usize) -> Result<Encoding, EncodeError> {
    let at = |stage| move |source| EncodeError { stage, source };
    if air.sample_rate() != DATASET_SAMPLE_RATE {
        return Err(at(Stage::SampleRate)(EstimationError::ResampleFirst(
            air.sample_rate(),
        )));
    }
    if window_len == 0 {
        return Err(at(Stage::DirectPath)(EstimationError::EmptyExcitation));
    }
    let dp = detect_direct_path(air).map_err(at(Stage::DirectPath))?;
    let excitation = unit_peak(direct_path_window(air, dp.k_d, window_len));
    let reflections =
        estimate_reflections(air, &excitation, MAX_REFLECTIONS).map_err(at(Stage::Reflections))?;

    let n_m = mixing_point(reflections.k_d, air.sample_rate());
    if n_m >= air.len() {
        return Err(at(Stage::TailFilter)(EstimationError::MixingPoint {
            n_m,
            len: air.len(),
        }));
    }
    let late = AirSignal::new(air.taps()[n_m..].to_vec(), air.sample_rate())
        .map_err(|_| at(Stage::T60)(EstimationError::Silent))?;
    let t60 = estimate_t60(&late).map_err(at(Stage::T60))?;
    let tail = estimate_tail_iir(air, n_m).map_err(at(Stage::TailFilter))?;
    let drr = measure_drr(air, reflections.k_d, n_m).map_err(at(Stage::EnergyRatios))?;

    let rep = LowDimRep::from_parts(
        t60.t60,
        drr.eta1,
        drr.eta2,
        tail.a,
        tail.b,
        &reflections.relative_toas(),
        &reflections.relative_scales(),
    )
    .map_err(|e| at(Stage::Assembly)(e.into()))?;
    Ok(Encoding {
        rep,
        excitation,
        reflections,
        mixing_point: n_m,
        t60,
        tail,
        drr,
    })
}
