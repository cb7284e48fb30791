//! Random encoding vectors, excitation pulses and per-room AIR corpora with
//! known ground truth, for tests and demos.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::air::{save_air, AirError, AirSignal, DatasetManifest, ManifestEntry, ManifestError};
use crate::poly::{from_roots, Complex64};
use crate::rep::{LowDimRep, RepError, DENOM_ORDER, NUMER_LEN};
use crate::segment::{direct_half_width, early_window, Segments};
use crate::synthesis::{
    assemble, excitation_centre, synth_direct, synth_early, MixMode, SynthError, SynthesisConfig,
};

#[derive(Debug, Error)]
pub enum SyntheticError {
    #[error(transparent)]
    Rep(#[from] RepError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Air(#[from] AirError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("cannot create {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("could not place {0} reflections with the requested separation")]
    Placement(usize),
}

/// Ranges a room draws its AIR parameters from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomProfile {
    pub name: String,
    pub t60: (f64, f64),
    /// Log-uniform. Ignored when `eta1_from_atoms` is set.
    pub eta1: (f64, f64),
    /// Set the direct-to-early ratio to that of the drawn reflections, so
    /// the decoder leaves their scales (nearly) unchanged.
    pub eta1_from_atoms: bool,
    /// Log-uniform.
    pub eta2: (f64, f64),
    pub reflections: (usize, usize),
    pub scale: (f64, f64),
    /// Minimum spacing between reflections, in samples.
    pub min_separation: f64,
    pub pole_radius: (f64, f64),
    /// Width (standard deviation, samples) of the excitation pulse.
    pub pulse_width: (f64, f64),
    /// Samples of silence before the direct path.
    pub pre_delay: (usize, usize),
}

impl RoomProfile {
    /// Seven rooms with distinct reverberation and geometry.
    pub fn presets() -> Vec<RoomProfile> {
        let room = |name: &str, t60: (f64, f64), eta2: (f64, f64), refl: (usize, usize)| RoomProfile {
            name: name.to_string(),
            t60,
            eta1: (1.0, 6.0),
            eta1_from_atoms: false,
            eta2,
            reflections: refl,
            scale: (0.15, 0.6),
            min_separation: 3.0,
            pole_radius: (0.3, 0.85),
            pulse_width: (0.9, 1.4),
            pre_delay: (30, 120),
        };
        vec![
            room("lobby", (0.55, 0.75), (1.0, 4.0), (6, 12)),
            room("lecture_a", (0.6, 0.8), (1.5, 5.0), (5, 10)),
            room("lecture_b", (0.9, 1.3), (0.8, 3.0), (6, 12)),
            room("meeting_a", (0.35, 0.5), (3.0, 10.0), (3, 8)),
            room("meeting_b", (0.4, 0.55), (2.0, 8.0), (4, 9)),
            room("office_a", (0.3, 0.42), (4.0, 15.0), (2, 6)),
            room("office_b", (0.33, 0.45), (3.0, 12.0), (2, 7)),
        ]
    }

    /// Narrow ranges that keep encode accurate: strong sparse reflections and
    /// a quiet tail.
    pub fn clean(name: &str) -> RoomProfile {
        RoomProfile {
            name: name.to_string(),
            t60: (0.3, 0.9),
            eta1: (1.0, 4.0),
            eta1_from_atoms: true,
            eta2: (100.0, 300.0),
            reflections: (1, 10),
            scale: (0.3, 0.7),
            min_separation: 3.0,
            pole_radius: (0.3, 0.8),
            pulse_width: (0.9, 1.4),
            pre_delay: (40, 80),
        }
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn log_uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    uniform(rng, (lo.ln(), hi.ln())).exp()
}

/// `count` sorted delays in `[lo, hi]` at least `sep` apart.
pub fn random_toas(
    rng: &mut impl Rng,
    count: usize,
    (lo, hi): (f64, f64),
    sep: f64,
) -> Result<Vec<f64>, SyntheticError> {
    // Draw in the span left after reserving the gaps, then re-insert them.
    let free = hi - lo - sep * count.saturating_sub(1) as f64;
    if free < 0.0 {
        return Err(SyntheticError::Placement(count));
    }
    let mut u: Vec<f64> = (0..count).map(|_| rng.gen_range(0.0..=free)).collect();
    u.sort_by(f64::total_cmp);
    Ok(u.iter()
        .enumerate()
        .map(|(i, v)| {
            // Quarter-sample grid keeps ground truth on the encoder's grid.
            let t = lo + v + sep * i as f64;
            (t * 4.0).floor() / 4.0
        })
        .collect())
}

/// A stable denominator: two complex pole pairs and one real pole.
pub fn random_denominator(rng: &mut impl Rng, radius: (f64, f64)) -> [f64; DENOM_ORDER] {
    let mut poles = Vec::with_capacity(DENOM_ORDER);
    for _ in 0..2 {
        let p = Complex64::from_polar(uniform(rng, radius), rng.gen_range(0.2..PI - 0.2));
        poles.push(p);
        poles.push(p.conj());
    }
    poles.push(Complex64::new(uniform(rng, radius) * if rng.gen() { 1.0 } else { -1.0 }, 0.0));
    let c = from_roots(&poles);
    let mut a = [0.0; DENOM_ORDER];
    a.copy_from_slice(&c[1..]);
    a
}

/// Unit-norm numerator.
pub fn random_numerator(rng: &mut impl Rng) -> [f64; NUMER_LEN] {
    let mut b = [0.0; NUMER_LEN];
    b[0] = 1.0;
    for v in &mut b[1..] {
        *v = 0.5 * rng.sample::<f64, _>(StandardNormal);
    }
    let norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    b.map(|v| v / norm)
}

/// Unit-peak pulse centred in a `len`-tap window: a Gaussian with a slight
/// negative undershoot after the peak.
pub fn random_excitation(rng: &mut impl Rng, len: usize, width: (f64, f64)) -> Vec<f64> {
    let c = (len - 1) as f64 / 2.0;
    let sigma = uniform(rng, width);
    let dip = rng.gen_range(0.0..0.25);
    let lag = rng.gen_range(1.5..3.0);
    let e: Vec<f64> = (0..len)
        .map(|n| {
            let t = n as f64 - c;
            (-t * t / (2.0 * sigma * sigma)).exp()
                - dip * (-(t - lag).powi(2) / (8.0 * sigma * sigma)).exp()
        })
        .collect();
    let peak = e.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    e.into_iter().map(|v| v / peak).collect()
}

/// A random valid encoding vector drawn from `profile`.
pub fn random_rep(
    rng: &mut impl Rng,
    profile: &RoomProfile,
    sample_rate: u32,
) -> Result<LowDimRep, SyntheticError> {
    let t60 = uniform(rng, profile.t60);
    let eta1 = log_uniform(rng, profile.eta1);
    let eta2 = log_uniform(rng, profile.eta2);
    let (lo, hi) = profile.reflections;
    let d = rng.gen_range(lo..=hi.max(lo));
    // Reflections start after the direct-path window so they stay separable
    // from the excitation the encoder cuts out of the response.
    let first = 2.0 * direct_half_width(sample_rate) as f64;
    let window = early_window(sample_rate) as f64;
    let toas = random_toas(rng, d, (first, window - 4.0), profile.min_separation)?;
    let scales: Vec<f64> = (0..d)
        .map(|_| uniform(rng, profile.scale) * if rng.gen() { 1.0 } else { -1.0 })
        .collect();
    let a = random_denominator(rng, profile.pole_radius);
    let b = random_numerator(rng);
    Ok(LowDimRep::from_parts(t60, eta1, eta2, a, b, &toas, &scales)?)
}

/// One synthetic AIR with its ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticAir {
    pub air: AirSignal,
    pub rep: LowDimRep,
    pub excitation: Vec<f64>,
    /// Gain the decoder applied to the reflections.
    pub early_gain: f64,
    pub pre_delay: usize,
}

/// Decodes a random rep from `profile` with a random excitation and shifts
/// it right by a random pre-delay. Draws that the decoder cannot realise are
/// redrawn.
pub fn random_air(
    rng: &mut impl Rng,
    profile: &RoomProfile,
    length: usize,
    sample_rate: u32,
) -> Result<SyntheticAir, SyntheticError> {
    let mut last = None;
    for _ in 0..32 {
        let mut rep = random_rep(rng, profile, sample_rate)?;
        let excitation = random_excitation(rng, 17, profile.pulse_width);
        let pre_delay = rng.gen_range(profile.pre_delay.0..=profile.pre_delay.1);
        let cfg = SynthesisConfig {
            length: length - pre_delay,
            sample_rate,
            mix_mode: MixMode::Continuous,
            seed: rng.gen(),
        };
        if profile.eta1_from_atoms && rep.d_count() > 0 {
            let c = excitation_centre(&excitation);
            let seg = Segments::new(c as f64, c + early_window(sample_rate), cfg.length, sample_rate);
            let direct = synth_direct(&excitation, &cfg)?;
            let early = synth_early(&rep, &excitation, &cfg)?;
            let e = |x: &[f64], r: &std::ops::Range<usize>| x[r.clone()].iter().map(|v| v * v).sum::<f64>();
            let eta1 = e(&direct, &seg.direct) / e(&early, &seg.early);
            rep = rep.with_ratios(eta1, rep.eta2())?;
        }
        match assemble(&rep, &excitation, &cfg) {
            Ok(asm) => {
                let mut taps = vec![0.0; pre_delay];
                taps.extend_from_slice(asm.air.taps());
                let air = AirSignal::new(taps, sample_rate)?;
                return Ok(SyntheticAir {
                    air,
                    rep,
                    excitation,
                    early_gain: asm.early_gain,
                    pre_delay,
                });
            }
            Err(e @ SynthError::Degenerate(_)) => last = Some(e),
            Err(e) => return Err(e.into()),
        }
    }
    Err(last.expect("at least one attempt").into())
}

/// Writes `per_room` AIRs per profile as float WAVs under `dir/<room>/` and a
/// `manifest.csv` listing them.
pub fn write_corpus(
    dir: &Path,
    profiles: &[RoomProfile],
    per_room: usize,
    length: usize,
    seed: u64,
) -> Result<DatasetManifest, SyntheticError> {
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| SyntheticError::Io { path, source }
    };
    let mut entries = Vec::new();
    for (r, profile) in profiles.iter().enumerate() {
        let room_dir = dir.join(&profile.name);
        fs::create_dir_all(&room_dir).map_err(io(&room_dir))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64 + 1);
        for i in 0..per_room {
            let s = random_air(&mut rng, profile, length, 16_000)?;
            let rel = format!("{}/{}_{i:03}.wav", profile.name, profile.name);
            save_air(&s.air, dir.join(&rel))?;
            entries.push(ManifestEntry {
                path: dir.join(&rel),
                room: profile.name.clone(),
                meta: format!("t60={:.4}", s.rep.t60()),
            });
        }
    }
    let manifest = DatasetManifest::new(entries)?;
    let text = manifest.to_csv_relative(dir);
    let path = dir.join("manifest.csv");
    fs::write(&path, text).map_err(io(&path))?;
    Ok(manifest)
}
