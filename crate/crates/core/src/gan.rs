//! Per-room GAN over encoding vectors: network builders matching the
//! published layer table, min-max normalisation, instance-noise training,
//! generation with validity repairs, and distribution reports.

use std::fs;
use std::path::Path;

use ndarray::{concatenate, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{bce_loss, Adam, AdamConfig, Layer, Mode, Network, NnError};
use crate::poly;
use crate::rep::{
    LowDimRep, RepError, Stabilization, IDX_ETA1, IDX_ETA2, IDX_SCALE, IDX_T60, IDX_TOA,
    MAX_REFLECTIONS, MAX_T60, REP_LEN,
};

/// Full FIR length of the dataset responses used by the FIR-variant table.
pub const FIR_TAPS: usize = 33_248;
/// TOA slots below this are read as empty after generation.
pub const TOA_FLOOR: f64 = 0.5;

#[derive(Debug, Error)]
pub enum GanError {
    #[error("need at least {needed} training vectors, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("training vector {index} has width {got}, expected {expected}")]
    Width {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("training vector {0} is not finite")]
    NonFinite(usize),
    #[error("non-finite loss at epoch {0}")]
    Diverged(usize),
    #[error("model has no normaliser; train it first")]
    Untrained,
    #[error("could not draw {wanted} valid vectors in {attempts} attempts")]
    Exhausted { wanted: usize, attempts: usize },
    #[error("empty sample set")]
    Empty,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Rep(#[from] RepError),
    #[error("model file: {0}")]
    Io(#[from] std::io::Error),
    #[error("model sidecar: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub instance_noise_sigma: f64,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            latent_dim: 20,
            hidden: 256,
            epochs: 6000,
            batch_size: 32,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            instance_noise_sigma: 0.1,
            seed: 0,
        }
    }
}

/// Per-dimension min-max scaling to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMaxNormalizer {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMaxNormalizer {
    pub fn fit(data: &[Vec<f64>]) -> Result<Self, GanError> {
        let first = data.first().ok_or(GanError::Empty)?;
        let mut min = first.clone();
        let mut max = first.clone();
        for row in &data[1..] {
            for (j, &v) in row.iter().enumerate() {
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        Ok(Self { min, max })
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn is_constant(&self, j: usize) -> bool {
        self.max[j] <= self.min[j]
    }

    pub fn constant_dims(&self) -> usize {
        (0..self.dim()).filter(|&j| self.is_constant(j)).count()
    }

    /// Constant dimensions map to 0.
    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(j, &v)| {
                if self.is_constant(j) {
                    0.0
                } else {
                    (v - self.min[j]) / (self.max[j] - self.min[j])
                }
            })
            .collect()
    }

    /// Constant dimensions return their constant.
    pub fn denormalize(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .enumerate()
            .map(|(j, &v)| {
                if self.is_constant(j) {
                    self.min[j]
                } else {
                    self.min[j] + v * (self.max[j] - self.min[j])
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub d_loss: f64,
    pub g_loss: f64,
    /// Fraction of real and generated samples the discriminator classifies
    /// correctly at a 0.5 threshold.
    pub d_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct GanModel {
    pub generator: Network,
    pub discriminator: Network,
    pub normalizer: Option<MinMaxNormalizer>,
    pub room_label: String,
    pub history: Vec<EpochStats>,
    pub config: GanConfig,
}

/// One row of a layer table: kind, input width, output width, parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerRow {
    pub kind: &'static str,
    pub inputs: usize,
    pub outputs: usize,
    pub parameters: usize,
}

/// Parameterised layers of `net` with their total counts.
pub fn layer_table(net: &Network) -> Vec<LayerRow> {
    net.layers()
        .iter()
        .filter_map(|l| match l {
            Layer::Dense(d) => Some(LayerRow {
                kind: "FF",
                inputs: d.inputs(),
                outputs: d.outputs(),
                parameters: l.parameter_count().1,
            }),
            Layer::BatchNorm(b) => Some(LayerRow {
                kind: "BN",
                inputs: b.features(),
                outputs: b.features(),
                parameters: l.parameter_count().1,
            }),
            _ => None,
        })
        .collect()
}

/// Generator and discriminator for `data_dim`-wide vectors.
///
/// Generator: three FF → LeakyReLU → BN blocks then FF → sigmoid.
/// Discriminator: two FF → LeakyReLU blocks then FF → sigmoid.
pub fn build_gan(cfg: &GanConfig, data_dim: usize) -> GanModel {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let h = cfg.hidden;
    let generator = Network::new(vec![
        Layer::dense(cfg.latent_dim, h, &mut rng),
        Layer::leaky_relu(),
        Layer::batch_norm(h),
        Layer::dense(h, h, &mut rng),
        Layer::leaky_relu(),
        Layer::batch_norm(h),
        Layer::dense(h, h, &mut rng),
        Layer::leaky_relu(),
        Layer::batch_norm(h),
        Layer::dense(h, data_dim, &mut rng),
        Layer::sigmoid(),
    ])
    .expect("generator widths chain");
    let discriminator = Network::new(vec![
        Layer::dense(data_dim, h, &mut rng),
        Layer::leaky_relu(),
        Layer::dense(h, h, &mut rng),
        Layer::leaky_relu(),
        Layer::dense(h, 1, &mut rng),
        Layer::sigmoid(),
    ])
    .expect("discriminator widths chain");
    GanModel {
        generator,
        discriminator,
        normalizer: None,
        room_label: String::new(),
        history: Vec::new(),
        config: *cfg,
    }
}

/// The GAN over 170-value encoding vectors.
pub fn build_lowdim_gan(cfg: &GanConfig) -> GanModel {
    build_gan(cfg, REP_LEN)
}

/// The GAN over raw FIR taps.
pub fn build_fir_gan(cfg: &GanConfig, taps: usize) -> GanModel {
    build_gan(cfg, taps)
}

impl GanModel {
    pub fn data_dim(&self) -> usize {
        self.generator.output_width()
    }

    /// `(generator, discriminator)` total parameter counts.
    pub fn parameter_counts(&self) -> (usize, usize) {
        (self.generator.parameter_count().1, self.discriminator.parameter_count().1)
    }

    pub fn total_parameters(&self) -> usize {
        let (g, d) = self.parameter_counts();
        g + d
    }

    /// Trains on `data` (raw, un-normalised vectors), appending one entry per
    /// epoch to `history`. Deterministic given `config.seed`.
    pub fn train(&mut self, data: &[Vec<f64>]) -> Result<(), GanError> {
        self.train_with(data, |_, _| {})
    }

    /// `train` with a callback after every epoch.
    pub fn train_with(
        &mut self,
        data: &[Vec<f64>],
        mut on_epoch: impl FnMut(usize, &EpochStats),
    ) -> Result<(), GanError> {
        let cfg = self.config;
        let dim = self.data_dim();
        if data.len() < cfg.batch_size.max(2) {
            return Err(GanError::InsufficientData {
                needed: cfg.batch_size.max(2),
                got: data.len(),
            });
        }
        for (index, row) in data.iter().enumerate() {
            if row.len() != dim {
                return Err(GanError::Width {
                    index,
                    expected: dim,
                    got: row.len(),
                });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(GanError::NonFinite(index));
            }
        }
        let normalizer = MinMaxNormalizer::fit(data)?;
        let rows: Vec<Vec<f64>> = data.iter().map(|r| normalizer.normalize(r)).collect();
        self.normalizer = Some(normalizer);

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        let adam = AdamConfig::new(cfg.lr, cfg.beta1, cfg.beta2);
        let mut opt_g = Adam::new(adam);
        let mut opt_d = Adam::new(adam);
        self.generator.set_mode(Mode::Train);
        self.discriminator.set_mode(Mode::Train);

        let mut order: Vec<usize> = (0..rows.len()).collect();
        let start = self.history.len();
        for epoch in start..start + cfg.epochs {
            order.shuffle(&mut rng);
            let mut sums = (0.0, 0.0, 0.0);
            let mut batches = 0usize;
            for chunk in order.chunks(cfg.batch_size) {
                // A single leftover row cannot be batch-normalised.
                if chunk.len() < 2 {
                    continue;
                }
                let b = chunk.len();
                let real = Array2::from_shape_fn((b, dim), |(i, j)| rows[chunk[i]][j]);

                // Discriminator: real labelled 1, generated labelled 0.
                let fake = self.generator.forward(&latent(&mut rng, b, cfg.latent_dim))?;
                let noisy = concatenate(Axis(0), &[real.view(), fake.view()])
                    .expect("same widths")
                    + noise(&mut rng, 2 * b, dim, cfg.instance_noise_sigma);
                let p = self.discriminator.forward(&noisy)?;
                let targets: Vec<f64> = (0..2 * b).map(|i| if i < b { 1.0 } else { 0.0 }).collect();
                let probs: Vec<f64> = p.column(0).to_vec();
                let (d_loss, grad) = bce_loss(&probs, &targets)?;
                let correct = probs
                    .iter()
                    .zip(&targets)
                    .filter(|(p, t)| (**p > 0.5) == (**t > 0.5))
                    .count();
                self.discriminator
                    .backward_logits(&Array2::from_shape_vec((2 * b, 1), grad).expect("shape"))?;
                opt_d.step(&mut self.discriminator);

                // Generator: through the frozen discriminator, labelled 1.
                let fake = self.generator.forward(&latent(&mut rng, b, cfg.latent_dim))?;
                let noisy = &fake + &noise(&mut rng, b, dim, cfg.instance_noise_sigma);
                let p = self.discriminator.forward(&noisy)?;
                let (g_loss, grad) = bce_loss(&p.column(0).to_vec(), &vec![1.0; b])?;
                let grad_in = self
                    .discriminator
                    .backward_logits(&Array2::from_shape_vec((b, 1), grad).expect("shape"))?;
                self.generator.backward(&grad_in)?;
                opt_g.step(&mut self.generator);

                if !(d_loss.is_finite() && g_loss.is_finite()) {
                    return Err(GanError::Diverged(epoch));
                }
                sums.0 += d_loss;
                sums.1 += g_loss;
                sums.2 += correct as f64 / (2 * b) as f64;
                batches += 1;
            }
            let n = batches.max(1) as f64;
            let stats = EpochStats {
                d_loss: sums.0 / n,
                g_loss: sums.1 / n,
                d_accuracy: sums.2 / n,
            };
            self.history.push(stats);
            on_epoch(epoch, &stats);
        }
        Ok(())
    }

    /// `n` generator outputs, denormalised, with no validity repairs.
    pub fn sample(&mut self, n: usize, seed: u64) -> Result<Vec<Vec<f64>>, GanError> {
        let normalizer = self.normalizer.clone().ok_or(GanError::Untrained)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = latent(&mut rng, n, self.config.latent_dim);
        self.generator.set_mode(Mode::Inference);
        let out = self.generator.forward(&z)?;
        self.generator.set_mode(Mode::Train);
        Ok(out
            .rows()
            .into_iter()
            .map(|r| normalizer.denormalize(&r.to_vec()))
            .collect())
    }

    /// `n` valid encoding vectors. Outputs that stay invalid after repair are
    /// redrawn, up to `10 n` extra draws.
    pub fn generate(&mut self, n: usize, seed: u64) -> Result<(Vec<LowDimRep>, RepairReport), GanError> {
        let normalizer = self.normalizer.clone().ok_or(GanError::Untrained)?;
        let mut report = RepairReport::default();
        let mut out = Vec::with_capacity(n);
        let mut round = 0u64;
        let budget = n + 10 * n.max(1);
        let mut drawn = 0;
        while out.len() < n {
            if drawn >= budget {
                return Err(GanError::Exhausted {
                    wanted: n,
                    attempts: drawn,
                });
            }
            let want = (n - out.len()).min(budget - drawn).max(1);
            let batch = self.sample(want, seed.wrapping_add(round.wrapping_mul(0x9E37_79B9_7F4A_7C15)))?;
            round += 1;
            drawn += batch.len();
            for v in batch {
                match repair(&v, &normalizer, &mut report) {
                    Some(rep) if out.len() < n => out.push(rep),
                    Some(_) => {}
                    None => report.redrawn += 1,
                }
            }
        }
        Ok((out, report))
    }

    /// Writes `<stem>.gen.ckpt`, `<stem>.disc.ckpt` and the `<stem>.json`
    /// sidecar into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<(), GanError> {
        self.generator.save(dir.join(format!("{stem}.gen.ckpt")))?;
        self.discriminator.save(dir.join(format!("{stem}.disc.ckpt")))?;
        let sidecar = Sidecar {
            room: self.room_label.clone(),
            config: self.config,
            data_dim: self.data_dim(),
            normalizer: self.normalizer.clone(),
            epochs_trained: self.history.len(),
            final_epoch: self.history.last().copied(),
        };
        fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&sidecar)?,
        )?;
        Ok(())
    }

    /// Loads a model written by `save`. The training history is not kept on
    /// disk beyond its final entry.
    pub fn load(dir: &Path, stem: &str) -> Result<Self, GanError> {
        let sidecar: Sidecar = serde_json::from_str(&fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
        let generator = Network::load(dir.join(format!("{stem}.gen.ckpt")))?;
        let discriminator = Network::load(dir.join(format!("{stem}.disc.ckpt")))?;
        Ok(Self {
            generator,
            discriminator,
            normalizer: sidecar.normalizer,
            room_label: sidecar.room,
            history: sidecar.final_epoch.into_iter().collect(),
            config: sidecar.config,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    room: String,
    config: GanConfig,
    data_dim: usize,
    normalizer: Option<MinMaxNormalizer>,
    epochs_trained: usize,
    final_epoch: Option<EpochStats>,
}

fn latent(rng: &mut impl Rng, rows: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, dim), || rng.sample(StandardNormal))
}

fn noise(rng: &mut impl Rng, rows: usize, dim: usize, sigma: f64) -> Array2<f64> {
    if sigma == 0.0 {
        return Array2::zeros((rows, dim));
    }
    Array2::from_shape_simple_fn((rows, dim), || sigma * rng.sample::<f64, _>(StandardNormal))
}

/// Counts of the repairs `generate` applied.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepairReport {
    /// T60 or ratio values raised to the training minimum or capped.
    pub clamped: usize,
    /// TOA slots emptied (below the floor, duplicates, or out of window).
    pub toas_dropped: usize,
    /// Vectors whose reflections had to be re-sorted.
    pub reordered: usize,
    /// Vectors whose denominator lost unstable poles.
    pub stabilized: usize,
    /// Outputs discarded as invalid even after repair.
    pub redrawn: usize,
}

/// Makes a denormalised generator output satisfy every encoding-vector
/// invariant, or returns `None`.
fn repair(v: &[f64], norm: &MinMaxNormalizer, report: &mut RepairReport) -> Option<LowDimRep> {
    if v.len() != REP_LEN || v.iter().any(|x| !x.is_finite()) {
        return None;
    }
    let mut v = v.to_vec();
    for idx in [IDX_T60, IDX_ETA1, IDX_ETA2] {
        let floor = norm.min[idx];
        let cap = if idx == IDX_T60 { MAX_T60 } else { f64::MAX };
        let fixed = if v[idx] <= 0.0 {
            if floor > 0.0 {
                floor
            } else {
                return None;
            }
        } else {
            v[idx].min(cap)
        };
        if fixed != v[idx] {
            report.clamped += 1;
            v[idx] = fixed;
        }
    }

    let mut pairs: Vec<(f64, f64)> = (0..MAX_REFLECTIONS)
        .filter_map(|k| {
            let t = v[IDX_TOA + k];
            if t >= TOA_FLOOR {
                Some((t, v[IDX_SCALE + k]))
            } else {
                if t != 0.0 {
                    report.toas_dropped += 1;
                }
                None
            }
        })
        .collect();
    if pairs.windows(2).any(|w| w[1].0 < w[0].0) {
        report.reordered += 1;
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    let before = pairs.len();
    pairs.dedup_by(|b, a| b.0 <= a.0);
    report.toas_dropped += before - pairs.len();
    let toas: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let scales: Vec<f64> = pairs.iter().map(|p| p.1).collect();

    let rep = LowDimRep::from_parts(
        v[IDX_T60],
        v[IDX_ETA1],
        v[IDX_ETA2],
        std::array::from_fn(|i| v[crate::rep::IDX_A + i]),
        std::array::from_fn(|i| v[crate::rep::IDX_B + i]),
        &toas,
        &scales,
    )
    .ok()?;
    let (rep, outcome) = stabilize_poles(&rep);
    if outcome != Stabilization::Unchanged {
        report.stabilized += 1;
    }
    Some(rep)
}

/// Removes denominator poles on or outside the unit circle (see
/// `TailModel::stabilized`); the numerator is unchanged.
pub fn stabilize_poles(rep: &LowDimRep) -> (LowDimRep, Stabilization) {
    let (tail, outcome) = rep.tail().stabilized();
    let rep = rep.with_tail(tail).expect("only the denominator changed");
    (rep, outcome)
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 1.0;
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

/// Histograms of two samples over shared bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramPair {
    pub edges: Vec<f64>,
    pub real: Vec<usize>,
    pub generated: Vec<usize>,
}

impl HistogramPair {
    /// `bins` equal-width bins over `range`, or over the pooled sample range.
    pub fn new(real: &[f64], generated: &[f64], bins: usize, range: Option<(f64, f64)>) -> Self {
        let (lo, hi) = range.unwrap_or_else(|| {
            real.iter().chain(generated).fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)))
        });
        let (lo, hi) = if lo.is_finite() && hi.is_finite() && hi > lo {
            (lo, hi)
        } else if lo.is_finite() {
            (lo - 0.5, lo + 0.5)
        } else {
            (0.0, 1.0)
        };
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|i| lo + i as f64 * width).collect();
        let count = |xs: &[f64]| {
            let mut c = vec![0; bins];
            for &x in xs {
                if (lo..=hi).contains(&x) {
                    c[(((x - lo) / width) as usize).min(bins - 1)] += 1;
                }
            }
            c
        };
        Self {
            edges,
            real: count(real),
            generated: count(generated),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterReport {
    pub name: String,
    pub ks: f64,
    pub histogram: HistogramPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionReport {
    pub real_count: usize,
    pub generated_count: usize,
    /// T60 (s), η1 (dB), η2 (dB).
    pub parameters: Vec<ParameterReport>,
    /// Frequencies (Hz) of the tail filter's numerator zeros.
    pub zero_frequencies: ParameterReport,
}

pub const REPORT_BINS: usize = 20;

/// Frequency in Hz of each numerator zero in the upper half plane.
pub fn zero_frequencies(b: &[f64], sample_rate: u32) -> Vec<f64> {
    poly::numerator_zeros(b)
        .unwrap_or_default()
        .into_iter()
        .filter(|z| z.im >= 0.0)
        .map(|z| z.arg() * sample_rate as f64 / (2.0 * std::f64::consts::PI))
        .collect()
}

/// Compares real and generated encodings parameter by parameter.
pub fn evaluate_distribution(
    real: &[LowDimRep],
    generated: &[LowDimRep],
    sample_rate: u32,
) -> Result<DistributionReport, GanError> {
    if real.is_empty() || generated.is_empty() {
        return Err(GanError::Empty);
    }
    let db = |v: f64| 10.0 * v.log10();
    let scalar = |name: &str, f: &dyn Fn(&LowDimRep) -> f64| {
        let r: Vec<f64> = real.iter().map(f).collect();
        let g: Vec<f64> = generated.iter().map(f).collect();
        ParameterReport {
            name: name.to_string(),
            ks: ks_statistic(&r, &g),
            histogram: HistogramPair::new(&r, &g, REPORT_BINS, None),
        }
    };
    let parameters = vec![
        scalar("t60_s", &|r| r.t60()),
        scalar("eta1_db", &|r| db(r.eta1())),
        scalar("eta2_db", &|r| db(r.eta2())),
    ];
    let zr: Vec<f64> = real.iter().flat_map(|r| zero_frequencies(&r.b(), sample_rate)).collect();
    let zg: Vec<f64> = generated
        .iter()
        .flat_map(|r| zero_frequencies(&r.b(), sample_rate))
        .collect();
    let zero_frequencies = ParameterReport {
        name: "zero_freq_hz".to_string(),
        ks: ks_statistic(&zr, &zg),
        histogram: HistogramPair::new(&zr, &zg, REPORT_BINS, Some((0.0, sample_rate as f64 / 2.0))),
    };
    Ok(DistributionReport {
        real_count: real.len(),
        generated_count: generated.len(),
        parameters,
        zero_frequencies,
    })
}

impl DistributionReport {
    pub fn all(&self) -> impl Iterator<Item = &ParameterReport> {
        self.parameters.iter().chain(std::iter::once(&self.zero_frequencies))
    }

    pub fn parameter(&self, name: &str) -> Option<&ParameterReport> {
        self.all().find(|p| p.name == name)
    }

    /// Long-format histogram table:
    /// `parameter,bin_low,bin_high,real,generated`.
    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("parameter,bin_low,bin_high,real,generated\n");
        for p in self.all() {
            let h = &p.histogram;
            for i in 0..h.real.len() {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    p.name,
                    h.edges[i],
                    h.edges[i + 1],
                    h.real[i],
                    h.generated[i]
                ));
            }
        }
        out
    }

    /// `parameter,ks`.
    pub fn ks_csv(&self) -> String {
        let mut out = String::from("parameter,ks\n");
        for p in self.all() {
            out.push_str(&format!("{},{}\n", p.name, p.ks));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Layer;

    #[test]
    fn lowdim_counts_match_table() {
        let m = build_lowdim_gan(&GanConfig::default());
        let g: Vec<usize> = layer_table(&m.generator).iter().map(|r| r.parameters).collect();
        assert_eq!(g, [5_376, 1_024, 65_792, 1_024, 65_792, 1_024, 43_690]);
        let d: Vec<usize> = layer_table(&m.discriminator).iter().map(|r| r.parameters).collect();
        assert_eq!(d, [43_776, 65_792, 257]);
        assert_eq!(m.parameter_counts(), (183_722, 109_825));
        assert_eq!(m.total_parameters(), 293_547);
        assert_eq!(m.data_dim(), 170);
    }

    #[test]
    fn fir_counts_match_table() {
        let m = build_fir_gan(&GanConfig::default(), FIR_TAPS);
        assert_eq!(layer_table(&m.generator).last().unwrap().parameters, 8_544_736);
        assert_eq!(layer_table(&m.discriminator)[0].parameters, 8_511_744);
        assert_eq!(m.total_parameters(), 17_262_561);
    }

    #[test]
    fn discriminator_output_is_a_probability() {
        let mut m = build_lowdim_gan(&GanConfig::default());
        let x = Array2::from_shape_fn((4, 170), |(i, j)| (i * j) as f64 * 1e3 - 5e4);
        let p = m.discriminator.forward(&x).unwrap();
        assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(matches!(m.discriminator.layers().last(), Some(Layer::Sigmoid { .. })));
    }

    #[test]
    fn normalizer_round_trip_and_constants() {
        let data = vec![vec![1.0, 5.0, -2.0], vec![3.0, 5.0, 4.0], vec![2.0, 5.0, 0.0]];
        let n = MinMaxNormalizer::fit(&data).unwrap();
        assert!(n.is_constant(1) && n.constant_dims() == 1);
        for row in &data {
            let y = n.normalize(row);
            assert!(y.iter().all(|v| (0.0..=1.0).contains(v)));
            let back = n.denormalize(&y);
            for (a, b) in back.iter().zip(row) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        assert_eq!(n.denormalize(&[0.5, 0.9, 0.5]), vec![2.0, 5.0, 1.0]);
    }

    #[test]
    fn ks_statistic_values() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(ks_statistic(&a, &a), 0.0);
        assert_eq!(ks_statistic(&a, &[10.0, 11.0]), 1.0);
        assert_eq!(ks_statistic(&[1.0, 2.0], &[1.5, 2.5]), 0.5);
    }

    #[test]
    fn zero_frequency_conversion() {
        // One conjugate zero pair at angle pi/4.
        let z = poly::Complex64::from_polar(0.9, std::f64::consts::FRAC_PI_4);
        let b = poly::from_roots(&[z, z.conj()]);
        let f = zero_frequencies(&b, 16_000);
        assert_eq!(f.len(), 1);
        assert!((f[0] - 2000.0).abs() < 1e-6);
    }

    fn toy_rep(t60: f64) -> LowDimRep {
        LowDimRep::from_parts(
            t60,
            2.0,
            3.0,
            [-0.5, 0.0, 0.0, 0.0, 0.0],
            [1.0, 0.2, 0.0, 0.0, 0.0, 0.0],
            &[10.0, 20.0],
            &[0.5, -0.2],
        )
        .unwrap()
    }

    #[test]
    fn identical_sets_have_zero_ks() {
        let reps: Vec<LowDimRep> = (0..10).map(|i| toy_rep(0.3 + 0.05 * i as f64)).collect();
        let r = evaluate_distribution(&reps, &reps, 16_000).unwrap();
        assert!(r.all().all(|p| p.ks == 0.0));
        let t60 = r.parameter("t60_s").unwrap();
        assert_eq!(t60.histogram.real, t60.histogram.generated);
        assert!(r.histogram_csv().lines().count() > 20);
        assert!(evaluate_distribution(&reps, &[], 16_000).is_err());
    }

    #[test]
    fn stabilize_poles_examples() {
        let rep = toy_rep(0.5);
        assert_eq!(stabilize_poles(&rep), (rep.clone(), Stabilization::Unchanged));
        // (1 - 1.2 z^-1)(1 - 0.5 z^-1) = 1 - 1.7 z^-1 + 0.6 z^-2
        let unstable = rep
            .with_tail(crate::rep::TailModel {
                a: [-1.7, 0.6, 0.0, 0.0, 0.0],
                ..rep.tail()
            })
            .unwrap();
        let (fixed, outcome) = stabilize_poles(&unstable);
        assert_eq!(outcome, Stabilization::Removed(1));
        let a = fixed.a();
        assert!((a[0] + 0.5).abs() < 1e-9 && a[1..].iter().all(|v| v.abs() < 1e-9));
        assert_eq!(fixed.b(), rep.b());
    }

    #[test]
    fn repair_sorts_and_drops_toas() {
        let mut v = toy_rep(0.5).into_vector();
        // Swap the two reflections and add a sub-floor slot.
        v[IDX_TOA + 76] = 20.0;
        v[IDX_TOA + 77] = 10.0;
        v[IDX_SCALE + 76] = -0.2;
        v[IDX_SCALE + 77] = 0.5;
        v[IDX_TOA + 75] = 0.2;
        v[IDX_SCALE + 75] = 0.9;
        let norm = MinMaxNormalizer {
            min: vec![0.1; REP_LEN],
            max: vec![1.0; REP_LEN],
        };
        let mut report = RepairReport::default();
        let rep = repair(&v, &norm, &mut report).unwrap();
        assert_eq!(rep.toas(), &[10.0, 20.0]);
        assert_eq!(rep.scales(), &[0.5, -0.2]);
        assert_eq!(report.reordered, 1);
        assert_eq!(report.toas_dropped, 1);
    }

    fn toy_data(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                vec![
                    0.3 + 0.05 * rng.sample::<f64, _>(StandardNormal),
                    0.7 + 0.05 * rng.sample::<f64, _>(StandardNormal),
                ]
            })
            .collect()
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = toy_data(&mut rng, 40);
        let cfg = GanConfig {
            hidden: 16,
            epochs: 5,
            batch_size: 8,
            seed: 3,
            ..GanConfig::default()
        };
        let mut a = build_gan(&cfg, 2);
        let mut b = build_gan(&cfg, 2);
        a.train(&data).unwrap();
        b.train(&data).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.sample(5, 9).unwrap(), b.sample(5, 9).unwrap());
        assert!(matches!(
            build_gan(&cfg, 2).train(&data[..4]),
            Err(GanError::InsufficientData { .. })
        ));
    }

    #[test]
    fn discriminator_separates_real_from_frozen_generator() {
        // Real points near two opposite corners, generated points pinned at
        // the centre by zeroing the generator's output layer.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<Vec<f64>> = (0..64)
            .map(|i| {
                let c = (i % 2) as f64;
                let e: f64 = 0.05 * rng.sample::<f64, _>(StandardNormal);
                vec![c + e, 1.0 - c + e]
            })
            .collect();
        let cfg = GanConfig {
            hidden: 32,
            epochs: 200,
            batch_size: 16,
            instance_noise_sigma: 0.0,
            lr: 1e-3,
            seed: 4,
            ..GanConfig::default()
        };
        let mut m = build_gan(&cfg, 2);
        if let Some(Layer::Dense(d)) = m.generator.layers_mut().iter_mut().rev().nth(1) {
            d.weights.fill(0.0);
        }
        let g0 = m.generator.clone();
        let mut acc = 0.0;
        // Restoring the generator after every epoch keeps it frozen.
        for _ in 0..cfg.epochs {
            m.generator = g0.clone();
            let c = GanConfig { epochs: 1, ..cfg };
            m.config = c;
            m.train_with(&data, |_, s| acc = s.d_accuracy).unwrap();
        }
        assert!(acc > 0.9, "accuracy {acc}");
    }

    #[test]
    fn save_and_load_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = toy_data(&mut rng, 20);
        let cfg = GanConfig {
            hidden: 8,
            epochs: 2,
            batch_size: 10,
            ..GanConfig::default()
        };
        let mut m = build_gan(&cfg, 2);
        m.room_label = "toy".into();
        m.train(&data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path(), "toy").unwrap();
        let mut back = GanModel::load(dir.path(), "toy").unwrap();
        assert_eq!(back.room_label, "toy");
        assert_eq!(back.normalizer, m.normalizer);
        assert_eq!(back.generator.to_bytes(), m.generator.to_bytes());
        let (a, b) = (m.sample(3, 1).unwrap(), back.sample(3, 1).unwrap());
        for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
            assert!((x - y).abs() < 1e-5);
        }
    }
}
