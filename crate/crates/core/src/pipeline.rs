//! Per-room encode → train → generate → stats pipeline over a dataset
//! manifest. Every stage reads and writes plain files under one output
//! directory:
//!
//! ```text
//! effective_config.toml
//! reps/<room>/<stem>.rep.csv      banks/<room>.bank      encode_summary.csv
//! models/<room>.{gen.ckpt,disc.ckpt,json}   models/<room>_history.csv
//! generated/<room>/gen_<i>.{rep.csv,wav}    generate_summary.csv
//! stats/<room>_{ks,hist}.csv  stats/<room>.json   stats/rollup.csv
//! ```

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::air::{load_air, load_dataset_air, save_air, AirError, DatasetManifest, ManifestError};
use crate::bank::{BankError, ExcitationBank};
use crate::estimation::{build_excitation_bank, encode, EncodeError, EstimationError, DEFAULT_WINDOW_LEN};
use crate::gan::{build_lowdim_gan, evaluate_distribution, GanConfig, GanError, GanModel, RepairReport};
use crate::rep::{LowDimRep, RepError};
use crate::synthesis::{decode, SynthError, SynthesisConfig};

/// Replacement draws allowed per generated AIR whose decode fails.
pub const MAX_DECODE_RETRIES: usize = 50;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("invalid run config: {0}")]
    Config(String),
    #[error("room `{0}` is not in the manifest")]
    UnknownRoom(String),
    #[error("no encodings for room `{0}`; run encode first")]
    MissingReps(String),
    #[error("no trained model for room `{0}`; run train first")]
    MissingModel(String),
    #[error("no generated encodings for room `{0}`; run generate first")]
    MissingGenerated(String),
    #[error("room `{room}`: cannot build excitation bank: {source}")]
    Bank {
        room: String,
        #[source]
        source: EstimationError,
    },
    #[error("room `{room}`: {source}")]
    Gan {
        room: String,
        #[source]
        source: GanError,
    },
    #[error("room `{room}`: no decodable AIR after {attempts} draws for sample {index}: {last}")]
    Decode {
        room: String,
        index: usize,
        attempts: usize,
        last: SynthError,
    },
    #[error("{path}: {detail}")]
    Validation { path: PathBuf, detail: String },
    #[error("{failed} of {total} AIRs failed to encode")]
    EncodeFailures { failed: usize, total: usize },
    #[error(transparent)]
    Air(#[from] AirError),
    #[error(transparent)]
    BankFile(#[from] BankError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config file: {0}")]
    Toml(String),
    #[error("worker pool: {0}")]
    Pool(String),
}

type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageName {
    Encode,
    Train,
    Generate,
    Stats,
}

impl StageName {
    pub const ALL: [StageName; 4] = [Self::Encode, Self::Train, Self::Generate, Self::Stats];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub out: PathBuf,
    /// Empty means every room in the manifest.
    pub rooms: Vec<String>,
    /// Generated AIRs per room.
    pub count: usize,
    pub seed: u64,
    /// Worker threads; 0 uses the rayon default.
    pub jobs: usize,
    pub window_len: usize,
    pub stages: Vec<StageName>,
    pub synthesis: SynthesisConfig,
    pub gan: GanConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("manifest.csv"),
            out: PathBuf::from("out"),
            rooms: Vec::new(),
            count: 100,
            seed: 0,
            jobs: 0,
            window_len: DEFAULT_WINDOW_LEN,
            stages: StageName::ALL.to_vec(),
            synthesis: SynthesisConfig::default(),
            gan: GanConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| PipelineError::Toml(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&read(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.count == 0 {
            return bad("count must be positive");
        }
        if self.window_len == 0 || self.window_len.is_multiple_of(2) {
            return bad("window_len must be odd and positive");
        }
        if self.gan.epochs == 0 || self.gan.batch_size < 2 {
            return bad("epochs must be positive and batch_size at least 2");
        }
        if !(self.gan.instance_noise_sigma >= 0.0) {
            return bad("instance_noise_sigma must be non-negative");
        }
        if self.synthesis.length == 0 || self.synthesis.sample_rate == 0 {
            return bad("synthesis length and sample rate must be positive");
        }
        if !self.manifest.is_file() {
            return Err(PipelineError::Config(format!(
                "manifest {} does not exist",
                self.manifest.display()
            )));
        }
        Ok(())
    }

    pub fn reps_dir(&self, room: &str) -> PathBuf {
        self.out.join("reps").join(room)
    }

    pub fn bank_path(&self, room: &str) -> PathBuf {
        self.out.join("banks").join(format!("{room}.bank"))
    }

    pub fn models_dir(&self) -> PathBuf {
        self.out.join("models")
    }

    pub fn generated_dir(&self, room: &str) -> PathBuf {
        self.out.join("generated").join(room)
    }

    pub fn stats_dir(&self) -> PathBuf {
        self.out.join("stats")
    }

    /// Seed for everything random in one room: the run seed mixed with a
    /// stable hash of the room name, so results do not depend on which rooms
    /// run or in what order.
    pub fn room_seed(&self, room: &str) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in room.bytes() {
            h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
        }
        splitmix(self.seed ^ h)
    }

    fn room_gan_config(&self, room: &str) -> GanConfig {
        GanConfig {
            seed: self.room_seed(room),
            ..self.gan
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        mkdir(dir)?;
    }
    fs::write(path, contents).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| PipelineError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

/// Loaded manifest restricted to the configured rooms.
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub rooms: Vec<String>,
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let manifest = DatasetManifest::load(&cfg.manifest)?;
    let rooms = select_rooms(cfg, manifest.rooms())?;
    Ok(Dataset { manifest, rooms })
}

fn select_rooms(cfg: &RunConfig, available: &[String]) -> Result<Vec<String>> {
    if cfg.rooms.is_empty() {
        return Ok(available.to_vec());
    }
    let known: HashSet<&String> = available.iter().collect();
    for r in &cfg.rooms {
        if !known.contains(r) {
            return Err(PipelineError::UnknownRoom(r.clone()));
        }
    }
    Ok(cfg.rooms.clone())
}

/// Runs `f` on every room inside a pool capped at `cfg.jobs` threads.
/// Results come back in room order.
fn per_room<T: Send>(
    cfg: &RunConfig,
    rooms: &[String],
    f: impl Fn(&str) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| PipelineError::Pool(e.to_string()))?;
    pool.install(|| rooms.par_iter().map(|r| f(r)).collect())
}

fn echo_config(cfg: &RunConfig) -> Result<()> {
    write(&cfg.out.join("effective_config.toml"), cfg.to_toml())
}

// ---------------------------------------------------------------- encode

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodeRoomSummary {
    pub room: String,
    pub count: usize,
    pub failed: usize,
    pub t60_mean: f64,
    pub t60_std: f64,
    pub mean_reflections: f64,
    pub bank_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodeFailure {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct EncodeReport {
    pub rooms: Vec<EncodeRoomSummary>,
    pub failures: Vec<EncodeFailure>,
}

impl EncodeReport {
    pub fn encoded(&self) -> usize {
        self.rooms.iter().map(|r| r.count).sum()
    }
}

/// Encodes every AIR of the selected rooms and builds one excitation bank
/// per room. Per-file failures are logged and collected; the stage itself
/// fails only when a room cannot produce a bank.
pub fn run_encode(cfg: &RunConfig) -> Result<EncodeReport> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    echo_config(cfg)?;
    let results = per_room(cfg, &data.rooms, |room| encode_room(cfg, &data.manifest, room))?;
    let mut report = EncodeReport::default();
    let mut csv = String::from("room,count,failed,t60_mean,t60_std,mean_reflections,bank_size\n");
    for (summary, failures) in results {
        writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            summary.room,
            summary.count,
            summary.failed,
            summary.t60_mean,
            summary.t60_std,
            summary.mean_reflections,
            summary.bank_size
        )
        .unwrap();
        report.rooms.push(summary);
        report.failures.extend(failures);
    }
    write(&cfg.out.join("encode_summary.csv"), csv)?;
    Ok(report)
}

fn encode_room(
    cfg: &RunConfig,
    manifest: &DatasetManifest,
    room: &str,
) -> Result<(EncodeRoomSummary, Vec<EncodeFailure>)> {
    let dir = cfg.reps_dir(room);
    mkdir(&dir)?;
    let mut airs = Vec::new();
    let mut reps = Vec::new();
    let mut failures = Vec::new();
    for entry in manifest.entries_for(room) {
        let fail = |reason: String| {
            warn!("{}: {reason}", entry.path.display());
            EncodeFailure {
                path: entry.path.clone(),
                reason,
            }
        };
        let air = match load_dataset_air(&entry.path) {
            Ok(a) => a,
            Err(e) => {
                failures.push(fail(e.to_string()));
                continue;
            }
        };
        match encode(&air, cfg.window_len) {
            Ok(enc) => {
                let stem = file_stem(&entry.path);
                write(&dir.join(format!("{stem}.rep.csv")), enc.rep.to_csv_row() + "\n")?;
                reps.push(enc.rep);
                airs.push(air);
            }
            Err(e @ EncodeError { .. }) => failures.push(fail(e.to_string())),
        }
    }
    let bank = build_excitation_bank(&airs, cfg.window_len).map_err(|source| PipelineError::Bank {
        room: room.to_string(),
        source,
    })?;
    let bank_path = cfg.bank_path(room);
    mkdir(bank_path.parent().expect("bank path has a parent"))?;
    bank.save(&bank_path)?;
    let t60: Vec<f64> = reps.iter().map(LowDimRep::t60).collect();
    let (t60_mean, t60_std) = mean_std(&t60);
    let mean_reflections =
        reps.iter().map(|r| r.d_count() as f64).sum::<f64>() / reps.len().max(1) as f64;
    info!("encode {room}: {} reps, {} failures", reps.len(), failures.len());
    Ok((
        EncodeRoomSummary {
            room: room.to_string(),
            count: reps.len(),
            failed: failures.len(),
            t60_mean,
            t60_std,
            mean_reflections,
            bank_size: bank.len(),
        },
        failures,
    ))
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "air".to_string())
}

fn mean_std(x: &[f64]) -> (f64, f64) {
    if x.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = x.iter().sum::<f64>() / x.len() as f64;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64;
    (m, v.sqrt())
}

/// Reads every `*.rep.csv` in `dir`, sorted by file name, validating each.
pub fn read_reps(dir: &Path) -> Result<Vec<(PathBuf, LowDimRep)>> {
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(source) => {
            return Err(PipelineError::Io {
                path: dir.to_path_buf(),
                source,
            })
        }
    };
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".rep.csv"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let rep = read(&p)?
                .parse::<LowDimRep>()
                .map_err(|e: RepError| PipelineError::Validation {
                    path: p.clone(),
                    detail: e.to_string(),
                })?;
            Ok((p, rep))
        })
        .collect()
}

// ----------------------------------------------------------------- train

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRoomSummary {
    pub room: String,
    pub samples: usize,
    pub epochs: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    pub d_accuracy: f64,
    /// True when an up-to-date checkpoint was found and training skipped.
    pub resumed: bool,
}

/// Trains one GAN per room on its encodings. A room whose checkpoint was
/// written with the same GAN configuration is skipped.
pub fn run_train(cfg: &RunConfig) -> Result<Vec<TrainRoomSummary>> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    echo_config(cfg)?;
    mkdir(&cfg.models_dir())?;
    per_room(cfg, &data.rooms, |room| train_room(cfg, room))
}

fn train_room(cfg: &RunConfig, room: &str) -> Result<TrainRoomSummary> {
    let reps = read_reps(&cfg.reps_dir(room))?;
    if reps.is_empty() {
        return Err(PipelineError::MissingReps(room.to_string()));
    }
    let gan_cfg = cfg.room_gan_config(room);
    let models = cfg.models_dir();
    let gan_err = |source| PipelineError::Gan {
        room: room.to_string(),
        source,
    };
    if let Ok(existing) = GanModel::load(&models, room) {
        if existing.config == gan_cfg && existing.normalizer.is_some() {
            if let Some(last) = existing.history.last() {
                info!("train {room}: checkpoint up to date, skipping");
                return Ok(TrainRoomSummary {
                    room: room.to_string(),
                    samples: reps.len(),
                    epochs: gan_cfg.epochs,
                    d_loss: last.d_loss,
                    g_loss: last.g_loss,
                    d_accuracy: last.d_accuracy,
                    resumed: true,
                });
            }
        }
    }
    let vectors: Vec<Vec<f64>> = reps.iter().map(|(_, r)| r.as_slice().to_vec()).collect();
    let mut model = build_lowdim_gan(&gan_cfg);
    model.room_label = room.to_string();
    model.train(&vectors).map_err(gan_err)?;
    let mut csv = String::from("epoch,d_loss,g_loss,d_accuracy\n");
    for (i, h) in model.history.iter().enumerate() {
        writeln!(csv, "{i},{},{},{}", h.d_loss, h.g_loss, h.d_accuracy).unwrap();
    }
    write(&models.join(format!("{room}_history.csv")), csv)?;
    model.save(&models, room).map_err(gan_err)?;
    let last = *model.history.last().expect("at least one epoch");
    info!(
        "train {room}: d_loss {:.4} g_loss {:.4} d_acc {:.3}",
        last.d_loss, last.g_loss, last.d_accuracy
    );
    Ok(TrainRoomSummary {
        room: room.to_string(),
        samples: reps.len(),
        epochs: gan_cfg.epochs,
        d_loss: last.d_loss,
        g_loss: last.g_loss,
        d_accuracy: last.d_accuracy,
        resumed: false,
    })
}

// -------------------------------------------------------------- generate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRoomSummary {
    pub room: String,
    pub count: usize,
    pub repairs: RepairReport,
    /// Vectors replaced because decoding them failed.
    pub decode_retries: usize,
}

/// Draws `cfg.count` encodings per room, decodes each with a seeded bank
/// excitation, writes `gen_<i>.rep.csv` and `gen_<i>.wav`, and re-reads
/// both to validate them.
pub fn run_generate(cfg: &RunConfig) -> Result<Vec<GenerateRoomSummary>> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    echo_config(cfg)?;
    let summaries = per_room(cfg, &data.rooms, |room| generate_room(cfg, room))?;
    let mut csv = String::from("room,count,clamped,toas_dropped,reordered,stabilized,redrawn,decode_retries\n");
    for s in &summaries {
        let r = &s.repairs;
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            s.room, s.count, r.clamped, r.toas_dropped, r.reordered, r.stabilized, r.redrawn, s.decode_retries
        )
        .unwrap();
    }
    write(&cfg.out.join("generate_summary.csv"), csv)?;
    Ok(summaries)
}

fn generate_room(cfg: &RunConfig, room: &str) -> Result<GenerateRoomSummary> {
    let models = cfg.models_dir();
    if !models.join(format!("{room}.json")).is_file() {
        return Err(PipelineError::MissingModel(room.to_string()));
    }
    let gan_err = |source| PipelineError::Gan {
        room: room.to_string(),
        source,
    };
    let mut model = GanModel::load(&models, room).map_err(gan_err)?;
    let bank = ExcitationBank::load(cfg.bank_path(room))?;
    let dir = cfg.generated_dir(room);
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|source| PipelineError::Io {
            path: dir.clone(),
            source,
        })?;
    }
    mkdir(&dir)?;

    let seed = cfg.room_seed(room);
    let (mut reps, mut repairs) = model.generate(cfg.count, seed).map_err(gan_err)?;
    let mut decode_retries = 0;
    for (i, rep) in reps.iter_mut().enumerate() {
        let mut attempt = 0;
        let air = loop {
            let syn = SynthesisConfig {
                seed: splitmix(seed ^ splitmix(i as u64) ^ attempt as u64),
                ..cfg.synthesis
            };
            let last = match decode(rep, &bank, &syn) {
                Ok(a) => break a.air,
                Err(e) => e,
            };
            attempt += 1;
            decode_retries += 1;
            if attempt > MAX_DECODE_RETRIES {
                return Err(PipelineError::Decode {
                    room: room.to_string(),
                    index: i,
                    attempts: attempt,
                    last,
                });
            }
            warn!("{room} gen_{i}: {last}; drawing a replacement");
            let redraw_seed = splitmix(seed ^ 0x5eed ^ ((i as u64) << 20) ^ attempt as u64);
            let (fresh, extra) = model.generate(1, redraw_seed).map_err(gan_err)?;
            add_repairs(&mut repairs, &extra);
            *rep = fresh.into_iter().next().expect("one vector");
        };
        let rep_path = dir.join(format!("gen_{i}.rep.csv"));
        let wav_path = dir.join(format!("gen_{i}.wav"));
        write(&rep_path, rep.to_csv_row() + "\n")?;
        save_air(&air, &wav_path)?;
        revalidate(cfg, &rep_path, &wav_path)?;
    }
    info!("generate {room}: {} AIRs, {decode_retries} decode retries", reps.len());
    Ok(GenerateRoomSummary {
        room: room.to_string(),
        count: reps.len(),
        repairs,
        decode_retries,
    })
}

fn add_repairs(total: &mut RepairReport, more: &RepairReport) {
    total.clamped += more.clamped;
    total.toas_dropped += more.toas_dropped;
    total.reordered += more.reordered;
    total.stabilized += more.stabilized;
    total.redrawn += more.redrawn;
}

fn revalidate(cfg: &RunConfig, rep_path: &Path, wav_path: &Path) -> Result<()> {
    let invalid = |path: &Path, detail: String| PipelineError::Validation {
        path: path.to_path_buf(),
        detail,
    };
    let rep: LowDimRep = read(rep_path)?
        .parse()
        .map_err(|e: RepError| invalid(rep_path, e.to_string()))?;
    if !rep.tail().is_stable() {
        return Err(invalid(rep_path, "tail filter is unstable".into()));
    }
    let air = load_air(wav_path).map_err(|e| invalid(wav_path, e.to_string()))?;
    if air.len() != cfg.synthesis.length || air.sample_rate() != cfg.synthesis.sample_rate {
        return Err(invalid(
            wav_path,
            format!("{} samples at {} Hz", air.len(), air.sample_rate()),
        ));
    }
    Ok(())
}

// ----------------------------------------------------------------- stats

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsRoomSummary {
    pub room: String,
    pub real: usize,
    pub generated: usize,
    /// `(parameter, KS statistic)` pairs.
    pub ks: Vec<(String, f64)>,
}

/// Compares real and generated encodings per room and writes a roll-up.
pub fn run_stats(cfg: &RunConfig) -> Result<Vec<StatsRoomSummary>> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    echo_config(cfg)?;
    let summaries = per_room(cfg, &data.rooms, |room| stats_room(cfg, room))?;
    let mut csv = String::from("room,real,generated");
    if let Some(first) = summaries.first() {
        for (name, _) in &first.ks {
            write!(csv, ",ks_{name}").unwrap();
        }
    }
    csv.push('\n');
    for s in &summaries {
        write!(csv, "{},{},{}", s.room, s.real, s.generated).unwrap();
        for (_, ks) in &s.ks {
            write!(csv, ",{ks}").unwrap();
        }
        csv.push('\n');
    }
    write(&cfg.stats_dir().join("rollup.csv"), csv)?;
    Ok(summaries)
}

fn stats_room(cfg: &RunConfig, room: &str) -> Result<StatsRoomSummary> {
    let real: Vec<LowDimRep> = read_reps(&cfg.reps_dir(room))?.into_iter().map(|(_, r)| r).collect();
    if real.is_empty() {
        return Err(PipelineError::MissingReps(room.to_string()));
    }
    let generated: Vec<LowDimRep> = read_reps(&cfg.generated_dir(room))?
        .into_iter()
        .map(|(_, r)| r)
        .collect();
    if generated.is_empty() {
        return Err(PipelineError::MissingGenerated(room.to_string()));
    }
    let report = evaluate_distribution(&real, &generated, cfg.synthesis.sample_rate).map_err(|source| {
        PipelineError::Gan {
            room: room.to_string(),
            source,
        }
    })?;
    let dir = cfg.stats_dir();
    write(&dir.join(format!("{room}_ks.csv")), report.ks_csv())?;
    write(&dir.join(format!("{room}_hist.csv")), report.histogram_csv())?;
    write(&dir.join(format!("{room}.json")), report.to_json())?;
    Ok(StatsRoomSummary {
        room: room.to_string(),
        real: real.len(),
        generated: generated.len(),
        ks: report.all().map(|p| (p.name.clone(), p.ks)).collect(),
    })
}

// -------------------------------------------------------------- pipeline

#[derive(Debug, Clone, Default)]
pub struct PipelineReport {
    pub encode: Option<EncodeReport>,
    pub train: Vec<TrainRoomSummary>,
    pub generate: Vec<GenerateRoomSummary>,
    pub stats: Vec<StatsRoomSummary>,
}

/// Runs the configured stages in order. Encode failures on individual files
/// do not stop later stages; they are returned as an error at the end.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineReport> {
    let mut report = PipelineReport::default();
    let wants = |s| cfg.stages.contains(&s);
    if wants(StageName::Encode) {
        report.encode = Some(run_encode(cfg)?);
    }
    if wants(StageName::Train) {
        report.train = run_train(cfg)?;
    }
    if wants(StageName::Generate) {
        report.generate = run_generate(cfg)?;
    }
    if wants(StageName::Stats) {
        report.stats = run_stats(cfg)?;
    }
    if let Some(enc) = &report.encode {
        if !enc.failures.is_empty() {
            return Err(PipelineError::EncodeFailures {
                failed: enc.failures.len(),
                total: enc.failures.len() + enc.encoded(),
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn room_seeds_are_stable_and_distinct() {
        let cfg = RunConfig {
            seed: 7,
            ..RunConfig::default()
        };
        assert_eq!(cfg.room_seed("lobby"), cfg.room_seed("lobby"));
        assert_ne!(cfg.room_seed("lobby"), cfg.room_seed("office_a"));
        let other = RunConfig {
            seed: 8,
            ..RunConfig::default()
        };
        assert_ne!(cfg.room_seed("lobby"), other.room_seed("lobby"));
    }

    #[test]
    fn config_toml_round_trip_and_partial_tables() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let partial = RunConfig::from_toml("count = 5\n[gan]\nepochs = 3\n[synthesis]\nmix_mode = \"verbatim\"\n").unwrap();
        assert_eq!(partial.count, 5);
        assert_eq!(partial.gan.epochs, 3);
        assert_eq!(partial.gan.latent_dim, 20);
        assert_eq!(partial.synthesis.mix_mode, crate::synthesis::MixMode::Verbatim);
        assert!(RunConfig::from_toml("count = \"x\"").is_err());
    }

    #[test]
    fn validation_rejects_bad_values() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("manifest.csv");
        fs::write(&manifest, "path,room,meta\na.wav,r,\n").unwrap();
        let ok = RunConfig {
            manifest,
            ..RunConfig::default()
        };
        ok.validate().unwrap();
        for bad in [
            RunConfig { count: 0, ..ok.clone() },
            RunConfig { window_len: 16, ..ok.clone() },
            RunConfig {
                manifest: dir.path().join("missing.csv"),
                ..ok.clone()
            },
        ] {
            assert!(matches!(bad.validate(), Err(PipelineError::Config(_))));
        }
        assert!(matches!(
            select_rooms(&RunConfig { rooms: vec!["x".into()], ..ok.clone() }, &["r".into()]),
            Err(PipelineError::UnknownRoom(_))
        ));
    }
}
