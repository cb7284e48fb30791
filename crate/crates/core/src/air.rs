//! Sampled acoustic impulse responses, WAV I/O, resampling and the dataset
//! manifest.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

/// Sample rate every dataset AIR is brought to.
pub const DATASET_SAMPLE_RATE: u32 = 16_000;
/// 2.1 s at 16 kHz.
pub const DATASET_LENGTH: usize = 33_600;

#[derive(Debug, Error)]
pub enum AirError {
    #[error("cannot read {path}: {source}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
    #[error("cannot write {path}: {source}")]
    Unwritable {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
    #[error("multi-channel unsupported: {path} has {channels} channels")]
    MultiChannel { path: PathBuf, channels: u16 },
    #[error("unsupported encoding in {path}: {detail}")]
    UnsupportedEncoding { path: PathBuf, detail: String },
    #[error("impulse response has no taps")]
    Empty,
    #[error("tap {index} is not finite")]
    NonFinite { index: usize },
    #[error("sample rate must be positive")]
    ZeroSampleRate,
    #[error("upsampling requested: {from} Hz -> {to} Hz")]
    Upsampling { from: u32, to: u32 },
    #[error("cannot pad {current} taps down to {requested}")]
    PadShorter { current: usize, requested: usize },
}

/// A sampled impulse response.
#[derive(Debug, Clone, PartialEq)]
pub struct AirSignal {
    taps: Vec<f64>,
    sample_rate: u32,
    pub room_label: Option<String>,
    pub source_id: Option<String>,
}

impl AirSignal {
    pub fn new(taps: Vec<f64>, sample_rate: u32) -> Result<Self, AirError> {
        if taps.is_empty() {
            return Err(AirError::Empty);
        }
        if let Some(index) = taps.iter().position(|t| !t.is_finite()) {
            return Err(AirError::NonFinite { index });
        }
        if sample_rate == 0 {
            return Err(AirError::ZeroSampleRate);
        }
        Ok(Self {
            taps,
            sample_rate,
            room_label: None,
            source_id: None,
        })
    }

    pub fn with_labels(mut self, room: Option<String>, source: Option<String>) -> Self {
        self.room_label = room;
        self.source_id = source;
        self
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn into_taps(self) -> Vec<f64> {
        self.taps
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.taps.iter().map(|t| t * t).sum()
    }

    pub fn duration_s(&self) -> f64 {
        self.taps.len() as f64 / self.sample_rate as f64
    }

    fn same_labels(&self, taps: Vec<f64>, sample_rate: u32) -> Self {
        Self {
            taps,
            sample_rate,
            room_label: self.room_label.clone(),
            source_id: self.source_id.clone(),
        }
    }
}

/// Reads a mono PCM16 or 32-bit float WAV file.
pub fn load_air(path: impl AsRef<Path>) -> Result<AirSignal, AirError> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|source| AirError::Unreadable {
        path: path.to_owned(),
        source,
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(AirError::MultiChannel {
            path: path.to_owned(),
            channels: spec.channels,
        });
    }
    let unreadable = |source| AirError::Unreadable {
        path: path.to_owned(),
        source,
    };
    let taps: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(unreadable)?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<Result<_, _>>()
            .map_err(unreadable)?,
        (format, bits) => {
            return Err(AirError::UnsupportedEncoding {
                path: path.to_owned(),
                detail: format!("{format:?} with {bits} bits per sample"),
            })
        }
    };
    AirSignal::new(taps, spec.sample_rate)
}

/// Writes a mono 32-bit float WAV file. Taps are rounded to `f32`.
pub fn save_air(air: &AirSignal, path: impl AsRef<Path>) -> Result<(), AirError> {
    let path = path.as_ref();
    if air.taps.is_empty() {
        return Err(AirError::Empty);
    }
    if let Some(index) = air.taps.iter().position(|t| !t.is_finite()) {
        return Err(AirError::NonFinite { index });
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: air.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let unwritable = |source| AirError::Unwritable {
        path: path.to_owned(),
        source,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(unwritable)?;
    for &t in &air.taps {
        writer.write_sample(t as f32).map_err(unwritable)?;
    }
    writer.finalize().map_err(unwritable)
}

const RESAMPLE_HALF_ZEROS: f64 = 24.0;
const RESAMPLE_ROLLOFF: f64 = 0.95;

/// Windowed-sinc downsampling to `target_rate`.
pub fn resample(air: &AirSignal, target_rate: u32) -> Result<AirSignal, AirError> {
    let source_rate = air.sample_rate;
    if target_rate == 0 {
        return Err(AirError::ZeroSampleRate);
    }
    if target_rate > source_rate {
        return Err(AirError::Upsampling {
            from: source_rate,
            to: target_rate,
        });
    }
    if target_rate == source_rate {
        return Ok(air.clone());
    }

    let ratio = target_rate as f64 / source_rate as f64;
    let out_len = ((air.len() as f64 * ratio).round() as usize).max(1);
    // Cutoff in cycles per source sample, below the target Nyquist.
    let cutoff = 0.5 * ratio * RESAMPLE_ROLLOFF;
    let half_width = RESAMPLE_HALF_ZEROS / (2.0 * cutoff);
    let taps = &air.taps;

    let out: Vec<f64> = (0..out_len)
        .map(|m| {
            let centre = m as f64 / ratio;
            let lo = (centre - half_width).ceil().max(0.0) as usize;
            let hi = ((centre + half_width).floor() as usize).min(taps.len() - 1);
            let mut acc = 0.0;
            for (k, &x) in taps.iter().enumerate().take(hi + 1).skip(lo) {
                let t = k as f64 - centre;
                let window = 0.5 * (1.0 + (PI * t / half_width).cos());
                acc += x * 2.0 * cutoff * sinc(2.0 * cutoff * t) * window;
            }
            acc
        })
        .collect();
    Ok(air.same_labels(out, target_rate))
}

/// Normalised sinc, `sin(pi x) / (pi x)`.
pub fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Appends zeros up to `length` taps.
pub fn pad_to(air: &AirSignal, length: usize) -> Result<AirSignal, AirError> {
    if length < air.len() {
        return Err(AirError::PadShorter {
            current: air.len(),
            requested: length,
        });
    }
    let mut taps = air.taps.clone();
    taps.resize(length, 0.0);
    Ok(air.same_labels(taps, air.sample_rate))
}

/// Loads a WAV, downsamples it to 16 kHz and pads it to 2.1 s.
pub fn load_dataset_air(path: impl AsRef<Path>) -> Result<AirSignal, AirError> {
    let air = load_air(path)?;
    let air = resample(&air, DATASET_SAMPLE_RATE)?;
    pad_to(&air, DATASET_LENGTH)
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("cannot read manifest {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest header must be `path,room,meta`, found `{0}`")]
    Header(String),
    #[error("manifest line {line}: {detail}")]
    Line { line: usize, detail: String },
    #[error("duplicate path in manifest: {0}")]
    DuplicatePath(PathBuf),
    #[error("manifest has no entries")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub room: String,
    pub meta: String,
}

/// Contents of a `manifest.csv` (`path,room,meta`).
///
/// Relative paths are resolved against the manifest's directory when loaded
/// from disk. The `meta` column is everything after the second comma.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    entries: Vec<ManifestEntry>,
    rooms: Vec<String>,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self, ManifestError> {
        if entries.is_empty() {
            return Err(ManifestError::Empty);
        }
        let mut seen = HashSet::new();
        let mut rooms: Vec<String> = Vec::new();
        for entry in &entries {
            if !seen.insert(entry.path.clone()) {
                return Err(ManifestError::DuplicatePath(entry.path.clone()));
            }
            if !rooms.contains(&entry.room) {
                rooms.push(entry.room.clone());
            }
        }
        Ok(Self { entries, rooms })
    }

    pub fn parse(text: &str, base_dir: Option<&Path>) -> Result<Self, ManifestError> {
        let mut lines = text.lines().enumerate();
        let header = lines
            .by_ref()
            .find(|(_, l)| !l.trim().is_empty())
            .map(|(_, l)| l.trim().to_owned())
            .ok_or(ManifestError::Empty)?;
        if header != "path,room,meta" {
            return Err(ManifestError::Header(header));
        }
        let mut entries = Vec::new();
        for (idx, line) in lines {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.splitn(3, ',');
            let path = fields.next().unwrap_or("").trim();
            let room = fields.next().map(str::trim).ok_or_else(|| ManifestError::Line {
                line: idx + 1,
                detail: "missing room column".into(),
            })?;
            let meta = fields.next().unwrap_or("").trim();
            if path.is_empty() || room.is_empty() {
                return Err(ManifestError::Line {
                    line: idx + 1,
                    detail: "empty path or room".into(),
                });
            }
            let path = PathBuf::from(path);
            let path = match base_dir {
                Some(base) if path.is_relative() => base.join(path),
                _ => path,
            };
            entries.push(ManifestEntry {
                path,
                room: room.to_owned(),
                meta: meta.to_owned(),
            });
        }
        Self::new(entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ManifestError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ManifestError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::parse(&text, path.parent())
    }

    pub fn to_csv(&self) -> String {
        self.render(None)
    }

    /// Like `to_csv`, with paths under `base` written relative to it.
    pub fn to_csv_relative(&self, base: &Path) -> String {
        self.render(Some(base))
    }

    fn render(&self, base: Option<&Path>) -> String {
        let mut out = String::from("path,room,meta\n");
        for e in &self.entries {
            let path = base
                .and_then(|b| e.path.strip_prefix(b).ok())
                .unwrap_or(&e.path);
            out.push_str(&format!("{},{},{}\n", path.display(), e.room, e.meta));
        }
        out
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn rooms(&self) -> &[String] {
        &self.rooms
    }

    pub fn entries_for<'a>(&'a self, room: &'a str) -> impl Iterator<Item = &'a ManifestEntry> {
        self.entries.iter().filter(move |e| e.room == room)
    }
}
