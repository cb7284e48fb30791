use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{error, info};

use airgan::air::{save_air, DATASET_LENGTH};
use airgan::bank::ExcitationBank;
use airgan::pipeline::{self, PipelineError, RunConfig, StageName};
use airgan::rep::LowDimRep;
use airgan::synthesis::{decode, MixMode};
use airgan::synthetic::{write_corpus, RoomProfile};

/// Parametric AIR encoding and per-room GAN augmentation.
#[derive(Parser)]
#[command(name = "airgan", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encode every AIR in the manifest and build per-room excitation banks.
    Encode(RunArgs),
    /// Train one GAN per room on its encodings.
    Train(RunArgs),
    /// Generate and decode new AIRs from the trained GANs.
    Generate(RunArgs),
    /// Compare generated and real parameter distributions.
    Stats(RunArgs),
    /// Run encode, train, generate and stats in order.
    Pipeline(RunArgs),
    /// Decode one `.rep.csv` into a WAV.
    Decode(DecodeArgs),
    /// Write a synthetic multi-room corpus with a manifest.
    Corpus(CorpusArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML run config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated subset of rooms.
    #[arg(long, value_delimiter = ',')]
    rooms: Option<Vec<String>>,
    /// Generated AIRs per room.
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    mix_mode: Option<MixMode>,
    /// Worker threads across rooms (0 = all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.manifest {
            cfg.manifest = v.clone();
        }
        if let Some(v) = &self.out {
            cfg.out = v.clone();
        }
        if let Some(v) = &self.rooms {
            cfg.rooms = v.clone();
        }
        if let Some(v) = self.count {
            cfg.count = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.epochs {
            cfg.gan.epochs = v;
        }
        if let Some(v) = self.mix_mode {
            cfg.synthesis.mix_mode = v;
        }
        if let Some(v) = self.jobs {
            cfg.jobs = v;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    rep: PathBuf,
    #[arg(long)]
    bank: PathBuf,
    /// Output WAV path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "continuous")]
    mix_mode: MixMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output length in seconds.
    #[arg(long)]
    length_s: Option<f64>,
}

#[derive(Args)]
struct CorpusArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 94)]
    per_room: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `presets` (seven varied rooms) or `clean` (three easy-to-encode rooms).
    #[arg(long, default_value = "presets")]
    profile: String,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Encode(a) => {
            let cfg = a.config()?;
            let report = pipeline::run_encode(&cfg)?;
            for r in &report.rooms {
                info!(
                    "{}: {} encoded, {} failed, T60 {:.3} ± {:.3} s, {:.1} reflections",
                    r.room, r.count, r.failed, r.t60_mean, r.t60_std, r.mean_reflections
                );
            }
            if !report.failures.is_empty() {
                return Err(PipelineError::EncodeFailures {
                    failed: report.failures.len(),
                    total: report.failures.len() + report.encoded(),
                }
                .into());
            }
        }
        Command::Train(a) => {
            for s in pipeline::run_train(&a.config()?)? {
                info!(
                    "{}: {} epochs on {} vectors, d_acc {:.3}{}",
                    s.room,
                    s.epochs,
                    s.samples,
                    s.d_accuracy,
                    if s.resumed { " (up to date)" } else { "" }
                );
            }
        }
        Command::Generate(a) => {
            for s in pipeline::run_generate(&a.config()?)? {
                info!("{}: {} AIRs, {} decode retries", s.room, s.count, s.decode_retries);
            }
        }
        Command::Stats(a) => {
            for s in pipeline::run_stats(&a.config()?)? {
                let ks: Vec<String> = s.ks.iter().map(|(n, v)| format!("{n} {v:.3}")).collect();
                info!("{}: KS {}", s.room, ks.join(", "));
            }
        }
        Command::Pipeline(a) => {
            let mut cfg = a.config()?;
            if cfg.stages.is_empty() {
                cfg.stages = StageName::ALL.to_vec();
            }
            let report = pipeline::run_pipeline(&cfg)?;
            let generated: usize = report.generate.iter().map(|g| g.count).sum();
            info!("pipeline finished: {generated} AIRs generated under {}", cfg.out.display());
        }
        Command::Decode(a) => decode_one(&a)?,
        Command::Corpus(a) => {
            let profiles = match a.profile.as_str() {
                "presets" => RoomProfile::presets(),
                "clean" => ["clean_a", "clean_b", "clean_c"].map(RoomProfile::clean).to_vec(),
                other => bail!("unknown profile `{other}` (presets|clean)"),
            };
            let manifest = write_corpus(&a.out, &profiles, a.per_room, DATASET_LENGTH, a.seed)?;
            info!(
                "wrote {} AIRs in {} rooms to {}",
                manifest.entries().len(),
                manifest.rooms().len(),
                a.out.display()
            );
        }
    }
    Ok(())
}

fn decode_one(a: &DecodeArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.rep).with_context(|| format!("reading {}", a.rep.display()))?;
    let rep: LowDimRep = text.parse().with_context(|| format!("parsing {}", a.rep.display()))?;
    let bank = ExcitationBank::load(&a.bank)?;
    let mut cfg = airgan::synthesis::SynthesisConfig {
        mix_mode: a.mix_mode,
        seed: a.seed,
        ..Default::default()
    };
    if let Some(s) = a.length_s {
        if !(s > 0.0) {
            bail!("--length-s must be positive");
        }
        cfg.length = (s * cfg.sample_rate as f64).round() as usize;
    }
    let out = decode(&rep, &bank, &cfg)?;
    save_air(&out.air, &a.out)?;
    info!("wrote {} ({} samples)", a.out.display(), out.air.len());
    Ok(())
}
