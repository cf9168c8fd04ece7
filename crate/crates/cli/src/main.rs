//! `nvc`: feature extraction, synthetic corpora, training, evaluation and
//! conversion from the command line.
//!
//! Exit status: 0 success, 1 usage, 2 config, 3 data, 4 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use noisevc::config::{load_config, RunConfig};
use noisevc::convert::{convert_averaged, load_mel_input, GriffinLim};
use noisevc::eval::{evaluate, export_embedding_map};
use noisevc::features::{build_manifest_with, extract_corpus, write_wav, DatasetManifest, SpeakerSet, SplitOptions, MANIFEST_FILE};
use noisevc::synth::generate_corpus_with;
use noisevc::trainer::{Checkpoint, MetricRecord, TrainConfig, TrainData, Trainer};
use noisevc::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "nvc", version, about = "Zero-shot voice conversion toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// TOML config file merged over the preset defaults.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set augment.alpha=0.7`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        load_config(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Convert `<speaker>/<utterance>.wav` files to log-mels and write a manifest.
    Features {
        /// Directory with one sub-directory of wav files per speaker.
        #[arg(long, value_name = "DIR")]
        wav_dir: PathBuf,
        /// Where mels and the manifest are written.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Render a synthetic corpus with per-frame content labels.
    Synth {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Number of speakers; overrides `synth.n_speakers`.
        #[arg(long)]
        speakers: Option<usize>,
        /// Utterances per speaker; overrides `synth.utterances_per_speaker`.
        #[arg(long, visible_alias = "utterances")]
        utts: Option<usize>,
        /// Corpus seed; overrides `synth.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train a model on the train split of a manifest.
    Train {
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
        /// Run directory for the config echo, metrics and checkpoints.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long, value_name = "CKPT", conflicts_with_all = ["config", "overrides"])]
        resume: Option<PathBuf>,
        /// With --resume, train up to this many steps in total.
        #[arg(long, requires = "resume")]
        steps: Option<u64>,
        /// Print a metrics line every this many steps (0 for none).
        #[arg(long, default_value_t = 100)]
        log_every: u64,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Probe a checkpoint and write a disentanglement report.
    Eval {
        #[arg(long, value_name = "CKPT")]
        ckpt: PathBuf,
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
        /// JSON report destination.
        #[arg(long, value_name = "FILE")]
        report: PathBuf,
        /// Also write a 2-D map of unseen-speaker embeddings here.
        #[arg(long, value_name = "FILE")]
        map: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Speak the source content with the target voice.
    Convert {
        #[arg(long, value_name = "CKPT")]
        ckpt: PathBuf,
        /// Source utterance (.wav or mel file).
        #[arg(long, value_name = "FILE")]
        source: PathBuf,
        /// Target utterance; repeat to average several.
        #[arg(long, value_name = "FILE", required = true)]
        target: Vec<PathBuf>,
        /// Converted mel destination.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Also write a Griffin-Lim waveform here.
        #[arg(long, value_name = "FILE")]
        wav: Option<PathBuf>,
        #[arg(long, default_value_t = noisevc::convert::DEFAULT_GRIFFIN_LIM_ITERATIONS)]
        gl_iters: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Features { wav_dir, out, config } => {
            let cfg = config.load()?;
            let n = extract_corpus(&wav_dir, &out, cfg.features.trim_db)?;
            let opts = SplitOptions {
                n_unseen: cfg.features.n_unseen,
                test_per_seen: cfg.features.test_per_seen,
                seed: cfg.features.seed,
            };
            let manifest = build_manifest_with(&out, &opts)?;
            manifest.write(&out.join(MANIFEST_FILE))?;
            cfg.echo_into(&out)?;
            println!("{n} utterances -> {}", out.join(MANIFEST_FILE).display());
        }
        Command::Synth {
            out,
            speakers,
            utts,
            seed,
            config,
        } => {
            let mut cfg = config.load()?;
            if let Some(n) = speakers {
                cfg.synth.n_speakers = n;
            }
            if let Some(n) = utts {
                cfg.synth.utterances_per_speaker = n;
            }
            if let Some(s) = seed {
                cfg.synth.seed = s;
            }
            cfg.validate()?;
            let per_speaker = cfg.synth.utterances_per_speaker;
            let manifest = generate_corpus_with(&cfg.synth, per_speaker, &out, cfg.features.test_per_seen)?;
            cfg.echo_into(&out)?;
            println!("{} utterances -> {}", manifest.entries.len(), out.join(MANIFEST_FILE).display());
        }
        Command::Train {
            manifest,
            out,
            resume,
            steps,
            log_every,
            config,
        } => {
            let manifest = DatasetManifest::read(&manifest)?;
            let mut trainer = match resume {
                Some(path) => {
                    let mut ckpt = Checkpoint::load(&path)?;
                    if let Some(s) = steps {
                        ckpt.config.train.steps = s;
                    }
                    let data = TrainData::load(&manifest, ckpt.config.train.crop_frames)?;
                    Trainer::from_checkpoint(ckpt, data)?
                }
                None => {
                    let cfg = config.load()?;
                    let train_cfg = TrainConfig::from(&cfg);
                    train_cfg.validate()?;
                    let data = TrainData::load(&manifest, cfg.train.crop_frames)?;
                    cfg.echo_into(&out)?;
                    Trainer::new(train_cfg, data)?
                }
            };
            let mut progress = |m: &MetricRecord| {
                if log_every > 0 && m.step % log_every == 0 {
                    print_metrics(m);
                }
            };
            let ckpt = trainer.run_with(&out, &mut progress)?;
            println!("step {} checkpoint -> {}", ckpt.step, ckpt.path.display());
        }
        Command::Eval {
            ckpt,
            manifest,
            report,
            map,
            config,
        } => {
            let cfg = config.load()?;
            let ckpt = Checkpoint::load(&ckpt)?;
            let manifest = DatasetManifest::read(&manifest)?;
            let r = evaluate(&ckpt, &manifest, &cfg.eval)?;
            ensure_parent(&report)?;
            r.write(&report)?;
            println!(
                "{}: content probe {:.2}%, speaker probe {:.2}%, L1 {:.4}",
                r.model_tag, r.content_probe_speaker_acc, r.speaker_probe_acc, r.l1_reconstruction
            );
            if let Some(path) = map {
                let m = export_embedding_map(&ckpt.net, &manifest, SpeakerSet::Unseen, &path, &cfg.eval)?;
                match m.summary.silhouette {
                    Some(s) => println!("map of {} points, silhouette {s:.3}", m.summary.n_points),
                    None => println!("map of {} points, silhouette n/a", m.summary.n_points),
                }
            }
        }
        Command::Convert {
            ckpt,
            source,
            target,
            out,
            wav,
            gl_iters,
        } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let src = load_mel_input(&source)?;
            let targets = target.iter().map(|p| load_mel_input(p)).collect::<Result<Vec<_>>>()?;
            let refs: Vec<_> = targets.iter().collect();
            let mel = convert_averaged(&ckpt.net, &src, &refs)?;
            ensure_parent(&out)?;
            mel.write(&out)?;
            if let Some(path) = wav {
                let clip = GriffinLim::new().invert(&mel, gl_iters)?;
                ensure_parent(&path)?;
                write_wav(&path, &clip)?;
            }
            println!("{} frames -> {}", mel.n_frames(), out.display());
        }
    }
    Ok(())
}

fn print_metrics(m: &MetricRecord) {
    println!(
        "step {:>6}  rec {:.4}  codebook {:.4}  commit {:.4}  cpc {:.4}  total {:.4}",
        m.step, m.rec, m.codebook, m.commit, m.cpc, m.total
    );
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            std::fs::create_dir_all(dir).map_err(|e| Error::Io {
                path: dir.to_path_buf(),
                source: e,
            })
        }
        _ => Ok(()),
    }
}
