mod commands;
mod config;
mod failure;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use voicepd::train::Configuration;

use crate::config::RunConfig;
use crate::failure::Failure;

#[derive(Debug, Parser)]
#[command(
    name = "voicepd",
    version,
    about = "Speech-based PD screening: preprocessing, training, evaluation"
)]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, env = "VOICEPD_SEED")]
    seed: Option<u64>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Channel subtraction, peak normalization and resampling of a corpus.
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one configuration on every patient of a manifest.
    Train(TrainArgs),
    /// Patient-level k-fold cross-validation.
    Evaluate {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Voting predictions for the patients of a manifest.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Output voting CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// SVG figures.
    Viz {
        #[command(subcommand)]
        kind: VizKind,
    },
    /// Write a synthetic corpus and its manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_pd: Option<usize>,
        #[arg(long)]
        n_hp: Option<usize>,
        /// Clips per patient.
        #[arg(long)]
        samples: Option<usize>,
        /// Fixed clip length in seconds.
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        stereo: bool,
    },
    /// Score the expert questionnaire.
    Survey {
        #[arg(long)]
        answers: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Lowest H-Y grade whose correct answer is "advanced-stage PD".
        #[arg(long)]
        advanced_from_hy: Option<u8>,
    },
    /// One augmentation draw on one clip: before/after SVG and parameters.
    AugmentPreview {
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        noise_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum VizKind {
    /// Certainty per patient grouped by H-Y grade, from a voting CSV.
    Voting {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Spectrogram next to the conv feature map of one clip.
    Featuremap {
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModelPreset {
    Base,
    Miniature,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Model shape; overrides the config file.
    #[arg(long, value_enum)]
    model: Option<ModelPreset>,
    /// Conv weight file (W2VC).
    #[arg(long)]
    pretrained: Option<PathBuf>,
    /// Seeded Kaiming-initialized conv stack instead of a weight file.
    #[arg(long)]
    random_conv: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_parser = parse_configuration)]
    configuration: Option<Configuration>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// Record every applied augmentation.
    #[arg(long)]
    trace_augment: bool,
    /// Turn augmentation off.
    #[arg(long)]
    no_augment: bool,
    #[arg(long)]
    noise_dir: Option<PathBuf>,
}

fn parse_configuration(s: &str) -> Result<Configuration, String> {
    s.parse().map_err(|e: voicepd::Error| e.to_string())
}

impl ModelArgs {
    fn apply(&self, run: &mut RunConfig) {
        match self.model {
            Some(ModelPreset::Base) => run.model = voicepd::model::ModelConfig::default(),
            Some(ModelPreset::Miniature) => run.model = voicepd::model::ModelConfig::miniature(),
            None => {}
        }
        if self.pretrained.is_some() {
            run.pretrained.clone_from(&self.pretrained);
        }
        run.random_conv |= self.random_conv;
    }
}

impl TrainArgs {
    fn apply(&self, run: &mut RunConfig) {
        self.model.apply(run);
        let t = &mut run.train;
        if let Some(c) = self.configuration {
            t.configuration = c;
        }
        if let Some(lr) = self.lr {
            t.adam.learning_rate = lr;
        }
        if let Some(e) = self.epochs {
            t.epochs = e;
        }
        if let Some(b) = self.batch {
            t.batch_size = b;
        }
        t.trace_augment |= self.trace_augment;
        if self.no_augment {
            t.augmentation = voicepd::augment::AugmentationConfig::disabled();
        }
        if self.noise_dir.is_some() {
            run.noise_dir.clone_from(&self.noise_dir);
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut config = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(threads) = cli.threads {
        config.threads = threads;
    }
    match cli.command {
        Command::Preprocess { manifest, out } => commands::preprocess(&config.finish()?, &manifest, &out),
        Command::Train(args) => {
            args.apply(&mut config);
            commands::train(&config.finish()?, &args.manifest, &args.out)
        }
        Command::Evaluate { train, folds } => {
            train.apply(&mut config);
            if let Some(k) = folds {
                config.folds = k;
            }
            commands::evaluate(&config.finish()?, &train.manifest, &train.out)
        }
        Command::Infer {
            checkpoint,
            manifest,
            out,
        } => commands::infer(&config.finish()?, &checkpoint, &manifest, &out),
        Command::Viz { kind } => match kind {
            VizKind::Voting { input, out } => commands::viz_voting(&config.finish()?, &input, &out),
            VizKind::Featuremap { wav, out, model } => {
                model.apply(&mut config);
                commands::viz_featuremap(&config.finish()?, &wav, &out)
            }
        },
        Command::Synth {
            out,
            n_pd,
            n_hp,
            samples,
            duration,
            stereo,
        } => {
            let s = &mut config.synth;
            s.n_pd = n_pd.unwrap_or(s.n_pd);
            s.n_hp = n_hp.unwrap_or(s.n_hp);
            s.samples_per_patient = samples.unwrap_or(s.samples_per_patient);
            if let Some(d) = duration {
                s.duration_s = [d, d];
            }
            s.stereo |= stereo;
            commands::synth(&config.finish()?, &out)
        }
        Command::Survey {
            answers,
            truth,
            out,
            advanced_from_hy,
        } => {
            if let Some(hy) = advanced_from_hy {
                config.survey.advanced_from_hy = hy;
            }
            commands::survey(&config.finish()?, &answers, &truth, &out)
        }
        Command::AugmentPreview { wav, out, noise_dir } => {
            if noise_dir.is_some() {
                config.noise_dir = noise_dir;
            }
            commands::augment_preview(&config.finish()?, &wav, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
