use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use corpusforge::config::PipelineConfig;
use corpusforge::embedding::{self, Modality};
use corpusforge::evalkit::{self, io as trial_io, EvalError, Label, Split, TrialPair, TrialTag};
use corpusforge::manifest::{self, UtteranceRecord};
use corpusforge::par;
use corpusforge::pipeline::{self, ModuleError, Pipeline, PipelineError, Stage, StageOutcome};

#[derive(Parser)]
#[command(name = "corpusforge", version, about = "Build a speaker-verification corpus from crawled video metadata and embeddings")]
struct Cli {
    /// Pipeline config file.
    #[arg(long, global = true, default_value = "corpusforge.toml")]
    config: PathBuf,
    /// Override the work directory from the config.
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    /// Override the global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Log stage progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct StageArgs {
    /// Rerun even if the stage is up to date.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Keep videos that pass the resolution and upload-date policy.
    Filter(StageArgs),
    /// Turn diarized segments of kept videos into utterances.
    Segment(StageArgs),
    /// Cluster utterances into speakers within each playlist.
    Cluster(StageArgs),
    /// Drop cluster members whose fused audio/face cohesion is too low.
    Cleanse(StageArgs),
    /// Merge clusters across playlists into corpus speakers.
    Combine(StageArgs),
    /// Attach a genre to every utterance.
    Genre(StageArgs),
    /// Duration and genre statistics of the final corpus.
    Stats(StageArgs),
    /// Speaker-disjoint train/test split.
    Split(StageArgs),
    /// Easy and hard verification trials over the test speakers.
    Trials(StageArgs),
    /// Run all stages, or only those given with --stage.
    Run {
        /// Stage to run (repeatable); prior artifacts must already exist.
        #[arg(long = "stage")]
        stages: Vec<Stage>,
        /// Rerun even if the stages are up to date.
        #[arg(long)]
        force: bool,
    },
    /// Cosine-score a trials file with the configured audio embeddings.
    Score {
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Equal error rate of a scores file against a trials file.
    Eer {
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        scores: PathBuf,
    },
    /// Within- and cross-genre EER matrix over the test speakers.
    GenreMatrix {
        /// Use every speaker in the corpus instead of the test split.
        #[arg(long)]
        all_speakers: bool,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = PipelineConfig::load(&cli.config)?;
    if let Some(w) = &cli.workdir {
        cfg.paths.workdir = w.clone();
    }
    if let Some(s) = cli.seed {
        cfg.run.seed = s;
    }
    if let Some(j) = cli.jobs {
        cfg.run.jobs = j;
    }
    Ok(cfg)
}

fn report(outcomes: &[(Stage, StageOutcome)]) {
    for (stage, outcome) in outcomes {
        match outcome {
            StageOutcome::Ran => println!("{stage}: done"),
            StageOutcome::Skipped => println!("{stage}: skipped (up-to-date)"),
        }
    }
}

fn eval_err(e: EvalError) -> PipelineError {
    PipelineError::Stage { stage: Stage::Trials, source: e.into() }
}

fn module_err(stage: Stage, e: impl Into<ModuleError>) -> PipelineError {
    PipelineError::Stage { stage, source: e.into() }
}

fn score(cfg: &PipelineConfig, trials: &Path, output: &Path) -> Result<(), PipelineError> {
    let lines = trial_io::read_trials(trials).map_err(eval_err)?;
    let audio = embedding::read_embeddings_as(&cfg.paths.audio_emb, Modality::Audio).map_err(|e| module_err(Stage::Trials, e))?;
    let pairs: Vec<TrialPair> = lines
        .into_iter()
        .map(|l| TrialPair {
            enrol_utt: l.enrol,
            test_utt: l.test,
            label: if l.target { Label::Target } else { Label::Nontarget },
            tag: TrialTag::Easy,
        })
        .collect();
    let scored = par::with_jobs(cfg.run.jobs, || evalkit::score_trials(&pairs, &audio)).map_err(eval_err)?;
    trial_io::write_scores(output, &scored).map_err(eval_err)?;
    println!("scored {} trials -> {}", scored.len(), output.display());
    Ok(())
}

fn eer(trials: &Path, scores: &Path) -> Result<(), PipelineError> {
    let lines = trial_io::read_trials(trials).map_err(eval_err)?;
    let scores = trial_io::read_scores(scores).map_err(eval_err)?;
    let joined = trial_io::join_scores(&lines, &scores).map_err(eval_err)?;
    let r = evalkit::compute_eer(&joined).map_err(eval_err)?;
    println!("{}", serde_json::json!({ "eer_percent": r.percent(), "threshold": r.threshold, "n_trials": joined.len() }));
    Ok(())
}

fn genre_matrix(cfg: &PipelineConfig, all_speakers: bool, output: Option<PathBuf>) -> Result<(), PipelineError> {
    let p = Pipeline::new(cfg.clone());
    let need = |name: &str| {
        let path = p.artifact(name);
        if path.is_file() {
            Ok(path)
        } else {
            Err(PipelineError::StageInputMissing { stage: Stage::Trials, path })
        }
    };
    let utts: Vec<UtteranceRecord> =
        manifest::load_manifest(&need(pipeline::UTTS_FINAL)?).map_err(|e| module_err(Stage::Trials, e))?;
    let pool = if all_speakers {
        utts
    } else {
        let text = std::fs::read(need(pipeline::SPLIT)?).map_err(|e| module_err(Stage::Trials, e))?;
        let split: Split = serde_json::from_slice(&text)
            .map_err(|source| module_err(Stage::Trials, ModuleError::Json { path: p.artifact(pipeline::SPLIT), source }))?;
        split.test_utterances(&utts)
    };
    let audio = embedding::read_embeddings_as(&cfg.paths.audio_emb, Modality::Audio).map_err(|e| module_err(Stage::Trials, e))?;
    let matrix = par::with_jobs(cfg.run.jobs, || evalkit::genre_eer_matrix(&pool, &audio, &cfg.matrix_params()))
        .map_err(eval_err)?;
    let json = serde_json::to_string_pretty(&matrix).expect("matrix serializes");
    let out = output.unwrap_or_else(|| p.artifact("genre_matrix.json"));
    std::fs::write(&out, format!("{json}\n")).map_err(|e| module_err(Stage::Trials, e))?;
    println!("{json}");
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<(), PipelineError> {
    let single = |stage: Stage, args: &StageArgs| -> Result<(), PipelineError> {
        let p = Pipeline::new(load_config(cli)?);
        report(&p.run(&[stage], args.force)?);
        Ok(())
    };
    match &cli.command {
        Command::Filter(a) => single(Stage::Filter, a),
        Command::Segment(a) => single(Stage::Segment, a),
        Command::Cluster(a) => single(Stage::Cluster, a),
        Command::Cleanse(a) => single(Stage::Cleanse, a),
        Command::Combine(a) => single(Stage::Combine, a),
        Command::Genre(a) => single(Stage::Genre, a),
        Command::Stats(a) => single(Stage::Stats, a),
        Command::Split(a) => single(Stage::Split, a),
        Command::Trials(a) => single(Stage::Trials, a),
        Command::Run { stages, force } => {
            let p = Pipeline::new(load_config(cli)?);
            report(&p.run(stages, *force)?);
            Ok(())
        }
        Command::Score { trials, output } => score(&load_config(cli)?, trials, output),
        Command::Eer { trials, scores } => eer(trials, scores),
        Command::GenreMatrix { all_speakers, output } => genre_matrix(&load_config(cli)?, *all_speakers, output.clone()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
