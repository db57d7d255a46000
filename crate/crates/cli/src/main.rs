use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use fvcore::dataset::{augment_pairs, gen_synthetic, load_features, load_trials, write_trials, Trial, TrialLabel};
use fvcore::experiment::{
    ablation_sweep, embed_samples, load_embeddings, prepare_data, report, run_experiment, write_embeddings,
    RunConfig, SweepPreset,
};
use fvcore::model::{load_checkpoint, save_checkpoint, DualBranchModel};
use fvcore::scoring::{
    attach_scores, compute_eer, polarize_file, read_scores, trial_scores, write_det, write_scores, ScoreKind,
};
use fvcore::train::{train_stage1, train_stage2};
use fvcore::FvError;

#[derive(Parser, Debug)]
#[command(name = "fvv", version, about = "Face-voice cross-modal verification toolkit")]
struct Cli {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset (features, attributes, truth, trials).
    GenSynthetic,
    /// Expand scene-matched pairs with same-identity cross-scene pairs.
    Augment {
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value_t = 4)]
        multiplier: usize,
    },
    /// Two-stage training; writes stage checkpoints and the loss curve.
    Train,
    /// Embed samples with a trained checkpoint.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        /// Only embed samples referenced by this trial list.
        #[arg(long)]
        trials: Option<PathBuf>,
    },
    /// Euclidean trial scores from embeddings.
    Score {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        trials: PathBuf,
    },
    /// EER and DET curve of a score file.
    Eer {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        /// Evaluate the adjusted_score column.
        #[arg(long)]
        adjusted: bool,
    },
    /// Age/gender confidence score polarization.
    Polarize {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        attributes: PathBuf,
        #[command(flatten)]
        confidence: ConfidenceArgs,
    },
    /// Full pipeline: data, two-stage training, scoring, polarization, EER.
    Run,
    /// Ablation grid over both training languages.
    Sweep {
        /// dual-fusion, thresh, augment or polarize.
        #[arg(long)]
        preset: String,
    },
    /// Summarize run manifests and sweep directories.
    Report { paths: Vec<PathBuf> },
}

#[derive(Args, Debug)]
struct ConfidenceArgs {
    #[arg(long)]
    alpha_pol: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    w_a: Option<f64>,
    #[arg(long)]
    w_g: Option<f64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = e
                .chain()
                .find_map(|c| c.downcast_ref::<FvError>())
                .is_some_and(FvError::is_validation);
            ExitCode::from(if validation { 1 } else { 2 })
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
        config.data.synthetic.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    Ok(config)
}

fn out_dir(cli: &Cli, fallback: &str) -> Result<PathBuf> {
    let dir = match (&cli.out, &cli.config) {
        (Some(o), _) => o.clone(),
        (None, Some(_)) => load_config(cli)?.output_dir,
        (None, None) => PathBuf::from(fallback),
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn validation(msg: impl Into<String>) -> anyhow::Error {
    FvError::Config(msg.into()).into()
}

fn dispatch(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenSynthetic => {
            let config = load_config(&cli)?;
            let out = out_dir(&cli, "data")?;
            let data = gen_synthetic(&config.data.synthetic)?;
            let paths = data.write(&out)?;
            println!("{}", data.dataset.summary());
            for (k, p) in paths {
                println!("{k:<12} {}", p.display());
            }
        }
        Command::Augment { features, multiplier } => {
            let out = out_dir(&cli, ".")?;
            let config = load_config(&cli)?;
            let data = load_features(features, None, None)?;
            let pairs = augment_pairs(data.records(), *multiplier, config.seed)?;
            let rows: Vec<Trial> = pairs
                .iter()
                .enumerate()
                .map(|(i, p)| Trial {
                    trial_id: format!("p{i:07}"),
                    face_sample_id: p.face.clone(),
                    voice_sample_id: p.voice.clone(),
                    label: TrialLabel::Same,
                })
                .collect();
            let path = out.join("pairs.csv");
            write_trials(&path, &rows)?;
            println!("{} pairs written to {}", rows.len(), path.display());
        }
        Command::Train => {
            let config = load_config(&cli)?;
            config.validate()?;
            let out = out_dir(&cli, &config.output_dir.to_string_lossy())?;
            let data = prepare_data(&config, Some(&out))?;
            let mut model = DualBranchModel::new(config.model.clone(), config.seed)?;
            let mut curve = train_stage1(&mut model, &data.train, &data.pairs, &config.loss, &config.training)
                .map_err(|e| anyhow::Error::new(e).context("stage1"))?;
            save_checkpoint(&model, &out.join("stage1.ckpt.json"))?;
            curve.extend(
                train_stage2(&mut model, &data.train, &data.pairs, &config.loss, &config.training)
                    .map_err(|e| anyhow::Error::new(e).context("stage2"))?,
            );
            save_checkpoint(&model, &out.join("stage2.ckpt.json"))?;
            let mut csv = String::from("stage,epoch,loss\n");
            for p in &curve {
                csv.push_str(&format!("{},{},{}\n", p.stage, p.epoch, p.loss));
            }
            write_file(&out.join("loss_curve.csv"), csv)?;
            println!("checkpoints written to {}", out.display());
        }
        Command::Embed {
            checkpoint,
            features,
            trials,
        } => {
            let out = out_dir(&cli, ".")?;
            let model = load_checkpoint(checkpoint)?;
            let data = load_features(features, Some(model.config().face_dim), Some(model.config().voice_dim))?;
            let ids: Vec<String> = match trials {
                Some(t) => load_trials(t)?
                    .into_iter()
                    .flat_map(|t| [t.face_sample_id, t.voice_sample_id])
                    .collect(),
                None => data.records().iter().map(|r| r.sample_id.clone()).collect(),
            };
            let emb = embed_samples(&model, &data, ids.iter().map(String::as_str))?;
            let path = out.join("embeddings.jsonl");
            write_embeddings(&path, &emb)?;
            println!("{} embeddings written to {}", emb.len(), path.display());
        }
        Command::Score { embeddings, trials } => {
            let out = out_dir(&cli, ".")?;
            let (faces, voices) = load_embeddings(embeddings)?;
            let report = trial_scores(&load_trials(trials)?, &faces, &voices)?;
            let path = out.join("scores.csv");
            write_scores(&path, &report.scores)?;
            println!("{} trials scored into {}", report.scores.len(), path.display());
            if !report.rejected.is_empty() {
                let rej = out.join("rejected_trials.json");
                write_file(&rej, serde_json::to_string_pretty(&report.rejected)?)?;
                println!("{} trials rejected, see {}", report.rejected.len(), rej.display());
            }
        }
        Command::Eer {
            scores,
            trials,
            adjusted,
        } => {
            let out = out_dir(&cli, ".")?;
            let scored = attach_scores(&load_trials(trials)?, &read_scores(scores)?)?;
            let kind = if *adjusted { ScoreKind::Adjusted } else { ScoreKind::Raw };
            let r = compute_eer(&scored, kind)?;
            let path = out.join("det.csv");
            write_det(&path, &r.det)?;
            println!("EER {:.6} at threshold {:.6}", r.eer, r.threshold);
        }
        Command::Polarize {
            scores,
            trials,
            attributes,
            confidence,
        } => {
            let out = out_dir(&cli, ".")?;
            let mut cfg = load_config(&cli)?.confidence;
            if let Some(a) = confidence.alpha_pol {
                cfg.alpha_pol = a;
            }
            if let Some(t) = confidence.threshold {
                cfg.threshold = t;
            }
            if let Some(w) = confidence.w_a {
                cfg.w_a = w;
            }
            if let Some(w) = confidence.w_g {
                cfg.w_g = w;
            }
            let adjusted_path = out.join("scores_adjusted.csv");
            let audit_path = out.join("polarize_audit.jsonl");
            let (adjusted, _) = polarize_file(scores, trials, attributes, &cfg, &adjusted_path, &audit_path)?;
            println!("adjusted scores written to {}", adjusted_path.display());
            if let (Ok(raw), Ok(adj)) = (compute_eer(&adjusted, ScoreKind::Raw), compute_eer(&adjusted, ScoreKind::Adjusted)) {
                println!("EER raw {:.6}  adjusted {:.6}", raw.eer, adj.eer);
            }
        }
        Command::Run => {
            let config = load_config(&cli)?;
            let manifest = run_experiment(&config)?;
            let manifest_path = config.output_dir.join("manifest.json");
            print!("{}", report(&[manifest_path]));
            info!("wall clock {:.1} s", manifest.wall_clock_seconds);
        }
        Command::Sweep { preset } => {
            let preset: SweepPreset = preset.parse()?;
            let config = load_config(&cli)?;
            let out = out_dir(&cli, &format!("sweeps/{}", preset.name()))?;
            let table = ablation_sweep(preset, &config, &out)?;
            print!("{table}");
        }
        Command::Report { paths } => {
            if paths.is_empty() {
                return Err(validation("report needs at least one manifest or sweep directory"));
            }
            print!("{}", report(paths));
        }
    }
    Ok(())
}

fn write_file(path: &Path, contents: String) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}
