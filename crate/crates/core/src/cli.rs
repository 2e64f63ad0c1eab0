//! Command-line front end. Every command writes into a fresh run directory
//! `<out>/<command>_<timestamp>_<seed>` holding the resolved config, a
//! metrics CSV and any checkpoints it produced.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{self, Projection};
use crate::experiments::{self, EvalSet, MethodScore, PipelinePlan, RollingSet, Variant, Weights};
use crate::ndcore::Array;
use crate::solver::{FirstFragment, SamplingMode};
use crate::synthdata::{self, Dataset};
use crate::train::{Models, Phase, TrainLog};

#[derive(Debug, Parser)]
#[command(
    name = "avatar-lcm",
    version,
    about = "One-step consistency distillation for audio-driven toy video"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON config file; missing fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted-path override such as `stage1.lr=1e-4`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Parent directory for run directories.
    #[arg(long, default_value = "runs", global = true)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the default config, or the resolved one with `--resolved`.
    PrintConfig {
        #[arg(long)]
        resolved: bool,
    },
    /// Render a few training clips and summary statistics of the data.
    PreviewData {
        #[arg(long, default_value_t = 4)]
        clips: usize,
    },
    TrainTeacher,
    /// Adversarial consistency distillation from a teacher checkpoint.
    TrainStage1 {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        ablation: Ablation,
        /// Plain consistency distillation: no discriminator, no extra terms.
        #[arg(long)]
        plain: bool,
    },
    /// Editing fine-tuning from a stage-I checkpoint.
    TrainStage2 {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Sample held-out clips with the student of a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        mode: Option<SamplingMode>,
        #[arg(long)]
        nfe: Option<usize>,
        /// How many clips to render as PGM images.
        #[arg(long, default_value_t = 8)]
        images: usize,
    },
    /// Score the teacher and, when present, the student of a checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2])]
        nfe: Vec<usize>,
    },
    /// Identity and motion trade-off of combined rolling sampling.
    SweepRolling {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<usize>>,
    },
    /// Stage-I ablations against the full objective.
    Ablate {
        /// Teacher checkpoint; a teacher is trained when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        ablation: Ablation,
    },
    /// Teacher, every stage-I variant, stage II and all evaluations.
    Pipeline {
        #[arg(long)]
        no_ablations: bool,
    },
}

#[derive(Debug, Clone, Copy, Args)]
pub struct Ablation {
    #[arg(long)]
    pub no_progressive: bool,
    #[arg(long)]
    pub no_motion_loss: bool,
}

/// Exit code for an error: 2 config, 3 missing checkpoint, 4 numerical, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => 2,
        Error::MissingCheckpoint(_) => 3,
        Error::NonFinite(_) => 4,
        _ => 1,
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Shape { .. } => "shape",
        Error::InvalidArgument(_) => "invalid_argument",
        Error::NonFinite(_) => "numerical",
        Error::Config { .. } => "config",
        Error::Checkpoint(_) => "checkpoint",
        Error::HashMismatch { .. } => "hash_mismatch",
        Error::MissingCheckpoint(_) => "missing_checkpoint",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
    }
}

pub fn error_json(e: &Error) -> serde_json::Value {
    json!({"error": error_kind(e), "message": e.to_string(), "exit_code": exit_code(e)})
}

/// Parse `args` (program name first), run the command and return the exit
/// code. The summary JSON goes to stdout, errors as JSON to stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let j = json!({"error": "usage", "message": e.to_string(), "exit_code": 2});
            eprintln!("{j}");
            return 2;
        }
    };
    match run(&cli) {
        Ok(summary) => {
            println!(
                "{}",
                serde_json::to_string_pretty(&summary).expect("summary serializes")
            );
            0
        }
        Err(e) => {
            eprintln!("{}", error_json(&e));
            exit_code(&e)
        }
    }
}

/// Config from `--config`, then `--seed`, then each `--set`, validated.
pub fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let cfg = cfg.with_overrides(&common.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::PrintConfig { .. } => "print-config",
        Command::PreviewData { .. } => "preview-data",
        Command::TrainTeacher => "train-teacher",
        Command::TrainStage1 { .. } => "train-stage1",
        Command::TrainStage2 { .. } => "train-stage2",
        Command::Sample { .. } => "sample",
        Command::Evaluate { .. } => "evaluate",
        Command::SweepRolling { .. } => "sweep-rolling",
        Command::Ablate { .. } => "ablate",
        Command::Pipeline { .. } => "pipeline",
    }
}

fn run_dir(out: &Path, command: &str, seed: u64) -> Result<PathBuf> {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
    let dir = out.join(format!("{command}_{stamp}_{seed}"));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn progress(stage: &str) {
    eprintln!("[avatar-lcm] {stage}");
}

/// Weights of a checkpoint after checking it was made with the same model,
/// data and schedule settings as `cfg`.
fn load_weights(path: &Path, cfg: &RunConfig) -> Result<(Weights, Phase)> {
    let (w, ck) = Weights::load(path)?;
    let current = cfg.to_json();
    let saved = &ck.manifest.config;
    for key in ["model.backbone", "model.cm_sigma", "data", "schedule"] {
        let pick = |v: &serde_json::Value| {
            key.split('.')
                .fold(v.clone(), |acc, k| acc.get(k).cloned().unwrap_or_default())
        };
        if pick(&current) != pick(saved) {
            return Err(Error::Config {
                path: key.into(),
                message: format!("differs from the setting stored in {}", path.display()),
            });
        }
    }
    let phase = match ck.manifest.phase.as_str() {
        "teacher" => Phase::Teacher,
        "stage1" => Phase::Stage1,
        "stage2" => Phase::Stage2,
        other => return Err(Error::Checkpoint(format!("unknown phase {other:?}"))),
    };
    Ok((w, phase))
}

fn require_student<'a>(w: &'a Weights, path: &Path) -> Result<&'a crate::ndcore::ParamStore> {
    w.student
        .as_ref()
        .ok_or_else(|| Error::Checkpoint(format!("{} holds no student weights", path.display())))
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    std::fs::write(dir.join(name), text)?;
    Ok(())
}

fn write_images(dir: &Path, prefix: &str, clips: &[Array]) -> Result<Vec<String>> {
    clips
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let name = format!("{prefix}_{i:03}.pgm");
            eval::write_pgm(&dir.join(&name), &eval::clip_grid(c)?)?;
            Ok(name)
        })
        .collect()
}

fn projection(models: &Models, cfg: &RunConfig) -> Projection {
    Projection::new(
        models.backbone.geo.frame_size() * cfg.data.frames,
        cfg.eval.projection_dim,
        cfg.eval.projection_seed,
    )
}

fn apply_ablation(cfg: &RunConfig, a: Ablation) -> RunConfig {
    let mut c = cfg.clone();
    if a.no_progressive {
        c = Variant::NoProgressive.apply(&c);
    }
    if a.no_motion_loss {
        c = Variant::NoMotion.apply(&c);
    }
    c
}

pub fn run(cli: &Cli) -> Result<serde_json::Value> {
    let cfg = resolve_config(&cli.common)?;
    if let Command::PrintConfig { resolved } = &cli.command {
        let c = if *resolved { cfg } else { RunConfig::default() };
        return Ok(c.to_json());
    }
    let name = command_name(&cli.command);
    let dir = run_dir(&cli.common.out, name, cfg.seed)?;
    write_text(&dir, "config.json", &(cfg.to_pretty_json() + "\n"))?;
    let models = Models::new(&cfg)?;
    let mut summary =
        json!({"command": name, "run_dir": dir.display().to_string(), "seed": cfg.seed});
    let mut scores: Vec<MethodScore> = Vec::new();

    match &cli.command {
        Command::PrintConfig { .. } => unreachable!("handled above"),
        Command::PreviewData { clips } => {
            let train = Dataset::train(cfg.seed, &cfg.data)?;
            let set = EvalSet::build(&cfg)?;
            let mut rng = crate::ndcore::Prng::stream(cfg.seed, crate::ndcore::Stream::Data);
            let mut rendered = Vec::new();
            let mut audio = String::from("clip,frame,amplitude,dx,dy,phase\n");
            let mut train_clips = Vec::with_capacity(set.len());
            for i in 0..set.len() {
                let t = train.sample_tuple(&mut rng)?;
                if i < *clips {
                    for (f, row) in audio_rows(&t.audio).iter().enumerate() {
                        audio.push_str(&format!(
                            "{i},{f},{:e},{:e},{:e},{:e}\n",
                            row[0], row[1], row[2], row[3]
                        ));
                    }
                    rendered.push(t.x0.clone());
                }
                train_clips.push(t.x0);
            }
            let images = write_images(&dir, "train", &rendered)?;
            write_text(&dir, "audio.csv", &audio)?;
            let proj = projection(&models, &cfg);
            scores.push(experiments::score_method(
                "real_train",
                0,
                &train_clips,
                &set,
                &proj,
                &cfg,
            )?);
            scores.push(experiments::score_method(
                "real_heldout",
                0,
                &set.real,
                &set,
                &proj,
                &cfg,
            )?);
            summary["images"] = json!(images);
        }
        Command::TrainTeacher => {
            let data = Dataset::train(cfg.seed, &cfg.data)?;
            progress("teacher");
            let mut log = TrainLog::default();
            let (teacher, stats) = experiments::run_teacher(&models, &cfg, &data, &mut log)?;
            write_text(&dir, "train_log.csv", &log.to_csv())?;
            let w = Weights {
                teacher,
                student: None,
                disc: None,
            };
            let ck = w
                .checkpoint(Phase::Teacher, cfg.model.teacher_iterations, &cfg)
                .save(&dir, "teacher")?;
            let set = EvalSet::build(&cfg)?;
            let clips = experiments::teacher_samples(
                &models,
                &w.teacher,
                &set,
                cfg.eval.teacher_steps,
                cfg.sampler.omega,
            )?;
            scores.push(experiments::score_method(
                "teacher",
                cfg.eval.teacher_steps,
                &clips,
                &set,
                &projection(&models, &cfg),
                &cfg,
            )?);
            summary["checkpoint"] = json!(ck.display().to_string());
            summary["dropout_rate"] = json!(stats.dropped as f64 / stats.iterations.max(1) as f64);
        }
        Command::TrainStage1 {
            checkpoint,
            ablation,
            plain,
        } => {
            let (tw, _) = load_weights(checkpoint, &cfg)?;
            let mut vcfg = apply_ablation(&cfg, *ablation);
            if *plain {
                vcfg = Variant::PlainLcm.apply(&vcfg);
            }
            let data = Dataset::train(cfg.seed, &cfg.data)?;
            progress("stage1");
            let mut log = TrainLog::default();
            let w = experiments::run_stage1(&models, &vcfg, &data, &tw.teacher, &mut log)?;
            write_text(&dir, "train_log.csv", &log.to_csv())?;
            let ck = w
                .checkpoint(Phase::Stage1, vcfg.stage1.iterations, &vcfg)
                .save(&dir, "stage1")?;
            let set = EvalSet::build(&cfg)?;
            let proj = projection(&models, &cfg);
            for nfe in [1, 2] {
                let clips = experiments::student_samples(
                    &models,
                    require_student(&w, checkpoint)?,
                    &set,
                    nfe,
                )?;
                scores.push(experiments::score_method(
                    "stage1", nfe, &clips, &set, &proj, &cfg,
                )?);
            }
            summary["checkpoint"] = json!(ck.display().to_string());
        }
        Command::TrainStage2 { checkpoint } => {
            let (w1, phase) = load_weights(checkpoint, &cfg)?;
            if phase != Phase::Stage1 {
                return Err(Error::Checkpoint(format!(
                    "stage II needs a stage-I checkpoint, got {}",
                    phase.as_str()
                )));
            }
            let data = Dataset::train(cfg.seed, &cfg.data)?;
            progress("stage2");
            let mut log = TrainLog::default();
            let w = experiments::run_stage2(&models, &cfg, &data, &w1, &mut log)?;
            write_text(&dir, "train_log.csv", &log.to_csv())?;
            let ck = w
                .checkpoint(Phase::Stage2, cfg.stage2.iterations, &cfg)
                .save(&dir, "stage2")?;
            let set = EvalSet::build(&cfg)?;
            let proj = projection(&models, &cfg);
            for nfe in [1, 2] {
                let clips = experiments::student_samples(
                    &models,
                    require_student(&w, checkpoint)?,
                    &set,
                    nfe,
                )?;
                scores.push(experiments::score_method(
                    "stage2", nfe, &clips, &set, &proj, &cfg,
                )?);
            }
            summary["checkpoint"] = json!(ck.display().to_string());
        }
        Command::Sample {
            checkpoint,
            mode,
            nfe,
            images,
        } => {
            let (w, phase) = load_weights(checkpoint, &cfg)?;
            let student = require_student(&w, checkpoint)?;
            let mode = mode.unwrap_or(cfg.sampler.mode);
            let proj = projection(&models, &cfg);
            let label = phase.as_str();
            match mode {
                SamplingMode::OneStep | SamplingMode::Multistep => {
                    let k = if mode == SamplingMode::OneStep {
                        1
                    } else {
                        nfe.unwrap_or(cfg.sampler.nfe)
                    };
                    if mode == SamplingMode::OneStep && nfe.is_some_and(|n| n != 1) {
                        return Err(Error::Config {
                            path: "sampler.nfe".into(),
                            message: "one_step sampling uses exactly one evaluation".into(),
                        });
                    }
                    let set = EvalSet::build(&cfg)?;
                    let clips = experiments::student_samples(&models, student, &set, k)?;
                    let n = (*images).min(clips.len());
                    summary["images"] = json!(write_images(&dir, "sample", &clips[..n])?);
                    scores.push(experiments::score_method(
                        label, k, &clips, &set, &proj, &cfg,
                    )?);
                }
                SamplingMode::Rolling | SamplingMode::CombinedRolling => {
                    let first = if mode == SamplingMode::Rolling {
                        FirstFragment::RepeatReference
                    } else {
                        FirstFragment::Gaussian
                    };
                    let set = RollingSet::build(&cfg)?;
                    let frags = experiments::rolling_generate(
                        &models,
                        student,
                        &set,
                        cfg.sampler.rolling_noise_level,
                        first,
                    )?;
                    let mut clips = Vec::new();
                    let mut real = Vec::new();
                    let mut amps = Vec::new();
                    for (v, fs) in set.videos.iter().zip(frags) {
                        clips.extend(fs);
                        real.extend(v.real.iter().cloned());
                        amps.extend(v.amplitudes.iter().cloned());
                    }
                    let n = (*images).min(clips.len());
                    summary["images"] = json!(write_images(&dir, "fragment", &clips[..n])?);
                    scores.push(experiments::score_clips(
                        label, 1, &clips, &real, &amps, &proj, &cfg,
                    )?);
                }
            }
            summary["mode"] = json!(mode);
        }
        Command::Evaluate { checkpoint, nfe } => {
            let (w, phase) = load_weights(checkpoint, &cfg)?;
            let set = EvalSet::build(&cfg)?;
            let proj = projection(&models, &cfg);
            let clips = experiments::teacher_samples(
                &models,
                &w.teacher,
                &set,
                cfg.eval.teacher_steps,
                cfg.sampler.omega,
            )?;
            scores.push(experiments::score_method(
                "teacher",
                cfg.eval.teacher_steps,
                &clips,
                &set,
                &proj,
                &cfg,
            )?);
            if let Some(student) = &w.student {
                for &k in nfe {
                    let clips = experiments::student_samples(&models, student, &set, k)?;
                    scores.push(experiments::score_method(
                        phase.as_str(),
                        k,
                        &clips,
                        &set,
                        &proj,
                        &cfg,
                    )?);
                }
            }
            summary["noise_frechet"] = json!(eval::toy_frechet(&set.noises, &set.real, &proj)?);
        }
        Command::SweepRolling { checkpoint, levels } => {
            let (w, phase) = load_weights(checkpoint, &cfg)?;
            let student = require_student(&w, checkpoint)?;
            let levels = levels
                .clone()
                .unwrap_or_else(|| cfg.eval.rolling_levels.clone());
            if levels.iter().any(|&l| l == 0 || l > cfg.schedule.steps) {
                return Err(Error::Config {
                    path: "levels".into(),
                    message: format!("levels must lie in (0, {}]", cfg.schedule.steps),
                });
            }
            let rows = experiments::rolling_sweep(&models, student, &cfg, &levels)?;
            write_text(&dir, "rolling.csv", &experiments::rolling_csv(&rows))?;
            let (id, mass) = experiments::rolling_trends(&rows);
            summary["identity_trend"] = json!(id);
            summary["motion_trend"] = json!(mass);
            let set = EvalSet::build(&cfg)?;
            let clips = experiments::student_samples(&models, student, &set, 1)?;
            scores.push(experiments::score_method(
                phase.as_str(),
                1,
                &clips,
                &set,
                &projection(&models, &cfg),
                &cfg,
            )?);
        }
        Command::Ablate {
            checkpoint,
            ablation,
        } => {
            let data = Dataset::train(cfg.seed, &cfg.data)?;
            let teacher = match checkpoint {
                Some(p) => load_weights(p, &cfg)?.0.teacher,
                None => {
                    progress("teacher");
                    experiments::run_teacher(&models, &cfg, &data, &mut TrainLog::default())?.0
                }
            };
            let mut variants = vec![Variant::AdvLcm];
            let both = !ablation.no_progressive && !ablation.no_motion_loss;
            if ablation.no_progressive || both {
                variants.push(Variant::NoProgressive);
            }
            if ablation.no_motion_loss || both {
                variants.push(Variant::NoMotion);
            }
            let set = EvalSet::build(&cfg)?;
            let proj = projection(&models, &cfg);
            for v in variants {
                progress(v.name());
                let vcfg = v.apply(&cfg);
                let mut log = TrainLog::default();
                let w = experiments::run_stage1(&models, &vcfg, &data, &teacher, &mut log)?;
                write_text(&dir, &format!("{}_log.csv", v.name()), &log.to_csv())?;
                let student = w.student.as_ref().expect("stage I yields a student");
                for nfe in [1, 2] {
                    let clips = experiments::student_samples(&models, student, &set, nfe)?;
                    scores.push(experiments::score_method(
                        v.name(),
                        nfe,
                        &clips,
                        &set,
                        &proj,
                        &cfg,
                    )?);
                }
            }
        }
        Command::Pipeline { no_ablations } => {
            let plan = PipelinePlan {
                ablations: !no_ablations,
                ..PipelinePlan::default()
            };
            let report = experiments::run_pipeline(&cfg, plan, Some(&dir), progress)?;
            summary["report"] = serde_json::to_value(&report)?;
            return Ok(summary);
        }
    }
    write_text(&dir, "metrics.csv", &experiments::metrics_csv(&scores))?;
    summary["metrics"] = serde_json::to_value(&scores)?;
    Ok(summary)
}

/// Centre window row of each frame of a `(F, W, 4)` audio window tensor.
fn audio_rows(windows: &Array) -> Vec<[f64; synthdata::AUDIO_DIM]> {
    let s = windows.shape();
    let (f, w, d) = (s[0], s[1], s[2]);
    (0..f)
        .map(|i| {
            let base = (i * w + w / 2) * d;
            let mut r = [0.0; synthdata::AUDIO_DIM];
            r.copy_from_slice(&windows.data()[base..base + d]);
            r
        })
        .collect()
}
