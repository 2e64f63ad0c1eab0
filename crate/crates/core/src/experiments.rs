//! End-to-end runs: held-out evaluation sets, sampling each method with
//! shared noise, metric tables, the rolling-noise sweep, and the full
//! teacher -> stage I -> stage II pipeline with its ablations.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::checkpoint::{Checkpoint, ScheduleInfo};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{self, Projection};
use crate::ndcore::{Array, Graph, ParamStore, Prng, Stream};
use crate::nets::{Bound, Conditioning};
use crate::schedule;
use crate::solver::{self, DataModel, FirstFragment};
use crate::synthdata::{make_tuple_with_reference, Dataset};
use crate::train::{self, Distill, Models, Phase, TeacherStats, TrainLog};

pub const TEACHER: &str = "teacher/";
pub const STUDENT: &str = "student/";
pub const DISC: &str = "disc/";

/// Held-out clips with their conditioning and the noise every method shares.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub conds: Vec<Conditioning>,
    pub amplitudes: Vec<Vec<f64>>,
    pub real: Vec<Array>,
    pub noises: Vec<Array>,
    /// Seeds for any extra noise a sampler draws, one per clip.
    pub clip_seeds: Vec<u64>,
}

impl EvalSet {
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        let heldout = Dataset::heldout(cfg.seed, &cfg.data)?;
        let mut rng = Prng::stream(cfg.seed, Stream::Eval);
        let d = &cfg.data;
        let mut set = EvalSet {
            conds: Vec::new(),
            amplitudes: Vec::new(),
            real: Vec::new(),
            noises: Vec::new(),
            clip_seeds: Vec::new(),
        };
        for j in 0..cfg.eval.clips {
            let v = &heldout.videos[j % heldout.len()];
            let start = rng.uniform_int(d.start_margin, v.len() - d.frames);
            let r = rng.uniform_int(0, v.len() - 1);
            let t = make_tuple_with_reference(v, start as i64, r, d)?;
            set.amplitudes
                .push(v.audio.amplitude()[start..start + d.frames].to_vec());
            set.conds.push(Conditioning::from_tuple(&t));
            set.noises.push(rng.normal_array(t.x0.shape()));
            set.clip_seeds.push(rng.next_u64());
            set.real.push(t.x0);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.real.len()
    }

    pub fn is_empty(&self) -> bool {
        self.real.is_empty()
    }
}

pub fn teacher_samples(
    models: &Models,
    teacher: &ParamStore,
    set: &EvalSet,
    steps: usize,
    omega: f64,
) -> Result<Vec<Array>> {
    let net = models.teacher(teacher);
    set.noises
        .iter()
        .zip(&set.conds)
        .map(|(n, c)| solver::ddim_sample(&models.sched, &net, n, c, steps, omega))
        .collect()
}

pub fn student_samples(
    models: &Models,
    student: &ParamStore,
    set: &EvalSet,
    nfe: usize,
) -> Result<Vec<Array>> {
    let net = models.student(student);
    set.noises
        .iter()
        .zip(&set.conds)
        .zip(&set.clip_seeds)
        .map(|((n, c), &s)| {
            solver::lcm_multistep(&models.sched, &net, n, c, nfe, &mut Prng::new(s))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodScore {
    pub method: String,
    pub nfe: usize,
    pub toy_frechet: f64,
    pub lip_sync: f64,
    pub heatmap_mass: f64,
}

pub fn score_method(
    method: &str,
    nfe: usize,
    samples: &[Array],
    set: &EvalSet,
    proj: &Projection,
    cfg: &RunConfig,
) -> Result<MethodScore> {
    score_clips(method, nfe, samples, &set.real, &set.amplitudes, proj, cfg)
}

/// Toy Fréchet against `real`, mean lip-sync against `amplitudes` and mean
/// motion mass of `samples`.
pub fn score_clips(
    method: &str,
    nfe: usize,
    samples: &[Array],
    real: &[Array],
    amplitudes: &[Vec<f64>],
    proj: &Projection,
    cfg: &RunConfig,
) -> Result<MethodScore> {
    if samples.len() != amplitudes.len() {
        return Err(Error::invalid(format!(
            "{} samples but {} amplitude tracks",
            samples.len(),
            amplitudes.len()
        )));
    }
    let fd = eval::toy_frechet(samples, real, proj)?;
    let mut lip = 0.0;
    let mut mass = 0.0;
    for (s, a) in samples.iter().zip(amplitudes) {
        lip += eval::lip_sync(s, a, &cfg.data)?.correlation;
        mass += eval::heatmap_mass(s)?;
    }
    let n = samples.len() as f64;
    Ok(MethodScore {
        method: method.into(),
        nfe,
        toy_frechet: fd,
        lip_sync: lip / n,
        heatmap_mass: mass / n,
    })
}

pub fn metrics_csv(scores: &[MethodScore]) -> String {
    let mut s = String::from("method,nfe,toy_frechet,lip_sync,heatmap_mass\n");
    for m in scores {
        let _ = writeln!(
            s,
            "{},{},{:e},{:e},{:e}",
            m.method, m.nfe, m.toy_frechet, m.lip_sync, m.heatmap_mass
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RollingRow {
    pub level: usize,
    pub identity_distance: f64,
    pub heatmap_mass: f64,
}

/// Consecutive held-out fragments of a few videos, all sharing the
/// reference frame picked for their video.
#[derive(Debug, Clone)]
pub struct RollingSet {
    pub videos: Vec<RollingVideo>,
}

#[derive(Debug, Clone)]
pub struct RollingVideo {
    pub conds: Vec<Conditioning>,
    pub real: Vec<Array>,
    pub amplitudes: Vec<Vec<f64>>,
    pub seed: u64,
}

impl RollingSet {
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        let heldout = Dataset::heldout(cfg.seed, &cfg.data)?;
        let d = &cfg.data;
        let e = &cfg.eval;
        let mut rng = Prng::with_stream_id(cfg.seed, Stream::Eval as u64 + 100);
        let mut videos = Vec::new();
        for k in 0..e.rolling_videos {
            let v = &heldout.videos[k % heldout.len()];
            let r = rng.uniform_int(0, v.len() - 1);
            let mut rv = RollingVideo {
                conds: Vec::new(),
                real: Vec::new(),
                amplitudes: Vec::new(),
                seed: 0,
            };
            for j in 0..e.rolling_fragments {
                let start = d.start_margin + j * d.frames;
                if start + d.frames > v.len() {
                    return Err(Error::Config {
                        path: "eval.rolling_fragments".into(),
                        message: format!(
                            "{} fragments do not fit in videos of length {}",
                            e.rolling_fragments,
                            v.len()
                        ),
                    });
                }
                let t = make_tuple_with_reference(v, start as i64, r, d)?;
                rv.conds.push(Conditioning::from_tuple(&t));
                rv.amplitudes
                    .push(v.audio.amplitude()[start..start + d.frames].to_vec());
                rv.real.push(t.x0);
            }
            rv.seed = rng.next_u64();
            videos.push(rv);
        }
        Ok(Self { videos })
    }
}

/// Rolling sampling of every video in `set` starting from noise level `level`.
pub fn rolling_generate(
    models: &Models,
    student: &ParamStore,
    set: &RollingSet,
    level: usize,
    first: FirstFragment,
) -> Result<Vec<Vec<Array>>> {
    let net = models.student(student);
    let shape = models.backbone.geo.clip_shape();
    set.videos
        .iter()
        .map(|v| {
            solver::rolling_sample(
                &models.sched,
                &net,
                &v.conds,
                level,
                first,
                &shape,
                &mut Prng::new(v.seed),
            )
        })
        .collect()
}

/// Combined rolling sampling on held-out videos at each noise level.
/// Metrics average over the fragments after the first.
pub fn rolling_sweep(
    models: &Models,
    student: &ParamStore,
    cfg: &RunConfig,
    levels: &[usize],
) -> Result<Vec<RollingRow>> {
    let set = RollingSet::build(cfg)?;
    let mut rows = Vec::with_capacity(levels.len());
    for &level in levels {
        let frags = rolling_generate(models, student, &set, level, FirstFragment::Gaussian)?;
        let (mut id, mut mass, mut n) = (0.0, 0.0, 0.0);
        for (v, fs) in set.videos.iter().zip(&frags) {
            for f in &fs[1..] {
                id += eval::identity_distance(f, &v.conds[0].reference)?;
                mass += eval::heatmap_mass(f)?;
                n += 1.0;
            }
        }
        rows.push(RollingRow {
            level,
            identity_distance: id / n,
            heatmap_mass: mass / n,
        });
    }
    Ok(rows)
}

pub fn rolling_csv(rows: &[RollingRow]) -> String {
    let mut s = String::from("level,identity_distance,heatmap_mass\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:e},{:e}",
            r.level, r.identity_distance, r.heatmap_mass
        );
    }
    s
}

/// Spearman correlations of identity distance and motion mass with the
/// noise level; both are expected to be positive.
pub fn rolling_trends(rows: &[RollingRow]) -> (Option<f64>, Option<f64>) {
    let lv: Vec<f64> = rows.iter().map(|r| r.level as f64).collect();
    let id: Vec<f64> = rows.iter().map(|r| r.identity_distance).collect();
    let mm: Vec<f64> = rows.iter().map(|r| r.heatmap_mass).collect();
    (eval::spearman(&lv, &id), eval::spearman(&lv, &mm))
}

/// Mean discriminator score on held-out real clips minus the mean on the
/// student's predictions from the same noised clips.
pub fn disc_separation(
    models: &Models,
    w: &Weights,
    set: &EvalSet,
    cfg: &RunConfig,
) -> Result<(f64, f64)> {
    let (Some(student), Some(disc)) = (&w.student, &w.disc) else {
        return Err(Error::invalid(
            "discriminator separation needs student and discriminator weights",
        ));
    };
    let mut rng = Prng::with_stream_id(cfg.seed, Stream::Eval as u64 + 200);
    let net = models.student(student);
    let (mut real, mut fake) = (0.0, 0.0);
    for (x0, c) in set.real.iter().zip(&set.conds) {
        let t = schedule::sample_t_uniform(&mut rng, models.sched.steps());
        let eps = rng.normal_array(x0.shape());
        let dt = schedule::sample_dt(&mut rng, cfg.stage1.max_dt);
        let x_t = models.sched.forward_noise(x0, &eps, t)?;
        let pred = net.x0(&x_t, t, c)?;
        for (sample, acc) in [(x0, &mut real), (&pred, &mut fake)] {
            let e = rng.normal_array(x0.shape());
            let noised = models.sched.forward_noise(sample, &e, dt)?;
            let mut g = Graph::no_grad();
            let tp = Bound::frozen(&mut g, &w.teacher);
            let dp = Bound::frozen(&mut g, disc);
            let x = g.constant(noised);
            let out = models.backbone.forward(&mut g, &tp, x, dt, c)?;
            let s = models.disc.forward(&mut g, &dp, &out.taps)?;
            *acc += g.value(s).item()?;
        }
    }
    let n = set.len() as f64;
    Ok((real / n, fake / n))
}

/// Weights of one run, stored under `teacher/`, `student/` and `disc/`.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub teacher: ParamStore,
    pub student: Option<ParamStore>,
    pub disc: Option<ParamStore>,
}

impl Weights {
    pub fn combined(&self) -> ParamStore {
        let mut p = self.teacher.prefixed(TEACHER);
        if let Some(s) = &self.student {
            p.extend(s.prefixed(STUDENT));
        }
        if let Some(d) = &self.disc {
            p.extend(d.prefixed(DISC));
        }
        p
    }

    pub fn from_combined(p: &ParamStore) -> Result<Self> {
        let teacher = p.strip_prefix(TEACHER);
        if teacher.is_empty() {
            return Err(Error::Checkpoint(
                "checkpoint holds no teacher weights".into(),
            ));
        }
        let opt = |prefix| {
            let s = p.strip_prefix(prefix);
            (!s.is_empty()).then_some(s)
        };
        Ok(Self {
            teacher,
            student: opt(STUDENT),
            disc: opt(DISC),
        })
    }

    pub fn checkpoint(&self, phase: Phase, iteration: u64, cfg: &RunConfig) -> Checkpoint {
        let sched = ScheduleInfo {
            steps: cfg.schedule.steps,
            beta_min: cfg.schedule.beta_min,
            beta_max: cfg.schedule.beta_max,
        };
        Checkpoint::new(
            phase.as_str(),
            iteration,
            sched,
            cfg.to_json(),
            self.combined(),
        )
    }

    pub fn load(path: &Path) -> Result<(Self, Checkpoint)> {
        let ck = Checkpoint::load(path)?;
        Ok((Self::from_combined(&ck.params)?, ck))
    }
}

pub fn run_teacher(
    models: &Models,
    cfg: &RunConfig,
    data: &Dataset,
    log: &mut TrainLog,
) -> Result<(ParamStore, TeacherStats)> {
    let mut teacher = models.init_teacher(cfg.seed);
    let stats = train::train_teacher(models, cfg, data, &mut teacher, log)?;
    Ok((teacher, stats))
}

/// Stage I from a trained teacher: the student starts as a copy of the
/// teacher, the discriminator from a fresh init (or `disc` if given).
pub fn run_stage1(
    models: &Models,
    cfg: &RunConfig,
    data: &Dataset,
    teacher: &ParamStore,
    log: &mut TrainLog,
) -> Result<Weights> {
    let mut student = teacher.clone();
    if cfg.stage1.reset_input_gate {
        models.backbone.zero_gate(&mut student);
    }
    let mut disc = models.init_disc(cfg.seed);
    train::train_stage1(
        models,
        cfg,
        data,
        Distill {
            teacher,
            student: &mut student,
            disc: &mut disc,
        },
        log,
    )?;
    Ok(Weights {
        teacher: teacher.clone(),
        student: Some(student),
        disc: Some(disc),
    })
}

/// Stage II continuing from stage-I weights, discriminator included.
pub fn run_stage2(
    models: &Models,
    cfg: &RunConfig,
    data: &Dataset,
    stage1: &Weights,
    log: &mut TrainLog,
) -> Result<Weights> {
    let mut student = stage1
        .student
        .clone()
        .ok_or_else(|| Error::Checkpoint("stage-I weights hold no student".into()))?;
    let mut disc = stage1
        .disc
        .clone()
        .unwrap_or_else(|| models.init_disc(cfg.seed));
    train::train_stage2(
        models,
        cfg,
        data,
        Distill {
            teacher: &stage1.teacher,
            student: &mut student,
            disc: &mut disc,
        },
        log,
    )?;
    Ok(Weights {
        teacher: stage1.teacher.clone(),
        student: Some(student),
        disc: Some(disc),
    })
}

/// Stage-I variants compared by the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    AdvLcm,
    PlainLcm,
    NoProgressive,
    NoMotion,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::AdvLcm => "adv_lcm",
            Variant::PlainLcm => "lcm",
            Variant::NoProgressive => "adv_lcm_no_progressive",
            Variant::NoMotion => "adv_lcm_no_motion",
        }
    }

    pub fn apply(self, cfg: &RunConfig) -> RunConfig {
        let mut c = cfg.clone();
        match self {
            Variant::AdvLcm => {}
            Variant::PlainLcm => {
                c.stage1.gamma = 0.0;
                c.stage1.lambda = 0.0;
                c.stage1.motion_weight = 0.0;
                c.stage1.discriminator = false;
            }
            Variant::NoProgressive => c.stage1.progressive = false,
            Variant::NoMotion => c.stage1.motion_weight = 0.0,
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineReport {
    pub seed: u64,
    /// Teacher DDIM score, the baseline `B`.
    pub teacher_frechet: f64,
    pub noise_frechet: f64,
    pub scores: Vec<MethodScore>,
    pub disc_real: f64,
    pub disc_fake: f64,
    pub rolling: Vec<RollingRow>,
    pub teacher_dropout_rate: f64,
}

impl PipelineReport {
    pub fn frechet(&self, method: &str, nfe: usize) -> Option<f64> {
        self.scores
            .iter()
            .find(|s| s.method == method && s.nfe == nfe)
            .map(|s| s.toy_frechet)
    }

    pub fn score(&self, method: &str, nfe: usize) -> Option<&MethodScore> {
        self.scores
            .iter()
            .find(|s| s.method == method && s.nfe == nfe)
    }
}

/// Which parts of the pipeline to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PipelinePlan {
    pub ablations: bool,
    pub stage2: bool,
    pub rolling: bool,
}

impl Default for PipelinePlan {
    fn default() -> Self {
        Self {
            ablations: true,
            stage2: true,
            rolling: true,
        }
    }
}

fn write(dir: Option<&Path>, name: &str, text: &str) -> Result<()> {
    if let Some(d) = dir {
        std::fs::create_dir_all(d)?;
        std::fs::write(d.join(name), text)?;
    }
    Ok(())
}

/// Teacher, stage-I variants, stage II and every evaluation for one seed.
/// With `out`, logs, checkpoints and metric tables are written there.
pub fn run_pipeline(
    cfg: &RunConfig,
    plan: PipelinePlan,
    out: Option<&Path>,
    mut progress: impl FnMut(&str),
) -> Result<PipelineReport> {
    cfg.validate()?;
    let models = Models::new(cfg)?;
    let data = Dataset::train(cfg.seed, &cfg.data)?;
    let set = EvalSet::build(cfg)?;
    let proj = Projection::new(
        models.backbone.geo.frame_size() * cfg.data.frames,
        cfg.eval.projection_dim,
        cfg.eval.projection_seed,
    );
    write(out, "config.json", &(cfg.to_pretty_json() + "\n"))?;

    progress("teacher");
    let mut tlog = TrainLog::default();
    let (teacher, stats) = run_teacher(&models, cfg, &data, &mut tlog)?;
    write(out, "teacher_log.csv", &tlog.to_csv())?;
    let tw = Weights {
        teacher: teacher.clone(),
        student: None,
        disc: None,
    };
    if let Some(d) = out {
        tw.checkpoint(Phase::Teacher, cfg.model.teacher_iterations, cfg)
            .save(d, "teacher")?;
    }
    let mut scores = Vec::new();
    let teacher_clips = teacher_samples(
        &models,
        &teacher,
        &set,
        cfg.eval.teacher_steps,
        cfg.sampler.omega,
    )?;
    let b = score_method(
        "teacher",
        cfg.eval.teacher_steps,
        &teacher_clips,
        &set,
        &proj,
        cfg,
    )?;
    let teacher_frechet = b.toy_frechet;
    scores.push(b);
    let noise_frechet = eval::toy_frechet(&set.noises, &set.real, &proj)?;

    let mut variants = vec![Variant::AdvLcm, Variant::PlainLcm];
    if plan.ablations {
        variants.extend([Variant::NoProgressive, Variant::NoMotion]);
    }
    let mut adv = None;
    for v in variants {
        progress(v.name());
        let vcfg = v.apply(cfg);
        let mut log = TrainLog::default();
        let w = run_stage1(&models, &vcfg, &data, &teacher, &mut log)?;
        let student = w.student.as_ref().expect("stage I yields a student");
        write(out, &format!("{}_log.csv", v.name()), &log.to_csv())?;
        for nfe in [1, 2] {
            let clips = student_samples(&models, student, &set, nfe)?;
            scores.push(score_method(v.name(), nfe, &clips, &set, &proj, cfg)?);
        }
        if v == Variant::AdvLcm {
            if let Some(d) = out {
                w.checkpoint(Phase::Stage1, cfg.stage1.iterations, cfg)
                    .save(d, "stage1")?;
            }
            adv = Some(w);
        }
    }
    let adv = adv.expect("adv variant always runs");
    let (disc_real, disc_fake) = disc_separation(&models, &adv, &set, cfg)?;

    let mut rolling = Vec::new();
    if plan.stage2 {
        progress("stage2");
        let mut log = TrainLog::default();
        let osa = run_stage2(&models, cfg, &data, &adv, &mut log)?;
        write(out, "stage2_log.csv", &log.to_csv())?;
        if let Some(d) = out {
            osa.checkpoint(Phase::Stage2, cfg.stage2.iterations, cfg)
                .save(d, "stage2")?;
        }
        let student = osa.student.as_ref().expect("stage II yields a student");
        for nfe in [1, 2] {
            let clips = student_samples(&models, student, &set, nfe)?;
            scores.push(score_method("osa_lcm", nfe, &clips, &set, &proj, cfg)?);
        }
        if plan.rolling {
            progress("rolling");
            rolling = rolling_sweep(&models, student, cfg, &cfg.eval.rolling_levels)?;
            write(out, "rolling.csv", &rolling_csv(&rolling))?;
        }
    }
    write(out, "metrics.csv", &metrics_csv(&scores))?;
    let report = PipelineReport {
        seed: cfg.seed,
        teacher_frechet,
        noise_frechet,
        scores,
        disc_real,
        disc_fake,
        rolling,
        teacher_dropout_rate: stats.dropped as f64 / stats.iterations.max(1) as f64,
    };
    write(
        out,
        "report.json",
        &(serde_json::to_string_pretty(&report)? + "\n"),
    )?;
    Ok(report)
}
