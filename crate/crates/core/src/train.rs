//! Teacher pretraining and the two distillation stages.
//!
//! All loops use batch size 1 and update parameter stores in place, so a
//! caller still holds the last good weights if an iteration aborts.

use std::fmt::Write as _;

use crate::config::{EditConditioning, RunConfig};
use crate::error::{Error, Result};
use crate::losses::{self, GeneratorTerms};
use crate::ndcore::{adam_step, AdamState, Array, Graph, ParamStore, Prng, Stream, Var};
use crate::nets::{
    consistency_output, is_attention_param, Backbone, Bound, Conditioning, ConsistencyNet,
    Discriminator, EpsNet, Geometry,
};
use crate::schedule::{self, CmCoeffs, NoiseSchedule};
use crate::solver::{cfg_step, DataModel};
use crate::synthdata::Dataset;

/// Architecture, schedule and scalings shared by every network of a run.
#[derive(Debug, Clone)]
pub struct Models {
    pub backbone: Backbone,
    pub disc: Discriminator,
    pub sched: NoiseSchedule,
    pub coeffs: CmCoeffs,
}

impl Models {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            backbone: Backbone::new(cfg.model.backbone.clone(), Geometry::from_data(&cfg.data))?,
            disc: Discriminator::new(&cfg.model.backbone),
            sched: cfg.schedule()?,
            coeffs: cfg.coeffs(),
        })
    }

    pub fn teacher<'a>(&'a self, params: &'a ParamStore) -> EpsNet<'a> {
        EpsNet {
            backbone: &self.backbone,
            params,
        }
    }

    pub fn student<'a>(&'a self, params: &'a ParamStore) -> ConsistencyNet<'a> {
        ConsistencyNet {
            backbone: &self.backbone,
            params,
            coeffs: self.coeffs,
        }
    }

    pub fn init_teacher(&self, seed: u64) -> ParamStore {
        self.backbone.init(&mut Prng::stream(seed, Stream::Init))
    }

    pub fn init_disc(&self, seed: u64) -> ParamStore {
        // a separate stream id keeps the teacher init independent of this draw
        self.disc
            .init(&mut Prng::with_stream_id(seed, 64 + Stream::Init as u64))
    }

    /// Discriminator score of `sample` re-noised to `dt` with `eps`: the
    /// frozen teacher supplies features, the discriminator scores them.
    #[allow(clippy::too_many_arguments)]
    pub fn score(
        &self,
        g: &mut Graph<'_>,
        teacher: &Bound,
        disc: &Bound,
        sample: Var,
        eps: &Array,
        dt: usize,
        cond: &Conditioning,
    ) -> Result<Var> {
        let a = g.scale(sample, self.sched.alpha(dt))?;
        let e = g.constant(eps.scale(self.sched.beta(dt)));
        let x = g.add(a, e)?;
        let out = self.backbone.forward(g, teacher, x, dt, cond)?;
        self.disc.forward(g, disc, &out.taps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Teacher,
    Stage1,
    Stage2,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Teacher => "teacher",
            Phase::Stage1 => "stage1",
            Phase::Stage2 => "stage2",
        }
    }
}

/// One row of the training log. Terms that do not apply to an iteration
/// are left empty; teacher rows report the noise-prediction MSE in the
/// consistency column.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub iter: u64,
    pub phase: Phase,
    pub consistency: Option<f64>,
    pub boundary: Option<f64>,
    pub adversarial: Option<f64>,
    pub motion: Option<f64>,
    pub disc_loss: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

pub const LOG_HEADER: &str = "iter,phase,consistency,boundary,adversarial,motion,disc_loss,lr";

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        let mut s = String::from(LOG_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{:e}",
                r.iter,
                r.phase.as_str(),
                cell(r.consistency),
                cell(r.boundary),
                cell(r.adversarial),
                cell(r.motion),
                cell(r.disc_loss),
                r.lr
            );
        }
        s
    }

    /// Values of the consistency column for one phase.
    pub fn consistency(&self, phase: Phase) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.phase == phase)
            .filter_map(|r| r.consistency)
            .collect()
    }
}

fn abort(phase: Phase, iter: u64) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(what) => {
            Error::NonFinite(format!("{} iteration {iter}: {what}", phase.as_str()))
        }
        other => other,
    }
}

/// Counts of teacher-training events, for checking the dropout rate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TeacherStats {
    pub iterations: u64,
    pub dropped: u64,
}

/// Noise-prediction pretraining with joint audio/reference dropout.
pub fn train_teacher(
    models: &Models,
    cfg: &RunConfig,
    data: &Dataset,
    params: &mut ParamStore,
    log: &mut TrainLog,
) -> Result<TeacherStats> {
    let mut data_rng = Prng::stream(cfg.seed, Stream::Data);
    let mut noise_rng = Prng::stream(cfg.seed, Stream::Noise);
    let mut drop_rng = Prng::stream(cfg.seed, Stream::Dropout);
    let mut adam = AdamState::new();
    let mut stats = TeacherStats::default();
    let lr = cfg.model.teacher_lr;
    let steps = models.sched.steps();
    for i in 1..=cfg.model.teacher_iterations {
        let tuple = data.sample_tuple(&mut data_rng)?;
        let t = schedule::sample_t_uniform(&mut noise_rng, steps);
        let eps = noise_rng.normal_array(tuple.x0.shape());
        let dropped = drop_rng.uniform() < cfg.model.cond_dropout;
        stats.iterations += 1;
        stats.dropped += dropped as u64;
        let mut cond = Conditioning::from_tuple(&tuple);
        if dropped {
            cond = cond.unconditional();
        }
        let x_t = models.sched.forward_noise(&tuple.x0, &eps, t)?;
        let (loss, grads) = {
            let mut g = Graph::new();
            let p = Bound::all(&mut g, params);
            let xv = g.constant(x_t);
            let out = models
                .backbone
                .forward(&mut g, &p, xv, t, &cond)
                .map_err(abort(Phase::Teacher, i))?;
            let ev = g.constant(eps);
            let d = g.sub(out.output, ev)?;
            let sq = g.mul(d, d)?;
            let loss = g.mean(sq)?;
            let grads = g.backward(loss)?;
            (g.value(loss).item()?, g.param_grads(&grads, params))
        };
        adam_step(params, &grads, lr, &mut adam).map_err(abort(Phase::Teacher, i))?;
        log.rows.push(LogRow {
            iter: i,
            phase: Phase::Teacher,
            consistency: Some(loss),
            boundary: None,
            adversarial: None,
            motion: None,
            disc_loss: None,
            lr,
        });
    }
    Ok(stats)
}

fn trainable_grads(
    g: &Graph<'_>,
    grads: &crate::ndcore::Grads,
    store: &ParamStore,
    attention_only: bool,
) -> std::collections::BTreeMap<String, Array> {
    let mut all = g.param_grads(grads, store);
    if attention_only {
        all.retain(|name, _| is_attention_param(name));
    }
    all
}

/// Generator and discriminator weights being distilled.
pub struct Distill<'a> {
    pub teacher: &'a ParamStore,
    pub student: &'a mut ParamStore,
    pub disc: &'a mut ParamStore,
}

/// Stage-I adversarial consistency distillation.
///
/// Odd iterations update the student: a guided teacher solver step from
/// `t` to `t - s` gives the stop-gradient target `f(x_{t-s}, t-s)`, and the
/// loss adds the distance to ground truth, the hinge adversarial term on a
/// `dt`-renoised prediction, and the motion loss. Even iterations update
/// the discriminator on real versus predicted clips sharing one `dt` draw,
/// with its timestep range widened by its own update count.
pub fn train_stage1(
    models: &Models,
    cfg: &RunConfig,
    data: &Dataset,
    w: Distill<'_>,
    log: &mut TrainLog,
) -> Result<()> {
    let s1 = &cfg.stage1;
    let steps = models.sched.steps();
    let gap = cfg.sampler.gap(steps);
    let omega = cfg.sampler.omega;
    let mut data_rng = Prng::stream(cfg.seed, Stream::Data);
    let mut noise_rng = Prng::stream(cfg.seed, Stream::Noise);
    let mut disc_rng = Prng::stream(cfg.seed, Stream::Sampler);
    let mut gen_adam = AdamState::new();
    let mut disc_adam = AdamState::new();
    let mut disc_updates = 0u64;
    let teacher = models.teacher(w.teacher);
    for i in 1..=s1.iterations {
        let lr = if s1.halve_lr_at_midpoint && i > s1.iterations / 2 {
            s1.lr * 0.5
        } else {
            s1.lr
        };
        let fail = abort(Phase::Stage1, i);
        if i % 2 == 1 {
            let tuple = data.sample_tuple(&mut data_rng)?;
            let cond = Conditioning::from_tuple(&tuple);
            let t = schedule::sample_t_uniform(&mut noise_rng, steps);
            let eps = noise_rng.normal_array(tuple.x0.shape());
            let dt = schedule::sample_dt(&mut noise_rng, s1.max_dt);
            let eps_dt = noise_rng.normal_array(tuple.x0.shape());
            let x_t = models.sched.forward_noise(&tuple.x0, &eps, t)?;
            let target = if t == 0 {
                x_t.clone()
            } else {
                let t_prev = t.saturating_sub(gap);
                let x_prev = cfg_step(&models.sched, &teacher, &x_t, t, t_prev, &cond, omega)
                    .map_err(&fail)?;
                models
                    .student(w.student)
                    .x0(&x_prev, t_prev, &cond)
                    .map_err(&fail)?
            };
            let (row, grads) = {
                let mut g = Graph::new();
                let sp = Bound::all(&mut g, w.student);
                let xv = g.constant(x_t);
                let pred =
                    consistency_output(&mut g, &models.backbone, &sp, &models.coeffs, xv, t, &cond)
                        .map_err(&fail)?;
                let tv = g.constant(target);
                let gt = g.constant(tuple.x0.clone());
                let delta = s1.huber_delta;
                let consistency = losses::huber_graph(&mut g, tv, pred, delta)?;
                let boundary_gt = losses::huber_graph(&mut g, pred, gt, delta)?;
                let adversarial = if s1.discriminator && s1.lambda > 0.0 {
                    let tp = Bound::frozen(&mut g, w.teacher);
                    let dp = Bound::frozen(&mut g, w.disc);
                    let score = models
                        .score(&mut g, &tp, &dp, pred, &eps_dt, dt, &cond)
                        .map_err(&fail)?;
                    Some(losses::adv_loss_graph(&mut g, score)?)
                } else {
                    None
                };
                let motion = if s1.motion_weight > 0.0 {
                    Some(losses::motion_loss_graph(&mut g, gt, pred, s1.motion_mode)?)
                } else {
                    None
                };
                let terms = GeneratorTerms {
                    consistency,
                    boundary_gt,
                    adversarial,
                    motion,
                };
                let total = terms.total(&mut g, &s1.weights())?;
                let b = terms.breakdown(&g, total)?;
                let grads = g.backward(total).map_err(&fail)?;
                let row = LogRow {
                    iter: i,
                    phase: Phase::Stage1,
                    consistency: Some(b.consistency),
                    boundary: Some(b.boundary_gt),
                    adversarial: adversarial.map(|_| b.adversarial),
                    motion: motion.map(|_| b.motion),
                    disc_loss: None,
                    lr,
                };
                (
                    row,
                    trainable_grads(&g, &grads, w.student, s1.attention_only),
                )
            };
            adam_step(w.student, &grads, lr, &mut gen_adam).map_err(&fail)?;
            log.rows.push(row);
        } else if s1.discriminator {
            disc_updates += 1;
            let tuple = data.sample_tuple(&mut data_rng)?;
            let cond = Conditioning::from_tuple(&tuple);
            let t = if s1.progressive {
                schedule::sample_t_progressive(disc_updates, &mut disc_rng, steps)?
            } else {
                schedule::sample_t_uniform(&mut disc_rng, steps)
            };
            let eps = disc_rng.normal_array(tuple.x0.shape());
            let dt = schedule::sample_dt(&mut disc_rng, s1.max_dt);
            let eps_real = disc_rng.normal_array(tuple.x0.shape());
            let eps_fake = disc_rng.normal_array(tuple.x0.shape());
            let x_t = models.sched.forward_noise(&tuple.x0, &eps, t)?;
            let fake = models
                .student(w.student)
                .x0(&x_t, t, &cond)
                .map_err(&fail)?;
            let lr_d = lr * s1.disc_lr_ratio;
            let loss = disc_update(
                models,
                w.teacher,
                w.disc,
                &tuple.x0,
                &fake,
                [&eps_real, &eps_fake],
                dt,
                &cond,
                lr_d,
                &mut disc_adam,
            )
            .map_err(&fail)?;
            log.rows.push(LogRow {
                iter: i,
                phase: Phase::Stage1,
                consistency: None,
                boundary: None,
                adversarial: None,
                motion: None,
                disc_loss: Some(loss),
                lr: lr_d,
            });
        }
    }
    Ok(())
}

/// One hinge-loss discriminator update; returns the loss before the step.
#[allow(clippy::too_many_arguments)]
fn disc_update(
    models: &Models,
    teacher: &ParamStore,
    disc: &mut ParamStore,
    real: &Array,
    fake: &Array,
    eps: [&Array; 2],
    dt: usize,
    cond: &Conditioning,
    lr: f64,
    adam: &mut AdamState,
) -> Result<f64> {
    let (loss, grads) = {
        let mut g = Graph::new();
        let tp = Bound::frozen(&mut g, teacher);
        let dp = Bound::all(&mut g, disc);
        let rv = g.constant(real.clone());
        let fv = g.constant(fake.clone());
        let sr = models.score(&mut g, &tp, &dp, rv, eps[0], dt, cond)?;
        let sf = models.score(&mut g, &tp, &dp, fv, eps[1], dt, cond)?;
        let loss = losses::disc_loss_graph(&mut g, sr, sf)?;
        let grads = g.backward(loss)?;
        (g.value(loss).item()?, g.param_grads(&grads, disc))
    };
    adam_step(disc, &grads, lr, adam)?;
    Ok(loss)
}

/// Stage-II editing fine-tuning.
///
/// The student maps fragment `n`, noised to `t` in `[0.8 T, T]`, to
/// fragment `n + 1`. The consistency target comes from a guided teacher
/// solver step on the same noised fragment; the ground-truth and
/// adversarial terms compare against fragment `n + 1`. There is no motion
/// term. Discriminator iterations use the same timestep range.
pub fn train_stage2(
    models: &Models,
    cfg: &RunConfig,
    data: &Dataset,
    w: Distill<'_>,
    log: &mut TrainLog,
) -> Result<()> {
    let s2 = &cfg.stage2;
    let steps = models.sched.steps();
    let gap = cfg.sampler.gap(steps);
    let omega = cfg.sampler.omega;
    let seed = cfg.seed ^ 0x5eed_0002;
    let mut data_rng = Prng::stream(seed, Stream::Data);
    let mut noise_rng = Prng::stream(seed, Stream::Noise);
    let mut disc_rng = Prng::stream(seed, Stream::Sampler);
    let mut gen_adam = AdamState::new();
    let mut disc_adam = AdamState::new();
    let teacher = models.teacher(w.teacher);
    let lr = s2.lr;
    for i in 1..=s2.iterations {
        let fail = abort(Phase::Stage2, i);
        let (rng, is_gen) = if i % 2 == 1 {
            (&mut noise_rng, true)
        } else {
            (&mut disc_rng, false)
        };
        let pair = data.sample_pair(&mut data_rng)?;
        let cond = match s2.condition_on {
            EditConditioning::Target => Conditioning::from_tuple(&pair.next),
            EditConditioning::Source => Conditioning::from_tuple(&pair.current),
        };
        let t = schedule::sample_t_eft(rng, steps);
        let eps = rng.normal_array(pair.current.x0.shape());
        let dt = schedule::sample_dt(rng, s2.max_dt);
        let x_t = models.sched.forward_noise(&pair.current.x0, &eps, t)?;
        let gt = &pair.next.x0;
        let disc_cond = Conditioning::from_tuple(&pair.next);
        if is_gen {
            let eps_dt = rng.normal_array(gt.shape());
            let t_prev = t - gap.min(t);
            let x_prev =
                cfg_step(&models.sched, &teacher, &x_t, t, t_prev, &cond, omega).map_err(&fail)?;
            let target = models
                .student(w.student)
                .x0(&x_prev, t_prev, &cond)
                .map_err(&fail)?;
            let (row, grads) = {
                let mut g = Graph::new();
                let sp = Bound::all(&mut g, w.student);
                let xv = g.constant(x_t);
                let pred =
                    consistency_output(&mut g, &models.backbone, &sp, &models.coeffs, xv, t, &cond)
                        .map_err(&fail)?;
                let tv = g.constant(target);
                let gv = g.constant(gt.clone());
                let delta = s2.huber_delta;
                let consistency = losses::huber_graph(&mut g, tv, pred, delta)?;
                let boundary_gt = losses::huber_graph(&mut g, pred, gv, delta)?;
                let adversarial = if s2.lambda > 0.0 {
                    let tp = Bound::frozen(&mut g, w.teacher);
                    let dp = Bound::frozen(&mut g, w.disc);
                    let score = models
                        .score(&mut g, &tp, &dp, pred, &eps_dt, dt, &disc_cond)
                        .map_err(&fail)?;
                    Some(losses::adv_loss_graph(&mut g, score)?)
                } else {
                    None
                };
                let terms = GeneratorTerms {
                    consistency,
                    boundary_gt,
                    adversarial,
                    motion: None,
                };
                let total = terms.total(&mut g, &s2.weights())?;
                let b = terms.breakdown(&g, total)?;
                let grads = g.backward(total).map_err(&fail)?;
                let row = LogRow {
                    iter: i,
                    phase: Phase::Stage2,
                    consistency: Some(b.consistency),
                    boundary: Some(b.boundary_gt),
                    adversarial: adversarial.map(|_| b.adversarial),
                    motion: None,
                    disc_loss: None,
                    lr,
                };
                (
                    row,
                    trainable_grads(&g, &grads, w.student, s2.attention_only),
                )
            };
            adam_step(w.student, &grads, lr, &mut gen_adam).map_err(&fail)?;
            log.rows.push(row);
        } else {
            let eps_real = rng.normal_array(gt.shape());
            let eps_fake = rng.normal_array(gt.shape());
            let fake = models
                .student(w.student)
                .x0(&x_t, t, &cond)
                .map_err(&fail)?;
            let lr_d = lr * s2.disc_lr_ratio;
            let loss = disc_update(
                models,
                w.teacher,
                w.disc,
                gt,
                &fake,
                [&eps_real, &eps_fake],
                dt,
                &disc_cond,
                lr_d,
                &mut disc_adam,
            )
            .map_err(&fail)?;
            log.rows.push(LogRow {
                iter: i,
                phase: Phase::Stage2,
                consistency: None,
                boundary: None,
                adversarial: None,
                motion: None,
                disc_loss: Some(loss),
                lr: lr_d,
            });
        }
    }
    Ok(())
}
