//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.

use std::path::Path;
use std::time::Instant;

use avatar_lcm::config::RunConfig;
use avatar_lcm::error::Result;
use avatar_lcm::experiments::{self, PipelinePlan, PipelineReport, RollingRow};
use avatar_lcm::losses::{self, GeneratorTerms, MotionMode};
use avatar_lcm::ndcore::{grad_check, Array, Graph, ParamStore, Prng};
use avatar_lcm::nets::{consistency_output, Bound, Conditioning};
use avatar_lcm::schedule::{self, LossWeights, NoiseSchedule};
use avatar_lcm::solver::{self, DataModel, EpsModel};
use avatar_lcm::synthdata::AUDIO_DIM;
use avatar_lcm::train::Models;

type Criterion = fn() -> Result<Outcome>;
type PipelineCriterion = fn(&[PipelineReport]) -> Outcome;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_cond(rng: &mut Prng, models: &Models) -> Conditioning {
    let geo = models.backbone.geo;
    Conditioning::new(
        rng.normal_array(&[geo.frames, geo.window, AUDIO_DIM]),
        rng.normal_array(&[geo.channels, geo.height, geo.width]),
        rng.normal_array(&[geo.channels, geo.past, geo.height, geo.width]),
    )
}

fn perturbed(store: &ParamStore, rng: &mut Prng, scale: f64) -> ParamStore {
    let mut p = store.clone();
    let names: Vec<String> = p.names().cloned().collect();
    for n in names {
        for v in p.get_mut(&n).unwrap().data_mut() {
            *v += scale * rng.normal();
        }
    }
    p
}

fn boundary() -> Result<Outcome> {
    let cfg = RunConfig::small();
    let models = Models::new(&cfg)?;
    let mut rng = Prng::new(11);
    let mut worst: f64 = 0.0;
    for k in 0..100 {
        let p = perturbed(&models.init_teacher(k), &mut rng, 0.5);
        let x = rng
            .normal_array(&models.backbone.geo.clip_shape())
            .scale(3.0);
        let cond = random_cond(&mut rng, &models);
        let y = models.student(&p).x0(&x, 0, &cond)?;
        worst = worst.max(y.max_abs_diff(&x)?);
    }
    Ok(outcome(
        worst < 1e-12,
        format!("max |f(x, 0) - x| = {worst:.3e} over 100 weight draws"),
    ))
}

fn gradients() -> Result<Outcome> {
    let mut cfg = RunConfig::small();
    cfg.model.backbone.width = 8;
    cfg.model.backbone.time_dim = 4;
    cfg.model.backbone.disc_channels = 2;
    let models = Models::new(&cfg)?;
    let mut rng = Prng::new(12);
    let teacher = models.init_teacher(1);
    let student = perturbed(&teacher, &mut rng, 0.05);
    let disc = perturbed(&models.init_disc(1), &mut rng, 0.05);
    let mut all = student.prefixed("student/");
    all.extend(teacher.prefixed("teacher/"));
    all.extend(disc.prefixed("disc/"));

    let shape = models.backbone.geo.clip_shape();
    let cond = random_cond(&mut rng, &models);
    let x0 = rng.normal_array(&shape);
    let t = 600;
    let x_t = models
        .sched
        .forward_noise(&x0, &rng.normal_array(&shape), t)?;
    let target = models
        .student(&student)
        .x0(&rng.normal_array(&shape), 400, &cond)?;
    let eps_dt = rng.normal_array(&shape);
    let w = LossWeights {
        gamma: 0.05,
        lambda: 0.1,
        motion_weight: 1.0,
        huber_delta: 1e-3,
    };
    let start = Instant::now();
    let report = grad_check(
        |g, ps| {
            let sp = Bound::subset(g, ps, "student/", |_| true);
            let tp = Bound::subset(g, ps, "teacher/", |_| true);
            let dp = Bound::subset(g, ps, "disc/", |_| true);
            let xv = g.constant(x_t.clone());
            let pred = consistency_output(g, &models.backbone, &sp, &models.coeffs, xv, t, &cond)?;
            let tv = g.constant(target.clone());
            let gt = g.constant(x0.clone());
            let consistency = losses::huber_graph(g, tv, pred, w.huber_delta)?;
            let boundary_gt = losses::huber_graph(g, pred, gt, w.huber_delta)?;
            let score = models.score(g, &tp, &dp, pred, &eps_dt, 3, &cond)?;
            let adversarial = Some(losses::adv_loss_graph(g, score)?);
            let motion = Some(losses::motion_loss_graph(
                g,
                gt,
                pred,
                MotionMode::PerTransition,
            )?);
            GeneratorTerms {
                consistency,
                boundary_gt,
                adversarial,
                motion,
            }
            .total(g, &w)
        },
        &all,
        1e-3,
    )?;
    let frac = report.pass_fraction();
    let n: usize = report.params.iter().map(|p| p.elements).sum();
    Ok(outcome(
        frac >= 0.99,
        format!(
            "{:.4} of {n} entries within 1e-3 (max rel err {:.2e}, {:.0}s)",
            frac,
            report.max_rel_err(),
            start.elapsed().as_secs_f64()
        ),
    ))
}

fn brute_motion(a: &Array, b: &Array, scalar: bool) -> f64 {
    let s = a.shape();
    let (c, f, h, w) = (s[0], s[1], s[2], s[3]);
    let at = |x: &Array, ch: usize, k: usize, i: usize, j: usize| {
        x.data()[((ch * f + k) * h + i) * w + j]
    };
    let mut per = Vec::new();
    for k in 0..f - 1 {
        let mut da = 0.0;
        let mut db = 0.0;
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    da += at(a, ch, k + 1, i, j) - at(a, ch, k, i, j);
                    db += at(b, ch, k + 1, i, j) - at(b, ch, k, i, j);
                }
            }
        }
        let m = (c * h * w) as f64;
        per.push((da / m, db / m));
    }
    if scalar {
        let n = per.len() as f64;
        let ma: f64 = per.iter().map(|p| p.0).sum::<f64>() / n;
        let mb: f64 = per.iter().map(|p| p.1).sum::<f64>() / n;
        (ma - mb).powi(2)
    } else {
        per.iter().map(|(p, q)| (p - q).powi(2)).sum::<f64>() / per.len() as f64
    }
}

fn brute_huber(a: &Array, b: &Array, delta: f64) -> f64 {
    let sq: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    sq / ((sq + delta * delta).sqrt() + delta)
}

fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

fn graph_scalar(f: impl FnOnce(&mut Graph<'_>) -> Result<avatar_lcm::ndcore::Var>) -> Result<f64> {
    let mut g = Graph::no_grad();
    let v = f(&mut g)?;
    g.value(v).item()
}

fn loss_oracles() -> Result<Outcome> {
    let mut rng = Prng::new(13);
    let mut worst = [0.0f64; 6];
    for _ in 0..1000 {
        let shape = [
            rng.uniform_int(1, 3),
            rng.uniform_int(2, 6),
            rng.uniform_int(1, 4),
            rng.uniform_int(1, 4),
        ];
        let a = rng.normal_array(&shape).scale(rng.uniform_range(0.01, 5.0));
        let b = rng.normal_array(&shape);
        let delta = rng.uniform_range(1e-4, 1.0);
        let (r, f) = (rng.uniform_range(-3.0, 3.0), rng.uniform_range(-3.0, 3.0));
        let w = LossWeights {
            gamma: rng.uniform_range(0.0, 2.0),
            lambda: rng.uniform_range(0.0, 2.0),
            motion_weight: rng.uniform_range(0.0, 2.0),
            huber_delta: delta,
        };
        let terms = [rng.uniform(), rng.uniform(), rng.uniform(), rng.uniform()];

        let mut err = [0.0f64; 6];
        for (mode, scalar) in [
            (MotionMode::PerTransition, false),
            (MotionMode::Scalar, true),
        ] {
            let want = brute_motion(&a, &b, scalar);
            let got = losses::motion_loss(&a, &b, mode)?;
            let tape = graph_scalar(|g| {
                let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
                losses::motion_loss_graph(g, x, y, mode)
            })?;
            err[0] = err[0].max((got - want).abs()).max((tape - want).abs());
        }
        let want = brute_huber(&a, &b, delta);
        let tape = graph_scalar(|g| {
            let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
            losses::huber_graph(g, x, y, delta)
        })?;
        err[1] = (schedule::huber(&a, &b, delta)? - want)
            .abs()
            .max((tape - want).abs());

        let want = relu(1.0 - r) + relu(1.0 + f);
        let tape = graph_scalar(|g| {
            let (x, y) = (g.constant(Array::scalar(r)), g.constant(Array::scalar(f)));
            losses::disc_loss_graph(g, x, y)
        })?;
        err[2] = (losses::disc_loss(r, f) - want)
            .abs()
            .max((tape - want).abs());
        let want = relu(1.0 - f);
        let tape = graph_scalar(|g| {
            let y = g.constant(Array::scalar(f));
            losses::adv_loss_graph(g, y)
        })?;
        err[3] = (losses::adv_loss(f) - want).abs().max((tape - want).abs());

        let [c, bg, ad, mo] = terms;
        let want = c + w.gamma * bg + w.lambda * ad + w.motion_weight * mo;
        let tape = graph_scalar(|g| {
            let v: Vec<_> = terms
                .iter()
                .map(|&x| g.constant(Array::scalar(x)))
                .collect();
            GeneratorTerms {
                consistency: v[0],
                boundary_gt: v[1],
                adversarial: Some(v[2]),
                motion: Some(v[3]),
            }
            .total(g, &w)
        })?;
        err[4] = (losses::stage1_objective(c, bg, ad, mo, &w).total - want)
            .abs()
            .max((tape - want).abs());
        let want = c + w.gamma * bg + w.lambda * ad;
        err[5] = (losses::eft_objective(c, bg, ad, &w).total - want).abs();
        for (acc, e) in worst.iter_mut().zip(err) {
            *acc = acc.max(e);
        }
    }
    let names = ["motion", "huber", "disc", "adv", "stage1", "eft"];
    let detail = names
        .iter()
        .zip(&worst)
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    Ok(outcome(
        worst.iter().all(|&e| e < 1e-10),
        format!("max abs error over 1000 inputs: {detail}"),
    ))
}

fn schedule_laws() -> Result<Outcome> {
    let mut rng = Prng::new(14);
    let mut over = 0usize;
    for i in 1..=1_000_000u64 {
        let cap = (i.div_ceil(10)).min(1000) as usize;
        if schedule::sample_t_progressive(i, &mut rng, 1000)? > cap {
            over += 1;
        }
    }
    let mut eft_out = 0usize;
    for _ in 0..100_000 {
        if !(800..=1000).contains(&schedule::sample_t_eft(&mut rng, 1000)) {
            eft_out += 1;
        }
    }
    let mut counts = [0usize; 7];
    let n = 100_000;
    for _ in 0..n {
        counts[schedule::sample_dt(&mut rng, 5).min(6)] += 1;
    }
    let freq: Vec<f64> = counts[..6].iter().map(|&c| c as f64 / n as f64).collect();
    let dev = freq
        .iter()
        .map(|f| (f - 1.0 / 6.0).abs())
        .fold(0.0, f64::max);
    let pass = over == 0 && eft_out == 0 && counts[6] == 0 && dev <= 0.01;
    Ok(outcome(
        pass,
        format!("progressive over cap {over}/1e6, eft outside range {eft_out}/1e5, dt max freq deviation {dev:.4}"),
    ))
}

/// Exact noise predictor for data distributed as `N(mean, std^2)` per entry.
struct Gaussian<'a> {
    sched: &'a NoiseSchedule,
    mean: f64,
    std: f64,
}

impl EpsModel for Gaussian<'_> {
    fn eps(&self, x_t: &Array, t: usize, _c: &Conditioning) -> Result<Array> {
        let (a, b) = (self.sched.alpha(t), self.sched.beta(t));
        let var = a * a * self.std * self.std + b * b;
        Ok(x_t.map(|x| b * (x - a * self.mean) / var))
    }
}

fn solver_correctness() -> Result<Outcome> {
    let sched = NoiseSchedule::build(1000, 1e-4, 0.02)?;
    let model = Gaussian {
        sched: &sched,
        mean: 0.3,
        std: 0.5,
    };
    let cfg = RunConfig::small();
    let models = Models::new(&cfg)?;
    let mut rng = Prng::new(15);
    let cond = random_cond(&mut rng, &models);
    // the probability-flow map keeps the standardised value fixed
    let x0 = rng.normal_array(&[4096]).map(|z| 0.3 + 0.5 * z);
    let tt = sched.steps();
    let spread = (sched.alpha(tt).powi(2) * 0.25 + sched.beta(tt).powi(2)).sqrt();
    let x_t = x0.map(|x| sched.alpha(tt) * 0.3 + spread * (x - 0.3) / 0.5);
    let back = solver::ddim_sample(&sched, &model, &x_t, &cond, 1000, 0.0)?;
    let d = back.sub(&x0)?;
    let rmse = (d.data().iter().map(|v| v * v).sum::<f64>() / d.len() as f64).sqrt();

    let teacher = perturbed(&models.init_teacher(3), &mut rng, 0.1);
    let net = models.teacher(&teacher);
    let x = rng.normal_array(&models.backbone.geo.clip_shape());
    let mut exact = true;
    for (t, tn) in [(1000, 800), (500, 450), (37, 0)] {
        exact &= solver::cfg_step(&sched, &net, &x, t, tn, &cond, 0.0)?
            == solver::ode_step(&sched, &net, &x, t, tn, &cond)?;
        exact &= solver::cfg_step(&sched, &model, &x, t, tn, &cond, 0.0)?
            == solver::ode_step(&sched, &model, &x, t, tn, &cond)?;
    }
    Ok(outcome(
        rmse < 1e-2 && exact,
        format!("1000-step DDIM rmse {rmse:.2e}, guided step at zero weight bit-exact: {exact}"),
    ))
}

fn frechet(r: &PipelineReport, method: &str, nfe: usize) -> f64 {
    r.frechet(method, nfe).unwrap_or(f64::NAN)
}

fn count(reports: &[PipelineReport], f: impl Fn(&PipelineReport) -> bool) -> usize {
    reports.iter().filter(|r| f(r)).count()
}

fn ordering(reports: &[PipelineReport]) -> Outcome {
    let mut lines = Vec::new();
    for r in reports {
        lines.push(format!(
            "seed {}: B {:.3} noise {:.3} adv2 {:.3} osa1 {:.3} adv1 {:.3} lcm1 {:.3}",
            r.seed,
            r.teacher_frechet,
            r.noise_frechet,
            frechet(r, "adv_lcm", 2),
            frechet(r, "osa_lcm", 1),
            frechet(r, "adv_lcm", 1),
            frechet(r, "lcm", 1)
        ));
    }
    let a = count(reports, |r| {
        r.teacher_frechet.is_finite() && r.teacher_frechet < r.noise_frechet
    });
    let b = count(reports, |r| {
        frechet(r, "adv_lcm", 2) <= 1.5 * r.teacher_frechet
    });
    let c = count(reports, |r| {
        frechet(r, "osa_lcm", 1) < frechet(r, "adv_lcm", 1)
            && frechet(r, "adv_lcm", 1) < frechet(r, "lcm", 1)
    });
    let n = reports.len();
    outcome(
        a == n && b == n && c >= 2,
        format!("(a) {a}/{n} (b) {b}/{n} (c) {c}/{n}; {}", lines.join("; ")),
    )
}

fn ablations(reports: &[PipelineReport]) -> Outcome {
    let np = count(reports, |r| {
        frechet(r, "adv_lcm_no_progressive", 2) > frechet(r, "adv_lcm", 2)
    });
    let nm = count(reports, |r| {
        frechet(r, "adv_lcm_no_motion", 2) > frechet(r, "adv_lcm", 2)
    });
    let vals: Vec<String> = reports
        .iter()
        .map(|r| {
            format!(
                "seed {}: full {:.3} no_progressive {:.3} no_motion {:.3}",
                r.seed,
                frechet(r, "adv_lcm", 2),
                frechet(r, "adv_lcm_no_progressive", 2),
                frechet(r, "adv_lcm_no_motion", 2)
            )
        })
        .collect();
    outcome(
        np >= 2 && nm >= 2,
        format!(
            "worse without progressive {np}/3, without motion {nm}/3; {}",
            vals.join("; ")
        ),
    )
}

fn rolling(reports: &[PipelineReport]) -> Outcome {
    let levels: Vec<usize> = reports[0].rolling.iter().map(|r| r.level).collect();
    let n = reports.len() as f64;
    let mean: Vec<RollingRow> = levels
        .iter()
        .enumerate()
        .map(|(i, &level)| RollingRow {
            level,
            identity_distance: reports
                .iter()
                .map(|r| r.rolling[i].identity_distance)
                .sum::<f64>()
                / n,
            heatmap_mass: reports
                .iter()
                .map(|r| r.rolling[i].heatmap_mass)
                .sum::<f64>()
                / n,
        })
        .collect();
    let (id, mass) = experiments::rolling_trends(&mean);
    let (id, mass) = (id.unwrap_or(f64::NAN), mass.unwrap_or(f64::NAN));
    let csv = experiments::rolling_csv(&mean)
        .trim_end()
        .replace('\n', " | ");
    outcome(
        id > 0.0 && mass > 0.0,
        format!("spearman with level: identity distance {id:.2}, motion mass {mass:.2}; seed-mean table: {csv}"),
    )
}

fn lip_sync(reports: &[PipelineReport]) -> Outcome {
    let vals: Vec<f64> = reports
        .iter()
        .map(|r| r.score("osa_lcm", 1).map_or(f64::NAN, |s| s.lip_sync))
        .collect();
    let pass = vals.iter().all(|&v| v >= 0.5);
    outcome(pass, format!("one-step correlation per seed {vals:.3?}"))
}

fn dir_bytes(dir: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir)? {
        let e = e?;
        out.push((
            e.file_name().to_string_lossy().into_owned(),
            std::fs::read(e.path())?,
        ));
    }
    out.sort();
    Ok(out)
}

fn reproducibility() -> Result<Outcome> {
    let cfg = RunConfig::small();
    let tmp = tempfile::tempdir()?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    experiments::run_pipeline(&cfg, PipelinePlan::default(), Some(&a), |_| {})?;
    experiments::run_pipeline(&cfg, PipelinePlan::default(), Some(&b), |_| {})?;
    let (fa, fb) = (dir_bytes(&a)?, dir_bytes(&b)?);
    let names: Vec<&str> = fa.iter().map(|(n, _)| n.as_str()).collect();
    let has = |n: &str| names.contains(&n);
    let complete =
        has("metrics.csv") && has("stage1.bin") && has("stage2.bin") && has("teacher.bin");
    let same = fa == fb;
    Ok(outcome(
        complete && same,
        format!("{} files compared, byte-identical: {same}", fa.len()),
    ))
}

fn report(ok: &mut bool, idx: usize, name: &str, start: Instant, r: Result<Outcome>) {
    let o = r.unwrap_or_else(|e| outcome(false, format!("error: {e}")));
    *ok &= o.pass;
    let tag = if o.pass { "PASS" } else { "FAIL" };
    println!(
        "{tag} {idx:>2} {name}: {} [{:.1}s]",
        o.detail,
        start.elapsed().as_secs_f64()
    );
}

/// Criterion numbers given on the command line; all when none are.
fn selected() -> Vec<usize> {
    let picked: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    if picked.is_empty() {
        (1..=10).collect()
    } else {
        picked
    }
}

fn main() {
    let only = selected();
    let mut ok = true;
    let unit: [(&str, Criterion); 5] = [
        ("boundary condition", boundary),
        ("gradient integrity", gradients),
        ("loss oracles", loss_oracles),
        ("schedule laws", schedule_laws),
        ("solver correctness", solver_correctness),
    ];
    for (i, (name, f)) in unit.iter().enumerate() {
        if !only.contains(&(i + 1)) {
            continue;
        }
        let start = Instant::now();
        report(&mut ok, i + 1, name, start, f());
    }

    let start = Instant::now();
    let mut reports = Vec::new();
    let mut failed = None;
    let run_pipelines = (6..=9).any(|i| only.contains(&i));
    for seed in (0..3).filter(|_| run_pipelines) {
        let cfg = RunConfig {
            seed,
            ..RunConfig::default()
        };
        let t = Instant::now();
        match experiments::run_pipeline(&cfg, PipelinePlan::default(), None, |s| {
            eprintln!("[seed {seed}] {s}")
        }) {
            Ok(r) => {
                eprintln!("[seed {seed}] done in {:.0}s", t.elapsed().as_secs_f64());
                reports.push(r);
            }
            Err(e) => {
                failed = Some(format!("pipeline seed {seed}: {e}"));
                break;
            }
        }
    }
    let pipelines: [(&str, PipelineCriterion); 4] = [
        ("end-to-end ordering", ordering),
        ("ablations", ablations),
        ("rolling sweep trends", rolling),
        ("lip-sync floor", lip_sync),
    ];
    for (i, (name, f)) in pipelines.iter().enumerate() {
        if !only.contains(&(i + 6)) {
            continue;
        }
        let r = match &failed {
            Some(e) => Ok(outcome(false, e.clone())),
            None => Ok(f(&reports)),
        };
        report(&mut ok, i + 6, name, start, r);
    }

    if only.contains(&10) {
        let start = Instant::now();
        report(&mut ok, 10, "reproducibility", start, reproducibility());
    }
    if !ok {
        std::process::exit(1);
    }
}
