use avatar_lcm::checkpoint::{Checkpoint, ScheduleInfo};
use avatar_lcm::config::RunConfig;
use avatar_lcm::losses;
use avatar_lcm::ndcore::{Array, ParamStore, Prng};
use avatar_lcm::nets::Conditioning;
use avatar_lcm::schedule::{self, huber, CmCoeffs, NoiseSchedule};
use avatar_lcm::solver::{timestep_grid, DataModel};
use avatar_lcm::train::Models;
use proptest::prelude::*;

fn sched() -> NoiseSchedule {
    NoiseSchedule::build(1000, 1e-4, 0.02).unwrap()
}

fn vec_pair(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (
        prop::collection::vec(-5.0..5.0f64, n),
        prop::collection::vec(-5.0..5.0f64, n),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn huber_is_a_symmetric_premetric((a, b) in vec_pair(12), delta in 1e-4..1.0f64) {
        let a = Array::from_vec(a);
        let b = Array::from_vec(b);
        let ab = huber(&a, &b, delta).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, huber(&b, &a, delta).unwrap());
        prop_assert_eq!(huber(&a, &a, delta).unwrap(), 0.0);
        let l2 = a.sub(&b).unwrap().data().iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(ab <= l2 + 1e-12);
    }

    #[test]
    fn hinge_losses_are_nonnegative_and_monotone(r in -3.0..3.0f64, f in -3.0..3.0f64, d in 0.0..1.0f64) {
        let l = losses::disc_loss(r, f);
        prop_assert!(l >= 0.0);
        prop_assert!(losses::disc_loss(r + d, f) <= l);
        prop_assert!(losses::disc_loss(r, f - d) <= l);
        prop_assert!(losses::adv_loss(f + d) <= losses::adv_loss(f));
    }

    #[test]
    fn forward_noise_keeps_variance_preserved(t in 0usize..=1000) {
        let s = sched();
        let (a, b) = (s.alpha(t), s.beta(t));
        prop_assert!((a * a + b * b - 1.0).abs() < 1e-12);
        if t > 0 {
            prop_assert!(s.alpha(t) < s.alpha(t - 1));
        }
    }

    #[test]
    fn consistency_scalings_hit_the_boundary(sigma in 0.01..2.0f64, t in 0usize..=1000) {
        let c = CmCoeffs::new(sigma, 1000);
        prop_assert_eq!(c.c_skip(0), 1.0);
        prop_assert_eq!(c.c_out(0), 0.0);
        prop_assert!(c.c_skip(t) > 0.0 && c.c_skip(t) <= 1.0);
        prop_assert!(c.c_out(t) >= 0.0 && c.c_out(t) < 1.0);
    }

    #[test]
    fn progressive_draws_respect_the_cap(i in 1u64..20_000, seed in any::<u64>()) {
        let mut rng = Prng::new(seed);
        let cap = i.div_ceil(10).min(1000) as usize;
        for _ in 0..32 {
            prop_assert!(schedule::sample_t_progressive(i, &mut rng, 1000).unwrap() <= cap);
        }
        let t = schedule::sample_t_eft(&mut rng, 1000);
        prop_assert!((800..=1000).contains(&t));
        prop_assert!(schedule::sample_dt(&mut rng, 5) <= 5);
    }

    #[test]
    fn timestep_grids_decrease_with_uniform_gaps(k in 1usize..=1000) {
        let g = timestep_grid(1000, k).unwrap();
        prop_assert_eq!(g.len(), k);
        prop_assert_eq!(g[0], 1000);
        let s = 1000 / k;
        for w in g.windows(2) {
            prop_assert_eq!(w[0] - w[1], s);
        }
    }

    #[test]
    fn checkpoints_round_trip_any_store(seed in any::<u64>(), n in 1usize..5) {
        let mut rng = Prng::new(seed);
        let mut p = ParamStore::new();
        for i in 0..n {
            let len = rng.uniform_int(1, 6);
            p.insert(format!("w{i}"), rng.normal_array(&[len]));
        }
        let info = ScheduleInfo { steps: 1000, beta_min: 1e-4, beta_max: 0.02 };
        let dir = tempfile::tempdir().unwrap();
        let path = Checkpoint::new("stage1", 3, info, serde_json::json!({}), p.clone()).save(dir.path(), "c").unwrap();
        prop_assert_eq!(Checkpoint::load(&path).unwrap().params, p);
    }

    #[test]
    fn overrides_round_trip_through_json(lr in 1e-6..1e-2f64, seed in any::<u64>()) {
        let cfg = RunConfig::default()
            .with_overrides(&[format!("stage1.lr={lr:e}"), format!("seed={seed}")])
            .unwrap();
        prop_assert_eq!(cfg.stage1.lr, lr);
        prop_assert_eq!(cfg.seed, seed);
        let back = RunConfig::from_json_str(&cfg.to_json().to_string(), "test").unwrap();
        prop_assert_eq!(back, cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn student_is_identity_at_time_zero(seed in any::<u64>()) {
        let cfg = RunConfig::small();
        let models = Models::new(&cfg).unwrap();
        let p = models.init_teacher(seed);
        let mut rng = Prng::new(seed ^ 1);
        let shape = models.backbone.geo.clip_shape();
        let geo = models.backbone.geo;
        let x = rng.normal_array(&shape);
        let cond = Conditioning::new(
            rng.normal_array(&[geo.frames, geo.window, 4]),
            rng.normal_array(&[geo.channels, geo.height, geo.width]),
            rng.normal_array(&[geo.channels, geo.past, geo.height, geo.width]),
        );
        let y = models.student(&p).x0(&x, 0, &cond).unwrap();
        prop_assert_eq!(y, x);
    }
}
