mod suites;

use mind_core::numerics::{Rng, Tensor};
use mind_core::schedulers::{cfg_combine, Parameterization, Schedule, ScheduleConfig, Slow};
use proptest::prelude::*;

#[test]
fn scheduler_suite_passes() {
    suites::assert_all(&suites::schedule::scheduler_suite());
}

#[test]
fn out_of_range_timestep_rejected() {
    let s = Schedule::<Slow>::new(ScheduleConfig::slow()).unwrap();
    assert!(s.step(1001).is_err());
    assert!(s.step(1000).is_ok());
}

#[test]
fn epsilon_split_at_pure_noise_rejected() {
    let cfg = ScheduleConfig { parameterization: Parameterization::Epsilon, ..ScheduleConfig::slow() };
    let s = Schedule::<Slow>::new(cfg).unwrap();
    let x = Tensor::zeros(&[3]);
    assert!(s.split_prediction(&x, &x, s.last()).is_err());
}

#[test]
fn guidance_identities() {
    let mut rng = Rng::new(4);
    let u = rng.normal_tensor(&[5, 3]);
    let c = rng.normal_tensor(&[5, 3]);
    assert_eq!(cfg_combine(&u, &c, 0.0).unwrap(), u);
    assert_eq!(cfg_combine(&u, &c, 1.0).unwrap(), c);
}

proptest! {
    #[test]
    fn velocity_target_inverts(seed in any::<u64>(), t in 0usize..=1000) {
        let s = Schedule::<Slow>::new(ScheduleConfig::slow()).unwrap();
        let mut rng = Rng::new(seed);
        let x0 = rng.normal_tensor(&[16]);
        let eps = rng.normal_tensor(&[16]);
        let t = s.step(t).unwrap();
        let xt = s.add_noise(&x0, &eps, t).unwrap();
        let v = s.velocity_target(&x0, &eps, t).unwrap();
        let (x0_hat, eps_hat) = s.split_prediction(&xt, &v, t).unwrap();
        prop_assert!(x0_hat.max_abs_diff(&x0) < 1e-10);
        prop_assert!(eps_hat.max_abs_diff(&eps) < 1e-10);
    }

    #[test]
    fn noise_preserves_unit_variance_mix(t in 0usize..=1000) {
        let s = Schedule::<Slow>::new(ScheduleConfig::slow()).unwrap();
        let ab = s.alpha_bar(s.step(t).unwrap());
        // signal and noise coefficients stay on the unit circle
        let r = ab.sqrt().powi(2) + (1.0 - ab).sqrt().powi(2);
        prop_assert!((r - 1.0).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn ddim_grid_descends(n in 1usize..=100) {
        let s = Schedule::<Slow>::new(ScheduleConfig::slow()).unwrap();
        let g: Vec<usize> = s.ddim_timesteps(n).unwrap().into_iter().map(|t| t.get()).collect();
        prop_assert_eq!(g.len(), n);
        prop_assert_eq!(g[0], 1000);
        prop_assert!(g.windows(2).all(|w| w[1] < w[0]));
        prop_assert!(*g.last().unwrap() >= 1);
    }
}
