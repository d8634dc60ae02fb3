//! Noise-schedule checks against closed-form oracles.

use mind_core::numerics::{Rng, Tensor};
use mind_core::schedulers::{Fast, Parameterization, Schedule, ScheduleConfig, Slow};

use super::Check;

fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b)
}

fn monotone<P>(s: &Schedule<P>) -> bool {
    s.alphas_bar().windows(2).all(|w| w[1] < w[0])
}

/// From `x_t = add_noise(x0, ε, τ)` and the exact target, one deterministic
/// reverse step must land on `add_noise(x0, ε, τ−1)`, and splitting the
/// prediction must recover `x0` and `ε`. Returns the worst error over all τ.
fn round_trip_error<P>(s: &Schedule<P>, rng: &mut Rng) -> f64 {
    let x0 = Tensor::from_fn(&[64], |_| rng.uniform_range(-1.0, 1.0));
    let eps = rng.normal_tensor(&[64]);
    let mut worst = 0.0f64;
    for t in 1..=s.steps() {
        let (tt, prev) = (s.step(t).unwrap(), s.step(t - 1).unwrap());
        let xt = s.add_noise(&x0, &eps, tt).unwrap();
        let target = s.target(&x0, &eps, tt).unwrap();
        if s.parameterization() == Parameterization::Epsilon && s.alpha_bar(tt) == 0.0 {
            continue;
        }
        let (x0_hat, eps_hat) = s.split_prediction(&xt, &target, tt).unwrap();
        worst = worst.max(max_abs(&x0_hat, &x0));
        if s.alpha_bar(tt) > 0.0 {
            worst = worst.max(max_abs(&eps_hat, &eps));
        }
        let stepped = s.reverse_step(&xt, &target, tt, prev, 0.0, None).unwrap();
        let expected = s.add_noise(&x0, &eps, prev).unwrap();
        worst = worst.max(max_abs(&stepped, &expected));
    }
    worst
}

/// Oracle denoiser for a known clean sample: the exact target at every step.
fn ddim_chain<P>(s: &Schedule<P>, x0: &Tensor, n: usize, start: &Tensor) -> Tensor {
    let grid = s.ddim_timesteps(n).unwrap();
    let mut x = start.clone();
    for (i, &t) in grid.iter().enumerate() {
        let next = grid.get(i + 1).copied().unwrap_or_else(|| s.clean());
        let ab = s.alpha_bar(t);
        // the noise that explains x given x0
        let eps = if ab < 1.0 { x.zip_map(x0, |x, x0| (x - ab.sqrt() * x0) / (1.0 - ab).sqrt()).unwrap() } else { x.clone() };
        let pred = s.target(x0, &eps, t).unwrap();
        x = s.reverse_step(&x, &pred, t, next, 0.0, None).unwrap();
    }
    x
}

pub fn scheduler_suite() -> Vec<Check> {
    let mut checks = Vec::new();
    let mut rng = Rng::new(0x5c4ed);

    // hand-computed cumulative products
    let tiny = Schedule::<Slow>::new(ScheduleConfig {
        steps: 4,
        beta_start: 0.1,
        beta_end: 0.4,
        zero_snr: false,
        parameterization: Parameterization::Epsilon,
    })
    .unwrap();
    let expected = [1.0, 0.9, 0.72, 0.504, 0.3024];
    let err = tiny.alphas_bar().iter().zip(expected).map(|(a, e)| (a - e).abs()).fold(0.0, f64::max);
    checks.push(Check::new("alpha_bar of betas 0.1..0.4", err < 1e-15, format!("max error {err:.2e}")));

    let one = Schedule::<Fast>::new(ScheduleConfig {
        steps: 1,
        beta_start: 0.25,
        beta_end: 0.25,
        zero_snr: false,
        parameterization: Parameterization::Epsilon,
    })
    .unwrap();
    let x = one.add_noise(&Tensor::scalar(1.0), &Tensor::scalar(1.0), one.last()).unwrap().item();
    let want = (0.75f64).sqrt() + 0.5;
    checks.push(Check::new("add_noise at alpha_bar 0.75", (x - want).abs() < 1e-15, format!("{x:.6} vs {want:.6}")));

    // strictly decreasing over random valid configs
    let mut all_monotone = true;
    for _ in 0..200 {
        let steps = rng.inclusive(2, 1200);
        let b0 = rng.uniform_range(1e-5, 0.05);
        let b1 = rng.uniform_range(b0, 0.5);
        let cfg = ScheduleConfig {
            steps,
            beta_start: b0,
            beta_end: b1,
            zero_snr: rng.bernoulli(0.5),
            parameterization: Parameterization::Velocity,
        };
        all_monotone &= monotone(&Schedule::<Slow>::new(cfg).unwrap());
    }
    let slow = Schedule::<Slow>::new(ScheduleConfig::slow()).unwrap();
    let fast = Schedule::<Fast>::new(ScheduleConfig::fast()).unwrap();
    all_monotone &= monotone(&slow) && monotone(&fast);
    checks.push(Check::new("alpha_bar strictly decreasing", all_monotone, "200 random configs plus both defaults"));

    let terminal = slow.alpha_bar(slow.last());
    checks.push(Check::new("zero-SNR terminal alpha_bar", terminal <= 1e-12, format!("alpha_bar_T = {terminal:.2e}")));

    let e_slow = round_trip_error(&slow, &mut rng);
    let e_fast = round_trip_error(&fast, &mut rng);
    checks.push(Check::new(
        "noise/reverse round trip at every timestep",
        e_slow <= 1e-10 && e_fast <= 1e-10,
        format!("video {e_slow:.2e}, action {e_fast:.2e}"),
    ));

    let x0 = Tensor::from_fn(&[32], |_| rng.uniform_range(-1.0, 1.0));
    let start = rng.normal_tensor(&[32]);
    let out = ddim_chain(&slow, &x0, 50, &start);
    let e_chain = max_abs(&out, &x0);
    let out_fast = ddim_chain(&fast, &x0, 10, &start);
    let e_chain_fast = max_abs(&out_fast, &x0);
    checks.push(Check::new(
        "DDIM chain with oracle denoiser returns x0",
        e_chain <= 1e-6 && e_chain_fast <= 1e-6,
        format!("50-step video {e_chain:.2e}, 10-step action {e_chain_fast:.2e}"),
    ));

    let again = ddim_chain(&slow, &x0, 50, &start);
    let noise = rng.normal_tensor(&[32]);
    let (t, n) = (slow.step(500).unwrap(), slow.step(480).unwrap());
    let a = slow.reverse_step(&start, &x0, t, n, 1.0, Some(&noise)).unwrap();
    let b = slow.reverse_step(&start, &x0, t, n, 1.0, Some(&noise)).unwrap();
    checks.push(Check::new(
        "DDIM determinism",
        again.data() == out.data() && a.data() == b.data(),
        "repeat chains and stochastic steps with fixed noise compare bit-exactly",
    ));
    checks
}
