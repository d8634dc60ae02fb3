//! Architecture and alignment contracts of the three networks.

use mind_core::diffmatcher::{noise_clips, DiffMatcher, MatcherConfig};
use mind_core::hidiff::{HiDiff, HiDiffConfig, ACTION_DIM, CHUNK};
use mind_core::lodiff::{drop_condition, LoDiff, LoDiffConfig, CLIP_FRAMES, NULL_TASK};
use mind_core::numerics::{Graph, ParamStore, Rng, Tensor};
use mind_core::pushworld::FRAME_PIXELS;
use mind_core::schedulers::{cfg_combine, Schedule, ScheduleConfig, Slow, Step};

use super::Check;

fn small_hidiff(store: &mut ParamStore, rng: &mut Rng) -> HiDiff {
    let cfg = HiDiffConfig { depth: 2, hidden: 32, heads: 4, cond_dim: 16, ..HiDiffConfig::default() };
    HiDiff::new(store, "hidiff", cfg, rng).unwrap()
}

fn clips(rng: &mut Rng, b: usize) -> Tensor {
    Tensor::from_fn(&[b, CLIP_FRAMES, FRAME_PIXELS], |_| rng.uniform_range(-1.0, 1.0))
}

pub fn architecture_suite() -> Vec<Check> {
    let mut checks = Vec::new();
    let mut rng = Rng::new(0xa4c);
    let mut store = ParamStore::new();
    let policy = small_hidiff(&mut store, &mut rng);

    let fresh: Vec<f64> = policy.gate_ids().iter().map(|&id| store.get(id).item()).collect();
    checks.push(Check::new("fresh gate reads back 1", fresh.iter().all(|&g| g == 1.0), format!("{fresh:?}")));

    let b = 3;
    let noisy = rng.normal_tensor(&[b, CHUNK, ACTION_DIM]);
    let steps: Vec<_> = (0..b).map(|_| policy.schedule.sample_step(&mut rng)).collect();
    let z = rng.normal_tensor(&[b, CLIP_FRAMES, 16]);
    let tasks = [0, 2, NULL_TASK];
    for id in policy.gate_ids() {
        store.get_mut(id).data_mut()[0] = 0.0;
    }
    let mut g = Graph::inference(&store);
    let zv = g.constant(z.clone());
    let with = policy.forward(&mut g, &noisy, &steps, zv, &tasks).unwrap();
    let with = g.value(with).clone();
    let mut g = Graph::inference(&store);
    let zv = g.constant(z.clone());
    let without = policy.forward_without_cross(&mut g, &noisy, &steps, zv, &tasks).unwrap();
    let without = g.value(without).clone();
    checks.push(Check::new(
        "zero gate equals cross-attention-free block",
        with.data() == without.data(),
        format!("max difference {:.2e}", with.max_abs_diff(&without)),
    ));

    let u = rng.normal_tensor(&[4, 8]);
    let c = rng.normal_tensor(&[4, 8]);
    let s0 = cfg_combine(&u, &c, 0.0).unwrap();
    let s1 = cfg_combine(&u, &c, 1.0).unwrap();
    checks.push(Check::new("guidance s=0 gives unconditional, s=1 conditional", s0 == u && s1 == c, "bit-exact"));

    // the same identities through the full sampler: s = 0 follows the null
    // branch, s = 1 the conditional one
    for id in policy.gate_ids() {
        store.get_mut(id).data_mut()[0] = 1.0;
    }
    let z1 = z.index0(0);
    let seed = Rng::new(77);
    let guided0 = policy.sample_chunk(&store, &z1, 1, 10, 0.0, &mut seed.clone()).unwrap();
    let null_only = policy.sample_chunk(&store, &z1, NULL_TASK, 10, 1.0, &mut seed.clone()).unwrap();
    let guided1 = policy.sample_chunk(&store, &z1, 1, 10, 1.0, &mut seed.clone()).unwrap();
    let guided_mid = policy.sample_chunk(&store, &z1, 1, 10, 1.0 + 1e-9, &mut seed.clone()).unwrap();
    let d0 = guided0.max_abs_diff(&null_only);
    let d1 = guided1.max_abs_diff(&guided_mid);
    checks.push(Check::new(
        "sampler guidance endpoints",
        d0 < 1e-10 && d1 < 1e-6,
        format!("s=0 vs null branch {d0:.2e}; s=1 vs batched s=1+1e-9 {d1:.2e}"),
    ));

    let mut drops = Rng::new(0xd20);
    let n = 10_000;
    let dropped = (0..n).filter(|_| drop_condition(2, 0.1, &mut drops) == NULL_TASK).count();
    let rate = dropped as f64 / n as f64;
    checks.push(Check::new("condition-drop rate", (0.08..=0.12).contains(&rate), format!("{rate:.4} over {n} draws")));
    checks
}

pub fn alignment_suite() -> Vec<Check> {
    let mut checks = Vec::new();
    let mut rng = Rng::new(0xa119);
    let mut store = ParamStore::new();
    let cfg = MatcherConfig { pixel_channels: 2, embed: 16, hidden: 16, proj: 8, layers: 1, heads: 2 };
    let matcher = DiffMatcher::new(&mut store, "matcher", cfg, 1000, &mut rng).unwrap();
    let schedule = Schedule::<Slow>::new(ScheduleConfig::slow()).unwrap();
    let b = 3;
    let clean = clips(&mut rng, b);
    let eps = rng.normal_tensor(clean.shape());
    let steps: Vec<Step<Slow>> = (0..b).map(|_| schedule.sample_step(&mut rng)).collect();

    // gradients of the full loss must equal those with the target frozen as a constant
    let mut g = Graph::new(&store);
    let loss = matcher.align_loss_at(&mut g, &clean, &eps, &steps, &schedule).unwrap();
    let full = g.backward(loss).unwrap();
    let mut g = Graph::inference(&store);
    let cx = g.constant(clean.clone());
    let zero = vec![schedule.clean(); b];
    let target = matcher.forward(&mut g, cx, &zero).unwrap();
    let target = g.value(target).clone();
    let noisy = noise_clips(&clean, &eps, &steps, &schedule).unwrap();
    let mut g = Graph::new(&store);
    let tv = g.constant(target);
    let frozen = matcher.align_to_target(&mut g, &noisy, &steps, tv).unwrap();
    let frozen = g.backward(frozen).unwrap();
    let same = store.ids().all(|id| full.get(id).map(|t| t.data()) == frozen.get(id).map(|t| t.data()));

    // and a loss reading only the stop-gradient target reaches no parameter
    let mut g = Graph::new(&store);
    let cx = g.constant(clean.clone());
    let target = matcher.forward(&mut g, cx, &zero).unwrap();
    let target = g.stop_grad(target);
    let only = g.sum_squares(target);
    let only = g.backward(only).unwrap();
    let untouched = only.iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0));
    checks.push(Check::new(
        "no gradient through the clean branch",
        same && untouched,
        format!("full == frozen-target gradients: {same}; target-only loss gradient-free: {untouched}"),
    ));

    let mut g = Graph::inference(&store);
    let at_zero = matcher.align_loss_at(&mut g, &clean, &eps, &zero, &schedule).unwrap();
    let at_zero = g.value(at_zero).item();
    checks.push(Check::new("alignment loss at tau = 0", at_zero == 0.0, format!("{at_zero:e}")));
    checks
}

/// A small video model used by the contract tests of other suites.
pub fn small_lodiff(store: &mut ParamStore, rng: &mut Rng) -> LoDiff {
    let cfg = LoDiffConfig { dim: 16, layers: 1, heads: 2, mlp_hidden: 32, ..LoDiffConfig::default() };
    LoDiff::new(store, "lodiff", cfg, rng).unwrap()
}
