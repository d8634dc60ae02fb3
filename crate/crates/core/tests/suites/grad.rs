//! Finite-difference gradient suites shared by the integration tests and the
//! acceptance target.

use mind_core::diffmatcher::{noise_clips, DiffMatcher, MatcherConfig};
use mind_core::hidiff::{HiDiff, HiDiffConfig, ACTION_DIM, CHUNK};
use mind_core::lodiff::{LoDiff, LoDiffConfig, CLIP_FRAMES};
use mind_core::nn::{Activation, Attention, Mlp};
use mind_core::numerics::{check_gradients, GradCheckConfig, GradCheckReport, Graph, ParamStore, Rng, Tensor, Var};
use mind_core::pushworld::FRAME_PIXELS;
use mind_core::Result;

pub const INSTANCES: usize = 20;

type LossFn = Box<dyn for<'a> Fn(&mut Graph<'a>) -> Result<Var>>;

pub struct CaseResult {
    pub name: &'static str,
    pub instances: usize,
    pub passed: usize,
    pub max_rel_err: f64,
}

impl CaseResult {
    pub fn ok(&self) -> bool {
        self.passed == self.instances
    }
}

fn run_case(name: &'static str, seed: u64, coords: usize, build: impl Fn(&mut Rng) -> (ParamStore, LossFn)) -> CaseResult {
    let mut passed = 0;
    let mut max_rel_err = 0.0f64;
    let cfg = GradCheckConfig { coords, ..Default::default() };
    for i in 0..INSTANCES {
        let mut rng = Rng::new(seed).split(i as u64);
        let (store, f) = build(&mut rng);
        let report: GradCheckReport = check_gradients(&store, &cfg, &mut rng, f).unwrap_or_else(|e| panic!("{name}: {e}"));
        max_rel_err = max_rel_err.max(report.max_rel_err);
        if report.passed() {
            passed += 1;
        } else {
            eprintln!("{name} instance {i}: {:?}", report.mismatches);
        }
    }
    CaseResult { name, instances: INSTANCES, passed, max_rel_err }
}

fn dims(rng: &mut Rng, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.inclusive(1, 4)).collect()
}

/// Values bounded away from zero so kinks stay outside the difference stencil.
fn away_from_zero(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = 0.1 + rng.uniform();
        if rng.bernoulli(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Reduces `y` to a scalar through a fixed random weighting so every output
/// coordinate contributes. `w` needs at least as many entries as `y`.
fn project(g: &mut Graph, y: Var, w: &Tensor) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w = g.constant(Tensor::new(&shape, w.data()[..n].to_vec())?);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

macro_rules! unary_case {
    ($name:expr, $seed:expr, |$g:ident, $x:ident| $body:expr) => {
        run_case($name, $seed, 8, |rng| {
            let shape = dims(rng, 3);
            let mut store = ParamStore::new();
            let id = store.add("x", away_from_zero(rng, &shape)).unwrap();
            let w = rng.normal_tensor(&shape);
            let f: LossFn = Box::new(move |$g: &mut Graph| {
                let $x = $g.param(id);
                let y = $body;
                project($g, y, &w)
            });
            (store, f)
        })
    };
}

pub fn primitive_suite() -> Vec<CaseResult> {
    let mut out = Vec::new();
    out.push(run_case("add (broadcast)", 1, 8, |rng| {
        let shape = dims(rng, 3);
        let mut store = ParamStore::new();
        let a = store.add("a", rng.normal_tensor(&shape)).unwrap();
        let b = store.add("b", rng.normal_tensor(&shape[1..])).unwrap();
        let w = rng.normal_tensor(&shape);
        let f: LossFn = Box::new(move |g: &mut Graph| {
            let (a, b) = (g.param(a), g.param(b));
            let y = g.add(a, b)?;
            project(g, y, &w)
        });
        (store, f)
    }));
    out.push(run_case("sub", 2, 8, |rng| {
        let shape = dims(rng, 2);
        let mut store = ParamStore::new();
        let a = store.add("a", rng.normal_tensor(&shape)).unwrap();
        let b = store.add("b", rng.normal_tensor(&shape)).unwrap();
        let w = rng.normal_tensor(&shape);
        let f: LossFn = Box::new(move |g: &mut Graph| {
            let (a, b) = (g.param(a), g.param(b));
            let y = g.sub(a, b)?;
            project(g, y, &w)
        });
        (store, f)
    }));
    out.push(run_case("mul (broadcast)", 3, 8, |rng| {
        let shape = dims(rng, 3);
        let mut store = ParamStore::new();
        let a = store.add("a", rng.normal_tensor(&shape)).unwrap();
        let b = store.add("b", rng.normal_tensor(&shape[2..])).unwrap();
        let w = rng.normal_tensor(&shape);
        let f: LossFn = Box::new(move |g: &mut Graph| {
            let (a, b) = (g.param(a), g.param(b));
            let y = g.mul(a, b)?;
            project(g, y, &w)
        });
        (store, f)
    }));
    out.push(run_case("scale_by", 4, 8, |rng| {
        let shape = dims(rng, 2);
        let mut store = ParamStore::new();
        let a = store.add("a", rng.normal_tensor(&shape)).unwrap();
        let s = store.add("s", rng.normal_tensor(&[1])).unwrap();
        let w = rng.normal_tensor(&shape);
        let f: LossFn = Box::new(move |g: &mut Graph| {
            let (a, s) = (g.param(a), g.param(s));
            let y = g.scale_by(a, s)?;
            project(g, y, &w)
        });
        (store, f)
    }));
    out.push(run_case("matmul", 5, 10, |rng| {
        let d = dims(rng, 4);
        let mut store = ParamStore::new();
        let a = store.add("a", rng.normal_tensor(&[d[0], d[1], d[2]])).unwrap();
        let b = store.add("b", rng.normal_tensor(&[d[2], d[3]])).unwrap();
        let w = rng.normal_tensor(&[d[0], d[1], d[3]]);
        let f: LossFn = Box::new(move |g: &mut Graph| {
            let (a, b) = (g.param(a), g.param(b));
            let y = g.matmul(a, b)?;
            project(g, y, &w)
        });
        (store, f)
    }));
    out.push(run_case("bmm (all transpose modes)", 6, 10, |rng| {
        let d = dims(rng, 4);
        let (ta, tb) = (rng.bernoulli(0.5), rng.bernoulli(0.5));
        let (gr, m, k, n) = (d[0], d[1], d[2], d[3]);
        let sa = if ta { [gr, k, m] } else { [gr, m, k] };
        let sb = if tb { [gr, n, k] } else { [gr, k, n] };
        let mut store = ParamStore::new();
        let a = store.add("a", rng.normal_tensor(&sa)).unwrap();
        let b = store.add("b", rng.normal_tensor(&sb)).unwrap();
        let w = rng.normal_tensor(&[gr, m, n]);
        let f: LossFn = Box::new(move |g: &mut Graph| {
            let (a, b) = (g.param(a), g.param(b));
            let y = g.bmm(a, b, ta, tb)?;
            project(g, y, &w)
        });
        (store, f)
    }));
    out.push(unary_case!("relu", 7, |g, x| g.relu(x)));
    out.push(unary_case!("silu", 8, |g, x| g.silu(x)));
    out.push(unary_case!("tanh", 9, |g, x| g.tanh(x)));
    out.push(unary_case!("scale", 10, |g, x| g.scale(x, -1.7)));
    out.push(unary_case!("softmax", 11, |g, x| g.softmax(x)));
    out.push(unary_case!("permute", 12, |g, x| g.permute(x, &[2, 0, 1])?));
    out.push(unary_case!("reshape", 13, |g, x| {
        let n = g.value(x).numel();
        g.reshape(x, &[n])?
    }));
    out.push(unary_case!("slice", 14, |g, x| {
        let len = g.shape(x)[1];
        g.slice(x, 1, len / 2, len - len / 2)?
    }));
    out.push(run_case("layer_norm", 15, 10, |rng| {
        let mut shape = dims(rng, 2);
        shape.push(rng.inclusive(2, 6));
        let dlast = shape[2];
        let mut store = ParamStore::new();
        let x = store.add("x", rng.normal_tensor(&shape)).unwrap();
        let gm = store.add("gamma", rng.normal_tensor(&[dlast])).unwrap();
        let bt = store.add("beta", rng.normal_tensor(&[dlast])).unwrap();
        let w = rng.normal_tensor(&shape);
        let f: LossFn = Box::new(move |g: &mut Graph| {
            let (x, gm, bt) = (g.param(x), g.param(gm), g.param(bt));
            let y = g.layer_norm(x, gm, bt)?;
            project(g, y, &w)
        });
        (store, f)
    }));
    out.push(run_case("concat", 16, 8, |rng| {
        let d = dims(rng, 4);
        let mut store = ParamStore::new();
        let a = store.add("a", rng.normal_tensor(&[d[0], d[1], d[3]])).unwrap();
        let b = store.add("b", rng.normal_tensor(&[d[0], d[2], d[3]])).unwrap();
        let w = rng.normal_tensor(&[d[0], d[1] + d[2], d[3]]);
        let f: LossFn = Box::new(move |g: &mut Graph| {
            let (a, b) = (g.param(a), g.param(b));
            let y = g.concat(&[a, b, a], 1)?;
            let y = g.slice(y, 1, 0, d[1] + d[2])?;
            project(g, y, &w)
        });
        (store, f)
    }));
    out.push(run_case("broadcast", 17, 8, |rng| {
        let d = dims(rng, 3);
        let mut store = ParamStore::new();
        let a = store.add("a", rng.normal_tensor(&[d[0], 1, d[1]])).unwrap();
        let w = rng.normal_tensor(&[d[0], d[2], d[1]]);
        let f: LossFn = Box::new(move |g: &mut Graph| {
            let a = g.param(a);
            let y = g.broadcast(a, 1, d[2])?;
            project(g, y, &w)
        });
        (store, f)
    }));
    out.push(run_case("embedding lookup", 18, 8, |rng| {
        let (rows, d) = (rng.inclusive(2, 6), rng.inclusive(1, 4));
        let ids: Vec<usize> = (0..rng.inclusive(1, 8)).map(|_| rng.below(rows)).collect();
        let mut store = ParamStore::new();
        let t = store.add("table", rng.normal_tensor(&[rows, d])).unwrap();
        let w = rng.normal_tensor(&[ids.len(), d]);
        let f: LossFn = Box::new(move |g: &mut Graph| {
            let t = g.param(t);
            let y = g.gather(t, &ids)?;
            project(g, y, &w)
        });
        (store, f)
    }));
    out.push(unary_case!("sum", 19, |g, x| {
        let s = g.sum(x);
        g.scale_by(x, s)?
    }));
    out.push(unary_case!("mean", 20, |g, x| {
        let s = g.mean(x);
        g.scale_by(x, s)?
    }));
    out.push(run_case("mean-square reduction", 21, 8, |rng| {
        let shape = dims(rng, 3);
        let mut store = ParamStore::new();
        let a = store.add("a", rng.normal_tensor(&shape)).unwrap();
        let b = store.add("b", rng.normal_tensor(&shape)).unwrap();
        let f: LossFn = Box::new(move |g: &mut Graph| {
            let (a, b) = (g.param(a), g.param(b));
            let m = g.mse(a, b)?;
            let s = g.sum_squares(a);
            g.add(m, s)
        });
        (store, f)
    }));
    out.push(run_case("bce with logits", 22, 8, |rng| {
        let n = rng.inclusive(1, 10);
        let targets: Vec<f64> = (0..n).map(|_| if rng.bernoulli(0.5) { 1.0 } else { 0.0 }).collect();
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::from_fn(&[n], |_| 3.0 * rng.normal())).unwrap();
        let f: LossFn = Box::new(move |g: &mut Graph| {
            let x = g.param(x);
            g.bce_logits(x, &targets)
        });
        (store, f)
    }));
    out.push(run_case("attention", 23, 12, |rng| {
        let heads = rng.inclusive(1, 2);
        let inner = heads * rng.inclusive(1, 3);
        let (groups, nq, nk) = (rng.inclusive(1, 3), rng.inclusive(1, 4), rng.inclusive(1, 4));
        let (qd, kd) = (rng.inclusive(1, 4), rng.inclusive(1, 4));
        let mut store = ParamStore::new();
        let attn = Attention::new(&mut store, "attn", qd, kd, inner, heads, rng).unwrap();
        let xq = store.add("xq", rng.normal_tensor(&[groups, nq, qd])).unwrap();
        let xk = store.add("xkv", rng.normal_tensor(&[groups, nk, kd])).unwrap();
        let w = rng.normal_tensor(&[groups, nq, qd]);
        let f: LossFn = Box::new(move |g: &mut Graph| {
            let (q, k) = (g.param(xq), g.param(xk));
            let y = attn.forward(g, q, k)?;
            project(g, y, &w)
        });
        (store, f)
    }));
    out.push(run_case("3-layer MLP", 24, 12, |rng| {
        let mut store = ParamStore::new();
        let m1 = Mlp::new(&mut store, "m1", (5, 7, 6), Activation::Silu, rng).unwrap();
        let m2 = Mlp::new(&mut store, "m2", (6, 4, 3), Activation::Silu, rng).unwrap();
        let x = rng.normal_tensor(&[4, 5]);
        let y = rng.normal_tensor(&[4, 3]);
        let f: LossFn = Box::new(move |g: &mut Graph| {
            let xv = g.constant(x.clone());
            let h = m1.forward(g, xv)?;
            let h = g.tanh(h);
            let o = m2.forward(g, h)?;
            let t = g.constant(y.clone());
            g.mse(o, t)
        });
        (store, f)
    }));
    out
}

fn tiny_lodiff(store: &mut ParamStore, rng: &mut Rng) -> LoDiff {
    let cfg = LoDiffConfig { dim: 8, layers: 1, heads: 2, mlp_hidden: 8, ..Default::default() };
    LoDiff::new(store, "lodiff", cfg, rng).unwrap()
}

fn tiny_matcher(store: &mut ParamStore, rng: &mut Rng) -> DiffMatcher {
    let cfg = MatcherConfig { pixel_channels: 2, embed: 8, hidden: 8, proj: 4, layers: 1, heads: 2 };
    DiffMatcher::new(store, "matcher", cfg, 1000, rng).unwrap()
}

fn clips(rng: &mut Rng, b: usize) -> Tensor {
    Tensor::from_fn(&[b, CLIP_FRAMES, FRAME_PIXELS], |_| rng.uniform_range(-1.0, 1.0))
}

pub fn loss_suite() -> Vec<CaseResult> {
    let mut out = Vec::new();
    out.push(run_case("L_video", 31, 6, |rng| {
        let mut store = ParamStore::new();
        let model = tiny_lodiff(&mut store, rng);
        let data = clips(rng, 2);
        let tasks = vec![rng.below(4), rng.below(4)];
        let noise = rng.split(99);
        let f: LossFn = Box::new(move |g: &mut Graph| model.video_loss(g, &data, &tasks, &mut noise.clone()));
        (store, f)
    }));
    // The clean-branch target is a stop-gradient constant, so the
    // finite-difference oracle must hold it fixed at the unperturbed value.
    out.push(run_case("L_align", 32, 6, |rng| {
        let mut store = ParamStore::new();
        let model = tiny_matcher(&mut store, rng);
        let lod = tiny_lodiff(&mut ParamStore::new(), rng);
        let data = clips(rng, 2);
        let steps = vec![lod.schedule.sample_step(rng), lod.schedule.sample_step(rng)];
        let eps = rng.normal_tensor(data.shape());
        let noisy = noise_clips(&data, &eps, &steps, &lod.schedule).unwrap();
        let target = {
            let mut g = Graph::inference(&store);
            let x = g.constant(data.clone());
            let z = model.forward(&mut g, x, &[lod.schedule.clean(); 2]).unwrap();
            g.value(z).clone()
        };
        let f: LossFn = Box::new(move |g: &mut Graph| {
            let t = g.constant(target.clone());
            model.align_to_target(g, &noisy, &steps, t)
        });
        (store, f)
    }));
    out.push(run_case("L_action", 33, 6, |rng| {
        let mut store = ParamStore::new();
        let matcher = tiny_matcher(&mut store, rng);
        let cfg = HiDiffConfig { depth: 1, hidden: 8, heads: 2, cond_dim: 4, ..Default::default() };
        let policy = HiDiff::new(&mut store, "hidiff", cfg, rng).unwrap();
        let lod = tiny_lodiff(&mut ParamStore::new(), rng);
        let data = clips(rng, 2);
        let chunks = Tensor::from_fn(&[2, CHUNK, ACTION_DIM], |_| rng.uniform_range(-1.0, 1.0));
        let tasks = vec![rng.below(4), rng.below(4)];
        let steps = vec![lod.schedule.sample_step(rng), lod.schedule.sample_step(rng)];
        let noise = rng.split(99);
        let f: LossFn = Box::new(move |g: &mut Graph| {
            let x = g.constant(data.clone());
            let z = matcher.forward(g, x, &steps)?;
            policy.action_loss(g, &chunks, z, &tasks, &mut noise.clone())
        });
        (store, f)
    }));
    out
}
