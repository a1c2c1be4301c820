//! Registries of finite-difference gradient checks and randomized property
//! checks, grouped by module. The CLI and the test suites run these.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::gradcheck::{gradcheck, gradcheck_params, GradReport, DEFAULT_STEP};
use crate::graph::{Graph, Var};
use crate::hyperlayers::{hyper_gelu, HyperAdaLN, HyperAttention, HyperFfn, HyperbolicLinear};
use crate::losses::{euclidean_losses, hyperbolic_mesh_loss, total_loss, JointRegressor};
use crate::manifold::{
    conformal_factor, expmap0, logmap0, mobius_add, mobius_matvec, mobius_neg, Ball, BallParams, Tangent,
};
use crate::metrics::{accel_error, mpjpe, pa_mpjpe};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::pipeline::{fuse_and_upsample, sphere_template, MeshTopology, Pipeline};
use crate::synth::synth_generate;
use crate::temporal::{FeatureFusion, GruCell, PoseMotion, TemporalPrior};
use crate::tensor::Tensor;
use crate::train::{build_pipeline, sequence_loss};

pub const MODULES: &[&str] =
    &["tensor-autodiff", "manifold", "hyperlayers", "temporal-prior", "mesh-pipeline", "losses-metrics", "harness"];

fn check_module(module: Option<&str>) -> Result<()> {
    match module {
        Some(m) if !MODULES.contains(&m) => {
            Err(Error::Config(format!("unknown module {m}; expected one of {}", MODULES.join(", "))))
        }
        _ => Ok(()),
    }
}

// ---- shared sampling -------------------------------------------------------

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Entries with magnitude in `[lo, hi)` and random sign.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(lo..hi);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn direction(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = norm(&v);
        if n > 1e-3 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    libm::sqrt(v.iter().map(|x| x * x).sum())
}

/// Rows of norm uniform in `[0, max_norm)`.
fn ball_rows(rng: &mut ChaCha8Rng, shape: &[usize], max_norm: f64) -> Tensor {
    let d = *shape.last().expect("rank >= 1");
    let rows: usize = shape.iter().product::<usize>() / d;
    let mut data = Vec::with_capacity(rows * d);
    for _ in 0..rows {
        let r = rng.random_range(0.0..max_norm);
        data.extend(direction(rng, d).into_iter().map(|x| x * r));
    }
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// One ball point; a fifth of the draws sit at norm `1 - 2 eps_ball`.
fn ball_point(rng: &mut ChaCha8Rng, d: usize, p: &BallParams) -> Vec<f64> {
    let r = if rng.random_bool(0.2) { 1.0 - 2.0 * p.eps_ball } else { rng.random_range(0.0..0.99) };
    direction(rng, d).into_iter().map(|x| x * r).collect()
}

/// Fixed, non-uniform weights so the probed scalar depends on every entry
/// differently.
fn probe(g: &mut Graph, v: Var) -> Result<Var> {
    let w = Tensor::from_fn(g.shape(v).to_vec(), |i| libm::sin(1.3 * i as f64 + 0.7) + 1.1);
    let w = g.constant(w);
    let m = g.mul(v, w)?;
    g.sum(m)
}

/// Move every parameter away from its near-zero init so gradients are
/// not trivially small.
fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        let t = match store.get(id).kind {
            ParamKind::Euclidean => uniform(rng, &shape, -scale, scale),
            ParamKind::Ball => ball_rows(rng, &shape, 0.3),
        };
        store.set(id, t).expect("same shape");
    }
}

/// Seeded version of the same perturbation: Euclidean entries from
/// U(-scale, scale), ball rows with norm below 0.3.
pub fn perturb_params(store: &mut ParamStore, seed: u64, scale: f64) {
    randomize(store, &mut ChaCha8Rng::seed_from_u64(seed), scale);
}

fn seeded(tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x6772_6164 ^ tag)
}

// ---- gradient checks --------------------------------------------------------

/// One registered gradient check.
pub struct GradCase {
    pub module: &'static str,
    pub name: &'static str,
    /// Default tolerance on the max relative error.
    pub tol: f64,
    run: fn(f64) -> Result<GradReport>,
}

impl GradCase {
    /// Run with `tol`, or the case default.
    pub fn run(&self, tol: Option<f64>) -> Result<GradReport> {
        (self.run)(tol.unwrap_or(self.tol))
    }
}

type InputFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

fn probed(inputs: &[Tensor], f: InputFn, tol: f64) -> Result<GradReport> {
    gradcheck(
        |g, v| {
            let y = f(g, v)?;
            probe(g, y)
        },
        inputs,
        DEFAULT_STEP,
        tol,
    )
}

fn merge(reports: Vec<GradReport>, tol: f64) -> GradReport {
    let mut out = GradReport { tol, max_rel_error: 0.0, entries: Vec::new() };
    for r in reports {
        out.max_rel_error = out.max_rel_error.max(r.max_rel_error);
        out.entries.extend(r.entries);
    }
    out
}

fn unary(seed: u64, lo: f64, hi: f64, signed: bool, tol: f64, op: fn(&mut Graph, Var) -> Result<Var>) -> Result<GradReport> {
    let mut rng = seeded(seed);
    let x = if signed { away_from_zero(&mut rng, &[3, 4], lo, hi) } else { uniform(&mut rng, &[3, 4], lo, hi) };
    probed(&[x], Box::new(move |g, v| op(g, v[0])), tol)
}

fn binary(seed: u64, sa: &[usize], sb: &[usize], tol: f64, op: fn(&mut Graph, Var, Var) -> Result<Var>) -> Result<GradReport> {
    let mut rng = seeded(seed);
    let a = uniform(&mut rng, sa, -1.0, 1.0);
    let b = uniform(&mut rng, sb, 0.5, 2.0);
    probed(&[a, b], Box::new(move |g, v| op(g, v[0], v[1])), tol)
}

fn primitive_cases() -> Vec<GradCase> {
    const M: &str = "tensor-autodiff";
    const T: f64 = 1e-6;
    let c = |name, run| GradCase { module: M, name, tol: T, run };
    vec![
        c("add", |t| binary(1, &[2, 3, 4], &[4], t, |g, a, b| g.add(a, b))),
        c("sub", |t| binary(2, &[2, 3, 4], &[3, 1], t, |g, a, b| g.sub(a, b))),
        c("mul", |t| binary(3, &[3, 4], &[3, 4], t, |g, a, b| g.mul(a, b))),
        c("div", |t| binary(4, &[3, 4], &[1, 4], t, |g, a, b| g.div(a, b))),
        c("scale_offset_square", |t| {
            unary(5, -1.0, 1.0, false, t, |g, a| {
                let s = g.scale(a, 2.5)?;
                let o = g.offset(s, -0.3)?;
                g.square(o)
            })
        }),
        c("tanh", |t| unary(6, -2.0, 2.0, false, t, |g, a| g.tanh(a))),
        c("atanh", |t| unary(7, -0.8, 0.8, false, t, |g, a| g.atanh(a))),
        c("sigmoid", |t| unary(8, -3.0, 3.0, false, t, |g, a| g.sigmoid(a))),
        c("gelu", |t| unary(9, -3.0, 3.0, false, t, |g, a| g.gelu(a))),
        c("exp", |t| unary(10, -1.0, 1.0, false, t, |g, a| g.exp(a))),
        c("log", |t| unary(11, 0.5, 2.0, false, t, |g, a| g.log(a))),
        c("sqrt", |t| unary(12, 0.5, 2.0, false, t, |g, a| g.sqrt(a))),
        c("abs", |t| unary(13, 0.1, 1.0, true, t, |g, a| g.abs(a))),
        c("matmul", |t| binary(14, &[3, 4], &[4, 2], t, |g, a, b| g.matmul(a, b))),
        c("matmul_batched", |t| binary(15, &[2, 3, 4], &[4, 2], t, |g, a, b| g.matmul(a, b))),
        c("matmul_shared_left", |t| binary(16, &[3, 4], &[2, 4, 2], t, |g, a, b| g.matmul(a, b))),
        c("permute", |t| {
            let x = uniform(&mut seeded(17), &[2, 3, 4], -1.0, 1.0);
            probed(&[x], Box::new(|g, v| g.permute(v[0], &[2, 0, 1])), t)
        }),
        c("transpose_reshape", |t| {
            let x = uniform(&mut seeded(18), &[2, 3, 4], -1.0, 1.0);
            probed(
                &[x],
                Box::new(|g, v| {
                    let y = g.transpose(v[0])?;
                    g.reshape(y, &[6, 4])
                }),
                t,
            )
        }),
        c("broadcast_to", |t| {
            let x = uniform(&mut seeded(19), &[3, 1], -1.0, 1.0);
            probed(&[x], Box::new(|g, v| g.broadcast_to(v[0], &[2, 3, 4])), t)
        }),
        c("concat_slice", |t| {
            let mut rng = seeded(20);
            let a = uniform(&mut rng, &[2, 3], -1.0, 1.0);
            let b = uniform(&mut rng, &[2, 2], -1.0, 1.0);
            probed(
                &[a, b],
                Box::new(|g, v| {
                    let c = g.concat(&[v[0], v[1]], 1)?;
                    let s = g.slice(c, 1, 1, 3)?;
                    let parts = g.split(c, 1, &[2, 3])?;
                    let m = g.mul(s, parts[1])?;
                    g.add(m, s)
                }),
                t,
            )
        }),
        c("index_select", |t| {
            let x = uniform(&mut seeded(21), &[3, 4], -1.0, 1.0);
            probed(&[x], Box::new(|g, v| g.index_select(v[0], 0, &[2, 0, 2, 1])), t)
        }),
        c("reductions", |t| {
            let x = uniform(&mut seeded(22), &[2, 3, 4], -1.0, 1.0);
            probed(
                &[x],
                Box::new(|g, v| {
                    let s = g.sum_axis(v[0], 1)?;
                    let m = g.mean_axis(v[0], 2)?;
                    let (_, var) = g.layer_stats(v[0], 2)?;
                    let a = g.mul(s, m)?;
                    let b = g.mean(var)?;
                    g.add(a, b)
                }),
                t,
            )
        }),
        c("softmax", |t| {
            let x = uniform(&mut seeded(23), &[3, 5], -2.0, 2.0);
            probed(&[x], Box::new(|g, v| g.softmax(v[0], 1)), t)
        }),
        c("l2norm", |t| {
            let x = uniform(&mut seeded(24), &[3, 4], -1.0, 1.0);
            probed(&[x], Box::new(|g, v| g.l2norm(v[0], 1, 1e-12)), t)
        }),
    ]
}

fn manifold_cases() -> Vec<GradCase> {
    const M: &str = "manifold";
    let c = |name, run| GradCase { module: M, name, tol: 1e-6, run };
    vec![
        c("mobius_add", |t| {
            let mut rng = seeded(30);
            let x = ball_rows(&mut rng, &[3, 4], 0.8);
            let y = ball_rows(&mut rng, &[3, 4], 0.8);
            probed(
                &[x, y],
                Box::new(|g, v| Ok(mobius_add(g, Ball::assume(v[0]), Ball::assume(v[1]), &BallParams::default())?.var())),
                t,
            )
        }),
        c("mobius_matvec", |t| {
            let mut rng = seeded(31);
            let w = uniform(&mut rng, &[3, 4], -1.0, 1.0);
            let x = ball_rows(&mut rng, &[2, 4], 0.8);
            probed(
                &[w, x],
                Box::new(|g, v| Ok(mobius_matvec(g, v[0], Ball::assume(v[1]), &BallParams::default())?.var())),
                t,
            )
        }),
        c("expmap0_logmap0", |t| {
            let mut rng = seeded(32);
            let v0 = uniform(&mut rng, &[3, 4], -1.0, 1.0);
            let x0 = ball_rows(&mut rng, &[3, 4], 0.8);
            probed(
                &[v0, x0],
                Box::new(|g, v| {
                    let p = BallParams::default();
                    let e = expmap0(g, Tangent::new(v[0]), &p)?;
                    let l = logmap0(g, Ball::assume(v[1]), &p)?;
                    let lam = conformal_factor(g, Ball::assume(v[1]))?;
                    let a = g.mul(l.var(), lam)?;
                    g.add(e.var(), a)
                }),
                t,
            )
        }),
    ]
}

fn layer_store(seed: u64) -> (ChaCha8Rng, ParamStore) {
    (seeded(seed), ParamStore::new())
}

fn params_check<F>(store: &ParamStore, ids: &[ParamId], f: F, tol: f64, max_entries: Option<usize>) -> Result<GradReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    gradcheck_params(
        store,
        ids,
        |g| {
            let y = f(g)?;
            probe(g, y)
        },
        DEFAULT_STEP,
        tol,
        max_entries,
    )
}

fn all_ids(store: &ParamStore) -> Vec<ParamId> {
    store.ids().collect()
}

fn hyperlayer_cases() -> Vec<GradCase> {
    const M: &str = "hyperlayers";
    let c = |name, run| GradCase { module: M, name, tol: 1e-4, run };
    vec![
        c("hyperbolic_linear", |t| {
            let (mut rng, mut store) = layer_store(40);
            let lin = HyperbolicLinear::new(&mut store, "lin", 4, 3, &mut rng);
            randomize(&mut store, &mut rng, 0.5);
            let x = ball_rows(&mut rng, &[3, 4], 0.8);
            let xi = x.clone();
            let s2 = store.clone();
            let a = probed(
                &[x],
                Box::new(move |g, v| {
                    g.bind_params(&s2);
                    Ok(lin.forward(g, Ball::assume(v[0]), &BallParams::default())?.var())
                }),
                t,
            )?;
            let b = params_check(
                &store,
                &all_ids(&store),
                |g| {
                    let xv = g.constant(xi.clone());
                    Ok(lin.forward(g, Ball::assume(xv), &BallParams::default())?.var())
                },
                t,
                None,
            )?;
            Ok(merge(vec![a, b], t))
        }),
        c("hyper_gelu", |t| {
            let x = ball_rows(&mut seeded(41), &[3, 4], 0.9);
            probed(&[x], Box::new(|g, v| Ok(hyper_gelu(g, Ball::assume(v[0]), &BallParams::default())?.var())), t)
        }),
        c("hyper_adaln", |t| {
            let (mut rng, mut store) = layer_store(42);
            let ln = HyperAdaLN::new(&mut store, "ln", 3, 4, 1e-6, &mut rng);
            randomize(&mut store, &mut rng, 0.5);
            let x = ball_rows(&mut rng, &[2, 3, 4], 0.8);
            let cond = uniform(&mut rng, &[2, 3], -1.0, 1.0);
            let (xi, ci) = (x.clone(), cond.clone());
            let s2 = store.clone();
            let a = probed(
                &[x, cond],
                Box::new(move |g, v| {
                    g.bind_params(&s2);
                    Ok(ln.forward(g, Ball::assume(v[0]), v[1], &BallParams::default())?.var())
                }),
                t,
            )?;
            let b = params_check(
                &store,
                &all_ids(&store),
                |g| {
                    let xv = g.constant(xi.clone());
                    let cv = g.constant(ci.clone());
                    Ok(ln.forward(g, Ball::assume(xv), cv, &BallParams::default())?.var())
                },
                t,
                None,
            )?;
            Ok(merge(vec![a, b], t))
        }),
        c("hyper_attention", |t| {
            let (mut rng, mut store) = layer_store(43);
            let att = HyperAttention::new(&mut store, "att", 4, 2, &mut rng)?;
            randomize(&mut store, &mut rng, 0.8);
            let q = ball_rows(&mut rng, &[2, 3, 4], 0.8);
            let k = ball_rows(&mut rng, &[2, 5, 4], 0.8);
            let (qi, ki) = (q.clone(), k.clone());
            let s2 = store.clone();
            let a = probed(
                &[q, k],
                Box::new(move |g, v| {
                    g.bind_params(&s2);
                    Ok(att.forward(g, Ball::assume(v[0]), Ball::assume(v[1]), &BallParams::default())?.var())
                }),
                t,
            )?;
            let b = params_check(
                &store,
                &all_ids(&store),
                |g| {
                    let qv = g.constant(qi.clone());
                    let kv = g.constant(ki.clone());
                    Ok(att.forward(g, Ball::assume(qv), Ball::assume(kv), &BallParams::default())?.var())
                },
                t,
                None,
            )?;
            Ok(merge(vec![a, b], t))
        }),
        c("hyper_ffn", |t| {
            let (mut rng, mut store) = layer_store(44);
            let ffn = HyperFfn::new(&mut store, "ffn", 3, &mut rng);
            randomize(&mut store, &mut rng, 0.5);
            let x = ball_rows(&mut rng, &[4, 3], 0.8);
            let xi = x.clone();
            let s2 = store.clone();
            let a = probed(
                &[x],
                Box::new(move |g, v| {
                    g.bind_params(&s2);
                    Ok(ffn.forward(g, Ball::assume(v[0]), &BallParams::default())?.var())
                }),
                t,
            )?;
            let b = params_check(
                &store,
                &all_ids(&store),
                |g| {
                    let xv = g.constant(xi.clone());
                    Ok(ffn.forward(g, Ball::assume(xv), &BallParams::default())?.var())
                },
                t,
                Some(8),
            )?;
            Ok(merge(vec![a, b], t))
        }),
    ]
}

fn temporal_cases() -> Vec<GradCase> {
    const M: &str = "temporal-prior";
    let c = |name, run| GradCase { module: M, name, tol: 1e-4, run };
    vec![
        c("gru", |t| {
            let (mut rng, mut store) = layer_store(50);
            let gru = GruCell::new(&mut store, "gru", 3, 4, &mut rng);
            randomize(&mut store, &mut rng, 0.8);
            let xs = uniform(&mut rng, &[5, 3], -1.0, 1.0);
            let xi = xs.clone();
            let s2 = store.clone();
            let a = probed(
                &[xs],
                Box::new(move |g, v| {
                    g.bind_params(&s2);
                    gru.run(g, v[0])
                }),
                t,
            )?;
            let b = params_check(
                &store,
                &all_ids(&store),
                |g| {
                    let x = g.constant(xi.clone());
                    gru.run(g, x)
                },
                t,
                None,
            )?;
            Ok(merge(vec![a, b], t))
        }),
        c("pose_motion", |t| {
            let (mut rng, mut store) = layer_store(51);
            let pm = PoseMotion::new(&mut store, "pm", 2, &mut rng);
            randomize(&mut store, &mut rng, 0.5);
            let pose = uniform(&mut rng, &[4, 2, 3], -1.0, 1.0);
            let s2 = store.clone();
            probed(
                &[pose],
                Box::new(move |g, v| {
                    g.bind_params(&s2);
                    pm.forward(g, v[0])
                }),
                t,
            )
        }),
        c("feature_fusion", |t| {
            let (mut rng, mut store) = layer_store(52);
            let ff = FeatureFusion::new(&mut store, "ff", 4, 2, 2, &mut rng)?;
            randomize(&mut store, &mut rng, 0.5);
            let feats = uniform(&mut rng, &[4, 4], -1.0, 1.0);
            let motion = uniform(&mut rng, &[4, 2, 3], -0.5, 0.5);
            let (fi, mi) = (feats.clone(), motion.clone());
            let s2 = store.clone();
            let a = probed(
                &[feats, motion],
                Box::new(move |g, v| {
                    g.bind_params(&s2);
                    ff.forward(g, v[0], v[1])
                }),
                t,
            )?;
            let b = params_check(
                &store,
                &all_ids(&store),
                |g| {
                    let f = g.constant(fi.clone());
                    let m = g.constant(mi.clone());
                    ff.forward(g, f, m)
                },
                t,
                Some(6),
            )?;
            Ok(merge(vec![a, b], t))
        }),
        c("temporal_prior", |t| {
            let (mut rng, mut store) = layer_store(53);
            let tp = TemporalPrior::new(&mut store, "tp", 2, 4, 2, &mut rng)?;
            randomize(&mut store, &mut rng, 0.5);
            let pose = uniform(&mut rng, &[4, 2, 3], -1.0, 1.0);
            let feats = uniform(&mut rng, &[4, 4], -1.0, 1.0);
            let s2 = store.clone();
            probed(
                &[pose, feats],
                Box::new(move |g, v| {
                    g.bind_params(&s2);
                    let m = tp.forward(g, v[0], v[1])?;
                    let flat = g.reshape(m.p_motion, &[4, 6])?;
                    g.concat(&[m.tm_pr, flat], 1)
                }),
                t,
            )
        }),
    ]
}

/// Pipeline on the gradcheck shapes with randomized parameters.
pub fn gradcheck_pipeline(seed: u64) -> Result<(PipelineConfig, MeshTopology, Pipeline)> {
    let cfg = PipelineConfig::gradcheck_toy();
    let topo = MeshTopology::sphere_grid(cfg.n_coarse, cfg.n_fine)?;
    let template = sphere_template(cfg.n_coarse, cfg.template_radius_m)?;
    let mut pipeline = build_pipeline(&cfg, &template)?;
    let mut rng = seeded(seed);
    randomize(&mut pipeline.store, &mut rng, 0.3);
    pipeline.store.set(pipeline.template, template)?;
    Ok((cfg, topo, pipeline))
}

/// Every `stride`-th parameter whose name starts with `prefix`.
fn param_subset(store: &ParamStore, prefix: &str, stride: usize) -> Vec<ParamId> {
    store.iter().filter(|(_, e)| e.name.starts_with(prefix)).map(|(id, _)| id).step_by(stride).collect()
}

fn block_check(motion: bool, t: f64) -> Result<GradReport> {
    let (cfg, _, pipeline) = gradcheck_pipeline(if motion { 61 } else { 60 })?;
    let mut rng = seeded(62);
    let tm_pr = uniform(&mut rng, &[cfg.t_frames, cfg.feature_dim], -1.0, 1.0);
    let joints = uniform(&mut rng, &[cfg.t_frames, cfg.n_joints, 3], -0.5, 0.5);
    let (ti, ji) = (tm_pr.clone(), joints.clone());
    let pl = pipeline.clone();
    let forward = move |g: &mut Graph, p: &Pipeline, tm: Var, js: Var| {
        if motion {
            p.hmo_forward(g, tm, js, 1)
        } else {
            p.hpo_forward(g, tm, js, 1)
        }
    };
    let a = probed(
        &[tm_pr, joints],
        Box::new(move |g, v| {
            g.bind_params(&pl.store);
            forward(g, &pl, v[0], v[1])
        }),
        t,
    )?;
    let prefix = if motion { "hmo." } else { "hpo." };
    let mut ids = param_subset(&pipeline.store, prefix, 3);
    ids.push(pipeline.template);
    let b = params_check(
        &pipeline.store,
        &ids,
        |g| {
            let tm = g.constant(ti.clone());
            let js = g.constant(ji.clone());
            forward(g, &pipeline, tm, js)
        },
        t,
        Some(4),
    )?;
    Ok(merge(vec![a, b], t))
}

fn pipeline_cases() -> Vec<GradCase> {
    const M: &str = "mesh-pipeline";
    vec![
        GradCase { module: M, name: "hpo_forward", tol: 1e-3, run: |t| block_check(false, t) },
        GradCase { module: M, name: "hmo_forward", tol: 1e-3, run: |t| block_check(true, t) },
        GradCase {
            module: M,
            name: "fuse_and_upsample",
            tol: 1e-6,
            run: |t| {
                let topo = MeshTopology::sphere_grid(8, 20)?;
                let mut rng = seeded(63);
                let a = uniform(&mut rng, &[2, 8, 3], -1.0, 1.0);
                let b = uniform(&mut rng, &[2, 8, 3], -1.0, 1.0);
                probed(
                    &[a, b],
                    Box::new(move |g, v| {
                        let (opt, out) = fuse_and_upsample(g, v[0], Some(v[1]), &topo)?;
                        let o = g.reshape(opt, &[16, 3])?;
                        let u = g.reshape(out, &[40, 3])?;
                        g.concat(&[o, u], 0)
                    }),
                    t,
                )
            },
        },
    ]
}

fn loss_fixture(seed: u64, frames: usize) -> Result<(MeshTopology, JointRegressor, Tensor, Tensor)> {
    let topo = MeshTopology::sphere_grid(8, 20)?;
    let mut rng = seeded(seed);
    let gt = Tensor::stack(
        &(0..frames)
            .map(|_| {
                let base = crate::pipeline::sphere_grid_points(4, 5, 0.5);
                let jitter = uniform(&mut rng, &[20, 3], -0.05, 0.05);
                Tensor::from_fn([20, 3], |i| base.data()[i] + jitter.data()[i])
            })
            .collect::<Vec<_>>(),
    )?;
    // offsets bounded away from zero keep every L1 residual off its kink
    let offset = away_from_zero(&mut rng, gt.shape(), 0.01, 0.1);
    let pred = Tensor::from_fn(gt.shape().to_vec(), |i| gt.data()[i] + offset.data()[i]);
    let counts: Vec<usize> = (0..3).map(|j| (0..20).filter(|v| v % 3 == j).count()).collect();
    let reg = JointRegressor::new(Tensor::from_fn([3, 20], |i| {
        let (j, v) = (i / 20, i % 20);
        if v % 3 == j {
            1.0 / counts[j] as f64
        } else {
            0.0
        }
    }))?;
    Ok((topo, reg, pred, gt))
}

fn loss_term(which: usize, t: f64) -> Result<GradReport> {
    let (topo, reg, pred, gt) = loss_fixture(70 + which as u64, 2)?;
    gradcheck(
        move |g, v| {
            let gv = g.constant(gt.clone());
            if which == 4 {
                return hyperbolic_mesh_loss(g, v[0], gv, 1.0, &BallParams::default());
            }
            let l = euclidean_losses(g, v[0], gv, &reg, &topo)?;
            Ok([l.mesh, l.joint, l.normal, l.edge][which])
        },
        &[pred],
        DEFAULT_STEP,
        t,
    )
}

fn total_loss_end_to_end(t: f64) -> Result<GradReport> {
    let (cfg, topo, pipeline) = gradcheck_pipeline(80)?;
    let template = sphere_template(cfg.n_coarse, cfg.template_radius_m)?;
    let scene = synth_generate(&cfg, &topo, &template)?;
    let mut ids = param_subset(&pipeline.store, "", 7);
    if !ids.contains(&pipeline.template) {
        ids.push(pipeline.template);
    }
    gradcheck_params(
        &pipeline.store,
        &ids,
        |g| Ok(sequence_loss(g, &pipeline, &scene, &topo, &cfg)?.total),
        DEFAULT_STEP,
        t,
        Some(3),
    )
}

fn loss_cases() -> Vec<GradCase> {
    const M: &str = "losses-metrics";
    let c = |name, tol, run| GradCase { module: M, name, tol, run };
    vec![
        c("mesh_l1", 1e-5, |t| loss_term(0, t)),
        c("joint_l1", 1e-5, |t| loss_term(1, t)),
        c("normal", 1e-5, |t| loss_term(2, t)),
        c("edge", 1e-5, |t| loss_term(3, t)),
        c("hyperbolic_mesh", 1e-5, |t| loss_term(4, t)),
        c("total_loss_end_to_end", 1e-3, total_loss_end_to_end),
        c("total_loss_weights", 1e-5, |t| {
            let x = uniform(&mut seeded(81), &[5], 0.5, 1.5);
            gradcheck(
                |g, v| {
                    let parts: Vec<Var> = (0..5).map(|i| g.slice(v[0], 0, i, 1)).collect::<Result<_>>()?;
                    let parts: Vec<Var> = parts.into_iter().map(|p| g.sum(p)).collect::<Result<_>>()?;
                    let l = crate::losses::EuclideanLosses {
                        mesh: parts[0],
                        joint: parts[1],
                        normal: parts[2],
                        edge: parts[3],
                        degenerate_faces: 0,
                    };
                    total_loss(g, &l, parts[4], &crate::losses::LossWeights::default())
                },
                &[x],
                DEFAULT_STEP,
                t,
            )
        }),
    ]
}

/// All registered gradient checks.
pub fn grad_cases() -> Vec<GradCase> {
    let mut v = primitive_cases();
    v.extend(manifold_cases());
    v.extend(hyperlayer_cases());
    v.extend(temporal_cases());
    v.extend(pipeline_cases());
    v.extend(loss_cases());
    v
}

#[derive(Debug, Clone)]
pub struct GradOutcome {
    pub module: &'static str,
    pub name: &'static str,
    pub tol: f64,
    pub report: core::result::Result<GradReport, Error>,
}

impl GradOutcome {
    pub fn passed(&self) -> bool {
        matches!(&self.report, Ok(r) if r.passed())
    }
}

/// Run the registered gradient checks, optionally restricted to one module
/// and with a tolerance override.
pub fn run_gradchecks(module: Option<&str>, tol: Option<f64>) -> Result<Vec<GradOutcome>> {
    check_module(module)?;
    Ok(grad_cases()
        .into_iter()
        .filter(|c| module.is_none_or(|m| m == c.module))
        .map(|c| GradOutcome { module: c.module, name: c.name, tol: tol.unwrap_or(c.tol), report: c.run(tol) })
        .collect())
}

// ---- property checks --------------------------------------------------------

pub type PropResult = core::result::Result<(), String>;

pub struct PropCase {
    pub module: &'static str,
    pub name: &'static str,
    check: fn(&mut ChaCha8Rng) -> PropResult,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropOutcome {
    pub module: &'static str,
    pub name: &'static str,
    pub cases: usize,
    pub passed: usize,
    pub first_failure: Option<String>,
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> PropResult {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn lib<T>(r: Result<T>) -> core::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn close(a: &Tensor, b: &Tensor, tol: f64, what: &str) -> PropResult {
    let d = lib(a.max_abs_diff(b))?;
    ensure(d <= tol, || format!("{what}: max abs error {d:e} > {tol:e}"))
}

fn row_tensor(v: &[f64]) -> Tensor {
    Tensor::vector(v.to_vec())
}

/// Unprojected Möbius sum, for deciding whether a sample stays inside the
/// projection radius.
pub fn mobius_add_plain(x: &[f64], y: &[f64]) -> Vec<f64> {
    let xy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let x2: f64 = x.iter().map(|a| a * a).sum();
    let y2: f64 = y.iter().map(|a| a * a).sum();
    let den = 1.0 + 2.0 * xy + x2 * y2;
    x.iter().zip(y).map(|(a, b)| ((1.0 + 2.0 * xy + y2) * a + (1.0 - x2) * b) / den).collect()
}

fn ball_violation(g: &Graph, v: Var, p: &BallParams) -> Option<f64> {
    g.value(v).rows().map(norm).find(|&n| n > p.max_norm() + 1e-12)
}

fn manifold_props() -> Vec<PropCase> {
    const M: &str = "manifold";
    let c = |name, check| PropCase { module: M, name, check };
    vec![
        c("right_identity", |rng| {
            let p = BallParams::default();
            let d = rng.random_range(1..8);
            let x = row_tensor(&ball_point(rng, d, &p));
            let mut g = Graph::new();
            let (xv, z) = (g.constant(x.clone()), g.constant(Tensor::zeros([d])));
            let r = lib(mobius_add(&mut g, Ball::assume(xv), Ball::assume(z), &p))?;
            close(g.value(r.var()), &x, 1e-9, "x (+) 0")
        }),
        c("left_identity", |rng| {
            let p = BallParams::default();
            let d = rng.random_range(1..8);
            let y = row_tensor(&ball_point(rng, d, &p));
            let mut g = Graph::new();
            let (yv, z) = (g.constant(y.clone()), g.constant(Tensor::zeros([d])));
            let r = lib(mobius_add(&mut g, Ball::assume(z), Ball::assume(yv), &p))?;
            close(g.value(r.var()), &y, 1e-9, "0 (+) y")
        }),
        c("left_cancellation", |rng| {
            let p = BallParams::default();
            let d = rng.random_range(1..8);
            let x = ball_point(rng, d, &p);
            let mut y = ball_point(rng, d, &p);
            // keep x (+) y off the projection radius so the identity is exact
            while norm(&mobius_add_plain(&x, &y)) > p.max_norm() {
                y = ball_point(rng, d, &p);
            }
            let mut g = Graph::new();
            let xv = Ball::assume(g.constant(row_tensor(&x)));
            let yv = Ball::assume(g.constant(row_tensor(&y)));
            let s = lib(mobius_add(&mut g, xv, yv, &p))?;
            let nx = lib(mobius_neg(&mut g, xv))?;
            let r = lib(mobius_add(&mut g, nx, s, &p))?;
            close(g.value(r.var()), &row_tensor(&y), 1e-9, "(-x) (+) (x (+) y)")
        }),
        c("matvec_identity", |rng| {
            let p = BallParams::default();
            let d = rng.random_range(1..8);
            let x = row_tensor(&ball_point(rng, d, &p));
            let mut g = Graph::new();
            let (xv, w) = (g.constant(x.clone()), g.constant(Tensor::eye(d)));
            let r = lib(mobius_matvec(&mut g, w, Ball::assume(xv), &p))?;
            close(g.value(r.var()), &x, 1e-9, "I (x) x")
        }),
        c("exp_log_roundtrip", |rng| {
            let p = BallParams::default();
            let d = rng.random_range(1..8);
            let x = ball_point(rng, d, &p);
            // tangent vector whose image has the same norm as x
            let r = norm(&x);
            let v: Vec<f64> = if r > 0.0 { x.iter().map(|a| a / r * 2.0 * libm::atanh(r)).collect() } else { x.clone() };
            let mut g = Graph::new();
            let xv = g.constant(row_tensor(&x));
            let vv = g.constant(row_tensor(&v));
            let l = lib(logmap0(&mut g, Ball::assume(xv), &p))?;
            let back = lib(expmap0(&mut g, l, &p))?;
            close(g.value(back.var()), &row_tensor(&x), 1e-9, "exp0(log0 x)")?;
            let e = lib(expmap0(&mut g, Tangent::new(vv), &p))?;
            let back = lib(logmap0(&mut g, e, &p))?;
            let scale = 1.0f64.max(norm(&v));
            let err = lib(g.value(back.var()).max_abs_diff(&row_tensor(&v)))? / scale;
            ensure(err <= 1e-9, || format!("log0(exp0 v): relative error {err:e}"))
        }),
        c("matvec_matches_tangent_form", |rng| {
            let p = BallParams::default();
            let (m, n) = (rng.random_range(1..6), rng.random_range(1..6));
            let w = uniform(rng, &[m, n], -1.5, 1.5);
            let x = row_tensor(&ball_point(rng, n, &p));
            let mut g = Graph::new();
            let (wv, xv) = (g.constant(w), g.constant(x));
            let a = lib(mobius_matvec(&mut g, wv, Ball::assume(xv), &p))?;
            let l = lib(logmap0(&mut g, Ball::assume(xv), &p))?;
            let col = lib(g.reshape(l.var(), &[n, 1]))?;
            let wl = lib(g.matmul(wv, col))?;
            let wl = lib(g.reshape(wl, &[m]))?;
            let b = lib(expmap0(&mut g, Tangent::new(wl), &p))?;
            close(g.value(a.var()), g.value(b.var()), 1e-8, "matvec vs exp0(W log0 x)")
        }),
        c("sums_stay_in_ball", |rng| {
            let p = BallParams::default();
            let d = rng.random_range(1..8);
            let (x, y) = (ball_point(rng, d, &p), ball_point(rng, d, &p));
            let mut g = Graph::new();
            let xv = Ball::assume(g.constant(row_tensor(&x)));
            let yv = Ball::assume(g.constant(row_tensor(&y)));
            let s = lib(mobius_add(&mut g, xv, yv, &p))?;
            ensure(ball_violation(&g, s.var(), &p).is_none(), || "sum left the ball".into())
        }),
    ]
}

fn random_layers_stay_in_ball(rng: &mut ChaCha8Rng, which: u8) -> PropResult {
    let p = BallParams::default();
    let mut store = ParamStore::new();
    let scale = rng.random_range(0.05..2.0);
    let x = ball_rows(rng, &[2, 3, 4], 1.0 - 2.0 * p.eps_ball);
    let mut g = Graph::new();
    let out = match which {
        0 => {
            let l = HyperbolicLinear::new(&mut store, "l", 4, 4, rng);
            randomize(&mut store, rng, scale);
            g.bind_params(&store);
            let xv = Ball::assume(g.constant(x));
            lib(l.forward(&mut g, xv, &p))?
        }
        1 => {
            let f = HyperFfn::new(&mut store, "f", 4, rng);
            randomize(&mut store, rng, scale);
            g.bind_params(&store);
            let xv = Ball::assume(g.constant(x));
            lib(f.forward(&mut g, xv, &p))?
        }
        2 => {
            let a = lib(HyperAttention::new(&mut store, "a", 4, 2, rng))?;
            randomize(&mut store, rng, scale);
            g.bind_params(&store);
            let xv = Ball::assume(g.constant(x));
            lib(a.forward(&mut g, xv, xv, &p))?
        }
        _ => {
            let n = HyperAdaLN::new(&mut store, "n", 3, 4, 1e-6, rng);
            randomize(&mut store, rng, scale);
            g.bind_params(&store);
            let xv = Ball::assume(g.constant(x));
            let cond = g.constant(uniform(rng, &[2, 3], -3.0, 3.0));
            lib(n.forward(&mut g, xv, cond, &p))?
        }
    };
    ensure(ball_violation(&g, out.var(), &p).is_none(), || "layer output left the ball".into())
}

fn hyperlayer_props() -> Vec<PropCase> {
    const M: &str = "hyperlayers";
    let c = |name, check| PropCase { module: M, name, check };
    vec![
        c("linear_in_ball", |rng| random_layers_stay_in_ball(rng, 0)),
        c("ffn_in_ball", |rng| random_layers_stay_in_ball(rng, 1)),
        c("attention_in_ball", |rng| random_layers_stay_in_ball(rng, 2)),
        c("adaln_in_ball", |rng| random_layers_stay_in_ball(rng, 3)),
        c("attention_key_permutation", |rng| {
            let p = BallParams::default();
            let mut store = ParamStore::new();
            let att = lib(HyperAttention::new(&mut store, "a", 4, 2, rng))?;
            randomize(&mut store, rng, 0.8);
            let q = ball_rows(rng, &[3, 4], 0.9);
            let k = ball_rows(rng, &[5, 4], 0.9);
            let mut perm: Vec<usize> = (0..5).collect();
            for i in (1..5).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let mut g = Graph::with_params(&store);
            let (qv, kv) = (g.constant(q), g.constant(k));
            let kp = lib(g.index_select(kv, 0, &perm))?;
            let a = lib(att.forward(&mut g, Ball::assume(qv), Ball::assume(kv), &p))?;
            let b = lib(att.forward(&mut g, Ball::assume(qv), Ball::assume(kp), &p))?;
            close(g.value(a.var()), g.value(b.var()), 1e-12, "permuted keys")
        }),
    ]
}

fn tensor_props() -> Vec<PropCase> {
    const M: &str = "tensor-autodiff";
    let c = |name, check| PropCase { module: M, name, check };
    vec![
        c("broadcast_add_matches_loop", |rng| {
            let (a0, a1, a2) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
            let a = uniform(rng, &[a0, a1, a2], -1.0, 1.0);
            let b = uniform(rng, &[a1, 1], -1.0, 1.0);
            let mut g = Graph::new();
            let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
            let s = lib(g.add(av, bv))?;
            let expect = Tensor::from_fn([a0, a1, a2], |i| a.data()[i] + b.data()[(i / a2) % a1]);
            close(g.value(s), &expect, 0.0, "broadcast add")
        }),
        c("softmax_rows_are_distributions", |rng| {
            let n = rng.random_range(1..7);
            let x = uniform(rng, &[3, n], -30.0, 30.0);
            let mut g = Graph::new();
            let xv = g.constant(x);
            let s = lib(g.softmax(xv, 1))?;
            for row in g.value(s).rows() {
                let sum: f64 = row.iter().sum();
                ensure((sum - 1.0).abs() < 1e-12 && row.iter().all(|&v| v >= 0.0), || format!("row sums to {sum}"))?;
            }
            Ok(())
        }),
        c("matmul_matches_loop", |rng| {
            let (m, k, n) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
            let a = uniform(rng, &[m, k], -1.0, 1.0);
            let b = uniform(rng, &[k, n], -1.0, 1.0);
            let mut g = Graph::new();
            let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
            let c = lib(g.matmul(av, bv))?;
            let expect = Tensor::from_fn([m, n], |i| (0..k).map(|j| a.data()[(i / n) * k + j] * b.data()[j * n + i % n]).sum());
            close(g.value(c), &expect, 1e-12, "matmul")
        }),
    ]
}

fn temporal_props() -> Vec<PropCase> {
    const M: &str = "temporal-prior";
    let c = |name, check| PropCase { module: M, name, check };
    vec![
        c("static_sequence_zero_diff", |rng| {
            let mut store = ParamStore::new();
            let j = rng.random_range(1..5);
            let pm = PoseMotion::new(&mut store, "pm", j, rng);
            let frame = uniform(rng, &[j, 3], -1.0, 1.0);
            let t = 2 * rng.random_range(1..4);
            let pose = Tensor::from_fn([t, j, 3], |i| frame.data()[i % (j * 3)]);
            let mut g = Graph::with_params(&store);
            let pv = g.constant(pose);
            let feats = lib(pm.motion_features(&mut g, pv))?;
            let diff = lib(g.slice(feats, 2, 0, 3))?;
            ensure(g.value(diff).data().iter().all(|&v| v == 0.0), || "diff of a static sequence is nonzero".into())
        }),
        c("gru_state_bounded", |rng| {
            let mut store = ParamStore::new();
            let gru = GruCell::new(&mut store, "g", 3, 4, rng);
            randomize(&mut store, rng, 2.0);
            let xs = uniform(rng, &[6, 3], -5.0, 5.0);
            let mut g = Graph::with_params(&store);
            let xv = g.constant(xs);
            let h = lib(gru.run(&mut g, xv))?;
            // tanh saturates to exactly 1 in floating point
            ensure(g.value(h).data().iter().all(|v| v.abs() <= 1.0), || "hidden state left [-1, 1]".into())
        }),
    ]
}

fn pipeline_props() -> Vec<PropCase> {
    const M: &str = "mesh-pipeline";
    let c = |name, check| PropCase { module: M, name, check };
    vec![
        c("upsampler_reproduces_constants", |rng| {
            let sizes = [(6, 6), (6, 12), (8, 20), (12, 48), (9, 30)];
            let (nc, nf) = sizes[rng.random_range(0..sizes.len())];
            let topo = lib(MeshTopology::sphere_grid(nc, nf))?;
            let c = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let mut g = Graph::new();
            let m = g.constant(Tensor::from_fn([nc, 3], |i| c[i % 3]));
            let (_, out) = lib(fuse_and_upsample(&mut g, m, None, &topo))?;
            close(g.value(out), &Tensor::from_fn([nf, 3], |i| c[i % 3]), 1e-12, "constant mesh")
        }),
        c("fusion_is_additive", |rng| {
            let topo = lib(MeshTopology::sphere_grid(8, 20))?;
            let [a, b, cc] = [0; 3].map(|_| uniform(rng, &[8, 3], -1.0, 1.0));
            let mut g = Graph::new();
            let (av, bv, cv) = (g.constant(a), g.constant(b), g.constant(cc));
            let (o1, _) = lib(fuse_and_upsample(&mut g, av, Some(bv), &topo))?;
            let (o2, _) = lib(fuse_and_upsample(&mut g, cv, None, &topo))?;
            let lhs = lib(g.add(o1, o2))?;
            let ac = lib(g.add(av, cv))?;
            let (rhs, _) = lib(fuse_and_upsample(&mut g, ac, Some(bv), &topo))?;
            close(g.value(lhs), g.value(rhs), 1e-12, "fusion")
        }),
    ]
}

fn rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    // normalized random quaternion
    let q = direction(rng, 4);
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn transform(t: &Tensor, r: &[[f64; 3]; 3], s: f64, shift: [f64; 3]) -> Tensor {
    Tensor::from_fn(t.shape().to_vec(), |i| {
        let row = &t.data()[(i / 3) * 3..(i / 3) * 3 + 3];
        let a = i % 3;
        s * (r[a][0] * row[0] + r[a][1] * row[1] + r[a][2] * row[2]) + shift[a]
    })
}

fn loss_props() -> Vec<PropCase> {
    const M: &str = "losses-metrics";
    let c = |name, check| PropCase { module: M, name, check };
    vec![
        c("hymesh_nonnegative_symmetric", |rng| {
            let p = BallParams::default();
            let a = uniform(rng, &[5, 3], -1.0, 1.0);
            let b = if rng.random_bool(0.2) { a.clone() } else { uniform(rng, &[5, 3], -1.0, 1.0) };
            let mut g = Graph::new();
            let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
            let ab = lib(hyperbolic_mesh_loss(&mut g, av, bv, 1.0, &p))?;
            let ba = lib(hyperbolic_mesh_loss(&mut g, bv, av, 1.0, &p))?;
            let (x, y) = (lib(g.value(ab).item())?, lib(g.value(ba).item())?);
            ensure(x >= 0.0 && x == y && ((x == 0.0) == (a == b)) && x <= 6.0, || format!("hymesh {x} vs {y}"))
        }),
        c("edge_normal_rigid_invariance", |rng| {
            let (topo, reg, pred, gt) = lib(loss_fixture(rng.random(), 1))?;
            let (r, sh) = (rotation(rng), [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.3]);
            let mut g = Graph::new();
            let (pv, gv) = (g.constant(pred.clone()), g.constant(gt.clone()));
            let base = lib(euclidean_losses(&mut g, pv, gv, &reg, &topo))?;
            let pm = g.constant(transform(&pred, &r, 1.0, sh));
            let gm = g.constant(transform(&gt, &r, 1.0, sh));
            let moved = lib(euclidean_losses(&mut g, pm, gm, &reg, &topo))?;
            let pt = g.constant(transform(&pred, &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], 1.0, sh));
            let shifted = lib(euclidean_losses(&mut g, pt, gv, &reg, &topo))?;
            let v = |x: Var| g.value(x).item().unwrap_or(f64::NAN);
            ensure(
                (v(base.edge) - v(moved.edge)).abs() < 1e-12
                    && (v(base.normal) - v(moved.normal)).abs() < 1e-12
                    && (v(base.edge) - v(shifted.edge)).abs() < 1e-12,
                || "edge/normal terms changed under rigid motion".into(),
            )
        }),
        c("pa_mpjpe_le_mpjpe", |rng| {
            let j = rng.random_range(3..10);
            let gt = uniform(rng, &[j, 3], -1.0, 1.0);
            let r = rotation(rng);
            let moved = transform(&gt, &r, rng.random_range(0.5..1.5), [0.1, -0.2, 0.3]);
            let noise = uniform(rng, &[j, 3], -0.2, 0.2);
            let pred = Tensor::from_fn([j, 3], |i| moved.data()[i] + noise.data()[i]);
            let (a, b) = (lib(pa_mpjpe(&pred, &gt))?, lib(mpjpe(&pred, &gt, 0))?);
            ensure(a <= b + 1e-9, || format!("PA-MPJPE {a} > MPJPE {b}"))
        }),
        c("similarity_absorbed", |rng| {
            let j = rng.random_range(3..10);
            let gt = uniform(rng, &[j, 3], -1.0, 1.0);
            let pred = transform(&gt, &rotation(rng), rng.random_range(0.5..2.0), [0.5, 0.1, -0.4]);
            let (a, b) = (lib(pa_mpjpe(&pred, &gt))?, lib(mpjpe(&pred, &gt, 0))?);
            ensure(a < 1e-6 && b > 0.0, || format!("PA-MPJPE {a}, MPJPE {b}"))
        }),
        c("accel_ignores_linear_drift", |rng| {
            let (t, j) = (rng.random_range(3..9), rng.random_range(1..6));
            let gt: Vec<Tensor> = (0..t).map(|_| uniform(rng, &[j, 3], -1.0, 1.0)).collect();
            let (v0, v1) = (uniform(rng, &[j, 3], -1.0, 1.0), uniform(rng, &[j, 3], -0.1, 0.1));
            let pred: Vec<Tensor> = gt
                .iter()
                .enumerate()
                .map(|(k, m)| Tensor::from_fn([j, 3], |i| m.data()[i] + v0.data()[i] + k as f64 * v1.data()[i]))
                .collect();
            let e = lib(accel_error(&pred, &gt))?;
            ensure(e < 1e-9, || format!("accel error {e:e}"))
        }),
    ]
}

fn harness_props() -> Vec<PropCase> {
    const M: &str = "harness";
    vec![PropCase {
        module: M,
        name: "synthetic_scene_consistent",
        check: |rng| {
            let mut cfg = PipelineConfig::gradcheck_toy();
            cfg.seed = rng.random();
            cfg.motion_amplitude_m = rng.random_range(0.0..0.2);
            let topo = lib(MeshTopology::sphere_grid(cfg.n_coarse, cfg.n_fine))?;
            let tpl = lib(sphere_template(cfg.n_coarse, cfg.template_radius_m))?;
            let a = lib(synth_generate(&cfg, &topo, &tpl))?;
            let b = lib(synth_generate(&cfg, &topo, &tpl))?;
            ensure(a == b, || "scene differs between runs".into())?;
            for t in 0..cfg.t_frames {
                let joints = lib(a.regressor.regress(&lib(a.mesh(t))?))?;
                close(&joints, &lib(a.pose.index0(t))?, 1e-9, "R mesh vs pose")?;
            }
            Ok(())
        },
    }]
}

pub fn prop_cases() -> Vec<PropCase> {
    let mut v = tensor_props();
    v.extend(manifold_props());
    v.extend(hyperlayer_props());
    v.extend(temporal_props());
    v.extend(pipeline_props());
    v.extend(loss_props());
    v.extend(harness_props());
    v
}

/// Run every property `cases` times with per-property seeded streams.
pub fn run_propchecks(module: Option<&str>, cases: usize, seed: u64) -> Result<Vec<PropOutcome>> {
    check_module(module)?;
    Ok(prop_cases()
        .into_iter()
        .enumerate()
        .filter(|(_, c)| module.is_none_or(|m| m == c.module))
        .map(|(i, c)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64));
            let mut passed = 0;
            let mut first_failure = None;
            for k in 0..cases {
                match (c.check)(&mut rng) {
                    Ok(()) => passed += 1,
                    Err(e) if first_failure.is_none() => first_failure = Some(format!("case {k}: {e}")),
                    Err(_) => {}
                }
            }
            PropOutcome { module: c.module, name: c.name, cases, passed, first_failure }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_module_is_rejected() {
        assert!(run_gradchecks(Some("nope"), None).is_err());
        assert!(run_propchecks(Some("nope"), 1, 0).is_err());
    }

    #[test]
    fn every_module_has_properties() {
        let cases = prop_cases();
        for m in MODULES {
            assert!(cases.iter().any(|c| c.module == *m), "{m}");
        }
    }

    #[test]
    fn propchecks_pass_briefly() {
        for o in run_propchecks(None, 20, 1).unwrap() {
            assert_eq!(o.passed, o.cases, "{} {}: {:?}", o.module, o.name, o.first_failure);
        }
    }
}
