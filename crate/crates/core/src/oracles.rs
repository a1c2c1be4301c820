//! Straightforward loop implementations on plain slices, used as
//! independent references for the graph versions of attention, the GRU and
//! the training losses. Each `*_max_error` runs seeded random instances and
//! returns the largest absolute disagreement.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checks::perturb_params;
use crate::error::Result;
use crate::graph::Graph;
use crate::hyperlayers::{multi_head_attention, HyperAttention};
use crate::losses::{euclidean_losses, hyperbolic_mesh_loss, JointRegressor};
use crate::manifold::{Ball, BallParams};
use crate::params::ParamStore;
use crate::pipeline::MeshTopology;
use crate::temporal::GruCell;
use crate::tensor::Tensor;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| libm::fabs(x - y)).fold(0.0, f64::max)
}

fn norm(v: &[f64]) -> f64 {
    libm::sqrt(v.iter().map(|x| x * x).sum::<f64>())
}

/// `x W^T` for row-major rows `x`.
pub fn matvec_rows(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (m, n) = (w.shape()[0], w.shape()[1]);
    let wd = w.data();
    x.chunks(n).flat_map(|r| (0..m).map(move |i| (0..n).map(|k| wd[i * n + k] * r[k]).sum::<f64>())).collect()
}

/// Exponential map at the origin with the same boundary projection as the
/// graph version.
pub fn exp0(v: &[f64], p: &BallParams) -> Vec<f64> {
    let r = norm(v);
    if r < p.eps_norm {
        return vec![0.0; v.len()];
    }
    let out: Vec<f64> = v.iter().map(|a| libm::tanh(r / 2.0) * a / r).collect();
    let n = norm(&out);
    if n > p.max_norm() {
        out.iter().map(|a| a * p.max_norm() / n).collect()
    } else {
        out
    }
}

pub fn log0(x: &[f64]) -> Vec<f64> {
    let r = norm(x);
    if r == 0.0 {
        return vec![0.0; x.len()];
    }
    x.iter().map(|a| 2.0 * libm::atanh(r) * a / r).collect()
}

/// Closed-form Möbius matrix-vector product on one row.
pub fn mobius_matvec_row(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let wx = matvec_rows(x, w);
    let (xn, wn) = (norm(x), norm(&wx));
    if xn == 0.0 || wn == 0.0 {
        return vec![0.0; wx.len()];
    }
    wx.iter().map(|a| libm::tanh(wn / xn * libm::atanh(xn)) * a / wn).collect()
}

/// Per-head scaled dot-product attention with explicit loops; `q: [nq, d]`,
/// `k, v: [nk, d]`.
pub fn attention_loop(q: &[f64], k: &[f64], v: &[f64], nq: usize, nk: usize, d: usize, heads: usize) -> Vec<f64> {
    let hd = d / heads;
    let mut out = vec![0.0; nq * d];
    for h in 0..heads {
        for i in 0..nq {
            let scores: Vec<f64> = (0..nk)
                .map(|j| {
                    (0..hd).map(|c| q[i * d + h * hd + c] * k[j * d + h * hd + c]).sum::<f64>() / libm::sqrt(hd as f64)
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| libm::exp(s - m)).collect();
            let z: f64 = e.iter().sum();
            for c in 0..hd {
                out[i * d + h * hd + c] = (0..nk).map(|j| e[j] / z * v[j * d + h * hd + c]).sum();
            }
        }
    }
    out
}

fn ball_rows(rng: &mut ChaCha8Rng, rows: usize, d: usize, max: f64) -> Tensor {
    let mut data = Vec::with_capacity(rows * d);
    for _ in 0..rows {
        let v: Vec<f64> = loop {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            if norm(&v) > 1e-3 {
                break v;
            }
        };
        let r = rng.random_range(0.05..max) / norm(&v);
        data.extend(v.iter().map(|a| a * r));
    }
    Tensor::new([rows, d], data).expect("rows")
}

/// Euclidean multi-head attention core.
pub fn attention_core_max_error(instances: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heads = rng.random_range(1..4);
        let d = heads * rng.random_range(1..4);
        let (nq, nk) = (rng.random_range(1..6), rng.random_range(1..6));
        let q = rand_tensor(&mut rng, &[nq, d], -2.0, 2.0);
        let k = rand_tensor(&mut rng, &[nk, d], -2.0, 2.0);
        let v = rand_tensor(&mut rng, &[nk, d], -2.0, 2.0);
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let out = multi_head_attention(&mut g, qv, kv, vv, heads)?;
        let want = attention_loop(q.data(), k.data(), v.data(), nq, nk, d, heads);
        worst = worst.max(max_diff(g.value(out).data(), &want));
    }
    Ok(worst)
}

/// Full hyperbolic attention layer: Möbius projections, tangent-space
/// attention, output projection, exp0.
pub fn hyperbolic_attention_max_error(instances: u64) -> Result<f64> {
    let p = BallParams::default();
    let mut worst = 0.0f64;
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let heads = rng.random_range(1..3);
        let d = heads * rng.random_range(1..4);
        let (nq, nk) = (rng.random_range(1..5), rng.random_range(1..5));
        let mut store = ParamStore::new();
        let att = HyperAttention::new(&mut store, "att", d, heads, &mut rng)?;
        perturb_params(&mut store, seed, 0.8);
        let xq = ball_rows(&mut rng, nq, d, 0.9);
        let xk = ball_rows(&mut rng, nk, d, 0.9);
        let mut g = Graph::with_params(&store);
        let (qv, kv) = (g.constant(xq.clone()), g.constant(xk.clone()));
        let out = att.forward(&mut g, Ball::assume(qv), Ball::assume(kv), &p)?;

        let proj =
            |x: &Tensor, w: &Tensor| -> Vec<f64> { x.rows().flat_map(|r| log0(&mobius_matvec_row(w, r))).collect() };
        let lq = proj(&xq, store.value(att.wq));
        let lk = proj(&xk, store.value(att.wk));
        let lv = proj(&xk, store.value(att.wv));
        let ctx = attention_loop(&lq, &lk, &lv, nq, nk, d, heads);
        let projected = matvec_rows(&ctx, store.value(att.wo));
        let want: Vec<f64> = projected.chunks(d).flat_map(|r| exp0(r, &p)).collect();
        worst = worst.max(max_diff(g.value(out.var()).data(), &want));
    }
    Ok(worst)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

/// GRU over a random sequence against the step-by-step recurrence.
pub fn gru_max_error(instances: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let (input, hidden, steps) = (rng.random_range(1..5), rng.random_range(1..6), rng.random_range(1..9));
        let mut store = ParamStore::new();
        let gru = GruCell::new(&mut store, "gru", input, hidden, &mut rng);
        perturb_params(&mut store, seed, 0.7);
        let xs = rand_tensor(&mut rng, &[steps, input], -1.5, 1.5);
        let mut g = Graph::with_params(&store);
        let xv = g.constant(xs.clone());
        let out = gru.run(&mut g, xv)?;

        let w = |id| store.value(id);
        let (bz, br, bh) = (w(gru.b_z).data(), w(gru.b_r).data(), w(gru.b_h).data());
        let mut h = vec![0.0; hidden];
        let mut want = Vec::new();
        for x in xs.rows() {
            let (ax, ar, ah) = (matvec_rows(x, w(gru.w_z)), matvec_rows(x, w(gru.w_r)), matvec_rows(x, w(gru.w_h)));
            let (hz, hr) = (matvec_rows(&h, w(gru.u_z)), matvec_rows(&h, w(gru.u_r)));
            let z: Vec<f64> = (0..hidden).map(|i| sigmoid(ax[i] + hz[i] + bz[i])).collect();
            let r: Vec<f64> = (0..hidden).map(|i| sigmoid(ar[i] + hr[i] + br[i])).collect();
            let rh: Vec<f64> = (0..hidden).map(|i| r[i] * h[i]).collect();
            let hh = matvec_rows(&rh, w(gru.u_h));
            let cand: Vec<f64> = (0..hidden).map(|i| libm::tanh(ah[i] + hh[i] + bh[i])).collect();
            h = (0..hidden).map(|i| (1.0 - z[i]) * cand[i] + z[i] * h[i]).collect();
            want.extend_from_slice(&h);
        }
        worst = worst.max(max_diff(g.value(out).data(), &want));
    }
    Ok(worst)
}

fn random_regressor(rng: &mut ChaCha8Rng, joints: usize, n: usize) -> Result<JointRegressor> {
    let mut m = rand_tensor(rng, &[joints, n], 0.0, 1.0);
    for row in m.data_mut().chunks_mut(n) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|w| *w /= s);
    }
    JointRegressor::new(m)
}

fn vtx(m: &[f64], i: usize) -> [f64; 3] {
    [m[3 * i], m[3 * i + 1], m[3 * i + 2]]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Loop values of the mesh, joint, normal, edge and hyperbolic mesh terms
/// for `pred, gt: [T, n, 3]`.
pub fn losses_loop(
    pred: &Tensor,
    gt: &Tensor,
    reg: &JointRegressor,
    topo: &MeshTopology,
    vertex_scale: f64,
    p: &BallParams,
) -> [f64; 5] {
    let (frames, n) = (pred.shape()[0], pred.shape()[1]);
    let joints = reg.joints();
    let edges = topo.fine_edges();
    let (mut mesh, mut joint, mut normal, mut edge, mut hymesh) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut faces_used = 0usize;
    let r = reg.matrix().data();
    for t in 0..frames {
        let pf = &pred.data()[t * n * 3..(t + 1) * n * 3];
        let gf = &gt.data()[t * n * 3..(t + 1) * n * 3];
        mesh += pf.iter().zip(gf).map(|(a, b)| libm::fabs(a - b)).sum::<f64>();
        for j in 0..joints {
            for c in 0..3 {
                let pj: f64 = (0..n).map(|v| r[j * n + v] * pf[3 * v + c]).sum();
                let gj: f64 = (0..n).map(|v| r[j * n + v] * gf[3 * v + c]).sum();
                joint += libm::fabs(pj - gj);
            }
        }
        for f in &topo.faces {
            let [a, b, c] = f.map(|i| vtx(gf, i));
            let (u, w) = (sub(b, a), sub(c, a));
            let nrm = [u[1] * w[2] - u[2] * w[1], u[2] * w[0] - u[0] * w[2], u[0] * w[1] - u[1] * w[0]];
            let len = norm(&nrm);
            if len < 1e-12 {
                continue;
            }
            faces_used += 1;
            let [pa, pb, pc] = f.map(|i| vtx(pf, i));
            for (x, y) in [(pa, pb), (pb, pc), (pc, pa)] {
                let e = sub(y, x);
                let el = norm(&e).max(1e-12);
                normal += libm::fabs((0..3).map(|k| e[k] / el * nrm[k] / len).sum::<f64>());
            }
        }
        for e in &edges {
            let lp = norm(&sub(vtx(pf, e[1]), vtx(pf, e[0])));
            let lg = norm(&sub(vtx(gf, e[1]), vtx(gf, e[0])));
            edge += libm::fabs(lp.max(1e-12) - lg);
        }
        for v in 0..n {
            let a = exp0(&vtx(pf, v).map(|x| x * vertex_scale), p);
            let b = exp0(&vtx(gf, v).map(|x| x * vertex_scale), p);
            hymesh += a.iter().zip(&b).map(|(x, y)| libm::fabs(x - y)).sum::<f64>();
        }
    }
    [
        mesh / (frames * n) as f64,
        joint / (frames * joints) as f64,
        if faces_used == 0 { 0.0 } else { normal / faces_used as f64 },
        if edges.is_empty() { 0.0 } else { edge / (frames * edges.len()) as f64 },
        hymesh / (frames * n) as f64,
    ]
}

/// Every loss term on random perturbed meshes.
pub fn losses_max_error(instances: u64) -> Result<f64> {
    let p = BallParams::default();
    let topo = MeshTopology::sphere_grid(8, 20)?;
    let n = topo.n_fine;
    let mut worst = 0.0f64;
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let frames = rng.random_range(1..4);
        let joints = rng.random_range(1..5);
        let reg = random_regressor(&mut rng, joints, n)?;
        let gt = rand_tensor(&mut rng, &[frames, n, 3], -0.6, 0.6);
        let pred = Tensor::from_fn([frames, n, 3], |i| gt.data()[i] + rng.random_range(-0.2..0.2));
        let scale = rng.random_range(0.5..2.0);

        let mut g = Graph::new();
        let (pv, gv) = (g.constant(pred.clone()), g.constant(gt.clone()));
        let l = euclidean_losses(&mut g, pv, gv, &reg, &topo)?;
        let hy = hyperbolic_mesh_loss(&mut g, pv, gv, scale, &p)?;
        let got = [l.mesh, l.joint, l.normal, l.edge, hy].map(|v| g.value(v).item());
        let want = losses_loop(&pred, &gt, &reg, &topo, scale, &p);
        for (a, b) in got.into_iter().zip(want) {
            worst = worst.max(libm::fabs(a? - b));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracles_agree_briefly() {
        assert!(attention_core_max_error(5).unwrap() < 1e-9);
        assert!(hyperbolic_attention_max_error(5).unwrap() < 1e-9);
        assert!(gru_max_error(5).unwrap() < 1e-9);
        assert!(losses_max_error(5).unwrap() < 1e-9);
    }
}
