//! Transformer building blocks lifted to the Poincaré ball.
//!
//! Linear maps use Möbius matrix-vector products plus a ball-valued bias.
//! Activation and normalization are sandwiched between `log0` and `exp0`.
//! Attention builds queries, keys and values with Möbius matvecs and then
//! scores and aggregates in the tangent space at the origin.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::manifold::{expmap0, linear_rows, logmap0, mobius_add, mobius_matvec, Ball, BallParams, Tangent};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

/// `h = W (x)_M x (+) b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HyperbolicLinear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl HyperbolicLinear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), &[out_dim, in_dim], rng);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([out_dim]), ParamKind::Ball);
        HyperbolicLinear { weight, bias, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, x: Ball, p: &BallParams) -> Result<Ball> {
        let w = g.param(self.weight);
        let h = mobius_matvec(g, w, x, p)?;
        let b = Ball::assume(g.param(self.bias));
        mobius_add(g, h, b, p)
    }
}

/// `exp0(GELU(log0(x)))`.
pub fn hyper_gelu(g: &mut Graph, x: Ball, p: &BallParams) -> Result<Ball> {
    let t = logmap0(g, x, p)?;
    let a = g.gelu(t.var())?;
    expmap0(g, Tangent::new(a), p)
}

/// Euclidean affine map `y = x W^T + b` used for conditioning projections
/// and embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Affine {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Affine {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), &[out_dim, in_dim], rng);
        let bias = store.add_zeros(format!("{name}.bias"), &[out_dim]);
        Affine { weight, bias }
    }

    /// As [`Affine::new`] with every bias entry set to `bias_value`.
    pub fn with_bias<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias_value: f64,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), &[out_dim, in_dim], rng);
        let bias = store.add(format!("{name}.bias"), Tensor::full([out_dim], bias_value), ParamKind::Euclidean);
        Affine { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = linear_rows(g, x, w)?;
        let b = g.param(self.bias);
        g.add(y, b)
    }
}

/// Adaptive layer normalization on the ball: `exp0(gamma * norm(log0 x) + beta)`
/// with `gamma`, `beta` predicted from a Euclidean conditioning vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperAdaLN {
    pub gamma: Affine,
    pub beta: Affine,
    pub eps_var: f64,
}

impl HyperAdaLN {
    /// `gamma` starts at one and `beta` at zero, up to the weight init.
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cond_dim: usize, dim: usize, eps_var: f64, rng: &mut R) -> Self {
        HyperAdaLN {
            gamma: Affine::with_bias(store, &format!("{name}.gamma"), cond_dim, dim, 1.0, rng),
            beta: Affine::new(store, &format!("{name}.beta"), cond_dim, dim, rng),
            eps_var,
        }
    }

    /// `x: [.., N, d]` on the ball; `cond` is either `[d_c]` (shared) or
    /// `[.., d_c]` with the same leading axes as `x` minus the token axis.
    pub fn forward(&self, g: &mut Graph, x: Ball, cond: Var, p: &BallParams) -> Result<Ball> {
        let t = logmap0(g, x, p)?;
        let normed = normalize_rows(g, t.var(), self.eps_var)?;
        let gamma = self.gamma.forward(g, cond)?;
        let beta = self.beta.forward(g, cond)?;
        let gamma = align_condition(g, gamma, x.var())?;
        let beta = align_condition(g, beta, x.var())?;
        let scaled = g.mul(normed, gamma)?;
        let shifted = g.add(scaled, beta)?;
        expmap0(g, Tangent::new(shifted), p)
    }
}

/// Zero mean, unit variance over the trailing axis.
pub(crate) fn normalize_rows(g: &mut Graph, t: Var, eps_var: f64) -> Result<Var> {
    let axis = g.rank(t) - 1;
    let (mean, var) = g.layer_stats(t, axis)?;
    let centered = g.sub(t, mean)?;
    let v = g.offset(var, eps_var)?;
    let sd = g.sqrt(v)?;
    g.div(centered, sd)
}

/// Insert a token axis so per-sample conditioning `[.., d]` broadcasts over
/// `[.., N, d]`.
fn align_condition(g: &mut Graph, c: Var, x: Var) -> Result<Var> {
    let cs = g.shape(c).to_vec();
    let xs = g.shape(x).to_vec();
    if cs.len() == 1 || cs.len() + 1 != xs.len() {
        return Ok(c);
    }
    let mut shape = cs.clone();
    shape.insert(cs.len() - 1, 1);
    g.reshape(c, &shape)
}

/// Scaled dot-product multi-head attention over tangent or Euclidean
/// features: `q: [.., Nq, d]`, `k, v: [.., Nk, d]` → `[.., Nq, d]`, before
/// any output projection.
pub fn multi_head_attention(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let qs = g.shape(q).to_vec();
    let ks = g.shape(k).to_vec();
    if qs.len() < 2 || ks.len() != qs.len() || g.shape(v) != ks.as_slice() || qs.last() != ks.last() {
        return Err(Error::shapes("attention", &qs, &ks));
    }
    let d = *qs.last().unwrap();
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape("attention", format!("{heads} heads do not divide width {d}")));
    }
    let hd = d / heads;
    let lead = qs.len() - 2;
    let split = |g: &mut Graph, x: Var| -> Result<Var> {
        let mut s = g.shape(x).to_vec();
        s.pop();
        s.extend_from_slice(&[heads, hd]);
        let x = g.reshape(x, &s)?;
        let mut axes: Vec<usize> = (0..lead).collect();
        axes.extend_from_slice(&[lead + 1, lead, lead + 2]);
        g.permute(x, &axes)
    };
    let qh = split(g, q)?;
    let kh = split(g, k)?;
    let vh = split(g, v)?;
    let kt = g.transpose(kh)?;
    let scores = g.matmul(qh, kt)?;
    let scores = g.scale(scores, 1.0 / libm::sqrt(hd as f64))?;
    let last = g.rank(scores) - 1;
    let alpha = g.softmax(scores, last)?;
    let ctx = g.matmul(alpha, vh)?;
    let mut axes: Vec<usize> = (0..lead).collect();
    axes.extend_from_slice(&[lead + 1, lead, lead + 2]);
    let ctx = g.permute(ctx, &axes)?;
    g.reshape(ctx, &qs)
}

/// Hyperbolic multi-head attention with tangent-space scores and
/// aggregation. Self-attention passes the same node as both sources.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HyperAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub dim: usize,
}

impl HyperAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide width {dim}")));
        }
        Ok(HyperAttention {
            wq: store.add_uniform(format!("{name}.wq"), &[dim, dim], rng),
            wk: store.add_uniform(format!("{name}.wk"), &[dim, dim], rng),
            wv: store.add_uniform(format!("{name}.wv"), &[dim, dim], rng),
            wo: store.add_uniform(format!("{name}.wo"), &[dim, dim], rng),
            heads,
            dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, queries: Ball, keys: Ball, p: &BallParams) -> Result<Ball> {
        let (wq, wk, wv, wo) = (g.param(self.wq), g.param(self.wk), g.param(self.wv), g.param(self.wo));
        let q = mobius_matvec(g, wq, queries, p)?;
        let k = mobius_matvec(g, wk, keys, p)?;
        let v = mobius_matvec(g, wv, keys, p)?;
        let lq = logmap0(g, q, p)?;
        let lk = logmap0(g, k, p)?;
        let lv = logmap0(g, v, p)?;
        let ctx = multi_head_attention(g, lq.var(), lk.var(), lv.var(), self.heads)?;
        let out = linear_rows(g, ctx, wo)?;
        expmap0(g, Tangent::new(out), p)
    }
}

/// Hyperbolic MLP: linear `d -> 4d`, hyperbolic GELU, linear `4d -> d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HyperFfn {
    pub up: HyperbolicLinear,
    pub down: HyperbolicLinear,
}

/// Hidden width multiplier of [`HyperFfn`].
pub const FFN_EXPANSION: usize = 4;

impl HyperFfn {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        HyperFfn {
            up: HyperbolicLinear::new(store, &format!("{name}.up"), dim, FFN_EXPANSION * dim, rng),
            down: HyperbolicLinear::new(store, &format!("{name}.down"), FFN_EXPANSION * dim, dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Ball, p: &BallParams) -> Result<Ball> {
        let h = self.up.forward(g, x, p)?;
        let h = hyper_gelu(g, h, p)?;
        self.down.forward(g, h, p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{gradcheck, gradcheck_params, DEFAULT_STEP};
    use crate::manifold::project_to_ball;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn p() -> BallParams {
        BallParams::default()
    }

    fn rand_ball(rng: &mut ChaCha8Rng, shape: &[usize], radius: f64) -> Tensor {
        let n = *shape.last().unwrap();
        let mut t = Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0));
        for row in t.data_mut().chunks_exact_mut(n) {
            let r = libm::sqrt(row.iter().map(|x| x * x).sum::<f64>());
            let target = radius * rng.random_range(0.2..1.0);
            row.iter_mut().for_each(|x| *x *= target / r);
        }
        t
    }

    #[test]
    fn linear_identity_and_collinear_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let lin = HyperbolicLinear::new(&mut store, "lin", 2, 2, &mut rng);
        store.set(lin.weight, Tensor::eye(2)).unwrap();
        let mut g = Graph::with_params(&store);
        let x = g.constant(Tensor::vector(alloc::vec![0.3, 0.0]));
        let x = project_to_ball(&mut g, x, &p()).unwrap();
        let y = lin.forward(&mut g, x, &p()).unwrap();
        assert!((g.value(y.var()).data()[0] - 0.3).abs() < 1e-12);

        store.set(lin.bias, Tensor::vector(alloc::vec![0.2, 0.0])).unwrap();
        let mut g = Graph::with_params(&store);
        let x = g.constant(Tensor::vector(alloc::vec![0.3, 0.0]));
        let x = project_to_ball(&mut g, x, &p()).unwrap();
        let y = lin.forward(&mut g, x, &p()).unwrap();
        assert!((g.value(y.var()).data()[0] - 0.5 / 1.06).abs() < 1e-12);
        assert!((g.value(y.var()).data()[0] - 0.471698).abs() < 1e-6);
    }

    #[test]
    fn gelu_on_ball() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros([3]));
        let z = project_to_ball(&mut g, z, &p()).unwrap();
        let y = hyper_gelu(&mut g, z, &p()).unwrap();
        assert_eq!(g.value(y.var()).data(), &[0.0, 0.0, 0.0]);

        let v = g.constant(Tensor::vector(alloc::vec![2.0, 0.0]));
        let x = expmap0(&mut g, Tangent::new(v), &p()).unwrap();
        let y = hyper_gelu(&mut g, x, &p()).unwrap();
        let expected = libm::tanh(1.954_499_736_103_642 / 2.0);
        assert!((g.value(y.var()).data()[0] - expected).abs() < 1e-12);

        let v = g.constant(Tensor::vector(alloc::vec![9.0, 0.0]));
        let x = expmap0(&mut g, Tangent::new(v), &p()).unwrap();
        let y = hyper_gelu(&mut g, x, &p()).unwrap();
        assert!((g.value(y.var()).data()[0] - g.value(x.var()).data()[0]).abs() < 1e-9);
    }

    #[test]
    fn adaln_zero_gamma_collapses_to_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let ln = HyperAdaLN::new(&mut store, "ln", 3, 4, 1e-5, &mut rng);
        store.set(ln.gamma.weight, Tensor::zeros([4, 3])).unwrap();
        store.set(ln.gamma.bias, Tensor::zeros([4])).unwrap();
        let mut g = Graph::with_params(&store);
        let x = g.constant(rand_ball(&mut rng, &[5, 4], 0.9));
        let x = Ball::assume(x);
        let c = g.constant(Tensor::vector(alloc::vec![0.3, -0.2, 0.5]));
        let y = ln.forward(&mut g, x, c, &p()).unwrap();
        let rows: Vec<&[f64]> = g.value(y.var()).rows().collect();
        for r in &rows[1..] {
            assert_eq!(*r, rows[0]);
        }
    }

    #[test]
    fn adaln_identity_on_normalized_tangent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let ln = HyperAdaLN::new(&mut store, "ln", 2, 4, 1e-14, &mut rng);
        store.set(ln.gamma.weight, Tensor::zeros([4, 2])).unwrap();
        store.set(ln.beta.weight, Tensor::zeros([4, 2])).unwrap();
        let mut g = Graph::with_params(&store);
        // zero mean, unit population variance
        let t = g.constant(Tensor::new([1, 4], alloc::vec![1.0, -1.0, 1.0, -1.0]).unwrap());
        let x = expmap0(&mut g, Tangent::new(t), &p()).unwrap();
        let c = g.constant(Tensor::vector(alloc::vec![1.0, 2.0]));
        let y = ln.forward(&mut g, x, c, &p()).unwrap();
        assert!(g.value(y.var()).max_abs_diff(g.value(x.var())).unwrap() < 1e-12);
    }

    #[test]
    fn attention_single_key_and_zero_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let att = HyperAttention::new(&mut store, "att", 4, 2, &mut rng).unwrap();
        let mut g = Graph::with_params(&store);
        let q = Ball::assume(g.constant(rand_ball(&mut rng, &[3, 4], 0.8)));
        let k = Ball::assume(g.constant(rand_ball(&mut rng, &[1, 4], 0.8)));
        let y = att.forward(&mut g, q, k, &p()).unwrap();
        let rows: Vec<&[f64]> = g.value(y.var()).rows().collect();
        assert!(rows.iter().all(|r| r.iter().zip(rows[0]).all(|(a, b)| (a - b).abs() < 1e-15)));
        assert!(HyperAttention::new(&mut store, "bad", 5, 2, &mut rng).is_err());
    }

    #[test]
    fn attention_key_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let att = HyperAttention::new(&mut store, "att", 8, 2, &mut rng).unwrap();
        let qt = rand_ball(&mut rng, &[3, 8], 0.9);
        let kt = rand_ball(&mut rng, &[5, 8], 0.9);
        let perm = [3, 0, 4, 1, 2];
        let kp = Tensor::from_fn([5, 8], |i| kt.data()[perm[i / 8] * 8 + i % 8]);
        let mut g = Graph::with_params(&store);
        let q = Ball::assume(g.constant(qt));
        let k = Ball::assume(g.constant(kt));
        let k2 = Ball::assume(g.constant(kp));
        let a = att.forward(&mut g, q, k, &p()).unwrap();
        let b = att.forward(&mut g, q, k2, &p()).unwrap();
        assert!(g.value(a.var()).max_abs_diff(g.value(b.var())).unwrap() < 1e-12);
    }

    #[test]
    fn layers_pass_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let lin = HyperbolicLinear::new(&mut store, "lin", 8, 8, &mut rng);
        store.set(lin.bias, rand_ball(&mut rng, &[8], 0.3)).unwrap();
        let x = rand_ball(&mut rng, &[4, 8], 0.8);
        let bp = p();
        let r = gradcheck(
            |g, v| {
                let y = lin_forward_with(g, &lin, &store, v[0], &bp)?;
                g.sum(y)
            },
            &[x.clone()],
            DEFAULT_STEP,
            1e-4,
        )
        .unwrap();
        assert!(r.passed(), "{:?}", r.worst());
        let r = gradcheck_params(
            &store,
            &[lin.weight, lin.bias],
            |g| {
                let xv = Ball::assume(g.constant(x.clone()));
                let y = lin.forward(g, xv, &bp)?;
                g.sum(y.var())
            },
            DEFAULT_STEP,
            1e-4,
            None,
        )
        .unwrap();
        assert!(r.passed(), "{:?}", r.worst());
    }

    fn lin_forward_with(g: &mut Graph, lin: &HyperbolicLinear, store: &ParamStore, x: Var, bp: &BallParams) -> Result<Var> {
        g.bind_params(store);
        let y = lin.forward(g, Ball::assume(x), bp)?;
        Ok(y.var())
    }
}
