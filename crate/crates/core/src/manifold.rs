//! Gyrovector algebra on the unit Poincaré ball.
//!
//! Points are tensors whose trailing-axis rows have Euclidean norm strictly
//! below one. Every operation that produces a [`Ball`] ends by rescaling
//! rows whose norm exceeds `1 - eps_ball` back onto that sphere, so `atanh`
//! of a row norm stays finite (`atanh(1 - 1e-5) ~ 6.1`).
//!
//! The exponential and logarithmic maps at the origin use the conformal
//! factor `lambda_0 = 2`:
//!
//! ```text
//! exp0(v) = tanh(|v| / 2) v / |v|        log0(x) = 2 atanh(|x|) x / |x|
//! ```
//!
//! Rows with norm below `eps_norm` short-circuit to the origin.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Numerical margins for ball computations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BallParams {
    /// Rows are kept at norm `<= 1 - eps_ball`.
    pub eps_ball: f64,
    /// Norms below this are treated as zero.
    pub eps_norm: f64,
}

impl Default for BallParams {
    fn default() -> Self {
        BallParams { eps_ball: 1e-5, eps_norm: 1e-12 }
    }
}

impl BallParams {
    pub fn new(eps_ball: f64, eps_norm: f64) -> Result<Self> {
        let p = BallParams { eps_ball, eps_norm };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps_ball > 0.0 && self.eps_ball < 1e-2) {
            return Err(Error::Config(alloc::format!("eps_ball {} outside (0, 1e-2)", self.eps_ball)));
        }
        if !(self.eps_norm > 0.0 && self.eps_norm < self.eps_ball) {
            return Err(Error::Config(alloc::format!("eps_norm {} outside (0, eps_ball)", self.eps_norm)));
        }
        Ok(())
    }

    /// Largest admissible row norm.
    pub fn max_norm(&self) -> f64 {
        1.0 - self.eps_ball
    }

    /// In-place projection of one plain row.
    pub fn project_row(&self, row: &mut [f64]) {
        let r = libm::sqrt(row.iter().map(|x| x * x).sum::<f64>());
        if r > self.max_norm() {
            let s = self.max_norm() / r;
            row.iter_mut().for_each(|x| *x *= s);
            let c = rounding_fix(row, self.max_norm());
            row.iter_mut().for_each(|x| *x *= c);
        }
    }
}

/// Factor `c <= 1` such that `|c x| <= max` holds after rounding. Rows
/// rescaled onto the sphere of radius `max` can overshoot it by an ulp.
fn rounding_fix(row: &[f64], max: f64) -> f64 {
    let mut c = 1.0;
    while libm::sqrt(row.iter().map(|x| (x * c) * (x * c)).sum::<f64>()) > max {
        c *= 1.0 - f64::EPSILON;
    }
    c
}

/// Ball-valued node: every trailing row satisfies `|x| <= 1 - eps_ball`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ball(Var);

/// Tangent vectors at the origin; unconstrained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tangent(Var);

impl Ball {
    pub fn var(self) -> Var {
        self.0
    }

    /// Wrap a node already known to satisfy the ball invariant, e.g. a
    /// parameter that the optimizer re-projects after every update.
    pub fn assume(v: Var) -> Self {
        Ball(v)
    }
}

impl Tangent {
    pub fn new(v: Var) -> Self {
        Tangent(v)
    }

    pub fn var(self) -> Var {
        self.0
    }
}

fn last_axis(g: &Graph, v: Var, op: &'static str) -> Result<usize> {
    match g.rank(v) {
        0 => Err(Error::shape(op, "rank-0 tensor has no feature axis")),
        r => Ok(r - 1),
    }
}

fn row_norms(t: &Tensor) -> Vec<f64> {
    t.rows().map(|r| libm::sqrt(r.iter().map(|x| x * x).sum::<f64>())).collect()
}

/// Row-norm shape `[.., 1]` for a tensor shaped `[.., n]`.
fn norm_shape(t: &Tensor) -> Vec<usize> {
    let mut s = t.shape().to_vec();
    if let Some(last) = s.last_mut() {
        *last = 1;
    }
    s
}

/// Constant 0/1 mask over rows, or `None` when every row passes.
fn row_mask(g: &mut Graph, norms: &[f64], shape: Vec<usize>, keep: impl Fn(f64) -> bool) -> Option<Var> {
    if norms.iter().all(|&r| keep(r)) {
        return None;
    }
    let data = norms.iter().map(|&r| if keep(r) { 1.0 } else { 0.0 }).collect();
    Some(g.constant(Tensor::new(shape, data).expect("mask shape")))
}

/// Rescale rows with norm above `1 - eps_ball` onto that sphere.
pub fn project_to_ball(g: &mut Graph, x: Var, p: &BallParams) -> Result<Ball> {
    let t = g.value(x);
    if !t.is_finite() {
        return Err(Error::NonFinite { op: "project_to_ball" });
    }
    last_axis(g, x, "project_to_ball")?;
    let maxn = p.max_norm();
    let norms = row_norms(t);
    let shape = norm_shape(t);
    let out = match row_mask(g, &norms, shape.clone(), |r| r <= maxn) {
        None => x,
        Some(_) => {
            let outside: Vec<f64> = norms.iter().map(|&r| if r > maxn { 1.0 } else { 0.0 }).collect();
            let inside: Vec<f64> = outside.iter().map(|m| 1.0 - m).collect();
            let outside = g.constant(Tensor::new(shape.clone(), outside)?);
            let inside = g.constant(Tensor::new(shape, inside)?);
            let axis = last_axis(g, x, "project_to_ball")?;
            let r = g.l2norm(x, axis, p.eps_norm)?;
            let m = g.scalar(maxn);
            let shrink = g.div(m, r)?;
            let shrink = g.mul(shrink, outside)?;
            let factor = g.add(shrink, inside)?;
            let y = g.mul(x, factor)?;
            let fix: Vec<f64> = g.value(y).rows().map(|r| rounding_fix(r, maxn)).collect();
            if fix.iter().all(|&c| c == 1.0) {
                y
            } else {
                let c = g.constant(Tensor::new(norm_shape(g.value(y)), fix)?);
                g.mul(y, c)?
            }
        }
    };
    g.observe_ball(out);
    Ok(Ball(out))
}

/// `lambda_x = 2 / (1 - |x|^2)`, one value per row (`[.., 1]`).
pub fn conformal_factor(g: &mut Graph, x: Ball) -> Result<Var> {
    let axis = last_axis(g, x.0, "conformal_factor")?;
    let sq = g.square(x.0)?;
    let n2 = g.sum_axis(sq, axis)?;
    let neg = g.neg(n2)?;
    let denom = g.offset(neg, 1.0)?;
    let two = g.scalar(2.0);
    g.div(two, denom)
}

/// Möbius addition `x (+) y`, broadcasting over leading axes.
///
/// Evaluated as `((1-|x|^2)(x+y) + |x+y|^2 x) / ((1-|x|^2)(1-|y|^2) +
/// |x+y|^2)`, which equals the usual
/// `((1+2<x,y>+|y|^2) x + (1-|x|^2) y) / (1+2<x,y>+|x|^2|y|^2)` but adds
/// only nonnegative terms, so gyro-cancellation near the boundary keeps its
/// precision.
pub fn mobius_add(g: &mut Graph, x: Ball, y: Ball, p: &BallParams) -> Result<Ball> {
    let (xs, ys) = (g.shape(x.0).to_vec(), g.shape(y.0).to_vec());
    if xs.last() != ys.last() || xs.is_empty() {
        return Err(Error::shapes("mobius_add", &xs, &ys));
    }
    let ax = xs.len() - 1;
    let ay = ys.len() - 1;
    let sum = g.add(x.0, y.0)?;
    let s2 = g.square(sum)?;
    let s2 = g.sum_axis(s2, g.rank(sum) - 1)?;
    let x2 = g.square(x.0)?;
    let x2 = g.sum_axis(x2, ax)?;
    let y2 = g.square(y.0)?;
    let y2 = g.sum_axis(y2, ay)?;
    let nx2 = g.neg(x2)?;
    let bx = g.offset(nx2, 1.0)?;
    let ny2 = g.neg(y2)?;
    let by = g.offset(ny2, 1.0)?;
    let t1 = g.mul(bx, sum)?;
    let t2 = g.mul(s2, x.0)?;
    let num = g.add(t1, t2)?;
    let bb = g.mul(bx, by)?;
    let den = g.add(bb, s2)?;
    let out = g.div(num, den)?;
    project_to_ball(g, out, p)
}

/// Additive inverse on the ball.
pub fn mobius_neg(g: &mut Graph, x: Ball) -> Result<Ball> {
    Ok(Ball(g.neg(x.0)?))
}

/// `x W^T` over the trailing axis, accepting rank-1 inputs.
pub(crate) fn linear_rows(g: &mut Graph, x: Var, w: Var) -> Result<Var> {
    let ws = g.shape(w).to_vec();
    let xs = g.shape(x).to_vec();
    if ws.len() != 2 || xs.last() != Some(&ws[1]) {
        return Err(Error::shapes("linear", &xs, &ws));
    }
    let wt = g.transpose(w)?;
    if xs.len() == 1 {
        let x2 = g.reshape(x, &[1, xs[0]])?;
        let y = g.matmul(x2, wt)?;
        g.reshape(y, &[ws[0]])
    } else {
        g.matmul(x, wt)
    }
}

/// Möbius matrix-vector product `W (x)_M x`, with `W: [m, n]` acting on
/// rows `x: [.., n]`.
pub fn mobius_matvec(g: &mut Graph, w: Var, x: Ball, p: &BallParams) -> Result<Ball> {
    let wx = linear_rows(g, x.0, w)?;
    let axis = g.rank(x.0) - 1;
    let xn: Vec<f64> = row_norms(g.value(x.0));
    let wn: Vec<f64> = row_norms(g.value(wx));
    let shape = norm_shape(g.value(wx));
    let eps = p.eps_norm;
    let mask = {
        let keep: Vec<f64> = xn.iter().zip(&wn).map(|(&a, &b)| if a >= eps && b >= eps { 1.0 } else { 0.0 }).collect();
        if keep.iter().all(|&k| k == 1.0) {
            None
        } else {
            Some(g.constant(Tensor::new(shape, keep)?))
        }
    };
    let r = g.l2norm(x.0, axis, eps)?;
    let s = g.l2norm(wx, axis, eps)?;
    let at = g.atanh(r)?;
    let ratio = g.div(s, r)?;
    let arg = g.mul(ratio, at)?;
    let th = g.tanh(arg)?;
    let coef = g.div(th, s)?;
    let coef = match mask {
        Some(m) => g.mul(coef, m)?,
        None => coef,
    };
    let out = g.mul(wx, coef)?;
    project_to_ball(g, out, p)
}

/// Exponential map at the origin.
pub fn expmap0(g: &mut Graph, v: Tangent, p: &BallParams) -> Result<Ball> {
    let axis = last_axis(g, v.0, "expmap0")?;
    let norms = row_norms(g.value(v.0));
    let shape = norm_shape(g.value(v.0));
    let mask = row_mask(g, &norms, shape, |r| r >= p.eps_norm);
    let r = g.l2norm(v.0, axis, p.eps_norm)?;
    let half = g.scale(r, 0.5)?;
    let th = g.tanh(half)?;
    let coef = g.div(th, r)?;
    let coef = match mask {
        Some(m) => g.mul(coef, m)?,
        None => coef,
    };
    let out = g.mul(v.0, coef)?;
    project_to_ball(g, out, p)
}

/// Logarithmic map at the origin; inverse of [`expmap0`].
pub fn logmap0(g: &mut Graph, x: Ball, p: &BallParams) -> Result<Tangent> {
    let axis = last_axis(g, x.0, "logmap0")?;
    let norms = row_norms(g.value(x.0));
    let shape = norm_shape(g.value(x.0));
    let mask = row_mask(g, &norms, shape, |r| r >= p.eps_norm);
    let r = g.l2norm(x.0, axis, p.eps_norm)?;
    let at = g.atanh(r)?;
    let at2 = g.scale(at, 2.0)?;
    let coef = g.div(at2, r)?;
    let coef = match mask {
        Some(m) => g.mul(coef, m)?,
        None => coef,
    };
    Ok(Tangent(g.mul(x.0, coef)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> BallParams {
        BallParams::default()
    }

    fn ball(g: &mut Graph, data: &[f64]) -> Ball {
        let v = g.constant(Tensor::vector(data.to_vec()));
        project_to_ball(g, v, &p()).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn params_validation() {
        assert!(BallParams::new(1e-5, 1e-12).is_ok());
        assert!(BallParams::new(0.0, 1e-12).is_err());
        assert!(BallParams::new(1e-2, 1e-12).is_err());
        assert!(BallParams::new(1e-5, 1e-5).is_err());
    }

    #[test]
    fn conformal_factor_values() {
        let mut g = Graph::new();
        let o = ball(&mut g, &[0.0, 0.0]);
        let l = conformal_factor(&mut g, o).unwrap();
        assert_eq!(g.value(l).data(), &[2.0]);
        let x = ball(&mut g, &[0.6, 0.0]);
        let l = conformal_factor(&mut g, x).unwrap();
        assert!((g.value(l).data()[0] - 3.125).abs() < 1e-12);
        let mut last = 0.0;
        for r in [0.0, 0.3, 0.9, 0.999, 1.0 - 1e-5] {
            let x = ball(&mut g, &[r, 0.0]);
            let l = conformal_factor(&mut g, x).unwrap();
            let v = g.value(l).data()[0];
            assert!(v >= 2.0 && v > last);
            last = v;
        }
    }

    #[test]
    fn mobius_add_collinear_and_identity() {
        let mut g = Graph::new();
        let x = ball(&mut g, &[0.3, 0.0]);
        let y = ball(&mut g, &[0.4, 0.0]);
        let z = mobius_add(&mut g, x, y, &p()).unwrap();
        assert!(close(g.value(z.var()).data(), &[0.625, 0.0], 1e-12));
        let o = ball(&mut g, &[0.0, 0.0]);
        let a = mobius_add(&mut g, x, o, &p()).unwrap();
        let b = mobius_add(&mut g, o, x, &p()).unwrap();
        assert!(close(g.value(a.var()).data(), &[0.3, 0.0], 1e-15));
        assert!(close(g.value(b.var()).data(), &[0.3, 0.0], 1e-15));
    }

    #[test]
    fn mobius_add_rejects_dim_mismatch() {
        let mut g = Graph::new();
        let x = ball(&mut g, &[0.3, 0.0]);
        let y = ball(&mut g, &[0.1, 0.0, 0.0]);
        assert!(matches!(mobius_add(&mut g, x, y, &p()), Err(Error::Shape { .. })));
    }

    #[test]
    fn matvec_examples() {
        let mut g = Graph::new();
        let x = ball(&mut g, &[0.27727, 0.36969]);
        let eye = g.constant(Tensor::eye(2));
        let y = mobius_matvec(&mut g, eye, x, &p()).unwrap();
        assert!(close(g.value(y.var()).data(), &[0.27727, 0.36969], 1e-9));

        let two = g.constant(Tensor::eye(2).map(|v| 2.0 * v));
        let x = ball(&mut g, &[0.5, 0.0]);
        let y = mobius_matvec(&mut g, two, x, &p()).unwrap();
        assert!(close(g.value(y.var()).data(), &[0.8, 0.0], 1e-12));

        let w = g.constant(Tensor::from_fn([3, 2], |i| i as f64 + 1.0));
        let o = ball(&mut g, &[0.0, 0.0]);
        let y = mobius_matvec(&mut g, w, o, &p()).unwrap();
        assert_eq!(g.value(y.var()).data(), &[0.0, 0.0, 0.0]);

        let bad = g.constant(Tensor::zeros([2, 3]));
        assert!(mobius_matvec(&mut g, bad, x, &p()).is_err());
    }

    #[test]
    fn exp_log_examples() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros([2]));
        let e = expmap0(&mut g, Tangent::new(z), &p()).unwrap();
        assert_eq!(g.value(e.var()).data(), &[0.0, 0.0]);
        let l = logmap0(&mut g, e, &p()).unwrap();
        assert_eq!(g.value(l.var()).data(), &[0.0, 0.0]);

        let v = g.constant(Tensor::vector(vec![0.6, 0.8]));
        let e = expmap0(&mut g, Tangent::new(v), &p()).unwrap();
        let t = 0.462_117_157_260_009_8;
        assert!(close(g.value(e.var()).data(), &[0.6 * t, 0.8 * t], 1e-12));
        assert!(close(g.value(e.var()).data(), &[0.277270, 0.369693], 1e-6));

        let x = ball(&mut g, &[0.27727, 0.36969]);
        let l = logmap0(&mut g, x, &p()).unwrap();
        assert!(close(g.value(l.var()).data(), &[0.6, 0.8], 1e-4));

        let big = g.constant(Tensor::vector(vec![300.0, -400.0]));
        let e = expmap0(&mut g, Tangent::new(big), &p()).unwrap();
        let n = row_norms(g.value(e.var()))[0];
        assert!(n < 1.0 && n <= p().max_norm() + 1e-15);
    }

    #[test]
    fn projection_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.3, 0.4]));
        let b = project_to_ball(&mut g, x, &p()).unwrap();
        assert_eq!(b.var(), x);
        let x = g.constant(Tensor::vector(vec![3.0, 4.0]));
        let b = project_to_ball(&mut g, x, &p()).unwrap();
        assert!(close(g.value(b.var()).data(), &[0.599994, 0.799992], 1e-12));
        let bad = g.constant(Tensor::vector(vec![f64::NAN, 0.0]));
        assert!(matches!(project_to_ball(&mut g, bad, &p()), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn projection_only_touches_offending_rows() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new([2, 2], vec![0.1, 0.2, 3.0, 4.0]).unwrap());
        let b = project_to_ball(&mut g, x, &p()).unwrap();
        let d = g.value(b.var()).data();
        assert_eq!(&d[..2], &[0.1, 0.2]);
        assert!((libm::sqrt(d[2] * d[2] + d[3] * d[3]) - p().max_norm()).abs() < 1e-15);
    }
}
