//! Training objectives.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::manifold::{expmap0, BallParams, Tangent};
use crate::pipeline::MeshTopology;
use crate::tensor::Tensor;

/// Below this edge length a predicted edge direction is treated as zero.
const EDGE_EPS: f64 = 1e-12;
/// GT faces with twice-area below this are skipped by the normal loss.
const DEGENERATE_AREA: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_m: f64,
    pub lambda_j: f64,
    pub lambda_n: f64,
    pub lambda_e: f64,
    pub lambda_hy: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_m: 1.0, lambda_j: 1.0, lambda_n: 0.1, lambda_e: 20.0, lambda_hy: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_m, self.lambda_j, self.lambda_n, self.lambda_e, self.lambda_hy];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and nonnegative, got {all:?}")));
        }
        Ok(())
    }

    /// `[mesh, joint, normal, edge, hymesh]` in that order.
    pub fn as_array(&self) -> [f64; 5] {
        [self.lambda_m, self.lambda_j, self.lambda_n, self.lambda_e, self.lambda_hy]
    }
}

/// Row-stochastic map from fine vertices to joints.
#[derive(Debug, Clone, PartialEq)]
pub struct JointRegressor {
    matrix: Tensor,
}

impl JointRegressor {
    pub fn new(matrix: Tensor) -> Result<Self> {
        if matrix.rank() != 2 {
            return Err(Error::shape("joint_regressor", format!("expected [J, n], got rank {}", matrix.rank())));
        }
        for (j, row) in matrix.rows().enumerate() {
            let s: f64 = row.iter().sum();
            if row.iter().any(|w| *w < 0.0 || !w.is_finite()) || (s - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("regressor row {j} is not stochastic (sum {s})")));
            }
        }
        Ok(JointRegressor { matrix })
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn joints(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn vertices(&self) -> usize {
        self.matrix.shape()[1]
    }

    /// `[.., n, 3]` → `[.., J, 3]` inside a graph.
    pub fn apply(&self, g: &mut Graph, mesh: Var) -> Result<Var> {
        let r = g.constant(self.matrix.clone());
        g.matmul(r, mesh)
    }

    /// Plain evaluation on one mesh `[n, 3]`.
    pub fn regress(&self, mesh: &Tensor) -> Result<Tensor> {
        let (j, n) = (self.joints(), self.vertices());
        if mesh.shape() != [n, 3] {
            return Err(Error::shapes("regress", mesh.shape(), &[n, 3]));
        }
        let (r, m) = (self.matrix.data(), mesh.data());
        Ok(Tensor::from_fn([j, 3], |i| {
            let (row, c) = (i / 3, i % 3);
            (0..n).map(|v| r[row * n + v] * m[v * 3 + c]).sum()
        }))
    }
}

fn check_mesh_pair(g: &Graph, op: &'static str, pred: Var, gt: Var) -> Result<()> {
    let (a, b) = (g.shape(pred), g.shape(gt));
    if a != b || a.last() != Some(&3) || a.len() < 2 {
        return Err(Error::shapes(op, a, b));
    }
    Ok(())
}

/// Sum of |x|, divided by `count`.
fn l1_mean(g: &mut Graph, diff: Var, count: usize) -> Result<Var> {
    let a = g.abs(diff)?;
    let s = g.sum(a)?;
    g.scale(s, 1.0 / count as f64)
}

/// Mean over vertices of the per-vertex L1 distance between `exp0(scale *
/// pred)` and `exp0(scale * gt)`.
pub fn hyperbolic_mesh_loss(g: &mut Graph, pred: Var, gt: Var, vertex_scale: f64, p: &BallParams) -> Result<Var> {
    check_mesh_pair(g, "hyperbolic_mesh_loss", pred, gt)?;
    let vertices = g.value(pred).numel() / 3;
    let ps = g.scale(pred, vertex_scale)?;
    let gs = g.scale(gt, vertex_scale)?;
    let ph = expmap0(g, Tangent::new(ps), p)?;
    let gh = expmap0(g, Tangent::new(gs), p)?;
    let d = g.sub(ph.var(), gh.var())?;
    l1_mean(g, d, vertices)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EuclideanLosses {
    pub mesh: Var,
    pub joint: Var,
    pub normal: Var,
    pub edge: Var,
    /// GT faces skipped by the normal term because their area vanished
    /// (counted over all frames).
    pub degenerate_faces: usize,
}

fn as_frames(g: &mut Graph, v: Var) -> Result<Var> {
    let s = g.shape(v).to_vec();
    match s.len() {
        2 => g.reshape(v, &[1, s[0], s[1]]),
        3 => Ok(v),
        _ => Err(Error::shape("mesh_loss", format!("expected [n, 3] or [T, n, 3], got {}", crate::error::fmt_shape(&s)))),
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn vertex(m: &[f64], frame_base: usize, i: usize) -> [f64; 3] {
    let o = frame_base + 3 * i;
    [m[o], m[o + 1], m[o + 2]]
}

/// Mesh L1, joint L1, normal consistency and edge-length terms on fine
/// meshes `[n, 3]` or `[T, n, 3]`. The ground truth is treated as a
/// constant.
pub fn euclidean_losses(
    g: &mut Graph,
    pred: Var,
    gt: Var,
    regressor: &JointRegressor,
    topo: &MeshTopology,
) -> Result<EuclideanLosses> {
    check_mesh_pair(g, "euclidean_losses", pred, gt)?;
    let pred = as_frames(g, pred)?;
    let gt = as_frames(g, gt)?;
    let (frames, n) = (g.shape(pred)[0], g.shape(pred)[1]);
    if n != topo.n_fine || regressor.vertices() != n {
        return Err(Error::contract(format!(
            "mesh has {n} vertices, topology {} and regressor {}",
            topo.n_fine,
            regressor.vertices()
        )));
    }

    let d = g.sub(pred, gt)?;
    let mesh = l1_mean(g, d, frames * n)?;

    let pj = regressor.apply(g, pred)?;
    let gj = regressor.apply(g, gt)?;
    let d = g.sub(pj, gj)?;
    let joint = l1_mean(g, d, frames * regressor.joints())?;

    let gv = g.value(gt).data().to_vec();
    let stride = n * 3;

    // normal consistency against GT face normals
    let faces = &topo.faces;
    let mut normals = Vec::with_capacity(frames * faces.len() * 3);
    let mut degenerate = 0;
    for t in 0..frames {
        for f in faces {
            let [a, b, c] = [0, 1, 2].map(|k| vertex(&gv, t * stride, f[k]));
            let nrm = cross([b[0] - a[0], b[1] - a[1], b[2] - a[2]], [c[0] - a[0], c[1] - a[1], c[2] - a[2]]);
            let len = libm::sqrt(nrm.iter().map(|x| x * x).sum());
            if len < DEGENERATE_AREA {
                degenerate += 1;
                normals.extend([0.0; 3]);
            } else {
                normals.extend(nrm.map(|x| x / len));
            }
        }
    }
    let valid = frames * faces.len() - degenerate;
    let normal = if valid == 0 || faces.is_empty() {
        g.scalar(0.0)
    } else {
        let nt = g.constant(Tensor::new([frames, faces.len(), 3], normals)?);
        let cols: [Vec<usize>; 3] = [0, 1, 2].map(|k| faces.iter().map(|f| f[k]).collect());
        let pa = g.index_select(pred, 1, &cols[0])?;
        let pb = g.index_select(pred, 1, &cols[1])?;
        let pc = g.index_select(pred, 1, &cols[2])?;
        let mut acc = None;
        for (u, v) in [(pa, pb), (pb, pc), (pc, pa)] {
            let e = g.sub(v, u)?;
            let len = g.l2norm(e, 2, EDGE_EPS)?;
            let unit = g.div(e, len)?;
            let dot = g.mul(unit, nt)?;
            let dot = g.sum_axis(dot, 2)?;
            let dot = g.abs(dot)?;
            acc = Some(match acc {
                None => dot,
                Some(s) => g.add(s, dot)?,
            });
        }
        let total = g.sum(acc.expect("three edges"))?;
        g.scale(total, 1.0 / valid as f64)?
    };

    // edge-length preservation
    let edges = topo.fine_edges();
    let edge = if edges.is_empty() {
        g.scalar(0.0)
    } else {
        let mut gt_len = Vec::with_capacity(frames * edges.len());
        for t in 0..frames {
            for e in &edges {
                let (a, b) = (vertex(&gv, t * stride, e[0]), vertex(&gv, t * stride, e[1]));
                gt_len.push(libm::sqrt((0..3).map(|k| (b[k] - a[k]) * (b[k] - a[k])).sum()));
            }
        }
        let gl = g.constant(Tensor::new([frames, edges.len(), 1], gt_len)?);
        let ia: Vec<usize> = edges.iter().map(|e| e[0]).collect();
        let ib: Vec<usize> = edges.iter().map(|e| e[1]).collect();
        let pa = g.index_select(pred, 1, &ia)?;
        let pb = g.index_select(pred, 1, &ib)?;
        let e = g.sub(pb, pa)?;
        let len = g.l2norm(e, 2, EDGE_EPS)?;
        let d = g.sub(len, gl)?;
        l1_mean(g, d, frames * edges.len())?
    };

    Ok(EuclideanLosses { mesh, joint, normal, edge, degenerate_faces: degenerate })
}

/// `λ_m L_mesh + λ_j L_joint + λ_n L_normal + λ_e L_edge + λ_hy L_hymesh`.
pub fn total_loss(g: &mut Graph, losses: &EuclideanLosses, hymesh: Var, w: &LossWeights) -> Result<Var> {
    let terms = [losses.mesh, losses.joint, losses.normal, losses.edge, hymesh];
    let mut acc: Option<Var> = None;
    for (v, lambda) in terms.into_iter().zip(w.as_array()) {
        let t = g.scale(v, lambda)?;
        acc = Some(match acc {
            None => t,
            Some(a) => g.add(a, t)?,
        });
    }
    Ok(acc.expect("five terms"))
}

/// Same weighted sum on plain values, in the same order as [`total_loss`].
pub fn weighted_sum(components: [f64; 5], w: &LossWeights) -> f64 {
    components.iter().zip(w.as_array()).map(|(c, l)| c * l).fold(0.0, |a, b| a + b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_topo() -> MeshTopology {
        MeshTopology::sphere_grid(6, 6).unwrap()
    }

    fn uniform_regressor(j: usize, n: usize) -> JointRegressor {
        JointRegressor::new(Tensor::full([j, n], 1.0 / n as f64)).unwrap()
    }

    #[test]
    fn hymesh_single_vertex() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::new([1, 3], vec![0.6, 0.8, 0.0]).unwrap());
        let z = g.constant(Tensor::zeros([1, 3]));
        let l = hyperbolic_mesh_loss(&mut g, p, z, 1.0, &BallParams::default()).unwrap();
        assert!((g.value(l).item().unwrap() - 0.646964).abs() < 1e-6);
        let l0 = hyperbolic_mesh_loss(&mut g, p, p, 1.0, &BallParams::default()).unwrap();
        assert_eq!(g.value(l0).item().unwrap(), 0.0);
    }

    #[test]
    fn translation_only_moves_mesh_terms() {
        let topo = tiny_topo();
        let gt = crate::pipeline::sphere_grid_points(2, 3, 1.0);
        let moved = Tensor::from_fn([6, 3], |i| gt.data()[i] + if i % 3 == 0 { 1.0 } else { 0.0 });
        let mut g = Graph::new();
        let pv = g.leaf(moved);
        let gv = g.constant(gt);
        let l = euclidean_losses(&mut g, pv, gv, &uniform_regressor(2, 6), &topo).unwrap();
        assert!((g.value(l.mesh).item().unwrap() - 1.0).abs() < 1e-12);
        assert!((g.value(l.joint).item().unwrap() - 1.0).abs() < 1e-12);
        assert!(g.value(l.edge).item().unwrap().abs() < 1e-12);
        assert!(g.value(l.normal).item().unwrap().abs() < 1e-12);
        let same = euclidean_losses(&mut g, gv, gv, &uniform_regressor(2, 6), &topo).unwrap();
        for v in [same.mesh, same.joint, same.edge] {
            assert_eq!(g.value(v).item().unwrap(), 0.0);
        }
        // in-plane edges dotted with the normal leave rounding residue
        assert!(g.value(same.normal).item().unwrap() < 1e-15);
    }

    #[test]
    fn degenerate_faces_are_counted() {
        let topo = tiny_topo();
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros([6, 3]));
        let l = euclidean_losses(&mut g, z, z, &uniform_regressor(1, 6), &topo).unwrap();
        assert_eq!(l.degenerate_faces, topo.faces.len());
        assert_eq!(g.value(l.normal).item().unwrap(), 0.0);
    }

    #[test]
    fn default_weights_compose() {
        assert_eq!(weighted_sum([1.0; 5], &LossWeights::default()), 23.1);
        let mut g = Graph::new();
        let one = g.leaf(Tensor::scalar(1.0));
        let l = EuclideanLosses { mesh: one, joint: one, normal: one, edge: one, degenerate_faces: 0 };
        let t = total_loss(&mut g, &l, one, &LossWeights::default()).unwrap();
        assert_eq!(g.value(t).item().unwrap(), 23.1);
        let w = LossWeights { lambda_n: -1.0, ..LossWeights::default() };
        assert!(w.validate().is_err());
    }

    #[test]
    fn regressor_rejects_non_stochastic_rows() {
        assert!(JointRegressor::new(Tensor::full([2, 3], 0.5)).is_err());
    }
}
