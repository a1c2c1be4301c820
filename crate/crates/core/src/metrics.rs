//! Evaluation metrics on plain tensors. Inputs are in meters, reported
//! values in millimeters.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::losses::JointRegressor;
use crate::tensor::Tensor;

pub const MM_PER_M: f64 = 1000.0;

fn points(t: &Tensor, op: &'static str) -> Result<Vec<Vector3<f64>>> {
    if t.rank() != 2 || t.shape()[1] != 3 {
        return Err(Error::shape(op, format!("expected [n, 3], got {:?}", t.shape())));
    }
    Ok(t.rows().map(|r| Vector3::new(r[0], r[1], r[2])).collect())
}

fn paired(pred: &Tensor, gt: &Tensor, op: &'static str) -> Result<(Vec<Vector3<f64>>, Vec<Vector3<f64>>)> {
    if pred.shape() != gt.shape() {
        return Err(Error::shapes(op, pred.shape(), gt.shape()));
    }
    Ok((points(pred, op)?, points(gt, op)?))
}

fn mean_dist(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).sum::<f64>() / a.len() as f64 * MM_PER_M
}

/// Mean joint distance after centering both skeletons on `root`.
pub fn mpjpe(pred: &Tensor, gt: &Tensor, root: usize) -> Result<f64> {
    let (p, g) = paired(pred, gt, "mpjpe")?;
    if root >= p.len() {
        return Err(Error::contract(format!("root joint {root} out of range for {} joints", p.len())));
    }
    let (pr, gr) = (p[root], g[root]);
    let p: Vec<_> = p.iter().map(|x| x - pr).collect();
    let g: Vec<_> = g.iter().map(|x| x - gr).collect();
    Ok(mean_dist(&p, &g))
}

/// Similarity transform `(s, R, t)` minimizing `Σ ‖s R p_i + t − q_i‖²`.
pub fn procrustes(p: &[Vector3<f64>], q: &[Vector3<f64>]) -> (f64, Matrix3<f64>, Vector3<f64>) {
    let n = p.len() as f64;
    let mp = p.iter().sum::<Vector3<f64>>() / n;
    let mq = q.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    let mut var_p = 0.0;
    for (a, b) in p.iter().zip(q) {
        let (a, b) = (a - mp, b - mq);
        h += b * a.transpose();
        var_p += a.norm_squared();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.expect("requested U"), svd.v_t.expect("requested V"));
    let d = if (u * vt).determinant() < 0.0 { -1.0 } else { 1.0 };
    let sign = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let r = u * sign * vt;
    let s = if var_p > 0.0 {
        (svd.singular_values[0] + svd.singular_values[1] + d * svd.singular_values[2]) / var_p
    } else {
        1.0
    };
    let t = mq - s * r * mp;
    (s, r, t)
}

/// Mean joint distance after the best per-frame similarity alignment of
/// `pred` onto `gt`.
pub fn pa_mpjpe(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let (p, g) = paired(pred, gt, "pa_mpjpe")?;
    let (s, r, t) = procrustes(&p, &g);
    let aligned: Vec<_> = p.iter().map(|x| s * r * x + t).collect();
    Ok(mean_dist(&aligned, &g))
}

/// Mean vertex distance, no alignment.
pub fn mpvpe(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let (p, g) = paired(pred, gt, "mpvpe")?;
    Ok(mean_dist(&p, &g))
}

/// Mean over interior frames and joints of the distance between predicted
/// and GT second differences, in mm/frame².
pub fn accel_error(pred: &[Tensor], gt: &[Tensor]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::contract(format!("{} predicted frames vs {} ground truth", pred.len(), gt.len())));
    }
    if pred.len() < 3 {
        return Err(Error::contract(format!("acceleration needs at least 3 frames, got {}", pred.len())));
    }
    let p: Vec<_> = pred.iter().map(|t| points(t, "accel_error")).collect::<Result<_>>()?;
    let g: Vec<_> = gt.iter().map(|t| points(t, "accel_error")).collect::<Result<_>>()?;
    let j = p[0].len();
    if p.iter().chain(&g).any(|f| f.len() != j) {
        return Err(Error::contract("frames differ in joint count"));
    }
    let mut total = 0.0;
    for t in 1..p.len() - 1 {
        for k in 0..j {
            let ap = p[t + 1][k] - 2.0 * p[t][k] + p[t - 1][k];
            let ag = g[t + 1][k] - 2.0 * g[t][k] + g[t - 1][k];
            total += (ap - ag).norm();
        }
    }
    Ok(total / ((p.len() - 2) * j) as f64 * MM_PER_M)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameMetrics {
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub mpvpe: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceReport {
    pub frames: Vec<FrameMetrics>,
    /// `None` for sequences shorter than three frames.
    pub accel_error: Option<f64>,
}

/// Per-frame metrics on fine meshes; joints come from `regressor`.
pub fn evaluate_sequence(
    pred: &[Tensor],
    gt: &[Tensor],
    regressor: &JointRegressor,
    root: usize,
) -> Result<SequenceReport> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::contract(format!("{} predicted frames vs {} ground truth", pred.len(), gt.len())));
    }
    let pj: Vec<Tensor> = pred.iter().map(|m| regressor.regress(m)).collect::<Result<_>>()?;
    let gj: Vec<Tensor> = gt.iter().map(|m| regressor.regress(m)).collect::<Result<_>>()?;
    let frames = (0..pred.len())
        .map(|t| {
            Ok(FrameMetrics {
                mpjpe: mpjpe(&pj[t], &gj[t], root)?,
                pa_mpjpe: pa_mpjpe(&pj[t], &gj[t])?,
                mpvpe: mpvpe(&pred[t], &gt[t])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let accel_error = if pred.len() >= 3 { Some(accel_error(&pj, &gj)?) } else { None };
    Ok(SequenceReport { frames, accel_error })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn skel() -> Tensor {
        Tensor::new([4, 3], vec![0.0, 0.0, 0.0, 0.3, 0.1, 0.0, -0.2, 0.4, 0.1, 0.1, -0.3, 0.5]).unwrap()
    }

    #[test]
    fn identical_inputs_give_zero() {
        let s = skel();
        assert_eq!(mpjpe(&s, &s, 0).unwrap(), 0.0);
        assert!(pa_mpjpe(&s, &s).unwrap() < 1e-9);
        assert_eq!(mpvpe(&s, &s).unwrap(), 0.0);
        let seq = [s.clone(), s.clone(), s.clone()];
        assert_eq!(accel_error(&seq, &seq).unwrap(), 0.0);
    }

    #[test]
    fn similarity_is_absorbed() {
        let s = skel();
        let (c, sn) = (libm::cos(0.7), libm::sin(0.7));
        let moved = Tensor::from_fn([4, 3], |i| {
            let r = &s.data()[(i / 3) * 3..(i / 3) * 3 + 3];
            let v = [c * r[0] - sn * r[1], sn * r[0] + c * r[1], r[2]];
            1.3 * v[i % 3] + [0.2, -0.1, 0.4][i % 3]
        });
        assert!(pa_mpjpe(&moved, &s).unwrap() < 1e-6);
        assert!(mpjpe(&moved, &s, 0).unwrap() > 1.0);
    }

    #[test]
    fn accel_needs_three_frames() {
        let s = skel();
        assert!(accel_error(&[s.clone(), s.clone()], &[s.clone(), s]).is_err());
    }

    #[test]
    fn translation_metric_in_mm() {
        let s = skel();
        let moved = s.map(|x| x + 0.001);
        assert!((mpvpe(&moved, &s).unwrap() - libm::sqrt(3.0)).abs() < 1e-9);
        assert!(mpjpe(&moved, &s, 0).unwrap() < 1e-9);
    }
}
