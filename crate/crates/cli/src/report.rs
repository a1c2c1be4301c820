//! Text outputs: metric and loss-curve CSVs and OBJ meshes.
//!
//! Floats are written with Rust's shortest round-trip formatting, so equal
//! values always give equal bytes.

use std::fmt::Write as _;

use hymesh_core::metrics::SequenceReport;
use hymesh_core::train::LossReport;
use hymesh_core::Tensor;

/// `frame,mpjpe,pa_mpjpe,mpvpe` rows in millimeters, then a single
/// `accel_error,<value>,,` row (empty value for sequences under three
/// frames).
pub fn metrics_csv(r: &SequenceReport) -> String {
    let mut s = String::from("frame,mpjpe,pa_mpjpe,mpvpe\n");
    for (t, f) in r.frames.iter().enumerate() {
        writeln!(s, "{t},{},{},{}", f.mpjpe, f.pa_mpjpe, f.mpvpe).unwrap();
    }
    match r.accel_error {
        Some(a) => writeln!(s, "accel_error,{a},,").unwrap(),
        None => s.push_str("accel_error,,,\n"),
    }
    s
}

pub fn loss_curve_csv(curve: &[LossReport]) -> String {
    let mut s = String::from("step,total,mesh,joint,normal,edge,hymesh,degenerate_faces\n");
    for (i, r) in curve.iter().enumerate() {
        writeln!(s, "{i},{},{},{},{},{},{},{}", r.total, r.mesh, r.joint, r.normal, r.edge, r.hymesh, r.degenerate_faces)
            .unwrap();
    }
    s
}

/// Wavefront OBJ with `v` lines then 1-based `f` lines.
pub fn obj(vertices: &Tensor, faces: &[[usize; 3]]) -> String {
    let mut s = String::new();
    for r in vertices.rows() {
        writeln!(s, "v {} {} {}", r[0], r[1], r[2]).unwrap();
    }
    for f in faces {
        writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1).unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use hymesh_core::metrics::FrameMetrics;

    #[test]
    fn csv_layout() {
        let f = FrameMetrics { mpjpe: 1.5, pa_mpjpe: 0.25, mpvpe: 2.0 };
        let r = SequenceReport { frames: vec![f, f], accel_error: None };
        assert_eq!(metrics_csv(&r), "frame,mpjpe,pa_mpjpe,mpvpe\n0,1.5,0.25,2\n1,1.5,0.25,2\naccel_error,,,\n");
        let r = SequenceReport { frames: vec![f], accel_error: Some(0.0) };
        assert!(metrics_csv(&r).ends_with("accel_error,0,,\n"));
    }

    #[test]
    fn obj_is_one_based() {
        let v = Tensor::new([3, 3], vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(obj(&v, &[[0, 1, 2]]), "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n");
    }
}
