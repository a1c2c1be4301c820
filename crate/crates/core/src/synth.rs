//! Deterministic synthetic scenes: an articulating toy skeleton, skinned
//! fine meshes, and features derived from the poses.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::losses::JointRegressor;
use crate::pipeline::MeshTopology;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    /// `[T, J, 3]`
    pub pose: Tensor,
    /// `[T, n_fine, 3]`
    pub meshes: Tensor,
    /// `[T, D_f]`
    pub feats: Tensor,
    pub regressor: JointRegressor,
    /// Joint index driving each coarse template vertex.
    pub skinning: Vec<usize>,
}

impl SyntheticScene {
    pub fn frames(&self) -> usize {
        self.pose.shape()[0]
    }

    pub fn mesh(&self, t: usize) -> Result<Tensor> {
        self.meshes.index0(t)
    }

    pub fn mesh_frames(&self) -> Result<Vec<Tensor>> {
        (0..self.frames()).map(|t| self.mesh(t)).collect()
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest-anchor vertex groups. Anchors are evenly spaced vertex indices,
/// so every joint owns at least its anchor.
fn skin(rest: &Tensor, joints: usize) -> Vec<usize> {
    let n = rest.shape()[0];
    let anchors: Vec<usize> = (0..joints).map(|k| (2 * k + 1) * n / (2 * joints)).collect();
    let rows: Vec<&[f64]> = rest.rows().collect();
    (0..n)
        .map(|v| {
            if let Some(k) = anchors.iter().position(|&a| a == v) {
                return k;
            }
            let mut best = 0;
            for k in 1..joints {
                if dist2(rows[v], rows[anchors[k]]) < dist2(rows[v], rows[anchors[best]]) {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Generate a scene from `cfg`. The skeleton drives the coarse `template`
/// by per-joint rigid motion; fine meshes are its upsampling, so they lie
/// in the range of the topology's upsampler. GT poses are the regressed
/// joints of the fine meshes.
pub fn synth_generate(cfg: &PipelineConfig, topo: &MeshTopology, template: &Tensor) -> Result<SyntheticScene> {
    cfg.validate()?;
    let (t_len, j_len, nc, n, df) = (cfg.t_frames, cfg.n_joints, cfg.n_coarse, cfg.n_fine, cfg.feature_dim);
    if topo.n_fine != n || topo.n_coarse != nc || template.shape() != [nc, 3] {
        return Err(Error::Config(alloc::format!(
            "topology {}→{} does not match the config or template",
            topo.n_coarse,
            topo.n_fine
        )));
    }
    if j_len > nc {
        return Err(Error::Config(alloc::format!("{j_len} joints need at least as many coarse vertices, got {nc}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed);

    let skinning = skin(template, j_len);
    let mut counts = vec![0usize; j_len];
    skinning.iter().for_each(|&k| counts[k] += 1);
    let mut rest_joints = vec![[0.0f64; 3]; j_len];
    for (v, row) in template.rows().enumerate() {
        let k = skinning[v];
        for c in 0..3 {
            rest_joints[k][c] += row[c] / counts[k] as f64;
        }
    }

    // per-joint sinusoid: frequency, per-axis phase, and a twist phase
    let amp = cfg.motion_amplitude_m;
    let motion: Vec<(f64, [f64; 3], f64)> = (0..j_len)
        .map(|_| {
            let w = rng.random_range(0.3..0.8);
            let ph = [0; 3].map(|_| rng.random_range(0.0..core::f64::consts::TAU));
            (w, ph, rng.random_range(0.0..core::f64::consts::TAU))
        })
        .collect();

    let up = topo.upsample.data();
    let mut meshes = Vec::with_capacity(t_len * n * 3);
    for t in 0..t_len {
        let tf = t as f64;
        let mut coarse = Vec::with_capacity(nc * 3);
        for (v, row) in template.rows().enumerate() {
            let k = skinning[v];
            let (w, ph, tw) = &motion[k];
            let o = [row[0] - rest_joints[k][0], row[1] - rest_joints[k][1], row[2] - rest_joints[k][2]];
            let th = 2.0 * amp * libm::sin(w * tf + tw);
            let (c, s) = (libm::cos(th), libm::sin(th));
            let rot = [c * o[0] - s * o[1], s * o[0] + c * o[1], o[2]];
            for a in 0..3 {
                coarse.push(rest_joints[k][a] + amp * libm::sin(w * tf + ph[a]) + rot[a]);
            }
        }
        for f in 0..n {
            for a in 0..3 {
                meshes.push((0..nc).map(|c| up[f * nc + c] * coarse[c * 3 + a]).sum());
            }
        }
    }
    let meshes = Tensor::new([t_len, n, 3], meshes)?;

    // fine vertices follow the joint of their dominant coarse vertex
    let dominant: Vec<usize> = topo
        .upsample
        .rows()
        .map(|r| {
            let c = (0..nc).fold(0, |b, c| if r[c] > r[b] { c } else { b });
            skinning[c]
        })
        .collect();
    let mut reg = Tensor::zeros([j_len, n]);
    for k in 0..j_len {
        let mut members: Vec<usize> = (0..n).filter(|&v| dominant[v] == k).collect();
        if members.is_empty() {
            let share = |v: usize| (0..nc).filter(|&c| skinning[c] == k).map(|c| up[v * nc + c]).sum::<f64>();
            members.push((0..n).fold(0, |b, v| if share(v) > share(b) { v } else { b }));
        }
        for &v in &members {
            reg.data_mut()[k * n + v] = 1.0 / members.len() as f64;
        }
    }
    let regressor = JointRegressor::new(reg)?;
    let pose = Tensor::stack(
        &(0..t_len).map(|t| regressor.regress(&meshes.index0(t)?)).collect::<Result<Vec<_>>>()?,
    )?;

    // fixed random projection of the flattened pose, plus noise
    let width = 3 * j_len;
    let bound = libm::sqrt(3.0 / width as f64);
    let proj: Vec<f64> = (0..width * df).map(|_| rng.random_range(-bound..bound)).collect();
    let noise = cfg.feature_noise_std * libm::sqrt(3.0);
    let mut feats = Vec::with_capacity(t_len * df);
    for t in 0..t_len {
        let x = &pose.data()[t * width..(t + 1) * width];
        for f in 0..df {
            let clean: f64 = (0..width).map(|i| x[i] * proj[i * df + f]).sum();
            let e = if noise > 0.0 { rng.random_range(-noise..noise) } else { 0.0 };
            feats.push(clean + e);
        }
    }
    let feats = Tensor::new([t_len, df], feats)?;

    Ok(SyntheticScene { pose, meshes, feats, regressor, skinning })
}
