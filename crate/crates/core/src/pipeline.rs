//! Pose- and motion-driven hyperbolic mesh optimization, fusion and
//! coarse-to-fine upsampling.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::hyperlayers::{Affine, HyperAdaLN, HyperAttention, HyperFfn};
use crate::manifold::{expmap0, logmap0, mobius_add, Ball, BallParams, Tangent};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::temporal::{MotionPrior, TemporalPrior};
use crate::tensor::Tensor;

/// Coarse/fine mesh connectivity and the row-stochastic upsampler.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshTopology {
    pub n_coarse: usize,
    pub n_fine: usize,
    /// Coarse vertex pairs.
    pub edges: Vec<[usize; 2]>,
    /// Fine-mesh triangles.
    pub faces: Vec<[usize; 3]>,
    /// `[n_fine, n_coarse]`, nonnegative rows summing to one.
    pub upsample: Tensor,
}

/// Factor `n = rings * segments` for a latitude/longitude grid with at
/// least two rings and three segments, preferring near-square grids.
pub fn grid_dims(n: usize) -> Option<(usize, usize)> {
    let mut seg = 3;
    while seg <= n {
        if n % seg == 0 && seg * seg >= n && n / seg >= 2 {
            return Some((n / seg, seg));
        }
        seg += 1;
    }
    None
}

/// Points of a `rings x segments` grid on a sphere of `radius`, poles
/// excluded, ring-major.
pub fn sphere_grid_points(rings: usize, segments: usize, radius: f64) -> Tensor {
    let mut data = Vec::with_capacity(rings * segments * 3);
    for i in 0..rings {
        let theta = core::f64::consts::PI * (i + 1) as f64 / (rings + 1) as f64;
        for j in 0..segments {
            let phi = 2.0 * core::f64::consts::PI * j as f64 / segments as f64;
            data.push(radius * libm::sin(theta) * libm::cos(phi));
            data.push(radius * libm::sin(theta) * libm::sin(phi));
            data.push(radius * libm::cos(theta));
        }
    }
    Tensor::new([rings * segments, 3], data).expect("grid shape")
}

/// Coarse sphere template for a generated grid topology.
pub fn sphere_template(n_coarse: usize, radius: f64) -> Result<Tensor> {
    let (r, s) = grid_dims(n_coarse)
        .ok_or_else(|| Error::Config(format!("n_coarse {n_coarse} does not factor into a rings x segments grid")))?;
    Ok(sphere_grid_points(r, s, radius))
}

impl MeshTopology {
    /// Latitude/longitude grids on the sphere for both resolutions, with a
    /// bilinear (periodic in longitude) upsampler.
    pub fn sphere_grid(n_coarse: usize, n_fine: usize) -> Result<Self> {
        let (rc, sc) = grid_dims(n_coarse)
            .ok_or_else(|| Error::Config(format!("n_coarse {n_coarse} does not factor into a rings x segments grid")))?;
        let (rf, sf) = grid_dims(n_fine)
            .ok_or_else(|| Error::Config(format!("n_fine {n_fine} does not factor into a rings x segments grid")))?;
        let mut edges = Vec::new();
        for i in 0..rc {
            for j in 0..sc {
                let a = i * sc + j;
                edges.push([a, i * sc + (j + 1) % sc]);
                if i + 1 < rc {
                    edges.push([a, (i + 1) * sc + j]);
                }
            }
        }
        let mut faces = Vec::new();
        for i in 0..rf - 1 {
            for j in 0..sf {
                let a = i * sf + j;
                let b = i * sf + (j + 1) % sf;
                let c = (i + 1) * sf + j;
                let d = (i + 1) * sf + (j + 1) % sf;
                faces.push([a, c, b]);
                faces.push([b, c, d]);
            }
        }
        let mut up = Tensor::zeros([n_fine, n_coarse]);
        for i in 0..rf {
            let theta_frac = (i + 1) as f64 / (rf + 1) as f64;
            let u = (theta_frac * (rc + 1) as f64 - 1.0).clamp(0.0, (rc - 1) as f64);
            let i0 = libm::floor(u) as usize;
            let i1 = (i0 + 1).min(rc - 1);
            let wu = u - i0 as f64;
            for j in 0..sf {
                let v = j as f64 / sf as f64 * sc as f64;
                let j0 = libm::floor(v) as usize % sc;
                let j1 = (j0 + 1) % sc;
                let wv = v - libm::floor(v);
                let row = (i * sf + j) * n_coarse;
                let d = up.data_mut();
                d[row + i0 * sc + j0] += (1.0 - wu) * (1.0 - wv);
                d[row + i0 * sc + j1] += (1.0 - wu) * wv;
                d[row + i1 * sc + j0] += wu * (1.0 - wv);
                d[row + i1 * sc + j1] += wu * wv;
            }
        }
        let topo = MeshTopology { n_coarse, n_fine, edges, faces, upsample: up };
        topo.validate()?;
        Ok(topo)
    }

    pub fn validate(&self) -> Result<()> {
        if self.upsample.shape() != [self.n_fine, self.n_coarse] {
            return Err(Error::shapes("topology", self.upsample.shape(), &[self.n_fine, self.n_coarse]));
        }
        for (r, row) in self.upsample.rows().enumerate() {
            let s: f64 = row.iter().sum();
            if row.iter().any(|&w| w < 0.0 || !w.is_finite()) {
                return Err(Error::Config(format!("upsampling row {r} has a negative or non-finite weight")));
            }
            if (s - 1.0).abs() > 1e-9 || row.iter().all(|&w| w == 0.0) {
                return Err(Error::Config(format!("upsampling row {r} sums to {s}, expected 1")));
            }
        }
        if let Some(e) = self.edges.iter().find(|e| e.iter().any(|&i| i >= self.n_coarse) || e[0] == e[1]) {
            return Err(Error::Config(format!("edge {:?} is invalid for {} coarse vertices", e, self.n_coarse)));
        }
        if let Some(f) = self.faces.iter().find(|f| f.iter().any(|&i| i >= self.n_fine)) {
            return Err(Error::Config(format!("face {:?} is out of range for {} fine vertices", f, self.n_fine)));
        }
        Ok(())
    }

    /// Unique undirected edges of the fine faces, sorted.
    pub fn fine_edges(&self) -> Vec<[usize; 2]> {
        let mut e: Vec<[usize; 2]> = self
            .faces
            .iter()
            .flat_map(|f| [[f[0], f[1]], [f[1], f[2]], [f[2], f[0]]])
            .map(|[a, b]| if a < b { [a, b] } else { [b, a] })
            .collect();
        e.sort_unstable();
        e.dedup();
        e
    }
}

/// Shape parameters of the learnable pipeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineDims {
    pub joints: usize,
    pub feature_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub n_coarse: usize,
    pub eps_var: f64,
}

/// One hyperbolic optimization block. The pose-driven (HPO) and
/// motion-driven (HMO) blocks share this architecture and differ only in
/// the joint stream they attend to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptBlock {
    pub mesh_pos: ParamId,
    pub joint_pos: ParamId,
    pub mesh_embed: Affine,
    pub joint_embed: Affine,
    pub norm_mix: HyperAdaLN,
    pub norm_cross: HyperAdaLN,
    pub norm_self: HyperAdaLN,
    pub cross_attention: HyperAttention,
    pub self_attention: HyperAttention,
    pub ffn_cross: HyperFfn,
    pub ffn_self: HyperFfn,
    pub head: Affine,
}

impl OptBlock {
    pub fn new<R: rand::Rng>(store: &mut ParamStore, name: &str, dims: &PipelineDims, rng: &mut R) -> Result<Self> {
        let d = dims.model_dim;
        let c = dims.feature_dim;
        Ok(OptBlock {
            mesh_pos: store.add_uniform(format!("{name}.mesh_pos"), &[dims.n_coarse, d], rng),
            joint_pos: store.add_uniform(format!("{name}.joint_pos"), &[dims.joints, d], rng),
            mesh_embed: Affine::new(store, &format!("{name}.mesh_embed"), 3, d, rng),
            joint_embed: Affine::new(store, &format!("{name}.joint_embed"), 3, d, rng),
            norm_mix: HyperAdaLN::new(store, &format!("{name}.norm_mix"), c, d, dims.eps_var, rng),
            norm_cross: HyperAdaLN::new(store, &format!("{name}.norm_cross"), c, d, dims.eps_var, rng),
            norm_self: HyperAdaLN::new(store, &format!("{name}.norm_self"), c, d, dims.eps_var, rng),
            cross_attention: HyperAttention::new(store, &format!("{name}.cross"), d, dims.heads, rng)?,
            self_attention: HyperAttention::new(store, &format!("{name}.self"), d, dims.heads, rng)?,
            ffn_cross: HyperFfn::new(store, &format!("{name}.ffn_cross"), d, rng),
            ffn_self: HyperFfn::new(store, &format!("{name}.ffn_self"), d, rng),
            head: Affine::new(store, &format!("{name}.head"), d, 3, rng),
        })
    }

    /// Batched over frames: `m_init: [n, 3]`, `cond: [F, D_f]`,
    /// `joints: [F, J, 3]` → coarse mesh `[F, n, 3]`.
    pub fn forward_frames(&self, g: &mut Graph, m_init: Var, cond: Var, joints: Var, p: &BallParams) -> Result<Var> {
        let js = g.shape(joints).to_vec();
        let frames = js[0];
        let ms = g.shape(m_init).to_vec();
        if ms.len() != 2 || ms[1] != 3 || js.len() != 3 || js[2] != 3 || g.shape(cond)[0] != frames {
            return Err(Error::shapes("opt_block", &ms, &js));
        }
        let d = g.shape(g.param(self.mesh_pos))[1];
        // Euclidean embeddings with positional encodings
        let me = self.mesh_embed.forward(g, m_init)?;
        let mesh_pos = g.param(self.mesh_pos);
        let me = g.add(me, mesh_pos)?;
        let me = g.broadcast_to(me, &[frames, ms[0], d])?;
        let je = self.joint_embed.forward(g, joints)?;
        let joint_pos = g.param(self.joint_pos);
        let je = g.add(je, joint_pos)?;
        // onto the ball
        let mesh = expmap0(g, Tangent::new(me), p)?;
        let pose = expmap0(g, Tangent::new(je), p)?;
        // conditioning on the temporal prior
        let mix = self.norm_mix.forward(g, mesh, cond, p)?;
        // mesh queries attend to joints
        let cross = self.cross_attention.forward(g, mix, pose, p)?;
        let x_pm = mobius_add(g, cross, mix, p)?;
        let x_ada = self.norm_cross.forward(g, x_pm, cond, p)?;
        let ff = self.ffn_cross.forward(g, x_ada, p)?;
        let x_m = mobius_add(g, ff, x_pm, p)?;
        // mesh self-attention
        let sa = self.self_attention.forward(g, x_m, x_m, p)?;
        let x_p = mobius_add(g, sa, x_m, p)?;
        let x_n = self.norm_self.forward(g, x_p, cond, p)?;
        let ff = self.ffn_self.forward(g, x_n, p)?;
        let out: Ball = mobius_add(g, ff, x_p, p)?;
        // back to Euclidean coordinates
        let t = logmap0(g, out, p)?;
        self.head.forward(g, t.var())
    }
}

/// Everything a forward pass over one sequence produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SequenceOutput {
    pub prior: MotionPrior,
    /// `[T, n_coarse, 3]`
    pub m_pose: Var,
    /// `None` when the motion branch is disabled.
    pub m_motion: Option<Var>,
    pub m_opt: Var,
    /// `[T, n_fine, 3]`
    pub m_out: Var,
}

/// Learnable pipeline: temporal prior, learnable coarse template, and the
/// pose/motion optimization blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    pub store: ParamStore,
    pub dims: PipelineDims,
    pub ball: BallParams,
    pub template: ParamId,
    pub prior: TemporalPrior,
    pub hpo: OptBlock,
    pub hmo: OptBlock,
    /// When false the motion branch contributes nothing (`M_m = 0`).
    pub use_motion_branch: bool,
}

impl Pipeline {
    /// Build with deterministic initialization from `seed`. `template` is
    /// the initial coarse mesh `[n_coarse, 3]`.
    pub fn new(dims: PipelineDims, ball: BallParams, template: &Tensor, seed: u64) -> Result<Self> {
        if template.shape() != [dims.n_coarse, 3] {
            return Err(Error::shapes("pipeline_template", template.shape(), &[dims.n_coarse, 3]));
        }
        if dims.heads == 0 || dims.model_dim % dims.heads != 0 || dims.feature_dim % dims.heads != 0 {
            return Err(Error::Config(format!(
                "heads {} must divide model_dim {} and feature_dim {}",
                dims.heads, dims.model_dim, dims.feature_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let template = store.add("template", template.clone(), ParamKind::Euclidean);
        let prior = TemporalPrior::new(&mut store, "prior", dims.joints, dims.feature_dim, dims.heads, &mut rng)?;
        let hpo = OptBlock::new(&mut store, "hpo", &dims, &mut rng)?;
        let hmo = OptBlock::new(&mut store, "hmo", &dims, &mut rng)?;
        Ok(Pipeline { store, dims, ball, template, prior, hpo, hmo, use_motion_branch: true })
    }

    /// Graph with this pipeline's parameters bound.
    pub fn graph(&self) -> Graph {
        Graph::with_params(&self.store)
    }

    /// Pose-driven block for a single frame; returns `[n_coarse, 3]`.
    pub fn hpo_forward(&self, g: &mut Graph, tm_pr: Var, p3d: Var, frame: usize) -> Result<Var> {
        self.single_frame(g, &self.hpo, tm_pr, p3d, frame)
    }

    /// Motion-driven block for a single frame; returns `[n_coarse, 3]`.
    pub fn hmo_forward(&self, g: &mut Graph, tm_pr: Var, p_motion: Var, frame: usize) -> Result<Var> {
        self.single_frame(g, &self.hmo, tm_pr, p_motion, frame)
    }

    fn single_frame(&self, g: &mut Graph, block: &OptBlock, tm_pr: Var, joints: Var, frame: usize) -> Result<Var> {
        let t = g.shape(joints)[0];
        if frame >= t {
            return Err(Error::contract(format!("frame {frame} out of range for {t} frames")));
        }
        let cond = g.slice(tm_pr, 0, frame, 1)?;
        let j = g.slice(joints, 0, frame, 1)?;
        let m_init = g.param(self.template);
        let out = block.forward_frames(g, m_init, cond, j, &self.ball)?;
        g.reshape(out, &[self.dims.n_coarse, 3])
    }

    /// Full forward over a sequence: `pose: [T, J, 3]`, `feats: [T, D_f]`.
    pub fn forward(&self, g: &mut Graph, pose: Var, feats: Var, topo: &MeshTopology) -> Result<SequenceOutput> {
        if topo.n_coarse != self.dims.n_coarse {
            return Err(Error::contract(format!(
                "topology has {} coarse vertices, pipeline expects {}",
                topo.n_coarse, self.dims.n_coarse
            )));
        }
        let prior = self.prior.forward(g, pose, feats)?;
        let m_init = g.param(self.template);
        let m_pose = self.hpo.forward_frames(g, m_init, prior.tm_pr, pose, &self.ball)?;
        let m_motion = if self.use_motion_branch {
            Some(self.hmo.forward_frames(g, m_init, prior.tm_pr, prior.p_motion, &self.ball)?)
        } else {
            None
        };
        let (m_opt, m_out) = fuse_and_upsample(g, m_pose, m_motion, topo)?;
        Ok(SequenceOutput { prior, m_pose, m_motion, m_opt, m_out })
    }

    /// Predicted fine meshes, one `[n_fine, 3]` tensor per frame.
    pub fn run_sequence(&self, pose: &Tensor, feats: &Tensor, topo: &MeshTopology) -> Result<Vec<Tensor>> {
        let mut g = self.graph();
        let pv = g.constant(pose.clone());
        let fv = g.constant(feats.clone());
        let out = self.forward(&mut g, pv, fv, topo)?;
        let m = g.value(out.m_out);
        (0..m.shape()[0]).map(|t| m.index0(t)).collect()
    }
}

/// `M_opt = M_p + M_m`, `M_out = U M_opt`. Works on single meshes
/// `[n_coarse, 3]` or frame batches `[T, n_coarse, 3]`.
pub fn fuse_and_upsample(g: &mut Graph, m_pose: Var, m_motion: Option<Var>, topo: &MeshTopology) -> Result<(Var, Var)> {
    let s = g.shape(m_pose).to_vec();
    if s.len() < 2 || s[s.len() - 2] != topo.n_coarse || s[s.len() - 1] != 3 {
        return Err(Error::contract(format!("mesh shape {:?} does not match {} coarse vertices", s, topo.n_coarse)));
    }
    let m_opt = match m_motion {
        Some(m) => {
            if g.shape(m) != s.as_slice() {
                return Err(Error::contract("pose and motion meshes differ in shape"));
            }
            g.add(m_pose, m)?
        }
        None => m_pose,
    };
    let u = g.constant(topo.upsample.clone());
    let m_out = g.matmul(u, m_opt)?;
    Ok((m_opt, m_out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_factorization() {
        assert_eq!(grid_dims(12), Some((3, 4)));
        assert_eq!(grid_dims(48), Some((6, 8)));
        assert_eq!(grid_dims(8), Some((2, 4)));
        assert_eq!(grid_dims(20), Some((4, 5)));
        assert_eq!(grid_dims(7), None);
        assert_eq!(grid_dims(4), None);
    }

    #[test]
    fn sphere_topology_is_valid() {
        for (c, f) in [(12, 48), (8, 20), (12, 12)] {
            let t = MeshTopology::sphere_grid(c, f).unwrap();
            t.validate().unwrap();
            assert!(!t.faces.is_empty());
        }
    }

    #[test]
    fn identity_upsampler_when_resolutions_match() {
        let t = MeshTopology::sphere_grid(12, 12).unwrap();
        assert!(t.upsample.max_abs_diff(&Tensor::eye(12)).unwrap() < 1e-12);
    }

    #[test]
    fn invalid_upsampler_rejected() {
        let mut t = MeshTopology::sphere_grid(8, 20).unwrap();
        t.upsample.data_mut()[0] += 0.5;
        assert!(t.validate().is_err());
        let mut t = MeshTopology::sphere_grid(8, 20).unwrap();
        t.edges.push([0, 99]);
        assert!(t.validate().is_err());
    }

    #[test]
    fn fusion_examples() {
        let topo = MeshTopology::sphere_grid(8, 20).unwrap();
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_fn([8, 3], |i| i as f64 * 0.1));
        let z = g.constant(Tensor::zeros([8, 3]));
        let (opt, _) = fuse_and_upsample(&mut g, a, Some(z), &topo).unwrap();
        assert_eq!(g.value(opt), g.value(a));
        let c = g.constant(Tensor::from_fn([8, 3], |i| [0.5, -1.0, 2.0][i % 3]));
        let (_, out) = fuse_and_upsample(&mut g, c, None, &topo).unwrap();
        for row in g.value(out).rows() {
            assert!((row[0] - 0.5).abs() < 1e-12 && (row[1] + 1.0).abs() < 1e-12 && (row[2] - 2.0).abs() < 1e-12);
        }
        let bad = g.constant(Tensor::zeros([7, 3]));
        assert!(fuse_and_upsample(&mut g, bad, None, &topo).is_err());
    }
}
