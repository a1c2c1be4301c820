//! Temporal motion prior: pose-motion features from a 3D joint sequence and
//! segment-wise recurrent features from the image-feature sequence, fused
//! by self-attention.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::hyperlayers::{multi_head_attention, Affine};
use crate::manifold::linear_rows;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Gated recurrent unit with the gate convention
///
/// ```text
/// z  = sigmoid(W_z x + U_z h + b_z)
/// r  = sigmoid(W_r x + U_r h + b_r)
/// h~ = tanh(W_h x + U_h (r * h) + b_h)
/// h' = (1 - z) * h~ + z * h
/// ```
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GruCell {
    pub w_z: ParamId,
    pub w_r: ParamId,
    pub w_h: ParamId,
    pub u_z: ParamId,
    pub u_r: ParamId,
    pub u_h: ParamId,
    pub b_z: ParamId,
    pub b_r: ParamId,
    pub b_h: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let mut w = |s: &str, shape: &[usize], store: &mut ParamStore| store.add_uniform(format!("{name}.{s}"), shape, rng);
        let w_z = w("w_z", &[hidden, input], store);
        let w_r = w("w_r", &[hidden, input], store);
        let w_h = w("w_h", &[hidden, input], store);
        let u_z = w("u_z", &[hidden, hidden], store);
        let u_r = w("u_r", &[hidden, hidden], store);
        let u_h = w("u_h", &[hidden, hidden], store);
        GruCell {
            w_z,
            w_r,
            w_h,
            u_z,
            u_r,
            u_h,
            b_z: store.add_zeros(format!("{name}.b_z"), &[hidden]),
            b_r: store.add_zeros(format!("{name}.b_r"), &[hidden]),
            b_h: store.add_zeros(format!("{name}.b_h"), &[hidden]),
            input,
            hidden,
        }
    }

    /// Run over `xs: [T, input]` from a zero state; returns every hidden
    /// state, `[T, hidden]`.
    pub fn run(&self, g: &mut Graph, xs: Var) -> Result<Var> {
        let s = g.shape(xs).to_vec();
        if s.len() != 2 || s[1] != self.input {
            return Err(Error::shape("gru", format!("expected [T, {}], got {:?}", self.input, s)));
        }
        let p = |g: &Graph, id| g.param(id);
        let (wz, wr, wh) = (p(g, self.w_z), p(g, self.w_r), p(g, self.w_h));
        let (uz, ur, uh) = (p(g, self.u_z), p(g, self.u_r), p(g, self.u_h));
        let (bz, br, bh) = (p(g, self.b_z), p(g, self.b_r), p(g, self.b_h));
        // input projections for all steps at once
        let xz = linear_rows(g, xs, wz)?;
        let xz = g.add(xz, bz)?;
        let xr = linear_rows(g, xs, wr)?;
        let xr = g.add(xr, br)?;
        let xh = linear_rows(g, xs, wh)?;
        let xh = g.add(xh, bh)?;
        let mut h = g.constant(Tensor::zeros([1, self.hidden]));
        let mut states = Vec::with_capacity(s[0]);
        for t in 0..s[0] {
            let hz = linear_rows(g, h, uz)?;
            let xzt = g.slice(xz, 0, t, 1)?;
            let z = g.add(xzt, hz)?;
            let z = g.sigmoid(z)?;
            let hr = linear_rows(g, h, ur)?;
            let xrt = g.slice(xr, 0, t, 1)?;
            let r = g.add(xrt, hr)?;
            let r = g.sigmoid(r)?;
            let rh = g.mul(r, h)?;
            let hh = linear_rows(g, rh, uh)?;
            let xht = g.slice(xh, 0, t, 1)?;
            let cand = g.add(xht, hh)?;
            let cand = g.tanh(cand)?;
            // h' = h~ + z (h - h~)
            let diff = g.sub(h, cand)?;
            let zd = g.mul(z, diff)?;
            h = g.add(cand, zd)?;
            states.push(h);
        }
        g.concat(&states, 0)
    }
}

/// Pose-motion extractor: frame differences (first frame padded with zero)
/// concatenated per joint with the sequence mean, fed through a GRU of
/// hidden width `3J`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoseMotion {
    pub gru: GruCell,
    pub joints: usize,
}

impl PoseMotion {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, joints: usize, rng: &mut R) -> Self {
        PoseMotion { gru: GruCell::new(store, &format!("{name}.gru"), 6 * joints, 3 * joints, rng), joints }
    }

    /// Per-joint `[diff, avg]` features, `[T, J, 6]`.
    pub fn motion_features(&self, g: &mut Graph, pose: Var) -> Result<Var> {
        let s = g.shape(pose).to_vec();
        if s.len() != 3 || s[1] != self.joints || s[2] != 3 {
            return Err(Error::shape("pose_motion", format!("expected [T, {}, 3], got {:?}", self.joints, s)));
        }
        let t = s[0];
        if t < 2 {
            return Err(Error::contract(format!("pose sequence needs at least 2 frames, got {t}")));
        }
        let later = g.slice(pose, 0, 1, t - 1)?;
        let earlier = g.slice(pose, 0, 0, t - 1)?;
        let diff = g.sub(later, earlier)?;
        let pad = g.constant(Tensor::zeros([1, self.joints, 3]));
        let diff = g.concat(&[pad, diff], 0)?;
        let avg = g.mean_axis(pose, 0)?;
        let avg = g.broadcast_to(avg, &s)?;
        g.concat(&[diff, avg], 2)
    }

    /// `P_motion: [T, J, 3]` from `pose: [T, J, 3]`.
    pub fn forward(&self, g: &mut Graph, pose: Var) -> Result<Var> {
        let cont = self.motion_features(g, pose)?;
        let t = g.shape(cont)[0];
        let flat = g.reshape(cont, &[t, 6 * self.joints])?;
        let out = self.gru.run(g, flat)?;
        g.reshape(out, &[t, self.joints, 3])
    }
}

/// Euclidean multi-head self-attention without biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelfAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide width {dim}")));
        }
        Ok(SelfAttention {
            wq: store.add_uniform(format!("{name}.wq"), &[dim, dim], rng),
            wk: store.add_uniform(format!("{name}.wk"), &[dim, dim], rng),
            wv: store.add_uniform(format!("{name}.wv"), &[dim, dim], rng),
            wo: store.add_uniform(format!("{name}.wo"), &[dim, dim], rng),
            heads,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (wq, wk, wv, wo) = (g.param(self.wq), g.param(self.wk), g.param(self.wv), g.param(self.wo));
        let q = linear_rows(g, x, wq)?;
        let k = linear_rows(g, x, wk)?;
        let v = linear_rows(g, x, wv)?;
        let ctx = multi_head_attention(g, q, k, v, self.heads)?;
        linear_rows(g, ctx, wo)
    }
}

/// Split-sequence recurrent features fused by self-attention, plus the
/// projected pose motion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureFusion {
    pub gru_before: GruCell,
    pub gru_after: GruCell,
    pub attention: SelfAttention,
    /// `3J -> D_f` projection that lets pose motion be added to the
    /// attention output.
    pub motion_proj: Affine,
}

impl FeatureFusion {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        feature_dim: usize,
        joints: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(FeatureFusion {
            gru_before: GruCell::new(store, &format!("{name}.gru_before"), feature_dim, feature_dim, rng),
            gru_after: GruCell::new(store, &format!("{name}.gru_after"), feature_dim, feature_dim, rng),
            attention: SelfAttention::new(store, &format!("{name}.msa"), feature_dim, heads, rng)?,
            motion_proj: Affine::new(store, &format!("{name}.motion_proj"), 3 * joints, feature_dim, rng),
        })
    }

    /// `TF_cont = [GRU_bef(F[..T/2]); GRU_aft(F[T/2..])]`, `[T, D_f]`.
    pub fn segment_features(&self, g: &mut Graph, feats: Var) -> Result<Var> {
        let s = g.shape(feats).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("feature_fuse", format!("expected [T, D_f], got {:?}", s)));
        }
        if s[0] % 2 != 0 {
            return Err(Error::contract(format!("feature sequence length must be even, got {}", s[0])));
        }
        let half = s[0] / 2;
        let before = g.slice(feats, 0, 0, half)?;
        let after = g.slice(feats, 0, half, half)?;
        let tb = self.gru_before.run(g, before)?;
        let ta = self.gru_after.run(g, after)?;
        g.concat(&[tb, ta], 0)
    }

    /// `TM_pr = MSA(TF_cont) + proj(P_motion)`.
    pub fn forward(&self, g: &mut Graph, feats: Var, p_motion: Var) -> Result<Var> {
        let cont = self.segment_features(g, feats)?;
        let fused = self.attention.forward(g, cont)?;
        let ps = g.shape(p_motion).to_vec();
        if ps.len() != 3 || ps[0] != g.shape(feats)[0] {
            return Err(Error::shapes("feature_fuse", g.shape(feats), &ps));
        }
        let flat = g.reshape(p_motion, &[ps[0], ps[1] * ps[2]])?;
        let motion = self.motion_proj.forward(g, flat)?;
        g.add(fused, motion)
    }
}

/// Outputs of the temporal stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MotionPrior {
    /// `[T, D_f]`
    pub tm_pr: Var,
    /// `[T, J, 3]`
    pub p_motion: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TemporalPrior {
    pub pose_motion: PoseMotion,
    pub fusion: FeatureFusion,
}

impl TemporalPrior {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        joints: usize,
        feature_dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(TemporalPrior {
            pose_motion: PoseMotion::new(store, &format!("{name}.pose_motion"), joints, rng),
            fusion: FeatureFusion::new(store, &format!("{name}.fusion"), feature_dim, joints, heads, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, pose: Var, feats: Var) -> Result<MotionPrior> {
        if g.shape(pose).first() != g.shape(feats).first() {
            return Err(Error::shapes("temporal_prior", g.shape(pose), g.shape(feats)));
        }
        let p_motion = self.pose_motion.forward(g, pose)?;
        let tm_pr = self.fusion.forward(g, feats, p_motion)?;
        Ok(MotionPrior { tm_pr, p_motion })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_sequence_has_zero_diff() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let pm = PoseMotion::new(&mut store, "pm", 3, &mut rng);
        let mut g = Graph::with_params(&store);
        let frame: Vec<f64> = (0..9).map(|i| i as f64 * 0.1).collect();
        let pose = Tensor::from_fn([4, 3, 3], |i| frame[i % 9]);
        let pose = g.constant(pose);
        let f = pm.motion_features(&mut g, pose).unwrap();
        for (i, v) in g.value(f).data().iter().enumerate() {
            let (joint_feat, j) = (i % 6, (i / 6) % 3);
            if joint_feat < 3 {
                assert_eq!(*v, 0.0);
            } else {
                assert!((v - frame[j * 3 + joint_feat - 3]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_sequence_zero_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let pm = PoseMotion::new(&mut store, "pm", 3, &mut rng);
        let mut g = Graph::with_params(&store);
        let pose = g.constant(Tensor::zeros([4, 3, 3]));
        let out = pm.forward(&mut g, pose).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
        assert_eq!(g.shape(out), &[4, 3, 3]);
    }

    #[test]
    fn short_or_odd_sequences_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let tp = TemporalPrior::new(&mut store, "tp", 3, 4, 2, &mut rng).unwrap();
        let mut g = Graph::with_params(&store);
        let pose = g.constant(Tensor::zeros([1, 3, 3]));
        assert!(matches!(tp.pose_motion.forward(&mut g, pose), Err(Error::Contract(_))));
        let f = g.constant(Tensor::zeros([3, 4]));
        let pm = g.constant(Tensor::zeros([3, 3, 3]));
        assert!(matches!(tp.fusion.forward(&mut g, f, pm), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_features_give_projected_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let fu = FeatureFusion::new(&mut store, "fu", 4, 2, 2, &mut rng).unwrap();
        let mut g = Graph::with_params(&store);
        let f = g.constant(Tensor::zeros([4, 4]));
        let pm_t = Tensor::from_fn([4, 2, 3], |i| (i as f64 * 0.37).sin());
        let pm = g.constant(pm_t.clone());
        let out = fu.forward(&mut g, f, pm).unwrap();
        let flat = g.constant(pm_t.reshape([4, 6]).unwrap());
        let expect = fu.motion_proj.forward(&mut g, flat).unwrap();
        assert!(g.value(out).max_abs_diff(g.value(expect)).unwrap() < 1e-15);
    }
}
