//! Experiment configuration.

use alloc::format;
use alloc::string::String;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::manifold::BallParams;
use crate::pipeline::PipelineDims;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub t_frames: usize,
    pub n_joints: usize,
    pub feature_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub n_coarse: usize,
    pub n_fine: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub steps: usize,
    pub optimizer: OptimizerKind,
    /// Momentum coefficient (also Adam's first-moment decay).
    pub momentum: f64,
    pub loss_weights: LossWeights,
    pub eps_ball: f64,
    pub eps_norm: f64,
    pub eps_var: f64,
    /// Multiplier applied to vertex coordinates before exp0 in the
    /// hyperbolic mesh loss.
    pub vertex_scale: f64,
    pub root_joint: usize,
    pub template_radius_m: f64,
    pub motion_amplitude_m: f64,
    pub feature_noise_std: f64,
    /// Zero the motion-driven mesh branch.
    pub disable_hmo: bool,
    /// Only 64 is supported.
    pub float_width_bits: u32,
    pub topology_path: Option<String>,
    pub template_mesh_path: Option<String>,
    pub output_dir: Option<String>,
}

impl PipelineConfig {
    /// Desk-scale defaults used for the overfit regression.
    pub fn toy() -> Self {
        PipelineConfig {
            t_frames: 8,
            n_joints: 5,
            feature_dim: 16,
            model_dim: 32,
            heads: 2,
            n_coarse: 12,
            n_fine: 48,
            seed: 7,
            learning_rate: 0.003,
            steps: 2000,
            optimizer: OptimizerKind::Momentum,
            momentum: 0.9,
            loss_weights: LossWeights::default(),
            eps_ball: 1e-5,
            eps_norm: 1e-12,
            eps_var: 1e-6,
            vertex_scale: 1.0,
            root_joint: 0,
            template_radius_m: 0.5,
            motion_amplitude_m: 0.1,
            feature_noise_std: 0.01,
            disable_hmo: false,
            float_width_bits: 64,
            topology_path: None,
            template_mesh_path: None,
            output_dir: None,
        }
    }

    /// Smaller shapes for end-to-end gradient checks.
    pub fn gradcheck_toy() -> Self {
        PipelineConfig {
            t_frames: 4,
            n_joints: 3,
            feature_dim: 8,
            model_dim: 16,
            n_coarse: 8,
            n_fine: 20,
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("t_frames", self.t_frames),
            ("n_joints", self.n_joints),
            ("feature_dim", self.feature_dim),
            ("model_dim", self.model_dim),
            ("heads", self.heads),
            ("n_coarse", self.n_coarse),
            ("n_fine", self.n_fine),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.t_frames % 2 != 0 || self.t_frames < 2 {
            return Err(Error::Config(format!("t_frames must be even and at least 2, got {}", self.t_frames)));
        }
        if self.model_dim % self.heads != 0 || self.feature_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads {} must divide model_dim {} and feature_dim {}",
                self.heads, self.model_dim, self.feature_dim
            )));
        }
        if self.root_joint >= self.n_joints {
            return Err(Error::Config(format!("root_joint {} out of range", self.root_joint)));
        }
        if self.n_joints > self.n_coarse {
            return Err(Error::Config("n_joints cannot exceed n_coarse".into()));
        }
        if self.float_width_bits != 64 {
            return Err(Error::Config(format!("float_width_bits {} unsupported, only 64", self.float_width_bits)));
        }
        let positive = [
            ("learning_rate", self.learning_rate, true),
            ("eps_var", self.eps_var, false),
            ("vertex_scale", self.vertex_scale, false),
            ("template_radius_m", self.template_radius_m, false),
            ("motion_amplitude_m", self.motion_amplitude_m, true),
            ("feature_noise_std", self.feature_noise_std, true),
        ];
        for (name, v, zero_ok) in positive {
            if !v.is_finite() || v < 0.0 || (!zero_ok && v == 0.0) {
                return Err(Error::Config(format!("{name} = {v} is out of range")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} must lie in [0, 1)", self.momentum)));
        }
        self.loss_weights.validate()?;
        self.ball()?;
        Ok(())
    }

    pub fn ball(&self) -> Result<BallParams> {
        BallParams::new(self.eps_ball, self.eps_norm)
    }

    pub fn dims(&self) -> PipelineDims {
        PipelineDims {
            joints: self.n_joints,
            feature_dim: self.feature_dim,
            model_dim: self.model_dim,
            heads: self.heads,
            n_coarse: self.n_coarse,
            eps_var: self.eps_var,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        PipelineConfig::toy().validate().unwrap();
        PipelineConfig::gradcheck_toy().validate().unwrap();
    }

    #[test]
    fn invalid_configs_rejected() {
        let base = PipelineConfig::toy();
        for c in [
            PipelineConfig { t_frames: 7, ..base.clone() },
            PipelineConfig { heads: 3, ..base.clone() },
            PipelineConfig { float_width_bits: 32, ..base.clone() },
            PipelineConfig { eps_ball: 0.5, ..base.clone() },
            PipelineConfig { learning_rate: f64::NAN, ..base.clone() },
            PipelineConfig { n_joints: 0, ..base.clone() },
        ] {
            assert!(c.validate().is_err());
        }
    }
}
