//! Loss assembly over a scene, optimizers, and the overfit training loop.

use alloc::format;
use alloc::vec::Vec;

use crate::config::{OptimizerKind, PipelineConfig};
use crate::error::{Error, Result};
use crate::graph::{Grads, Graph, Var};
use crate::manifold::BallParams;
use crate::losses::{euclidean_losses, hyperbolic_mesh_loss, total_loss, EuclideanLosses};
use crate::params::ParamStore;
use crate::pipeline::{MeshTopology, Pipeline, SequenceOutput};
use crate::synth::SyntheticScene;
use crate::tensor::Tensor;

/// Scalar values of every loss term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub mesh: f64,
    pub joint: f64,
    pub normal: f64,
    pub edge: f64,
    pub hymesh: f64,
    pub degenerate_faces: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossVars {
    pub total: Var,
    pub euclidean: EuclideanLosses,
    pub hymesh: Var,
    pub output: SequenceOutput,
}

impl LossVars {
    pub fn report(&self, g: &Graph) -> Result<LossReport> {
        let v = |x: Var| g.value(x).item();
        Ok(LossReport {
            total: v(self.total)?,
            mesh: v(self.euclidean.mesh)?,
            joint: v(self.euclidean.joint)?,
            normal: v(self.euclidean.normal)?,
            edge: v(self.euclidean.edge)?,
            hymesh: v(self.hymesh)?,
            degenerate_faces: self.euclidean.degenerate_faces,
        })
    }
}

/// Pipeline with the configured dims and ablation flag.
pub fn build_pipeline(cfg: &PipelineConfig, template: &Tensor) -> Result<Pipeline> {
    cfg.validate()?;
    let mut p = Pipeline::new(cfg.dims(), cfg.ball()?, template, cfg.seed)?;
    p.use_motion_branch = !cfg.disable_hmo;
    Ok(p)
}

/// Total loss of `pipeline` on `scene`, recorded on `g` (which must have
/// the pipeline's parameters bound).
pub fn sequence_loss(
    g: &mut Graph,
    pipeline: &Pipeline,
    scene: &SyntheticScene,
    topo: &MeshTopology,
    cfg: &PipelineConfig,
) -> Result<LossVars> {
    let pose = g.constant(scene.pose.clone());
    let feats = g.constant(scene.feats.clone());
    let gt = g.constant(scene.meshes.clone());
    let output = pipeline.forward(g, pose, feats, topo)?;
    let euclidean = euclidean_losses(g, output.m_out, gt, &scene.regressor, topo)?;
    let hymesh = hyperbolic_mesh_loss(g, output.m_out, gt, cfg.vertex_scale, &pipeline.ball)?;
    let total = total_loss(g, &euclidean, hymesh, &cfg.loss_weights)?;
    Ok(LossVars { total, euclidean, hymesh, output })
}

pub fn evaluate_loss(pipeline: &Pipeline, scene: &SyntheticScene, topo: &MeshTopology, cfg: &PipelineConfig) -> Result<LossReport> {
    let mut g = pipeline.graph();
    sequence_loss(&mut g, pipeline, scene, topo, cfg)?.report(&g)
}

/// First-order optimizer state, one slot per parameter.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    steps: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(cfg: &PipelineConfig, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, e)| Tensor::zeros(e.value.shape().to_vec())).collect::<Vec<_>>();
        let first = if cfg.optimizer == OptimizerKind::Sgd { Vec::new() } else { zeros() };
        let second = if cfg.optimizer == OptimizerKind::Adam { zeros() } else { Vec::new() };
        Optimizer {
            kind: cfg.optimizer,
            lr: cfg.learning_rate,
            beta1: cfg.momentum,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            first,
            second,
        }
    }

    /// One update of every parameter, followed by ball re-projection.
    /// Parameters that do not reach the loss are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, ball: &BallParams) -> Result<()> {
        self.steps += 1;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(gr) = grads.param(id) else { continue };
            if !gr.is_finite() {
                return Err(Error::contract(format!("non-finite gradient for parameter {}", store.get(id).name)));
            }
            let i = id.index();
            let value = store.value_mut(id).data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in value.iter_mut().zip(gr.data()) {
                        *w -= self.lr * g;
                    }
                }
                OptimizerKind::Momentum => {
                    let m = self.first[i].data_mut();
                    for ((w, g), m) in value.iter_mut().zip(gr.data()).zip(m) {
                        *m = self.beta1 * *m + g;
                        *w -= self.lr * *m;
                    }
                }
                OptimizerKind::Adam => {
                    let c1 = 1.0 - libm::pow(self.beta1, self.steps as f64);
                    let c2 = 1.0 - libm::pow(self.beta2, self.steps as f64);
                    let m = self.first[i].data_mut();
                    let v = self.second[i].data_mut();
                    for (((w, g), m), v) in value.iter_mut().zip(gr.data()).zip(m).zip(v) {
                        *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                        *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                        *w -= self.lr * (*m / c1) / (libm::sqrt(*v / c2) + self.eps);
                    }
                }
            }
        }
        store.project_ball_params(ball);
        if let Some((_, e)) = store.iter().find(|(_, e)| !e.value.is_finite()) {
            return Err(Error::contract(format!("parameter {} became non-finite after step {}", e.name, self.steps)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub pipeline: Pipeline,
    /// Loss before each update, then the loss after the last one.
    pub curve: Vec<LossReport>,
}

impl TrainOutcome {
    pub fn initial_loss(&self) -> f64 {
        self.curve[0].total
    }

    pub fn final_loss(&self) -> f64 {
        self.curve[self.curve.len() - 1].total
    }

    /// `1 - final / initial`.
    pub fn reduction(&self) -> f64 {
        1.0 - self.final_loss() / self.initial_loss()
    }
}

/// Overfit `scene` for `cfg.steps` updates. A non-finite loss aborts with
/// the name of the first operation that produced a non-finite value.
pub fn train_toy(cfg: &PipelineConfig, topo: &MeshTopology, scene: &SyntheticScene, template: &Tensor) -> Result<TrainOutcome> {
    let mut pipeline = build_pipeline(cfg, template)?;
    let mut opt = Optimizer::new(cfg, &pipeline.store);
    let mut curve = Vec::with_capacity(cfg.steps + 1);
    for step in 0..cfg.steps {
        let mut g = pipeline.graph();
        let vars = sequence_loss(&mut g, &pipeline, scene, topo, cfg)
            .map_err(|e| Error::contract(format!("training aborted at step {step}: {e}")))?;
        curve.push(vars.report(&g)?);
        let grads = g.backward(vars.total)?;
        let ball = pipeline.ball;
        opt.step(&mut pipeline.store, &grads, &ball)?;
    }
    curve.push(evaluate_loss(&pipeline, scene, topo, cfg)?);
    Ok(TrainOutcome { pipeline, curve })
}
