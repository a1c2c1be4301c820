use hymesh_core::config::PipelineConfig;
use hymesh_core::pipeline::{fuse_and_upsample, sphere_template, MeshTopology, Pipeline};
use hymesh_core::synth::{synth_generate, SyntheticScene};
use hymesh_core::train::{build_pipeline, evaluate_loss, train_toy};
use hymesh_core::{Error, Graph, Tensor};

fn small() -> PipelineConfig {
    PipelineConfig::gradcheck_toy()
}

fn setup(cfg: &PipelineConfig) -> (MeshTopology, Tensor, SyntheticScene) {
    let topo = MeshTopology::sphere_grid(cfg.n_coarse, cfg.n_fine).unwrap();
    let tpl = sphere_template(cfg.n_coarse, cfg.template_radius_m).unwrap();
    let scene = synth_generate(cfg, &topo, &tpl).unwrap();
    (topo, tpl, scene)
}

fn forward(p: &Pipeline, scene: &SyntheticScene, topo: &MeshTopology) -> (Graph, hymesh_core::pipeline::SequenceOutput) {
    let mut g = p.graph();
    let pose = g.constant(scene.pose.clone());
    let feats = g.constant(scene.feats.clone());
    let out = p.forward(&mut g, pose, feats, topo).unwrap();
    (g, out)
}

#[test]
fn zero_head_gives_zero_pose_mesh() {
    let cfg = small();
    let (topo, tpl, scene) = setup(&cfg);
    let mut p = build_pipeline(&cfg, &tpl).unwrap();
    for id in [p.hpo.head.weight, p.hpo.head.bias] {
        let shape = p.store.value(id).shape().to_vec();
        p.store.set(id, Tensor::zeros(shape)).unwrap();
    }
    let (g, out) = forward(&p, &scene, &topo);
    assert!(g.value(out.m_pose).data().iter().all(|&v| v == 0.0));
    assert!(g.value(out.m_motion.unwrap()).data().iter().any(|&v| v != 0.0));
}

#[test]
fn ablation_drops_motion_branch() {
    let cfg = PipelineConfig { disable_hmo: true, ..small() };
    let (topo, tpl, scene) = setup(&cfg);
    let p = build_pipeline(&cfg, &tpl).unwrap();
    let (g, out) = forward(&p, &scene, &topo);
    assert!(out.m_motion.is_none());
    assert_eq!(g.value(out.m_opt), g.value(out.m_pose));

    let full = build_pipeline(&small(), &tpl).unwrap();
    let (gf, of) = forward(&full, &scene, &topo);
    // same seed, same pose branch
    assert_eq!(g.value(out.m_pose), gf.value(of.m_pose));
    assert_ne!(g.value(out.m_out), gf.value(of.m_out));
}

#[test]
fn fused_mesh_is_sum_then_upsampled() {
    let cfg = small();
    let (topo, tpl, scene) = setup(&cfg);
    let p = build_pipeline(&cfg, &tpl).unwrap();
    let (g, out) = forward(&p, &scene, &topo);
    let (mp, mm) = (g.value(out.m_pose), g.value(out.m_motion.unwrap()));
    let m_opt = g.value(out.m_opt);
    for i in 0..m_opt.numel() {
        assert_eq!(m_opt.data()[i], mp.data()[i] + mm.data()[i]);
    }
    let u = topo.upsample.data();
    let (nc, nf) = (topo.n_coarse, topo.n_fine);
    let m_out = g.value(out.m_out);
    for t in 0..cfg.t_frames {
        for f in 0..nf {
            for c in 0..3 {
                let want: f64 = (0..nc).map(|k| u[f * nc + k] * m_opt.data()[(t * nc + k) * 3 + c]).sum();
                assert!((m_out.data()[(t * nf + f) * 3 + c] - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn constant_coarse_mesh_upsamples_to_constant() {
    let topo = MeshTopology::sphere_grid(12, 48).unwrap();
    let mut g = Graph::new();
    let m = g.constant(Tensor::from_fn([12, 3], |i| [0.3, -1.2, 2.5][i % 3]));
    let (_, out) = fuse_and_upsample(&mut g, m, None, &topo).unwrap();
    for r in g.value(out).rows() {
        for (a, b) in r.iter().zip([0.3, -1.2, 2.5]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn scene_joints_are_regressed_meshes() {
    let cfg = PipelineConfig::toy();
    let (_, _, scene) = setup(&cfg);
    let r = scene.regressor.matrix();
    let (j, n) = (cfg.n_joints, cfg.n_fine);
    for t in 0..cfg.t_frames {
        let mesh = scene.mesh(t).unwrap();
        for k in 0..j {
            for c in 0..3 {
                let want: f64 = (0..n).map(|v| r.data()[k * n + v] * mesh.data()[v * 3 + c]).sum();
                let got = scene.pose.data()[(t * j + k) * 3 + c];
                assert!((got - want).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn zero_learning_rate_keeps_loss_constant() {
    let cfg = PipelineConfig { learning_rate: 0.0, steps: 3, ..small() };
    let (topo, tpl, scene) = setup(&cfg);
    let out = train_toy(&cfg, &topo, &scene, &tpl).unwrap();
    assert_eq!(out.curve.len(), 4);
    assert!(out.curve.iter().all(|r| r.total == out.curve[0].total));
}

#[test]
fn training_is_deterministic_and_keeps_biases_inside() {
    let cfg = PipelineConfig { steps: 4, ..small() };
    let (topo, tpl, scene) = setup(&cfg);
    let a = train_toy(&cfg, &topo, &scene, &tpl).unwrap();
    let b = train_toy(&cfg, &topo, &scene, &tpl).unwrap();
    assert_eq!(a.pipeline.store, b.pipeline.store);
    assert_eq!(a.curve, b.curve);
    assert!(a.pipeline.store.max_ball_param_norm() <= cfg.ball().unwrap().max_norm());
    assert!(a.final_loss() < a.initial_loss(), "{:?}", a.curve.iter().map(|r| r.total).collect::<Vec<_>>());
    assert_eq!(evaluate_loss(&a.pipeline, &scene, &topo, &cfg).unwrap().total, a.final_loss());
}

#[test]
fn non_finite_input_aborts_with_op_name() {
    let cfg = PipelineConfig { steps: 2, ..small() };
    let (topo, tpl, mut scene) = setup(&cfg);
    scene.feats.data_mut()[0] = f64::NAN;
    match train_toy(&cfg, &topo, &scene, &tpl) {
        Err(Error::Contract(msg)) => {
            assert!(msg.contains("step 0"), "{msg}");
            assert!(msg.contains("non-finite value produced by"), "{msg}");
        }
        other => panic!("expected an abort, got {other:?}"),
    }
}
