//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use std::fs;
use std::time::{Duration, Instant};

use hymesh::commands::run_args;
use hymesh::files::{load_pipeline, save_checkpoint, save_config};
use hymesh::report::metrics_csv;
use hymesh::tensor_io::{decode, encode, read_tensor, write_tensor};
use hymesh_core::checks::{perturb_params, run_gradchecks, run_propchecks, GradOutcome};
use hymesh_core::config::PipelineConfig;
use hymesh_core::losses::{total_loss, weighted_sum, EuclideanLosses, LossWeights};
use hymesh_core::metrics::evaluate_sequence;
use hymesh_core::oracles::{attention_core_max_error, gru_max_error, hyperbolic_attention_max_error, losses_max_error};
use hymesh_core::pipeline::{sphere_template, MeshTopology};
use hymesh_core::synth::synth_generate;
use hymesh_core::train::{build_pipeline, sequence_loss, train_toy};
use hymesh_core::{Graph, Tensor};

type Verdict = Result<String, String>;

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

fn props(module: &str, cases: usize, names: Option<&[&str]>) -> Result<Vec<hymesh_core::checks::PropOutcome>, String> {
    let all = run_propchecks(Some(module), cases, 20_261_014).map_err(|e| e.to_string())?;
    Ok(all.into_iter().filter(|o| names.is_none_or(|n| n.contains(&o.name))).collect())
}

fn all_passed(outcomes: &[hymesh_core::checks::PropOutcome]) -> Result<(), String> {
    match outcomes.iter().find(|o| o.passed != o.cases) {
        None => Ok(()),
        Some(o) => Err(format!("{} {}/{} ({})", o.name, o.passed, o.cases, o.first_failure.clone().unwrap_or_default())),
    }
}

/// Manifold identities on 10,000 cases each, a fifth at norm 1 - 2 eps_ball.
fn criterion_1() -> Verdict {
    let names = ["right_identity", "left_identity", "left_cancellation", "matvec_identity", "exp_log_roundtrip"];
    let t0 = Instant::now();
    let out = props("manifold", 10_000, Some(&names))?;
    let el = t0.elapsed();
    if out.len() != names.len() {
        return Err(format!("expected {} identities, found {}", names.len(), out.len()));
    }
    all_passed(&out)?;
    if el >= Duration::from_secs(10) {
        return Err(format!("runtime {} >= 10s", secs(el)));
    }
    Ok(format!("{} identities x 10000 cases within 1e-9, {}", out.len(), secs(el)))
}

fn criterion_2() -> Verdict {
    let out = props("manifold", 1000, Some(&["matvec_matches_tangent_form"]))?;
    if out.len() != 1 {
        return Err("matvec_matches_tangent_form missing".into());
    }
    all_passed(&out)?;
    Ok("mobius_matvec(W, x) = exp0(W log0 x) within 1e-8 on 1000 cases".into())
}

fn pinned_tolerance(o: &GradOutcome) -> f64 {
    match o.module {
        "tensor-autodiff" | "manifold" => 1e-6,
        "hyperlayers" | "temporal-prior" => 1e-4,
        _ => 1e-3,
    }
}

fn criterion_3() -> Verdict {
    let t0 = Instant::now();
    let out = run_gradchecks(None, None).map_err(|e| e.to_string())?;
    let el = t0.elapsed();
    for o in &out {
        if o.tol > pinned_tolerance(o) {
            return Err(format!("{}/{} registered at {:e}, above {:e}", o.module, o.name, o.tol, pinned_tolerance(o)));
        }
        if !o.passed() {
            let detail = match &o.report {
                Ok(r) => format!("max rel error {:e}", r.max_rel_error),
                Err(e) => e.to_string(),
            };
            return Err(format!("{}/{} failed: {detail}", o.module, o.name));
        }
    }
    for required in ["hyperbolic_linear", "hyper_gelu", "hyper_adaln", "hyper_attention", "hyper_ffn", "hpo_forward", "hmo_forward", "total_loss_end_to_end"] {
        if !out.iter().any(|o| o.name == required) {
            return Err(format!("registry lacks {required}"));
        }
    }
    if el >= Duration::from_secs(120) {
        return Err(format!("runtime {} >= 2 min", secs(el)));
    }
    Ok(format!("{} cases passed, {}", out.len(), secs(el)))
}

fn toy_setup(cfg: &PipelineConfig) -> (MeshTopology, Tensor, hymesh_core::synth::SyntheticScene) {
    let topo = MeshTopology::sphere_grid(cfg.n_coarse, cfg.n_fine).expect("toy topology");
    let tpl = sphere_template(cfg.n_coarse, cfg.template_radius_m).expect("toy template");
    let scene = synth_generate(cfg, &topo, &tpl).expect("toy scene");
    (topo, tpl, scene)
}

fn criterion_4() -> Verdict {
    let cfg = PipelineConfig::toy();
    let (topo, tpl, scene) = toy_setup(&cfg);
    let limit = cfg.ball().map_err(|e| e.to_string())?.max_norm();
    let (mut worst, mut violations, mut tensors) = (0.0f64, 0usize, 0usize);
    for seed in 0..100u64 {
        let mut p = build_pipeline(&PipelineConfig { seed, ..cfg.clone() }, &tpl).map_err(|e| e.to_string())?;
        perturb_params(&mut p.store, seed, 0.5);
        let mut g = p.graph();
        g.enable_ball_probe(limit);
        sequence_loss(&mut g, &p, &scene, &topo, &cfg).map_err(|e| format!("seed {seed}: {e}"))?;
        let probe = g.ball_probe().expect("probe enabled");
        worst = worst.max(probe.max_norm);
        violations += probe.violations;
        tensors += probe.tensors_checked;
    }
    if violations > 0 || worst > limit {
        return Err(format!("{violations} violations, max norm {worst} > {limit}"));
    }
    Ok(format!("100 parameterizations, {tensors} ball tensors, max norm {worst:.12} <= {limit}"))
}

fn criterion_5() -> Verdict {
    let checks: [(&str, fn(u64) -> hymesh_core::Result<f64>); 4] = [
        ("attention", attention_core_max_error),
        ("hyperbolic attention", hyperbolic_attention_max_error),
        ("gru", gru_max_error),
        ("losses", losses_max_error),
    ];
    let mut parts = Vec::new();
    for (name, f) in checks {
        let e = f(100).map_err(|e| e.to_string())?;
        if !(e < 1e-9) {
            return Err(format!("{name} differs from its loop oracle by {e:e}"));
        }
        parts.push(format!("{name} {e:.1e}"));
    }
    Ok(format!("100 instances each: {}", parts.join(", ")))
}

fn criterion_6() -> Verdict {
    let cfg = PipelineConfig::toy();
    let (_, _, scene) = toy_setup(&cfg);
    let gt = scene.mesh_frames().map_err(|e| e.to_string())?;
    let r = evaluate_sequence(&gt, &gt, &scene.regressor, cfg.root_joint).map_err(|e| e.to_string())?;
    let pa_max = r.frames.iter().map(|f| f.pa_mpjpe).fold(0.0, f64::max);
    let exact = r.frames.iter().all(|f| f.mpjpe == 0.0 && f.mpvpe == 0.0) && r.accel_error == Some(0.0);
    if !exact || pa_max >= 1e-6 {
        return Err(format!("pred = gt gave nonzero metrics (PA-MPJPE up to {pa_max:e} mm)"));
    }
    all_passed(&props("losses-metrics", 1000, Some(&["similarity_absorbed", "pa_mpjpe_le_mpjpe", "accel_ignores_linear_drift"]))?)?;
    Ok(format!(
        "pred = gt: MPJPE/MPVPE/accel exactly 0, PA-MPJPE {pa_max:.1e} mm; similarity, PA <= MPJPE and drift on 1000 cases"
    ))
}

fn criterion_7() -> Verdict {
    let w = LossWeights::default();
    let plain = weighted_sum([1.0; 5], &w);
    let mut g = Graph::new();
    let one = |g: &mut Graph| g.scalar(1.0);
    let l = EuclideanLosses { mesh: one(&mut g), joint: one(&mut g), normal: one(&mut g), edge: one(&mut g), degenerate_faces: 0 };
    let hy = one(&mut g);
    let total = total_loss(&mut g, &l, hy, &w).map_err(|e| e.to_string())?;
    let graph = g.value(total).item().map_err(|e| e.to_string())?;
    let weights_ok = w.as_array() == [1.0, 1.0, 0.1, 20.0, 1.0];
    if plain != 23.1 || graph != 23.1 || !weights_ok {
        return Err(format!("total {plain} / {graph}, weights {:?}", w.as_array()));
    }
    Ok("weights (1, 1, 0.1, 20, 1) on unit components give exactly 23.1".into())
}

fn criterion_8() -> Verdict {
    let cfg = PipelineConfig::toy();
    let (topo, tpl, scene) = toy_setup(&cfg);
    let t0 = Instant::now();
    let full = train_toy(&cfg, &topo, &scene, &tpl).map_err(|e| e.to_string())?;
    let el = t0.elapsed();
    let abl_cfg = PipelineConfig { disable_hmo: true, ..cfg.clone() };
    let ablated = train_toy(&abl_cfg, &topo, &scene, &tpl).map_err(|e| e.to_string())?;
    // determinism: a shorter run from the same seed retraces the same curve
    let short = train_toy(&PipelineConfig { steps: 100, ..cfg.clone() }, &topo, &scene, &tpl).map_err(|e| e.to_string())?;
    let repeat = train_toy(&PipelineConfig { steps: 100, ..cfg.clone() }, &topo, &scene, &tpl).map_err(|e| e.to_string())?;
    let total = t0.elapsed();
    let summary = format!(
        "{} steps: {:.4} -> {:.6} ({:.2}% reduction) in {}; ablated final {:.6}",
        cfg.steps,
        full.initial_loss(),
        full.final_loss(),
        100.0 * full.reduction(),
        secs(el),
        ablated.final_loss()
    );
    let mut problems = Vec::new();
    if !(full.reduction() >= 0.9) {
        problems.push("reduction below 90%".to_string());
    }
    if el >= Duration::from_secs(300) {
        problems.push(format!("training took {}", secs(el)));
    }
    if !(ablated.final_loss() > full.final_loss()) {
        problems.push("ablation did not end above the full pipeline".into());
    }
    if short.curve.as_slice() != &full.curve[..=100] || short.pipeline.store != repeat.pipeline.store {
        problems.push("training is not deterministic".into());
    }
    if problems.is_empty() {
        Ok(format!("{summary}; deterministic; all four runs {}", secs(total)))
    } else {
        Err(format!("{summary}; {}", problems.join("; ")))
    }
}

fn criterion_9() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();

    // tensor bits, including values that compare equal but differ in bits
    let specials = vec![0.0, -0.0, f64::MIN_POSITIVE / 3.0, f64::MAX, -f64::INFINITY, f64::from_bits(0x7ff8_0000_dead_beef), 1.0 / 3.0];
    let t = Tensor::new([7], specials).map_err(|e| e.to_string())?;
    let p = root.join("t.bin");
    write_tensor(&p, &t).map_err(|e| e.to_string())?;
    let back = read_tensor(&p).map_err(|e| e.to_string())?;
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    if bits(&back) != bits(&t) || back.shape() != t.shape() || encode(&decode(&encode(&t))?) != encode(&t) {
        return Err("tensor round trip changed bits".into());
    }

    // library round trip
    let cfg = PipelineConfig { steps: 25, ..PipelineConfig::toy() };
    let (topo, tpl, scene) = toy_setup(&cfg);
    let trained = train_toy(&cfg, &topo, &scene, &tpl).map_err(|e| e.to_string())?;
    let gt = scene.mesh_frames().map_err(|e| e.to_string())?;
    let csv = |pipe: &hymesh_core::pipeline::Pipeline| -> Result<String, String> {
        let pred = pipe.run_sequence(&scene.pose, &scene.feats, &topo).map_err(|e| e.to_string())?;
        Ok(metrics_csv(&evaluate_sequence(&pred, &gt, &scene.regressor, cfg.root_joint).map_err(|e| e.to_string())?))
    };
    let ckpt = root.join("lib_ckpt");
    save_checkpoint(&ckpt, &cfg, &trained.pipeline.store).map_err(|e| e.to_string())?;
    let loaded = load_pipeline(&ckpt, &cfg, &tpl).map_err(|e| e.to_string())?;
    if loaded.store != trained.pipeline.store || csv(&loaded)? != csv(&trained.pipeline)? {
        return Err("library checkpoint reload changed parameters or metrics".into());
    }

    // command-line round trip
    let cfg_path = root.join("config.json");
    save_config(&cfg_path, &cfg).map_err(|e| e.to_string())?;
    let s = |p: &std::path::Path| p.to_string_lossy().into_owned();
    let out = root.join("run");
    run_args(["hymesh", "train", "--config", &s(&cfg_path), "--out", &s(&out)]).map_err(|e| e.to_string())?;
    let report = root.join("eval.csv");
    let ck = out.join("checkpoint");
    run_args(["hymesh", "eval", "--config", &s(&cfg_path), "--checkpoint", &s(&ck), "--report", &s(&report)])
        .map_err(|e| e.to_string())?;
    let report2 = root.join("eval2.csv");
    run_args(["hymesh", "eval", "--config", &s(&cfg_path), "--checkpoint", &s(&ck), "--report", &s(&report2)])
        .map_err(|e| e.to_string())?;
    let read = |p: &std::path::Path| fs::read(p).map_err(|e| e.to_string());
    let (in_memory, first, second) = (read(&out.join("metrics.csv"))?, read(&report)?, read(&report2)?);
    if in_memory != first || first != second {
        return Err("metric CSVs differ after checkpoint reload".into());
    }
    if in_memory != csv(&trained.pipeline)?.into_bytes() {
        return Err("CLI training differs from library training".into());
    }
    Ok(format!("special-value tensor bits preserved; checkpoint reload reproduces {} bytes of metric CSV", first.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 9] = [
        ("manifold algebra", criterion_1),
        ("formula cross-check", criterion_2),
        ("gradcheck suite", criterion_3),
        ("ball closure", criterion_4),
        ("oracle equivalence", criterion_5),
        ("metric sanity", criterion_6),
        ("loss composition", criterion_7),
        ("toy overfit regression", criterion_8),
        ("serialization", criterion_9),
    ];
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let tag = format!("{}", i + 1);
        if !args.is_empty() && !args.iter().any(|a| a == &tag || name.contains(a.as_str())) {
            continue;
        }
        let verdict = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        match verdict {
            Ok(msg) => println!("PASS criterion {tag} ({name}): {msg}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL criterion {tag} ({name}): {msg}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
