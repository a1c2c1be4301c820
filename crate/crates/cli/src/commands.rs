//! Subcommand implementations. Each returns the text to print on success.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use hymesh_core::checks::{run_gradchecks, run_propchecks};
use hymesh_core::config::PipelineConfig;
use hymesh_core::metrics::evaluate_sequence;
use hymesh_core::synth::{synth_generate, SyntheticScene};
use hymesh_core::train::train_toy;
use hymesh_core::Tensor;
use serde_json::json;

use crate::error::{CliError, Result};
use crate::files::{
    create_dir, load_config, load_manifest, load_pipeline, save_checkpoint, save_config, save_topology, template_for,
    topology_for,
};
use crate::report::{loss_curve_csv, metrics_csv, obj};
use crate::tensor_io::{read_tensor, write_tensor};

#[derive(Debug, Parser)]
#[command(name = "hymesh", version, about = "Hyperbolic mesh recovery toy pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene and write its tensors.
    Synth {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to the config's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Overfit the synthetic scene; writes a checkpoint and CSVs.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-frame metrics of a checkpoint (or of a prediction tensor).
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, required_unless_present = "pred")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        /// `[T, n_fine, 3]` tensor file evaluated instead of a model.
        #[arg(long, conflicts_with = "checkpoint")]
        pred: Option<PathBuf>,
    },
    /// Finite-difference gradient checks from the registry.
    Gradcheck {
        #[arg(long)]
        module: Option<String>,
        /// Overrides every case's tolerance.
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Seeded property checks from the registry.
    Propcheck {
        #[arg(long)]
        module: Option<String>,
        #[arg(long, default_value_t = 1000)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write one predicted frame of a checkpoint as OBJ.
    ExportMesh {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        frame: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parse `argv` (including the program name) and run it.
pub fn run_args<I, S>(argv: I) -> Result<String>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv).map_err(|e| CliError::Usage(e.to_string()))?;
    run(cli.command)
}

pub fn run(cmd: Command) -> Result<String> {
    match cmd {
        Command::Synth { config, out } => synth(&config, out),
        Command::Train { config, out } => train(&config, out),
        Command::Eval { config, checkpoint, report, pred } => eval(&config, checkpoint.as_deref(), &report, pred.as_deref()),
        Command::Gradcheck { module, tol } => gradcheck(module.as_deref(), tol),
        Command::Propcheck { module, cases, seed } => propcheck(module.as_deref(), cases, seed),
        Command::ExportMesh { checkpoint, frame, out } => export_mesh(&checkpoint, frame, &out),
    }
}

fn base_dir(config: &Path) -> &Path {
    config.parent().unwrap_or(Path::new("."))
}

fn out_dir(cfg: &PipelineConfig, out: Option<PathBuf>) -> Result<PathBuf> {
    out.or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
        .ok_or_else(|| CliError::Usage("no --out given and the config has no output_dir".into()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

struct Setup {
    topo: hymesh_core::pipeline::MeshTopology,
    template: Tensor,
    scene: SyntheticScene,
}

fn setup(cfg: &PipelineConfig, base: &Path) -> Result<Setup> {
    let topo = topology_for(cfg, base)?;
    let template = template_for(cfg, base)?;
    let scene = synth_generate(cfg, &topo, &template)?;
    Ok(Setup { topo, template, scene })
}

/// Copy of `cfg` whose file paths no longer depend on the working
/// directory, for embedding in checkpoints.
fn absolute_paths(cfg: &PipelineConfig, base: &Path) -> Result<PipelineConfig> {
    let fix = |p: &Option<String>| -> Result<Option<String>> {
        p.as_ref()
            .map(|p| {
                let full = base.join(p);
                fs::canonicalize(&full).map(|c| c.to_string_lossy().into_owned()).map_err(|e| CliError::io(&full, e))
            })
            .transpose()
    };
    Ok(PipelineConfig {
        topology_path: fix(&cfg.topology_path)?,
        template_mesh_path: fix(&cfg.template_mesh_path)?,
        ..cfg.clone()
    })
}

fn synth(config: &Path, out: Option<PathBuf>) -> Result<String> {
    let cfg = load_config(config)?;
    let dir = out_dir(&cfg, out)?;
    let s = setup(&cfg, base_dir(config))?;
    create_dir(&dir)?;
    save_config(&dir.join("config.json"), &cfg)?;
    write_tensor(&dir.join("pose.bin"), &s.scene.pose)?;
    write_tensor(&dir.join("meshes.bin"), &s.scene.meshes)?;
    write_tensor(&dir.join("feats.bin"), &s.scene.feats)?;
    write_tensor(&dir.join("regressor.bin"), s.scene.regressor.matrix())?;
    write_tensor(&dir.join("template.bin"), &s.template)?;
    save_topology(&dir.join("topology.json"), &s.topo)?;
    for t in 0..s.scene.frames() {
        write_text(&dir.join(format!("gt_{t:03}.obj")), &obj(&s.scene.mesh(t)?, &s.topo.faces))?;
    }
    Ok(json!({
        "status": "ok",
        "command": "synth",
        "frames": s.scene.frames(),
        "joints": cfg.n_joints,
        "n_fine": cfg.n_fine,
        "out": dir.display().to_string(),
    })
    .to_string())
}

fn train(config: &Path, out: Option<PathBuf>) -> Result<String> {
    let cfg = load_config(config)?;
    let dir = out_dir(&cfg, out)?;
    let base = base_dir(config);
    let s = setup(&cfg, base)?;
    let outcome = train_toy(&cfg, &s.topo, &s.scene, &s.template)?;
    create_dir(&dir)?;
    let ckpt = dir.join("checkpoint");
    save_checkpoint(&ckpt, &absolute_paths(&cfg, base)?, &outcome.pipeline.store)?;
    write_text(&dir.join("loss_curve.csv"), &loss_curve_csv(&outcome.curve))?;
    let pred = outcome.pipeline.run_sequence(&s.scene.pose, &s.scene.feats, &s.topo)?;
    let report = evaluate_sequence(&pred, &s.scene.mesh_frames()?, &s.scene.regressor, cfg.root_joint)?;
    write_text(&dir.join("metrics.csv"), &metrics_csv(&report))?;
    Ok(json!({
        "status": "ok",
        "command": "train",
        "steps": cfg.steps,
        "initial_loss": outcome.initial_loss(),
        "final_loss": outcome.final_loss(),
        "reduction": outcome.reduction(),
        "max_ball_param_norm": outcome.pipeline.store.max_ball_param_norm(),
        "checkpoint": ckpt.display().to_string(),
    })
    .to_string())
}

fn eval(config: &Path, checkpoint: Option<&Path>, report: &Path, pred: Option<&Path>) -> Result<String> {
    let cfg = load_config(config)?;
    let s = setup(&cfg, base_dir(config))?;
    let gt = s.scene.mesh_frames()?;
    let pred = match (pred, checkpoint) {
        (Some(p), _) => {
            let t = read_tensor(p)?;
            if t.shape() != s.scene.meshes.shape() {
                return Err(CliError::format(p, format!("expected shape {:?}, got {:?}", s.scene.meshes.shape(), t.shape())));
            }
            (0..t.shape()[0]).map(|k| t.index0(k)).collect::<hymesh_core::Result<Vec<_>>>()?
        }
        (None, Some(c)) => load_pipeline(c, &cfg, &s.template)?.run_sequence(&s.scene.pose, &s.scene.feats, &s.topo)?,
        (None, None) => return Err(CliError::Usage("eval needs --checkpoint or --pred".into())),
    };
    let r = evaluate_sequence(&pred, &gt, &s.scene.regressor, cfg.root_joint)?;
    if let Some(parent) = report.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_text(report, &metrics_csv(&r))?;
    let mean = |f: fn(&hymesh_core::metrics::FrameMetrics) -> f64| r.frames.iter().map(f).sum::<f64>() / r.frames.len() as f64;
    Ok(json!({
        "status": "ok",
        "command": "eval",
        "frames": r.frames.len(),
        "mpjpe_mm": mean(|f| f.mpjpe),
        "pa_mpjpe_mm": mean(|f| f.pa_mpjpe),
        "mpvpe_mm": mean(|f| f.mpvpe),
        "accel_error_mm": r.accel_error,
        "report": report.display().to_string(),
    })
    .to_string())
}

fn gradcheck(module: Option<&str>, tol: Option<f64>) -> Result<String> {
    if let Some(t) = tol {
        if !(t.is_finite() && t > 0.0) {
            return Err(CliError::Usage(format!("--tol must be positive, got {t}")));
        }
    }
    let outcomes = run_gradchecks(module, tol)?;
    let mut text = String::new();
    let mut failed = Vec::new();
    for o in &outcomes {
        let line = match &o.report {
            Ok(r) => format!(
                "{} {} {} max_rel_error={:e} tol={:e} entries={}",
                if o.passed() { "PASS" } else { "FAIL" },
                o.module,
                o.name,
                r.max_rel_error,
                o.tol,
                r.entries.len()
            ),
            Err(e) => format!("FAIL {} {} error={e}", o.module, o.name),
        };
        text.push_str(&line);
        text.push('\n');
        if !o.passed() {
            failed.push(format!("{}/{}", o.module, o.name));
        }
    }
    let summary = json!({ "status": if failed.is_empty() { "ok" } else { "failed" }, "command": "gradcheck",
        "cases": outcomes.len(), "failed": failed });
    text.push_str(&summary.to_string());
    if failed.is_empty() {
        Ok(text)
    } else {
        let message = format!("{} of {} gradient checks failed: {}", failed.len(), outcomes.len(), failed.join(", "));
        Err(CliError::Check { output: text, message })
    }
}

fn propcheck(module: Option<&str>, cases: usize, seed: u64) -> Result<String> {
    if cases == 0 {
        return Err(CliError::Usage("--cases must be at least 1".into()));
    }
    let outcomes = run_propchecks(module, cases, seed)?;
    let mut text = String::new();
    let mut failed = Vec::new();
    for o in &outcomes {
        let ok = o.passed == o.cases;
        text.push_str(&format!("{} {} {} {}/{}", if ok { "PASS" } else { "FAIL" }, o.module, o.name, o.passed, o.cases));
        if let Some(f) = &o.first_failure {
            text.push_str(&format!(" first_failure=\"{f}\""));
        }
        text.push('\n');
        if !ok {
            failed.push(format!("{}/{}", o.module, o.name));
        }
    }
    let summary = json!({ "status": if failed.is_empty() { "ok" } else { "failed" }, "command": "propcheck",
        "properties": outcomes.len(), "cases_per_property": cases, "seed": seed, "failed": failed });
    text.push_str(&summary.to_string());
    if failed.is_empty() {
        Ok(text)
    } else {
        let message = format!("{} of {} properties failed: {}", failed.len(), outcomes.len(), failed.join(", "));
        Err(CliError::Check { output: text, message })
    }
}

fn export_mesh(checkpoint: &Path, frame: usize, out: &Path) -> Result<String> {
    let cfg = load_manifest(checkpoint)?.config;
    let s = setup(&cfg, checkpoint)?;
    if frame >= cfg.t_frames {
        return Err(CliError::Usage(format!("--frame {frame} out of range for {} frames", cfg.t_frames)));
    }
    let pipeline = load_pipeline(checkpoint, &cfg, &s.template)?;
    let pred = pipeline.run_sequence(&s.scene.pose, &s.scene.feats, &s.topo)?;
    write_text(out, &obj(&pred[frame], &s.topo.faces))?;
    Ok(json!({ "status": "ok", "command": "export-mesh", "frame": frame, "vertices": cfg.n_fine,
        "faces": s.topo.faces.len(), "out": out.display().to_string() })
    .to_string())
}
