//! Config, topology and checkpoint files.

use std::fs;
use std::path::{Path, PathBuf};

use hymesh_core::config::PipelineConfig;
use hymesh_core::pipeline::{sphere_template, MeshTopology, Pipeline};
use hymesh_core::train::build_pipeline;
use hymesh_core::{ParamKind, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::tensor_io::{read_tensor, write_tensor};

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::format(path, e.to_string()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// Strict JSON config; unknown or missing fields are errors.
pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let cfg: PipelineConfig =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn save_config(path: &Path, cfg: &PipelineConfig) -> Result<()> {
    write_json(path, cfg)
}

/// On-disk topology. `upsample_path` is resolved against the directory of
/// the JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyFile {
    pub n_coarse: usize,
    pub n_fine: usize,
    pub edges: Vec<[usize; 2]>,
    pub faces: Vec<[usize; 3]>,
    pub upsample_path: String,
}

pub fn load_topology(path: &Path) -> Result<MeshTopology> {
    let f: TopologyFile = read_json(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let upsample = read_tensor(&dir.join(&f.upsample_path))?;
    let topo = MeshTopology { n_coarse: f.n_coarse, n_fine: f.n_fine, edges: f.edges, faces: f.faces, upsample };
    topo.validate()?;
    Ok(topo)
}

/// Writes `path` and the upsampler next to it as `<stem>_upsample.bin`.
pub fn save_topology(path: &Path, topo: &MeshTopology) -> Result<()> {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("topology");
    let u_name = format!("{stem}_upsample.bin");
    let dir = path.parent().unwrap_or(Path::new("."));
    write_tensor(&dir.join(&u_name), &topo.upsample)?;
    let f = TopologyFile {
        n_coarse: topo.n_coarse,
        n_fine: topo.n_fine,
        edges: topo.edges.clone(),
        faces: topo.faces.clone(),
        upsample_path: u_name,
    };
    write_json(path, &f)
}

/// Paths in a config are taken relative to `base` unless absolute.
fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Topology named by the config, or the generated sphere grid.
pub fn topology_for(cfg: &PipelineConfig, base: &Path) -> Result<MeshTopology> {
    let topo = match &cfg.topology_path {
        Some(p) => load_topology(&resolve(base, p))?,
        None => MeshTopology::sphere_grid(cfg.n_coarse, cfg.n_fine)?,
    };
    if topo.n_coarse != cfg.n_coarse || topo.n_fine != cfg.n_fine {
        return Err(CliError::Config(format!(
            "topology is {}→{}, config says {}→{}",
            topo.n_coarse, topo.n_fine, cfg.n_coarse, cfg.n_fine
        )));
    }
    Ok(topo)
}

/// Coarse template named by the config (a binary tensor `[n_coarse, 3]`),
/// or the sphere grid of `template_radius_m`.
pub fn template_for(cfg: &PipelineConfig, base: &Path) -> Result<Tensor> {
    let t = match &cfg.template_mesh_path {
        Some(p) => read_tensor(&resolve(base, p))?,
        None => sphere_template(cfg.n_coarse, cfg.template_radius_m)?,
    };
    if t.shape() != [cfg.n_coarse, 3] {
        return Err(CliError::Config(format!("template has shape {:?}, expected [{}, 3]", t.shape(), cfg.n_coarse)));
    }
    Ok(t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    /// `euclidean` or `ball`.
    pub kind: String,
}

/// `manifest.json` of a checkpoint directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: PipelineConfig,
    pub params: Vec<ManifestEntry>,
}

fn kind_name(k: ParamKind) -> &'static str {
    match k {
        ParamKind::Euclidean => "euclidean",
        ParamKind::Ball => "ball",
    }
}

/// Parameter names contain dots; files replace anything outside
/// `[A-Za-z0-9_.-]` and are numbered to stay unique.
fn param_file(i: usize, name: &str) -> String {
    let clean: String =
        name.chars().map(|c| if c.is_ascii_alphanumeric() || "_.-".contains(c) { c } else { '_' }).collect();
    format!("{i:03}_{clean}.bin")
}

pub fn save_checkpoint(dir: &Path, cfg: &PipelineConfig, store: &ParamStore) -> Result<()> {
    create_dir(dir)?;
    let mut params = Vec::with_capacity(store.len());
    for (i, (_, e)) in store.iter().enumerate() {
        let file = param_file(i, &e.name);
        write_tensor(&dir.join(&file), &e.value)?;
        params.push(ManifestEntry { name: e.name.clone(), file, shape: e.value.shape().to_vec(), kind: kind_name(e.kind).into() });
    }
    write_json(&dir.join("manifest.json"), &Manifest { config: cfg.clone(), params })
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let m: Manifest = read_json(&path)?;
    m.config.validate()?;
    Ok(m)
}

/// Parameters of a checkpoint in manifest order.
pub fn load_params(dir: &Path, manifest: &Manifest) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for e in &manifest.params {
        let path = dir.join(&e.file);
        let t = read_tensor(&path)?;
        if t.shape() != e.shape.as_slice() {
            return Err(CliError::format(&path, format!("shape {:?} disagrees with manifest {:?}", t.shape(), e.shape)));
        }
        let kind = match e.kind.as_str() {
            "euclidean" => ParamKind::Euclidean,
            "ball" => ParamKind::Ball,
            other => return Err(CliError::format(&path, format!("unknown parameter kind {other}"))),
        };
        store.add(e.name.clone(), t, kind);
    }
    Ok(store)
}

/// Rebuild the pipeline for `cfg` and load a checkpoint into it.
pub fn load_pipeline(dir: &Path, cfg: &PipelineConfig, template: &Tensor) -> Result<Pipeline> {
    let manifest = load_manifest(dir)?;
    let stored = load_params(dir, &manifest)?;
    let mut p = build_pipeline(cfg, template)?;
    for (_, e) in p.store.iter() {
        let src = stored.find(&e.name).map(|s| stored.get(s).kind);
        if src.is_some_and(|k| k != e.kind) {
            return Err(CliError::Config(format!("parameter {} changed kind", e.name)));
        }
    }
    p.store.load_from(&stored)?;
    Ok(p)
}
