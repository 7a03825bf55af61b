//! Stage-gated pipeline over one output directory.
//!
//! Each stage reads the artifacts of earlier stages and fails with
//! [`Error::MissingArtifact`] naming the producing stage when they are absent.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;
use crate::ecg::{
    assemble_leads, ecg_integral, pseudo_gradient_field, pseudo_leadfield_gradient, EcgTrace, GradientField, LeadConfig,
    Provider,
};
use crate::eikonal::{pacing_protocols, solve_eikonal, ActivationMap, Protocol};
use crate::error::{Error, Result};
use crate::fem::{assemble_stiffness, solve_leadfield_with, LeadField, TensorKind};
use crate::geometry::{place_electrodes, sample_geometry, ElectrodeMode, ElectrodeSet, GeometryFile, ShapeSet, STANDARD9};
use crate::mesh::{build_mesh, TetMesh};
use crate::metrics::{ecg_rel_l2_stacked, in_heart_band, mean, ErrorReport, ErrorSample, Region};
use crate::nn::Mlp;
use crate::plot::{line_panels, Panel, Series};
use crate::sdf::{
    grid_spacing, infer_latent, interior_chamfer, train_autodecoder, CodeOrigin, LatentCode, LatentStats, SdfSamples,
    GRID_HALF_WIDTH,
};
use crate::store::{read_json, require, write_json, write_text};
use crate::surrogate::{
    build_dataset, interface_distance, sample_points, surrogate_gradient_field, train_surrogate, CodeEncoding,
    DatasetSource, Surrogate,
};
use crate::Vec3;

pub const LEADFIELD_UNITS: &str = "solver units: conductivity mS/cm, length mm, unit current";

pub const STAGE_GEOMETRIES: &str = "gen-geometries";
pub const STAGE_LEADFIELDS: &str = "gen-leadfields";
pub const STAGE_SDF: &str = "train-sdf";
pub const STAGE_INFER: &str = "infer-latents";
pub const STAGE_LF: &str = "train-lf";
pub const STAGE_ECG: &str = "simulate-ecg";

/// Paths of every artifact under the run directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn split(&self) -> PathBuf {
        self.root.join("split.json")
    }

    pub fn geometry(&self, id: &str) -> PathBuf {
        self.root.join("geometries").join(format!("{id}.json"))
    }

    pub fn mesh(&self, id: &str) -> PathBuf {
        self.root.join("meshes").join(format!("{id}.bin"))
    }

    pub fn leadfield_dir(&self, id: &str) -> PathBuf {
        self.root.join("leadfields").join(id)
    }

    pub fn leadfield(&self, id: &str, label: &str) -> PathBuf {
        self.leadfield_dir(id).join(format!("{label}.bin"))
    }

    pub fn leadfield_report(&self) -> PathBuf {
        self.root.join("leadfields").join("report.json")
    }

    pub fn sdf_dir(&self) -> PathBuf {
        self.root.join("sdf")
    }

    pub fn surrogate_dir(&self, enc: CodeEncoding) -> PathBuf {
        self.root.join("surrogate").join(enc.name())
    }

    pub fn surrogate_weights(&self, enc: CodeEncoding) -> PathBuf {
        self.surrogate_dir(enc).join("weights.bin")
    }

    pub fn access_manifest(&self) -> PathBuf {
        self.root.join("surrogate").join("access_manifest.json")
    }

    pub fn ecg_dir(&self, id: &str, protocol: Protocol) -> PathBuf {
        self.root.join("ecg").join(id).join(protocol.name())
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }
}

pub fn geometry_id(i: usize) -> String {
    format!("g{i:03}")
}

fn sub_seed(seed: u64, stage: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stage.wrapping_mul(1_000_003)).wrapping_add(i as u64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub seed: u64,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl Split {
    pub fn validate(&self) -> Result<()> {
        if self.train.is_empty() || self.test.is_empty() {
            return Err(Error::Validation("split needs training and test geometries".into()));
        }
        let mut all: Vec<&String> = self.train.iter().chain(&self.test).collect();
        all.sort();
        if all.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Validation("train and test geometry ids overlap or repeat".into()));
        }
        Ok(())
    }

    pub fn load(layout: &Layout) -> Result<Self> {
        let s: Split = read_json(&require(layout.split(), STAGE_GEOMETRIES)?)?;
        s.validate()?;
        Ok(s)
    }

    pub fn is_test(&self, id: &str) -> bool {
        self.test.iter().any(|t| t == id)
    }

    pub fn all(&self) -> impl Iterator<Item = &String> {
        self.train.iter().chain(&self.test)
    }
}

/// A geometry document with its analytic shapes.
pub struct Geometry {
    pub id: String,
    pub file: GeometryFile,
    pub shapes: ShapeSet,
}

impl Geometry {
    pub fn electrodes(&self) -> &ElectrodeSet {
        &self.file.electrodes
    }

    pub fn electrode_positions(&self) -> Vec<Vec3> {
        (0..self.electrodes().len()).map(|j| self.electrodes().position(j)).collect()
    }
}

pub fn load_geometry(layout: &Layout, id: &str) -> Result<Geometry> {
    let file: GeometryFile = read_json(&require(layout.geometry(id), STAGE_GEOMETRIES)?)?;
    let shapes = ShapeSet::new(file.params)?;
    Ok(Geometry { id: id.to_string(), file, shapes })
}

pub fn load_mesh(layout: &Layout, id: &str) -> Result<TetMesh> {
    TetMesh::load(&require(layout.mesh(id), STAGE_GEOMETRIES)?)
}

fn snapshot_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    write_json(&dir.join("resolved_config.json"), &cfg.resolved())
}

fn loss_outputs(dir: &Path, title: &str, rows: &[(usize, f64, f64)]) -> Result<()> {
    let mut csv = String::from("epoch,loss,lr\n");
    for (e, l, r) in rows {
        let _ = writeln!(csv, "{e},{l:e},{r:e}");
    }
    write_text(&dir.join("loss.csv"), &csv)?;
    let y: Vec<f64> = rows.iter().map(|r| r.1.max(f64::MIN_POSITIVE).log10()).collect();
    let svg = line_panels(title, &[Panel { title: "log10 loss", series: vec![Series { label: "loss", y: &y }] }], 1.0, 1.0, 1);
    write_text(&dir.join("loss.svg"), &svg)
}

// ---------------------------------------------------------------- geometries

/// Sample, validate, place electrodes on and mesh every geometry, then write the split.
pub fn gen_geometries(cfg: &RunConfig) -> Result<Split> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.paths.out);
    let g = &cfg.geometries;
    let n = g.n_train + g.n_test;
    let params = sample_geometry(cfg.seed, n)?;
    params
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let id = geometry_id(i);
            let shapes = ShapeSet::new(*p)?;
            shapes.check_containment(g.containment_samples, sub_seed(cfg.seed, 1, i))?;
            let electrodes = place_electrodes(&shapes, ElectrodeMode::Merged(g.n_uniform_electrodes))?;
            write_json(&layout.geometry(&id), &GeometryFile::new(i, &shapes, electrodes))?;
            build_mesh(&shapes, cfg.mesh.h)?.save(&layout.mesh(&id))
        })
        .collect::<Result<Vec<()>>>()?;
    let ids: Vec<String> = (0..n).map(geometry_id).collect();
    let split = Split { seed: cfg.seed, train: ids[..g.n_train].to_vec(), test: ids[g.n_train..].to_vec() };
    split.validate()?;
    write_json(&layout.split(), &split)?;
    snapshot_config(cfg, &layout.root)?;
    Ok(split)
}

// ---------------------------------------------------------------- lead fields

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveRecord {
    pub electrode: String,
    pub node: usize,
    pub seconds: f64,
    pub residual: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeometrySolves {
    pub geometry: String,
    pub n_nodes: usize,
    pub n_tets: usize,
    pub n_heart_tets: usize,
    pub assembly_seconds: f64,
    pub solves: Vec<SolveRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LeadfieldReport {
    pub tolerance: f64,
    pub n_solves: usize,
    pub mean_solve_seconds: f64,
    pub max_residual: f64,
    pub geometries: Vec<GeometrySolves>,
    pub failures: Vec<String>,
}

/// Solve and store the lead field of every electrode of every geometry.
/// Failed solves are collected; the first one is returned after the report is written.
pub fn gen_leadfields(cfg: &RunConfig) -> Result<LeadfieldReport> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.paths.out);
    let split = Split::load(&layout)?;
    let ids: Vec<String> = split.all().cloned().collect();
    let first_error: Mutex<Option<Error>> = Mutex::new(None);
    let failures = Mutex::new(Vec::new());
    let fail = |msg: String, e: Error| {
        failures.lock().unwrap().push(msg);
        first_error.lock().unwrap().get_or_insert(e);
    };
    let per_geometry: Vec<Option<GeometrySolves>> = ids
        .par_iter()
        .map(|id| -> Result<Option<GeometrySolves>> {
            let g = load_geometry(&layout, id)?;
            let mesh = load_mesh(&layout, id)?;
            let t = Instant::now();
            let k = match assemble_stiffness(&mesh, &cfg.conductivities, TensorKind::Bulk) {
                Ok(k) => k,
                Err(e) => {
                    fail(format!("{id}: assembly: {e}"), e);
                    return Ok(None);
                }
            };
            let assembly_seconds = t.elapsed().as_secs_f64();
            let mut solves = Vec::new();
            for (j, label) in g.electrodes().labels.iter().enumerate() {
                let Some(node) = mesh.nearest_boundary_node(&g.electrodes().position(j)) else {
                    fail(format!("{id}/{label}: no boundary node"), Error::Geometry("mesh has no boundary".into()));
                    continue;
                };
                let t = Instant::now();
                match solve_leadfield_with(&mesh, &k, node, &cfg.solver) {
                    Ok(lf) => {
                        let seconds = t.elapsed().as_secs_f64();
                        lf.save(&layout.leadfield(id, label), label, LEADFIELD_UNITS)?;
                        solves.push(SolveRecord {
                            electrode: label.clone(),
                            node,
                            seconds,
                            residual: lf.residual,
                            iterations: lf.iterations,
                        });
                    }
                    Err(e) => fail(format!("{id}/{label}: {e}"), e),
                }
            }
            Ok(Some(GeometrySolves {
                geometry: id.clone(),
                n_nodes: mesh.n_nodes(),
                n_tets: mesh.n_tets(),
                n_heart_tets: mesh.heart_tets.len(),
                assembly_seconds,
                solves,
            }))
        })
        .collect::<Result<_>>()?;
    let geometries: Vec<GeometrySolves> = per_geometry.into_iter().flatten().collect();
    let times: Vec<f64> = geometries.iter().flat_map(|g| g.solves.iter().map(|s| s.seconds)).collect();
    let report = LeadfieldReport {
        tolerance: cfg.solver.tol,
        n_solves: times.len(),
        mean_solve_seconds: mean(&times),
        max_residual: geometries.iter().flat_map(|g| g.solves.iter().map(|s| s.residual)).fold(0.0, f64::max),
        geometries,
        failures: failures.into_inner().unwrap(),
    };
    write_json(&layout.leadfield_report(), &report)?;
    if let Some(e) = first_error.into_inner().unwrap() {
        return Err(e);
    }
    Ok(report)
}

pub fn load_leadfield(layout: &Layout, id: &str, label: &str) -> Result<LeadField> {
    LeadField::load(&require(layout.leadfield(id, label), STAGE_LEADFIELDS)?)
}

/// Records every lead-field file read by a training stage.
#[derive(Debug, Default)]
pub struct AccessLog {
    files: Mutex<Vec<PathBuf>>,
}

impl AccessLog {
    /// Load a lead field for training; test geometries are refused.
    pub fn training_leadfield(&self, layout: &Layout, split: &Split, id: &str, label: &str) -> Result<LeadField> {
        if split.is_test(id) {
            return Err(Error::Validation(format!("training stage attempted to read test lead field {id}/{label}")));
        }
        let lf = load_leadfield(layout, id, label)?;
        self.files.lock().unwrap().push(layout.leadfield(id, label));
        Ok(lf)
    }

    pub fn files(&self) -> Vec<PathBuf> {
        let mut f = self.files.lock().unwrap().clone();
        f.sort();
        f
    }

    /// Fails if any recorded file lies in a test geometry's lead-field directory.
    pub fn audit(&self, layout: &Layout, split: &Split) -> Result<()> {
        let files = self.files();
        for id in &split.test {
            let dir = layout.leadfield_dir(id);
            if let Some(f) = files.iter().find(|f| f.starts_with(&dir)) {
                return Err(Error::Validation(format!("test lead field read during training: {}", f.display())));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- SDF

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SdfTrainReport {
    pub geometries: Vec<String>,
    pub initial_mse_mm2: Vec<f64>,
    pub final_mse_mm2: Vec<f64>,
    pub epochs: usize,
}

/// Fit the SDF auto-decoder and one code per training geometry.
pub fn train_sdf(cfg: &RunConfig) -> Result<SdfTrainReport> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.paths.out);
    let split = Split::load(&layout)?;
    let data = split
        .train
        .par_iter()
        .enumerate()
        .map(|(i, id)| {
            let g = load_geometry(&layout, id)?;
            SdfSamples::from_shapes(id, &g.shapes, cfg.sdf.samples_per_geometry, sub_seed(cfg.seed, 2, i))
        })
        .collect::<Result<Vec<_>>>()?;
    let fit = train_autodecoder(&data, &cfg.sdf_settings())?;
    let dir = layout.sdf_dir();
    fit.decoder.save(&dir.join("decoder.bin"))?;
    write_json(&dir.join("codes.json"), &fit.codes)?;
    let stats = LatentStats::from_codes(&fit.codes.iter().map(|c| c.z.clone()).collect::<Vec<_>>())?;
    write_json(&dir.join("latent_stats.json"), &stats)?;
    let rows: Vec<(usize, f64, f64)> = fit.history.iter().map(|r| (r.epoch, r.loss, r.lr)).collect();
    loss_outputs(&dir, "SDF auto-decoder loss", &rows)?;
    let report = SdfTrainReport {
        geometries: split.train.clone(),
        initial_mse_mm2: fit.initial_mse,
        final_mse_mm2: fit.final_mse,
        epochs: cfg.sdf.epochs,
    };
    write_json(&dir.join("fit.json"), &report)?;
    snapshot_config(cfg, &dir)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferenceRecord {
    pub geometry: String,
    pub initial_objective: f64,
    pub best_objective: f64,
    pub best_iteration: usize,
}

fn load_decoder(layout: &Layout) -> Result<(Mlp, LatentStats)> {
    let dir = layout.sdf_dir();
    let net = Mlp::load(&require(dir.join("decoder.bin"), STAGE_SDF)?)?;
    let stats: LatentStats = read_json(&require(dir.join("latent_stats.json"), STAGE_SDF)?)?;
    Ok((net, stats))
}

/// MAP latent codes for the test geometries from sampled signed distances.
pub fn infer_latents(cfg: &RunConfig) -> Result<Vec<LatentCode>> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.paths.out);
    let split = Split::load(&layout)?;
    let (net, stats) = load_decoder(&layout)?;
    let results = split
        .test
        .par_iter()
        .enumerate()
        .map(|(i, id)| {
            let g = load_geometry(&layout, id)?;
            let obs = SdfSamples::from_shapes(id, &g.shapes, cfg.evaluation.inference_samples, sub_seed(cfg.seed, 3, i))?;
            let inf = infer_latent(&net, &stats, &obs, &cfg.infer)?;
            let rec = InferenceRecord {
                geometry: id.clone(),
                initial_objective: inf.trace[0],
                best_objective: inf.best_objective(),
                best_iteration: inf.best_iteration,
            };
            Ok((LatentCode { geometry: id.clone(), z: inf.z, origin: CodeOrigin::Inferred }, rec))
        })
        .collect::<Result<Vec<_>>>()?;
    let (codes, records): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let dir = layout.sdf_dir();
    write_json(&dir.join("inferred_codes.json"), &codes)?;
    write_json(&dir.join("inference.json"), &records)?;
    Ok(codes)
}

/// Geometry code for an encoding: generation parameters, or the trained
/// (training split) or inferred (test split) SDF latent.
pub fn geometry_code(layout: &Layout, split: &Split, enc: CodeEncoding, g: &Geometry) -> Result<Vec<f64>> {
    match enc {
        CodeEncoding::Pca => Ok(g.file.params.code()),
        CodeEncoding::Sdf => {
            let (file, stage) = if split.is_test(&g.id) {
                ("inferred_codes.json", STAGE_INFER)
            } else {
                ("codes.json", STAGE_SDF)
            };
            let codes: Vec<LatentCode> = read_json(&require(layout.sdf_dir().join(file), stage)?)?;
            codes
                .into_iter()
                .find(|c| c.geometry == g.id)
                .map(|c| c.z)
                .ok_or_else(|| Error::MissingArtifact { stage: stage.into(), path: layout.sdf_dir().join(file) })
        }
    }
}

// ---------------------------------------------------------------- surrogate

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplingSummary {
    pub geometry: String,
    pub n_points: usize,
    pub n_near: usize,
    pub near_fraction: f64,
    pub resampled: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLfReport {
    pub encoding: CodeEncoding,
    pub n_records: usize,
    pub code_dim: usize,
    pub final_loss: f64,
    pub sampling: Vec<SamplingSummary>,
}

/// Train one lead-field surrogate per requested encoding on the training split.
pub fn train_lf(cfg: &RunConfig, encodings: &[CodeEncoding]) -> Result<Vec<TrainLfReport>> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.paths.out);
    let split = Split::load(&layout)?;
    let access = AccessLog::default();
    let loaded = split
        .train
        .par_iter()
        .map(|id| {
            let g = load_geometry(&layout, id)?;
            let mesh = load_mesh(&layout, id)?;
            let z = g
                .electrodes()
                .labels
                .iter()
                .map(|l| access.training_leadfield(&layout, &split, id, l).map(|lf| lf.z))
                .collect::<Result<Vec<_>>>()?;
            Ok((g, mesh, z))
        })
        .collect::<Result<Vec<_>>>()?;
    access.audit(&layout, &split)?;
    write_json(
        &layout.access_manifest(),
        &json!({
            "stage": STAGE_LF,
            "leadfield_files": access.files(),
            "test_geometries": split.test,
            "test_leadfields_read": 0,
        }),
    )?;
    let mut reports = Vec::new();
    for &enc in encodings {
        let sources = loaded
            .iter()
            .map(|(g, mesh, z)| {
                Ok(DatasetSource {
                    geometry: g.id.clone(),
                    shapes: &g.shapes,
                    mesh,
                    electrodes: g.electrodes(),
                    leadfields: z.clone(),
                    code: geometry_code(&layout, &split, enc, g)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let data = build_dataset(&sources, &cfg.sampling, enc, sub_seed(cfg.seed, 4, 0))?;
        let sampling = data
            .geometries
            .iter()
            .zip(&loaded)
            .map(|(s, (g, _, _))| {
                let n_near = s
                    .points
                    .iter()
                    .map(|x| interface_distance(&g.shapes, x).map(|d| d <= cfg.sampling.band_mm))
                    .collect::<Result<Vec<_>>>()?
                    .into_iter()
                    .filter(|b| *b)
                    .count();
                Ok(SamplingSummary {
                    geometry: s.geometry.clone(),
                    n_points: s.points.len(),
                    n_near,
                    near_fraction: n_near as f64 / s.points.len() as f64,
                    resampled: s.resampled,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let dir = layout.surrogate_dir(enc);
        if cfg.paths.keep_datasets {
            data.save(&dir.join("dataset.bin"))?;
        }
        let fit = train_surrogate(&data, &cfg.surrogate_settings())?;
        fit.model.save(&layout.surrogate_weights(enc))?;
        let rows: Vec<(usize, f64, f64)> = fit.history.iter().map(|r| (r.epoch, r.loss, r.lr)).collect();
        loss_outputs(&dir, &format!("lead-field surrogate loss ({})", enc.name()), &rows)?;
        write_json(&dir.join("dataset_summary.json"), &sampling)?;
        snapshot_config(cfg, &dir)?;
        reports.push(TrainLfReport {
            encoding: enc,
            n_records: data.n_records(),
            code_dim: data.code_dim(),
            final_loss: fit.history.last().map_or(f64::NAN, |r| r.loss),
            sampling,
        });
    }
    Ok(reports)
}

pub fn load_surrogate(layout: &Layout, enc: CodeEncoding) -> Result<Surrogate> {
    Surrogate::load(&require(layout.surrogate_weights(enc), STAGE_LF)?)
}

// ---------------------------------------------------------------- ECG

/// File-name tag of a gradient provider.
pub fn provider_tag(provider: Provider, enc: CodeEncoding) -> String {
    match provider {
        Provider::Surrogate => format!("surrogate-{}", enc.name()),
        p => p.name().to_string(),
    }
}

pub fn activation(cfg: &RunConfig, g: &Geometry, mesh: &TetMesh, protocol: Protocol) -> Result<ActivationMap> {
    let sources = pacing_protocols(&g.shapes, mesh, protocol)?;
    solve_eikonal(mesh, &cfg.velocities, &sources)
}

/// Lead-field gradients on the heart elements from the chosen provider.
pub fn gradient_field(
    layout: &Layout,
    split: &Split,
    cfg: &RunConfig,
    provider: Provider,
    enc: CodeEncoding,
    g: &Geometry,
    mesh: &TetMesh,
) -> Result<GradientField> {
    let labels = g.electrodes().labels.clone();
    match provider {
        Provider::Fem => {
            let grads = labels
                .iter()
                .map(|l| load_leadfield(layout, &g.id, l).map(|lf| lf.grad_heart))
                .collect::<Result<Vec<_>>>()?;
            let field = GradientField { provider, labels, grads };
            field.validate(mesh)?;
            Ok(field)
        }
        Provider::Surrogate => {
            let model = load_surrogate(layout, enc)?;
            let code = geometry_code(layout, split, enc, g)?;
            surrogate_gradient_field(&model, mesh, &g.shapes.torso_frame(), g.electrodes(), &code)
        }
        Provider::Pseudo => pseudo_gradient_field(mesh, &labels, &g.electrode_positions(), cfg.conductivities.sigma_0),
    }
}

fn read_trace(path: &Path) -> Result<EcgTrace> {
    let text = std::fs::read_to_string(path)?;
    EcgTrace::from_csv(&text).map_err(|e| Error::Format { path: path.to_path_buf(), reason: e.to_string() })
}

const OVERLAY_ORDER: [&str; 4] = ["fem", "surrogate-sdf", "surrogate-pca", "pseudo"];

fn write_overlay(dir: &Path, title: &str) -> Result<()> {
    let mut traces = Vec::new();
    for tag in OVERLAY_ORDER {
        let p = dir.join(format!("{tag}_standard12.csv"));
        if p.exists() {
            traces.push((tag, read_trace(&p)?));
        }
    }
    if traces.len() < 2 {
        return Ok(());
    }
    let (t0, dt) = (traces[0].1.t0, traces[0].1.dt);
    let panels: Vec<Panel> = traces[0]
        .1
        .lead_names
        .iter()
        .enumerate()
        .map(|(i, name)| Panel {
            title: name,
            series: traces.iter().map(|(tag, tr)| Series { label: tag, y: &tr.values[i] }).collect(),
        })
        .collect();
    write_text(&dir.join("overlay.svg"), &line_panels(title, &panels, t0, dt, 3))
}

/// Simulate standard 12-lead and unipolar ECGs on the test geometries.
pub fn simulate_ecg(cfg: &RunConfig, provider: Provider, protocol: Protocol, enc: CodeEncoding) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.paths.out);
    let split = Split::load(&layout)?;
    let tag = provider_tag(provider, enc);
    let written = split
        .test
        .par_iter()
        .map(|id| {
            let g = load_geometry(&layout, id)?;
            let mesh = load_mesh(&layout, id)?;
            let act = activation(cfg, &g, &mesh, protocol)?;
            let field = gradient_field(&layout, &split, cfg, provider, enc, &g, &mesh)?;
            let unipolar = ecg_integral(&mesh, &cfg.conductivities, &field, &act, &cfg.action_potential, &cfg.time)?;
            let dir = layout.ecg_dir(id, protocol);
            let mut out = Vec::new();
            for (config, name) in [(LeadConfig::Standard12, "standard12"), (LeadConfig::Unipolar, "unipolar")] {
                let trace = assemble_leads(&unipolar, &field.labels, config, &cfg.time)?;
                let p = dir.join(format!("{tag}_{name}.csv"));
                write_text(&p, &trace.to_csv())?;
                out.push(p);
            }
            write_overlay(&dir, &format!("{id} {}", protocol.name()))?;
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(written.into_iter().flatten().collect())
}

// ---------------------------------------------------------------- evaluation

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TableRow {
    pub model: String,
    pub angular_deg: f64,
    pub angular_ecg_leads_deg: f64,
    pub ecg_rel_l2: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EcgComparison {
    pub geometry: String,
    pub protocol: Protocol,
    pub provider: String,
    pub rel_l2: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChamferRecord {
    pub geometry: String,
    pub origin: CodeOrigin,
    /// Per surface: torso, epicardium, LV, RV (mm).
    pub chamfer_mm: [f64; 4],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Timing {
    pub surrogate_per_lead_seconds: f64,
    pub fem_per_lead_seconds: f64,
    pub n_heart_points: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub table: Vec<TableRow>,
    pub pseudo: TableRow,
    /// Mean angular error (deg) per region name and provider tag.
    pub mean_angular: BTreeMap<String, BTreeMap<String, f64>>,
    pub ecg: Vec<EcgComparison>,
    /// Mean stacked 12-lead relative error per provider tag and protocol.
    pub ecg_mean: BTreeMap<String, BTreeMap<String, f64>>,
    /// Test geometries where the SDF surrogate's ECG error is below the pseudo lead field's.
    pub ecg_wins: usize,
    pub grid_spacing_mm: f64,
    pub chamfer: Vec<ChamferRecord>,
    pub timing: Timing,
    pub sampling: BTreeMap<String, Vec<SamplingSummary>>,
    pub checks: Vec<Check>,
}

impl EvalSummary {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Uniform points in the heart band (within `band` of the epicardium or inside it) that lie in the mesh.
pub fn heart_band_points(g: &Geometry, mesh: &TetMesh, n: usize, band: f64, seed: u64) -> Result<Vec<(Vec3, usize)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = g.shapes.heart_bounds();
    let (lo, hi) = (lo.add_scalar(-band), hi.add_scalar(band));
    let mut out = Vec::with_capacity(n);
    let mut tries = 0usize;
    while out.len() < n {
        tries += 1;
        if tries > 1000 * n {
            return Err(Error::Geometry(format!("{}: could not sample the heart band", g.id)));
        }
        let x = Vec3::new(rng.random_range(lo.x..hi.x), rng.random_range(lo.y..hi.y), rng.random_range(lo.z..hi.z));
        if !in_heart_band(&g.shapes, &x)? || !g.shapes.is_inside_torso(&x) {
            continue;
        }
        if let Some((e, _)) = mesh.locate_point(&x) {
            out.push((x, e));
        }
    }
    Ok(out)
}

struct GeometryErrors {
    /// Indexed by region, then provider tag.
    samples: Vec<BTreeMap<String, Vec<ErrorSample>>>,
    surrogate_seconds: f64,
    n_leads_timed: usize,
    n_heart: usize,
}

fn geometry_errors(
    cfg: &RunConfig,
    layout: &Layout,
    split: &Split,
    models: &[(CodeEncoding, Surrogate)],
    id: &str,
    i: usize,
) -> Result<GeometryErrors> {
    let g = load_geometry(layout, id)?;
    let mesh = load_mesh(layout, id)?;
    let frame = g.shapes.torso_frame();
    let n = cfg.evaluation.points_per_region;
    let policy = crate::surrogate::SamplingPolicy { n_points: n, ..cfg.sampling };
    let (full, _) = sample_points(&g.shapes, &mesh, &policy, sub_seed(cfg.seed, 5, i))?;
    let heart = heart_band_points(&g, &mesh, n, cfg.sampling.band_mm, sub_seed(cfg.seed, 6, i))?;
    let codes = models
        .iter()
        .map(|(enc, _)| geometry_code(layout, split, *enc, &g))
        .collect::<Result<Vec<_>>>()?;
    let mut samples = vec![BTreeMap::<String, Vec<ErrorSample>>::new(), BTreeMap::new()];
    let el = g.electrodes();
    for j in 0..el.len() {
        let label = &el.labels[j];
        let z = load_leadfield(layout, id, label)?.z;
        let e_pos = el.position(j);
        for (r, pts) in [&full, &heart].into_iter().enumerate() {
            let x: Vec<Vec3> = pts.iter().map(|p| p.0).collect();
            let target: Vec<Vec3> = pts.iter().map(|&(_, e)| mesh.element_gradient(e, &z)).collect();
            for ((enc, model), code) in models.iter().zip(&codes) {
                let pred = model.predict_grad(&frame, &x, &el.normalized(j), code)?;
                let bucket = samples[r].entry(provider_tag(Provider::Surrogate, *enc)).or_default();
                bucket.extend(pred.iter().zip(&target).map(|(p, t)| ErrorSample::new(id, label, p, t)));
            }
            let bucket = samples[r].entry("pseudo".into()).or_default();
            for (xi, t) in x.iter().zip(&target) {
                let p = pseudo_leadfield_gradient(&e_pos, xi, cfg.conductivities.sigma_0)?;
                bucket.push(ErrorSample::new(id, label, &p, t));
            }
        }
    }
    // Surrogate inference time per lead on all heart element centroids.
    let centroids: Vec<Vec3> = mesh.heart_tets.iter().map(|&e| mesh.centroid(e)).collect();
    let (enc_idx, model) = models.iter().enumerate().find(|(_, m)| m.0 == CodeEncoding::Sdf).map(|(k, m)| (k, &m.1)).unwrap_or((0, &models[0].1));
    let t = Instant::now();
    for j in 0..el.len() {
        model.predict_grad(&frame, &centroids, &el.normalized(j), &codes[enc_idx])?;
    }
    Ok(GeometryErrors {
        samples,
        surrogate_seconds: t.elapsed().as_secs_f64(),
        n_leads_timed: el.len(),
        n_heart: centroids.len(),
    })
}

const REGIONS: [Region; 2] = [Region::FullTorso, Region::Heart10mm];

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check { name: name.into(), passed, detail }
}

/// Error metrics on the test split, summary table, CDFs and acceptance orderings.
pub fn evaluate(cfg: &RunConfig, strict: bool) -> Result<EvalSummary> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.paths.out);
    let split = Split::load(&layout)?;
    let models = CodeEncoding::ALL
        .iter()
        .map(|&enc| Ok((enc, load_surrogate(&layout, enc)?)))
        .collect::<Result<Vec<_>>>()?;
    let lf_report: LeadfieldReport = read_json(&require(layout.leadfield_report(), STAGE_LEADFIELDS)?)?;

    // ECG comparisons first so missing simulations fail before the expensive part.
    let tags: Vec<String> = CodeEncoding::ALL
        .iter()
        .map(|&e| provider_tag(Provider::Surrogate, e))
        .chain(["pseudo".to_string()])
        .collect();
    let mut ecg = Vec::new();
    for id in &split.test {
        for protocol in Protocol::ALL {
            let dir = layout.ecg_dir(id, protocol);
            let reference = read_trace(&require(dir.join("fem_standard12.csv"), STAGE_ECG)?)?;
            for tag in &tags {
                let tr = read_trace(&require(dir.join(format!("{tag}_standard12.csv")), STAGE_ECG)?)?;
                ecg.push(EcgComparison {
                    geometry: id.clone(),
                    protocol,
                    provider: tag.clone(),
                    rel_l2: ecg_rel_l2_stacked(&tr.values, &reference.values, reference.dt)?,
                });
            }
        }
    }
    let mut ecg_mean: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for tag in &tags {
        for protocol in Protocol::ALL {
            let v: Vec<f64> =
                ecg.iter().filter(|c| &c.provider == tag && c.protocol == protocol).map(|c| c.rel_l2).collect();
            ecg_mean.entry(tag.clone()).or_default().insert(protocol.name().into(), mean(&v));
        }
    }
    let per_geometry_ecg = |tag: &str, id: &str| -> f64 {
        mean(&ecg.iter().filter(|c| c.provider == tag && c.geometry == id).map(|c| c.rel_l2).collect::<Vec<_>>())
    };
    let ecg_wins = split
        .test
        .iter()
        .filter(|id| per_geometry_ecg("surrogate-sdf", id) < per_geometry_ecg("pseudo", id))
        .count();

    // Pointwise gradient errors.
    let per_geometry = split
        .test
        .par_iter()
        .enumerate()
        .map(|(i, id)| geometry_errors(cfg, &layout, &split, &models, id, i))
        .collect::<Result<Vec<_>>>()?;
    let dir = layout.eval_dir();
    let mut mean_angular: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    let mut ecg_lead_angular: BTreeMap<String, f64> = BTreeMap::new();
    for (r, region) in REGIONS.iter().enumerate() {
        for tag in &tags {
            let samples: Vec<ErrorSample> =
                per_geometry.iter().flat_map(|g| g.samples[r][tag].iter().cloned()).collect();
            let standard: Vec<f64> =
                samples.iter().filter(|s| STANDARD9.contains(&s.electrode.as_str())).map(|s| s.angular).collect();
            if *region == Region::FullTorso {
                ecg_lead_angular.insert(tag.clone(), mean(&standard));
            }
            let report = ErrorReport::new(*region, samples)?;
            mean_angular.entry(region.name().into()).or_default().insert(tag.clone(), report.overall.mean_angular);
            let base = dir.join(region.name());
            write_json(&base.join(format!("{tag}.json")), &report.to_json(false)?)?;
            write_text(&base.join(format!("{tag}_angular_cdf.csv")), &report.angular_cdf.to_csv(cfg.evaluation.cdf_rows))?;
            write_text(
                &base.join(format!("{tag}_relative_cdf.csv")),
                &report.relative_cdf.to_csv(cfg.evaluation.cdf_rows),
            )?;
        }
    }
    let row = |model: &str, tag: &str| TableRow {
        model: model.into(),
        angular_deg: mean_angular[Region::FullTorso.name()][tag],
        angular_ecg_leads_deg: ecg_lead_angular[tag],
        ecg_rel_l2: mean(&ecg.iter().filter(|c| c.provider == tag).map(|c| c.rel_l2).collect::<Vec<_>>()),
    };
    let table: Vec<TableRow> = CodeEncoding::ALL.iter().map(|&e| row(e.name(), &provider_tag(Provider::Surrogate, e))).collect();
    let pseudo = row("pseudo", "pseudo");

    // Shape reconstruction.
    let (net, _) = load_decoder(&layout)?;
    let mut coded: Vec<LatentCode> = read_json(&require(layout.sdf_dir().join("codes.json"), STAGE_SDF)?)?;
    coded.extend(read_json::<Vec<LatentCode>>(&require(layout.sdf_dir().join("inferred_codes.json"), STAGE_INFER)?)?);
    let n_grid = cfg.evaluation.grid_n;
    let chamfer = coded
        .par_iter()
        .map(|c| {
            let g = load_geometry(&layout, &c.geometry)?;
            Ok(ChamferRecord {
                geometry: c.geometry.clone(),
                origin: c.origin,
                chamfer_mm: interior_chamfer(&net, &c.z, &g.shapes, n_grid, GRID_HALF_WIDTH)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let spacing = grid_spacing(n_grid, GRID_HALF_WIDTH);

    let leads: usize = per_geometry.iter().map(|g| g.n_leads_timed).sum();
    let fem_test: Vec<f64> = lf_report
        .geometries
        .iter()
        .filter(|g| split.is_test(&g.geometry))
        .flat_map(|g| g.solves.iter().map(|s| s.seconds))
        .collect();
    let timing = Timing {
        surrogate_per_lead_seconds: per_geometry.iter().map(|g| g.surrogate_seconds).sum::<f64>() / leads.max(1) as f64,
        fem_per_lead_seconds: mean(&fem_test),
        n_heart_points: per_geometry.iter().map(|g| g.n_heart).sum::<usize>() / per_geometry.len().max(1),
    };

    let mut sampling = BTreeMap::new();
    for enc in CodeEncoding::ALL {
        let p = layout.surrogate_dir(enc).join("dataset_summary.json");
        sampling.insert(enc.name().to_string(), read_json::<Vec<SamplingSummary>>(&require(p, STAGE_LF)?)?);
    }

    let e = &cfg.evaluation;
    let heart = &mean_angular[Region::Heart10mm.name()];
    let sdf_tag = "surrogate-sdf";
    let min_wins = e.min_ecg_wins.min(split.test.len());
    let mut checks = vec![check(
        "heart-region angular error (sdf surrogate)",
        heart[sdf_tag] < e.max_heart_angular_deg,
        format!("{:.2} deg < {}", heart[sdf_tag], e.max_heart_angular_deg),
    )];
    for protocol in Protocol::ALL {
        let v = ecg_mean[sdf_tag][protocol.name()];
        checks.push(check(
            &format!("ECG relative error, {}", protocol.name()),
            v < e.max_ecg_rel_l2,
            format!("{v:.4} < {}", e.max_ecg_rel_l2),
        ));
    }
    checks.push(check(
        "surrogate ECG beats pseudo lead field",
        ecg_wins >= min_wins,
        format!("{ecg_wins} of {} geometries (need {min_wins})", split.test.len()),
    ));
    checks.push(check(
        "sdf encoding not worse than pca (heart region)",
        heart[sdf_tag] <= heart["surrogate-pca"],
        format!("{:.2} <= {:.2} deg", heart[sdf_tag], heart["surrogate-pca"]),
    ));
    checks.push(check(
        "surrogate heart-region angular error below pseudo",
        heart[sdf_tag] < heart["pseudo"],
        format!("{:.2} < {:.2} deg", heart[sdf_tag], heart["pseudo"]),
    ));

    let summary = EvalSummary {
        table,
        pseudo,
        mean_angular,
        ecg,
        ecg_mean,
        ecg_wins,
        grid_spacing_mm: spacing,
        chamfer,
        timing,
        sampling,
        checks,
    };
    let mut csv = String::from("model,angular_deg,angular_ecg_leads_deg,ecg_rel_l2\n");
    for r in summary.table.iter().chain([&summary.pseudo]) {
        let _ = writeln!(csv, "{},{:.4},{:.4},{:.6}", r.model, r.angular_deg, r.angular_ecg_leads_deg, r.ecg_rel_l2);
    }
    write_text(&dir.join("table.csv"), &csv)?;
    write_json(&dir.join("report.json"), &summary)?;
    snapshot_config(cfg, &dir)?;
    if strict {
        let failed: Vec<String> =
            summary.checks.iter().filter(|c| !c.passed).map(|c| format!("{} ({})", c.name, c.detail)).collect();
        if !failed.is_empty() {
            return Err(Error::Validation(format!("acceptance orderings violated: {}", failed.join("; "))));
        }
    }
    Ok(summary)
}
