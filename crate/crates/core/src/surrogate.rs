//! Geometry-conditioned surrogate of the lead-field gradient:
//! `(x, electrode, code) -> grad Z`.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ecg::{GradientField, Provider};
use crate::error::{Error, Result};
use crate::geometry::{ElectrodeSet, ShapeSet, Surface, TorsoFrame};
use crate::mesh::TetMesh;
use crate::nn::{broadcast_rows, mse_cos_batch, Adam, Architecture, Mlp, COS_EPS};
use crate::store::{self, ArrayData, Blob};
use crate::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodeEncoding {
    Pca,
    Sdf,
}

impl CodeEncoding {
    pub const ALL: [CodeEncoding; 2] = [CodeEncoding::Pca, CodeEncoding::Sdf];

    pub fn name(self) -> &'static str {
        match self {
            CodeEncoding::Pca => "pca",
            CodeEncoding::Sdf => "sdf",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingPolicy {
    pub n_points: usize,
    pub near_fraction: f64,
    pub band_mm: f64,
}

impl Default for SamplingPolicy {
    fn default() -> Self {
        Self { n_points: 4096, near_fraction: 0.8, band_mm: 10.0 }
    }
}

impl SamplingPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.n_points == 0 || !(0.0..=1.0).contains(&self.near_fraction) || !(self.band_mm > 0.0) {
            return Err(Error::Config("sampling policy needs n_points > 0, fraction in [0,1], band > 0".into()));
        }
        Ok(())
    }
}

/// Distance (mm) to the nearer of the torso surface and the epicardium.
pub fn interface_distance(shapes: &ShapeSet, x: &Vec3) -> Result<f64> {
    Ok(shapes.signed_distance(Surface::Torso, x)?.abs().min(shapes.signed_distance(Surface::Epi, x)?.abs()))
}

/// Sample points inside the mesh: `near_fraction` of them within `band_mm`
/// of the torso surface or the epicardium (half each), the rest uniformly
/// in the torso outside that band. Returns the points and the number of
/// candidates rejected because they fell outside the mesh.
pub fn sample_points(
    shapes: &ShapeSet,
    mesh: &TetMesh,
    policy: &SamplingPolicy,
    seed: u64,
) -> Result<(Vec<(Vec3, usize)>, usize)> {
    policy.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_near = (policy.n_points as f64 * policy.near_fraction).round() as usize;
    let mut pts = Vec::with_capacity(policy.n_points);
    let mut rejected = 0usize;
    let budget = 1000 * policy.n_points;
    let mut tries = 0;
    while pts.len() < policy.n_points {
        tries += 1;
        if tries > budget {
            return Err(Error::Geometry("could not place sample points inside the mesh".into()));
        }
        let x = if pts.len() < n_near {
            let surface = if rng.random::<bool>() { Surface::Torso } else { Surface::Epi };
            let cloud = shapes.cloud(surface);
            let p = cloud[rng.random_range(0..cloud.len())];
            let dir = loop {
                let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                let n = v.norm();
                if n > 1e-3 && n <= 1.0 {
                    break v / n;
                }
            };
            p + dir * policy.band_mm * rng.random::<f64>()
        } else {
            let (lo, hi) = shapes.torso_bounds();
            let x = crate::geometry::uniform_in_box(&mut rng, &lo, &hi);
            if !shapes.is_inside_torso(&x) || interface_distance(shapes, &x)? <= policy.band_mm {
                continue;
            }
            x
        };
        match mesh.locate_point(&x) {
            Some((e, _)) if shapes.is_inside_torso(&x) => pts.push((x, e)),
            _ => rejected += 1,
        }
    }
    Ok((pts, rejected))
}

/// Everything needed to build the training records of one geometry.
pub struct DatasetSource<'a> {
    pub geometry: String,
    pub shapes: &'a ShapeSet,
    pub mesh: &'a TetMesh,
    pub electrodes: &'a ElectrodeSet,
    /// Nodal lead field per electrode.
    pub leadfields: Vec<Vec<f64>>,
    pub code: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeometrySamples {
    pub geometry: String,
    pub code: Vec<f64>,
    pub points: Vec<Vec3>,
    pub points_norm: Vec<Vec3>,
    pub electrode_labels: Vec<String>,
    pub electrode_norm: Vec<Vec3>,
    /// `targets[j][k]`: gradient for electrode `j` at point `k`.
    pub targets: Vec<Vec<Vec3>>,
    pub resampled: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub encoding: CodeEncoding,
    pub policy: SamplingPolicy,
    pub seed: u64,
    pub geometries: Vec<GeometrySamples>,
}

impl Dataset {
    pub fn code_dim(&self) -> usize {
        self.geometries.first().map_or(0, |g| g.code.len())
    }

    pub fn n_records(&self) -> usize {
        self.geometries.iter().map(|g| g.points.len() * g.electrode_labels.len()).sum()
    }

    /// Header plus one float32 record per (geometry, electrode, point):
    /// `x_norm[3], electrode_norm[3], code[d], target[3]`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let d = self.code_dim();
        let width = 9 + d;
        let mut rec = Vec::with_capacity(self.n_records() * width);
        let mut gid = Vec::with_capacity(self.n_records());
        let mut eid = Vec::with_capacity(self.n_records());
        for (g, s) in self.geometries.iter().enumerate() {
            for (j, e) in s.electrode_norm.iter().enumerate() {
                for (k, x) in s.points_norm.iter().enumerate() {
                    rec.extend(x.iter().chain(e.iter()).chain(&s.code).chain(s.targets[j][k].iter()).map(|&v| v as f32));
                    gid.push(g as u32);
                    eid.push(j as u32);
                }
            }
        }
        let mut columns: Vec<String> = ["x_norm", "y_norm", "z_norm", "electrode_x", "electrode_y", "electrode_z"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        columns.extend((0..d).map(|k| format!("code_{k}")));
        columns.extend(["grad_x", "grad_y", "grad_z"].map(String::from));
        let meta = serde_json::json!({
            "format": "lfk-surrogate-dataset",
            "encoding": self.encoding,
            "policy": self.policy,
            "seed": self.seed,
            "units": { "x": "normalized torso frame", "target": "lead-field gradient, solver units per mm" },
            "record_layout": {
                "dtype": "f32 little-endian", "columns": columns,
                "order": "geometry, then electrode, then point",
                "index_arrays": ["geometry_index", "electrode_index"],
            },
            "geometries": self.geometries.iter().map(|g| serde_json::json!({
                "id": g.geometry, "n_points": g.points.len(), "electrodes": g.electrode_labels,
                "points_mm": g.points.iter().map(|p| [p.x, p.y, p.z]).collect::<Vec<_>>(),
                "resampled": g.resampled,
            })).collect::<Vec<_>>(),
        });
        let n = gid.len();
        Blob::new(meta)
            .with("records", &[n, width], ArrayData::F32(rec))
            .with("geometry_index", &[n], ArrayData::U32(gid))
            .with("electrode_index", &[n], ArrayData::U32(eid))
            .write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let blob = Blob::read(path)?;
        let fmt = |reason: &str| Error::Format { path: path.to_path_buf(), reason: reason.into() };
        let m = &blob.meta;
        let encoding: CodeEncoding = serde_json::from_value(m["encoding"].clone()).map_err(|_| fmt("encoding"))?;
        let policy: SamplingPolicy = serde_json::from_value(m["policy"].clone()).map_err(|_| fmt("policy"))?;
        let seed = m["seed"].as_u64().ok_or_else(|| fmt("seed"))?;
        let shape = blob.shape("records")?.to_vec();
        let rec = blob.f64s("records")?;
        let gid = blob.u32s("geometry_index")?;
        let eid = blob.u32s("electrode_index")?;
        let width = shape[1];
        let d = width - 9;
        let metas = m["geometries"].as_array().ok_or_else(|| fmt("geometries"))?;
        let mut geometries: Vec<GeometrySamples> = metas
            .iter()
            .map(|g| {
                let labels: Vec<String> = serde_json::from_value(g["electrodes"].clone()).map_err(|_| fmt("electrodes"))?;
                let pts: Vec<[f64; 3]> = serde_json::from_value(g["points_mm"].clone()).map_err(|_| fmt("points_mm"))?;
                Ok(GeometrySamples {
                    geometry: g["id"].as_str().ok_or_else(|| fmt("id"))?.to_string(),
                    code: vec![],
                    points: pts.into_iter().map(Vec3::from).collect(),
                    points_norm: vec![],
                    electrode_norm: vec![Vec3::zeros(); labels.len()],
                    targets: vec![vec![]; labels.len()],
                    electrode_labels: labels,
                    resampled: g["resampled"].as_u64().unwrap_or(0) as usize,
                })
            })
            .collect::<Result<_>>()?;
        for (r, row) in rec.chunks_exact(width).enumerate() {
            let g = geometries.get_mut(gid[r] as usize).ok_or_else(|| fmt("geometry index"))?;
            let j = eid[r] as usize;
            if j >= g.targets.len() {
                return Err(fmt("electrode index"));
            }
            if j == 0 {
                g.points_norm.push(Vec3::new(row[0], row[1], row[2]));
            }
            if g.code.is_empty() {
                g.code = row[6..6 + d].to_vec();
            }
            g.electrode_norm[j] = Vec3::new(row[3], row[4], row[5]);
            g.targets[j].push(Vec3::new(row[6 + d], row[7 + d], row[8 + d]));
        }
        Ok(Self { encoding, policy, seed, geometries })
    }
}

/// Sample points per geometry (shared by all its electrodes) and read the
/// element-constant FEM gradients at their containing elements.
pub fn build_dataset(sources: &[DatasetSource], policy: &SamplingPolicy, encoding: CodeEncoding, seed: u64) -> Result<Dataset> {
    policy.validate()?;
    if let Some(s) = sources.iter().find(|s| s.code.len() != sources[0].code.len()) {
        return Err(Error::input(format!("geometry {} has a code of a different size", s.geometry)));
    }
    let geometries = sources
        .par_iter()
        .enumerate()
        .map(|(g, src)| {
            if src.leadfields.len() != src.electrodes.len() {
                return Err(Error::input(format!("geometry {}: lead fields do not match electrodes", src.geometry)));
            }
            let frame = src.shapes.torso_frame();
            let (pts, resampled) = sample_points(src.shapes, src.mesh, policy, seed.wrapping_add(1000 * g as u64 + 17))?;
            let targets = src
                .leadfields
                .iter()
                .map(|z| pts.iter().map(|(_, e)| src.mesh.element_gradient(*e, z)).collect())
                .collect();
            Ok(GeometrySamples {
                geometry: src.geometry.clone(),
                code: src.code.clone(),
                points_norm: pts.iter().map(|(x, _)| frame.normalize(x)).collect(),
                points: pts.into_iter().map(|(x, _)| x).collect(),
                electrode_labels: src.electrodes.labels.clone(),
                electrode_norm: (0..src.electrodes.len()).map(|j| src.electrodes.normalized(j)).collect(),
                targets,
                resampled,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { encoding, policy: *policy, seed, geometries })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateConfig {
    pub width: usize,
    pub depth: usize,
    pub fourier_k: usize,
    pub sigma_ff: f64,
    pub lambda_cos: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Records drawn per epoch; `0` means every record once.
    pub samples_per_epoch: usize,
    pub seed: u64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            width: 256,
            depth: 5,
            fourier_k: 32,
            sigma_ff: 1.0,
            lambda_cos: 0.1,
            lr: 1e-3,
            epochs: 100,
            batch_size: 512,
            samples_per_epoch: 0,
            seed: 0,
        }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) || self.lambda_cos < 0.0 {
            return Err(Error::Config("surrogate: epochs, batch_size, lr must be positive, lambda_cos >= 0".into()));
        }
        Architecture::leadfield(1, self.width, self.depth, self.fourier_k, self.sigma_ff, self.seed).validate()
    }

    /// Learning rate used during `epoch` (1-based): halved after half the budget.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch > self.epochs / 2 {
            0.5 * self.lr
        } else {
            self.lr
        }
    }
}

/// Input standardisation and output compression stored beside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateMeta {
    pub encoding: CodeEncoding,
    pub code_mean: Vec<f64>,
    pub code_std: Vec<f64>,
    /// Targets are divided by this before compression.
    pub target_scale: f64,
    pub lambda_cos: f64,
    pub target_units: String,
}

impl SurrogateMeta {
    pub fn standardize(&self, code: &[f64]) -> Vec<f64> {
        code.iter().zip(self.code_mean.iter().zip(&self.code_std)).map(|(c, (m, s))| (c - m) / s).collect()
    }

    /// `t / s` rescaled so that its norm becomes `asinh(|t| / s)`.
    pub fn compress(&self, t: &Vec3) -> Vec3 {
        let u = t / self.target_scale;
        let n = u.norm();
        if n == 0.0 {
            u
        } else {
            u * (n.asinh() / n)
        }
    }

    pub fn decompress(&self, c: &Vec3) -> Vec3 {
        let n = c.norm().min(60.0);
        if n == 0.0 {
            Vec3::zeros()
        } else {
            c.normalize() * n.sinh() * self.target_scale
        }
    }
}

#[derive(Debug, Clone)]
pub struct Surrogate {
    pub net: Mlp,
    pub meta: SurrogateMeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct SurrogateFit {
    pub model: Surrogate,
    pub history: Vec<EpochRecord>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

pub fn train_surrogate(data: &Dataset, cfg: &SurrogateConfig) -> Result<SurrogateFit> {
    cfg.validate()?;
    let d = data.code_dim();
    if data.n_records() == 0 || d == 0 {
        return Err(Error::input("surrogate training needs a nonempty dataset with codes"));
    }
    if data.geometries.iter().any(|g| g.code.len() != d) {
        return Err(Error::input("inconsistent code dimension in dataset"));
    }
    let ng = data.geometries.len() as f64;
    let code_mean: Vec<f64> = (0..d).map(|k| data.geometries.iter().map(|g| g.code[k]).sum::<f64>() / ng).collect();
    let code_std: Vec<f64> = (0..d)
        .map(|k| {
            let v = data.geometries.iter().map(|g| (g.code[k] - code_mean[k]).powi(2)).sum::<f64>() / ng;
            if v > 1e-24 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let mags: Vec<f64> = data.geometries.iter().flat_map(|g| g.targets.iter().flatten().map(|t| t.norm())).collect();
    let target_scale = median(mags).max(f64::MIN_POSITIVE);
    let meta = SurrogateMeta {
        encoding: data.encoding,
        code_mean,
        code_std,
        target_scale,
        lambda_cos: cfg.lambda_cos,
        target_units: "lead-field gradient, solver units per mm".into(),
    };
    let codes: Vec<Vec<f64>> = data.geometries.iter().map(|g| meta.standardize(&g.code)).collect();
    let compressed: Vec<Vec<Vec<Vec3>>> = data
        .geometries
        .iter()
        .map(|g| g.targets.iter().map(|t| t.iter().map(|v| meta.compress(v)).collect()).collect())
        .collect();
    let mut index: Vec<(u32, u32, u32)> = Vec::with_capacity(data.n_records());
    for (g, s) in data.geometries.iter().enumerate() {
        for j in 0..s.electrode_labels.len() {
            for k in 0..s.points.len() {
                index.push((g as u32, j as u32, k as u32));
            }
        }
    }
    let mut net = Mlp::new(Architecture::leadfield(d, cfg.width, cfg.depth, cfg.fourier_k, cfg.sigma_ff, cfg.seed))?;
    let mut opt = Adam::new(net.n_params(), cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1f);
    let per_epoch = if cfg.samples_per_epoch == 0 { index.len() } else { cfg.samples_per_epoch.min(index.len()) };
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let last_finite = net.clone();
        opt.lr = cfg.lr_at(epoch);
        index.shuffle(&mut rng);
        let (mut total, mut steps) = (0.0, 0usize);
        for batch in index[..per_epoch].chunks(cfg.batch_size) {
            let b = batch.len();
            let mut x = Array2::zeros((b, 3));
            let mut c = Array2::zeros((b, d));
            let mut e = Array2::zeros((b, 3));
            let mut t = Array2::zeros((b, 3));
            for (r, &(g, j, k)) in batch.iter().enumerate() {
                let s = &data.geometries[g as usize];
                let (g, j, k) = (g as usize, j as usize, k as usize);
                for a in 0..3 {
                    x[[r, a]] = s.points_norm[k][a];
                    e[[r, a]] = s.electrode_norm[j][a];
                    t[[r, a]] = compressed[g][j][k][a];
                }
                for a in 0..d {
                    c[[r, a]] = codes[g][a];
                }
            }
            let tape = net.forward(&[x.view(), c.view(), e.view()])?;
            let (loss, d_out) = mse_cos_batch(tape.output().view(), t.view(), cfg.lambda_cos, COS_EPS);
            let (grad, _) = net.backward(&tape, d_out.view())?;
            opt.update(&mut net.params, &grad)?;
            total += loss;
            steps += 1;
        }
        let loss = total / steps as f64;
        if !loss.is_finite() || !net.is_finite() {
            return Err(Error::Training { epoch, last_finite: Some(Box::new(last_finite)) });
        }
        history.push(EpochRecord { epoch, loss, lr: opt.lr });
    }
    Ok(SurrogateFit { model: Surrogate { net, meta }, history })
}

impl Surrogate {
    /// Gradients (solver units) at physical points `x` for one electrode and one geometry code.
    pub fn predict_grad(&self, frame: &TorsoFrame, x: &[Vec3], electrode_norm: &Vec3, code: &[f64]) -> Result<Vec<Vec3>> {
        let d = self.net.arch.input_dims[1];
        if code.len() != d {
            return Err(Error::input(format!("code has {} entries, the surrogate expects {d}", code.len())));
        }
        let z = self.meta.standardize(code);
        let mut out = Vec::with_capacity(x.len());
        for chunk in x.chunks(8192) {
            let n = chunk.len();
            let xn = Array2::from_shape_fn((n, 3), |(r, a)| frame.normalize(&chunk[r])[a]);
            let y = self.net.predict(&[
                xn.view(),
                broadcast_rows(&z, n).view(),
                broadcast_rows(electrode_norm.as_slice(), n).view(),
            ])?;
            out.extend(y.rows().into_iter().map(|r| self.meta.decompress(&Vec3::new(r[0], r[1], r[2]))));
        }
        Ok(out)
    }

    pub fn save(&self, weights: &Path) -> Result<()> {
        self.net.save(weights)?;
        store::write_json(&weights.with_extension("json"), &self.meta)
    }

    pub fn load(weights: &Path) -> Result<Self> {
        let net = Mlp::load(weights)?;
        let meta: SurrogateMeta = store::read_json(&weights.with_extension("json"))?;
        if meta.code_mean.len() != net.arch.input_dims[1] || meta.code_std.len() != meta.code_mean.len() {
            return Err(Error::Format { path: weights.to_path_buf(), reason: "metadata does not match the network".into() });
        }
        Ok(Self { net, meta })
    }
}

/// Surrogate gradients at every heart element centroid, for every electrode.
pub fn surrogate_gradient_field(
    model: &Surrogate,
    mesh: &TetMesh,
    frame: &TorsoFrame,
    electrodes: &ElectrodeSet,
    code: &[f64],
) -> Result<GradientField> {
    let centroids: Vec<Vec3> = mesh.heart_tets.iter().map(|&e| mesh.centroid(e)).collect();
    let grads = (0..electrodes.len())
        .map(|j| model.predict_grad(frame, &centroids, &electrodes.normalized(j), code))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradientField { provider: Provider::Surrogate, labels: electrodes.labels.clone(), grads })
}
