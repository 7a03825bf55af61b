//! Signed-distance auto-decoder: joint training of a decoder and
//! per-geometry latent codes, MAP code inference and grid reconstruction.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ShapeSet, Surface};
use crate::metrics::chamfer;
use crate::nn::{latent_prior, lipschitz_penalty, sdf_mse_batch, Adam, Architecture, Mlp};
use crate::Vec3;

/// Coordinates and distances are divided by this length (mm) before they
/// reach the decoder.
pub const SDF_SCALE: f64 = 310.0;

/// Half width (mm) of the reconstruction box.
pub const GRID_HALF_WIDTH: f64 = 310.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SdfConfig {
    pub code_dim: usize,
    pub width: usize,
    pub depth: usize,
    pub fourier_k: usize,
    pub sigma_ff: f64,
    pub lambda_prior: f64,
    pub lambda_lip: f64,
    pub lr: f64,
    pub epochs: usize,
    pub geometries_per_batch: usize,
    pub points_per_step: usize,
    pub samples_per_geometry: usize,
    pub code_init_std: f64,
    pub seed: u64,
}

impl Default for SdfConfig {
    fn default() -> Self {
        Self {
            code_dim: 16,
            width: 256,
            depth: 5,
            fourier_k: 32,
            sigma_ff: 1.0,
            lambda_prior: 1e-4,
            lambda_lip: 1e-6,
            lr: 1e-3,
            epochs: 200,
            geometries_per_batch: 6,
            points_per_step: 256,
            samples_per_geometry: 20_000,
            code_init_std: 0.01,
            seed: 0,
        }
    }
}

impl SdfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.code_dim == 0 || self.epochs == 0 || self.geometries_per_batch == 0 || self.points_per_step == 0 {
            return Err(Error::Config("sdf: code_dim, epochs and batch sizes must be positive".into()));
        }
        if !(self.lr > 0.0) || self.lambda_prior < 0.0 || self.lambda_lip < 0.0 || self.code_init_std < 0.0 {
            return Err(Error::Config("sdf: lr must be positive and the penalties non-negative".into()));
        }
        self.architecture().validate()
    }

    pub fn architecture(&self) -> Architecture {
        Architecture::sdf(self.code_dim, self.width, self.depth, self.fourier_k, self.sigma_ff, self.seed)
    }
}

/// Points (mm) and their four signed distances for one geometry.
#[derive(Debug, Clone)]
pub struct SdfSamples {
    pub geometry: String,
    pub points: Vec<Vec3>,
    pub sdf: Vec<[f64; 4]>,
}

impl SdfSamples {
    pub fn from_shapes(geometry: &str, shapes: &ShapeSet, n: usize, seed: u64) -> Result<Self> {
        let (points, sdf) = shapes.sample_sdf_training_points(n, GRID_HALF_WIDTH, seed)?;
        Ok(Self { geometry: geometry.into(), points, sdf })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn rows(&self, idx: &[usize]) -> (Array2<f64>, Array2<f64>) {
        let x = Array2::from_shape_fn((idx.len(), 3), |(r, c)| self.points[idx[r]][c] / SDF_SCALE);
        let s = Array2::from_shape_fn((idx.len(), 4), |(r, c)| self.sdf[idx[r]][c] / SDF_SCALE);
        (x, s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodeOrigin {
    Trained,
    Inferred,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    pub geometry: String,
    pub z: Vec<f64>,
    pub origin: CodeOrigin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct AutoDecoderFit {
    pub decoder: Mlp,
    pub codes: Vec<LatentCode>,
    pub history: Vec<EpochRecord>,
    /// Per-geometry SDF mean squared error (mm^2) before and after training.
    pub initial_mse: Vec<f64>,
    pub final_mse: Vec<f64>,
}

fn code_rows(z: &[f64], n: usize) -> Array2<f64> {
    crate::nn::broadcast_rows(z, n)
}

/// Decoded signed distances (mm) at `points`.
pub fn decode(net: &Mlp, z: &[f64], points: &[Vec3]) -> Result<Vec<[f64; 4]>> {
    let mut out = Vec::with_capacity(points.len());
    for chunk in points.chunks(8192) {
        let x = Array2::from_shape_fn((chunk.len(), 3), |(r, c)| chunk[r][c] / SDF_SCALE);
        let y = net.predict(&[code_rows(z, chunk.len()).view(), x.view()])?;
        out.extend(y.rows().into_iter().map(|r| [r[0], r[1], r[2], r[3]].map(|v| v * SDF_SCALE)));
    }
    Ok(out)
}

/// Mean over samples and surfaces of the squared SDF error (mm^2).
pub fn sdf_mse(net: &Mlp, z: &[f64], samples: &SdfSamples) -> Result<f64> {
    let pred = decode(net, z, &samples.points)?;
    let sum: f64 = pred
        .iter()
        .zip(&samples.sdf)
        .map(|(p, t)| p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum();
    Ok(sum / (4 * samples.len()) as f64)
}

/// Jointly fit decoder weights and one code per geometry.
pub fn train_autodecoder(data: &[SdfSamples], cfg: &SdfConfig) -> Result<AutoDecoderFit> {
    cfg.validate()?;
    if data.len() < 2 {
        return Err(Error::input("auto-decoder training needs at least two geometries"));
    }
    if let Some(d) = data.iter().find(|d| d.len() < 1000) {
        return Err(Error::input(format!("geometry {} has {} SDF samples (need >= 1000)", d.geometry, d.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5df);
    let mut net = Mlp::new(cfg.architecture())?;
    let d = cfg.code_dim;
    let init = Normal::new(0.0, cfg.code_init_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut codes: Vec<f64> = (0..data.len() * d).map(|_| init.sample(&mut rng)).collect();
    let mut net_opt = Adam::new(net.n_params(), cfg.lr);
    let mut code_opt = Adam::new(codes.len(), cfg.lr);
    let initial_mse =
        data.iter().enumerate().map(|(g, s)| sdf_mse(&net, &codes[g * d..(g + 1) * d], s)).collect::<Result<Vec<_>>>()?;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=cfg.epochs {
        let last_finite = net.clone();
        order.shuffle(&mut rng);
        let perms: Vec<Vec<usize>> = data
            .iter()
            .map(|s| {
                let mut p: Vec<usize> = (0..s.len()).collect();
                p.shuffle(&mut rng);
                p
            })
            .collect();
        let (mut total, mut steps) = (0.0, 0usize);
        for batch in order.chunks(cfg.geometries_per_batch) {
            let longest = batch.iter().map(|&g| data[g].len()).max().unwrap();
            for start in (0..longest).step_by(cfg.points_per_step) {
                let parts: Vec<(usize, Array2<f64>, Array2<f64>)> = batch
                    .iter()
                    .filter(|&&g| start < data[g].len())
                    .map(|&g| {
                        let end = (start + cfg.points_per_step).min(data[g].len());
                        let (x, s) = data[g].rows(&perms[g][start..end]);
                        (g, x, s)
                    })
                    .collect();
                let views = |f: fn(&(usize, Array2<f64>, Array2<f64>)) -> &Array2<f64>| {
                    let v: Vec<ArrayView2<f64>> = parts.iter().map(|p| f(p).view()).collect();
                    ndarray::concatenate(ndarray::Axis(0), &v).unwrap()
                };
                let x = views(|p| &p.1);
                let s = views(|p| &p.2);
                let z = {
                    let v: Vec<Array2<f64>> =
                        parts.iter().map(|(g, xg, _)| code_rows(&codes[g * d..(g + 1) * d], xg.nrows())).collect();
                    let views: Vec<ArrayView2<f64>> = v.iter().map(|a| a.view()).collect();
                    ndarray::concatenate(ndarray::Axis(0), &views).unwrap()
                };
                let tape = net.forward(&[z.view(), x.view()])?;
                let (data_loss, d_out) = sdf_mse_batch(tape.output().view(), s.view());
                let (mut g_net, d_in) = net.backward(&tape, d_out.view())?;
                let (lip, g_lip) = lipschitz_penalty(&net, cfg.lambda_lip);
                g_net.iter_mut().zip(&g_lip).for_each(|(a, b)| *a += b);
                let mut g_codes = vec![0.0; codes.len()];
                let mut prior_total = 0.0;
                let mut row = 0;
                for (g, xg, _) in &parts {
                    let zg = &codes[g * d..(g + 1) * d];
                    let (prior, g_prior) = latent_prior(zg, cfg.lambda_prior);
                    prior_total += prior;
                    for k in 0..d {
                        let from_data: f64 = (row..row + xg.nrows()).map(|r| d_in[0][[r, k]]).sum();
                        g_codes[g * d + k] = from_data + g_prior[k];
                    }
                    row += xg.nrows();
                }
                net_opt.update(&mut net.params, &g_net)?;
                code_opt.update(&mut codes, &g_codes)?;
                total += data_loss + prior_total + lip;
                steps += 1;
            }
        }
        let loss = total / steps as f64;
        if !loss.is_finite() || !net.is_finite() {
            return Err(Error::Training { epoch, last_finite: Some(Box::new(last_finite)) });
        }
        history.push(EpochRecord { epoch, loss, lr: cfg.lr });
    }
    let final_mse =
        data.iter().enumerate().map(|(g, s)| sdf_mse(&net, &codes[g * d..(g + 1) * d], s)).collect::<Result<Vec<_>>>()?;
    let codes = data
        .iter()
        .enumerate()
        .map(|(g, s)| LatentCode { geometry: s.geometry.clone(), z: codes[g * d..(g + 1) * d].to_vec(), origin: CodeOrigin::Trained })
        .collect();
    Ok(AutoDecoderFit { decoder: net, codes, history, initial_mse, final_mse })
}

/// Empirical mean and covariance of trained codes with a ridge-regularised inverse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub ridge: f64,
    pub precision: Vec<Vec<f64>>,
}

impl LatentStats {
    pub fn from_codes(codes: &[Vec<f64>]) -> Result<Self> {
        if codes.len() < 2 {
            return Err(Error::input("latent statistics need at least two codes"));
        }
        let d = codes[0].len();
        if codes.iter().any(|c| c.len() != d) {
            return Err(Error::input("codes of different dimension"));
        }
        let n = codes.len() as f64;
        let mean: Vec<f64> = (0..d).map(|k| codes.iter().map(|c| c[k]).sum::<f64>() / n).collect();
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for c in codes {
            let v = DVector::from_iterator(d, c.iter().zip(&mean).map(|(a, m)| a - m));
            cov += &v * v.transpose();
        }
        cov /= n - 1.0;
        let ridge = 1e-6 * cov.trace() / d as f64;
        let mut reg = cov.clone();
        for k in 0..d {
            reg[(k, k)] += ridge.max(f64::MIN_POSITIVE);
        }
        let chol = reg.cholesky().ok_or_else(|| Error::Domain("latent covariance is not positive definite".into()))?;
        let precision = chol.inverse();
        let rows = |m: &DMatrix<f64>| (0..d).map(|i| m.row(i).iter().copied().collect()).collect();
        Ok(Self { mean, covariance: rows(&cov), ridge, precision: rows(&precision) })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `(z - mu)^T P (z - mu)` and its gradient.
    pub fn mahalanobis_sq(&self, z: &[f64]) -> (f64, Vec<f64>) {
        let d: Vec<f64> = z.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        let pd: Vec<f64> = self.precision.iter().map(|row| row.iter().zip(&d).map(|(p, x)| p * x).sum()).collect();
        (d.iter().zip(&pd).map(|(a, b)| a * b).sum(), pd.iter().map(|v| 2.0 * v).collect())
    }

    /// Mahalanobis distance between two codes.
    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        let shifted: Vec<f64> = a.iter().zip(b).zip(&self.mean).map(|((x, y), m)| x - y + m).collect();
        self.mahalanobis_sq(&shifted).0.sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub lambda_maha: f64,
    pub iterations: usize,
    pub lr: f64,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self { lambda_maha: 1e-4, iterations: 300, lr: 1e-2 }
    }
}

#[derive(Debug, Clone)]
pub struct Inference {
    pub z: Vec<f64>,
    /// Objective at every iterate, starting from `z = mu`.
    pub trace: Vec<f64>,
    pub best_iteration: usize,
}

impl Inference {
    pub fn best_objective(&self) -> f64 {
        self.trace[self.best_iteration]
    }
}

/// MAP code for observed signed distances with the decoder frozen:
/// mean squared SDF error (scaled units) plus `lambda_maha` times the
/// squared Mahalanobis distance to the training codes. Adam from the mean;
/// the best iterate is returned.
pub fn infer_latent(net: &Mlp, stats: &LatentStats, obs: &SdfSamples, cfg: &InferConfig) -> Result<Inference> {
    if obs.is_empty() {
        return Err(Error::input("latent inference needs at least one observation"));
    }
    if net.arch.input_dims[0] != stats.dim() {
        return Err(Error::input("latent statistics do not match the decoder code size"));
    }
    let idx: Vec<usize> = (0..obs.len()).collect();
    let (x, s) = obs.rows(&idx);
    let mut z = stats.mean.clone();
    let mut opt = Adam::new(z.len(), cfg.lr);
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    let mut best = (f64::INFINITY, 0usize, z.clone());
    for it in 0..=cfg.iterations {
        let tape = net.forward(&[code_rows(&z, obs.len()).view(), x.view()])?;
        let (data, d_out) = sdf_mse_batch(tape.output().view(), s.view());
        let (maha, g_maha) = stats.mahalanobis_sq(&z);
        let obj = data + cfg.lambda_maha * maha;
        trace.push(obj);
        if obj < best.0 {
            best = (obj, it, z.clone());
        }
        if it == cfg.iterations || !obj.is_finite() {
            break;
        }
        let (_, d_in) = net.backward(&tape, d_out.view())?;
        let g: Vec<f64> = (0..z.len()).map(|k| d_in[0].column(k).sum() + cfg.lambda_maha * g_maha[k]).collect();
        opt.update(&mut z, &g)?;
    }
    Ok(Inference { z: best.2, trace, best_iteration: best.1 })
}

/// Nodes of an `n^3` grid on `[-half, half]^3`, x fastest.
pub fn grid_points(n: usize, half: f64) -> Vec<Vec3> {
    let step = if n > 1 { 2.0 * half / (n - 1) as f64 } else { 0.0 };
    let c = |i: usize| -half + i as f64 * step;
    let mut pts = Vec::with_capacity(n * n * n);
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                pts.push(Vec3::new(c(i), c(j), c(k)));
            }
        }
    }
    pts
}

pub fn grid_spacing(n: usize, half: f64) -> f64 {
    2.0 * half / (n.max(2) - 1) as f64
}

/// Four SDF volumes (mm) on the grid, one per surface in [`Surface::ALL`] order.
pub fn reconstruct_grid(net: &Mlp, z: &[f64], n: usize, half: f64) -> Result<[Vec<f64>; 4]> {
    let vals = decode(net, z, &grid_points(n, half))?;
    Ok([0, 1, 2, 3].map(|s| vals.iter().map(|v| v[s]).collect()))
}

/// Chamfer distance per surface between the decoded interior (SDF <= 0)
/// and the true interior, both as grid points. An empty decoded interior
/// gives infinity.
pub fn interior_chamfer(net: &Mlp, z: &[f64], shapes: &ShapeSet, n: usize, half: f64) -> Result<[f64; 4]> {
    let pts = grid_points(n, half);
    let vols = reconstruct_grid(net, z, n, half)?;
    let mut out = [0.0; 4];
    for (s, surface) in Surface::ALL.iter().enumerate() {
        let pred: Vec<Vec3> = pts.iter().zip(&vols[s]).filter(|(_, v)| **v <= 0.0).map(|(p, _)| *p).collect();
        let truth: Vec<Vec3> = pts.iter().filter(|p| shapes.implicit_value(*surface, p) < 0.0).copied().collect();
        out[s] = if pred.is_empty() || truth.is_empty() { f64::INFINITY } else { chamfer(&pred, &truth)? };
    }
    Ok(out)
}
