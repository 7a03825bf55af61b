//! P1 finite elements for the lead-field and extracellular-potential problems.
//!
//! Conductivities are used as given in mS/cm with lengths in mm; potentials
//! come out in the resulting solver units and everything downstream is
//! linear in them.

mod sparse;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::mesh::{Region, TetMesh};
use crate::store::{ArrayData, Blob};
use crate::{Mat3, Vec3};

pub use sparse::{solve_pcg_deflated, CgStats, CsrMatrix};

/// Tissue conductivities (mS/cm).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conductivities {
    pub sigma_it: f64,
    pub sigma_if: f64,
    pub sigma_et: f64,
    pub sigma_ef: f64,
    pub sigma_0: f64,
}

impl Default for Conductivities {
    fn default() -> Self {
        Self { sigma_it: 0.3, sigma_if: 3.0, sigma_et: 1.2, sigma_ef: 3.0, sigma_0: 0.6 }
    }
}

impl Conductivities {
    pub fn validate(&self) -> Result<()> {
        let all = [self.sigma_it, self.sigma_if, self.sigma_et, self.sigma_ef, self.sigma_0];
        if all.iter().all(|s| s.is_finite() && *s > 0.0) {
            Ok(())
        } else {
            Err(Error::Config("conductivities must be positive".into()))
        }
    }

    /// Intracellular conductivities multiplied by `k` (extracellular unchanged).
    pub fn scale_intracellular(&self, k: f64) -> Self {
        Self { sigma_it: self.sigma_it * k, sigma_if: self.sigma_if * k, ..*self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    /// `G_i` in the heart, zero in the torso.
    Intracellular,
    /// `G_i + G_e` in the heart, `sigma_0 I` in the torso.
    Bulk,
    /// `sigma_0 I` everywhere.
    Torso,
}

fn transverse(t: f64, f: f64, fib: &Vec3) -> Mat3 {
    Mat3::identity() * t + fib * fib.transpose() * (f - t)
}

pub fn conductivity_tensor(cond: &Conductivities, region: Region, fiber: &Vec3, kind: TensorKind) -> Result<Mat3> {
    if kind == TensorKind::Torso {
        return Ok(Mat3::identity() * cond.sigma_0);
    }
    if region == Region::Torso {
        return Ok(match kind {
            TensorKind::Intracellular => Mat3::zeros(),
            _ => Mat3::identity() * cond.sigma_0,
        });
    }
    if (fiber.norm() - 1.0).abs() > 1e-6 {
        return Err(Error::input(format!("fiber {fiber:?} is not a unit vector")));
    }
    let gi = transverse(cond.sigma_it, cond.sigma_if, fiber);
    Ok(match kind {
        TensorKind::Intracellular => gi,
        _ => gi + transverse(cond.sigma_et, cond.sigma_ef, fiber),
    })
}

/// Global stiffness `K = sum vol * B^T G B` with the given tensor kind.
pub fn assemble_stiffness(mesh: &TetMesh, cond: &Conductivities, kind: TensorKind) -> Result<CsrMatrix> {
    let mut k = CsrMatrix::pattern(mesh.n_nodes(), &mesh.tets);
    for e in 0..mesh.n_tets() {
        let g = conductivity_tensor(cond, mesh.region[e], &mesh.fibers[e], kind)?;
        let b = &mesh.grad[e];
        let local = b.transpose() * g * b * mesh.volume[e];
        let local = (local + local.transpose()) * 0.5;
        let t = &mesh.tets[e];
        for i in 0..4 {
            for j in 0..4 {
                k.add(t[i], t[j], local[(i, j)]);
            }
        }
    }
    Ok(k)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSettings {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self { tol: 1e-9, max_iter: 20_000 }
    }
}

/// Lead field of one electrode.
#[derive(Debug, Clone)]
pub struct LeadField {
    pub electrode: usize,
    pub z: Vec<f64>,
    /// Element gradients on the heart elements, in `mesh.heart_tets` order.
    pub grad_heart: Vec<Vec3>,
    pub residual: f64,
    pub iterations: usize,
    pub tolerance: f64,
    /// Area-weighted boundary mean of `z` relative to its largest magnitude.
    pub zero_mean_residual: f64,
}

/// Area-weighted boundary mean of a nodal field.
pub fn boundary_mean(mesh: &TetMesh, v: &[f64]) -> f64 {
    let w: f64 = mesh.boundary_weight.iter().sum();
    mesh.boundary_weight.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / w
}

fn shift_to_zero_boundary_mean(mesh: &TetMesh, v: &mut [f64]) -> f64 {
    let m = boundary_mean(mesh, v);
    v.iter_mut().for_each(|x| *x -= m);
    let scale = v.iter().fold(0.0f64, |a, x| a.max(x.abs())).max(f64::MIN_POSITIVE);
    boundary_mean(mesh, v).abs() / scale
}

/// Unit load at the electrode node minus the area-lumped uniform sink.
/// The last boundary entry absorbs rounding so that the entries sum to zero.
pub fn leadfield_rhs(mesh: &TetMesh, electrode: usize) -> Result<Vec<f64>> {
    if electrode >= mesh.n_nodes() || !mesh.node_is_boundary[electrode] {
        return Err(Error::input(format!("electrode node {electrode} is not a boundary node")));
    }
    let area: f64 = mesh.boundary_weight.iter().sum();
    let mut b: Vec<f64> = mesh.boundary_weight.iter().map(|w| -w / area).collect();
    b[electrode] += 1.0;
    let last = (0..mesh.n_nodes()).rev().find(|&n| mesh.node_is_boundary[n]).unwrap();
    let before: f64 = b[..last].iter().sum();
    b[last] = -before;
    Ok(b)
}

pub fn heart_gradients(mesh: &TetMesh, z: &[f64]) -> Vec<Vec3> {
    mesh.heart_tets.iter().map(|&e| mesh.element_gradient(e, z)).collect()
}

pub fn solve_leadfield_with(
    mesh: &TetMesh,
    k: &CsrMatrix,
    electrode: usize,
    settings: &SolverSettings,
) -> Result<LeadField> {
    let b = leadfield_rhs(mesh, electrode)?;
    let (mut z, stats) = solve_pcg_deflated(k, &b, settings.tol, settings.max_iter)?;
    let zero_mean_residual = shift_to_zero_boundary_mean(mesh, &mut z);
    let grad_heart = heart_gradients(mesh, &z);
    Ok(LeadField {
        electrode,
        z,
        grad_heart,
        residual: stats.residual,
        iterations: stats.iterations,
        tolerance: settings.tol,
        zero_mean_residual,
    })
}

pub fn solve_leadfield(
    mesh: &TetMesh,
    cond: &Conductivities,
    electrode: usize,
    settings: &SolverSettings,
) -> Result<LeadField> {
    let k = assemble_stiffness(mesh, cond, TensorKind::Bulk)?;
    solve_leadfield_with(mesh, &k, electrode, settings)
}

/// Lead fields for several electrodes sharing one stiffness matrix.
pub fn solve_leadfields(
    mesh: &TetMesh,
    cond: &Conductivities,
    electrodes: &[usize],
    settings: &SolverSettings,
) -> Result<Vec<LeadField>> {
    let k = assemble_stiffness(mesh, cond, TensorKind::Bulk)?;
    electrodes
        .par_iter()
        .map(|&e| solve_leadfield_with(mesh, &k, e, settings))
        .collect()
}

/// Weak-form load of the transmembrane source, `-sum vol B^T G_i B Vm`.
pub fn snapshot_load(mesh: &TetMesh, cond: &Conductivities, vm_heart: &[f64]) -> Result<Vec<f64>> {
    if vm_heart.len() != mesh.heart_nodes.len() {
        return Err(Error::input(format!(
            "Vm has {} values but the mesh has {} heart nodes",
            vm_heart.len(),
            mesh.heart_nodes.len()
        )));
    }
    let mut g = vec![0.0; mesh.n_nodes()];
    for &e in &mesh.heart_tets {
        let t = &mesh.tets[e];
        let gi = conductivity_tensor(cond, Region::Heart, &mesh.fibers[e], TensorKind::Intracellular)?;
        let vm = nalgebra::Vector4::from_iterator(t.iter().map(|&n| vm_heart[mesh.heart_index[n]]));
        let b = &mesh.grad[e];
        let flux = gi * (b * vm) * mesh.volume[e];
        let load = b.transpose() * flux;
        for i in 0..4 {
            g[t[i]] -= load[i];
        }
    }
    Ok(g)
}

/// Extracellular potential for one transmembrane snapshot, zero boundary mean.
pub fn solve_extracellular_snapshot(
    mesh: &TetMesh,
    cond: &Conductivities,
    vm_heart: &[f64],
    settings: &SolverSettings,
) -> Result<Vec<f64>> {
    let k = assemble_stiffness(mesh, cond, TensorKind::Bulk)?;
    solve_extracellular_with(mesh, &k, cond, vm_heart, settings)
}

pub fn solve_extracellular_with(
    mesh: &TetMesh,
    k: &CsrMatrix,
    cond: &Conductivities,
    vm_heart: &[f64],
    settings: &SolverSettings,
) -> Result<Vec<f64>> {
    let g = snapshot_load(mesh, cond, vm_heart)?;
    let (mut phi, _) = solve_pcg_deflated(k, &g, settings.tol, settings.max_iter)?;
    shift_to_zero_boundary_mean(mesh, &mut phi);
    Ok(phi)
}

impl LeadField {
    pub fn save(&self, path: &Path, label: &str, units: &str) -> Result<()> {
        let meta = json!({
            "kind": "lead_field",
            "electrode_node": self.electrode,
            "electrode_label": label,
            "units": units,
            "tolerance": self.tolerance,
            "residual": self.residual,
            "iterations": self.iterations,
            "zero_mean_residual": self.zero_mean_residual,
            "grad_heart_order": "mesh heart elements in ascending element index",
        });
        Blob::new(meta)
            .with("z", &[self.z.len()], ArrayData::F64(self.z.clone()))
            .with(
                "grad_heart",
                &[self.grad_heart.len(), 3],
                ArrayData::F64(self.grad_heart.iter().flat_map(|g| [g.x, g.y, g.z]).collect()),
            )
            .write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let blob = Blob::read(path)?;
        let m = &blob.meta;
        let g = blob.f64s("grad_heart")?;
        Ok(Self {
            electrode: m["electrode_node"].as_u64().unwrap_or(0) as usize,
            z: blob.f64s("z")?,
            grad_heart: g.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect(),
            residual: m["residual"].as_f64().unwrap_or(f64::NAN),
            iterations: m["iterations"].as_u64().unwrap_or(0) as usize,
            tolerance: m["tolerance"].as_f64().unwrap_or(f64::NAN),
            zero_mean_residual: m["zero_mean_residual"].as_f64().unwrap_or(f64::NAN),
        })
    }
}
