//! ECG assembly through the reciprocity integral, the pseudo lead field and
//! 12-lead combinations.

use std::fmt::Write as _;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::eikonal::{transmembrane, ActivationMap, ApTemplate};
use crate::error::{Error, Result};
use crate::fem::{conductivity_tensor, Conductivities, TensorKind};
use crate::mesh::{Region, TetMesh};
use crate::{Mat3, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provider {
    Fem,
    Surrogate,
    Pseudo,
}

impl Provider {
    pub fn name(self) -> &'static str {
        match self {
            Provider::Fem => "fem",
            Provider::Surrogate => "surrogate",
            Provider::Pseudo => "pseudo",
        }
    }
}

impl std::str::FromStr for Provider {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fem" => Ok(Provider::Fem),
            "surrogate" => Ok(Provider::Surrogate),
            "pseudo" => Ok(Provider::Pseudo),
            _ => Err(Error::input(format!("unknown provider `{s}` (expected fem, surrogate or pseudo)"))),
        }
    }
}

/// Lead-field gradients at the heart elements, one row per electrode.
#[derive(Debug, Clone)]
pub struct GradientField {
    pub provider: Provider,
    pub labels: Vec<String>,
    /// `grads[j][k]` belongs to electrode `j` and heart element `mesh.heart_tets[k]`.
    pub grads: Vec<Vec<Vec3>>,
}

impl GradientField {
    pub fn validate(&self, mesh: &TetMesh) -> Result<()> {
        if self.labels.len() != self.grads.len() {
            return Err(Error::input("gradient field labels and rows differ in length"));
        }
        for (l, g) in self.labels.iter().zip(&self.grads) {
            if g.len() != mesh.heart_tets.len() {
                return Err(Error::input(format!(
                    "electrode {l}: {} gradients for {} heart elements",
                    g.len(),
                    mesh.heart_tets.len()
                )));
            }
            if g.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
                return Err(Error::input(format!("electrode {l}: non-finite gradient")));
            }
        }
        Ok(())
    }
}

/// Infinite-medium lead field `1 / (4 pi sigma_0 r)`.
pub fn pseudo_leadfield(electrode: &Vec3, x: &Vec3, sigma_0: f64) -> Result<f64> {
    let r = (electrode - x).norm();
    if r == 0.0 {
        return Err(Error::Domain("pseudo lead field is singular at the electrode".into()));
    }
    Ok(1.0 / (4.0 * PI * sigma_0 * r))
}

/// Gradient of the pseudo lead field with respect to `x`; points towards the electrode.
pub fn pseudo_leadfield_gradient(electrode: &Vec3, x: &Vec3, sigma_0: f64) -> Result<Vec3> {
    let d = electrode - x;
    let r = d.norm();
    if r == 0.0 {
        return Err(Error::Domain("pseudo lead field is singular at the electrode".into()));
    }
    Ok(d / (4.0 * PI * sigma_0 * r * r * r))
}

pub fn pseudo_gradient_field(
    mesh: &TetMesh,
    labels: &[String],
    positions: &[Vec3],
    sigma_0: f64,
) -> Result<GradientField> {
    let centroids: Vec<Vec3> = mesh.heart_tets.iter().map(|&e| mesh.centroid(e)).collect();
    let grads = positions
        .iter()
        .map(|p| centroids.iter().map(|x| pseudo_leadfield_gradient(p, x, sigma_0)).collect())
        .collect::<Result<Vec<Vec<Vec3>>>>()?;
    Ok(GradientField { provider: Provider::Pseudo, labels: labels.to_vec(), grads })
}

/// Uniform time grid `t0 + k dt`, `k = 0..n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGrid {
    pub t0: f64,
    pub dt: f64,
    pub n: usize,
}

impl Default for TimeGrid {
    fn default() -> Self {
        Self { t0: 0.0, dt: 1.0, n: 401 }
    }
}

impl TimeGrid {
    pub fn times(&self) -> Vec<f64> {
        (0..self.n).map(|k| self.t0 + k as f64 * self.dt).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n >= 1 && self.dt > 0.0 && self.t0.is_finite() {
            Ok(())
        } else {
            Err(Error::Config("time grid needs n >= 1 and dt > 0".into()))
        }
    }
}

/// Intracellular tensors of the heart elements.
pub fn heart_intracellular(mesh: &TetMesh, cond: &Conductivities) -> Result<Vec<Mat3>> {
    mesh.heart_tets
        .iter()
        .map(|&e| conductivity_tensor(cond, Region::Heart, &mesh.fibers[e], TensorKind::Intracellular))
        .collect()
}

/// Element source densities `vol * G_i grad Vm` on the heart elements.
pub fn source_fluxes(mesh: &TetMesh, gi: &[Mat3], vm_heart: &[f64]) -> Vec<Vec3> {
    mesh.heart_tets
        .iter()
        .zip(gi)
        .map(|(&e, g)| {
            let t = &mesh.tets[e];
            let v = nalgebra::Vector4::from_iterator(t.iter().map(|&n| vm_heart[mesh.heart_index[n]]));
            g * (mesh.grad[e] * v) * mesh.volume[e]
        })
        .collect()
}

/// `phi(e_j, t) = -sum_heart vol (G_i grad Vm) . grad Z_j` for every electrode and time.
pub fn ecg_integral(
    mesh: &TetMesh,
    cond: &Conductivities,
    field: &GradientField,
    act: &ActivationMap,
    template: &ApTemplate,
    grid: &TimeGrid,
) -> Result<Vec<Vec<f64>>> {
    field.validate(mesh)?;
    if act.tau.len() != mesh.heart_nodes.len() {
        return Err(Error::input("activation map does not match the mesh heart nodes"));
    }
    let gi = heart_intracellular(mesh, cond)?;
    let times = grid.times();
    let mut out = vec![vec![0.0; times.len()]; field.grads.len()];
    for (k, &t) in times.iter().enumerate() {
        let vm = transmembrane(act, template, t);
        let flux = source_fluxes(mesh, &gi, &vm);
        for (j, g) in field.grads.iter().enumerate() {
            out[j][k] = -flux.iter().zip(g).map(|(f, z)| f.dot(z)).sum::<f64>();
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LeadConfig {
    Unipolar,
    Standard12,
}

pub const STANDARD12: [&str; 12] = ["I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcgTrace {
    pub t0: f64,
    pub dt: f64,
    pub lead_names: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl EcgTrace {
    pub fn lead(&self, name: &str) -> Option<&[f64]> {
        self.lead_names.iter().position(|l| l == name).map(|i| self.values[i].as_slice())
    }

    pub fn n_times(&self) -> usize {
        self.values.first().map_or(0, |v| v.len())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t");
        for l in &self.lead_names {
            s.push(',');
            s.push_str(l);
        }
        s.push('\n');
        for k in 0..self.n_times() {
            let _ = write!(s, "{}", self.t0 + k as f64 * self.dt);
            for v in &self.values {
                let _ = write!(s, ",{:e}", v[k]);
            }
            s.push('\n');
        }
        s
    }

    /// Parse the output of [`EcgTrace::to_csv`].
    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::input(format!("ECG CSV: {m}"));
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().ok_or_else(|| bad("empty"))?.split(',').collect();
        if header.first() != Some(&"t") || header.len() < 2 {
            return Err(bad("header must be t followed by lead names"));
        }
        let lead_names: Vec<String> = header[1..].iter().map(|s| s.to_string()).collect();
        let mut times = Vec::new();
        let mut values = vec![Vec::new(); lead_names.len()];
        for line in lines.filter(|l| !l.is_empty()) {
            let mut cols = line.split(',').map(|c| c.parse::<f64>().map_err(|_| bad("non-numeric entry")));
            times.push(cols.next().ok_or_else(|| bad("missing time"))??);
            for v in values.iter_mut() {
                v.push(cols.next().ok_or_else(|| bad("short row"))??);
            }
            if cols.next().is_some() {
                return Err(bad("long row"));
            }
        }
        let dt = if times.len() > 1 { times[1] - times[0] } else { 1.0 };
        Ok(Self { t0: times.first().copied().unwrap_or(0.0), dt, lead_names, values })
    }
}

/// Combine unipolar electrode potentials into leads.
pub fn assemble_leads(
    unipolar: &[Vec<f64>],
    labels: &[String],
    config: LeadConfig,
    grid: &TimeGrid,
) -> Result<EcgTrace> {
    if unipolar.is_empty() || unipolar.len() != labels.len() {
        return Err(Error::input("need one potential series per electrode label"));
    }
    let (lead_names, values) = match config {
        LeadConfig::Unipolar => (labels.to_vec(), unipolar.to_vec()),
        LeadConfig::Standard12 => {
            let get = |name: &str| -> Result<&Vec<f64>> {
                labels
                    .iter()
                    .position(|l| l == name)
                    .map(|i| &unipolar[i])
                    .ok_or_else(|| Error::input(format!("electrode {name} required for the 12-lead ECG")))
            };
            let (ra, la, ll) = (get("RA")?, get("LA")?, get("LL")?);
            let n = ra.len();
            let comb = |w: &[(f64, &Vec<f64>)]| -> Vec<f64> {
                (0..n).map(|k| w.iter().map(|(c, v)| c * v[k]).sum()).collect()
            };
            let third = 1.0 / 3.0;
            let mut vals = vec![
                comb(&[(1.0, la), (-1.0, ra)]),
                comb(&[(1.0, ll), (-1.0, ra)]),
                comb(&[(1.0, ll), (-1.0, la)]),
                comb(&[(1.0, ra), (-0.5, la), (-0.5, ll)]),
                comb(&[(1.0, la), (-0.5, ra), (-0.5, ll)]),
                comb(&[(1.0, ll), (-0.5, ra), (-0.5, la)]),
            ];
            for i in 1..=6 {
                let v = get(&format!("V{i}"))?;
                vals.push(comb(&[(1.0, v), (-third, ra), (-third, la), (-third, ll)]));
            }
            (STANDARD12.iter().map(|s| s.to_string()).collect(), vals)
        }
    };
    Ok(EcgTrace { t0: grid.t0, dt: grid.dt, lead_names, values })
}

/// QRS amplitude (max - min) and duration of the contiguous span where
/// `|V|` exceeds 5% of the amplitude, with linearly interpolated crossings.
pub fn qrs_features(trace: &EcgTrace, lead: usize, window: (f64, f64)) -> Result<(f64, f64)> {
    let v = trace.values.get(lead).ok_or_else(|| Error::input(format!("lead {lead} out of range")))?;
    let t_end = trace.t0 + (v.len().saturating_sub(1)) as f64 * trace.dt;
    if window.0 > window.1 || window.0 < trace.t0 - 1e-9 || window.1 > t_end + 1e-9 {
        return Err(Error::input("window outside the trace"));
    }
    let k0 = ((window.0 - trace.t0) / trace.dt).ceil().max(0.0) as usize;
    let k1 = (((window.1 - trace.t0) / trace.dt).floor() as usize).min(v.len() - 1);
    let w = &v[k0..=k1];
    let (lo, hi) = w.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let amplitude = hi - lo;
    if !(amplitude > 0.0) {
        return Ok((0.0, 0.0));
    }
    let thr = 0.05 * amplitude;
    let above: Vec<bool> = w.iter().map(|x| x.abs() > thr).collect();
    let (Some(first), Some(last)) = (above.iter().position(|&a| a), above.iter().rposition(|&a| a)) else {
        return Ok((amplitude, 0.0));
    };
    let t = |k: usize| trace.t0 + (k0 + k) as f64 * trace.dt;
    let cross = |a: usize, b: usize| {
        let (va, vb) = (w[a].abs(), w[b].abs());
        t(a) + (thr - va) / (vb - va) * (t(b) - t(a))
    };
    let start = if first > 0 { cross(first - 1, first) } else { t(0) };
    let end = if last + 1 < w.len() { cross(last, last + 1) } else { t(last) };
    Ok((amplitude, end - start))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eikonal::{solve_eikonal, Source, VelocityModel};
    use crate::mesh::{build_mesh, Ball};

    #[test]
    fn pseudo_closed_form() {
        let e = Vec3::new(100.0, 0.0, 0.0);
        let z = pseudo_leadfield(&e, &Vec3::zeros(), 0.6).unwrap();
        assert!((z - 1.0 / (4.0 * PI * 0.6 * 100.0)).abs() < 1e-18);
        assert!((z - 1.326e-3).abs() < 1e-6);
        let g = pseudo_leadfield_gradient(&e, &Vec3::zeros(), 0.6).unwrap();
        assert!(g.normalize().dot(&Vec3::x()) > 1.0 - 1e-15);
        let z2 = pseudo_leadfield(&(e * 2.0), &Vec3::zeros(), 0.6).unwrap();
        let g2 = pseudo_leadfield_gradient(&(e * 2.0), &Vec3::zeros(), 0.6).unwrap();
        assert!((z / z2 - 2.0).abs() < 1e-12);
        assert!((g.norm() / g2.norm() - 4.0).abs() < 1e-12);
        assert!(pseudo_leadfield_gradient(&e, &e, 0.6).is_err());
    }

    #[test]
    fn pseudo_gradient_is_the_gradient() {
        let e = Vec3::new(30.0, -20.0, 50.0);
        let x = Vec3::new(1.0, 2.0, -3.0);
        let g = pseudo_leadfield_gradient(&e, &x, 0.6).unwrap();
        let h = 1e-4;
        for i in 0..3 {
            let mut d = Vec3::zeros();
            d[i] = h;
            let fd = (pseudo_leadfield(&e, &(x + d), 0.6).unwrap() - pseudo_leadfield(&e, &(x - d), 0.6).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-9 * g.norm());
        }
    }

    fn labels9() -> Vec<String> {
        crate::geometry::STANDARD9.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn lead_identities() {
        let grid = TimeGrid { t0: 0.0, dt: 1.0, n: 20 };
        let uni: Vec<Vec<f64>> = (0..9).map(|j| (0..20).map(|k| ((j * 7 + k * 3) % 11) as f64 - 5.0).collect()).collect();
        let tr = assemble_leads(&uni, &labels9(), LeadConfig::Standard12, &grid).unwrap();
        assert_eq!(tr.lead_names, STANDARD12);
        let l = |n: &str| tr.lead(n).unwrap().to_vec();
        for k in 0..20 {
            assert!((l("I")[k] + l("III")[k] - l("II")[k]).abs() < 1e-12);
            assert!((l("aVR")[k] + l("aVL")[k] + l("aVF")[k]).abs() < 1e-12);
        }
        let flat = vec![vec![3.5; 20]; 9];
        let tr = assemble_leads(&flat, &labels9(), LeadConfig::Standard12, &grid).unwrap();
        assert!(tr.values.iter().flatten().all(|v| v.abs() < 1e-12));
        let uni_tr = assemble_leads(&uni, &labels9(), LeadConfig::Unipolar, &grid).unwrap();
        assert_eq!(uni_tr.values, uni);
        let mut missing = labels9();
        missing[4] = "X".into();
        assert!(assemble_leads(&uni, &missing, LeadConfig::Standard12, &grid).is_err());
    }

    fn trace(values: Vec<f64>) -> EcgTrace {
        EcgTrace { t0: 0.0, dt: 1.0, lead_names: vec!["a".into()], values: vec![values] }
    }

    #[test]
    fn qrs_of_triangle() {
        let tri: Vec<f64> = (0..=120).map(|k| {
            let t = k as f64 - 20.0;
            if (0.0..=80.0).contains(&t) { 1.0 - (t - 40.0).abs() / 40.0 } else { 0.0 }
        }).collect();
        let (a, d) = qrs_features(&trace(tri.clone()), 0, (0.0, 120.0)).unwrap();
        assert!((a - 1.0).abs() < 1e-12);
        assert!((d - 76.0).abs() < 1e-9, "{d}");
        let doubled: Vec<f64> = tri.iter().map(|v| v * 2.0).collect();
        let (a2, d2) = qrs_features(&trace(doubled), 0, (0.0, 120.0)).unwrap();
        assert!((a2 - 2.0).abs() < 1e-12 && (d2 - d).abs() < 1e-9);
        assert_eq!(qrs_features(&trace(vec![0.0; 50]), 0, (0.0, 49.0)).unwrap(), (0.0, 0.0));
        assert!(qrs_features(&trace(vec![0.0; 50]), 0, (0.0, 80.0)).is_err());
    }

    struct Setup {
        mesh: TetMesh,
        act: ActivationMap,
        field: GradientField,
    }

    fn setup() -> Setup {
        let mut ball = Ball::new(Vec3::zeros(), 40.0);
        ball.heart_radius = 16.0;
        ball.fiber = Vec3::new(0.0, 1.0, 1.0).normalize();
        let mesh = build_mesh(&ball, 4.0).unwrap();
        let src = mesh.heart_nodes[0];
        let act = solve_eikonal(&mesh, &VelocityModel::default(), &[Source { node: src, time: 2.0 }]).unwrap();
        let pos = vec![Vec3::new(0.0, 0.0, 45.0), Vec3::new(45.0, 0.0, 0.0)];
        let field = pseudo_gradient_field(&mesh, &["a".into(), "b".into()], &pos, 0.6).unwrap();
        Setup { mesh, act, field }
    }

    #[test]
    fn constant_vm_gives_no_signal() {
        let s = setup();
        let act = ActivationMap { tau: vec![10.0; s.mesh.heart_nodes.len()], sources: vec![] };
        let phi = ecg_integral(&s.mesh, &Conductivities::default(), &s.field, &act, &ApTemplate::default(), &TimeGrid::default())
            .unwrap();
        assert!(phi.iter().flatten().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn linear_in_intracellular_conductivity() {
        let s = setup();
        let grid = TimeGrid { t0: 0.0, dt: 2.0, n: 40 };
        let c = Conductivities::default();
        let a = ecg_integral(&s.mesh, &c, &s.field, &s.act, &ApTemplate::default(), &grid).unwrap();
        let b = ecg_integral(&s.mesh, &c.scale_intracellular(2.0), &s.field, &s.act, &ApTemplate::default(), &grid).unwrap();
        for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
            assert!((2.0 * x - y).abs() <= 1e-12 * x.abs().max(1e-30));
        }
        assert!(a[0].iter().any(|v| v.abs() > 0.0));
    }

    #[test]
    fn time_shift_equivariance() {
        let s = setup();
        let grid = TimeGrid { t0: 0.0, dt: 1.0, n: 60 };
        let c = Conductivities::default();
        let ap = ApTemplate::default();
        let a = ecg_integral(&s.mesh, &c, &s.field, &s.act, &ap, &grid).unwrap();
        let shifted = TimeGrid { t0: 5.0, ..grid };
        let b = ecg_integral(&s.mesh, &c, &s.field, &s.act.shifted(5.0), &ap, &shifted).unwrap();
        for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1e-20));
        }
    }

    #[test]
    fn missing_gradients_rejected() {
        let mut s = setup();
        s.field.grads[1].pop();
        let r = ecg_integral(&s.mesh, &Conductivities::default(), &s.field, &s.act, &ApTemplate::default(), &TimeGrid::default());
        assert!(matches!(r, Err(Error::Input(_))));
    }

    #[test]
    fn csv_has_header_and_rows() {
        let tr = trace(vec![1.0, 2.0, 3.0]);
        let csv = tr.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,a");
        assert_eq!(lines.len(), 4);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let tr = EcgTrace {
            t0: 0.0,
            dt: 1.0,
            lead_names: vec!["I".into(), "V1".into()],
            values: vec![vec![0.1, -1.0 / 3.0, 2.5e-9], vec![1e300, 0.0, -7.25]],
        };
        let back = EcgTrace::from_csv(&tr.to_csv()).unwrap();
        assert_eq!(back, tr);
        assert!(EcgTrace::from_csv("x,a\n0,1\n").is_err());
        assert!(EcgTrace::from_csv("t,a\n0,1,2\n").is_err());
    }
}
