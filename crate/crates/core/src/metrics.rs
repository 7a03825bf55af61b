//! Angular and magnitude errors, Chamfer distance, ECG error and the
//! constant of the ECG error bound.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ecg::{heart_intracellular, source_fluxes, TimeGrid};
use crate::eikonal::{transmembrane, ActivationMap, ApTemplate};
use crate::error::{Error, Result};
use crate::fem::Conductivities;
use crate::geometry::{ShapeSet, Surface};
use crate::mesh::TetMesh;
use crate::spatial::KdTree;
use crate::Vec3;

pub const EPS: f64 = 1e-8;

/// Width of the band around the epicardium in the heart-focused region.
pub const HEART_BAND_MM: f64 = 10.0;

/// Angle in degrees between `a` and `b`. Both are scaled to unit length
/// first and the product of the scaled norms is floored at `eps`, so a zero
/// vector gives 90 degrees and the result does not depend on magnitudes.
pub fn angular_error(a: &Vec3, b: &Vec3, eps: f64) -> f64 {
    let unit = |v: &Vec3| {
        let n = v.norm();
        if n > 0.0 && n.is_finite() {
            v / n
        } else {
            Vec3::zeros()
        }
    };
    let (u, w) = (unit(a), unit(b));
    if u.norm() * w.norm() < eps {
        return 90.0;
    }
    u.cross(&w).norm().atan2(u.dot(&w)).to_degrees()
}

/// `(|a - b|, |a - b| / (|b| + eps))`.
pub fn magnitude_error(a: &Vec3, b: &Vec3, eps: f64) -> (f64, f64) {
    let d = (a - b).norm();
    (d, d / (b.norm() + eps))
}

fn mean_nearest(from: &[Vec3], to: &KdTree) -> f64 {
    from.iter().map(|p| to.nearest(p).map_or(f64::INFINITY, |n| n.1)).sum::<f64>() / from.len() as f64
}

/// Symmetric mean nearest-neighbour distance.
pub fn chamfer(x: &[Vec3], y: &[Vec3]) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::input("Chamfer distance of an empty point set"));
    }
    let tx = KdTree::new(x.to_vec());
    let ty = KdTree::new(y.to_vec());
    Ok(0.5 * (mean_nearest(x, &ty) + mean_nearest(y, &tx)))
}

/// Trapezoidal `int v^2 dt`.
pub fn trapezoid_sq(v: &[f64], dt: f64) -> f64 {
    trapezoid(&v.iter().map(|x| x * x).collect::<Vec<_>>(), dt)
}

pub fn trapezoid(v: &[f64], dt: f64) -> f64 {
    match v.len() {
        0 | 1 => 0.0,
        n => dt * (v[1..n - 1].iter().sum::<f64>() + 0.5 * (v[0] + v[n - 1])),
    }
}

/// `|v_hat - v|_{L2} / |v|_{L2}` with the trapezoidal rule.
pub fn ecg_rel_l2(v_hat: &[f64], v: &[f64], dt: f64) -> Result<f64> {
    if v_hat.len() != v.len() {
        return Err(Error::input("ECG series on different time grids"));
    }
    let den = trapezoid_sq(v, dt);
    if !(den > 0.0) {
        return Err(Error::Domain("relative ECG error undefined for a zero reference".into()));
    }
    let diff: Vec<f64> = v_hat.iter().zip(v).map(|(a, b)| a - b).collect();
    Ok((trapezoid_sq(&diff, dt) / den).sqrt())
}

/// Relative L2 error over all leads jointly: the time integrals of the
/// squared differences and of the squared reference are summed over leads.
pub fn ecg_rel_l2_stacked(v_hat: &[Vec<f64>], v: &[Vec<f64>], dt: f64) -> Result<f64> {
    if v_hat.len() != v.len() || v_hat.iter().zip(v).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::input("ECG traces differ in leads or time grid"));
    }
    let den: f64 = v.iter().map(|x| trapezoid_sq(x, dt)).sum();
    if !(den > 0.0) {
        return Err(Error::Domain("relative ECG error undefined for a zero reference".into()));
    }
    let num: f64 = v_hat
        .iter()
        .zip(v)
        .map(|(a, b)| trapezoid_sq(&a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>(), dt))
        .sum();
    Ok((num / den).sqrt())
}

/// `int_0^T |G_i grad Vm|^2_{L2(heart)} dt`, centroid quadrature in space
/// and the trapezoidal rule in time.
pub fn error_bound_constant(
    mesh: &TetMesh,
    cond: &Conductivities,
    act: &ActivationMap,
    template: &ApTemplate,
    grid: &TimeGrid,
) -> Result<f64> {
    let gi = heart_intracellular(mesh, cond)?;
    let per_t: Vec<f64> = grid
        .times()
        .iter()
        .map(|&t| {
            let vm = transmembrane(act, template, t);
            source_fluxes(mesh, &gi, &vm)
                .iter()
                .zip(&mesh.heart_tets)
                .map(|(f, &e)| f.norm_squared() / mesh.volume[e])
                .sum()
        })
        .collect();
    Ok(trapezoid(&per_t, grid.dt))
}

/// `|a - b|^2_{L2(heart)}` for element-constant fields on the heart elements.
pub fn heart_l2_sq(mesh: &TetMesh, a: &[Vec3], b: &[Vec3]) -> f64 {
    mesh.heart_tets.iter().zip(a.iter().zip(b)).map(|(&e, (x, y))| mesh.volume[e] * (x - y).norm_squared()).sum()
}

/// Linear interpolation between order statistics at position `q (n - 1)`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cdf {
    pub n: usize,
    pub mean: f64,
    /// `(q, value)` pairs in increasing `q`.
    pub quantiles: Vec<(f64, f64)>,
    /// Sorted values, used for the CSV curve.
    #[serde(skip)]
    pub sorted: Vec<f64>,
}

impl Cdf {
    pub fn quantile(&self, q: f64) -> f64 {
        quantile_sorted(&self.sorted, q)
    }

    pub fn median(&self) -> f64 {
        self.quantile(0.5)
    }

    /// `value,fraction` rows of the empirical CDF, at most `max_rows` rows.
    pub fn to_csv(&self, max_rows: usize) -> String {
        let mut s = String::from("value,fraction\n");
        let n = self.sorted.len();
        let rows = n.min(max_rows.max(2));
        for r in 0..rows {
            let k = if rows == 1 { 0 } else { r * (n - 1) / (rows - 1) };
            s.push_str(&format!("{:e},{:.6}\n", self.sorted[k], (k + 1) as f64 / n as f64));
        }
        s
    }
}

/// Empirical CDF; the median and 95th percentile are always reported.
pub fn error_cdf(errors: &[f64], quantiles: &[f64]) -> Result<Cdf> {
    if errors.is_empty() {
        return Err(Error::input("CDF of an empty error set"));
    }
    if errors.iter().any(|e| e.is_nan()) {
        return Err(Error::input("NaN in error set"));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut qs: Vec<f64> = quantiles.iter().copied().chain([0.5, 0.95]).collect();
    qs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    qs.dedup();
    let quantiles = qs.iter().map(|&q| (q, quantile_sorted(&sorted, q))).collect();
    Ok(Cdf { n: sorted.len(), mean: mean(errors), quantiles, sorted })
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    FullTorso,
    Heart10mm,
}

impl Region {
    pub fn name(self) -> &'static str {
        match self {
            Region::FullTorso => "full_torso",
            Region::Heart10mm => "heart_10mm",
        }
    }
}

/// Inside the heart or within 10 mm of its outer surface, measured on the
/// analytic signed distance.
pub fn in_heart_band(shapes: &ShapeSet, x: &Vec3) -> Result<bool> {
    Ok(shapes.signed_distance(Surface::Epi, x)? <= HEART_BAND_MM)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSample {
    pub geometry: String,
    pub electrode: String,
    pub angular: f64,
    pub magnitude: f64,
    pub relative: f64,
}

impl ErrorSample {
    pub fn new(geometry: &str, electrode: &str, pred: &Vec3, target: &Vec3) -> Self {
        let (magnitude, relative) = magnitude_error(pred, target, EPS);
        Self {
            geometry: geometry.into(),
            electrode: electrode.into(),
            angular: angular_error(pred, target, EPS),
            magnitude,
            relative,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n: usize,
    pub mean_angular: f64,
    pub mean_magnitude: f64,
    pub mean_relative: f64,
}

impl Aggregate {
    fn of<'a>(samples: impl Iterator<Item = &'a ErrorSample>) -> Self {
        let (mut n, mut a, mut m, mut r) = (0usize, 0.0, 0.0, 0.0);
        for s in samples {
            n += 1;
            a += s.angular;
            m += s.magnitude;
            r += s.relative;
        }
        let k = n.max(1) as f64;
        Self { n, mean_angular: a / k, mean_magnitude: m / k, mean_relative: r / k }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub region: Region,
    pub overall: Aggregate,
    pub per_electrode: BTreeMap<String, Aggregate>,
    pub per_geometry: BTreeMap<String, Aggregate>,
    pub angular_cdf: Cdf,
    pub relative_cdf: Cdf,
    #[serde(skip)]
    pub samples: Vec<ErrorSample>,
}

impl ErrorReport {
    pub fn new(region: Region, samples: Vec<ErrorSample>) -> Result<Self> {
        let angular: Vec<f64> = samples.iter().map(|s| s.angular).collect();
        let relative: Vec<f64> = samples.iter().map(|s| s.relative).collect();
        let mut per_electrode = BTreeMap::new();
        let mut per_geometry = BTreeMap::new();
        for s in &samples {
            per_electrode.entry(s.electrode.clone()).or_insert(());
            per_geometry.entry(s.geometry.clone()).or_insert(());
        }
        let per_electrode = per_electrode
            .into_keys()
            .map(|k| {
                let a = Aggregate::of(samples.iter().filter(|s| s.electrode == k));
                (k, a)
            })
            .collect();
        let per_geometry = per_geometry
            .into_keys()
            .map(|k| {
                let a = Aggregate::of(samples.iter().filter(|s| s.geometry == k));
                (k, a)
            })
            .collect();
        Ok(Self {
            region,
            overall: Aggregate::of(samples.iter()),
            per_electrode,
            per_geometry,
            angular_cdf: error_cdf(&angular, &[0.05, 0.25, 0.75])?,
            relative_cdf: error_cdf(&relative, &[0.05, 0.25, 0.75])?,
            samples,
        })
    }

    /// JSON report; raw per-point arrays only when asked for.
    pub fn to_json(&self, include_raw: bool) -> Result<serde_json::Value> {
        let mut v = serde_json::to_value(self)?;
        if include_raw {
            v["raw"] = serde_json::json!({
                "geometry": self.samples.iter().map(|s| &s.geometry).collect::<Vec<_>>(),
                "electrode": self.samples.iter().map(|s| &s.electrode).collect::<Vec<_>>(),
                "angular_deg": self.samples.iter().map(|s| s.angular).collect::<Vec<_>>(),
                "magnitude": self.samples.iter().map(|s| s.magnitude).collect::<Vec<_>>(),
                "relative_magnitude": self.samples.iter().map(|s| s.relative).collect::<Vec<_>>(),
            });
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn angular_cases() {
        let a = Vec3::new(1.0, 2.0, 3.0);
        assert!(angular_error(&a, &a, EPS) < 1e-6);
        assert!((angular_error(&Vec3::x(), &Vec3::y(), EPS) - 90.0).abs() < 1e-12);
        assert!((angular_error(&Vec3::x(), &Vec3::new(1.0, 1.0, 0.0), EPS) - 45.0).abs() < 1e-5);
        assert_eq!(angular_error(&Vec3::x(), &-Vec3::x(), EPS), 180.0);
        assert_eq!(angular_error(&Vec3::zeros(), &Vec3::x(), EPS), 90.0);
        // Lead-field gradients in solver units are ~1e-6 in magnitude.
        let small = Vec3::new(2.1e-6, 6.6e-6, 1.05e-5);
        assert_eq!(angular_error(&small, &(small * 0.3), EPS), 0.0);
        let tilt = Vec3::new(1e-7, 0.0, 0.0);
        let b = Vec3::new(0.0, 1e-7, 0.0);
        assert!((angular_error(&tilt, &(tilt + b), EPS) - 45.0).abs() < 1e-9);
    }

    #[test]
    fn magnitude_cases() {
        let b = Vec3::new(0.0, 0.6, 0.8);
        assert_eq!(magnitude_error(&b, &b, EPS), (0.0, 0.0));
        let (a, r) = magnitude_error(&(2.0 * b), &b, EPS);
        assert!((a - 1.0).abs() < 1e-15 && (r - 1.0).abs() < 1e-7);
        assert!(magnitude_error(&b, &Vec3::zeros(), EPS).1.is_finite());
    }

    #[test]
    fn chamfer_cases() {
        let p = vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(-1.0, 0.0, 4.0)];
        assert_eq!(chamfer(&p, &p).unwrap(), 0.0);
        assert_eq!(chamfer(&[Vec3::zeros()], &[Vec3::x()]).unwrap(), 1.0);
        assert!(chamfer(&[], &p).is_err());
    }

    #[test]
    fn ecg_error_cases() {
        let v: Vec<f64> = (0..50).map(|k| (k as f64 * 0.2).sin()).collect();
        assert_eq!(ecg_rel_l2(&v, &v, 1.0).unwrap(), 0.0);
        let s: Vec<f64> = v.iter().map(|x| 1.1 * x).collect();
        assert!((ecg_rel_l2(&s, &v, 1.0).unwrap() - 0.1).abs() < 1e-12);
        let n: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((ecg_rel_l2(&n, &v, 1.0).unwrap() - 2.0).abs() < 1e-12);
        assert!(ecg_rel_l2(&v, &[0.0; 50], 1.0).is_err());
    }

    #[test]
    fn stacked_error_weights_leads_by_energy() {
        let a: Vec<f64> = (0..40).map(|k| (k as f64 * 0.3).sin()).collect();
        let b: Vec<f64> = a.iter().map(|x| 3.0 * x).collect();
        // 10% error on the small lead only: sqrt(0.01 |a|^2 / (|a|^2 + 9 |a|^2))
        let hat = vec![a.iter().map(|x| 1.1 * x).collect(), b.clone()];
        let e = ecg_rel_l2_stacked(&hat, &[a.clone(), b.clone()], 0.5).unwrap();
        assert!((e - (0.01f64 / 10.0).sqrt()).abs() < 1e-12);
        assert!(ecg_rel_l2_stacked(&[a.clone()], &[a, b], 1.0).is_err());
    }

    #[test]
    fn quantile_convention() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        let c = error_cdf(&v, &[]).unwrap();
        assert_eq!(c.median(), 50.5);
        assert!((c.quantile(0.95) - 95.05).abs() < 1e-12);
        assert!(c.quantiles.windows(2).all(|w| w[0].1 <= w[1].1));
        let flat = error_cdf(&[3.0; 7], &[0.1, 0.9]).unwrap();
        assert!(flat.quantiles.iter().all(|q| q.1 == 3.0));
        assert!(error_cdf(&[], &[]).is_err());
    }

    #[test]
    fn report_means_match_raw() {
        let mk = |g: &str, e: &str, p: Vec3, t: Vec3| ErrorSample::new(g, e, &p, &t);
        let s = vec![
            mk("g0", "V1", Vec3::x(), Vec3::y()),
            mk("g0", "V2", Vec3::x(), Vec3::x()),
            mk("g1", "V1", Vec3::new(1.0, 1.0, 0.0), Vec3::x()),
        ];
        let r = ErrorReport::new(Region::Heart10mm, s.clone()).unwrap();
        let m = s.iter().map(|x| x.angular).sum::<f64>() / 3.0;
        assert!((r.overall.mean_angular - m).abs() < 1e-12);
        assert_eq!(r.per_electrode["V1"].n, 2);
        assert!((r.per_geometry["g1"].mean_angular - 45.0).abs() < 1e-5);
        let j = r.to_json(true).unwrap();
        assert_eq!(j["raw"]["angular_deg"].as_array().unwrap().len(), 3);
        assert!(r.to_json(false).unwrap().get("raw").is_none());
    }
}
