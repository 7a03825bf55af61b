//! Synthetic heart-in-torso shape family.
//!
//! The torso is an axis-aligned ellipsoid centred at the origin. World axes
//! follow the patient: `+x` points to the patient's left, `+y` anteriorly and
//! `+z` superiorly. The heart is built from three ellipsoids (epicardium, LV
//! and RV endocardium) truncated by a common base plane in heart-local
//! coordinates, where local `+z` points from apex to base and local `+x`
//! points from the RV towards the LV free wall.

mod electrodes;
mod fibers;

use std::f64::consts::FRAC_PI_4;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spatial::KdTree;
use crate::{Mat3, Vec3};

pub use electrodes::{place_electrodes, ElectrodeMode, ElectrodeSet, TorsoFrame, STANDARD9};
pub use fibers::{helix_angle_deg, FIBER_ANGLE_ENDO_DEG, FIBER_ANGLE_EPI_DEG};

/// Unmodulated torso semi-axes (mm) along x, y, z.
pub const TORSO_BASE_SEMI_AXES: [f64; 3] = [200.0, 120.0, 280.0];
/// Relative semi-axis modulation per unit torso weight.
pub const TORSO_MODULATION: f64 = 0.10;
/// Heart centroid reference point (mm). Fixed for the whole family.
pub const DEFAULT_HEART_CENTER: [f64; 3] = [20.0, 10.0, 40.0];
/// Base plane height in heart-local coordinates (mm).
pub const HEART_BASE_PLANE: f64 = 35.0;
/// Number of entries of the geometry code: 4 heart weights, 3 torso weights, 3 angles.
pub const PARAM_DIM: usize = 10;
pub const MAX_ROTATION: f64 = FRAC_PI_4;

const EPI_SEMI_AXES: [f64; 3] = [50.0, 45.0, 70.0];
const LV_CENTER: [f64; 3] = [12.0, 0.0, 5.0];
const LV_SEMI_AXES: [f64; 3] = [20.0, 20.0, 45.0];
const RV_CENTER: [f64; 3] = [-25.0, 0.0, 5.0];
const RV_SEMI_AXES: [f64; 3] = [8.0, 24.0, 38.0];
const HEART_MODULATION: f64 = 0.10;

const TORSO_CLOUD_POINTS: usize = 30_000;
const HEART_CLOUD_POINTS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometryParams {
    pub torso_weights: [f64; 3],
    pub heart_weights: [f64; 4],
    /// Rotations (rad) about the heart-local x (LV-RV), y (anterior-posterior)
    /// and z (long) axes.
    pub heart_rotation: [f64; 3],
    pub heart_center: [f64; 3],
}

impl Default for GeometryParams {
    fn default() -> Self {
        Self {
            torso_weights: [0.0; 3],
            heart_weights: [0.0; 4],
            heart_rotation: [0.0; 3],
            heart_center: DEFAULT_HEART_CENTER,
        }
    }
}

impl GeometryParams {
    /// Map a point of the unit box `[0,1]^10` onto the parameter box.
    fn from_unit(u: &[f64; PARAM_DIM]) -> Self {
        let w = |v: f64| 2.0 * v - 1.0;
        let a = |v: f64| (2.0 * v - 1.0) * MAX_ROTATION;
        Self {
            torso_weights: [w(u[0]), w(u[1]), w(u[2])],
            heart_weights: [w(u[3]), w(u[4]), w(u[5]), w(u[6])],
            heart_rotation: [a(u[7]), a(u[8]), a(u[9])],
            heart_center: DEFAULT_HEART_CENTER,
        }
    }

    /// Geometry code in the order heart weights, torso weights, rotation angles.
    pub fn code(&self) -> Vec<f64> {
        let mut z = Vec::with_capacity(PARAM_DIM);
        z.extend_from_slice(&self.heart_weights);
        z.extend_from_slice(&self.torso_weights);
        z.extend_from_slice(&self.heart_rotation);
        z
    }

    pub fn validate(&self) -> Result<()> {
        let weights = self.torso_weights.iter().chain(&self.heart_weights);
        if weights.clone().any(|w| !(-1.0..=1.0).contains(w)) {
            return Err(Error::Geometry("shape weights must lie in [-1, 1]".into()));
        }
        if self
            .heart_rotation
            .iter()
            .any(|a| !(-MAX_ROTATION..=MAX_ROTATION).contains(a))
        {
            return Err(Error::Geometry("rotation angles must lie in [-pi/4, pi/4]".into()));
        }
        if self.heart_center.iter().any(|c| !c.is_finite()) {
            return Err(Error::Geometry("heart centre must be finite".into()));
        }
        Ok(())
    }
}

/// Latin hypercube sample of `n` geometries over the parameter box.
///
/// Each of the ten coordinates has exactly one sample in every `1/n` stratum.
pub fn sample_geometry(seed: u64, n: usize) -> Result<Vec<GeometryParams>> {
    if n == 0 {
        return Err(Error::input("need at least one geometry"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut unit = vec![[0.0; PARAM_DIM]; n];
    for d in 0..PARAM_DIM {
        let mut strata: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            strata.swap(i, rng.random_range(0..=i));
        }
        for (row, s) in unit.iter_mut().zip(strata) {
            row[d] = (s as f64 + rng.random::<f64>()) / n as f64;
        }
    }
    Ok(unit.iter().map(GeometryParams::from_unit).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Surface {
    Torso,
    Epi,
    Lv,
    Rv,
}

impl Surface {
    /// Output order of the four signed distance channels.
    pub const ALL: [Surface; 4] = [Surface::Torso, Surface::Epi, Surface::Lv, Surface::Rv];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Surface::Torso => "torso",
            Surface::Epi => "epicardium",
            Surface::Lv => "lv_endocardium",
            Surface::Rv => "rv_endocardium",
        }
    }
}

/// Ellipsoid, optionally truncated by the plane `local z = cap`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    /// Columns are the local axes expressed in world coordinates.
    pub rotation: [[f64; 3]; 3],
    pub semi_axes: [f64; 3],
    pub cap: Option<f64>,
}

impl Ellipsoid {
    pub fn sphere(center: [f64; 3], radius: f64) -> Self {
        Self {
            center,
            rotation: mat_to_rows(&Mat3::identity()),
            semi_axes: [radius; 3],
            cap: None,
        }
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        rows_to_mat(&self.rotation)
    }

    pub fn to_local(&self, x: &Vec3) -> Vec3 {
        self.rotation_matrix().transpose() * (x - Vec3::from(self.center))
    }

    pub fn to_world(&self, l: &Vec3) -> Vec3 {
        self.rotation_matrix() * l + Vec3::from(self.center)
    }

    /// Normalised radius `|l / a|` and its gradient in world coordinates.
    fn radius_and_gradient(&self, x: &Vec3) -> (f64, Vec3) {
        let l = self.to_local(x);
        let a = &self.semi_axes;
        let s = Vec3::new(l.x / a[0], l.y / a[1], l.z / a[2]);
        let rho = s.norm();
        if rho < 1e-12 {
            return (rho, Vec3::zeros());
        }
        let g_local = Vec3::new(s.x / (a[0] * rho), s.y / (a[1] * rho), s.z / (a[2] * rho));
        (rho, self.rotation_matrix() * g_local)
    }

    /// First-order signed distance estimate to the untruncated ellipsoid (mm).
    fn ellipsoid_value(&self, x: &Vec3) -> f64 {
        let (rho, g) = self.radius_and_gradient(x);
        let gn = g.norm();
        if gn < 1e-300 {
            return -self.semi_axes.iter().cloned().fold(f64::INFINITY, f64::min);
        }
        (rho - 1.0) / gn
    }

    /// Negative inside, positive outside, zero on the surface.
    pub fn implicit(&self, x: &Vec3) -> f64 {
        let e = self.ellipsoid_value(x);
        match self.cap {
            Some(cap) => e.max(self.to_local(x).z - cap),
            None => e,
        }
    }

    /// Outward unit normal of the ellipsoid level set through `x`.
    pub fn level_normal(&self, x: &Vec3) -> Option<Vec3> {
        let (_, g) = self.radius_and_gradient(x);
        let n = g.norm();
        (n > 1e-300).then(|| g / n)
    }

    /// Approximate surface area of the untruncated ellipsoid (Thomsen's formula).
    pub fn area(&self) -> f64 {
        let p = 1.6075;
        let [a, b, c] = self.semi_axes;
        let m = ((a * b).powf(p) + (a * c).powf(p) + (b * c).powf(p)) / 3.0;
        4.0 * std::f64::consts::PI * m.powf(1.0 / p)
    }

    /// Quasi-uniform points on the (truncated) surface including the cap disk.
    pub fn surface_cloud(&self, target: usize) -> Vec<Vec3> {
        let [a, b, c] = self.semi_axes;
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        let (cap_area, cap_axes) = match self.cap {
            Some(cap) if cap.abs() < c => {
                let f = (1.0 - (cap / c).powi(2)).sqrt();
                (std::f64::consts::PI * a * b * f * f, Some((a * f, b * f, cap)))
            }
            _ => (0.0, None),
        };
        let kept_fraction = match self.cap {
            Some(cap) => ((cap / c).clamp(-1.0, 1.0) + 1.0) / 2.0,
            None => 1.0,
        };
        let curved_area = self.area() * kept_fraction;
        let n_cap = ((target as f64) * cap_area / (cap_area + curved_area)).ceil() as usize;
        let n_curve = target.saturating_sub(n_cap).max(1);
        let n_full = ((n_curve as f64) / kept_fraction.max(1e-3)).ceil() as usize + 1;
        let mut pts = Vec::with_capacity(n_full + n_cap);
        for i in 0..n_full {
            let zc = 1.0 - 2.0 * (i as f64 + 0.5) / n_full as f64;
            let r = (1.0 - zc * zc).sqrt();
            let th = golden * i as f64;
            let l = Vec3::new(a * r * th.cos(), b * r * th.sin(), c * zc);
            if self.cap.is_none_or(|cap| l.z <= cap) {
                pts.push(self.to_world(&l));
            }
        }
        if let Some((ca, cb, cz)) = cap_axes {
            for i in 0..n_cap {
                let r = ((i as f64 + 0.5) / n_cap as f64).sqrt();
                let th = golden * i as f64;
                let l = Vec3::new(ca * r * th.cos(), cb * r * th.sin(), cz);
                pts.push(self.to_world(&l));
            }
        }
        pts
    }
}

pub(crate) fn mat_to_rows(m: &Mat3) -> [[f64; 3]; 3] {
    [
        [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
        [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
        [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
    ]
}

pub(crate) fn rows_to_mat(r: &[[f64; 3]; 3]) -> Mat3 {
    Mat3::new(
        r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
    )
}

fn axis_rotation(axis: usize, angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    match axis {
        0 => Mat3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c),
        1 => Mat3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c),
        _ => Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
    }
}

/// Baseline heart orientation: apex pointing left, anterior and inferior.
fn baseline_heart_rotation() -> Mat3 {
    let apex = Vec3::new(0.45, 0.35, -0.82).normalize();
    let ez = -apex;
    let left = Vec3::new(1.0, 0.0, 0.0);
    let ex = (left - ez * left.dot(&ez)).normalize();
    let ey = ez.cross(&ex);
    Mat3::from_columns(&[ex, ey, ez])
}

/// World-from-local rotation of the heart for the given angles.
pub fn heart_rotation(angles: &[f64; 3]) -> Mat3 {
    baseline_heart_rotation()
        * axis_rotation(2, angles[2])
        * axis_rotation(1, angles[1])
        * axis_rotation(0, angles[0])
}

/// The four anatomical surfaces of one geometry plus dense point clouds.
#[derive(Debug, Clone)]
pub struct ShapeSet {
    pub params: GeometryParams,
    pub torso: Ellipsoid,
    pub epi: Ellipsoid,
    pub lv: Ellipsoid,
    pub rv: Ellipsoid,
    clouds: [KdTree; 4],
}

impl ShapeSet {
    pub fn new(params: GeometryParams) -> Result<Self> {
        params.validate()?;
        let tw = params.torso_weights;
        let torso_axes = [0, 1, 2].map(|i| TORSO_BASE_SEMI_AXES[i] * (1.0 + TORSO_MODULATION * tw[i]));
        let torso = Ellipsoid {
            center: [0.0; 3],
            rotation: mat_to_rows(&Mat3::identity()),
            semi_axes: torso_axes,
            cap: None,
        };

        let hw = params.heart_weights;
        let scale = 1.0 + HEART_MODULATION * hw[0];
        let k_lv = 1.0 + HEART_MODULATION * hw[1];
        let k_rv = 1.0 + HEART_MODULATION * hw[2];
        let elong = 1.0 + HEART_MODULATION * hw[3];
        let rot = heart_rotation(&params.heart_rotation);
        let hc = Vec3::from(params.heart_center);
        let part = |center: [f64; 3], axes: [f64; 3], k: f64| {
            let lc = Vec3::new(center[0] * scale, center[1] * scale, center[2] * scale * elong);
            Ellipsoid {
                center: (hc + rot * lc).into(),
                rotation: mat_to_rows(&rot),
                semi_axes: [axes[0] * scale * k, axes[1] * scale * k, axes[2] * scale * elong * k],
                cap: Some(HEART_BASE_PLANE - lc.z),
            }
        };
        let epi = part([0.0; 3], EPI_SEMI_AXES, 1.0);
        let lv = part(LV_CENTER, LV_SEMI_AXES, k_lv);
        let rv = part(RV_CENTER, RV_SEMI_AXES, k_rv);
        let clouds = [
            KdTree::new(torso.surface_cloud(TORSO_CLOUD_POINTS)),
            KdTree::new(epi.surface_cloud(HEART_CLOUD_POINTS)),
            KdTree::new(lv.surface_cloud(HEART_CLOUD_POINTS)),
            KdTree::new(rv.surface_cloud(HEART_CLOUD_POINTS)),
        ];
        Ok(Self { params, torso, epi, lv, rv, clouds })
    }

    /// A single-surface set used by tests and benchmarks: every surface is
    /// the same sphere.
    pub fn sphere(radius: f64, cloud_points: usize) -> Self {
        let s = Ellipsoid::sphere([0.0; 3], radius);
        let cloud = KdTree::new(s.surface_cloud(cloud_points));
        Self {
            params: GeometryParams::default(),
            torso: s.clone(),
            epi: s.clone(),
            lv: s.clone(),
            rv: s,
            clouds: [cloud.clone(), cloud.clone(), cloud.clone(), cloud],
        }
    }

    pub fn ellipsoid(&self, surface: Surface) -> &Ellipsoid {
        match surface {
            Surface::Torso => &self.torso,
            Surface::Epi => &self.epi,
            Surface::Lv => &self.lv,
            Surface::Rv => &self.rv,
        }
    }

    pub fn cloud(&self, surface: Surface) -> &[Vec3] {
        self.clouds[surface.index()].points()
    }

    pub fn implicit_value(&self, surface: Surface, x: &Vec3) -> f64 {
        self.ellipsoid(surface).implicit(x)
    }

    /// Distance to the nearest cloud point with the sign of the implicit.
    pub fn signed_distance(&self, surface: Surface, x: &Vec3) -> Result<f64> {
        let (_, d) = self.clouds[surface.index()]
            .nearest(x)
            .ok_or_else(|| Error::Config(format!("empty point cloud for {}", surface.name())))?;
        Ok(if self.implicit_value(surface, x) < 0.0 { -d } else { d })
    }

    /// Signed distances to all four surfaces in [`Surface::ALL`] order.
    pub fn signed_distances(&self, x: &Vec3) -> [f64; 4] {
        Surface::ALL.map(|s| self.signed_distance(s, x).expect("clouds are populated"))
    }

    /// Largest nearest-neighbour gap within a surface cloud, estimated on a subsample.
    pub fn cloud_spacing(&self, surface: Surface) -> f64 {
        let pts = self.cloud(surface);
        let step = (pts.len() / 500).max(1);
        let mut worst: f64 = 0.0;
        for i in (0..pts.len()).step_by(step) {
            let nn = pts
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, p)| (p - pts[i]).norm())
                .fold(f64::INFINITY, f64::min);
            worst = worst.max(nn);
        }
        worst
    }

    pub fn is_inside_torso(&self, x: &Vec3) -> bool {
        self.torso.implicit(x) < 0.0
    }

    /// Solid myocardium: inside the epicardium, outside both cavities.
    pub fn is_myocardium(&self, x: &Vec3) -> bool {
        self.epi.implicit(x) < 0.0 && self.lv.implicit(x) > 0.0 && self.rv.implicit(x) > 0.0
    }

    pub fn torso_frame(&self) -> TorsoFrame {
        TorsoFrame::from_ellipsoid(&self.torso)
    }

    pub fn heart_rotation(&self) -> Mat3 {
        self.epi.rotation_matrix()
    }

    /// Axis-aligned box of the heart (from the epicardial cloud).
    pub fn heart_bounds(&self) -> (Vec3, Vec3) {
        bounds(self.cloud(Surface::Epi))
    }

    pub fn torso_bounds(&self) -> (Vec3, Vec3) {
        let f = self.torso_frame();
        (f.min, f.max)
    }

    /// Check implicit containment at `n` random points of each inner region.
    pub fn check_containment(&self, n: usize, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lo, hi) = self.heart_bounds();
        let mut found = 0;
        let mut tries = 0;
        while found < n && tries < 200 * n {
            tries += 1;
            let x = uniform_in_box(&mut rng, &lo, &hi);
            if self.epi.implicit(&x) >= 0.0 {
                continue;
            }
            found += 1;
            if self.torso.implicit(&x) >= 0.0 {
                return Err(Error::Geometry(format!("heart point {x:?} lies outside the torso")));
            }
            for cavity in [&self.lv, &self.rv] {
                // Cavity points must sit inside the epicardium.
                let y = cavity.to_world(&(cavity.to_local(&x) * 0.999));
                if cavity.implicit(&y) < 0.0 && self.epi.implicit(&y) >= 0.0 {
                    return Err(Error::Geometry(format!("cavity point {y:?} outside epicardium")));
                }
            }
        }
        if found == 0 {
            return Err(Error::Geometry("heart region is empty".into()));
        }
        Ok(())
    }

    /// Training points for the SDF decoder and their four signed distances.
    ///
    /// Mixture: 50% Gaussian offsets (sigma 5 mm) of random surface points,
    /// 15% uniform in the cube `[-half, half]^3`, 15% uniform in the torso box,
    /// 20% uniform in the heart box.
    pub fn sample_sdf_training_points(&self, n: usize, half: f64, seed: u64) -> Result<(Vec<Vec3>, Vec<[f64; 4]>)> {
        if n == 0 {
            return Err(Error::input("need at least one SDF sample"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_near = (n as f64 * 0.5).round() as usize;
        let n_cube = (n as f64 * 0.15).round() as usize;
        let n_torso = (n as f64 * 0.15).round() as usize;
        let n_heart = n - n_near - n_cube - n_torso;
        let (tlo, thi) = self.torso_bounds();
        let (hlo, hhi) = self.heart_bounds();
        let mut pts = Vec::with_capacity(n);
        for _ in 0..n_near {
            let s = Surface::ALL[rng.random_range(0..4)];
            let cloud = self.cloud(s);
            let p = cloud[rng.random_range(0..cloud.len())];
            let off = Vec3::new(
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
            ) * 5.0;
            pts.push(p + off);
        }
        let (clo, chi) = (Vec3::repeat(-half), Vec3::repeat(half));
        pts.extend((0..n_cube).map(|_| uniform_in_box(&mut rng, &clo, &chi)));
        pts.extend((0..n_torso).map(|_| uniform_in_box(&mut rng, &tlo, &thi)));
        pts.extend((0..n_heart).map(|_| uniform_in_box(&mut rng, &hlo, &hhi)));
        let sdf = pts.iter().map(|x| self.signed_distances(x)).collect();
        Ok((pts, sdf))
    }
}

pub(crate) fn uniform_in_box<R: Rng>(rng: &mut R, lo: &Vec3, hi: &Vec3) -> Vec3 {
    Vec3::new(
        lo.x + (hi.x - lo.x) * rng.random::<f64>(),
        lo.y + (hi.y - lo.y) * rng.random::<f64>(),
        lo.z + (hi.z - lo.z) * rng.random::<f64>(),
    )
}

pub(crate) fn bounds(pts: &[Vec3]) -> (Vec3, Vec3) {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in pts {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (lo, hi)
}

/// JSON geometry document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeometryFile {
    pub id: usize,
    pub units: String,
    pub params: GeometryParams,
    pub torso: Ellipsoid,
    pub epicardium: Ellipsoid,
    pub lv_endocardium: Ellipsoid,
    pub rv_endocardium: Ellipsoid,
    pub heart_rotation_matrix: [[f64; 3]; 3],
    pub electrodes: ElectrodeSet,
}

impl GeometryFile {
    pub fn new(id: usize, shapes: &ShapeSet, electrodes: ElectrodeSet) -> Self {
        Self {
            id,
            units: "mm, rad".into(),
            params: shapes.params,
            torso: shapes.torso.clone(),
            epicardium: shapes.epi.clone(),
            lv_endocardium: shapes.lv.clone(),
            rv_endocardium: shapes.rv.clone(),
            heart_rotation_matrix: mat_to_rows(&shapes.heart_rotation()),
            electrodes,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lhs_single_sample_in_range() {
        let p = sample_geometry(0, 1).unwrap();
        assert_eq!(p.len(), 1);
        p[0].validate().unwrap();
    }

    #[test]
    fn lhs_stratifies_every_marginal() {
        let n = 100;
        let ps = sample_geometry(0, n).unwrap();
        for d in 0..PARAM_DIM {
            let mut hits = vec![0; n];
            for p in &ps {
                let v = p.code()[d];
                let (lo, hi) = if d >= 7 { (-MAX_ROTATION, MAX_ROTATION) } else { (-1.0, 1.0) };
                let bin = (((v - lo) / (hi - lo)) * n as f64).floor() as usize;
                hits[bin.min(n - 1)] += 1;
            }
            assert!(hits.iter().all(|&h| h == 1), "dimension {d} not stratified");
        }
    }

    #[test]
    fn lhs_is_deterministic() {
        assert_eq!(sample_geometry(3, 20).unwrap(), sample_geometry(3, 20).unwrap());
        assert_ne!(sample_geometry(3, 20).unwrap(), sample_geometry(4, 20).unwrap());
    }

    #[test]
    fn zero_samples_rejected() {
        assert!(sample_geometry(0, 0).is_err());
    }

    #[test]
    fn implicit_signs() {
        let shapes = ShapeSet::new(GeometryParams::default()).unwrap();
        for s in Surface::ALL {
            let e = shapes.ellipsoid(s);
            // a point on the curved part, below the cap
            let l = Vec3::new(0.0, 0.0, -e.semi_axes[2]);
            assert!(shapes.implicit_value(s, &e.to_world(&l)).abs() < 1e-9);
            let l = Vec3::new(e.semi_axes[0], 0.0, 0.0);
            assert!(shapes.implicit_value(s, &e.to_world(&l)).abs() < 1e-9);
            assert!(shapes.implicit_value(s, &Vec3::from(e.center)) < 0.0);
            let far = e.to_world(&Vec3::from(e.semi_axes).scale(10.0));
            assert!(shapes.implicit_value(s, &far) > 0.0);
        }
    }

    #[test]
    fn sphere_signed_distance() {
        let shapes = ShapeSet::sphere(50.0, 20_000);
        let spacing = shapes.cloud_spacing(Surface::Torso);
        assert!(spacing < 2.0, "spacing {spacing}");
        let d = shapes.signed_distance(Surface::Torso, &Vec3::new(0.0, 0.0, 60.0)).unwrap();
        assert!((d - 10.0).abs() <= spacing, "{d}");
        let d = shapes.signed_distance(Surface::Torso, &Vec3::zeros()).unwrap();
        assert!((d + 50.0).abs() <= spacing, "{d}");
        let d = shapes.signed_distance(Surface::Torso, &Vec3::new(50.0, 0.0, 0.0)).unwrap();
        assert!(d.abs() <= spacing, "{d}");
    }

    #[test]
    fn signed_distance_sign_agrees_with_implicit() {
        let shapes = ShapeSet::new(sample_geometry(11, 1).unwrap()[0]).unwrap();
        let (pts, sdf) = shapes.sample_sdf_training_points(2000, 310.0, 5).unwrap();
        for (x, s) in pts.iter().zip(&sdf) {
            for surf in Surface::ALL {
                let imp = shapes.implicit_value(surf, x);
                assert_eq!(imp < 0.0, s[surf.index()] < 0.0);
            }
        }
    }

    #[test]
    fn every_sampled_geometry_is_contained() {
        for p in sample_geometry(1, 25).unwrap() {
            let shapes = ShapeSet::new(p).unwrap();
            shapes.check_containment(10_000, 2).unwrap();
        }
    }

    #[test]
    fn sdf_samples_follow_mixture() {
        let shapes = ShapeSet::new(GeometryParams::default()).unwrap();
        let (pts, sdf) = shapes.sample_sdf_training_points(1000, 310.0, 9).unwrap();
        assert_eq!(pts.len(), 1000);
        assert!(sdf.iter().flatten().all(|v| v.is_finite()));
        let near = sdf
            .iter()
            .filter(|s| s.iter().any(|v| v.abs() <= 15.0))
            .count();
        assert!(near >= 450, "{near}");
        let again = shapes.sample_sdf_training_points(1000, 310.0, 9).unwrap();
        assert_eq!(again.0, pts);
    }

    #[test]
    fn clouds_are_dense_enough() {
        let shapes = ShapeSet::new(GeometryParams::default()).unwrap();
        for s in Surface::ALL {
            assert!(shapes.cloud(s).len() >= 10_000, "{}", s.name());
        }
    }
}
