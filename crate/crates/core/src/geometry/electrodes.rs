//! Body-surface electrodes and the normalised torso frame.

use serde::{Deserialize, Serialize};

use super::{Ellipsoid, ShapeSet};
use crate::error::{Error, Result};
use crate::Vec3;

/// Labels of the nine independent electrodes of the 12-lead ECG.
pub const STANDARD9: [&str; 9] = ["RA", "LA", "LL", "V1", "V2", "V3", "V4", "V5", "V6"];

/// Ellipsoidal angles (polar from +z, azimuth from +x towards +y), degrees.
const STANDARD9_ANGLES: [(f64, f64); 9] = [
    (40.0, 150.0),
    (40.0, 30.0),
    (130.0, 60.0),
    (80.0, 97.0),
    (80.0, 83.0),
    (82.0, 72.0),
    (85.0, 62.0),
    (85.0, 45.0),
    (85.0, 20.0),
];

/// Axis-aligned torso bounding box used to normalise coordinates.
///
/// Normalised x runs from -1 (right) to 1 (left), y from 0 (posterior) to
/// 1 (anterior) and z from 0 (superior) to 1 (inferior).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TorsoFrame {
    pub min: Vec3,
    pub max: Vec3,
}

impl TorsoFrame {
    pub fn from_ellipsoid(e: &Ellipsoid) -> Self {
        let c = Vec3::from(e.center);
        let a = Vec3::from(e.semi_axes);
        Self { min: c - a, max: c + a }
    }

    pub fn normalize(&self, x: &Vec3) -> Vec3 {
        let s = self.max - self.min;
        Vec3::new(
            2.0 * (x.x - self.min.x) / s.x - 1.0,
            (x.y - self.min.y) / s.y,
            (self.max.z - x.z) / s.z,
        )
    }

    pub fn denormalize(&self, u: &Vec3) -> Vec3 {
        let s = self.max - self.min;
        Vec3::new(
            self.min.x + (u.x + 1.0) * 0.5 * s.x,
            self.min.y + u.y * s.y,
            self.max.z - u.z * s.z,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElectrodeMode {
    Standard9,
    UniformAnterior(usize),
    /// The nine standard electrodes followed by `n` uniform anterior ones.
    Merged(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElectrodeSet {
    pub labels: Vec<String>,
    pub positions: Vec<[f64; 3]>,
    pub normalized: Vec<[f64; 3]>,
}

impl ElectrodeSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn position(&self, i: usize) -> Vec3 {
        Vec3::from(self.positions[i])
    }

    pub fn normalized(&self, i: usize) -> Vec3 {
        Vec3::from(self.normalized[i])
    }

    fn push(&mut self, label: String, x: Vec3, frame: &TorsoFrame) {
        self.labels.push(label);
        self.positions.push(x.into());
        self.normalized.push(frame.normalize(&x).into());
    }
}

fn on_ellipsoid(e: &Ellipsoid, polar: f64, azimuth: f64) -> Vec3 {
    let [a, b, c] = e.semi_axes;
    let l = Vec3::new(
        a * polar.sin() * azimuth.cos(),
        b * polar.sin() * azimuth.sin(),
        c * polar.cos(),
    );
    e.to_world(&l)
}

/// Place electrodes on the torso surface.
pub fn place_electrodes(shapes: &ShapeSet, mode: ElectrodeMode) -> Result<ElectrodeSet> {
    let frame = shapes.torso_frame();
    let mut set = ElectrodeSet { labels: vec![], positions: vec![], normalized: vec![] };
    let (standard, uniform) = match mode {
        ElectrodeMode::Standard9 => (true, 0),
        ElectrodeMode::UniformAnterior(n) => (false, n),
        ElectrodeMode::Merged(n) => (true, n),
    };
    if !standard && uniform == 0 {
        return Err(Error::input("electrode set would be empty"));
    }
    if standard {
        for (label, (polar, azimuth)) in STANDARD9.iter().zip(STANDARD9_ANGLES) {
            let x = on_ellipsoid(&shapes.torso, polar.to_radians(), azimuth.to_radians());
            set.push(label.to_string(), x, &frame);
        }
    }
    // Fibonacci lattice on the anterior half, with y as the lattice axis.
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let [a, b, c] = shapes.torso.semi_axes;
    for i in 0..uniform {
        let y = (i as f64 + 0.5) / uniform as f64;
        let r = (1.0 - y * y).sqrt();
        let th = golden * i as f64;
        let l = Vec3::new(a * r * th.cos(), b * y, c * r * th.sin());
        set.push(format!("U{:03}", i + 1), shapes.torso.to_world(&l), &frame);
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{sample_geometry, GeometryParams};

    fn shapes() -> ShapeSet {
        ShapeSet::new(sample_geometry(2, 1).unwrap()[0]).unwrap()
    }

    #[test]
    fn standard_nine_on_surface() {
        let s = shapes();
        let e = place_electrodes(&s, ElectrodeMode::Standard9).unwrap();
        assert_eq!(e.len(), 9);
        assert_eq!(e.labels, STANDARD9);
        for i in 0..9 {
            assert!(s.torso.implicit(&e.position(i)).abs() < 1.0);
        }
    }

    #[test]
    fn uniform_anterior_distinct_points() {
        let s = shapes();
        let e = place_electrodes(&s, ElectrodeMode::UniformAnterior(100)).unwrap();
        assert_eq!(e.len(), 100);
        assert_eq!(e.labels[0], "U001");
        assert_eq!(e.labels[99], "U100");
        let mut min_d = f64::INFINITY;
        for i in 0..100 {
            assert!(e.positions[i][1] > s.torso.center[1]);
            assert!(s.torso.implicit(&e.position(i)).abs() < 1.0);
            for j in 0..i {
                min_d = min_d.min((e.position(i) - e.position(j)).norm());
            }
        }
        assert!(min_d > 0.0);
    }

    #[test]
    fn left_right_sign_convention() {
        let s = ShapeSet::new(GeometryParams::default()).unwrap();
        let e = place_electrodes(&s, ElectrodeMode::Standard9).unwrap();
        let x = |l: &str| e.normalized[e.index_of(l).unwrap()][0];
        assert!(x("LA") > 0.0);
        assert!(x("V6") > 0.0);
        assert!(x("RA") < 0.0);
        assert!(x("V1") < 0.0);
        for u in &e.normalized {
            assert!((-1.0..=1.0).contains(&u[0]));
            assert!((0.0..=1.0).contains(&u[1]) && (0.0..=1.0).contains(&u[2]));
        }
        // superior limb leads map to small z, the leg lead to large z
        assert!(e.normalized[0][2] < 0.5 && e.normalized[2][2] > 0.5);
    }

    #[test]
    fn normalization_round_trip() {
        let s = shapes();
        let f = s.torso_frame();
        let e = place_electrodes(&s, ElectrodeMode::Merged(7)).unwrap();
        assert_eq!(e.len(), 16);
        for i in 0..e.len() {
            let back = f.denormalize(&e.normalized(i));
            assert!((back - e.position(i)).norm() < 1e-6);
        }
    }
}
