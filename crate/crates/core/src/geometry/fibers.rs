//! Transmural helix fiber rule.

use super::ShapeSet;
use crate::error::{Error, Result};
use crate::Vec3;

pub const FIBER_ANGLE_ENDO_DEG: f64 = 40.0;
pub const FIBER_ANGLE_EPI_DEG: f64 = -50.0;

/// Helix angle (degrees) at normalised transmural depth `d` (0 endo, 1 epi).
pub fn helix_angle_deg(d: f64) -> f64 {
    FIBER_ANGLE_ENDO_DEG + (FIBER_ANGLE_EPI_DEG - FIBER_ANGLE_ENDO_DEG) * d.clamp(0.0, 1.0)
}

/// Local wall frame at `x`: circumferential and longitudinal directions in
/// the tangent plane of the epicardial level set.
pub(crate) struct WallFrame {
    pub circ: Vec3,
    pub long: Vec3,
}

impl ShapeSet {
    pub(crate) fn wall_frame(&self, x: &Vec3) -> WallFrame {
        let axis = self.heart_rotation().column(2).into_owned();
        let normal = self.epi.level_normal(x).unwrap_or(-axis);
        let mut circ = axis.cross(&normal);
        if circ.norm() < 1e-6 {
            // The epicardial normal is parallel to the long axis at the apex.
            let lateral = self.heart_rotation().column(0).into_owned();
            circ = lateral.cross(&normal);
        }
        let circ = circ.normalize();
        let long = normal.cross(&circ);
        WallFrame { circ, long }
    }

    /// Normalised transmural depth: 0 on an endocardium, 1 on the epicardium.
    pub fn transmural_depth(&self, x: &Vec3) -> Result<f64> {
        let tol = 1e-9;
        let outside = self.epi.implicit(x) > tol
            || self.lv.implicit(x) < -tol
            || self.rv.implicit(x) < -tol;
        if outside {
            return Err(Error::Domain(format!("point {x:?} is outside the myocardium")));
        }
        // Depth is measured through the ellipsoidal walls; the base plane is
        // not a transmural boundary.
        let d_epi = -self.epi.ellipsoid_value(x);
        let d_endo = self.lv.ellipsoid_value(x).min(self.rv.ellipsoid_value(x));
        let (d_epi, d_endo) = (d_epi.max(0.0), d_endo.max(0.0));
        if d_epi + d_endo <= 0.0 {
            return Err(Error::Domain(format!("point {x:?} has zero wall thickness")));
        }
        Ok(d_endo / (d_endo + d_epi))
    }

    /// Unit fiber direction inside the myocardium.
    pub fn fiber_direction(&self, x: &Vec3) -> Result<Vec3> {
        let d = self.transmural_depth(x)?;
        let a = helix_angle_deg(d).to_radians();
        let fr = self.wall_frame(x);
        Ok((fr.circ * a.cos() + fr.long * a.sin()).normalize())
    }

    /// Helix angle (degrees) of `f` in the local wall frame at `x`.
    pub fn measured_helix_angle(&self, x: &Vec3, f: &Vec3) -> f64 {
        let fr = self.wall_frame(x);
        f.dot(&fr.long).atan2(f.dot(&fr.circ)).to_degrees()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{sample_geometry, GeometryParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn shapes() -> ShapeSet {
        ShapeSet::new(GeometryParams::default()).unwrap()
    }

    /// Point on the lateral LV free wall where the depth equals `target`.
    fn point_at_depth(s: &ShapeSet, target: f64) -> Vec3 {
        let start = s.lv.to_world(&Vec3::new(s.lv.semi_axes[0], 0.0, 0.0));
        let dir = s.heart_rotation().column(0).into_owned();
        let mut len = 0.0;
        while s.epi.implicit(&(start + dir * len)) < 0.0 {
            len += 0.5;
        }
        let (mut lo, mut hi) = (0.0, len);
        for _ in 0..60 {
            let m = 0.5 * (lo + hi);
            let x = start + dir * m;
            if s.epi.implicit(&x) >= 0.0 || s.transmural_depth(&x).unwrap() >= target {
                hi = m;
            } else {
                lo = m;
            }
        }
        start + dir * lo
    }

    #[test]
    fn helix_is_linear_in_depth() {
        assert_eq!(helix_angle_deg(0.0), 40.0);
        assert_eq!(helix_angle_deg(1.0), -50.0);
        assert!((helix_angle_deg(0.5) + 5.0).abs() < 1e-12);
    }

    #[test]
    fn midwall_and_endocardial_angles() {
        let s = shapes();
        let mid = point_at_depth(&s, 0.5);
        let f = s.fiber_direction(&mid).unwrap();
        assert!((f.norm() - 1.0).abs() < 1e-12);
        assert!((s.measured_helix_angle(&mid, &f) + 5.0).abs() < 0.5);

        let endo = s.lv.to_world(&Vec3::new(s.lv.semi_axes[0], 0.0, 0.0));
        let f = s.fiber_direction(&endo).unwrap();
        assert!((s.measured_helix_angle(&endo, &f) - 40.0).abs() < 0.5);
    }

    #[test]
    fn outside_myocardium_is_domain_error() {
        let s = shapes();
        let lv_centre = Vec3::from(s.lv.center);
        assert!(matches!(s.fiber_direction(&lv_centre), Err(Error::Domain(_))));
        assert!(s.fiber_direction(&Vec3::new(0.0, 0.0, -250.0)).is_err());
    }

    #[test]
    fn fibers_are_continuous_off_the_long_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = ShapeSet::new(sample_geometry(8, 1).unwrap()[0]).unwrap();
        let (lo, hi) = s.heart_bounds();
        let mut checked = 0;
        while checked < 2000 {
            let x = crate::geometry::uniform_in_box(&mut rng, &lo, &hi);
            let dir = Vec3::new(rng.random(), rng.random(), rng.random()) - Vec3::repeat(0.5);
            let y = x + dir.normalize() * 0.1;
            if !(s.is_myocardium(&x) && s.is_myocardium(&y)) {
                continue;
            }
            // the circumferential direction is undefined on the long axis
            let l = s.epi.to_local(&x);
            if l.x.hypot(l.y) < 10.0 {
                continue;
            }
            let fx = s.fiber_direction(&x).unwrap();
            let fy = s.fiber_direction(&y).unwrap();
            let ang = fx.dot(&fy).clamp(-1.0, 1.0).acos().to_degrees();
            assert!(ang < 1.0, "fiber jump {ang} deg at {x:?}");
            checked += 1;
        }
    }
}
