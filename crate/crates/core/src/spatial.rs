//! Exact nearest-neighbour queries over static 3-D point sets.

use crate::Vec3;

/// Balanced k-d tree stored as a permutation of the input points.
///
/// The subtree over `perm[lo..hi]` is split at `mid = (lo + hi) / 2` along
/// `axis[mid]`; everything left of `mid` has a coordinate `<=` the pivot.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vec3>,
    perm: Vec<u32>,
    axis: Vec<u8>,
}

impl KdTree {
    pub fn new(points: Vec<Vec3>) -> Self {
        let n = points.len();
        let mut perm: Vec<u32> = (0..n as u32).collect();
        let mut axis = vec![0u8; n];
        build(&points, &mut perm, &mut axis, 0, n);
        Self { points, perm, axis }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    /// Index (into the construction order) and distance of the nearest point.
    /// Ties resolve to the lowest index.
    pub fn nearest(&self, q: &Vec3) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(q, 0, self.points.len(), &mut best);
        Some((best.0, best.1.sqrt()))
    }

    fn search(&self, q: &Vec3, lo: usize, hi: usize, best: &mut (usize, f64)) {
        if lo >= hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let idx = self.perm[mid] as usize;
        let p = &self.points[idx];
        let d2 = (p - q).norm_squared();
        if d2 < best.1 || (d2 == best.1 && idx < best.0) {
            *best = (idx, d2);
        }
        let ax = self.axis[mid] as usize;
        let diff = q[ax] - p[ax];
        let (near, far) = if diff <= 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(q, near.0, near.1, best);
        if diff * diff <= best.1 {
            self.search(q, far.0, far.1, best);
        }
    }
}

fn build(points: &[Vec3], perm: &mut [u32], axis: &mut [u8], lo: usize, hi: usize) {
    if hi - lo <= 1 {
        return;
    }
    let slice = &perm[lo..hi];
    let mut ax = 0;
    let mut widest = -1.0;
    for a in 0..3 {
        let (mn, mx) = slice.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(mn, mx), &i| {
            let v = points[i as usize][a];
            (mn.min(v), mx.max(v))
        });
        if mx - mn > widest {
            widest = mx - mn;
            ax = a;
        }
    }
    let mid = (lo + hi) / 2;
    perm[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| {
        points[a as usize][ax].total_cmp(&points[b as usize][ax])
    });
    axis[mid] = ax as u8;
    build(points, perm, axis, lo, mid);
    build(points, perm, axis, mid + 1, hi);
}
