//! Labelled tetrahedral meshes cut from a structured background grid.

use std::path::Path;

use nalgebra::Matrix3x4;
use serde_json::json;

use crate::error::{Error, Result};
use crate::geometry::ShapeSet;
use crate::store::{ArrayData, Blob};
use crate::{Mat3, Vec3};

pub type GradOp = Matrix3x4<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Region {
    Torso = 0,
    Heart = 1,
}

/// What the mesher needs to know about a domain.
pub trait Anatomy: Sync {
    fn bounds(&self) -> (Vec3, Vec3);
    fn inside(&self, x: &Vec3) -> bool;
    fn is_heart(&self, x: &Vec3) -> bool;
    fn fiber(&self, x: &Vec3) -> Result<Vec3>;
    /// Whether an empty heart region means the resolution is too coarse.
    fn expects_heart(&self) -> bool {
        true
    }
}

impl Anatomy for ShapeSet {
    fn bounds(&self) -> (Vec3, Vec3) {
        self.torso_bounds()
    }
    fn inside(&self, x: &Vec3) -> bool {
        self.is_inside_torso(x)
    }
    fn is_heart(&self, x: &Vec3) -> bool {
        self.is_myocardium(x)
    }
    fn fiber(&self, x: &Vec3) -> Result<Vec3> {
        self.fiber_direction(x)
    }
}

/// Homogeneous ball, optionally with a concentric heart ball of fixed fiber.
#[derive(Debug, Clone)]
pub struct Ball {
    pub center: Vec3,
    pub radius: f64,
    pub heart_radius: f64,
    pub fiber: Vec3,
}

impl Ball {
    pub fn new(center: Vec3, radius: f64) -> Self {
        Self { center, radius, heart_radius: 0.0, fiber: Vec3::x() }
    }
}

impl Anatomy for Ball {
    fn bounds(&self) -> (Vec3, Vec3) {
        (self.center.add_scalar(-self.radius), self.center.add_scalar(self.radius))
    }
    fn inside(&self, x: &Vec3) -> bool {
        (x - self.center).norm() < self.radius
    }
    fn is_heart(&self, x: &Vec3) -> bool {
        (x - self.center).norm() < self.heart_radius
    }
    fn fiber(&self, _: &Vec3) -> Result<Vec3> {
        Ok(self.fiber)
    }
    fn expects_heart(&self) -> bool {
        self.heart_radius > 0.0
    }
}

/// Axis-aligned block of myocardium with a constant fiber direction.
#[derive(Debug, Clone)]
pub struct Slab {
    pub min: Vec3,
    pub max: Vec3,
    pub fiber: Vec3,
}

impl Anatomy for Slab {
    fn bounds(&self) -> (Vec3, Vec3) {
        (self.min, self.max)
    }
    fn inside(&self, x: &Vec3) -> bool {
        (0..3).all(|i| x[i] > self.min[i] && x[i] < self.max[i])
    }
    fn is_heart(&self, x: &Vec3) -> bool {
        self.inside(x)
    }
    fn fiber(&self, _: &Vec3) -> Result<Vec3> {
        Ok(self.fiber)
    }
}

/// Gradient operator (columns are the barycentric gradients) and signed volume.
pub fn gradient_operator(p: &[Vec3; 4]) -> Result<(GradOp, f64)> {
    let j = Mat3::from_columns(&[p[1] - p[0], p[2] - p[0], p[3] - p[0]]);
    let det = j.determinant();
    let scale = (p[1] - p[0]).norm() * (p[2] - p[0]).norm() * (p[3] - p[0]).norm();
    if !(det.abs() > 1e-12 * scale) {
        return Err(Error::Geometry(format!("degenerate tetrahedron {p:?}")));
    }
    let inv = j.try_inverse().ok_or_else(|| Error::Geometry("singular tetrahedron".into()))?;
    let mut b = GradOp::zeros();
    for i in 0..3 {
        let g = inv.row(i).transpose();
        b.set_column(i + 1, &g);
        let c0 = b.column(0) - g;
        b.set_column(0, &c0);
    }
    Ok((b, det / 6.0))
}

#[derive(Debug, Clone)]
pub struct TetMesh {
    pub h: f64,
    pub origin: Vec3,
    pub nodes: Vec<Vec3>,
    pub tets: Vec<[usize; 4]>,
    pub region: Vec<Region>,
    /// Unit fiber for heart elements, zero for torso elements.
    pub fibers: Vec<Vec3>,
    pub volume: Vec<f64>,
    pub grad: Vec<GradOp>,
    /// Outward-oriented boundary triangles.
    pub boundary_faces: Vec<[usize; 3]>,
    pub face_area: Vec<f64>,
    pub node_is_boundary: Vec<bool>,
    /// Lumped boundary area per node (a third of each incident face).
    pub boundary_weight: Vec<f64>,
    pub heart_tets: Vec<usize>,
    /// Nodes incident to heart elements, ascending.
    pub heart_nodes: Vec<usize>,
    /// Global node index to position in `heart_nodes`, `usize::MAX` if absent.
    pub heart_index: Vec<usize>,
    grid_dims: [usize; 3],
    cell_start: Vec<usize>,
    cell_tets: Vec<usize>,
}

/// Vertex offsets of the six Kuhn tetrahedra of a unit cube.
fn kuhn_tets() -> [[[usize; 3]; 4]; 6] {
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    perms.map(|p| {
        let mut v = [[0usize; 3]; 4];
        for k in 0..3 {
            v[k + 1] = v[k];
            v[k + 1][p[k]] = 1;
        }
        v
    })
}

/// Build a labelled mesh on a grid of spacing `h` aligned to multiples of `h`.
pub fn build_mesh<A: Anatomy + ?Sized>(anatomy: &A, h: f64) -> Result<TetMesh> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::input("mesh spacing must be positive"));
    }
    let (lo, hi) = anatomy.bounds();
    let origin = (lo / h).map(f64::floor) * h - Vec3::repeat(h);
    let top = (hi / h).map(f64::ceil) * h + Vec3::repeat(h);
    let cells = ((top - origin) / h).map(|v| v.round() as usize);
    let [cx, cy, cz] = [cells.x, cells.y, cells.z];
    let node_id = |i: usize, j: usize, k: usize| (k * (cy + 1) + j) * (cx + 1) + i;
    let n_grid = (cx + 1) * (cy + 1) * (cz + 1);
    let kuhn = kuhn_tets();

    let mut used = vec![false; n_grid];
    let mut raw: Vec<([usize; 4], Region, Vec3)> = Vec::new();
    for k in 0..cz {
        for j in 0..cy {
            for i in 0..cx {
                for t in &kuhn {
                    let ids = t.map(|o| node_id(i + o[0], j + o[1], k + o[2]));
                    let centroid = t.iter().fold(Vec3::zeros(), |acc, o| {
                        acc + Vec3::new((i + o[0]) as f64, (j + o[1]) as f64, (k + o[2]) as f64)
                    }) * (h / 4.0)
                        + origin;
                    if !anatomy.inside(&centroid) {
                        continue;
                    }
                    let (region, fiber) = if anatomy.is_heart(&centroid) {
                        (Region::Heart, anatomy.fiber(&centroid)?)
                    } else {
                        (Region::Torso, Vec3::zeros())
                    };
                    ids.iter().for_each(|&n| used[n] = true);
                    raw.push((ids, region, fiber));
                }
            }
        }
    }
    if raw.is_empty() {
        return Err(Error::Resolution(format!("no elements at h = {h} mm")));
    }
    let mut compact = vec![usize::MAX; n_grid];
    let mut nodes = Vec::new();
    for k in 0..=cz {
        for j in 0..=cy {
            for i in 0..=cx {
                let g = node_id(i, j, k);
                if used[g] {
                    compact[g] = nodes.len();
                    nodes.push(origin + Vec3::new(i as f64, j as f64, k as f64) * h);
                }
            }
        }
    }
    let mut tets = Vec::with_capacity(raw.len());
    let mut region = Vec::with_capacity(raw.len());
    let mut fibers = Vec::with_capacity(raw.len());
    for (ids, r, f) in raw {
        tets.push(ids.map(|g| compact[g]));
        region.push(r);
        fibers.push(f);
    }
    let mesh = TetMesh::from_parts(h, origin, nodes, tets, region, fibers)?;
    if anatomy.expects_heart() && mesh.heart_tets.is_empty() {
        return Err(Error::Resolution(format!(
            "h = {h} mm is too coarse to resolve the heart wall (no heart elements)"
        )));
    }
    Ok(mesh)
}

impl TetMesh {
    /// Assemble derived data (orientation, operators, boundary, lookup grid).
    pub fn from_parts(
        h: f64,
        origin: Vec3,
        nodes: Vec<Vec3>,
        mut tets: Vec<[usize; 4]>,
        region: Vec<Region>,
        fibers: Vec<Vec3>,
    ) -> Result<Self> {
        let m = tets.len();
        if region.len() != m || fibers.len() != m {
            return Err(Error::input("mesh arrays have inconsistent lengths"));
        }
        if tets.iter().flatten().any(|&n| n >= nodes.len()) {
            return Err(Error::input("tetrahedron references a missing node"));
        }
        let mut volume = Vec::with_capacity(m);
        let mut grad = Vec::with_capacity(m);
        for t in tets.iter_mut() {
            let (mut b, mut v) = gradient_operator(&t.map(|n| nodes[n]))?;
            if v < 0.0 {
                t.swap(2, 3);
                (b, v) = gradient_operator(&t.map(|n| nodes[n]))?;
            }
            volume.push(v);
            grad.push(b);
        }

        // boundary: faces that occur exactly once
        let mut faces: Vec<([usize; 3], usize, usize)> = Vec::with_capacity(4 * m);
        for (e, t) in tets.iter().enumerate() {
            for skip in 0..4 {
                let mut key = [0; 3];
                let mut c = 0;
                for (l, &n) in t.iter().enumerate() {
                    if l != skip {
                        key[c] = n;
                        c += 1;
                    }
                }
                key.sort_unstable();
                faces.push((key, e, skip));
            }
        }
        faces.sort_unstable();
        let mut boundary_faces = Vec::new();
        let mut i = 0;
        while i < faces.len() {
            let mut j = i + 1;
            while j < faces.len() && faces[j].0 == faces[i].0 {
                j += 1;
            }
            if j - i > 2 {
                return Err(Error::Geometry(format!("face {:?} shared by {} tetrahedra", faces[i].0, j - i)));
            }
            if j - i == 1 {
                let (key, e, skip) = faces[i];
                let opposite = nodes[tets[e][skip]];
                let [a, b, c] = key;
                let n = (nodes[b] - nodes[a]).cross(&(nodes[c] - nodes[a]));
                boundary_faces.push(if n.dot(&(opposite - nodes[a])) > 0.0 { [a, c, b] } else { [a, b, c] });
            }
            i = j;
        }
        let mut node_is_boundary = vec![false; nodes.len()];
        let mut boundary_weight = vec![0.0; nodes.len()];
        let mut face_area = Vec::with_capacity(boundary_faces.len());
        for f in &boundary_faces {
            let area = 0.5 * (nodes[f[1]] - nodes[f[0]]).cross(&(nodes[f[2]] - nodes[f[0]])).norm();
            face_area.push(area);
            for &n in f {
                node_is_boundary[n] = true;
                boundary_weight[n] += area / 3.0;
            }
        }

        let heart_tets: Vec<usize> = (0..m).filter(|&e| region[e] == Region::Heart).collect();
        let mut heart_index = vec![usize::MAX; nodes.len()];
        for &e in &heart_tets {
            for &n in &tets[e] {
                heart_index[n] = 0;
            }
        }
        let mut heart_nodes = Vec::new();
        for (n, slot) in heart_index.iter_mut().enumerate() {
            if *slot == 0 {
                *slot = heart_nodes.len();
                heart_nodes.push(n);
            }
        }

        // element lookup grid over the background cells
        let (_, hi) = crate::geometry::bounds(&nodes);
        let dims = ((hi - origin) / h).map(|v| v.floor() as usize + 1);
        let grid_dims = [dims.x, dims.y, dims.z];
        let n_cells = grid_dims.iter().product::<usize>();
        let cell_of = |x: &Vec3| {
            let c = ((x - origin) / h).map(|v| v.floor().max(0.0) as usize);
            let c = [c.x.min(grid_dims[0] - 1), c.y.min(grid_dims[1] - 1), c.z.min(grid_dims[2] - 1)];
            (c[2] * grid_dims[1] + c[1]) * grid_dims[0] + c[0]
        };
        let mut count = vec![0usize; n_cells + 1];
        let tet_cells: Vec<usize> = tets
            .iter()
            .map(|t| cell_of(&(t.iter().map(|&n| nodes[n]).sum::<Vec3>() / 4.0)))
            .collect();
        for &c in &tet_cells {
            count[c + 1] += 1;
        }
        for c in 0..n_cells {
            count[c + 1] += count[c];
        }
        let mut fill = count.clone();
        let mut cell_tets = vec![0; m];
        for (e, &c) in tet_cells.iter().enumerate() {
            cell_tets[fill[c]] = e;
            fill[c] += 1;
        }

        Ok(Self {
            h,
            origin,
            nodes,
            tets,
            region,
            fibers,
            volume,
            grad,
            boundary_faces,
            face_area,
            node_is_boundary,
            boundary_weight,
            heart_tets,
            heart_nodes,
            heart_index,
            grid_dims,
            cell_start: count,
            cell_tets,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_tets(&self) -> usize {
        self.tets.len()
    }

    pub fn centroid(&self, e: usize) -> Vec3 {
        self.tets[e].iter().map(|&n| self.nodes[n]).sum::<Vec3>() / 4.0
    }

    pub fn total_volume(&self) -> f64 {
        self.volume.iter().sum()
    }

    pub fn boundary_area(&self) -> f64 {
        self.face_area.iter().sum()
    }

    pub fn element_gradient_operator(&self, e: usize) -> &GradOp {
        &self.grad[e]
    }

    /// Constant gradient of a nodal field on element `e`.
    pub fn element_gradient(&self, e: usize, values: &[f64]) -> Vec3 {
        let t = &self.tets[e];
        self.grad[e] * nalgebra::Vector4::new(values[t[0]], values[t[1]], values[t[2]], values[t[3]])
    }

    /// Boundary node closest to `x`; ties go to the lowest index.
    pub fn nearest_boundary_node(&self, x: &Vec3) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (n, p) in self.nodes.iter().enumerate() {
            if !self.node_is_boundary[n] {
                continue;
            }
            let d = (p - x).norm_squared();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((n, d));
            }
        }
        best.map(|b| b.0)
    }

    pub fn barycentric(&self, e: usize, x: &Vec3) -> [f64; 4] {
        let p0 = self.nodes[self.tets[e][0]];
        let g = &self.grad[e];
        let d = x - p0;
        let mut l = [0.0; 4];
        for i in 1..4 {
            l[i] = g.column(i).dot(&d);
        }
        l[0] = 1.0 - l[1] - l[2] - l[3];
        l
    }

    /// Containing element and barycentric coordinates, if any.
    pub fn locate_point(&self, x: &Vec3) -> Option<(usize, [f64; 4])> {
        let tol = 1e-9;
        let rel = (x - self.origin) / self.h;
        let c = [rel.x.floor() as i64, rel.y.floor() as i64, rel.z.floor() as i64];
        let own = [(0i64, 0i64, 0i64)];
        let around = (-1..=1).flat_map(|a| (-1..=1).flat_map(move |b| (-1..=1).map(move |cc| (a, b, cc))));
        for (dx, dy, dz) in own.into_iter().chain(around) {
            let q = [c[0] + dx, c[1] + dy, c[2] + dz];
            if (0..3).any(|i| q[i] < 0 || q[i] >= self.grid_dims[i] as i64) {
                continue;
            }
            let cell = (q[2] as usize * self.grid_dims[1] + q[1] as usize) * self.grid_dims[0] + q[0] as usize;
            for &e in &self.cell_tets[self.cell_start[cell]..self.cell_start[cell + 1]] {
                let l = self.barycentric(e, x);
                if l.iter().all(|&v| v >= -tol) {
                    return Some((e, l));
                }
            }
        }
        None
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let flat3 = |v: &[Vec3]| ArrayData::F64(v.iter().flat_map(|p| [p.x, p.y, p.z]).collect());
        let n = self.n_nodes();
        let m = self.n_tets();
        let meta = json!({
            "kind": "tet_mesh",
            "units": "mm",
            "h": self.h,
            "origin": [self.origin.x, self.origin.y, self.origin.z],
            "n_nodes": n,
            "n_tets": m,
            "n_heart_tets": self.heart_tets.len(),
            "n_boundary_faces": self.boundary_faces.len(),
            "region_codes": {"torso": 0, "heart": 1},
            "field_order": ["nodes", "tets", "region", "fibers"],
        });
        Blob::new(meta)
            .with("nodes", &[n, 3], flat3(&self.nodes))
            .with("tets", &[m, 4], ArrayData::U32(self.tets.iter().flatten().map(|&i| i as u32).collect()))
            .with("region", &[m], ArrayData::U8(self.region.iter().map(|&r| r as u8).collect()))
            .with("fibers", &[m, 3], flat3(&self.fibers))
            .write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let blob = Blob::read(path)?;
        let bad = |reason: &str| Error::Format { path: path.to_path_buf(), reason: reason.into() };
        let h = blob.meta["h"].as_f64().ok_or_else(|| bad("missing h"))?;
        let o = blob.meta["origin"].as_array().ok_or_else(|| bad("missing origin"))?;
        let origin = Vec3::new(
            o[0].as_f64().unwrap_or(0.0),
            o[1].as_f64().unwrap_or(0.0),
            o[2].as_f64().unwrap_or(0.0),
        );
        let to3 = |v: Vec<f64>| v.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect::<Vec<_>>();
        let nodes = to3(blob.f64s("nodes")?);
        let tets = blob.u32s("tets")?.chunks_exact(4).map(|c| [0, 1, 2, 3].map(|i| c[i] as usize)).collect();
        let region = blob
            .u8s("region")?
            .into_iter()
            .map(|r| if r == 1 { Region::Heart } else { Region::Torso })
            .collect();
        let fibers = to3(blob.f64s("fibers")?);
        Self::from_parts(h, origin, nodes, tets, region, fibers)
    }
}
