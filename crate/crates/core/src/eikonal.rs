//! Anisotropic activation times on the heart submesh and the transmembrane
//! potential built from them.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::geometry::ShapeSet;
use crate::mesh::TetMesh;
use crate::store::{ArrayData, Blob};
use crate::{Mat3, Vec3};

/// Conduction velocities (mm/ms).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VelocityModel {
    pub v_f: f64,
    pub v_t: f64,
}

impl Default for VelocityModel {
    fn default() -> Self {
        Self { v_f: 0.6, v_t: 0.3 }
    }
}

impl VelocityModel {
    pub fn validate(&self) -> Result<()> {
        if self.v_t > 0.0 && self.v_f >= self.v_t && self.v_f.is_finite() {
            Ok(())
        } else {
            Err(Error::Config("velocities must satisfy v_f >= v_t > 0".into()))
        }
    }

    /// Inverse of the velocity tensor `V = v_t^2 I + (v_f^2 - v_t^2) f f^T`.
    pub fn metric(&self, f: &Vec3) -> Mat3 {
        let it = 1.0 / (self.v_t * self.v_t);
        let iff = 1.0 / (self.v_f * self.v_f);
        Mat3::identity() * it + f * f.transpose() * (iff - it)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Crt,
    Sinus,
}

impl Protocol {
    pub const ALL: [Protocol; 2] = [Protocol::Crt, Protocol::Sinus];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Crt => "crt",
            Protocol::Sinus => "sinus",
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "crt" => Ok(Protocol::Crt),
            "sinus" => Ok(Protocol::Sinus),
            _ => Err(Error::input(format!("unknown protocol `{s}` (expected crt or sinus)"))),
        }
    }
}

/// Activation source: global mesh node and onset time (ms).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Source {
    pub node: usize,
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMap {
    /// Activation time per heart node, in `mesh.heart_nodes` order.
    pub tau: Vec<f64>,
    pub sources: Vec<Source>,
}

impl ActivationMap {
    pub fn min_time(&self) -> f64 {
        self.tau.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max_time(&self) -> f64 {
        self.tau.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn shifted(&self, dt: f64) -> Self {
        Self {
            tau: self.tau.iter().map(|t| t + dt).collect(),
            sources: self.sources.iter().map(|s| Source { node: s.node, time: s.time + dt }).collect(),
        }
    }

    pub fn save(&self, path: &Path, protocol: &str, velocities: &VelocityModel) -> Result<()> {
        let meta = json!({
            "kind": "activation_map",
            "protocol": protocol,
            "velocities_mm_per_ms": velocities,
            "sources": self.sources,
            "units": "ms",
            "order": "mesh heart nodes ascending",
        });
        Blob::new(meta).with("tau", &[self.tau.len()], ArrayData::F64(self.tau.clone())).write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let blob = Blob::read(path)?;
        let sources = serde_json::from_value(blob.meta["sources"].clone())?;
        Ok(Self { tau: blob.f64s("tau")?, sources })
    }
}

/// Minimum over the simplex spanned by `c + E lambda` of
/// `tau_c + g . lambda + |e - E lambda|_M`, restricted to the interior.
fn interior_2d(e: &Vec3, e1: &Vec3, e2: &Vec3, g: &Vector2<f64>, m: &Mat3) -> Option<f64> {
    let me1 = m * e1;
    let me2 = m * e2;
    let a = Matrix2::new(e1.dot(&me1), e1.dot(&me2), e2.dot(&me1), e2.dot(&me2));
    let ai = a.try_inverse()?;
    let b = Vector2::new(me1.dot(e), me2.dot(e));
    let q = g.dot(&(ai * g));
    if q >= 1.0 {
        return None;
    }
    let r2 = e.dot(&(m * e)) - b.dot(&(ai * b));
    let n = (r2.max(0.0) / (1.0 - q)).sqrt();
    let lam = ai * (b - g * n);
    (lam[0] >= 0.0 && lam[1] >= 0.0 && lam[0] + lam[1] <= 1.0).then(|| g.dot(&lam) + n)
}

fn interior_1d(e: &Vec3, e1: &Vec3, g: f64, m: &Mat3) -> Option<f64> {
    let me1 = m * e1;
    let a = e1.dot(&me1);
    if a <= 0.0 {
        return None;
    }
    let b = me1.dot(e);
    let q = g * g / a;
    if q >= 1.0 {
        return None;
    }
    let r2 = e.dot(&(m * e)) - b * b / a;
    let n = (r2.max(0.0) / (1.0 - q)).sqrt();
    let lam = (b - g * n) / a;
    (0.0..=1.0).contains(&lam).then(|| g * lam + n)
}

fn metric_norm(v: &Vec3, m: &Mat3) -> f64 {
    v.dot(&(m * v)).max(0.0).sqrt()
}

/// Arrival time at `x` through the opposite face `p` with known times `t`.
fn local_update(x: &Vec3, p: &[Vec3; 3], t: &[f64; 3], m: &Mat3) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..3 {
        if t[i].is_finite() {
            best = best.min(t[i] + metric_norm(&(x - p[i]), m));
        }
    }
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        if t[i].is_finite() && t[j].is_finite() {
            if let Some(v) = interior_1d(&(x - p[i]), &(p[j] - p[i]), t[j] - t[i], m) {
                best = best.min(t[i] + v);
            }
        }
    }
    if t.iter().all(|v| v.is_finite()) {
        let g = Vector2::new(t[1] - t[0], t[2] - t[0]);
        if let Some(v) = interior_2d(&(x - p[0]), &(p[1] - p[0]), &(p[2] - p[0]), &g, m) {
            best = best.min(t[0] + v);
        }
    }
    best
}

struct HeartGraph {
    /// Heart elements incident to each heart node (heart-local indices).
    node_tets: Vec<Vec<usize>>,
    neighbours: Vec<Vec<usize>>,
    /// Element vertices as heart-local node indices.
    tets: Vec<[usize; 4]>,
    metric: Vec<Mat3>,
}

impl HeartGraph {
    fn new(mesh: &TetMesh, vm: &VelocityModel) -> Self {
        let n = mesh.heart_nodes.len();
        let mut node_tets = vec![Vec::new(); n];
        let mut neighbours: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut tets = Vec::with_capacity(mesh.heart_tets.len());
        let mut metric = Vec::with_capacity(mesh.heart_tets.len());
        for (k, &e) in mesh.heart_tets.iter().enumerate() {
            let t = mesh.tets[e].map(|g| mesh.heart_index[g]);
            for &a in &t {
                node_tets[a].push(k);
                neighbours[a].extend(t.iter().filter(|&&b| b != a));
            }
            tets.push(t);
            metric.push(vm.metric(&mesh.fibers[e]));
        }
        for nb in neighbours.iter_mut() {
            nb.sort_unstable();
            nb.dedup();
        }
        Self { node_tets, neighbours, tets, metric }
    }

    fn solve_node(&self, mesh: &TetMesh, v: usize, tau: &[f64]) -> f64 {
        let x = mesh.nodes[mesh.heart_nodes[v]];
        let mut best = f64::INFINITY;
        for &k in &self.node_tets[v] {
            let others: Vec<usize> = self.tets[k].iter().cloned().filter(|&a| a != v).collect();
            let p = [0, 1, 2].map(|i| mesh.nodes[mesh.heart_nodes[others[i]]]);
            let t = [0, 1, 2].map(|i| tau[others[i]]);
            if t.iter().any(|v| v.is_finite()) {
                best = best.min(local_update(&x, &p, &t, &self.metric[k]));
            }
        }
        best
    }
}

/// Fast iterative method for `sqrt(V grad tau . grad tau) = 1` on the heart elements.
/// Radius (mm) around each source seeded with the exact local metric distance.
pub const SOURCE_RADIUS: f64 = 12.0;

pub fn solve_eikonal(mesh: &TetMesh, vm: &VelocityModel, sources: &[Source]) -> Result<ActivationMap> {
    const TOL: f64 = 1e-6;
    vm.validate()?;
    if sources.is_empty() {
        return Err(Error::input("at least one activation source is required"));
    }
    let n = mesh.heart_nodes.len();
    let graph = HeartGraph::new(mesh, vm);
    let mut tau = vec![f64::INFINITY; n];
    let mut fixed = vec![false; n];
    for s in sources {
        let h = *mesh
            .heart_index
            .get(s.node)
            .filter(|&&h| h != usize::MAX)
            .ok_or_else(|| Error::input(format!("source node {} is not a heart node", s.node)))?;
        tau[h] = tau[h].min(s.time);
        fixed[h] = true;
    }
    // Point sources are singular for the piecewise-linear interpolation, so
    // nodes near a source start from the exact local metric distance (the
    // iteration may still lower them).
    let mut seeded = fixed.clone();
    for s in sources {
        let hs = mesh.heart_index[s.node];
        let xs = mesh.nodes[s.node];
        let m = &graph.metric[graph.node_tets[hs][0]];
        let mut stack = vec![hs];
        let mut seen = BTreeSet::from([hs]);
        while let Some(v) = stack.pop() {
            for &w in &graph.neighbours[v] {
                let d = mesh.nodes[mesh.heart_nodes[w]] - xs;
                if d.norm() > SOURCE_RADIUS || !seen.insert(w) {
                    continue;
                }
                if !fixed[w] {
                    tau[w] = tau[w].min(s.time + metric_norm(&d, m));
                    seeded[w] = true;
                }
                stack.push(w);
            }
        }
    }
    let mut active: BTreeSet<usize> = BTreeSet::new();
    for h in (0..n).filter(|&h| seeded[h]) {
        if !fixed[h] {
            active.insert(h);
        }
        active.extend(graph.neighbours[h].iter().filter(|&&w| !fixed[w]));
    }
    while !active.is_empty() {
        let current: Vec<usize> = active.iter().cloned().collect();
        for v in current {
            let p = tau[v];
            let q = graph.solve_node(mesh, v, &tau);
            if q < p {
                tau[v] = q;
            }
            if q < p - TOL {
                continue;
            }
            active.remove(&v);
            for &w in &graph.neighbours[v] {
                if fixed[w] || active.contains(&w) {
                    continue;
                }
                let qw = graph.solve_node(mesh, w, &tau);
                if qw < tau[w] {
                    let decrease = tau[w] - qw;
                    tau[w] = qw;
                    if decrease >= TOL {
                        active.insert(w);
                    }
                }
            }
        }
    }
    let unreachable: Vec<usize> = (0..n).filter(|&h| !tau[h].is_finite()).map(|h| mesh.heart_nodes[h]).collect();
    if !unreachable.is_empty() {
        return Err(Error::Unreachable { nodes: unreachable });
    }
    Ok(ActivationMap { tau, sources: sources.to_vec() })
}

/// Analytic action-potential template.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApTemplate {
    pub rest: f64,
    pub amplitude: f64,
    pub upstroke_width: f64,
    pub apd: f64,
    pub repolarization_width: f64,
}

impl Default for ApTemplate {
    fn default() -> Self {
        Self { rest: -84.0, amplitude: 120.0, upstroke_width: 1.0, apd: 280.0, repolarization_width: 20.0 }
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl ApTemplate {
    pub fn validate(&self) -> Result<()> {
        let ok = self.amplitude.is_finite()
            && self.rest.is_finite()
            && self.upstroke_width > 0.0
            && self.repolarization_width > 0.0
            && self.apd > 0.0;
        ok.then_some(()).ok_or_else(|| Error::Config("invalid action potential template".into()))
    }

    /// Potential (mV) at time `xi` (ms) after local activation.
    pub fn eval(&self, xi: f64) -> f64 {
        self.rest
            + self.amplitude
                * logistic(xi / self.upstroke_width)
                * (1.0 - logistic((xi - self.apd) / self.repolarization_width))
    }
}

/// Nodal transmembrane potential at time `t`.
pub fn transmembrane(act: &ActivationMap, template: &ApTemplate, t: f64) -> Vec<f64> {
    act.tau.iter().map(|tau| template.eval(t - tau)).collect()
}

fn nearest_heart_node(mesh: &TetMesh, x: &Vec3) -> usize {
    let mut best = (usize::MAX, f64::INFINITY);
    for &n in &mesh.heart_nodes {
        let d = (mesh.nodes[n] - x).norm_squared();
        if d < best.1 {
            best = (n, d);
        }
    }
    best.0
}

/// Pacing sources for a protocol, snapped to the nearest heart nodes.
pub fn pacing_protocols(shapes: &ShapeSet, mesh: &TetMesh, protocol: Protocol) -> Result<Vec<Source>> {
    if mesh.heart_nodes.is_empty() {
        return Err(Error::input("mesh has no heart nodes"));
    }
    let on = |e: &crate::geometry::Ellipsoid, dir: Vec3, z: f64| {
        let a = Vec3::from(e.semi_axes);
        let zc = z.clamp(-0.95, 0.95);
        let r = (1.0 - zc * zc).sqrt();
        let d = dir.normalize() * r;
        e.to_world(&Vec3::new(a.x * d.x, a.y * d.y, a.z * zc))
    };
    let targets: Vec<(Vec3, f64)> = match protocol {
        Protocol::Crt => vec![
            // RV apical endocardium and LV lateral epicardium, simultaneous
            (on(&shapes.rv, Vec3::x(), -0.9), 0.0),
            (on(&shapes.epi, Vec3::x(), -0.2), 0.0),
        ],
        Protocol::Sinus => vec![
            (on(&shapes.lv, -Vec3::x(), -0.2), 0.0),
            (on(&shapes.lv, Vec3::y(), -0.3), 4.0),
            (on(&shapes.lv, -Vec3::y(), -0.3), 6.0),
            (on(&shapes.rv, Vec3::x(), -0.2), 5.0),
            (on(&shapes.rv, -Vec3::x(), -0.1), 10.0),
            (on(&shapes.rv, Vec3::y(), -0.6), 15.0),
        ],
    };
    Ok(targets.into_iter().map(|(x, time)| Source { node: nearest_heart_node(mesh, &x), time }).collect())
}
