//! Triangle meshes with affine element maps and oriented faces.
//!
//! Element `T` is the image of the reference triangle under
//! `x = F x_hat + b` with `F = [V1 - V0, V2 - V0]` and `b = V0`. Faces store
//! which local edge of each incident element they are, and whether the edge
//! parameter seen from the right element runs opposite to the left one.

use crate::kernels::EDGE_VERTICES;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("element {element} is not counter-clockwise (det F = {det:e})")]
    Orientation { element: usize, det: f64 },
    #[error("element {element} references vertex {vertex}, but the mesh has {count} vertices")]
    VertexOutOfRange { element: usize, vertex: usize, count: usize },
    #[error("edge ({0}, {1}) is shared by more than two elements")]
    NonManifold(usize, usize),
    #[error("element {0} is degenerate")]
    Degenerate(usize),
    #[error("element index {0} out of range")]
    NoSuchElement(usize),
    #[error("cannot read mesh file: {0}")]
    Io(String),
}

/// Affine map data of one element.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElementGeometry {
    pub f: [[f64; 2]; 2],
    pub b: [f64; 2],
    pub det: f64,
    pub f_inv: [[f64; 2]; 2],
}

impl ElementGeometry {
    fn new(v0: [f64; 2], v1: [f64; 2], v2: [f64; 2]) -> Self {
        let f = [[v1[0] - v0[0], v2[0] - v0[0]], [v1[1] - v0[1], v2[1] - v0[1]]];
        let det = f[0][0] * f[1][1] - f[0][1] * f[1][0];
        let f_inv = [[f[1][1] / det, -f[0][1] / det], [-f[1][0] / det, f[0][0] / det]];
        ElementGeometry { f, b: v0, det, f_inv }
    }

    pub fn map(&self, p: &[f64]) -> [f64; 2] {
        [
            self.f[0][0] * p[0] + self.f[0][1] * p[1] + self.b[0],
            self.f[1][0] * p[0] + self.f[1][1] * p[1] + self.b[1],
        ]
    }

    pub fn inverse_map(&self, x: &[f64]) -> [f64; 2] {
        let d = [x[0] - self.b[0], x[1] - self.b[1]];
        [
            self.f_inv[0][0] * d[0] + self.f_inv[0][1] * d[1],
            self.f_inv[1][0] * d[0] + self.f_inv[1][1] * d[1],
        ]
    }

    /// `F^{-T}`, the covariant transform of in-plane vectors.
    pub fn f_inv_t(&self) -> [[f64; 2]; 2] {
        [[self.f_inv[0][0], self.f_inv[1][0]], [self.f_inv[0][1], self.f_inv[1][1]]]
    }

    /// `F^{-1} F^{-T}`, the metric of covariant fields.
    pub fn metric(&self) -> [[f64; 2]; 2] {
        let g = self.f_inv;
        [
            [g[0][0] * g[0][0] + g[0][1] * g[0][1], g[0][0] * g[1][0] + g[0][1] * g[1][1]],
            [g[1][0] * g[0][0] + g[1][1] * g[0][1], g[1][0] * g[1][0] + g[1][1] * g[1][1]],
        ]
    }
}

/// One mesh edge. `left` is `(element, local edge)`; `right` is `None` on the
/// boundary. `vertices` are the global endpoints in the left element's
/// parameter direction.
#[derive(Debug, Clone, PartialEq)]
pub struct Face {
    pub left: (usize, usize),
    pub right: Option<(usize, usize)>,
    pub reversed: bool,
    pub vertices: [usize; 2],
    pub length: f64,
}

impl Face {
    pub fn is_boundary(&self) -> bool {
        self.right.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh2D {
    vertices: Vec<[f64; 2]>,
    triangles: Vec<[usize; 3]>,
    faces: Vec<Face>,
    element_faces: Vec<[usize; 3]>,
    geometry: Vec<ElementGeometry>,
}

impl Mesh2D {
    /// Validate the triangles and derive the face connectivity.
    pub fn new(vertices: Vec<[f64; 2]>, triangles: Vec<[usize; 3]>) -> Result<Self, MeshError> {
        let mut geometry = Vec::with_capacity(triangles.len());
        for (e, t) in triangles.iter().enumerate() {
            if let Some(&v) = t.iter().find(|&&v| v >= vertices.len()) {
                return Err(MeshError::VertexOutOfRange { element: e, vertex: v, count: vertices.len() });
            }
            let g = ElementGeometry::new(vertices[t[0]], vertices[t[1]], vertices[t[2]]);
            if !(g.det > 0.0) {
                return Err(MeshError::Orientation { element: e, det: g.det });
            }
            geometry.push(g);
        }
        let mut faces: Vec<Face> = Vec::new();
        let mut element_faces = vec![[usize::MAX; 3]; triangles.len()];
        let mut by_edge: HashMap<(usize, usize), usize> = HashMap::new();
        for (e, t) in triangles.iter().enumerate() {
            for (l, &(a, b)) in EDGE_VERTICES.iter().enumerate() {
                let (ga, gb) = (t[a], t[b]);
                let key = (ga.min(gb), ga.max(gb));
                match by_edge.get(&key) {
                    None => {
                        let (pa, pb) = (vertices[ga], vertices[gb]);
                        let length = (pb[0] - pa[0]).hypot(pb[1] - pa[1]);
                        by_edge.insert(key, faces.len());
                        element_faces[e][l] = faces.len();
                        faces.push(Face { left: (e, l), right: None, reversed: false, vertices: [ga, gb], length });
                    }
                    Some(&f) => {
                        let face = &mut faces[f];
                        if face.right.is_some() {
                            return Err(MeshError::NonManifold(key.0, key.1));
                        }
                        face.right = Some((e, l));
                        face.reversed = face.vertices[0] != ga;
                        element_faces[e][l] = f;
                    }
                }
            }
        }
        Ok(Mesh2D { vertices, triangles, faces, element_faces, geometry })
    }

    /// Unit square cut into `n x n` cells, each split along its rising
    /// diagonal into two triangles.
    pub fn structured_square(n: usize) -> Self {
        assert!(n >= 1, "need at least one subdivision");
        let h = 1.0 / n as f64;
        let idx = |i: usize, j: usize| j * (n + 1) + i;
        let vertices = (0..=n)
            .flat_map(|j| (0..=n).map(move |i| [i as f64 * h, j as f64 * h]))
            .collect();
        let mut triangles = Vec::with_capacity(2 * n * n);
        for j in 0..n {
            for i in 0..n {
                triangles.push([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)]);
                triangles.push([idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)]);
            }
        }
        Mesh2D::new(vertices, triangles).expect("structured mesh is valid")
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn faces(&self) -> &[Face] {
        &self.faces
    }

    pub fn num_elements(&self) -> usize {
        self.triangles.len()
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    /// Face ids of the three local edges of an element.
    pub fn element_faces(&self, e: usize) -> [usize; 3] {
        self.element_faces[e]
    }

    pub fn geometry(&self, e: usize) -> &ElementGeometry {
        &self.geometry[e]
    }

    /// `(F^{-T}, det F)` of an element.
    pub fn covariant_factors(&self, e: usize) -> Result<([[f64; 2]; 2], f64), MeshError> {
        let g = self.geometry.get(e).ok_or(MeshError::NoSuchElement(e))?;
        if !(g.det.abs() > f64::MIN_POSITIVE) || !g.det.is_finite() {
            return Err(MeshError::Degenerate(e));
        }
        Ok((g.f_inv_t(), g.det))
    }

    pub fn area(&self) -> f64 {
        self.geometry.iter().map(|g| 0.5 * g.det).sum()
    }

    /// Longest edge of an element.
    pub fn diameter(&self, e: usize) -> f64 {
        let t = self.triangles[e];
        (0..3)
            .map(|k| {
                let (a, b) = (self.vertices[t[k]], self.vertices[t[(k + 1) % 3]]);
                (b[0] - a[0]).hypot(b[1] - a[1])
            })
            .fold(0.0, f64::max)
    }

    /// Physical point of face `f` at parameter `r`, seen from the left
    /// (`side = 0`) or right (`side = 1`) element.
    pub fn face_point(&self, f: usize, side: usize, r: f64) -> [f64; 2] {
        let face = &self.faces[f];
        let (e, l) = if side == 0 { face.left } else { face.right.expect("interior face") };
        self.geometry[e].map(&crate::kernels::edge_point(l, r))
    }

    /// The mesh in the text format read by [`parse_mesh`].
    pub fn to_text(&self) -> String {
        let mut s = String::from("mesh2d\n");
        let _ = writeln!(s, "vertices {}", self.vertices.len());
        for v in &self.vertices {
            let _ = writeln!(s, "{:?} {:?}", v[0], v[1]);
        }
        let _ = writeln!(s, "triangles {}", self.triangles.len());
        for t in &self.triangles {
            let _ = writeln!(s, "{} {} {}", t[0], t[1], t[2]);
        }
        s
    }
}

/// Read a mesh from text: a `mesh2d` header, `vertices <count>` followed by
/// `x y` lines, `triangles <count>` followed by `v0 v1 v2` lines. Everything
/// after `#` on a line is ignored.
pub fn parse_mesh(text: &str) -> Result<Mesh2D, MeshError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(k, l)| (k + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());
    let err = |line: usize, msg: String| MeshError::Parse { line, msg };
    let last_line = text.lines().count().max(1);

    let (line, header) = lines.next().ok_or_else(|| err(last_line, "missing mesh2d header".into()))?;
    if header != "mesh2d" {
        return Err(err(line, format!("expected `mesh2d`, found `{header}`")));
    }
    let (line, l) = lines.next().ok_or_else(|| err(last_line, "missing `vertices` section".into()))?;
    let nv = section_count(line, l, "vertices")?;
    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (line, l) = lines.next().ok_or_else(|| err(last_line, "missing vertex line".into()))?;
        let vals: Vec<f64> = l
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| err(line, format!("bad coordinate `{t}`"))))
            .collect::<Result<_, _>>()?;
        if vals.len() != 2 || vals.iter().any(|v| !v.is_finite()) {
            return Err(err(line, "expected two finite coordinates".into()));
        }
        vertices.push([vals[0], vals[1]]);
    }
    let (line, l) = lines.next().ok_or_else(|| err(last_line, "missing `triangles` section".into()))?;
    let nt = section_count(line, l, "triangles")?;
    let mut triangles = Vec::with_capacity(nt);
    for _ in 0..nt {
        let (line, l) = lines.next().ok_or_else(|| err(last_line, "missing triangle line".into()))?;
        let ids: Vec<usize> = l
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|_| err(line, format!("bad vertex index `{t}`"))))
            .collect::<Result<_, _>>()?;
        if ids.len() != 3 {
            return Err(err(line, "expected three vertex indices".into()));
        }
        if let Some(&v) = ids.iter().find(|&&v| v >= nv) {
            return Err(err(line, format!("vertex index {v} out of range ({nv} vertices)")));
        }
        triangles.push([ids[0], ids[1], ids[2]]);
    }
    if let Some((line, _)) = lines.next() {
        return Err(err(line, "unexpected content after triangles".into()));
    }
    Mesh2D::new(vertices, triangles)
}

fn section_count(line: usize, l: &str, name: &str) -> Result<usize, MeshError> {
    let mut parts = l.split_whitespace();
    match (parts.next(), parts.next().and_then(|c| c.parse::<usize>().ok()), parts.next()) {
        (Some(n), Some(c), None) if n == name => Ok(c),
        _ => Err(MeshError::Parse { line, msg: format!("expected `{name} <count>`") }),
    }
}

pub fn load_mesh(path: impl AsRef<Path>) -> Result<Mesh2D, MeshError> {
    let text = std::fs::read_to_string(path.as_ref()).map_err(|e| MeshError::Io(e.to_string()))?;
    parse_mesh(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{shape_2d, ReferenceElement};
    use crate::jet::{Jet, Real};
    use crate::polys::quad_interval;

    #[test]
    fn structured_examples() {
        let m = Mesh2D::structured_square(1);
        assert_eq!((m.num_elements(), m.vertices().len(), m.num_faces()), (2, 4, 5));
        assert_eq!(m.faces().iter().filter(|f| !f.is_boundary()).count(), 1);
        let m = Mesh2D::structured_square(2);
        assert_eq!(m.num_elements(), 8);
        assert!((m.area() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn connectivity_is_consistent() {
        let m = Mesh2D::structured_square(4);
        let mut refs = vec![0; m.num_faces()];
        for e in 0..m.num_elements() {
            for f in m.element_faces(e) {
                refs[f] += 1;
            }
        }
        for (f, face) in m.faces().iter().enumerate() {
            assert_eq!(refs[f], if face.is_boundary() { 1 } else { 2 });
            if !face.is_boundary() {
                for r in [-1.0, -0.5, 0.0, 0.3, 1.0] {
                    let a = m.face_point(f, 0, r);
                    let rr = if face.reversed { -r } else { r };
                    let b = m.face_point(f, 1, rr);
                    assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
                }
            }
        }
        assert_eq!(m.faces().iter().filter(|f| f.is_boundary()).count(), 16);
    }

    #[test]
    fn text_round_trip() {
        let m = Mesh2D::structured_square(1);
        let back = parse_mesh(&m.to_text()).unwrap();
        assert_eq!(back, m);
        let commented = "# square\nmesh2d\nvertices 3 # three\n0 0\n1 0\n0 1\n\ntriangles 1\n0 1 2\n";
        assert_eq!(parse_mesh(commented).unwrap().num_elements(), 1);
    }

    #[test]
    fn flipped_triangle_is_rejected() {
        let text = "mesh2d\nvertices 4\n0 0\n1 0\n1 1\n0 1\ntriangles 2\n0 1 2\n0 3 2\n";
        let err = parse_mesh(text).unwrap_err();
        assert!(matches!(err, MeshError::Orientation { element: 1, .. }));
        assert!(err.to_string().contains("element 1"));
    }

    #[test]
    fn out_of_range_vertex_is_a_parse_error() {
        let text = "mesh2d\nvertices 3\n0 0\n1 0\n0 1\ntriangles 1\n0 1 7\n";
        let err = parse_mesh(text).unwrap_err();
        assert_eq!(err, MeshError::Parse { line: 7, msg: "vertex index 7 out of range (3 vertices)".into() });
        assert!(matches!(parse_mesh("mesh3d\n"), Err(MeshError::Parse { line: 1, .. })));
        assert!(matches!(parse_mesh("mesh2d\nvertices 1\n0 x\n"), Err(MeshError::Parse { line: 3, .. })));
    }

    #[test]
    fn covariant_factor_examples() {
        let m = Mesh2D::new(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], vec![[0, 1, 2]]).unwrap();
        let (g, det) = m.covariant_factors(0).unwrap();
        assert_eq!((g, det), ([[1.0, 0.0], [0.0, 1.0]], 1.0));
        let s = 2.5;
        let m = Mesh2D::new(vec![[0.0, 0.0], [s, 0.0], [0.0, s]], vec![[0, 1, 2]]).unwrap();
        let (g, det) = m.covariant_factors(0).unwrap();
        assert!((det - s * s).abs() < 1e-14);
        assert!((g[0][0] - 1.0 / s).abs() < 1e-15 && g[0][1] == 0.0 && (g[1][1] - 1.0 / s).abs() < 1e-15);
        assert!(matches!(m.covariant_factors(3), Err(MeshError::NoSuchElement(3))));
    }

    /// Reference fields: scalar `e_hat = phi_{2,1}`, vector
    /// `H_hat = (phi_{1,1}, phi_{0,2})`.
    fn e_hat<T: crate::jet::Real>(x: T, y: T) -> T {
        shape_2d(2, 1, x, y)
    }
    fn h_hat(x: f64, y: f64) -> [f64; 2] {
        [shape_2d(1, 1, x, y), shape_2d(0, 2, x, y)]
    }

    #[test]
    fn curl_and_face_integrals_are_geometry_free() {
        let m = Mesh2D::new(vec![[0.3, -0.2], [1.7, 0.4], [0.1, 1.1]], vec![[0, 1, 2]]).unwrap();
        let g = *m.geometry(0);
        let re = ReferenceElement::new(2, 4).unwrap();
        let mut reference = 0.0;
        let mut physical = 0.0;
        for (q, w) in re.quadrature().weights().iter().enumerate() {
            let p = re.quadrature().point(q);
            let e = e_hat(Jet::<2>::var(p[0], 0), Jet::var(p[1], 1));
            let h = h_hat(p[0], p[1]);
            // curl of a scalar: (d_y e, -d_x e)
            reference += w * (h[0] * e.d[1] - h[1] * e.d[0]);

            // physical fields evaluated through the inverse map
            let x = g.map(p);
            let xj = [Jet::<2>::var(x[0], 0), Jet::var(x[1], 1)];
            let xh = [
                xj[0].scale(g.f_inv[0][0]) + xj[1].scale(g.f_inv[0][1]) + Jet::cst(-g.f_inv[0][0] * g.b[0] - g.f_inv[0][1] * g.b[1]),
                xj[0].scale(g.f_inv[1][0]) + xj[1].scale(g.f_inv[1][1]) + Jet::cst(-g.f_inv[1][0] * g.b[0] - g.f_inv[1][1] * g.b[1]),
            ];
            let ep = e_hat(xh[0], xh[1]);
            let ft = g.f_inv_t();
            let hp = [ft[0][0] * h[0] + ft[0][1] * h[1], ft[1][0] * h[0] + ft[1][1] * h[1]];
            physical += w * g.det * (hp[0] * ep.d[1] - hp[1] * ep.d[0]);
        }
        assert!((reference - physical).abs() < 1e-11 * reference.abs().max(1.0));

        // tangential boundary integral: sum over edges of (H . t) e ds
        let gl = quad_interval(8, 0.0, 0.0).unwrap();
        let tangents = [[1.0, 0.0], [-1.0, 1.0], [0.0, 1.0]];
        for (l, t_hat) in tangents.iter().enumerate() {
            let (mut r_int, mut p_int) = (0.0, 0.0);
            for (q, w) in gl.weights().iter().enumerate() {
                let r = gl.point(q)[0];
                let p = crate::kernels::edge_point(l, r);
                let e = e_hat(p[0], p[1]);
                let h = h_hat(p[0], p[1]);
                // reference: d s_hat = |t_hat| dr / 2 with unit tangent t_hat/|t_hat|
                r_int += w * 0.5 * (h[0] * t_hat[0] + h[1] * t_hat[1]) * e;
                let ft = g.f_inv_t();
                let hp = [ft[0][0] * h[0] + ft[0][1] * h[1], ft[1][0] * h[0] + ft[1][1] * h[1]];
                let tp = [g.f[0][0] * t_hat[0] + g.f[0][1] * t_hat[1], g.f[1][0] * t_hat[0] + g.f[1][1] * t_hat[1]];
                p_int += w * 0.5 * (hp[0] * tp[0] + hp[1] * tp[1]) * e;
            }
            assert!((r_int - p_int).abs() < 1e-12 * r_int.abs().max(1.0));
        }
    }
}
