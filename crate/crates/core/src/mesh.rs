//! Triangulated boundary surfaces with a flagged contact region `G`.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::Vector3;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type Point = Vector3<f64>;

const FORMAT_HEADER: &str = "TDBEM-MESH 1";

/// Faces of an axis-aligned cube centred at the origin.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CubeFace {
    Top,
    Bottom,
    Front,
    Back,
    Left,
    Right,
}

impl CubeFace {
    pub const ALL: [CubeFace; 6] = [
        CubeFace::Top,
        CubeFace::Bottom,
        CubeFace::Front,
        CubeFace::Back,
        CubeFace::Left,
        CubeFace::Right,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CubeFace::Top => "top",
            CubeFace::Bottom => "bottom",
            CubeFace::Front => "front",
            CubeFace::Back => "back",
            CubeFace::Left => "left",
            CubeFace::Right => "right",
        }
    }

    /// Lattice coordinates of local grid node `(i, j)` on this face. The
    /// local axes are ordered so that `e1 × e2` is the outward normal.
    fn lattice(self, i: usize, j: usize, n: usize) -> [usize; 3] {
        match self {
            CubeFace::Top => [i, j, n],
            CubeFace::Bottom => [j, i, 0],
            CubeFace::Right => [n, i, j],
            CubeFace::Left => [0, j, i],
            CubeFace::Back => [j, n, i],
            CubeFace::Front => [i, 0, j],
        }
    }

    /// Outward unit normal.
    pub fn normal(self) -> Point {
        match self {
            CubeFace::Top => Point::z(),
            CubeFace::Bottom => -Point::z(),
            CubeFace::Right => Point::x(),
            CubeFace::Left => -Point::x(),
            CubeFace::Back => Point::y(),
            CubeFace::Front => -Point::y(),
        }
    }

    /// Coordinates of `x` in the face plane, centred at the face midpoint.
    pub fn local_coords(self, x: &Point) -> (f64, f64) {
        match self {
            CubeFace::Top => (x.x, x.y),
            CubeFace::Bottom => (x.y, x.x),
            CubeFace::Right => (x.y, x.z),
            CubeFace::Left => (x.z, x.y),
            CubeFace::Back => (x.z, x.x),
            CubeFace::Front => (x.x, x.z),
        }
    }
}

impl fmt::Display for CubeFace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CubeFace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CubeFace::ALL
            .into_iter()
            .find(|face| face.name() == s.trim())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown cube face '{s}'")))
    }
}

/// Parses "top,front,right" or "all".
pub fn parse_face_set(s: &str) -> Result<Vec<CubeFace>> {
    if s.trim() == "all" {
        return Ok(CubeFace::ALL.to_vec());
    }
    let mut faces = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(CubeFace::from_str)
        .collect::<Result<Vec<_>>>()?;
    faces.sort();
    faces.dedup();
    Ok(faces)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceMesh {
    vertices: Vec<Point>,
    triangles: Vec<[usize; 3]>,
    contact: Vec<bool>,
    pinned: Vec<bool>,
    normals: Vec<Point>,
    areas: Vec<f64>,
    closed: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeshStats {
    pub n_triangles: usize,
    pub n_vertices: usize,
    pub h_max: f64,
    pub h_min: f64,
    pub quasi_uniformity_ratio: f64,
    pub diameter: f64,
}

impl SurfaceMesh {
    /// Validates the connectivity and derives normals, areas and the pinned
    /// vertex mask. A vertex is free (carries a trace unknown) iff every
    /// triangle touching it lies in `G` and it is not on an open boundary edge.
    pub fn new(vertices: Vec<Point>, triangles: Vec<[usize; 3]>, contact: Vec<bool>) -> Result<Self> {
        if triangles.is_empty() {
            return Err(Error::EmptyMesh);
        }
        if contact.len() != triangles.len() {
            return Err(Error::InvalidMesh(format!(
                "{} contact flags for {} triangles",
                contact.len(),
                triangles.len()
            )));
        }
        let nv = vertices.len();
        for (t, tri) in triangles.iter().enumerate() {
            if let Some(&bad) = tri.iter().find(|&&i| i >= nv) {
                return Err(Error::InvalidMesh(format!(
                    "triangle {t} references vertex {bad} but the mesh has {nv} vertices"
                )));
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(Error::InvalidMesh(format!("triangle {t} repeats a vertex")));
            }
        }
        if let Some(i) = vertices.iter().position(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidMesh(format!("vertex {i} has a non-finite coordinate")));
        }

        let mut normals = Vec::with_capacity(triangles.len());
        let mut areas = Vec::with_capacity(triangles.len());
        for (t, tri) in triangles.iter().enumerate() {
            let [a, b, c] = tri.map(|i| vertices[i]);
            let cross = (b - a).cross(&(c - a));
            let norm = cross.norm();
            let scale = (b - a).norm_squared().max((c - a).norm_squared()).max((c - b).norm_squared());
            if !(norm > 1e-14 * scale) {
                return Err(Error::InvalidMesh(format!("triangle {t} is degenerate")));
            }
            normals.push(cross / norm);
            areas.push(0.5 * norm);
        }

        // Edge orientation bookkeeping: value = (count, +1/-1 orientation sum).
        let mut edges: HashMap<(usize, usize), (u32, i32)> = HashMap::new();
        for tri in &triangles {
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                let key = (a.min(b), a.max(b));
                let e = edges.entry(key).or_insert((0, 0));
                e.0 += 1;
                e.1 += if a < b { 1 } else { -1 };
            }
        }
        let mut closed = true;
        let mut on_boundary = vec![false; nv];
        for (&(a, b), &(count, orient)) in &edges {
            match count {
                1 => {
                    closed = false;
                    on_boundary[a] = true;
                    on_boundary[b] = true;
                }
                2 if orient == 0 => {}
                2 => {
                    return Err(Error::InvalidMesh(format!(
                        "edge ({a}, {b}) is shared by two triangles with the same orientation"
                    )))
                }
                _ => return Err(Error::InvalidMesh(format!("edge ({a}, {b}) is non-manifold"))),
            }
        }

        let mut touches_g = vec![false; nv];
        let mut touches_outside = vec![false; nv];
        for (tri, &flag) in triangles.iter().zip(&contact) {
            for &i in tri {
                if flag {
                    touches_g[i] = true;
                } else {
                    touches_outside[i] = true;
                }
            }
        }
        let pinned = (0..nv)
            .map(|i| !touches_g[i] || touches_outside[i] || on_boundary[i])
            .collect();

        Ok(SurfaceMesh { vertices, triangles, contact, pinned, normals, areas, closed })
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn contact_flags(&self) -> &[bool] {
        &self.contact
    }

    /// True for vertices on ∂G or outside G.
    pub fn dirichlet_mask(&self) -> &[bool] {
        &self.pinned
    }

    pub fn normals(&self) -> &[Point] {
        &self.normals
    }

    pub fn areas(&self) -> &[f64] {
        &self.areas
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn corners(&self, t: usize) -> [Point; 3] {
        self.triangles[t].map(|i| self.vertices[i])
    }

    /// Vertices strictly inside G, in increasing order.
    pub fn trace_vertices(&self) -> Vec<usize> {
        (0..self.n_vertices()).filter(|&i| !self.pinned[i]).collect()
    }

    /// Vertices of the closure of G, in increasing order.
    pub fn contact_closure_vertices(&self) -> Vec<usize> {
        let mut seen = vec![false; self.n_vertices()];
        for (tri, &flag) in self.triangles.iter().zip(&self.contact) {
            if flag {
                for &i in tri {
                    seen[i] = true;
                }
            }
        }
        (0..self.n_vertices()).filter(|&i| seen[i]).collect()
    }

    pub fn contact_triangles(&self) -> Vec<usize> {
        (0..self.n_triangles()).filter(|&t| self.contact[t]).collect()
    }

    pub fn total_area(&self) -> f64 {
        self.areas.iter().sum()
    }

    /// All triangles lie in one plane.
    pub fn is_planar(&self) -> bool {
        let n0 = self.normals[0];
        let p0 = self.vertices[self.triangles[0][0]];
        let scale = mesh_stats(self).diameter.max(f64::MIN_POSITIVE);
        self.normals.iter().all(|n| (n - n0).norm() <= 1e-12)
            && self.vertices.iter().all(|v| (v - p0).dot(&n0).abs() <= 1e-12 * scale)
    }

    /// Sub-mesh made of the contact triangles, with vertices renumbered in
    /// increasing order of their original index. Returns the mesh and the
    /// original index of every retained vertex.
    pub fn contact_submesh(&self) -> Result<(SurfaceMesh, Vec<usize>)> {
        self.submesh(&self.contact_triangles())
    }

    /// Sub-mesh made of the listed triangles (flags kept), vertices renumbered
    /// in increasing original order. Returns the original vertex indices too.
    pub fn submesh(&self, triangles: &[usize]) -> Result<(SurfaceMesh, Vec<usize>)> {
        let mut used = vec![false; self.n_vertices()];
        for &t in triangles {
            let tri = self.triangles.get(t).ok_or_else(|| Error::InvalidArgument(format!("triangle {t} out of range")))?;
            for &i in tri {
                used[i] = true;
            }
        }
        let keep: Vec<usize> = (0..self.n_vertices()).filter(|&i| used[i]).collect();
        let mut local = vec![usize::MAX; self.n_vertices()];
        for (k, &i) in keep.iter().enumerate() {
            local[i] = k;
        }
        let vertices = keep.iter().map(|&i| self.vertices[i]).collect();
        let tris: Vec<[usize; 3]> = triangles.iter().map(|&t| self.triangles[t].map(|i| local[i])).collect();
        let flags = triangles.iter().map(|&t| self.contact[t]).collect();
        Ok((SurfaceMesh::new(vertices, tris, flags)?, keep))
    }

    /// Midpoint subdivision: every triangle becomes four with inherited flags.
    pub fn refine_uniform(&self) -> Result<SurfaceMesh> {
        let (vertices, triangles, contact) = split_midpoints(&self.vertices, &self.triangles, &self.contact);
        SurfaceMesh::new(vertices, triangles, contact)
    }

    /// Content hash of geometry, connectivity and flags (hex SHA-256).
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.vertices.len() as u64).to_le_bytes());
        for v in &self.vertices {
            for c in v.iter() {
                h.update(c.to_bits().to_le_bytes());
            }
        }
        for (tri, &flag) in self.triangles.iter().zip(&self.contact) {
            for &i in tri {
                h.update((i as u64).to_le_bytes());
            }
            h.update([flag as u8]);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn split_midpoints(
    vertices: &[Point],
    triangles: &[[usize; 3]],
    contact: &[bool],
) -> (Vec<Point>, Vec<[usize; 3]>, Vec<bool>) {
    let mut vertices = vertices.to_vec();
    let mut mid: HashMap<(usize, usize), usize> = HashMap::new();
    let mut midpoint = |a: usize, b: usize, verts: &mut Vec<Point>| -> usize {
        *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
            verts.push(0.5 * (verts[a] + verts[b]));
            verts.len() - 1
        })
    };
    let mut out = Vec::with_capacity(4 * triangles.len());
    let mut flags = Vec::with_capacity(4 * triangles.len());
    for (&[a, b, c], &flag) in triangles.iter().zip(contact) {
        let ab = midpoint(a, b, &mut vertices);
        let bc = midpoint(b, c, &mut vertices);
        let ca = midpoint(c, a, &mut vertices);
        out.extend_from_slice(&[[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]]);
        flags.extend_from_slice(&[flag; 4]);
    }
    (vertices, out, flags)
}

fn lattice_coord(half_width: f64, n: usize, i: usize) -> f64 {
    half_width * ((2 * i) as f64 - n as f64) / n as f64
}

/// Flat square screen `[-a, a]^2 × {0}` on an `n × n` grid with the contact
/// square `[-c, c]^2`. Grid lines must run along the boundary of the square.
pub fn gen_screen(half_width: f64, n: usize, contact_half_width: f64) -> Result<SurfaceMesh> {
    if n == 0 || !(half_width > 0.0) || !(contact_half_width > 0.0) {
        return Err(Error::InvalidArgument("screen needs n ≥ 1 and positive widths".into()));
    }
    if contact_half_width > half_width * (1.0 + 1e-12) {
        return Err(Error::InvalidArgument(format!(
            "contact half width {contact_half_width} exceeds screen half width {half_width}"
        )));
    }
    let cells = n as f64 * contact_half_width / half_width;
    let m = cells.round();
    if (cells - m).abs() > 1e-9 || m < 1.0 || (n - m as usize) % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "contact square of half width {contact_half_width} is not a union of cells of the \
             {n}x{n} grid on [-{half_width}, {half_width}]^2"
        )));
    }
    let m = m as usize;
    let i0 = (n - m) / 2;

    let idx = |i: usize, j: usize| j * (n + 1) + i;
    let mut vertices = Vec::with_capacity((n + 1) * (n + 1));
    for j in 0..=n {
        for i in 0..=n {
            vertices.push(Point::new(lattice_coord(half_width, n, i), lattice_coord(half_width, n, j), 0.0));
        }
    }
    let mut triangles = Vec::with_capacity(2 * n * n);
    let mut contact = Vec::with_capacity(2 * n * n);
    for j in 0..n {
        for i in 0..n {
            let inside = (i0..i0 + m).contains(&i) && (i0..i0 + m).contains(&j);
            triangles.push([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)]);
            triangles.push([idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)]);
            contact.extend_from_slice(&[inside, inside]);
        }
    }
    SurfaceMesh::new(vertices, triangles, contact)
}

/// Surface of the cube `[-a, a]^3` with `n × n` cells per face.
pub fn gen_cube(half_width: f64, n: usize, contact_faces: &[CubeFace]) -> Result<SurfaceMesh> {
    if n == 0 || !(half_width > 0.0) {
        return Err(Error::InvalidArgument("cube needs n ≥ 1 and a positive half width".into()));
    }
    let mut index: HashMap<[usize; 3], usize> = HashMap::new();
    let mut vertices = Vec::new();
    let mut vertex = |lat: [usize; 3], vertices: &mut Vec<Point>| -> usize {
        *index.entry(lat).or_insert_with(|| {
            vertices.push(Point::from(lat.map(|k| lattice_coord(half_width, n, k))));
            vertices.len() - 1
        })
    };
    let mut triangles = Vec::with_capacity(12 * n * n);
    let mut contact = Vec::with_capacity(12 * n * n);
    for face in CubeFace::ALL {
        let flag = contact_faces.contains(&face);
        for j in 0..n {
            for i in 0..n {
                let v00 = vertex(face.lattice(i, j, n), &mut vertices);
                let v10 = vertex(face.lattice(i + 1, j, n), &mut vertices);
                let v11 = vertex(face.lattice(i + 1, j + 1, n), &mut vertices);
                let v01 = vertex(face.lattice(i, j + 1, n), &mut vertices);
                triangles.push([v00, v10, v11]);
                triangles.push([v00, v11, v01]);
                contact.extend_from_slice(&[flag, flag]);
            }
        }
    }
    SurfaceMesh::new(vertices, triangles, contact)
}

/// Icosahedral approximation of the unit sphere; vertices are projected back
/// onto the sphere after every subdivision. All triangles lie in G.
pub fn gen_icosphere(level: usize) -> Result<SurfaceMesh> {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut vertices: Vec<Point> = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ]
    .iter()
    .map(|p| Point::from(*p).normalize())
    .collect();
    let mut triangles: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for tri in triangles.iter_mut() {
        let [a, b, c] = tri.map(|i| vertices[i]);
        if (b - a).cross(&(c - a)).dot(&(a + b + c)) < 0.0 {
            tri.swap(1, 2);
        }
    }
    let mut contact = vec![true; triangles.len()];
    for _ in 0..level {
        let (v, t, c) = split_midpoints(&vertices, &triangles, &contact);
        vertices = v.into_iter().map(|p| p.normalize()).collect();
        triangles = t;
        contact = c;
    }
    SurfaceMesh::new(vertices, triangles, contact)
}

pub fn mesh_stats(mesh: &SurfaceMesh) -> MeshStats {
    let mut h_max: f64 = 0.0;
    let mut h_min = f64::INFINITY;
    for t in 0..mesh.n_triangles() {
        let p = mesh.corners(t);
        for k in 0..3 {
            let len = (p[(k + 1) % 3] - p[k]).norm();
            h_max = h_max.max(len);
            h_min = h_min.min(len);
        }
    }
    let v = mesh.vertices();
    let mut diam2: f64 = 0.0;
    for i in 0..v.len() {
        for j in i + 1..v.len() {
            diam2 = diam2.max((v[i] - v[j]).norm_squared());
        }
    }
    MeshStats {
        n_triangles: mesh.n_triangles(),
        n_vertices: mesh.n_vertices(),
        h_max,
        h_min,
        quasi_uniformity_ratio: h_max / h_min,
        diameter: diam2.sqrt(),
    }
}

pub fn write_mesh(mesh: &SurfaceMesh, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_mesh_to(mesh, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_mesh_to(mesh: &SurfaceMesh, w: &mut impl Write) -> Result<()> {
    writeln!(w, "{FORMAT_HEADER}")?;
    writeln!(w, "{} {}", mesh.n_vertices(), mesh.n_triangles())?;
    for v in mesh.vertices() {
        writeln!(w, "{:?} {:?} {:?}", v.x, v.y, v.z)?;
    }
    for (tri, &flag) in mesh.triangles().iter().zip(mesh.contact_flags()) {
        writeln!(w, "{} {} {} {}", tri[0], tri[1], tri[2], flag as u8)?;
    }
    Ok(())
}

pub fn read_mesh(path: impl AsRef<Path>) -> Result<SurfaceMesh> {
    let file = std::fs::File::open(path)?;
    read_mesh_from(BufReader::new(file))
}

pub fn read_mesh_from(reader: impl BufRead) -> Result<SurfaceMesh> {
    let mut lines = reader.lines().enumerate().map(|(k, l)| (k + 1, l));
    let mut next = |what: &str| -> Result<(usize, String)> {
        loop {
            match lines.next() {
                Some((no, line)) => {
                    let line = line?;
                    if !line.trim().is_empty() {
                        return Ok((no, line));
                    }
                }
                None => {
                    return Err(Error::Parse { line: 0, message: format!("unexpected end of file, expected {what}") })
                }
            }
        }
    };
    let parse_err = |line: usize, message: String| Error::Parse { line, message };

    let (no, header) = next("header")?;
    if header.trim() != FORMAT_HEADER {
        return Err(parse_err(no, format!("expected header '{FORMAT_HEADER}'")));
    }
    let (no, counts) = next("vertex and triangle counts")?;
    let counts: Vec<usize> = counts
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| parse_err(no, format!("invalid count '{s}'"))))
        .collect::<Result<_>>()?;
    let [nv, nt] = counts[..] else {
        return Err(parse_err(no, "expected '<n_vertices> <n_triangles>'".into()));
    };
    if nt == 0 {
        return Err(Error::EmptyMesh);
    }
    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (no, line) = next("vertex line")?;
        let xs: Vec<f64> = line
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| parse_err(no, format!("invalid coordinate '{s}'"))))
            .collect::<Result<_>>()?;
        let [x, y, z] = xs[..] else {
            return Err(parse_err(no, "expected 'x y z'".into()));
        };
        vertices.push(Point::new(x, y, z));
    }
    let mut triangles = Vec::with_capacity(nt);
    let mut contact = Vec::with_capacity(nt);
    for _ in 0..nt {
        let (no, line) = next("triangle line")?;
        let xs: Vec<usize> = line
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| parse_err(no, format!("invalid index '{s}'"))))
            .collect::<Result<_>>()?;
        let [i, j, k, flag] = xs[..] else {
            return Err(parse_err(no, "expected 'i j k flag'".into()));
        };
        if let Some(bad) = [i, j, k].into_iter().find(|&v| v >= nv) {
            return Err(parse_err(no, format!("vertex index {bad} out of range (n_vertices = {nv})")));
        }
        if flag > 1 {
            return Err(parse_err(no, format!("contact flag must be 0 or 1, got {flag}")));
        }
        triangles.push([i, j, k]);
        contact.push(flag == 1);
    }
    if let Ok((no, _)) = next("end of file") {
        return Err(parse_err(no, "trailing content after the last triangle".into()));
    }
    SurfaceMesh::new(vertices, triangles, contact)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn euler_characteristic(mesh: &SurfaceMesh) -> i64 {
        let mut edges = std::collections::HashSet::new();
        for tri in mesh.triangles() {
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                edges.insert((a.min(b), a.max(b)));
            }
        }
        mesh.n_vertices() as i64 - edges.len() as i64 + mesh.n_triangles() as i64
    }

    fn signed_volume(mesh: &SurfaceMesh) -> f64 {
        let c = mesh.vertices().iter().sum::<Point>() / mesh.n_vertices() as f64;
        (0..mesh.n_triangles())
            .map(|t| {
                let [a, b, d] = mesh.corners(t);
                (a - c).dot(&(b - c).cross(&(d - c))) / 6.0
            })
            .sum()
    }

    #[test]
    fn screen_counts() {
        assert_eq!(gen_screen(2.0, 40, 1.0).unwrap().n_triangles(), 3200);
        assert_eq!(gen_screen(2.0, 80, 1.0).unwrap().n_triangles(), 12800);
        let single = gen_screen(2.0, 1, 2.0).unwrap();
        assert_eq!(single.n_triangles(), 2);
        assert!(single.contact_flags().iter().all(|&f| f));
        assert!(single.trace_vertices().is_empty());
    }

    #[test]
    fn screen_contact_region() {
        let mesh = gen_screen(2.0, 8, 1.0).unwrap();
        let flagged = mesh.contact_flags().iter().filter(|&&f| f).count();
        assert_eq!(flagged, 2 * 4 * 4);
        for t in mesh.contact_triangles() {
            for p in mesh.corners(t) {
                assert!(p.x.abs() <= 1.0 + 1e-14 && p.y.abs() <= 1.0 + 1e-14);
            }
        }
        let free = mesh.trace_vertices();
        assert_eq!(free.len(), 9);
        for i in free {
            let p = mesh.vertices()[i];
            assert!(p.x.abs() < 1.0 && p.y.abs() < 1.0);
        }
    }

    #[test]
    fn screen_rejects_misaligned_contact() {
        assert!(gen_screen(2.0, 3, 1.0).is_err());
        assert!(gen_screen(2.0, 2, 1.0).is_err());
        assert!(gen_screen(2.0, 4, 3.0).is_err());
        assert!(gen_screen(2.0, 5, 1.2).is_ok());
    }

    #[test]
    fn cube_counts() {
        assert_eq!(gen_cube(2.0, 40, &CubeFace::ALL).unwrap().n_triangles(), 19200);
        let top = gen_cube(2.0, 1, &[CubeFace::Top]).unwrap();
        assert_eq!(top.n_triangles(), 12);
        assert_eq!(top.contact_flags().iter().filter(|&&f| f).count(), 2);
        let three = gen_cube(2.0, 2, &parse_face_set("top,front,right").unwrap()).unwrap();
        assert_eq!(three.n_triangles(), 48);
        assert_eq!(three.contact_flags().iter().filter(|&&f| f).count(), 24);
    }

    #[test]
    fn cube_pinning() {
        let all = gen_cube(2.0, 3, &CubeFace::ALL).unwrap();
        assert!(all.dirichlet_mask().iter().all(|&p| !p));
        let top = gen_cube(2.0, 4, &[CubeFace::Top]).unwrap();
        let free = top.trace_vertices();
        assert_eq!(free.len(), 9);
        for i in free {
            let p = top.vertices()[i];
            assert_eq!(p.z, 2.0);
            assert!(p.x.abs() < 2.0 && p.y.abs() < 2.0);
        }
        let three = gen_cube(2.0, 4, &parse_face_set("top,front,right").unwrap()).unwrap();
        assert_eq!(three.trace_vertices().len(), 3 * 9 + 3 * 3 + 1);
    }

    #[test]
    fn cube_faces_outward() {
        let mesh = gen_cube(2.0, 2, &CubeFace::ALL).unwrap();
        for t in 0..mesh.n_triangles() {
            let [a, b, c] = mesh.corners(t);
            let centroid = (a + b + c) / 3.0;
            assert!(mesh.normals()[t].dot(&centroid) > 0.0);
        }
        for face in CubeFace::ALL {
            let n = face.normal();
            let p = 2.0 * n + Point::new(0.1, 0.2, 0.3).cross(&n);
            let (u, v) = face.local_coords(&p);
            assert!((u * u + v * v - (p - 2.0 * n).norm_squared()).abs() < 1e-12);
        }
    }

    #[test]
    fn icosphere_counts_and_projection() {
        assert_eq!(gen_icosphere(0).unwrap().n_triangles(), 20);
        assert_eq!(gen_icosphere(2).unwrap().n_triangles(), 320);
        let s = gen_icosphere(3).unwrap();
        assert!(s.vertices().iter().all(|v| (v.norm() - 1.0).abs() <= 1e-12));
        assert!(s.dirichlet_mask().iter().all(|&p| !p));
        assert!(s.is_closed());
    }

    #[test]
    fn closed_meshes_topology() {
        for mesh in [gen_icosphere(2).unwrap(), gen_cube(2.0, 3, &[CubeFace::Top]).unwrap()] {
            assert_eq!(euler_characteristic(&mesh), 2);
            assert!(signed_volume(&mesh) > 0.0);
            assert!(mesh.is_closed());
        }
        let screen = gen_screen(2.0, 4, 1.0).unwrap();
        assert!(!screen.is_closed());
        assert_eq!(euler_characteristic(&screen), 1);
    }

    #[test]
    fn stats() {
        let s = mesh_stats(&gen_screen(2.0, 40, 1.0).unwrap());
        assert!((s.h_max - 0.1 * 2f64.sqrt()).abs() < 1e-12);
        assert!((s.h_min - 0.1).abs() < 1e-12);
        assert!((s.diameter - 4.0 * 2f64.sqrt()).abs() < 1e-12);
        let s = mesh_stats(&gen_screen(2.0, 80, 1.0).unwrap());
        assert!((0.075 / s.h_max - 1.06).abs() < 0.01);
        let unit = SurfaceMesh::new(
            vec![Point::zeros(), Point::x(), Point::y()],
            vec![[0, 1, 2]],
            vec![true],
        )
        .unwrap();
        let s = mesh_stats(&unit);
        assert!((s.h_max - 2f64.sqrt()).abs() < 1e-15);
        assert!(s.quasi_uniformity_ratio >= 1.0);
    }

    #[test]
    fn round_trip() {
        let mesh = gen_icosphere(1).unwrap();
        let mut buf = Vec::new();
        write_mesh_to(&mesh, &mut buf).unwrap();
        let back = read_mesh_from(&buf[..]).unwrap();
        assert_eq!(back, mesh);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cube.mesh");
        let cube = gen_cube(1.5, 2, &[CubeFace::Left]).unwrap();
        write_mesh(&cube, &path).unwrap();
        assert_eq!(read_mesh(&path).unwrap(), cube);
    }

    #[test]
    fn parse_errors() {
        let bad_index = "TDBEM-MESH 1\n3 1\n0 0 0\n1 0 0\n0 1 0\n0 1 3 1\n";
        match read_mesh_from(bad_index.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 6),
            other => panic!("unexpected {other:?}"),
        }
        let empty = "TDBEM-MESH 1\n3 0\n0 0 0\n1 0 0\n0 1 0\n";
        let err = read_mesh_from(empty.as_bytes()).unwrap_err();
        assert_eq!(err.to_string(), "empty mesh");
        let bad_float = "TDBEM-MESH 1\n3 1\n0 0 0\n1 zero 0\n0 1 0\n0 1 2 1\n";
        assert!(matches!(read_mesh_from(bad_float.as_bytes()), Err(Error::Parse { line: 4, .. })));
        assert!(read_mesh_from("MESH 2\n".as_bytes()).is_err());
    }

    #[test]
    fn degenerate_triangle_rejected() {
        let err = SurfaceMesh::new(
            vec![Point::zeros(), Point::x(), 2.0 * Point::x()],
            vec![[0, 1, 2]],
            vec![false],
        );
        assert!(err.is_err());
    }

    #[test]
    fn contact_submesh_keeps_g() {
        let mesh = gen_screen(2.0, 10, 1.2).unwrap();
        let (sub, map) = mesh.contact_submesh().unwrap();
        assert_eq!(sub.n_triangles(), 2 * 36);
        assert_eq!(sub.n_vertices(), 49);
        for (k, &i) in map.iter().enumerate() {
            assert_eq!(sub.vertices()[k], mesh.vertices()[i]);
        }
    }

    #[test]
    fn content_hash_changes_with_flags() {
        let a = gen_cube(2.0, 2, &[CubeFace::Top]).unwrap();
        let b = gen_cube(2.0, 2, &[CubeFace::Bottom]).unwrap();
        assert_ne!(a.content_hash(), b.content_hash());
        assert_eq!(a.content_hash(), gen_cube(2.0, 2, &[CubeFace::Top]).unwrap().content_hash());
    }

    proptest! {
        #[test]
        fn refine_quadruples(n in 1usize..5, level in 0usize..2) {
            let screen = gen_screen(2.0, 4 * n, 1.0).unwrap();
            let fine = screen.refine_uniform().unwrap();
            prop_assert_eq!(fine.n_triangles(), 4 * screen.n_triangles());
            prop_assert_eq!(
                fine.contact_flags().iter().filter(|&&f| f).count(),
                4 * screen.contact_flags().iter().filter(|&&f| f).count()
            );
            let sphere = gen_icosphere(level).unwrap();
            let finer = sphere.refine_uniform().unwrap();
            prop_assert_eq!(finer.n_triangles(), 4 * sphere.n_triangles());
            prop_assert_eq!(euler_characteristic(&finer), 2);
        }

        #[test]
        fn cube_invariants(n in 1usize..5, mask in 0u8..64) {
            let faces: Vec<CubeFace> = CubeFace::ALL
                .into_iter()
                .enumerate()
                .filter(|(k, _)| mask & (1 << k) != 0)
                .map(|(_, f)| f)
                .collect();
            let mesh = gen_cube(2.0, n, &faces).unwrap();
            prop_assert_eq!(mesh.n_triangles(), 12 * n * n);
            prop_assert_eq!(euler_characteristic(&mesh), 2);
            prop_assert!(signed_volume(&mesh) > 0.0);
            for t in 0..mesh.n_triangles() {
                if !mesh.contact_flags()[t] {
                    for &i in &mesh.triangles()[t] {
                        prop_assert!(mesh.dirichlet_mask()[i]);
                    }
                }
            }
        }
    }
}
