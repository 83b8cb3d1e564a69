//! Triangle surface meshes of subcortical structures.
//!
//! Meshes are read from ASCII OFF or ASCII PLY, validated, and turned into
//! undirected graph topologies (1-ring adjacency) with area-weighted vertex
//! normals. Vertex order is preserved exactly as stored: correspondence
//! between subjects relies on every subject sharing the same ordering for a
//! given structure.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, Vec3};

/// One of the fifteen segmented subcortical structures.
///
/// The declaration order is the canonical order used everywhere (manifest
/// columns, encoder concatenation, checkpoint naming): brain stem first,
/// then left/right pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum StructureId {
    BrainStem,
    ThalamusLeft,
    ThalamusRight,
    CaudateLeft,
    CaudateRight,
    PutamenLeft,
    PutamenRight,
    PallidumLeft,
    PallidumRight,
    HippocampusLeft,
    HippocampusRight,
    AmygdalaLeft,
    AmygdalaRight,
    AccumbensLeft,
    AccumbensRight,
}

impl StructureId {
    pub const COUNT: usize = 15;

    pub const ALL: [StructureId; 15] = [
        StructureId::BrainStem,
        StructureId::ThalamusLeft,
        StructureId::ThalamusRight,
        StructureId::CaudateLeft,
        StructureId::CaudateRight,
        StructureId::PutamenLeft,
        StructureId::PutamenRight,
        StructureId::PallidumLeft,
        StructureId::PallidumRight,
        StructureId::HippocampusLeft,
        StructureId::HippocampusRight,
        StructureId::AmygdalaLeft,
        StructureId::AmygdalaRight,
        StructureId::AccumbensLeft,
        StructureId::AccumbensRight,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Stable snake-case key used in file names, manifest columns and
    /// parameter paths.
    pub fn key(self) -> &'static str {
        match self {
            StructureId::BrainStem => "brainstem",
            StructureId::ThalamusLeft => "thalamus_l",
            StructureId::ThalamusRight => "thalamus_r",
            StructureId::CaudateLeft => "caudate_l",
            StructureId::CaudateRight => "caudate_r",
            StructureId::PutamenLeft => "putamen_l",
            StructureId::PutamenRight => "putamen_r",
            StructureId::PallidumLeft => "pallidum_l",
            StructureId::PallidumRight => "pallidum_r",
            StructureId::HippocampusLeft => "hippocampus_l",
            StructureId::HippocampusRight => "hippocampus_r",
            StructureId::AmygdalaLeft => "amygdala_l",
            StructureId::AmygdalaRight => "amygdala_r",
            StructureId::AccumbensLeft => "accumbens_l",
            StructureId::AccumbensRight => "accumbens_r",
        }
    }
}

impl fmt::Display for StructureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for StructureId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StructureId::ALL
            .iter()
            .copied()
            .find(|id| id.key() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown structure '{s}'")))
    }
}

impl From<StructureId> for String {
    fn from(id: StructureId) -> String {
        id.key().to_string()
    }
}

impl TryFrom<String> for StructureId {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// A triangulated surface in millimetre coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    structure: StructureId,
}

/// Minimum vertex count accepted when ingesting meshes from disk.
pub const MIN_INGEST_VERTICES: usize = 4;

impl TriangleMesh {
    /// Builds a mesh, checking face indices and per-face vertex uniqueness.
    ///
    /// In-memory construction accepts any mesh with at least one face; the
    /// four-vertex floor is applied to meshes coming from files and datasets
    /// (see [`TriangleMesh::check_ingest`]).
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>, structure: StructureId) -> Result<Self> {
        if faces.is_empty() {
            return Err(Error::InvalidMesh("mesh has no faces".into()));
        }
        let n = vertices.len();
        for (fi, f) in faces.iter().enumerate() {
            if let Some(&bad) = f.iter().find(|&&i| i >= n) {
                return Err(Error::InvalidMesh(format!(
                    "face {fi} references vertex {bad} but mesh has {n} vertices"
                )));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::InvalidMesh(format!("face {fi} repeats a vertex: {f:?}")));
            }
        }
        if let Some(i) = vertices.iter().position(|v| v.iter().any(|c| !c.is_finite())) {
            return Err(Error::InvalidMesh(format!("vertex {i} has a non-finite coordinate")));
        }
        Ok(TriangleMesh {
            vertices,
            faces,
            structure,
        })
    }

    pub fn check_ingest(&self) -> Result<()> {
        if self.vertices.len() < MIN_INGEST_VERTICES {
            return Err(Error::InvalidMesh(format!(
                "mesh has {} vertices, at least {MIN_INGEST_VERTICES} required",
                self.vertices.len()
            )));
        }
        Ok(())
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn structure(&self) -> StructureId {
        self.structure
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    /// Same faces and structure, new vertex positions.
    pub fn with_vertices(&self, vertices: Vec<Vec3>) -> Result<Self> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::InvalidMesh(format!(
                "replacement has {} vertices, mesh has {}",
                vertices.len(),
                self.vertices.len()
            )));
        }
        Ok(TriangleMesh {
            vertices,
            faces: self.faces.clone(),
            structure: self.structure,
        })
    }

    pub fn centroid(&self) -> Vec3 {
        let s = self
            .vertices
            .iter()
            .fold([0.0; 3], |acc, &v| geom::add(acc, v));
        geom::scale(s, 1.0 / self.vertices.len() as f64)
    }

    /// Serializes as ASCII OFF. Coordinates use the shortest round-trip
    /// decimal representation, so write → read is exact.
    pub fn to_off_string(&self) -> String {
        let mut out = String::with_capacity(self.vertices.len() * 40);
        out.push_str("OFF\n");
        out.push_str(&format!("{} {} 0\n", self.vertices.len(), self.faces.len()));
        for v in &self.vertices {
            out.push_str(&format!("{} {} {}\n", v[0], v[1], v[2]));
        }
        for f in &self.faces {
            out.push_str(&format!("3 {} {} {}\n", f[0], f[1], f[2]));
        }
        out
    }

    pub fn to_ply_string(&self) -> String {
        let mut out = String::new();
        out.push_str("ply\nformat ascii 1.0\n");
        out.push_str(&format!("element vertex {}\n", self.vertices.len()));
        out.push_str("property double x\nproperty double y\nproperty double z\n");
        out.push_str(&format!("element face {}\n", self.faces.len()));
        out.push_str("property list uchar int vertex_indices\nend_header\n");
        for v in &self.vertices {
            out.push_str(&format!("{} {} {}\n", v[0], v[1], v[2]));
        }
        for f in &self.faces {
            out.push_str(&format!("3 {} {} {}\n", f[0], f[1], f[2]));
        }
        out
    }

    pub fn write_off(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_off_string().as_bytes())
    }

    pub fn write_ply(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_ply_string().as_bytes())
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Loads an ASCII OFF or ASCII PLY mesh. The format is detected from the
/// first line of the file, not from the extension.
pub fn load_mesh(path: &Path, structure: StructureId) -> Result<TriangleMesh> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = match std::str::from_utf8(&bytes) {
        Ok(t) => t,
        Err(_) => {
            return Err(Error::format(
                path,
                "file is not ASCII text; binary mesh formats are not supported",
            ))
        }
    };
    let first = text.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
    let (vertices, faces) = if first.starts_with("OFF") {
        parse_off(path, text)?
    } else if first == "ply" {
        parse_ply(path, text)?
    } else {
        return Err(Error::parse(path, 1, format!("unrecognized mesh header '{first}'")));
    };
    let mesh = TriangleMesh::new(vertices, faces, structure).map_err(|e| match e {
        Error::InvalidMesh(m) => Error::format(path, m),
        other => other,
    })?;
    mesh.check_ingest().map_err(|e| match e {
        Error::InvalidMesh(m) => Error::format(path, m),
        other => other,
    })?;
    Ok(mesh)
}

type Parsed = (Vec<Vec3>, Vec<[usize; 3]>);

/// Content lines with 1-based line numbers, comments stripped.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.split('#').next().unwrap_or("").trim();
        (!l.is_empty()).then_some((i + 1, l))
    })
}

fn parse_num<T: FromStr>(path: &Path, line: usize, tok: &str, what: &str) -> Result<T> {
    tok.parse()
        .map_err(|_| Error::parse(path, line, format!("cannot parse {what} '{tok}'")))
}

fn parse_vertex(path: &Path, line: usize, l: &str) -> Result<Vec3> {
    let toks: Vec<&str> = l.split_whitespace().collect();
    if toks.len() < 3 {
        return Err(Error::parse(path, line, "vertex line needs 3 coordinates"));
    }
    let mut v = [0.0; 3];
    for (k, t) in toks.iter().take(3).enumerate() {
        v[k] = parse_num(path, line, t, "coordinate")?;
    }
    Ok(v)
}

fn parse_face(path: &Path, line: usize, l: &str, nv: usize) -> Result<[usize; 3]> {
    let toks: Vec<&str> = l.split_whitespace().collect();
    let count: usize = parse_num(path, line, toks[0], "face vertex count")?;
    if count != 3 {
        return Err(Error::parse(
            path,
            line,
            format!("only triangular faces are supported, found {count}-gon"),
        ));
    }
    if toks.len() < 4 {
        return Err(Error::parse(path, line, "face line needs 3 indices"));
    }
    let mut f = [0usize; 3];
    for k in 0..3 {
        let idx: i64 = parse_num(path, line, toks[k + 1], "vertex index")?;
        if idx < 0 || idx as usize >= nv {
            return Err(Error::parse(
                path,
                line,
                format!("vertex index {idx} out of range for {nv} vertices"),
            ));
        }
        f[k] = idx as usize;
    }
    if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
        return Err(Error::parse(path, line, format!("face repeats a vertex: {f:?}")));
    }
    Ok(f)
}

fn parse_off(path: &Path, text: &str) -> Result<Parsed> {
    let mut lines = content_lines(text);
    let (hline, header) = lines.next().ok_or_else(|| Error::parse(path, 1, "empty file"))?;
    let mut header_toks = header.split_whitespace();
    let magic = header_toks.next().unwrap_or("");
    if magic != "OFF" {
        if magic.contains("BINARY") || header.contains("BINARY") {
            return Err(Error::format(path, "binary OFF is not supported"));
        }
        return Err(Error::parse(path, hline, format!("expected 'OFF' header, found '{magic}'")));
    }
    if header_toks.clone().next() == Some("BINARY") {
        return Err(Error::format(path, "binary OFF is not supported"));
    }
    let rest: Vec<&str> = header_toks.collect();
    let (cline, counts): (usize, Vec<&str>) = if rest.is_empty() {
        let (n, l) = lines
            .next()
            .ok_or_else(|| Error::parse(path, hline, "missing counts line"))?;
        (n, l.split_whitespace().collect())
    } else {
        (hline, rest)
    };
    if counts.len() < 2 {
        return Err(Error::parse(path, cline, "counts line must be 'V F E'"));
    }
    let nv: usize = parse_num(path, cline, counts[0], "vertex count")?;
    let nf: usize = parse_num(path, cline, counts[1], "face count")?;

    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| Error::parse(path, cline, format!("expected {nv} vertices, file ended")))?;
        vertices.push(parse_vertex(path, ln, l)?);
    }
    let mut faces = Vec::with_capacity(nf);
    for _ in 0..nf {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| Error::parse(path, cline, format!("expected {nf} faces, file ended")))?;
        faces.push(parse_face(path, ln, l, nv)?);
    }
    Ok((vertices, faces))
}

struct PlyElement {
    name: String,
    count: usize,
    props: Vec<String>,
}

fn parse_ply(path: &Path, text: &str) -> Result<Parsed> {
    let mut lines = content_lines_ply(text);
    let mut elements: Vec<PlyElement> = Vec::new();
    let mut header_end = None;
    for (ln, l) in lines.by_ref() {
        let toks: Vec<&str> = l.split_whitespace().collect();
        match toks[0] {
            "ply" | "comment" | "obj_info" => {}
            "format" => {
                if toks.get(1) != Some(&"ascii") {
                    return Err(Error::format(
                        path,
                        format!("PLY format '{}' not supported, only ascii", toks.get(1).unwrap_or(&"")),
                    ));
                }
            }
            "element" => {
                if toks.len() != 3 {
                    return Err(Error::parse(path, ln, "malformed element line"));
                }
                elements.push(PlyElement {
                    name: toks[1].to_string(),
                    count: parse_num(path, ln, toks[2], "element count")?,
                    props: Vec::new(),
                });
            }
            "property" => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::parse(path, ln, "property before any element"))?;
                let name = toks.last().copied().unwrap_or("");
                el.props.push(name.to_string());
            }
            "end_header" => {
                header_end = Some(ln);
                break;
            }
            other => return Err(Error::parse(path, ln, format!("unexpected header keyword '{other}'"))),
        }
    }
    let header_end = header_end.ok_or_else(|| Error::parse(path, 1, "missing end_header"))?;

    let nv = elements
        .iter()
        .find(|e| e.name == "vertex")
        .map(|e| e.count)
        .ok_or_else(|| Error::parse(path, header_end, "no vertex element"))?;
    let mut vertices = Vec::with_capacity(nv);
    let mut faces = Vec::new();
    for el in &elements {
        let coord_idx: Option<[usize; 3]> = if el.name == "vertex" {
            let find = |n: &str| el.props.iter().position(|p| p == n);
            match (find("x"), find("y"), find("z")) {
                (Some(x), Some(y), Some(z)) => Some([x, y, z]),
                _ => return Err(Error::parse(path, header_end, "vertex element lacks x/y/z")),
            }
        } else {
            None
        };
        for _ in 0..el.count {
            let (ln, l) = lines.next().ok_or_else(|| {
                Error::parse(path, header_end, format!("file ended inside element '{}'", el.name))
            })?;
            match el.name.as_str() {
                "vertex" => {
                    let toks: Vec<&str> = l.split_whitespace().collect();
                    let idx = coord_idx.expect("vertex element");
                    let mut v = [0.0; 3];
                    for k in 0..3 {
                        let tok = toks
                            .get(idx[k])
                            .ok_or_else(|| Error::parse(path, ln, "vertex line too short"))?;
                        v[k] = parse_num(path, ln, tok, "coordinate")?;
                    }
                    vertices.push(v);
                }
                "face" => faces.push(parse_face(path, ln, l, nv)?),
                _ => {}
            }
        }
    }
    Ok((vertices, faces))
}

/// PLY has no '#' comments; only blank lines are skipped.
fn content_lines_ply(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.trim();
        (!l.is_empty()).then_some((i + 1, l))
    })
}

/// Undirected 1-ring connectivity of a mesh.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphTopology {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
}

impl GraphTopology {
    /// Builds a topology from an edge list. Edges are canonicalized to
    /// `(min, max)`, sorted and deduplicated; self-edges are rejected.
    pub fn from_edges(num_nodes: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut canon: Vec<(usize, usize)> = Vec::new();
        for (a, b) in edges {
            if a == b {
                return Err(Error::Invalid(format!("self-edge at node {a}")));
            }
            if a >= num_nodes || b >= num_nodes {
                return Err(Error::Invalid(format!(
                    "edge ({a}, {b}) out of range for {num_nodes} nodes"
                )));
            }
            canon.push((a.min(b), a.max(b)));
        }
        canon.sort_unstable();
        canon.dedup();

        let mut degree = vec![0usize; num_nodes];
        for &(a, b) in &canon {
            degree[a] += 1;
            degree[b] += 1;
        }
        let mut offsets = vec![0usize; num_nodes + 1];
        for i in 0..num_nodes {
            offsets[i + 1] = offsets[i] + degree[i];
        }
        let mut fill = offsets.clone();
        let mut neighbors = vec![0usize; offsets[num_nodes]];
        for &(a, b) in &canon {
            neighbors[fill[a]] = b;
            fill[a] += 1;
            neighbors[fill[b]] = a;
            fill[b] += 1;
        }
        for i in 0..num_nodes {
            neighbors[offsets[i]..offsets[i + 1]].sort_unstable();
        }
        Ok(GraphTopology {
            num_nodes,
            edges: canon,
            offsets,
            neighbors,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Canonical `(min, max)` edges in ascending order.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Sorted neighbor list of `node`.
    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[self.offsets[node]..self.offsets[node + 1]]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.offsets[node + 1] - self.offsets[node]
    }

    /// Relabels nodes: node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.num_nodes {
            return Err(Error::Invalid("permutation length differs from node count".into()));
        }
        GraphTopology::from_edges(
            self.num_nodes,
            self.edges.iter().map(|&(a, b)| (perm[a], perm[b])),
        )
    }
}

/// Union of the three undirected edges of every face.
pub fn mesh_to_graph(mesh: &TriangleMesh) -> GraphTopology {
    let edges = mesh
        .faces
        .iter()
        .flat_map(|f| [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])]);
    GraphTopology::from_edges(mesh.num_vertices(), edges)
        .expect("validated mesh faces yield valid edges")
}

/// Area-weighted vertex normals. Face normals follow counter-clockwise
/// winding; the unnormalized cross product already carries twice the face
/// area, so summing cross products gives the area weighting directly.
pub fn vertex_normals(mesh: &TriangleMesh) -> Result<Vec<Vec3>> {
    let mut acc = vec![[0.0f64; 3]; mesh.num_vertices()];
    for f in &mesh.faces {
        let [a, b, c] = [mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]];
        let n = geom::cross(geom::sub(b, a), geom::sub(c, a));
        for &i in f {
            acc[i] = geom::add(acc[i], n);
        }
    }
    acc.into_iter()
        .enumerate()
        .map(|(i, n)| {
            let len = geom::norm(n);
            if len > 0.0 && len.is_finite() {
                Ok(geom::scale(n, 1.0 / len))
            } else {
                Err(Error::DegenerateGeometry {
                    vertex: i,
                    reason: "accumulated face normal is zero".into(),
                })
            }
        })
        .collect()
}

/// Geodesic sphere built by recursive midpoint subdivision of an
/// icosahedron. Level `L` has `10·4^L + 2` vertices and `20·4^L` faces,
/// wound counter-clockwise when viewed from outside.
pub fn icosphere(level: usize, radius: f64) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vec3> = vec![
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
    ];
    for v in verts.iter_mut() {
        *v = geom::scale(*v, 1.0 / geom::norm(*v));
    }
    let mut faces: Vec<[usize; 3]> = vec![
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
    for _ in 0..level {
        let mut cache: HashMap<(usize, usize), usize> = HashMap::new();
        let mut midpoint = |a: usize, b: usize, verts: &mut Vec<Vec3>| -> usize {
            let key = (a.min(b), a.max(b));
            *cache.entry(key).or_insert_with(|| {
                let m = geom::scale(geom::add(verts[a], verts[b]), 0.5);
                verts.push(geom::scale(m, 1.0 / geom::norm(m)));
                verts.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for &[a, b, c] in &faces {
            let ab = midpoint(a, b, &mut verts);
            let bc = midpoint(b, c, &mut verts);
            let ca = midpoint(c, a, &mut verts);
            next.push([a, ab, ca]);
            next.push([b, bc, ab]);
            next.push([c, ca, bc]);
            next.push([ab, bc, ca]);
        }
        faces = next;
    }
    let verts = verts.into_iter().map(|v| geom::scale(v, radius)).collect();
    (verts, faces)
}
