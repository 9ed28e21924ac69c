//! Triangular meshes, regular refinement, and nested hierarchies with
//! prolongation operators.
//!
//! Conventions:
//! - triangles store counterclockwise vertex triples
//! - a vertex is boundary iff it touches an edge incident to exactly one triangle
//! - free (non-boundary) vertices are numbered in ascending vertex order
//! - refinement appends edge midpoints after the coarse vertices, in the
//!   order of the edge table sorted by endpoint index pair

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::sparse::SparseMatrix;

/// Relative coordinate tolerance (times the domain diameter) under which two
/// vertices count as duplicates.
pub const DUPLICATE_TOL: f64 = 1e-12;

/// Default cap on the vertex count of the finest hierarchy level.
pub const DEFAULT_VERTEX_BUDGET: usize = 4_194_304;

#[derive(Debug, Clone)]
pub struct TriangleMesh {
    pub vertices: Vec<[f64; 2]>,
    /// Counterclockwise vertex index triples.
    pub triangles: Vec<[usize; 3]>,
    pub is_boundary: Vec<bool>,
    /// 1-based hierarchy level this mesh sits on.
    pub level: usize,
    free_of_vertex: Vec<Option<usize>>,
    vertex_of_free: Vec<usize>,
}

impl TriangleMesh {
    /// Validates and constructs a mesh. Triangles must already be
    /// counterclockwise; `load_mesh` fixes orientation before calling this.
    pub fn new(
        vertices: Vec<[f64; 2]>,
        triangles: Vec<[usize; 3]>,
        is_boundary: Vec<bool>,
        level: usize,
    ) -> Result<Self> {
        if is_boundary.len() != vertices.len() {
            return Err(Error::MeshInvalid(format!(
                "boundary flag count {} does not match vertex count {}",
                is_boundary.len(),
                vertices.len()
            )));
        }
        let nv = vertices.len();
        for (t, tri) in triangles.iter().enumerate() {
            for &v in tri {
                if v >= nv {
                    return Err(Error::MeshInvalid(format!(
                        "triangle {t} references vertex {v}, but only {nv} vertices exist"
                    )));
                }
            }
            if signed_area_twice(&vertices, tri) <= 0.0 {
                return Err(Error::MeshInvalid(format!(
                    "triangle {t} has non-positive area (degenerate or clockwise)"
                )));
            }
        }

        check_no_duplicate_vertices(&vertices)?;

        // Topological boundary: vertices on an edge with exactly one incident
        // triangle. Flags must agree with topology.
        let mut edge_count: HashMap<(usize, usize), u32> = HashMap::new();
        for tri in &triangles {
            for (a, b) in tri_edges(tri) {
                *edge_count.entry(sorted_pair(a, b)).or_insert(0) += 1;
            }
        }
        for (&(a, b), &c) in &edge_count {
            if c > 2 {
                return Err(Error::MeshInvalid(format!(
                    "edge ({a}, {b}) is shared by {c} triangles; the mesh is not a 2-manifold"
                )));
            }
        }
        let mut topo_boundary = vec![false; nv];
        for (&(a, b), &c) in &edge_count {
            if c == 1 {
                topo_boundary[a] = true;
                topo_boundary[b] = true;
            }
        }
        for v in 0..nv {
            if topo_boundary[v] != is_boundary[v] {
                return Err(Error::MeshInvalid(format!(
                    "vertex {v} boundary flag is {} but topology says {}",
                    is_boundary[v], topo_boundary[v]
                )));
            }
        }

        let mut free_of_vertex = vec![None; nv];
        let mut vertex_of_free = Vec::new();
        for v in 0..nv {
            if !is_boundary[v] {
                free_of_vertex[v] = Some(vertex_of_free.len());
                vertex_of_free.push(v);
            }
        }

        Ok(TriangleMesh {
            vertices,
            triangles,
            is_boundary,
            level,
            free_of_vertex,
            vertex_of_free,
        })
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    /// Number of free (interior) unknowns.
    pub fn n_free(&self) -> usize {
        self.vertex_of_free.len()
    }

    /// Free-unknown index of a vertex, `None` for boundary vertices.
    pub fn free_index(&self, vertex: usize) -> Option<usize> {
        self.free_of_vertex[vertex]
    }

    /// Vertex index of each free unknown, ascending.
    pub fn free_vertices(&self) -> &[usize] {
        &self.vertex_of_free
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        0.5 * signed_area_twice(&self.vertices, &self.triangles[t])
    }
}

fn sorted_pair(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

fn tri_edges(tri: &[usize; 3]) -> [(usize, usize); 3] {
    [(tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])]
}

fn signed_area_twice(vertices: &[[f64; 2]], tri: &[usize; 3]) -> f64 {
    let [a, b, c] = [vertices[tri[0]], vertices[tri[1]], vertices[tri[2]]];
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn check_no_duplicate_vertices(vertices: &[[f64; 2]]) -> Result<()> {
    let nv = vertices.len();
    if nv < 2 {
        return Ok(());
    }
    let (mut lo, mut hi) = ([f64::MAX; 2], [f64::MIN; 2]);
    for v in vertices {
        for d in 0..2 {
            lo[d] = lo[d].min(v[d]);
            hi[d] = hi[d].max(v[d]);
        }
    }
    let diameter = ((hi[0] - lo[0]).powi(2) + (hi[1] - lo[1]).powi(2)).sqrt();
    let tol = DUPLICATE_TOL * diameter;

    let mut order: Vec<usize> = (0..nv).collect();
    order.sort_by(|&a, &b| {
        vertices[a]
            .partial_cmp(&vertices[b])
            .expect("vertex coordinates must not be NaN")
    });
    for i in 0..nv {
        let vi = vertices[order[i]];
        for &oj in order.iter().skip(i + 1) {
            let vj = vertices[oj];
            if vj[0] - vi[0] > tol {
                break;
            }
            let dist = ((vj[0] - vi[0]).powi(2) + (vj[1] - vi[1]).powi(2)).sqrt();
            if dist <= tol {
                return Err(Error::MeshInvalid(format!(
                    "vertices {} and {} coincide within tolerance",
                    order[i].min(oj),
                    order[i].max(oj)
                )));
            }
        }
    }
    Ok(())
}

/// Structured triangulation of the unit square: (n+1)^2 grid vertices in
/// row-major order, each cell split along the lower-left to upper-right
/// diagonal into two counterclockwise triangles.
pub fn generate_unit_square(n: usize) -> TriangleMesh {
    assert!(n >= 1, "grid subdivision count must be at least 1");
    let step = 1.0 / n as f64;
    let mut vertices = Vec::with_capacity((n + 1) * (n + 1));
    let mut is_boundary = Vec::with_capacity((n + 1) * (n + 1));
    for j in 0..=n {
        for i in 0..=n {
            vertices.push([i as f64 * step, j as f64 * step]);
            is_boundary.push(i == 0 || i == n || j == 0 || j == n);
        }
    }
    let mut triangles = Vec::with_capacity(2 * n * n);
    for j in 0..n {
        for i in 0..n {
            let v00 = j * (n + 1) + i;
            let v10 = v00 + 1;
            let v01 = v00 + n + 1;
            let v11 = v01 + 1;
            triangles.push([v00, v10, v11]);
            triangles.push([v00, v11, v01]);
        }
    }
    TriangleMesh::new(vertices, triangles, is_boundary, 1)
        .expect("structured unit-square mesh is valid by construction")
}

/// Parses the plain-text mesh format: line 1 `nv nt`, then nv lines `x y b`,
/// then nt lines `i j k` with 0-based vertex indices. `#` starts a comment
/// line; blank lines are skipped. Clockwise triangles are re-oriented.
pub fn load_mesh(text: &str) -> Result<TriangleMesh> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let (line_no, header) = lines
        .next()
        .ok_or_else(|| Error::MeshParse {
            line: 1,
            msg: "empty file".into(),
        })?;
    let mut it = header.split_whitespace();
    let nv: usize = parse_field(it.next(), line_no, "vertex count")?;
    let nt: usize = parse_field(it.next(), line_no, "triangle count")?;

    let mut vertices = Vec::with_capacity(nv);
    let mut is_boundary = Vec::with_capacity(nv);
    for k in 0..nv {
        let (line_no, line) = lines.next().ok_or_else(|| Error::MeshParse {
            line: line_no,
            msg: format!("expected {nv} vertex lines, found {k}"),
        })?;
        let mut it = line.split_whitespace();
        let x: f64 = parse_field(it.next(), line_no, "x coordinate")?;
        let y: f64 = parse_field(it.next(), line_no, "y coordinate")?;
        let b: u8 = parse_field(it.next(), line_no, "boundary flag")?;
        if b > 1 {
            return Err(Error::MeshParse {
                line: line_no,
                msg: format!("boundary flag must be 0 or 1, got {b}"),
            });
        }
        vertices.push([x, y]);
        is_boundary.push(b == 1);
    }

    let mut triangles = Vec::with_capacity(nt);
    let mut last_line = line_no;
    for k in 0..nt {
        let (line_no, line) = lines.next().ok_or_else(|| Error::MeshParse {
            line: last_line,
            msg: format!("expected {nt} triangle lines, found {k}"),
        })?;
        last_line = line_no;
        let mut it = line.split_whitespace();
        let i: usize = parse_field(it.next(), line_no, "vertex index")?;
        let j: usize = parse_field(it.next(), line_no, "vertex index")?;
        let kk: usize = parse_field(it.next(), line_no, "vertex index")?;
        for &v in &[i, j, kk] {
            if v >= nv {
                return Err(Error::MeshParse {
                    line: line_no,
                    msg: format!("vertex index {v} out of range (nv = {nv})"),
                });
            }
        }
        let mut tri = [i, j, kk];
        if signed_area_twice(&vertices, &tri) < 0.0 {
            tri.swap(1, 2);
        }
        triangles.push(tri);
    }

    TriangleMesh::new(vertices, triangles, is_boundary, 1)
}

fn parse_field<T: std::str::FromStr>(
    tok: Option<&str>,
    line: usize,
    what: &str,
) -> Result<T> {
    let tok = tok.ok_or_else(|| Error::MeshParse {
        line,
        msg: format!("missing {what}"),
    })?;
    tok.parse().map_err(|_| Error::MeshParse {
        line,
        msg: format!("cannot parse {what} from {tok:?}"),
    })
}

/// Edge table of a mesh: unique sorted endpoint pairs, ascending. Midpoint
/// vertex k of a refinement corresponds to entry k of this table.
fn edge_table(mesh: &TriangleMesh) -> Vec<(usize, usize)> {
    let mut edges: Vec<(usize, usize)> = mesh
        .triangles
        .iter()
        .flat_map(|t| tri_edges(t).map(|(a, b)| sorted_pair(a, b)))
        .collect();
    edges.sort_unstable();
    edges.dedup();
    edges
}

/// Splits every triangle into 4 congruent children through the edge
/// midpoints. Children are appended per parent: the three corner children
/// first, then the center child. Returns the fine mesh and the parent map.
pub fn refine_regular(mesh: &TriangleMesh) -> (TriangleMesh, Vec<usize>) {
    let edges = edge_table(mesh);
    let coarse_nv = mesh.n_vertices();

    let mut midpoint_of: HashMap<(usize, usize), usize> = HashMap::with_capacity(edges.len());
    let mut vertices = mesh.vertices.clone();
    let mut is_boundary = mesh.is_boundary.clone();
    for (k, &(a, b)) in edges.iter().enumerate() {
        midpoint_of.insert((a, b), coarse_nv + k);
        let (va, vb) = (mesh.vertices[a], mesh.vertices[b]);
        vertices.push([0.5 * (va[0] + vb[0]), 0.5 * (va[1] + vb[1])]);
        is_boundary.push(false); // fixed up from edge incidence below
    }
    let mut edge_incidence: HashMap<(usize, usize), u32> = HashMap::with_capacity(edges.len());
    for tri in &mesh.triangles {
        for (a, b) in tri_edges(tri) {
            *edge_incidence.entry(sorted_pair(a, b)).or_insert(0) += 1;
        }
    }
    for (k, &e) in edges.iter().enumerate() {
        is_boundary[coarse_nv + k] = edge_incidence[&e] == 1;
    }

    let mut triangles = Vec::with_capacity(4 * mesh.n_triangles());
    let mut parent = Vec::with_capacity(4 * mesh.n_triangles());
    for (t, &[a, b, c]) in mesh.triangles.iter().enumerate() {
        let mab = midpoint_of[&sorted_pair(a, b)];
        let mbc = midpoint_of[&sorted_pair(b, c)];
        let mca = midpoint_of[&sorted_pair(c, a)];
        triangles.push([a, mab, mca]);
        triangles.push([b, mbc, mab]);
        triangles.push([c, mca, mbc]);
        triangles.push([mab, mbc, mca]);
        parent.extend_from_slice(&[t, t, t, t]);
    }

    let fine = TriangleMesh::new(vertices, triangles, is_boundary, mesh.level + 1)
        .expect("regular refinement of a valid mesh is valid");
    (fine, parent)
}

#[derive(Debug, Clone)]
pub struct MeshHierarchy {
    /// Meshes ordered coarse to fine.
    pub levels: Vec<TriangleMesh>,
    /// parent_maps[k] maps triangles of levels[k+1] to their parent in levels[k].
    pub parent_maps: Vec<Vec<usize>>,
    /// prolongations[k] maps free-dof vectors of levels[k] to levels[k+1].
    pub prolongations: Vec<SparseMatrix>,
}

impl MeshHierarchy {
    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn finest(&self) -> &TriangleMesh {
        self.levels.last().expect("hierarchy has at least one level")
    }
}

/// Repeatedly refines `coarse` into an `n_levels`-deep hierarchy with
/// prolongation matrices between consecutive levels.
pub fn build_hierarchy(coarse: TriangleMesh, n_levels: usize) -> Result<MeshHierarchy> {
    build_hierarchy_with_budget(coarse, n_levels, DEFAULT_VERTEX_BUDGET)
}

pub fn build_hierarchy_with_budget(
    coarse: TriangleMesh,
    n_levels: usize,
    vertex_budget: usize,
) -> Result<MeshHierarchy> {
    if n_levels < 1 {
        return Err(Error::invalid("hierarchy depth must be at least 1"));
    }
    let mut levels = vec![coarse];
    let mut parent_maps = Vec::new();
    let mut prolongations = Vec::new();
    for _ in 1..n_levels {
        let current = levels.last().unwrap();
        let next_nv = current.n_vertices() + edge_table(current).len();
        if next_nv > vertex_budget {
            return Err(Error::BudgetExceeded {
                requested: next_nv,
                budget: vertex_budget,
            });
        }
        let (fine, parent) = refine_regular(current);
        let p = prolongation_matrix(current, &fine, &parent)?;
        parent_maps.push(parent);
        prolongations.push(p);
        levels.push(fine);
    }
    Ok(MeshHierarchy {
        levels,
        parent_maps,
        prolongations,
    })
}

/// Linear-interpolation embedding of the coarse free-dof space into the fine
/// one. Rows are fine free vertices: a coarse-coincident vertex gets a unit
/// entry, an edge midpoint gets 1/2 at each free endpoint (boundary endpoints
/// are eliminated).
pub fn prolongation_matrix(
    coarse: &TriangleMesh,
    fine: &TriangleMesh,
    parent_map: &[usize],
) -> Result<SparseMatrix> {
    if parent_map.len() != fine.n_triangles()
        || fine.n_triangles() != 4 * coarse.n_triangles()
        || fine.n_vertices() < coarse.n_vertices()
    {
        return Err(Error::MeshInvalid(
            "fine mesh is not a regular refinement of the coarse mesh".into(),
        ));
    }
    let coarse_nv = coarse.n_vertices();
    for v in 0..coarse_nv {
        if fine.vertices[v] != coarse.vertices[v] {
            return Err(Error::MeshInvalid(format!(
                "fine mesh does not contain coarse vertex {v} at the same coordinates"
            )));
        }
    }
    let edges = edge_table(coarse);
    if fine.n_vertices() != coarse_nv + edges.len() {
        return Err(Error::MeshInvalid(
            "fine vertex count does not match coarse vertices plus edge midpoints".into(),
        ));
    }

    let mut triplets = Vec::with_capacity(fine.n_free() * 2);
    for (row, &v) in fine.free_vertices().iter().enumerate() {
        if v < coarse_nv {
            let col = coarse.free_index(v).ok_or_else(|| {
                Error::MeshInvalid(format!(
                    "fine vertex {v} is free but its coarse twin is boundary"
                ))
            })?;
            triplets.push((row, col, 1.0));
        } else {
            let (a, b) = edges[v - coarse_nv];
            let mid = [
                0.5 * (coarse.vertices[a][0] + coarse.vertices[b][0]),
                0.5 * (coarse.vertices[a][1] + coarse.vertices[b][1]),
            ];
            if fine.vertices[v] != mid {
                return Err(Error::MeshInvalid(format!(
                    "fine vertex {v} is not the midpoint of coarse edge ({a}, {b})"
                )));
            }
            for &end in &[a, b] {
                if let Some(col) = coarse.free_index(end) {
                    triplets.push((row, col, 0.5));
                }
            }
        }
    }
    SparseMatrix::from_triplets(fine.n_free(), coarse.n_free(), &triplets)
}
