//! Discrete spatial substrate: node graph, neighbor queries, the graph
//! Laplacian diffusion operator, and segment partitions for the
//! fixed-segment baseline.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Node graph with positions, undirected edges, and a segment label per node.
///
/// Immutable after construction; validation happens once in [`MeshGraph::new`].
#[derive(Debug, Clone)]
pub struct MeshGraph {
    positions: Vec<[f64; 3]>,
    dim: usize,
    edges: Vec<(usize, usize)>,
    adjacency: Vec<Vec<usize>>,
    segment_of: Vec<usize>,
    n_segments: usize,
    grid: Option<(usize, usize)>,
}

#[derive(Serialize, Deserialize)]
struct MeshFile {
    nodes: Vec<Vec<f64>>,
    edges: Vec<[usize; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    segments: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    grid: Option<[usize; 2]>,
}

impl MeshGraph {
    /// Builds and validates a mesh from raw node positions (2- or 3-long
    /// coordinate tuples), undirected edges, and optional segment labels.
    pub fn new(
        nodes: Vec<Vec<f64>>,
        edges: Vec<(usize, usize)>,
        segments: Option<Vec<usize>>,
    ) -> Result<Self> {
        Self::with_grid(nodes, edges, segments, None)
    }

    fn with_grid(
        nodes: Vec<Vec<f64>>,
        edges: Vec<(usize, usize)>,
        segments: Option<Vec<usize>>,
        grid: Option<(usize, usize)>,
    ) -> Result<Self> {
        if nodes.is_empty() {
            return Err(CoreError::invalid("mesh has no nodes"));
        }
        let dim = nodes[0].len();
        if dim != 2 && dim != 3 {
            return Err(CoreError::invalid(format!(
                "node coordinates must have length 2 or 3, got {dim}"
            )));
        }
        let mut positions = Vec::with_capacity(nodes.len());
        for (i, c) in nodes.iter().enumerate() {
            if c.len() != dim {
                return Err(CoreError::invalid(format!(
                    "node {i} has {} coordinates, expected {dim}",
                    c.len()
                )));
            }
            if c.iter().any(|x| !x.is_finite()) {
                return Err(CoreError::invalid(format!("node {i} has non-finite coordinates")));
            }
            let mut p = [0.0; 3];
            p[..dim].copy_from_slice(c);
            positions.push(p);
        }
        let n = positions.len();

        let mut seen = HashSet::new();
        let mut adjacency = vec![Vec::new(); n];
        for &(a, b) in &edges {
            if a >= n || b >= n {
                return Err(CoreError::invalid(format!(
                    "edge ({a}, {b}) references a node outside 0..{n}"
                )));
            }
            if a == b {
                return Err(CoreError::invalid(format!("self-loop at node {a}")));
            }
            let key = (a.min(b), a.max(b));
            if !seen.insert(key) {
                return Err(CoreError::invalid(format!("duplicate edge ({a}, {b})")));
            }
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        for adj in &mut adjacency {
            adj.sort_unstable();
        }

        // connectivity from node 0
        let mut visited = vec![false; n];
        let mut stack = vec![0usize];
        visited[0] = true;
        let mut count = 1;
        while let Some(i) = stack.pop() {
            for &j in &adjacency[i] {
                if !visited[j] {
                    visited[j] = true;
                    count += 1;
                    stack.push(j);
                }
            }
        }
        if count != n {
            return Err(CoreError::invalid(format!(
                "mesh is disconnected: {count} of {n} nodes reachable from node 0"
            )));
        }

        let segment_of = segments.unwrap_or_else(|| vec![0; n]);
        if segment_of.len() != n {
            return Err(CoreError::DimensionMismatch {
                context: "segment labels",
                expected: n,
                got: segment_of.len(),
            });
        }
        let n_segments = segment_of.iter().copied().max().unwrap() + 1;
        let mut sizes = vec![0usize; n_segments];
        for &s in &segment_of {
            sizes[s] += 1;
        }
        if sizes.iter().any(|&c| c == 0) {
            return Err(CoreError::invalid(
                "segment indices must form a contiguous range with no empty segment",
            ));
        }

        Ok(MeshGraph {
            positions,
            dim,
            edges,
            adjacency,
            segment_of,
            n_segments,
            grid,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.positions.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Position as a 3-vector (z = 0 for 2D meshes).
    pub fn position(&self, i: usize) -> [f64; 3] {
        self.positions[i]
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i].len()
    }

    pub fn max_degree(&self) -> usize {
        self.adjacency.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn segment_of(&self, i: usize) -> usize {
        self.segment_of[i]
    }

    pub fn segment_labels(&self) -> &[usize] {
        &self.segment_of
    }

    pub fn n_segments(&self) -> usize {
        self.n_segments
    }

    /// Grid dimensions (width, height) if this mesh was built as a lattice.
    pub fn grid_dims(&self) -> Option<(usize, usize)> {
        self.grid
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        let a = self.positions[i];
        let b = self.positions[j];
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    }

    pub fn distance_to_point(&self, i: usize, p: [f64; 3]) -> f64 {
        let a = self.positions[i];
        ((a[0] - p[0]).powi(2) + (a[1] - p[1]).powi(2) + (a[2] - p[2]).powi(2)).sqrt()
    }

    /// Stable content hash over positions, edges, and segment labels; used to
    /// tie downstream artifacts to the mesh they were built on.
    pub fn fingerprint(&self) -> String {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        eat(b"MESH");
        eat(&(self.positions.len() as u64).to_le_bytes());
        eat(&(self.dim as u64).to_le_bytes());
        for p in &self.positions {
            for c in &p[..self.dim] {
                eat(&c.to_le_bytes());
            }
        }
        eat(&(self.edges.len() as u64).to_le_bytes());
        for &(a, b) in &self.edges {
            eat(&(a as u64).to_le_bytes());
            eat(&(b as u64).to_le_bytes());
        }
        for &s in &self.segment_of {
            eat(&(s as u64).to_le_bytes());
        }
        let mut out = String::with_capacity(16);
        write!(out, "{h:016x}").unwrap();
        out
    }

    pub fn to_json(&self) -> String {
        let file = MeshFile {
            nodes: self
                .positions
                .iter()
                .map(|p| p[..self.dim].to_vec())
                .collect(),
            edges: self.edges.iter().map(|&(a, b)| [a, b]).collect(),
            segments: if self.n_segments > 1 {
                Some(self.segment_of.clone())
            } else {
                None
            },
            grid: self.grid.map(|(w, h)| [w, h]),
        };
        serde_json::to_string_pretty(&file).expect("mesh serialization cannot fail")
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let file: MeshFile = serde_json::from_str(text)
            .map_err(|e| CoreError::malformed(origin, e.to_string()))?;
        let grid = file.grid.map(|[w, h]| (w, h));
        let mesh = Self::with_grid(
            file.nodes,
            file.edges.iter().map(|&[a, b]| (a, b)).collect(),
            file.segments,
            grid,
        )?;
        if let Some((w, h)) = mesh.grid {
            if w * h != mesh.n_nodes() {
                return Err(CoreError::malformed(
                    origin,
                    format!("grid {w}x{h} does not match {} nodes", mesh.n_nodes()),
                ));
            }
        }
        Ok(mesh)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text, &path.display().to_string())
    }
}

/// 4-connected lattice of `width`x`height` nodes at integer coordinates,
/// all in a single segment. Node index is `y * width + x`.
pub fn build_grid_mesh(width: usize, height: usize) -> Result<MeshGraph> {
    if width < 2 || height < 2 {
        return Err(CoreError::invalid(format!(
            "grid must be at least 2x2, got {width}x{height}"
        )));
    }
    let mut nodes = Vec::with_capacity(width * height);
    let mut edges = Vec::new();
    for y in 0..height {
        for x in 0..width {
            nodes.push(vec![x as f64, y as f64]);
            let i = y * width + x;
            if x + 1 < width {
                edges.push((i, i + 1));
            }
            if y + 1 < height {
                edges.push((i, i + width));
            }
        }
    }
    MeshGraph::with_grid(nodes, edges, None, Some((width, height)))
}

/// The `k` nodes closest to `node` by Euclidean distance, excluding `node`
/// itself; ties broken by ascending node index.
pub fn k_nearest_neighbors(mesh: &MeshGraph, node: usize, k: usize) -> Result<Vec<usize>> {
    let n = mesh.n_nodes();
    if node >= n {
        return Err(CoreError::invalid(format!("node index {node} out of range 0..{n}")));
    }
    if k == 0 || k >= n {
        return Err(CoreError::invalid(format!(
            "k must satisfy 1 <= k < n_nodes ({n}), got {k}"
        )));
    }
    let mut order: Vec<usize> = (0..n).filter(|&i| i != node).collect();
    order.sort_by(|&a, &b| {
        mesh.distance(node, a)
            .partial_cmp(&mesh.distance(node, b))
            .unwrap()
            .then(a.cmp(&b))
    });
    order.truncate(k);
    Ok(order)
}

/// Relabels a grid mesh into `s_per_axis` x `s_per_axis` uniform spatial
/// blocks. Requires a grid-built mesh and that `s_per_axis` divides both axes.
pub fn partition_segments(mesh: &MeshGraph, s_per_axis: usize) -> Result<MeshGraph> {
    let (w, h) = mesh.grid.ok_or_else(|| {
        CoreError::invalid("segment partitioning requires a grid-built mesh")
    })?;
    if s_per_axis == 0 {
        return Err(CoreError::invalid("s_per_axis must be positive"));
    }
    if w % s_per_axis != 0 || h % s_per_axis != 0 {
        return Err(CoreError::invalid(format!(
            "s_per_axis {s_per_axis} must divide both grid axes ({w}x{h})"
        )));
    }
    let bw = w / s_per_axis;
    let bh = h / s_per_axis;
    let mut out = mesh.clone();
    for y in 0..h {
        for x in 0..w {
            out.segment_of[y * w + x] = (y / bh) * s_per_axis + x / bw;
        }
    }
    out.n_segments = s_per_axis * s_per_axis;
    Ok(out)
}

/// Scaled graph Laplacian `L = d * (A - degree diagonal)`: symmetric,
/// zero row sums, nonnegative off-diagonals.
#[derive(Debug, Clone)]
pub struct DiffusionOperator {
    adjacency: Vec<Vec<usize>>,
    d: f64,
    max_degree: usize,
}

pub fn build_diffusion(mesh: &MeshGraph, d: f64) -> Result<DiffusionOperator> {
    if !(d > 0.0) || !d.is_finite() {
        return Err(CoreError::invalid(format!("diffusion coefficient must be > 0, got {d}")));
    }
    Ok(DiffusionOperator {
        adjacency: (0..mesh.n_nodes()).map(|i| mesh.neighbors(i).to_vec()).collect(),
        d,
        max_degree: mesh.max_degree(),
    })
}

impl DiffusionOperator {
    pub fn n_nodes(&self) -> usize {
        self.adjacency.len()
    }

    pub fn coefficient(&self) -> f64 {
        self.d
    }

    pub fn max_degree(&self) -> usize {
        self.max_degree
    }

    /// `(L u)[i] = d * sum_j (u[j] - u[i])` over neighbors j of i.
    pub fn apply_row(&self, u: &[f64], i: usize) -> f64 {
        let adj = &self.adjacency[i];
        let mut s = -(adj.len() as f64) * u[i];
        for &j in adj {
            s += u[j];
        }
        self.d * s
    }

    pub fn apply_into(&self, u: &[f64], out: &mut [f64]) {
        debug_assert_eq!(u.len(), self.n_nodes());
        for i in 0..self.n_nodes() {
            out[i] = self.apply_row(u, i);
        }
    }

    /// Dense form, for tests and small meshes.
    pub fn to_dense(&self) -> Array2<f64> {
        let n = self.n_nodes();
        let mut m = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            m[[i, i]] = -self.d * self.adjacency[i].len() as f64;
            for &j in &self.adjacency[i] {
                m[[i, j]] = self.d;
            }
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smallest_lattice() {
        let m = build_grid_mesh(2, 2).unwrap();
        assert_eq!(m.n_nodes(), 4);
        assert_eq!(m.n_edges(), 4);
        assert_eq!(m.n_segments(), 1);
    }

    #[test]
    fn grid_16x16_edge_count() {
        // 2*w*h - w - h by direct enumeration of right+down links
        let m = build_grid_mesh(16, 16).unwrap();
        assert_eq!(m.n_nodes(), 256);
        assert_eq!(m.n_edges(), 480);
    }

    #[test]
    fn degenerate_grid_rejected() {
        assert!(build_grid_mesh(1, 5).is_err());
        assert!(build_grid_mesh(5, 1).is_err());
    }

    #[test]
    fn knn_corner_of_3x3() {
        let m = build_grid_mesh(3, 3).unwrap();
        // corner node 0 at (0,0): lattice neighbors (1,0)=1 and (0,1)=3
        assert_eq!(k_nearest_neighbors(&m, 0, 2).unwrap(), vec![1, 3]);
    }

    #[test]
    fn knn_center_of_3x3() {
        let m = build_grid_mesh(3, 3).unwrap();
        // center node 4: the four axis neighbors beat the diagonals
        assert_eq!(k_nearest_neighbors(&m, 4, 4).unwrap(), vec![1, 3, 5, 7]);
    }

    #[test]
    fn knn_preconditions() {
        let m = build_grid_mesh(3, 3).unwrap();
        assert!(k_nearest_neighbors(&m, 0, 9).is_err());
        assert!(k_nearest_neighbors(&m, 9, 2).is_err());
    }

    #[test]
    fn knn_deterministic() {
        let m = build_grid_mesh(5, 7).unwrap();
        let a = k_nearest_neighbors(&m, 12, 6).unwrap();
        let b = k_nearest_neighbors(&m, 12, 6).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn diffusion_two_node_path() {
        let m = MeshGraph::new(vec![vec![0.0, 0.0], vec![1.0, 0.0]], vec![(0, 1)], None).unwrap();
        let l = build_diffusion(&m, 1.0).unwrap().to_dense();
        assert_eq!(l[[0, 0]], -1.0);
        assert_eq!(l[[0, 1]], 1.0);
        assert_eq!(l[[1, 0]], 1.0);
        assert_eq!(l[[1, 1]], -1.0);
    }

    #[test]
    fn diffusion_invariants_on_grid() {
        let m = build_grid_mesh(6, 5).unwrap();
        let op = build_diffusion(&m, 0.37).unwrap();
        let l = op.to_dense();
        let n = m.n_nodes();
        for i in 0..n {
            let row_sum: f64 = (0..n).map(|j| l[[i, j]]).sum();
            assert!(row_sum.abs() < 1e-12);
            for j in 0..n {
                assert_eq!(l[[i, j]], l[[j, i]]);
                if i != j {
                    assert!(l[[i, j]] >= 0.0);
                }
            }
        }
    }

    #[test]
    fn diffusion_kills_constant_field() {
        let m = build_grid_mesh(16, 16).unwrap();
        let op = build_diffusion(&m, 0.1).unwrap();
        let u = vec![3.25; 256];
        let mut out = vec![0.0; 256];
        op.apply_into(&u, &mut out);
        assert!(out.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn diffusion_rejects_bad_coefficient() {
        let m = build_grid_mesh(2, 2).unwrap();
        assert!(build_diffusion(&m, 0.0).is_err());
        assert!(build_diffusion(&m, -1.0).is_err());
    }

    #[test]
    fn partition_16x16_into_16_blocks() {
        let m = build_grid_mesh(16, 16).unwrap();
        let p = partition_segments(&m, 4).unwrap();
        assert_eq!(p.n_segments(), 16);
        let mut sizes = vec![0usize; 16];
        for i in 0..256 {
            sizes[p.segment_of(i)] += 1;
        }
        assert!(sizes.iter().all(|&s| s == 16));
    }

    #[test]
    fn partition_trivial_and_invalid() {
        let m = build_grid_mesh(16, 16).unwrap();
        assert_eq!(partition_segments(&m, 1).unwrap().n_segments(), 1);
        assert!(partition_segments(&m, 3).is_err());
    }

    #[test]
    fn mesh_validation_catches_defects() {
        // self-loop
        assert!(MeshGraph::new(vec![vec![0.0, 0.0], vec![1.0, 0.0]], vec![(0, 0)], None).is_err());
        // duplicate edge (either orientation)
        assert!(
            MeshGraph::new(vec![vec![0.0, 0.0], vec![1.0, 0.0]], vec![(0, 1), (1, 0)], None)
                .is_err()
        );
        // disconnected
        assert!(MeshGraph::new(
            vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![2.0, 0.0]],
            vec![(0, 1)],
            None
        )
        .is_err());
        // bad segment labels (gap)
        assert!(MeshGraph::new(
            vec![vec![0.0, 0.0], vec![1.0, 0.0]],
            vec![(0, 1)],
            Some(vec![0, 2])
        )
        .is_err());
    }

    #[test]
    fn json_round_trip_preserves_fingerprint() {
        let m = partition_segments(&build_grid_mesh(8, 4).unwrap(), 2).unwrap();
        let back = MeshGraph::from_json(&m.to_json(), "mem").unwrap();
        assert_eq!(m.fingerprint(), back.fingerprint());
        assert_eq!(back.grid_dims(), Some((8, 4)));
        assert_eq!(back.n_segments(), 4);
    }

    #[test]
    fn single_node_mesh_is_valid() {
        let m = MeshGraph::new(vec![vec![0.0, 0.0]], vec![], None).unwrap();
        assert_eq!(m.n_nodes(), 1);
        assert_eq!(m.max_degree(), 0);
    }
}
