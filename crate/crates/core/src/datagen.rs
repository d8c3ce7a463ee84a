//! Training-corpus generation: stochastic region growing of heterogeneous
//! parameter fields ("infarct" phantoms) and the two-valued dataset fed to
//! the auto-encoder.

use std::io::Read;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::exec;
use crate::geometry::MeshGraph;
use crate::seed::{derive_seed_indexed, rng_from};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowthMode {
    /// One of the five nearest non-member nodes joins at random each step.
    RandomGrowth,
    /// The non-member node closest to the member centroid joins each step.
    CompactGrowth,
}

#[derive(Debug, Clone, Copy)]
pub enum SeedNode {
    Node(usize),
    Random,
}

#[derive(Debug, Clone)]
pub struct InfarctSpec {
    pub size_fraction: f64,
    pub seed_node: SeedNode,
    pub mode: GrowthMode,
    pub rng_seed: u64,
}

impl InfarctSpec {
    fn target_count(&self, mesh: &MeshGraph) -> Result<usize> {
        if !(self.size_fraction > 0.0 && self.size_fraction < 1.0) {
            return Err(CoreError::invalid(format!(
                "size_fraction must lie in (0, 1), got {}",
                self.size_fraction
            )));
        }
        let target = (self.size_fraction * mesh.n_nodes() as f64).round() as usize;
        if target < 1 {
            return Err(CoreError::invalid(format!(
                "size_fraction {} rounds to an empty region on {} nodes",
                self.size_fraction,
                mesh.n_nodes()
            )));
        }
        if target >= mesh.n_nodes() {
            return Err(CoreError::invalid(format!(
                "target region of {target} nodes must be smaller than the mesh"
            )));
        }
        Ok(target)
    }

    fn resolve_seed_node(&self, mesh: &MeshGraph, rng: &mut impl Rng) -> Result<usize> {
        match self.seed_node {
            SeedNode::Node(i) if i < mesh.n_nodes() => Ok(i),
            SeedNode::Node(i) => Err(CoreError::invalid(format!(
                "seed node {i} out of range 0..{}",
                mesh.n_nodes()
            ))),
            SeedNode::Random => Ok(rng.random_range(0..mesh.n_nodes())),
        }
    }
}

/// How many of the closest non-member nodes are candidates at each random
/// growth step.
pub const GROWTH_CANDIDATES: usize = 5;

/// Grows a region from the seed node: at each step the five non-member
/// nodes closest to the member set (minimum distance to any member, ties by
/// index) are candidates and one joins uniformly at random. Returns members
/// in insertion order.
pub fn grow_random_infarct(mesh: &MeshGraph, spec: &InfarctSpec) -> Result<Vec<usize>> {
    let target = spec.target_count(mesh)?;
    let mut rng = rng_from(spec.rng_seed);
    let seed = spec.resolve_seed_node(mesh, &mut rng)?;
    let n = mesh.n_nodes();

    let mut members = Vec::with_capacity(target);
    let mut is_member = vec![false; n];
    // minimum distance from each non-member to the current member set
    let mut min_dist = vec![f64::INFINITY; n];
    let add = |i: usize, members: &mut Vec<usize>, is_member: &mut Vec<bool>, min_dist: &mut Vec<f64>| {
        members.push(i);
        is_member[i] = true;
        for j in 0..n {
            if !is_member[j] {
                min_dist[j] = min_dist[j].min(mesh.distance(i, j));
            }
        }
    };
    add(seed, &mut members, &mut is_member, &mut min_dist);

    while members.len() < target {
        let mut frontier: Vec<usize> = (0..n).filter(|&j| !is_member[j]).collect();
        frontier.sort_by(|&a, &b| {
            min_dist[a]
                .partial_cmp(&min_dist[b])
                .unwrap()
                .then(a.cmp(&b))
        });
        frontier.truncate(GROWTH_CANDIDATES);
        let pick = frontier[rng.random_range(0..frontier.len())];
        add(pick, &mut members, &mut is_member, &mut min_dist);
    }
    Ok(members)
}

/// Grows a region by repeatedly adding the non-member node closest to the
/// centroid of the current members; ties by index. Deterministic apart from
/// an optional random seed-node draw.
pub fn grow_compact_infarct(mesh: &MeshGraph, spec: &InfarctSpec) -> Result<Vec<usize>> {
    let target = spec.target_count(mesh)?;
    let mut rng = rng_from(spec.rng_seed);
    let seed = spec.resolve_seed_node(mesh, &mut rng)?;
    let n = mesh.n_nodes();

    let mut members = vec![seed];
    let mut is_member = vec![false; n];
    is_member[seed] = true;
    let mut centroid = mesh.position(seed);

    while members.len() < target {
        let mut best: Option<(f64, usize)> = None;
        for j in 0..n {
            if is_member[j] {
                continue;
            }
            let d = mesh.distance_to_point(j, centroid);
            match best {
                Some((bd, bj)) if (d, j) >= (bd, bj) => {}
                _ => best = Some((d, j)),
            }
        }
        let (_, pick) = best.expect("target < n_nodes leaves a non-member");
        members.push(pick);
        is_member[pick] = true;
        let m = members.len() as f64;
        let p = mesh.position(pick);
        for k in 0..3 {
            centroid[k] += (p[k] - centroid[k]) / m;
        }
    }
    Ok(members)
}

/// Dataset generation settings.
#[derive(Debug, Clone)]
pub struct DatasetParams {
    pub count: usize,
    pub size_range: (f64, f64),
    /// Fraction of fields grown with [`GrowthMode::RandomGrowth`]; the rest
    /// use compact growth.
    pub random_fraction: f64,
    pub theta_healthy: f64,
    pub theta_infarct: f64,
    pub rng_seed: u64,
}

impl Default for DatasetParams {
    fn default() -> Self {
        DatasetParams {
            count: 5000,
            size_range: (0.02, 0.40),
            random_fraction: 0.7,
            theta_healthy: 0.15,
            theta_infarct: 0.5,
            rng_seed: 0,
        }
    }
}

/// Two-valued training corpus: N parameter fields over one mesh.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// N x n_nodes.
    pub fields: Array2<f64>,
    pub theta_healthy: f64,
    pub theta_infarct: f64,
    /// Fingerprint of the mesh the fields were grown on; empty when unknown
    /// (e.g. loaded from a bare binary with no sidecar).
    pub mesh_fingerprint: String,
}

const DATASET_MAGIC: &[u8; 4] = b"THET";

impl Dataset {
    pub fn n_fields(&self) -> usize {
        self.fields.nrows()
    }

    pub fn n_nodes(&self) -> usize {
        self.fields.ncols()
    }

    pub fn field(&self, i: usize) -> crate::epsim::ParamField {
        crate::epsim::ParamField::new(self.fields.row(i).to_vec())
            .expect("dataset rows are valid parameter fields")
    }

    /// Infarct node set of row `i` (entries equal to `theta_infarct`, up to
    /// f32 storage rounding).
    pub fn infarct_set(&self, i: usize) -> Vec<usize> {
        let hi32 = f64::from(self.theta_infarct as f32);
        self.fields
            .row(i)
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == self.theta_infarct || v == hi32)
            .map(|(j, _)| j)
            .collect()
    }

    /// Checks the two-valued invariant and the mesh binding. Values equal to
    /// the f32 round-trip of either theta are accepted because the on-disk
    /// format stores 32-bit floats.
    pub fn validate(&self, mesh: &MeshGraph) -> Result<()> {
        if self.n_nodes() != mesh.n_nodes() {
            return Err(CoreError::DimensionMismatch {
                context: "dataset columns vs mesh nodes",
                expected: mesh.n_nodes(),
                got: self.n_nodes(),
            });
        }
        if !self.mesh_fingerprint.is_empty() && self.mesh_fingerprint != mesh.fingerprint() {
            return Err(CoreError::FingerprintMismatch {
                artifact: self.mesh_fingerprint.clone(),
                mesh: mesh.fingerprint(),
            });
        }
        let lo = [self.theta_healthy, f64::from(self.theta_healthy as f32)];
        let hi = [self.theta_infarct, f64::from(self.theta_infarct as f32)];
        for (i, row) in self.fields.outer_iter().enumerate() {
            let mut any_infarct = false;
            for &v in row.iter() {
                if hi.contains(&v) {
                    any_infarct = true;
                } else if !lo.contains(&v) {
                    return Err(CoreError::invalid(format!(
                        "field {i} contains value {v} outside {{theta_healthy, theta_infarct}}"
                    )));
                }
            }
            if !any_infarct {
                return Err(CoreError::invalid(format!("field {i} has no infarct nodes")));
            }
        }
        Ok(())
    }

    /// Binary format: magic "THET", u32 LE (N, n_nodes), f64 LE
    /// (theta_healthy, theta_infarct), then row-major f32 LE field values.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(28 + self.fields.len() * 4);
        buf.extend_from_slice(DATASET_MAGIC);
        buf.extend_from_slice(&(self.n_fields() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.n_nodes() as u32).to_le_bytes());
        buf.extend_from_slice(&self.theta_healthy.to_le_bytes());
        buf.extend_from_slice(&self.theta_infarct.to_le_bytes());
        for v in self.fields.iter() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let name = path.display().to_string();
        let mut f = std::fs::File::open(path)?;
        let mut header = [0u8; 28];
        f.read_exact(&mut header)
            .map_err(|_| CoreError::malformed(&name, "truncated header"))?;
        if &header[..4] != DATASET_MAGIC {
            return Err(CoreError::malformed(&name, "bad magic, expected THET"));
        }
        let n = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        let n_nodes = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let theta_healthy = f64::from_le_bytes(header[12..20].try_into().unwrap());
        let theta_infarct = f64::from_le_bytes(header[20..28].try_into().unwrap());
        let mut data = vec![0u8; n * n_nodes * 4];
        f.read_exact(&mut data)
            .map_err(|_| CoreError::malformed(&name, "truncated payload"))?;
        let values: Vec<f64> = data
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        let fields = Array2::from_shape_vec((n, n_nodes), values)
            .map_err(|e| CoreError::malformed(&name, e.to_string()))?;
        Ok(Dataset {
            fields,
            theta_healthy,
            theta_infarct,
            mesh_fingerprint: String::new(),
        })
    }
}

/// Generates `count` two-valued fields. Sizes are uniform over `size_range`,
/// seed nodes uniform over the mesh, and the growth mode random vs compact
/// per `random_fraction`. Every field derives its own child seed, so
/// parallel and serial generation produce identical datasets.
pub fn make_dataset(mesh: &MeshGraph, params: &DatasetParams) -> Result<Dataset> {
    let (lo, hi) = params.size_range;
    if params.count == 0 {
        return Err(CoreError::invalid("dataset count must be at least 1"));
    }
    if !(lo > 0.0 && hi < 1.0 && lo <= hi) {
        return Err(CoreError::invalid(format!(
            "size range ({lo}, {hi}) must satisfy 0 < lo <= hi < 1"
        )));
    }
    if !(0.0..=1.0).contains(&params.random_fraction) {
        return Err(CoreError::invalid("random_fraction must lie in [0, 1]"));
    }
    let n = mesh.n_nodes();
    let rows: Vec<Result<Vec<f64>>> = exec::map_range(params.count, |i| {
        let child = derive_seed_indexed(params.rng_seed, "field", i as u64);
        let mut rng = rng_from(child);
        let size = lo + (hi - lo) * rng.random::<f64>();
        let seed_node = rng.random_range(0..n);
        let mode = if rng.random::<f64>() < params.random_fraction {
            GrowthMode::RandomGrowth
        } else {
            GrowthMode::CompactGrowth
        };
        let spec = InfarctSpec {
            size_fraction: size,
            seed_node: SeedNode::Node(seed_node),
            mode,
            rng_seed: derive_seed_indexed(child, "grow", 0),
        };
        let members = match mode {
            GrowthMode::RandomGrowth => grow_random_infarct(mesh, &spec)?,
            GrowthMode::CompactGrowth => grow_compact_infarct(mesh, &spec)?,
        };
        let mut row = vec![params.theta_healthy; n];
        for m in members {
            row[m] = params.theta_infarct;
        }
        Ok(row)
    });
    let mut flat = Vec::with_capacity(params.count * n);
    for row in rows {
        flat.extend_from_slice(&row?);
    }
    Ok(Dataset {
        fields: Array2::from_shape_vec((params.count, n), flat).expect("consistent row lengths"),
        theta_healthy: params.theta_healthy,
        theta_infarct: params.theta_infarct,
        mesh_fingerprint: mesh.fingerprint(),
    })
}
