//! Two-variable excitation dynamics on the mesh, the linear surface-lead
//! map, noise injection, and the scalar data-mismatch objective.
//!
//! The state pair (u, v) evolves by forward Euler:
//!
//! ```text
//! du/dt = L u - c u (u - theta) (u - 1) - u v        (+ stimulus)
//! dv/dt = eps(u, v) (-v - c u (u - theta - 1))
//! eps(u, v) = eps0 + mu1 v / (u + mu2)
//! ```
//!
//! where `L` is the scaled graph Laplacian and `theta` is the per-node
//! excitability field being estimated.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand_distr::{Distribution, Normal};

use crate::error::{CoreError, Result};
use crate::exec;
use crate::geometry::{DiffusionOperator, MeshGraph};
use crate::seed::rng_from;

/// Per-node excitability vector, each entry in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamField {
    values: Vec<f64>,
}

impl ParamField {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(CoreError::invalid("parameter field is empty"));
        }
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(CoreError::invalid(format!(
                    "parameter field entry {i} = {v} outside [0, 1]"
                )));
            }
        }
        Ok(ParamField { values })
    }

    pub fn constant(n: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; n])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Reaction and integration settings before validation.
#[derive(Debug, Clone)]
pub struct ApSettings {
    pub c: f64,
    pub eps0: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub dt: f64,
    pub n_steps: usize,
    pub stim_nodes: Vec<usize>,
    pub stim_amplitude: f64,
    pub stim_duration_steps: usize,
}

impl Default for ApSettings {
    fn default() -> Self {
        ApSettings {
            c: 8.0,
            eps0: 0.002,
            mu1: 0.2,
            mu2: 0.3,
            dt: 0.05,
            n_steps: 400,
            stim_nodes: vec![0],
            stim_amplitude: 1.0,
            stim_duration_steps: 5,
        }
    }
}

/// Validated simulation parameters. Construction checks the explicit-Euler
/// stability bound `dt * d * max_degree < 0.5` against the operator the
/// simulation will run with, so instability is rejected up front rather than
/// discovered mid-run.
#[derive(Debug, Clone)]
pub struct ApParams {
    settings: ApSettings,
}

impl ApParams {
    pub fn new(settings: ApSettings, diffusion: &DiffusionOperator) -> Result<Self> {
        let s = &settings;
        if !(s.dt > 0.0) || !s.dt.is_finite() {
            return Err(CoreError::invalid(format!("dt must be > 0, got {}", s.dt)));
        }
        if s.n_steps == 0 {
            return Err(CoreError::invalid("n_steps must be at least 1"));
        }
        if s.stim_duration_steps == 0 {
            return Err(CoreError::invalid("stim_duration_steps must be at least 1"));
        }
        if s.stim_nodes.is_empty() {
            return Err(CoreError::invalid("stimulus node set is empty"));
        }
        let n = diffusion.n_nodes();
        if let Some(&bad) = s.stim_nodes.iter().find(|&&i| i >= n) {
            return Err(CoreError::invalid(format!(
                "stimulus node {bad} out of range 0..{n}"
            )));
        }
        let bound = s.dt * diffusion.coefficient() * diffusion.max_degree() as f64;
        if bound >= 0.5 {
            return Err(CoreError::invalid(format!(
                "dt * d * max_degree = {bound:.4} violates the stability bound (< 0.5)"
            )));
        }
        for (name, v) in [("c", s.c), ("eps0", s.eps0), ("mu1", s.mu1), ("mu2", s.mu2)] {
            if !v.is_finite() {
                return Err(CoreError::invalid(format!("{name} must be finite, got {v}")));
            }
        }
        Ok(ApParams { settings })
    }

    pub fn settings(&self) -> &ApSettings {
        &self.settings
    }

    pub fn n_steps(&self) -> usize {
        self.settings.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.settings.dt
    }
}

/// Full action-potential history plus the final recovery state.
#[derive(Debug, Clone)]
pub struct PotentialTrace {
    /// n_nodes x n_steps; column s holds the state after Euler step s+1.
    pub u: Array2<f64>,
    /// Recovery variable after the final step.
    pub v_final: Vec<f64>,
}

/// Integrates the excitation model. Both variables advance from the same
/// time level (synchronous update); the stimulus adds `stim_amplitude` to
/// du/dt at the stimulus nodes during the first `stim_duration_steps` steps.
pub fn simulate_ap(
    diffusion: &DiffusionOperator,
    params: &ApParams,
    field: &ParamField,
) -> Result<PotentialTrace> {
    let n = diffusion.n_nodes();
    if field.len() != n {
        return Err(CoreError::DimensionMismatch {
            context: "parameter field vs mesh",
            expected: n,
            got: field.len(),
        });
    }
    let s = &params.settings;
    let theta = field.values();
    let mut u = vec![0.0f64; n];
    let mut v = vec![0.0f64; n];
    let mut trace = Array2::<f64>::zeros((n, s.n_steps));
    let mut stim = vec![0.0f64; n];
    for &i in &s.stim_nodes {
        stim[i] = s.stim_amplitude;
    }

    let mut next: Vec<(f64, f64)> = vec![(0.0, 0.0); n];
    for step in 0..s.n_steps {
        let stimulating = step < s.stim_duration_steps;
        {
            let u_ref = &u;
            let v_ref = &v;
            let stim_ref = &stim;
            exec::for_each_mut(&mut next, |i, out| {
                let ui = u_ref[i];
                let vi = v_ref[i];
                let lap = diffusion.apply_row(u_ref, i);
                let mut du = lap - s.c * ui * (ui - theta[i]) * (ui - 1.0) - ui * vi;
                if stimulating {
                    du += stim_ref[i];
                }
                let mut den = ui + s.mu2;
                if den.abs() < 1e-9 {
                    den = if den == 0.0 { 1e-9 } else { 1e-9f64.copysign(den) };
                }
                let eps = s.eps0 + s.mu1 * vi / den;
                let dv = eps * (-vi - s.c * ui * (ui - theta[i] - 1.0));
                *out = (ui + s.dt * du, vi + s.dt * dv);
            });
        }
        for i in 0..n {
            let (nu, nv) = next[i];
            if !nu.is_finite() || !nv.is_finite() || nu.abs() > 1e6 {
                return Err(CoreError::UnstableIntegration {
                    step,
                    node: i,
                    value: nu,
                });
            }
            u[i] = nu;
            v[i] = nv;
        }
        trace.column_mut(step).assign(&Array1::from_vec(u.clone()));
    }
    Ok(PotentialTrace { u: trace, v_final: v })
}

/// Linear map from node potentials to surface-lead potentials.
#[derive(Debug, Clone, PartialEq)]
pub struct LeadField {
    pub h: Array2<f64>,
}

const LEAD_MAGIC: &[u8; 4] = b"LEAD";

impl LeadField {
    pub fn n_leads(&self) -> usize {
        self.h.nrows()
    }

    pub fn n_nodes(&self) -> usize {
        self.h.ncols()
    }

    /// Binary format: magic "LEAD", two u32 LE (n_leads, n_nodes), then
    /// row-major f64 LE entries.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(12 + self.h.len() * 8);
        buf.extend_from_slice(LEAD_MAGIC);
        buf.extend_from_slice(&(self.n_leads() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.n_nodes() as u32).to_le_bytes());
        for v in self.h.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let name = path.display().to_string();
        let mut f = std::fs::File::open(path)?;
        let mut header = [0u8; 12];
        f.read_exact(&mut header)
            .map_err(|_| CoreError::malformed(&name, "truncated header"))?;
        if &header[..4] != LEAD_MAGIC {
            return Err(CoreError::malformed(&name, "bad magic, expected LEAD"));
        }
        let n_leads = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        let n_nodes = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let mut data = vec![0u8; n_leads * n_nodes * 8];
        f.read_exact(&mut data)
            .map_err(|_| CoreError::malformed(&name, "truncated payload"))?;
        let values: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let h = Array2::from_shape_vec((n_leads, n_nodes), values)
            .map_err(|e| CoreError::malformed(&name, e.to_string()))?;
        if h.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::malformed(&name, "non-finite entries"));
        }
        Ok(LeadField { h })
    }
}

/// Distance-decay lead field: `h[l][i] = 1 / (dist(e_l, x_i)^2 + 1)`, then
/// each row is mean-centered so leads measure potential differences. The
/// seed is reserved for optional electrode jitter and currently unused.
pub fn synth_lead_field(
    mesh: &MeshGraph,
    electrodes: &[[f64; 3]],
    _seed: u64,
) -> Result<LeadField> {
    if electrodes.is_empty() {
        return Err(CoreError::invalid("electrode list is empty"));
    }
    let n = mesh.n_nodes();
    let mut h = Array2::<f64>::zeros((electrodes.len(), n));
    for (l, e) in electrodes.iter().enumerate() {
        let mut row_sum = 0.0;
        for i in 0..n {
            let d = mesh.distance_to_point(i, *e);
            let w = 1.0 / (d * d + 1.0);
            h[[l, i]] = w;
            row_sum += w;
        }
        let mean = row_sum / n as f64;
        for i in 0..n {
            h[[l, i]] -= mean;
        }
    }
    Ok(LeadField { h })
}

/// Evenly spaced electrode ring around the mesh centroid, lifted off the
/// mesh plane. Sizing is relative to the largest bounding-box extent.
pub fn ring_electrodes(
    mesh: &MeshGraph,
    n_leads: usize,
    radius_factor: f64,
    height_factor: f64,
) -> Result<Vec<[f64; 3]>> {
    if n_leads == 0 {
        return Err(CoreError::invalid("n_leads must be at least 1"));
    }
    let n = mesh.n_nodes() as f64;
    let mut center = [0.0f64; 3];
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for i in 0..mesh.n_nodes() {
        let p = mesh.position(i);
        for k in 0..3 {
            center[k] += p[k] / n;
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let extent = (0..3).map(|k| hi[k] - lo[k]).fold(0.0f64, f64::max).max(1.0);
    let radius = radius_factor * extent;
    let height = height_factor * extent;
    let mut out = Vec::with_capacity(n_leads);
    for l in 0..n_leads {
        let phi = 2.0 * std::f64::consts::PI * l as f64 / n_leads as f64;
        out.push([
            center[0] + radius * phi.cos(),
            center[1] + radius * phi.sin(),
            center[2] + height,
        ]);
    }
    Ok(out)
}

/// Surface-lead time series, n_leads x n_steps.
#[derive(Debug, Clone, PartialEq)]
pub struct EcgTrace {
    pub y: Array2<f64>,
}

impl EcgTrace {
    pub fn n_leads(&self) -> usize {
        self.y.nrows()
    }

    pub fn n_steps(&self) -> usize {
        self.y.ncols()
    }

    /// CSV layout: one row per time step, one column per lead, full float
    /// precision (shortest round-trip decimal).
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for t in 0..self.n_steps() {
            let mut line = String::new();
            for l in 0..self.n_leads() {
                if l > 0 {
                    line.push(',');
                }
                line.push_str(&format!("{}", self.y[[l, t]]));
            }
            line.push('\n');
            out.write_all(line.as_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let name = path.display().to_string();
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: Vec<f64> = line
                .split(',')
                .map(|s| {
                    s.trim().parse::<f64>().map_err(|e| {
                        CoreError::malformed(&name, format!("line {}: {e}", lineno + 1))
                    })
                })
                .collect::<Result<_>>()?;
            if let Some(first) = rows.first() {
                if row.len() != first.len() {
                    return Err(CoreError::malformed(
                        &name,
                        format!("line {}: ragged row", lineno + 1),
                    ));
                }
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(CoreError::malformed(&name, "no data rows"));
        }
        let n_steps = rows.len();
        let n_leads = rows[0].len();
        let mut y = Array2::<f64>::zeros((n_leads, n_steps));
        for (t, row) in rows.iter().enumerate() {
            for (l, &v) in row.iter().enumerate() {
                y[[l, t]] = v;
            }
        }
        Ok(EcgTrace { y })
    }
}

/// `y = h * u`, exact linearity.
pub fn forward_ecg(lead_field: &LeadField, trace: &PotentialTrace) -> Result<EcgTrace> {
    if lead_field.n_nodes() != trace.u.nrows() {
        return Err(CoreError::DimensionMismatch {
            context: "lead field columns vs trace nodes",
            expected: lead_field.n_nodes(),
            got: trace.u.nrows(),
        });
    }
    Ok(EcgTrace {
        y: lead_field.h.dot(&trace.u),
    })
}

/// Adds i.i.d. zero-mean Gaussian noise with variance chosen so the
/// signal-to-noise ratio is `snr_db` decibels against the mean squared
/// signal. An infinite `snr_db` returns the input unchanged.
pub fn add_noise_snr(y: &EcgTrace, snr_db: f64, seed: u64) -> Result<EcgTrace> {
    if snr_db.is_infinite() && snr_db > 0.0 {
        return Ok(y.clone());
    }
    let power = y.y.iter().map(|v| v * v).sum::<f64>() / y.y.len() as f64;
    if power == 0.0 {
        return Err(CoreError::invalid(
            "cannot scale noise to an all-zero signal (SNR undefined)",
        ));
    }
    let noise_var = power / 10f64.powf(snr_db / 10.0);
    let normal = Normal::new(0.0, noise_var.sqrt()).expect("finite std");
    let mut rng = rng_from(seed);
    let mut out = y.y.clone();
    for v in out.iter_mut() {
        *v += normal.sample(&mut rng);
    }
    Ok(EcgTrace { y: out })
}

/// The full forward pipeline (diffusion + reaction parameters + lead field)
/// bundled so objective evaluations carry one context object.
#[derive(Debug, Clone)]
pub struct ForwardModel {
    pub diffusion: DiffusionOperator,
    pub params: ApParams,
    pub lead_field: LeadField,
}

impl ForwardModel {
    pub fn new(diffusion: DiffusionOperator, params: ApParams, lead_field: LeadField) -> Result<Self> {
        if lead_field.n_nodes() != diffusion.n_nodes() {
            return Err(CoreError::DimensionMismatch {
                context: "lead field columns vs mesh",
                expected: diffusion.n_nodes(),
                got: lead_field.n_nodes(),
            });
        }
        Ok(ForwardModel {
            diffusion,
            params,
            lead_field,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.diffusion.n_nodes()
    }

    pub fn simulate(&self, field: &ParamField) -> Result<EcgTrace> {
        let trace = simulate_ap(&self.diffusion, &self.params, field)?;
        forward_ecg(&self.lead_field, &trace)
    }

    /// Negated squared Frobenius mismatch between the measurement and the
    /// simulated surface data for `field`; always <= 0.
    pub fn objective_mismatch(&self, measured: &EcgTrace, field: &ParamField) -> Result<f64> {
        let sim = self.simulate(field)?;
        if sim.y.dim() != measured.y.dim() {
            return Err(CoreError::DimensionMismatch {
                context: "measured vs simulated trace",
                expected: measured.y.len(),
                got: sim.y.len(),
            });
        }
        let mut s = 0.0;
        for (a, b) in measured.y.iter().zip(sim.y.iter()) {
            let d = a - b;
            s += d * d;
        }
        Ok(-s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_grid_mesh;
    use crate::seed::standard_normal_vec;

    fn single_node_setup(theta: f64) -> (DiffusionOperator, ParamField) {
        let mesh = MeshGraph::new(vec![vec![0.0, 0.0]], vec![], None).unwrap();
        let diff = build_diffusion_unit(&mesh);
        let field = ParamField::new(vec![theta]).unwrap();
        (diff, field)
    }

    fn build_diffusion_unit(mesh: &MeshGraph) -> DiffusionOperator {
        crate::geometry::build_diffusion(mesh, 0.1).unwrap()
    }

    /// Fine-step reference integration of the isolated two-variable system,
    /// independent of `simulate_ap`'s loop (no trace, RK-free but 500x finer
    /// in time). Returns (max over time of u, final u).
    fn reference_single_cell(
        theta: f64,
        stim_amplitude: f64,
        stim_time: f64,
        total_time: f64,
    ) -> (f64, f64) {
        let (c, eps0, mu1, mu2) = (8.0, 0.002, 0.2, 0.3);
        let dt = 1e-4;
        let steps = (total_time / dt).round() as usize;
        let mut u = 0.0f64;
        let mut v = 0.0f64;
        let mut umax = 0.0f64;
        for s in 0..steps {
            let t = s as f64 * dt;
            let stim = if t < stim_time { stim_amplitude } else { 0.0 };
            let du = -c * u * (u - theta) * (u - 1.0) - u * v + stim;
            let eps = eps0 + mu1 * v / (u + mu2);
            let dv = eps * (-v - c * u * (u - theta - 1.0));
            u += dt * du;
            v += dt * dv;
            umax = umax.max(u);
        }
        (umax, u)
    }

    #[test]
    fn rest_state_is_fixed_point() {
        let mesh = build_grid_mesh(4, 4).unwrap();
        let diff = build_diffusion_unit(&mesh);
        let settings = ApSettings {
            stim_amplitude: 0.0,
            n_steps: 50,
            ..ApSettings::default()
        };
        let params = ApParams::new(settings, &diff).unwrap();
        let field = ParamField::constant(16, 0.15).unwrap();
        let trace = simulate_ap(&diff, &params, &field).unwrap();
        assert!(trace.u.iter().all(|&x| x == 0.0));
        assert!(trace.v_final.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn supra_threshold_upstroke_matches_reference() {
        // stimulus 1.0 for 10 steps of dt=0.05 lifts u to ~0.5 >> theta
        let (umax_ref, _) = reference_single_cell(0.15, 1.0, 0.5, 20.0);
        assert!(umax_ref > 0.9, "reference integrator upstroke: {umax_ref}");

        let (diff, field) = single_node_setup(0.15);
        let settings = ApSettings {
            stim_duration_steps: 10,
            ..ApSettings::default()
        };
        let params = ApParams::new(settings, &diff).unwrap();
        let trace = simulate_ap(&diff, &params, &field).unwrap();
        let umax = trace.u.iter().cloned().fold(f64::MIN, f64::max);
        assert!(umax > 0.9, "simulated upstroke too small: {umax}");
    }

    #[test]
    fn sub_threshold_perturbation_decays() {
        // one step of amplitude 1.0 at dt=0.05 leaves u = 0.05 < theta
        let (umax_ref, ufin_ref) = reference_single_cell(0.15, 1.0, 0.05, 20.0);
        assert!(umax_ref < 0.15);
        assert!(ufin_ref.abs() < 1e-3);

        let (diff, field) = single_node_setup(0.15);
        let settings = ApSettings {
            stim_duration_steps: 1,
            ..ApSettings::default()
        };
        let params = ApParams::new(settings, &diff).unwrap();
        let trace = simulate_ap(&diff, &params, &field).unwrap();
        let n_steps = params.n_steps();
        // monotone decay after the stimulus step
        for s in 1..n_steps - 1 {
            assert!(trace.u[[0, s + 1]] <= trace.u[[0, s]] + 1e-15);
        }
        assert!(trace.u[[0, n_steps - 1]].abs() < 1e-3);
    }

    #[test]
    fn stability_bound_checked_at_construction() {
        let mesh = build_grid_mesh(4, 4).unwrap();
        let diff = crate::geometry::build_diffusion(&mesh, 2.0).unwrap();
        // dt * d * max_degree = 0.05 * 2 * 4 = 0.4 < 0.5 ok
        assert!(ApParams::new(ApSettings::default(), &diff).is_ok());
        let diff = crate::geometry::build_diffusion(&mesh, 3.0).unwrap();
        // 0.05 * 3 * 4 = 0.6 >= 0.5 rejected
        assert!(ApParams::new(ApSettings::default(), &diff).is_err());
    }

    #[test]
    fn simulation_is_deterministic() {
        let mesh = build_grid_mesh(8, 8).unwrap();
        let diff = build_diffusion_unit(&mesh);
        let params = ApParams::new(
            ApSettings {
                n_steps: 120,
                ..ApSettings::default()
            },
            &diff,
        )
        .unwrap();
        let field = ParamField::constant(64, 0.15).unwrap();
        let a = simulate_ap(&diff, &params, &field).unwrap();
        let b = simulate_ap(&diff, &params, &field).unwrap();
        assert_eq!(a.u, b.u);
        assert_eq!(a.v_final, b.v_final);
    }

    #[test]
    fn lead_field_symmetric_electrode() {
        let mesh = MeshGraph::new(
            vec![vec![0.0, 0.0], vec![2.0, 0.0]],
            vec![(0, 1)],
            None,
        )
        .unwrap();
        // electrode equidistant from both nodes
        let lf = synth_lead_field(&mesh, &[[1.0, 5.0, 0.0]], 0).unwrap();
        assert!(lf.h[[0, 0]].abs() < 1e-15);
        assert!(lf.h[[0, 1]].abs() < 1e-15);
    }

    #[test]
    fn lead_field_rows_sum_to_zero() {
        let mesh = build_grid_mesh(5, 4).unwrap();
        let electrodes = ring_electrodes(&mesh, 7, 0.6, 0.25).unwrap();
        let lf = synth_lead_field(&mesh, &electrodes, 0).unwrap();
        for l in 0..lf.n_leads() {
            let s: f64 = lf.h.row(l).sum();
            assert!(s.abs() < 1e-12, "row {l} sums to {s}");
        }
    }

    #[test]
    fn lead_field_peak_at_zero_distance() {
        let mesh = build_grid_mesh(2, 2).unwrap();
        let n = mesh.n_nodes() as f64;
        let lf = synth_lead_field(&mesh, &[[0.0, 0.0, 0.0]], 0).unwrap();
        // pre-centering h[0][0] = 1; centering subtracts the row mean
        let others: f64 = (1..4)
            .map(|i| {
                let d = mesh.distance_to_point(i, [0.0, 0.0, 0.0]);
                1.0 / (d * d + 1.0)
            })
            .sum();
        let mean = (1.0 + others) / n;
        assert!((lf.h[[0, 0]] - (1.0 - mean)).abs() < 1e-15);
    }

    #[test]
    fn forward_ecg_zero_and_identity() {
        let trace = PotentialTrace {
            u: Array2::zeros((3, 5)),
            v_final: vec![0.0; 3],
        };
        let lf = LeadField {
            h: Array2::eye(3),
        };
        let y = forward_ecg(&lf, &trace).unwrap();
        assert!(y.y.iter().all(|&x| x == 0.0));

        let mut u = Array2::zeros((3, 2));
        u[[0, 0]] = 1.0;
        u[[2, 1]] = -2.5;
        let trace = PotentialTrace {
            u: u.clone(),
            v_final: vec![0.0; 3],
        };
        let y = forward_ecg(&lf, &trace).unwrap();
        assert_eq!(y.y, u);
    }

    #[test]
    fn forward_ecg_is_linear() {
        let mut rng = rng_from(42);
        let h = Array2::from_shape_vec(
            (4, 6),
            standard_normal_vec(&mut rng, 24),
        )
        .unwrap();
        let u1 = Array2::from_shape_vec((6, 9), standard_normal_vec(&mut rng, 54)).unwrap();
        let u2 = Array2::from_shape_vec((6, 9), standard_normal_vec(&mut rng, 54)).unwrap();
        let lf = LeadField { h };
        let (a, b) = (1.7, -0.4);
        let combo = PotentialTrace {
            u: a * &u1 + b * &u2,
            v_final: vec![0.0; 6],
        };
        let y_combo = forward_ecg(&lf, &combo).unwrap();
        let y1 = forward_ecg(&lf, &PotentialTrace { u: u1, v_final: vec![0.0; 6] }).unwrap();
        let y2 = forward_ecg(&lf, &PotentialTrace { u: u2, v_final: vec![0.0; 6] }).unwrap();
        let expect = a * &y1.y + b * &y2.y;
        for (x, e) in y_combo.y.iter().zip(expect.iter()) {
            assert!((x - e).abs() < 1e-10);
        }
    }

    #[test]
    fn noise_power_ratio_at_20db() {
        let mut rng = rng_from(3);
        let y = EcgTrace {
            y: Array2::from_shape_vec((120, 200), standard_normal_vec(&mut rng, 24000)).unwrap(),
        };
        let signal_power = y.y.iter().map(|v| v * v).sum::<f64>() / y.y.len() as f64;
        for seed in 0..10u64 {
            let noisy = add_noise_snr(&y, 20.0, seed).unwrap();
            let noise_power = noisy
                .y
                .iter()
                .zip(y.y.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / y.y.len() as f64;
            let snr = 10.0 * (signal_power / noise_power).log10();
            assert!(
                (snr - 20.0).abs() < 0.5,
                "seed {seed}: empirical snr {snr:.3} dB"
            );
        }
    }

    #[test]
    fn noise_no_noise_sentinel_and_zero_signal() {
        let y = EcgTrace {
            y: Array2::from_elem((2, 3), 1.5),
        };
        let out = add_noise_snr(&y, f64::INFINITY, 9).unwrap();
        assert_eq!(out.y, y.y);
        let zero = EcgTrace {
            y: Array2::zeros((2, 3)),
        };
        assert!(add_noise_snr(&zero, 20.0, 9).is_err());
    }

    #[test]
    fn noise_deterministic_per_seed() {
        let y = EcgTrace {
            y: Array2::from_elem((4, 5), 0.7),
        };
        let a = add_noise_snr(&y, 10.0, 11).unwrap();
        let b = add_noise_snr(&y, 10.0, 11).unwrap();
        assert_eq!(a.y, b.y);
        let c = add_noise_snr(&y, 10.0, 12).unwrap();
        assert_ne!(a.y, c.y);
    }

    #[test]
    fn objective_zero_at_truth_and_ordered() {
        let mesh = build_grid_mesh(6, 6).unwrap();
        let diff = build_diffusion_unit(&mesh);
        let params = ApParams::new(
            ApSettings {
                n_steps: 150,
                ..ApSettings::default()
            },
            &diff,
        )
        .unwrap();
        let electrodes = ring_electrodes(&mesh, 12, 0.6, 0.25).unwrap();
        let lf = synth_lead_field(&mesh, &electrodes, 0).unwrap();
        let fm = ForwardModel::new(diff, params, lf).unwrap();

        let mut truth = vec![0.15; 36];
        for i in [14, 15, 20, 21] {
            truth[i] = 0.5;
        }
        let truth = ParamField::new(truth).unwrap();
        let measured = fm.simulate(&truth).unwrap();

        let at_truth = fm.objective_mismatch(&measured, &truth).unwrap();
        assert!(at_truth.abs() < 1e-9);

        // flipped labels are strictly worse
        let flipped = ParamField::new(
            truth
                .values()
                .iter()
                .map(|&v| if v == 0.5 { 0.15 } else { 0.5 })
                .collect(),
        )
        .unwrap();
        let at_flipped = fm.objective_mismatch(&measured, &flipped).unwrap();
        assert!(at_flipped < at_truth);
        assert!(at_flipped <= 0.0);
    }

    #[test]
    fn ecg_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        let mut rng = rng_from(5);
        let y = EcgTrace {
            y: Array2::from_shape_vec((3, 7), standard_normal_vec(&mut rng, 21)).unwrap(),
        };
        y.save_csv(&path).unwrap();
        let back = EcgTrace::load_csv(&path).unwrap();
        assert_eq!(y.y, back.y);
    }

    #[test]
    fn lead_field_binary_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lead.bin");
        let mesh = build_grid_mesh(3, 3).unwrap();
        let lf = synth_lead_field(&mesh, &[[1.0, 1.0, 2.0], [0.0, 0.0, 1.0]], 0).unwrap();
        lf.save(&path).unwrap();
        let back = LeadField::load(&path).unwrap();
        assert_eq!(lf.h, back.h);

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            LeadField::load(&path),
            Err(CoreError::Malformed { .. })
        ));
    }

    #[test]
    fn param_field_validation() {
        assert!(ParamField::new(vec![0.0, 1.0, 0.5]).is_ok());
        assert!(ParamField::new(vec![1.1]).is_err());
        assert!(ParamField::new(vec![-0.1]).is_err());
        assert!(ParamField::new(vec![f64::NAN]).is_err());
        assert!(ParamField::new(vec![]).is_err());
    }
}
