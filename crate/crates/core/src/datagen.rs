//! Desk-scale trajectory generators: gravitational N-body (velocity Verlet),
//! a pinned mass-spring sheet (symplectic Euler), and linearized 2D shallow water.
//!
//! Configs are plain serde structs so they can be read from JSON.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::trajectory::{FieldBlock, FieldLayout, Trajectory};

/// Example classes with their default reduced rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetClass {
    Nbody,
    Sheet,
    Water,
}

impl DatasetClass {
    pub fn default_rank(self) -> usize {
        match self {
            DatasetClass::Nbody => 3,
            DatasetClass::Sheet => 8,
            DatasetClass::Water => 16,
        }
    }

    /// Harmonic count giving `m = 16` without a constant mode.
    pub fn default_harmonics(self) -> usize {
        8
    }

    /// Input frame count (fit frames + one holdout).
    pub fn default_frames(self) -> usize {
        match self {
            DatasetClass::Nbody => 401,
            DatasetClass::Sheet => 201,
            DatasetClass::Water => 101,
        }
    }

    /// Best-effort guess from a trajectory layout.
    pub fn infer(layout: &FieldLayout) -> Self {
        if layout.block("height").is_ok() {
            DatasetClass::Water
        } else if layout.block("positions").map(|(_, b)| b.elements <= 16).unwrap_or(false) {
            DatasetClass::Nbody
        } else {
            DatasetClass::Sheet
        }
    }

    /// Default generator output for this class.
    pub fn generate_default(self) -> Result<Trajectory> {
        match self {
            DatasetClass::Nbody => gen_nbody(&NBodyConfig::default()),
            DatasetClass::Sheet => gen_pinned_sheet(&PinnedSheetConfig::default()),
            DatasetClass::Water => gen_shallow_water(&ShallowWaterConfig::default()),
        }
    }
}

impl fmt::Display for DatasetClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetClass::Nbody => "nbody",
            DatasetClass::Sheet => "sheet",
            DatasetClass::Water => "water",
        })
    }
}

impl FromStr for DatasetClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nbody" => Ok(DatasetClass::Nbody),
            "sheet" | "cloth" => Ok(DatasetClass::Sheet),
            "water" | "wave" => Ok(DatasetClass::Water),
            other => Err(Error::InvalidArgument(format!("unknown dataset class `{other}`"))),
        }
    }
}

// ---------------------------------------------------------------------------
// N-body

/// Pairwise distances below this are treated as a collision when softening is zero.
pub const COLLISION_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NBodyConfig {
    pub masses: Vec<f64>,
    pub positions: Vec<[f64; 3]>,
    pub velocities: Vec<[f64; 3]>,
    #[serde(default = "default_g")]
    pub g: f64,
    /// Time between recorded frames.
    pub dt: f64,
    /// Recorded intervals; the trajectory has `steps + 1` frames.
    pub steps: usize,
    /// Integrator steps per recorded interval.
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    /// Plummer softening length.
    #[serde(default = "default_softening")]
    pub softening: f64,
}

fn default_g() -> f64 {
    1.0
}

fn default_substeps() -> usize {
    4
}

fn default_softening() -> f64 {
    0.05
}

impl Default for NBodyConfig {
    fn default() -> Self {
        Self::five_body(DEFAULT_NBODY_SEED, DatasetClass::Nbody.default_frames() - 1)
    }
}

/// Seed of the shipped 5-body scene; see `default_five_body_is_bound` in the tests.
pub const DEFAULT_NBODY_SEED: u64 = 7;

impl NBodyConfig {
    /// A heavy primary with four lighter satellites of different masses on
    /// perturbed, mildly inclined near-circular orbits, in the barycentric frame.
    pub fn five_body(seed: u64, steps: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g: f64 = 1.0;
        let primary: f64 = 1.0;
        let mut masses = vec![primary];
        let mut positions = vec![[0.0; 3]];
        let mut velocities = vec![[0.0; 3]];
        let radii = [0.8, 1.25, 1.7, 2.2];
        for &base_r in &radii {
            let m = rng.gen_range(0.01..0.06);
            let r = base_r * rng.gen_range(0.95..1.05);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let incline: f64 = rng.gen_range(-0.15..0.15);
            let speed = (g * primary / r).sqrt() * rng.gen_range(0.92..1.05);
            let (s, c) = phase.sin_cos();
            masses.push(m);
            positions.push([r * c, r * s * incline.cos(), r * s * incline.sin()]);
            velocities.push([-speed * s, speed * c * incline.cos(), speed * c * incline.sin()]);
        }
        let mut cfg = Self {
            masses,
            positions,
            velocities,
            g,
            dt: 0.02,
            steps,
            substeps: default_substeps(),
            softening: default_softening(),
        };
        cfg.shift_to_barycenter();
        cfg
    }

    fn shift_to_barycenter(&mut self) {
        let total: f64 = self.masses.iter().sum();
        for d in 0..3 {
            let com: f64 = self.masses.iter().zip(&self.positions).map(|(m, p)| m * p[d]).sum::<f64>() / total;
            let vcom: f64 = self.masses.iter().zip(&self.velocities).map(|(m, v)| m * v[d]).sum::<f64>() / total;
            for p in &mut self.positions {
                p[d] -= com;
            }
            for v in &mut self.velocities {
                v[d] -= vcom;
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let p = self.masses.len();
        if p == 0 {
            return Err(Error::InvalidArgument("n-body config needs at least one body".into()));
        }
        if self.positions.len() != p || self.velocities.len() != p {
            return Err(Error::InvalidArgument(
                "masses, positions and velocities must have equal length".into(),
            ));
        }
        if self.masses.iter().any(|&m| !(m > 0.0 && m.is_finite())) {
            return Err(Error::InvalidArgument("masses must be positive".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) || self.substeps == 0 || self.steps < 2 {
            return Err(Error::InvalidArgument("need dt > 0, substeps >= 1, steps >= 2".into()));
        }
        if !(self.softening >= 0.0) || !(self.g >= 0.0) {
            return Err(Error::InvalidArgument("softening and G must be non-negative".into()));
        }
        Ok(())
    }

    pub fn total_energy(&self, pos: &[[f64; 3]], vel: &[[f64; 3]]) -> f64 {
        let eps2 = self.softening * self.softening;
        let mut e = 0.0;
        for i in 0..pos.len() {
            e += 0.5 * self.masses[i] * dot3(vel[i], vel[i]);
            for j in (i + 1)..pos.len() {
                let d = sub3(pos[j], pos[i]);
                e -= self.g * self.masses[i] * self.masses[j] / (dot3(d, d) + eps2).sqrt();
            }
        }
        e
    }
}

fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn nbody_accelerations(cfg: &NBodyConfig, pos: &[[f64; 3]], acc: &mut [[f64; 3]]) -> Result<()> {
    let eps2 = cfg.softening * cfg.softening;
    acc.iter_mut().for_each(|a| *a = [0.0; 3]);
    for i in 0..pos.len() {
        for j in (i + 1)..pos.len() {
            let d = sub3(pos[j], pos[i]);
            let r2 = dot3(d, d);
            if cfg.softening == 0.0 && r2 < COLLISION_FLOOR * COLLISION_FLOOR {
                return Err(Error::Simulation(format!(
                    "bodies {i} and {j} collided (distance {:.3e})",
                    r2.sqrt()
                )));
            }
            let inv = 1.0 / (r2 + eps2).powf(1.5);
            // equal and opposite pair forces
            let f = [d[0] * inv * cfg.g, d[1] * inv * cfg.g, d[2] * inv * cfg.g];
            for k in 0..3 {
                acc[i][k] += f[k] * cfg.masses[j];
                acc[j][k] -= f[k] * cfg.masses[i];
            }
        }
    }
    Ok(())
}

/// Velocity-Verlet integration; frames stack positions then velocities (`n = 6P`).
pub fn gen_nbody(cfg: &NBodyConfig) -> Result<Trajectory> {
    cfg.validate()?;
    let p = cfg.masses.len();
    let mut pos = cfg.positions.clone();
    let mut vel = cfg.velocities.clone();
    let mut acc = vec![[0.0; 3]; p];
    nbody_accelerations(cfg, &pos, &mut acc)?;

    let h = cfg.dt / cfg.substeps as f64;
    let mut states = Matrix::zeros(6 * p, cfg.steps + 1);
    let record = |states: &mut Matrix, col: usize, pos: &[[f64; 3]], vel: &[[f64; 3]]| {
        for i in 0..p {
            for k in 0..3 {
                states[(3 * i + k, col)] = pos[i][k];
                states[(3 * p + 3 * i + k, col)] = vel[i][k];
            }
        }
    };
    record(&mut states, 0, &pos, &vel);
    for frame in 1..=cfg.steps {
        for _ in 0..cfg.substeps {
            for i in 0..p {
                for k in 0..3 {
                    vel[i][k] += 0.5 * h * acc[i][k];
                    pos[i][k] += h * vel[i][k];
                }
            }
            nbody_accelerations(cfg, &pos, &mut acc)?;
            for i in 0..p {
                for k in 0..3 {
                    vel[i][k] += 0.5 * h * acc[i][k];
                }
            }
        }
        if pos.iter().chain(vel.iter()).flatten().any(|v| !v.is_finite()) {
            return Err(Error::Simulation(format!("non-finite state at frame {frame}")));
        }
        record(&mut states, frame, &pos, &vel);
    }
    Trajectory::new(states, cfg.dt, FieldLayout::positions_velocities(p, 3))
}

// ---------------------------------------------------------------------------
// Shallow water

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialSurface {
    Flat,
    /// Gaussian bump of the free surface centered at `(cx, cy)` in grid units (cells).
    GaussianBump {
        cx: f64,
        cy: f64,
        amplitude: f64,
        sigma: f64,
    },
    /// Explicit free-surface perturbation, `nx * ny` values, row-major in y.
    Field(Vec<f64>),
}

/// Linearized shallow water on a collocated grid with reflective walls.
///
/// ```text
/// h ← h - dt·depth·(δx U + δy V)      face velocities averaged, zero at walls
/// u ← u - dt·g·(h[i+1] - h[i-1])/(2dx) mirrored ghost heights
/// v ← v - dt·g·(h[j+1] - h[j-1])/(2dy)
/// ```
///
/// The height update uses the old velocities and the velocity update the new
/// heights (forward-backward stepping).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShallowWaterConfig {
    pub nx: usize,
    pub ny: usize,
    pub cell_size: f64,
    pub gravity: f64,
    /// Mean water depth.
    pub depth: f64,
    pub dt: f64,
    /// Recorded intervals; `steps + 1` frames.
    pub steps: usize,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    pub initial: InitialSurface,
}

impl Default for ShallowWaterConfig {
    fn default() -> Self {
        let n = 48;
        Self {
            nx: n,
            ny: n,
            cell_size: 1.0,
            gravity: 9.81,
            depth: 1.0,
            dt: 0.2,
            steps: DatasetClass::Water.default_frames() - 1,
            substeps: default_substeps(),
            initial: InitialSurface::GaussianBump {
                cx: 0.3 * n as f64,
                cy: 0.4 * n as f64,
                amplitude: 0.1,
                sigma: 3.0,
            },
        }
    }
}

impl ShallowWaterConfig {
    pub fn with_grid(nx: usize, ny: usize) -> Self {
        let base = Self::default();
        let scale_x = nx as f64 / base.nx as f64;
        let scale_y = ny as f64 / base.ny as f64;
        let initial = match base.initial {
            InitialSurface::GaussianBump { cx, cy, amplitude, sigma } => InitialSurface::GaussianBump {
                cx: cx * scale_x,
                cy: cy * scale_y,
                amplitude,
                sigma: sigma * scale_x.min(scale_y).max(0.25),
            },
            other => other,
        };
        Self { nx, ny, initial, ..base }
    }

    pub fn layout(&self) -> FieldLayout {
        let cells = self.nx * self.ny;
        FieldLayout {
            blocks: vec![
                FieldBlock::new("height", 1, cells),
                FieldBlock::new("vel_x", 1, cells),
                FieldBlock::new("vel_y", 1, cells),
            ],
        }
    }

    fn initial_height(&self) -> Result<Vec<f64>> {
        let cells = self.nx * self.ny;
        let perturbation = match &self.initial {
            InitialSurface::Flat => vec![0.0; cells],
            InitialSurface::GaussianBump { cx, cy, amplitude, sigma } => {
                let mut v = vec![0.0; cells];
                for j in 0..self.ny {
                    for i in 0..self.nx {
                        let dx = i as f64 + 0.5 - cx;
                        let dy = j as f64 + 0.5 - cy;
                        v[j * self.nx + i] = amplitude * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                    }
                }
                v
            }
            InitialSurface::Field(f) => {
                if f.len() != cells {
                    return Err(Error::shape("initial surface field", cells, f.len()));
                }
                f.clone()
            }
        };
        Ok(perturbation.into_iter().map(|p| self.depth + p).collect())
    }

    /// `dt_sub · sqrt(g · h_max) / cell_size` for the integrator substep.
    pub fn cfl(&self, h_max: f64) -> f64 {
        (self.dt / self.substeps as f64) * (self.gravity * h_max).sqrt() / self.cell_size
    }
}

/// Frames stack `(height, vel_x, vel_y)` blocks over the `nx x ny` cells.
pub fn gen_shallow_water(cfg: &ShallowWaterConfig) -> Result<Trajectory> {
    let (nx, ny) = (cfg.nx, cfg.ny);
    if nx < 2 || ny < 2 {
        return Err(Error::InvalidArgument("grid must be at least 2x2".into()));
    }
    if !(cfg.dt > 0.0 && cfg.cell_size > 0.0 && cfg.gravity > 0.0 && cfg.depth > 0.0) || cfg.substeps == 0 {
        return Err(Error::InvalidArgument("dt, cell size, gravity, depth must be positive".into()));
    }
    if cfg.steps < 2 {
        return Err(Error::InvalidArgument("need at least 2 steps".into()));
    }
    let cells = nx * ny;
    let mut h = cfg.initial_height()?;
    let h_max0 = h.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let cfl = cfg.cfl(h_max0);
    if !(cfl < 1.0) {
        return Err(Error::Simulation(format!("CFL number {cfl:.3} must be below 1")));
    }
    let mut u = vec![0.0; cells];
    let mut v = vec![0.0; cells];
    let dt = cfg.dt / cfg.substeps as f64;
    let dx = cfg.cell_size;
    let idx = |i: usize, j: usize| j * nx + i;

    let mut states = Matrix::zeros(3 * cells, cfg.steps + 1);
    let record = |states: &mut Matrix, col: usize, h: &[f64], u: &[f64], v: &[f64]| {
        let mut c = states.column_mut(col);
        c.rows_mut(0, cells).copy_from_slice(h);
        c.rows_mut(cells, cells).copy_from_slice(u);
        c.rows_mut(2 * cells, cells).copy_from_slice(v);
    };
    record(&mut states, 0, &h, &u, &v);

    let mut dh = vec![0.0; cells];
    for frame in 1..=cfg.steps {
        for _ in 0..cfg.substeps {
            for j in 0..ny {
                for i in 0..nx {
                    let c = idx(i, j);
                    let east = if i + 1 < nx { 0.5 * (u[c] + u[idx(i + 1, j)]) } else { 0.0 };
                    let west = if i > 0 { 0.5 * (u[idx(i - 1, j)] + u[c]) } else { 0.0 };
                    let north = if j + 1 < ny { 0.5 * (v[c] + v[idx(i, j + 1)]) } else { 0.0 };
                    let south = if j > 0 { 0.5 * (v[idx(i, j - 1)] + v[c]) } else { 0.0 };
                    dh[c] = -dt * cfg.depth * ((east - west) + (north - south)) / dx;
                }
            }
            for (hc, d) in h.iter_mut().zip(&dh) {
                *hc += d;
            }
            for j in 0..ny {
                for i in 0..nx {
                    let c = idx(i, j);
                    let he = h[idx((i + 1).min(nx - 1), j)];
                    let hw = h[idx(i.saturating_sub(1), j)];
                    let hn = h[idx(i, (j + 1).min(ny - 1))];
                    let hs = h[idx(i, j.saturating_sub(1))];
                    u[c] -= dt * cfg.gravity * (he - hw) / (2.0 * dx);
                    v[c] -= dt * cfg.gravity * (hn - hs) / (2.0 * dx);
                }
            }
        }
        if h.iter().any(|x| !x.is_finite() || x.abs() > 10.0 * h_max0) {
            return Err(Error::Simulation(format!("height blow-up at frame {frame}")));
        }
        record(&mut states, frame, &h, &u, &v);
    }
    Trajectory::new(states, cfg.dt, cfg.layout())
}

// ---------------------------------------------------------------------------
// Pinned mass-spring sheet

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PinnedSheetConfig {
    /// Nodes along x and z; the sheet starts flat in the y = 0 plane.
    pub nx: usize,
    pub nz: usize,
    pub spacing: f64,
    pub node_mass: f64,
    pub stiffness: f64,
    /// Linear velocity damping rate (1/s).
    pub damping: f64,
    pub gravity: f64,
    /// Node indices (`k * nx + i`) held fixed.
    pub pinned: Vec<usize>,
    pub dt: f64,
    pub steps: usize,
    pub substeps: usize,
}

impl Default for PinnedSheetConfig {
    fn default() -> Self {
        let (nx, nz) = (13, 13);
        Self {
            nx,
            nz,
            spacing: 0.1,
            node_mass: 0.01,
            stiffness: 400.0,
            damping: 0.2,
            gravity: 9.81,
            pinned: vec![0, nx - 1],
            dt: 1.0 / 60.0,
            steps: DatasetClass::Sheet.default_frames() - 1,
            substeps: 16,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Spring {
    a: usize,
    b: usize,
    rest: f64,
}

impl PinnedSheetConfig {
    fn rest_positions(&self) -> Vec<[f64; 3]> {
        let mut p = Vec::with_capacity(self.nx * self.nz);
        for k in 0..self.nz {
            for i in 0..self.nx {
                p.push([i as f64 * self.spacing, 0.0, k as f64 * self.spacing]);
            }
        }
        p
    }

    fn springs(&self, rest: &[[f64; 3]]) -> Vec<Spring> {
        let id = |i: usize, k: usize| k * self.nx + i;
        let mut s = Vec::new();
        let mut add = |a: usize, b: usize| {
            let d = sub3(rest[b], rest[a]);
            s.push(Spring { a, b, rest: dot3(d, d).sqrt() });
        };
        for k in 0..self.nz {
            for i in 0..self.nx {
                if i + 1 < self.nx {
                    add(id(i, k), id(i + 1, k));
                }
                if k + 1 < self.nz {
                    add(id(i, k), id(i, k + 1));
                }
                if i + 1 < self.nx && k + 1 < self.nz {
                    add(id(i, k), id(i + 1, k + 1));
                    add(id(i + 1, k), id(i, k + 1));
                }
            }
        }
        s
    }

    fn validate(&self) -> Result<()> {
        let nodes = self.nx * self.nz;
        if self.nx < 2 || self.nz < 2 {
            return Err(Error::InvalidArgument("sheet needs at least 2x2 nodes".into()));
        }
        if self.pinned.is_empty() {
            return Err(Error::InvalidArgument("pinned node set must be nonempty".into()));
        }
        if self.pinned.iter().any(|&p| p >= nodes) {
            return Err(Error::InvalidArgument("pinned node index out of range".into()));
        }
        if !(self.stiffness > 0.0 && self.node_mass > 0.0 && self.spacing > 0.0 && self.dt > 0.0) {
            return Err(Error::InvalidArgument("stiffness, mass, spacing, dt must be positive".into()));
        }
        if !(self.damping >= 0.0) || self.substeps == 0 || self.steps < 2 {
            return Err(Error::InvalidArgument("need damping >= 0, substeps >= 1, steps >= 2".into()));
        }
        Ok(())
    }

    /// Kinetic + elastic + gravitational potential energy.
    pub fn energy(&self, pos: &[[f64; 3]], vel: &[[f64; 3]]) -> f64 {
        let rest = self.rest_positions();
        let springs = self.springs(&rest);
        self.energy_with(&springs, pos, vel)
    }

    fn energy_with(&self, springs: &[Spring], pos: &[[f64; 3]], vel: &[[f64; 3]]) -> f64 {
        let kinetic: f64 = vel.iter().map(|v| 0.5 * self.node_mass * dot3(*v, *v)).sum();
        let elastic: f64 = springs
            .iter()
            .map(|s| {
                let d = sub3(pos[s.b], pos[s.a]);
                let stretch = dot3(d, d).sqrt() - s.rest;
                0.5 * self.stiffness * stretch * stretch
            })
            .sum();
        let potential: f64 = pos.iter().map(|p| self.node_mass * self.gravity * p[1]).sum();
        kinetic + elastic + potential
    }
}

/// Velocity norms above this abort the sheet simulation.
pub const SHEET_MAX_SPEED: f64 = 1e3;

/// Symplectic Euler with implicit linear damping; pinned nodes never move.
/// Frames stack positions then velocities (`n = 6 nx nz`).
pub fn gen_pinned_sheet(cfg: &PinnedSheetConfig) -> Result<Trajectory> {
    cfg.validate()?;
    let nodes = cfg.nx * cfg.nz;
    let mut pos = cfg.rest_positions();
    let springs = cfg.springs(&pos);
    let mut vel = vec![[0.0; 3]; nodes];
    let mut pinned = vec![false; nodes];
    for &p in &cfg.pinned {
        pinned[p] = true;
    }
    let h = cfg.dt / cfg.substeps as f64;
    let damp = 1.0 / (1.0 + h * cfg.damping);

    let mut states = Matrix::zeros(6 * nodes, cfg.steps + 1);
    let record = |states: &mut Matrix, col: usize, pos: &[[f64; 3]], vel: &[[f64; 3]]| {
        for i in 0..nodes {
            for k in 0..3 {
                states[(3 * i + k, col)] = pos[i][k];
                states[(3 * nodes + 3 * i + k, col)] = vel[i][k];
            }
        }
    };
    record(&mut states, 0, &pos, &vel);

    let mut force = vec![[0.0; 3]; nodes];
    for frame in 1..=cfg.steps {
        for _ in 0..cfg.substeps {
            force.iter_mut().for_each(|f| *f = [0.0, -cfg.node_mass * cfg.gravity, 0.0]);
            for s in &springs {
                let d = sub3(pos[s.b], pos[s.a]);
                let len = dot3(d, d).sqrt();
                if len == 0.0 {
                    continue;
                }
                let mag = cfg.stiffness * (len - s.rest) / len;
                for k in 0..3 {
                    force[s.a][k] += mag * d[k];
                    force[s.b][k] -= mag * d[k];
                }
            }
            for i in 0..nodes {
                if pinned[i] {
                    continue;
                }
                for k in 0..3 {
                    vel[i][k] = (vel[i][k] + h * force[i][k] / cfg.node_mass) * damp;
                    pos[i][k] += h * vel[i][k];
                }
            }
        }
        let vmax = vel.iter().map(|v| dot3(*v, *v).sqrt()).fold(0.0, f64::max);
        if !(vmax <= SHEET_MAX_SPEED) {
            return Err(Error::Simulation(format!(
                "sheet became unstable at frame {frame} (speed {vmax:.3e})"
            )));
        }
        record(&mut states, frame, &pos, &vel);
    }
    Trajectory::new(states, cfg.dt, FieldLayout::positions_velocities(nodes, 3))
}
