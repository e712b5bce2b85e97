//! Sampled full-space trajectories, their field layout, and the `.traj` file format.
//!
//! A `.traj` file is the magic line `CYCLTRAJ1`, a JSON header line
//! `{version, n, frame_count, dt, layout}`, then `frame_count * n` little-endian
//! f64 values, frame-major.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DVectorView;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};

pub const TRAJ_MAGIC: &str = "CYCLTRAJ1";
pub const TRAJ_VERSION: u32 = 1;

/// Minimum number of frames a trajectory must hold.
pub const MIN_FRAMES: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldBlock {
    pub name: String,
    /// Components per element, e.g. 3 for a 3D position.
    pub components: usize,
    pub elements: usize,
}

impl FieldBlock {
    pub fn new(name: impl Into<String>, components: usize, elements: usize) -> Self {
        Self {
            name: name.into(),
            components,
            elements,
        }
    }

    pub fn len(&self) -> usize {
        self.components * self.elements
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered named blocks making up a state vector. Blocks are laid out
/// one after another; within a block, components of an element are contiguous.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldLayout {
    pub blocks: Vec<FieldBlock>,
}

impl FieldLayout {
    pub fn new(blocks: Vec<FieldBlock>) -> Result<Self> {
        let layout = Self { blocks };
        layout.validate()?;
        Ok(layout)
    }

    /// A single anonymous block of scalar components.
    pub fn flat(n: usize) -> Self {
        Self {
            blocks: vec![FieldBlock::new("state", 1, n)],
        }
    }

    pub fn positions_velocities(elements: usize, dims: usize) -> Self {
        Self {
            blocks: vec![
                FieldBlock::new("positions", dims, elements),
                FieldBlock::new("velocities", dims, elements),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::InvalidArgument("layout has no blocks".into()));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.components == 0 || b.elements == 0 {
                return Err(Error::InvalidArgument(format!("block `{}` is empty", b.name)));
            }
            if self.blocks[..i].iter().any(|o| o.name == b.name) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate block name `{}`",
                    b.name
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.blocks.iter().map(FieldBlock::len).sum()
    }

    /// Offset of the named block within the state vector, and the block itself.
    pub fn block(&self, name: &str) -> Result<(usize, &FieldBlock)> {
        let mut offset = 0;
        for b in &self.blocks {
            if b.name == name {
                return Ok((offset, b));
            }
            offset += b.len();
        }
        Err(Error::UnknownBlock(name.to_string()))
    }
}

/// Multiplicative per-block scaling applied to states before fitting. Blocks not
/// named in the map are left unscaled.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BlockScales(pub BTreeMap<String, f64>);

impl BlockScales {
    pub fn is_identity(&self) -> bool {
        self.0.values().all(|&s| s == 1.0)
    }

    fn factors(&self, layout: &FieldLayout, invert: bool) -> Result<Vector> {
        let mut f = Vector::from_element(layout.dim(), 1.0);
        for (name, &s) in &self.0 {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "scale for `{name}` must be positive, got {s}"
                )));
            }
            let (offset, block) = layout.block(name)?;
            let v = if invert { 1.0 / s } else { s };
            f.rows_mut(offset, block.len()).fill(v);
        }
        Ok(f)
    }

    pub fn apply(&self, traj: &Trajectory) -> Result<Trajectory> {
        self.rescale(traj, false)
    }

    pub fn unapply(&self, traj: &Trajectory) -> Result<Trajectory> {
        self.rescale(traj, true)
    }

    fn rescale(&self, traj: &Trajectory, invert: bool) -> Result<Trajectory> {
        let f = self.factors(&traj.layout, invert)?;
        let mut states = traj.states.clone();
        for mut col in states.column_iter_mut() {
            col.component_mul_assign(&f);
        }
        Trajectory::new(states, traj.dt, traj.layout.clone())
    }
}

/// `T+1` sampled states stored as the columns of an `n x (T+1)` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    states: Matrix,
    pub dt: f64,
    pub layout: FieldLayout,
}

impl Trajectory {
    pub fn new(states: Matrix, dt: f64, layout: FieldLayout) -> Result<Self> {
        layout.validate()?;
        if states.nrows() != layout.dim() {
            return Err(Error::shape(
                "trajectory state dimension",
                layout.dim(),
                states.nrows(),
            ));
        }
        if states.ncols() < MIN_FRAMES {
            return Err(Error::TooFewFrames {
                required: MIN_FRAMES,
                actual: states.ncols(),
            });
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
        }
        if states.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("trajectory frames"));
        }
        Ok(Self { states, dt, layout })
    }

    pub fn from_frames(frames: &[Vector], dt: f64, layout: FieldLayout) -> Result<Self> {
        let n = layout.dim();
        if let Some(bad) = frames.iter().find(|f| f.len() != n) {
            return Err(Error::shape("trajectory frame", n, bad.len()));
        }
        let states = Matrix::from_fn(n, frames.len(), |i, j| frames[j][i]);
        Self::new(states, dt, layout)
    }

    pub fn dim(&self) -> usize {
        self.states.nrows()
    }

    pub fn frame_count(&self) -> usize {
        self.states.ncols()
    }

    /// Zero-based frame access; frame `k` is `x_{k+1}` in one-based notation.
    pub fn frame(&self, k: usize) -> DVectorView<'_, f64> {
        self.states.column(k)
    }

    pub fn states(&self) -> &Matrix {
        &self.states
    }

    pub fn into_states(self) -> Matrix {
        self.states
    }

    /// Default split: fit on every frame but the last, which is held out.
    pub fn split(&self) -> FrameSplit {
        FrameSplit {
            fit_frames: self.frame_count() - 1,
            holdout: self.frame_count() - 1,
        }
    }

    /// `||x_last - x_first||`, the discontinuity when the sequence is looped.
    pub fn seam_gap(&self) -> f64 {
        (self.frame(self.frame_count() - 1) - self.frame(0)).norm()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = TrajHeader {
            version: TRAJ_VERSION,
            n: self.dim(),
            frame_count: self.frame_count(),
            dt: self.dt,
            layout: self.layout.clone(),
        };
        container::write(path.as_ref(), TRAJ_MAGIC, &header, self.states.as_slice())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = container::read(path.as_ref())?;
        Self::decode(&bytes)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = TrajHeader {
            version: TRAJ_VERSION,
            n: self.dim(),
            frame_count: self.frame_count(),
            dt: self.dt,
            layout: self.layout.clone(),
        };
        container::encode(TRAJ_MAGIC, &header, self.states.as_slice())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (header, payload): (TrajHeader, _) = container::decode(TRAJ_MAGIC, bytes)?;
        if header.version != TRAJ_VERSION {
            return Err(Error::MalformedHeader(format!(
                "unsupported version {}",
                header.version
            )));
        }
        if header.frame_count == 0 || header.n == 0 {
            return Err(Error::MalformedHeader("empty trajectory".into()));
        }
        if header.layout.dim() != header.n {
            return Err(Error::MalformedHeader(format!(
                "layout describes {} values but n = {}",
                header.layout.dim(),
                header.n
            )));
        }
        let expected = header.n * header.frame_count * 8;
        if payload.len() != expected {
            let per_frame_bytes = header.frame_count * 8;
            if payload.len() % per_frame_bytes == 0 {
                return Err(Error::DimensionMismatch {
                    declared: header.n,
                    actual: payload.len() / per_frame_bytes,
                });
            }
            return Err(Error::TruncatedPayload {
                expected,
                actual: payload.len(),
            });
        }
        let values = container::floats(payload, header.n * header.frame_count)?;
        let states = Matrix::from_vec(header.n, header.frame_count, values);
        Self::new(states, header.dt, header.layout)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrajHeader {
    version: u32,
    n: usize,
    frame_count: usize,
    dt: f64,
    layout: FieldLayout,
}

/// Fit/holdout split: the surrogate is fit on the first `fit_frames` frames and
/// frame index `holdout` (zero-based) is reserved for evaluating closure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameSplit {
    pub fit_frames: usize,
    pub holdout: usize,
}

/// Snapshot matrices `X = [x_1 .. x_{k-1}]`, `X' = [x_2 .. x_k]` over the first `fit_count` frames.
pub fn snapshot_pair(traj: &Trajectory, fit_count: usize) -> Result<(Matrix, Matrix)> {
    if fit_count < 2 || fit_count > traj.frame_count() {
        return Err(Error::TooFewFrames {
            required: fit_count.max(2),
            actual: traj.frame_count(),
        });
    }
    let x = traj.states.columns(0, fit_count - 1).into_owned();
    let xp = traj.states.columns(1, fit_count - 1).into_owned();
    Ok((x, xp))
}
