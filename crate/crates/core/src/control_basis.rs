//! Temporal Fourier basis for the control force, localized spatial control
//! directions in reduced space, and wrapped-Gaussian temporal edit profiles.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::koopman::ReducedModel;
use crate::numerics::{Matrix, Vector};
use crate::trajectory::FieldLayout;

/// Projection norms below this make a local basis column unusable.
pub const MIN_PROJECTION_NORM: f64 = 1e-10;

/// Truncated Fourier basis over a period of `period` frames. The control at
/// frame `t` is `Γ s_t` with `s_t` from [`FourierBasis::eval`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FourierBasis {
    pub period: usize,
    pub harmonics: usize,
    pub include_constant: bool,
}

impl FourierBasis {
    pub fn new(period: usize, harmonics: usize, include_constant: bool) -> Result<Self> {
        if harmonics == 0 {
            return Err(Error::InvalidArgument("at least one harmonic is required".into()));
        }
        if period < 2 {
            return Err(Error::InvalidArgument(format!("period must be >= 2, got {period}")));
        }
        if 2 * harmonics >= period {
            return Err(Error::InvalidArgument(format!(
                "{harmonics} harmonics exceed the Nyquist limit for period {period}"
            )));
        }
        Ok(Self {
            period,
            harmonics,
            include_constant,
        })
    }

    /// Number of basis functions, `2H` or `2H + 1`.
    pub fn m(&self) -> usize {
        2 * self.harmonics + usize::from(self.include_constant)
    }

    /// `[sin(2πt/T), cos(2πt/T), …, sin(2πHt/T), cos(2πHt/T) (, 1)]`, one-based `t`.
    pub fn eval(&self, t: usize) -> Vector {
        let mut s = Vector::zeros(self.m());
        // reduce first so large t keeps full phase precision
        let phase = 2.0 * PI * (t % self.period) as f64 / self.period as f64;
        for k in 0..self.harmonics {
            let arg = phase * (k + 1) as f64;
            s[2 * k] = arg.sin();
            s[2 * k + 1] = arg.cos();
        }
        if self.include_constant {
            s[2 * self.harmonics] = 1.0;
        }
        s
    }

    /// `M = Σ_{t=1}^{T} s_t s_tᵀ`.
    pub fn gram(&self) -> Matrix {
        let m = self.m();
        let mut g = Matrix::zeros(m, m);
        for t in 1..=self.period {
            let s = self.eval(t);
            g.ger(1.0, &s, &s, 1.0);
        }
        g
    }
}

/// Set of element indices within one field block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElementMask {
    pub elements: Vec<usize>,
}

impl ElementMask {
    pub fn new(mut elements: Vec<usize>) -> Self {
        elements.sort_unstable();
        elements.dedup();
        Self { elements }
    }

    pub fn all(count: usize) -> Self {
        Self {
            elements: (0..count).collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }
}

/// User-facing region description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionSpec {
    /// Explicit element indices.
    Indices(Vec<usize>),
    /// Axis-aligned box over element positions in a reference frame.
    Box { min: Vec<f64>, max: Vec<f64> },
}

impl RegionSpec {
    /// Resolves to an element mask. Box selection reads the `positions` block of `reference`.
    pub fn resolve(&self, layout: &FieldLayout, reference: &Vector) -> Result<ElementMask> {
        match self {
            RegionSpec::Indices(idx) => Ok(ElementMask::new(idx.clone())),
            RegionSpec::Box { min, max } => {
                let (offset, block) = layout.block("positions")?;
                let dims = block.components;
                if min.len() != dims || max.len() != dims {
                    return Err(Error::shape("region box", dims, min.len().max(max.len())));
                }
                if reference.len() != layout.dim() {
                    return Err(Error::shape("region reference frame", layout.dim(), reference.len()));
                }
                let inside = (0..block.elements)
                    .filter(|&e| {
                        (0..dims).all(|c| {
                            let p = reference[offset + e * dims + c];
                            p >= min[c] && p <= max[c]
                        })
                    })
                    .collect();
                Ok(ElementMask::new(inside))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalBasisDescriptor {
    pub label: String,
    pub block: String,
    pub region: ElementMask,
    /// Unit direction applied to every masked element.
    pub direction: Vec<f64>,
    /// `||U_rᵀ v||` before normalization.
    pub projection_norm: f64,
}

/// Reduced-space control directions `H` (`r x k`, unit-norm columns).
#[derive(Debug, Clone, PartialEq)]
pub struct LocalBasisSet {
    pub columns: Matrix,
    pub descriptors: Vec<LocalBasisDescriptor>,
}

impl LocalBasisSet {
    pub fn new(columns: Matrix, descriptors: Vec<LocalBasisDescriptor>) -> Result<Self> {
        if columns.ncols() == 0 {
            return Err(Error::InvalidArgument("local basis set is empty".into()));
        }
        if descriptors.len() != columns.ncols() {
            return Err(Error::shape("local basis descriptors", columns.ncols(), descriptors.len()));
        }
        for (j, col) in columns.column_iter().enumerate() {
            if (col.norm() - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidArgument(format!(
                    "local basis column {j} has norm {}",
                    col.norm()
                )));
            }
        }
        Ok(Self {
            columns,
            descriptors,
        })
    }

    /// `H = I_r`, one unlabeled column per reduced coordinate.
    pub fn identity(r: usize) -> Self {
        let descriptors = (0..r)
            .map(|i| LocalBasisDescriptor {
                label: format!("mode{i}"),
                block: String::new(),
                region: ElementMask { elements: vec![] },
                direction: vec![],
                projection_norm: 1.0,
            })
            .collect();
        Self {
            columns: Matrix::identity(r, r),
            descriptors,
        }
    }

    /// `H = [h, Q⊥]`: the given unit column followed by an orthonormal basis of
    /// its orthogonal complement, so `H` is orthogonal and `||C||_F = ||HC||_F`.
    pub fn completed(column: Vector, descriptor: LocalBasisDescriptor) -> Result<Self> {
        let r = column.len();
        if (column.norm() - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument("column must have unit norm".into()));
        }
        let mut cols = Matrix::zeros(r, r);
        cols.set_column(0, &column);
        let mut filled = 1;
        for i in 0..r {
            if filled == r {
                break;
            }
            // Gram-Schmidt against canonical axes, twice for stability
            let mut e = Vector::zeros(r);
            e[i] = 1.0;
            for _ in 0..2 {
                for j in 0..filled {
                    let c = cols.column(j);
                    let proj = c.dot(&e);
                    e.axpy(-proj, &c, 1.0);
                }
            }
            let norm = e.norm();
            if norm > 1e-8 {
                cols.set_column(filled, &(e / norm));
                filled += 1;
            }
        }
        debug_assert_eq!(filled, r);
        let mut descriptors = vec![descriptor];
        descriptors.extend((1..r).map(|i| LocalBasisDescriptor {
            label: format!("complement{i}"),
            block: String::new(),
            region: ElementMask { elements: vec![] },
            direction: vec![],
            projection_norm: 1.0,
        }));
        Self::new(cols, descriptors)
    }

    pub fn k(&self) -> usize {
        self.columns.ncols()
    }

    pub fn rank(&self) -> usize {
        self.columns.nrows()
    }
}

/// Builds one unit-norm reduced-space column: `direction` on the masked
/// elements of `block`, zero elsewhere, projected by `U_rᵀ` and normalized.
pub fn build_local_basis(
    model: &ReducedModel,
    layout: &FieldLayout,
    region: &ElementMask,
    block: &str,
    direction: &[f64],
) -> Result<(Vector, LocalBasisDescriptor)> {
    if region.is_empty() {
        return Err(Error::EmptyRegion);
    }
    if layout.dim() != model.dim() {
        return Err(Error::shape("local basis layout", model.dim(), layout.dim()));
    }
    let (offset, fb) = layout.block(block)?;
    if direction.len() != fb.components {
        return Err(Error::shape("local basis direction", fb.components, direction.len()));
    }
    let dnorm = direction.iter().map(|d| d * d).sum::<f64>().sqrt();
    if !(dnorm.is_finite() && dnorm > 0.0) {
        return Err(Error::InvalidArgument("direction must be nonzero and finite".into()));
    }
    let unit: Vec<f64> = direction.iter().map(|d| d / dnorm).collect();

    let mut full = Vector::zeros(layout.dim());
    for &e in &region.elements {
        if e >= fb.elements {
            return Err(Error::InvalidArgument(format!(
                "element {e} out of range for block `{block}` ({} elements)",
                fb.elements
            )));
        }
        for (c, &d) in unit.iter().enumerate() {
            full[offset + e * fb.components + c] = d;
        }
    }
    let projected = model.basis.tr_mul(&full);
    let norm = projected.norm();
    if !(norm >= MIN_PROJECTION_NORM) {
        return Err(Error::DegenerateProjection { norm });
    }
    let descriptor = LocalBasisDescriptor {
        label: format!("{block}[{} elements]", region.elements.len()),
        block: block.to_string(),
        region: region.clone(),
        direction: unit,
        projection_norm: norm,
    };
    Ok((projected / norm, descriptor))
}

/// Wrapped-Gaussian target for one basis coefficient over a period.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalProfile {
    /// `a_1 .. a_T`; index 0 holds frame 1.
    pub values: Vector,
    pub target_frame: usize,
    pub width: f64,
    pub strength: f64,
}

pub fn default_profile_width(period: usize) -> f64 {
    (period as f64 / 20.0).max(1.0)
}

/// `a_t = strength * exp(-d(t, target)^2 / (2 width^2))` with `d` the circular frame distance.
pub fn make_profile(
    period: usize,
    target_frame: usize,
    width: f64,
    strength: f64,
) -> Result<TemporalProfile> {
    if target_frame == 0 || target_frame > period {
        return Err(Error::InvalidArgument(format!(
            "target frame {target_frame} outside 1..={period}"
        )));
    }
    if !(width >= 1.0 && width.is_finite()) {
        return Err(Error::InvalidArgument(format!("width must be >= 1, got {width}")));
    }
    if !strength.is_finite() {
        return Err(Error::NonFinite("profile strength"));
    }
    let values = Vector::from_fn(period, |i, _| {
        let t = i + 1;
        let raw = t.abs_diff(target_frame);
        let d = raw.min(period - raw) as f64;
        strength * (-d * d / (2.0 * width * width)).exp()
    });
    Ok(TemporalProfile {
        values,
        target_frame,
        width,
        strength,
    })
}
