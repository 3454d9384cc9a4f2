//! Closed-form baselines: thresholded k-space division (TKD) and
//! multi-orientation least squares (COSMOS).

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dipole::{dipole_kernel, DipoleKernel, Orientation};
use crate::error::{QsmError, Result};
use crate::fft::{apply_real_multiplier, fft_forward, fft_inverse_real_part};
use crate::grid::{GridSpec, Spectrum3D, Volume3D};

/// Below this the COSMOS normal-equation denominator is treated as zero.
pub const COSMOS_DENOM_FLOOR: f64 = 1e-12;

/// How TKD treats bins inside the cone `|D| < t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TkdVariant {
    /// Divide by `t * sign(D)`, with `sign(0) = +1`.
    #[default]
    SignedThreshold,
    /// Set the bin to zero.
    ZeroFill,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TkdConfig {
    t: f64,
    #[serde(default)]
    variant: TkdVariant,
}

impl TkdConfig {
    pub fn new(t: f64) -> Result<Self> {
        Self::with_variant(t, TkdVariant::SignedThreshold)
    }

    pub fn with_variant(t: f64, variant: TkdVariant) -> Result<Self> {
        if !(t > 0.0 && t <= 1.0 / 3.0) {
            return Err(QsmError::InvalidParameter(format!(
                "TKD threshold must lie in (0, 1/3], got {t}"
            )));
        }
        Ok(Self { t, variant })
    }

    pub fn threshold(&self) -> f64 {
        self.t
    }

    pub fn variant(&self) -> TkdVariant {
        self.variant
    }

    /// Per-bin multiplier applied to the field spectrum.
    pub fn inverse_multiplier(&self, d: f64) -> f64 {
        if d.abs() >= self.t {
            1.0 / d
        } else {
            match self.variant {
                TkdVariant::SignedThreshold => {
                    if d < 0.0 {
                        -1.0 / self.t
                    } else {
                        1.0 / self.t
                    }
                }
                TkdVariant::ZeroFill => 0.0,
            }
        }
    }
}

pub fn tkd_invert(field: &Volume3D, kernel: &DipoleKernel, cfg: &TkdConfig) -> Result<Volume3D> {
    field.grid().ensure_same(kernel.grid())?;
    let multiplier: Vec<f64> = kernel
        .values()
        .iter()
        .map(|&d| cfg.inverse_multiplier(d))
        .collect();
    Ok(apply_real_multiplier(field, &multiplier))
}

/// Fields acquired (or simulated) at several main-field orientations on one grid.
#[derive(Debug, Clone)]
pub struct OrientationSet {
    grid: GridSpec,
    entries: Vec<(Orientation, Volume3D)>,
}

impl OrientationSet {
    pub fn new(entries: Vec<(Orientation, Volume3D)>) -> Result<Self> {
        let grid = match entries.first() {
            Some((_, v)) => *v.grid(),
            None => return Err(QsmError::InsufficientOrientations { got: 0 }),
        };
        for (_, v) in &entries[1..] {
            grid.ensure_same(v.grid())?;
        }
        Ok(Self { grid, entries })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(Orientation, Volume3D)] {
        &self.entries
    }

    pub fn orientations(&self) -> Vec<Orientation> {
        self.entries.iter().map(|(o, _)| *o).collect()
    }
}

pub fn cosmos_invert(set: &OrientationSet, damping: f64) -> Result<Volume3D> {
    if set.len() < 3 {
        return Err(QsmError::InsufficientOrientations { got: set.len() });
    }
    let orients = set.orientations();
    for a in 0..orients.len() {
        for b in a + 1..orients.len() {
            if orients[a].dot(&orients[b]).abs() >= 1.0 - 1e-6 {
                return Err(QsmError::DegenerateOrientations {
                    first: a,
                    second: b,
                });
            }
        }
    }
    cosmos_solve(set, damping)
}

/// Per-bin least squares without the orientation-count checks. With a single
/// orientation this is damped division by `D`.
pub(crate) fn cosmos_solve(set: &OrientationSet, damping: f64) -> Result<Volume3D> {
    if !(damping >= 0.0 && damping.is_finite()) {
        return Err(QsmError::InvalidParameter(format!(
            "damping must be finite and non-negative, got {damping}"
        )));
    }
    let grid = *set.grid();
    let n = grid.len();
    let mut num = vec![Complex64::new(0.0, 0.0); n];
    let mut den = vec![damping; n];
    for (orient, field) in set.entries() {
        let kernel = dipole_kernel(&grid, *orient);
        let spec = fft_forward(field);
        for ((acc, d2), (&d, &s)) in num
            .iter_mut()
            .zip(den.iter_mut())
            .zip(kernel.values().iter().zip(spec.data()))
        {
            *acc += s * d;
            *d2 += d * d;
        }
    }
    for (acc, &d2) in num.iter_mut().zip(&den) {
        *acc = if d2 < COSMOS_DENOM_FLOOR {
            Complex64::new(0.0, 0.0)
        } else {
            *acc / d2
        };
    }
    Ok(fft_inverse_real_part(&Spectrum3D::new(grid, num)?))
}
