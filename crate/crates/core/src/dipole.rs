//! Analytic dipole kernels, cone-null masks and the susceptibility-to-field
//! forward model.
//!
//! For main-field direction `b` the kernel is `D(k) = 1/3 - (k·b)^2 / |k|^2`,
//! with `D(0) = 0` so that fields are referenced to the volume mean.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{QsmError, Result};
use crate::fft::apply_real_multiplier;
use crate::grid::{freq_coords, GridSpec, Mask3D, Volume3D};

const UNIT_TOL: f64 = 1e-12;

/// Unit vector giving the main magnetic field direction in grid axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct Orientation([f64; 3]);

impl Orientation {
    pub fn new(b: [f64; 3]) -> Result<Self> {
        let norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > UNIT_TOL {
            return Err(QsmError::InvalidOrientation { norm });
        }
        Ok(Self(b))
    }

    /// Normalises an arbitrary non-zero direction.
    pub fn from_direction(v: [f64; 3]) -> Result<Self> {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(QsmError::InvalidOrientation { norm });
        }
        Ok(Self([v[0] / norm, v[1] / norm, v[2] / norm]))
    }

    pub fn z() -> Self {
        Self([0.0, 0.0, 1.0])
    }

    pub fn x() -> Self {
        Self([1.0, 0.0, 0.0])
    }

    pub fn y() -> Self {
        Self([0.0, 1.0, 0.0])
    }

    pub fn vector(&self) -> [f64; 3] {
        self.0
    }

    pub fn dot(&self, other: &Orientation) -> f64 {
        self.0.iter().zip(other.0).map(|(a, b)| a * b).sum()
    }

    /// Angle to the z axis in degrees.
    pub fn polar_angle_deg(&self) -> f64 {
        self.0[2].clamp(-1.0, 1.0).acos().to_degrees()
    }
}

impl TryFrom<[f64; 3]> for Orientation {
    type Error = QsmError;

    fn try_from(b: [f64; 3]) -> Result<Self> {
        Orientation::new(b)
    }
}

impl From<Orientation> for [f64; 3] {
    fn from(o: Orientation) -> Self {
        o.0
    }
}

/// Real k-space kernel for one orientation. Analytic kernels stay within
/// `[-2/3, 1/3]`; network-predicted kernels carry raw, unclamped values.
#[derive(Debug, Clone, PartialEq)]
pub struct DipoleKernel {
    grid: GridSpec,
    orientation: Orientation,
    values: Vec<f64>,
}

impl DipoleKernel {
    pub fn from_values(grid: GridSpec, orientation: Orientation, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(QsmError::LengthMismatch {
                expected: grid.len(),
                got: values.len(),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(QsmError::NonFinite { index });
        }
        Ok(Self {
            grid,
            orientation,
            values,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn orientation(&self) -> Orientation {
        self.orientation
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Kernel values as a volume, for export and inspection.
    pub fn to_volume(&self) -> Volume3D {
        Volume3D::from_vec_unchecked(self.grid, self.values.clone())
    }
}

/// Sum of three terms ordered by magnitude, so the result does not depend on
/// which axis each term came from and flips sign exactly with its inputs.
#[inline]
fn sorted_sum(mut t: [f64; 3]) -> f64 {
    let key = |v: f64| v.abs();
    if key(t[0]) > key(t[1]) {
        t.swap(0, 1);
    }
    if key(t[1]) > key(t[2]) {
        t.swap(1, 2);
    }
    if key(t[0]) > key(t[1]) {
        t.swap(0, 1);
    }
    (t[0] + t[1]) + t[2]
}

/// Evaluates `1/3 - (k·b)^2/|k|^2` at a single frequency, `0` at DC.
#[inline]
pub fn dipole_value(k: [f64; 3], b: [f64; 3]) -> f64 {
    let k2 = sorted_sum([k[0] * k[0], k[1] * k[1], k[2] * k[2]]);
    if k2 == 0.0 {
        return 0.0;
    }
    let kb = sorted_sum([k[0] * b[0], k[1] * b[1], k[2] * b[2]]);
    let ratio = (kb * kb / k2).min(1.0);
    1.0 / 3.0 - ratio
}

/// Analytic kernel on the DFT grid.
///
/// On even axes the Nyquist bin stands for both `+1/2` and `-1/2` cycles per
/// voxel. Bins touching it take the mean of `D(k)` and `D(k')`, where `k'`
/// has every Nyquist component negated; this keeps the kernel point-symmetric
/// and equals what taking the real part of the raw product would apply.
pub fn dipole_kernel(grid: &GridSpec, orient: Orientation) -> DipoleKernel {
    let fc = freq_coords(grid);
    let dims = grid.dims();
    let b = orient.vector();
    let values = (0..grid.len())
        .map(|idx| {
            let (i, j, k) = grid.coords(idx);
            let k_vec = fc.at(i, j, k);
            let nyquist = [(i, 0), (j, 1), (k, 2)]
                .map(|(c, a)| dims[a] % 2 == 0 && c == dims[a] / 2);
            if nyquist.iter().any(|&n| n) {
                let mut flipped = k_vec;
                for a in 0..3 {
                    if nyquist[a] {
                        flipped[a] = -flipped[a];
                    }
                }
                0.5 * (dipole_value(k_vec, b) + dipole_value(flipped, b))
            } else {
                dipole_value(k_vec, b)
            }
        })
        .collect();
    DipoleKernel {
        grid: *grid,
        orientation: orient,
        values,
    }
}

/// Frequencies where the kernel magnitude falls below `t_cone`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConeMask {
    mask: Mask3D,
    t_cone: f64,
}

impl ConeMask {
    pub fn mask(&self) -> &Mask3D {
        &self.mask
    }

    pub fn flags(&self) -> &[bool] {
        self.mask.flags()
    }

    pub fn threshold(&self) -> f64 {
        self.t_cone
    }

    pub fn fraction(&self) -> f64 {
        self.mask.count() as f64 / self.mask.flags().len() as f64
    }
}

pub fn cone_mask(kernel: &DipoleKernel, t_cone: f64) -> Result<ConeMask> {
    if !(t_cone > 0.0 && t_cone < 1.0 / 3.0) {
        return Err(QsmError::InvalidParameter(format!(
            "t_cone must lie in (0, 1/3), got {t_cone}"
        )));
    }
    let mut flags: Vec<bool> = kernel.values.iter().map(|d| d.abs() < t_cone).collect();
    flags[0] = true;
    Ok(ConeMask {
        mask: Mask3D::new(kernel.grid, flags)?,
        t_cone,
    })
}

/// Local field `IFFT(D · FFT(chi))`.
pub fn forward_field(chi: &Volume3D, kernel: &DipoleKernel) -> Result<Volume3D> {
    chi.grid().ensure_same(&kernel.grid)?;
    Ok(apply_real_multiplier(chi, &kernel.values))
}

type CacheKey = ([usize; 3], [u64; 3], [i64; 3]);

/// Memoises analytic kernels per grid and orientation.
///
/// Keys round the orientation to 1e-9; a hit is only served when the stored
/// orientation is bit-identical to the request, so cached and fresh kernels
/// never differ.
#[derive(Debug, Default)]
pub struct KernelCache {
    entries: Mutex<HashMap<CacheKey, Arc<DipoleKernel>>>,
}

impl KernelCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, grid: &GridSpec, orient: Orientation) -> Arc<DipoleKernel> {
        let vs = grid.voxel_size();
        let b = orient.vector();
        let key = (
            grid.dims(),
            [vs[0].to_bits(), vs[1].to_bits(), vs[2].to_bits()],
            [
                (b[0] * 1e9).round() as i64,
                (b[1] * 1e9).round() as i64,
                (b[2] * 1e9).round() as i64,
            ],
        );
        let mut entries = self.entries.lock().expect("kernel cache poisoned");
        if let Some(hit) = entries.get(&key) {
            if hit.orientation.vector().map(f64::to_bits) == b.map(f64::to_bits) {
                return Arc::clone(hit);
            }
            return Arc::new(dipole_kernel(grid, orient));
        }
        let kernel = Arc::new(dipole_kernel(grid, orient));
        entries.insert(key, Arc::clone(&kernel));
        kernel
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("kernel cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
