//! Grids, real volumes, complex spectra and the k-space coordinate convention.
//!
//! Every array is stored flat with x varying fastest and z slowest, so voxel
//! `(i, j, k)` lives at `i + nx * (j + ny * k)`.

use std::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{QsmError, Result};

/// Largest voxel count any grid may hold (2^27).
pub const MAX_VOXELS: usize = 1 << 27;

const MIN_DIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGrid")]
pub struct GridSpec {
    dims: [usize; 3],
    voxel_size: [f64; 3],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    dims: [usize; 3],
    #[serde(default = "unit_voxels")]
    voxel_size: [f64; 3],
}

fn unit_voxels() -> [f64; 3] {
    [1.0; 3]
}

impl TryFrom<RawGrid> for GridSpec {
    type Error = QsmError;

    fn try_from(raw: RawGrid) -> Result<Self> {
        GridSpec::new(raw.dims, raw.voxel_size)
    }
}

impl GridSpec {
    pub fn new(dims: [usize; 3], voxel_size: [f64; 3]) -> Result<Self> {
        if let Some(d) = dims.iter().find(|&&d| d < MIN_DIM) {
            return Err(QsmError::InvalidGrid(format!(
                "every dimension must be at least {MIN_DIM}, got {d}"
            )));
        }
        if voxel_size.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(QsmError::InvalidGrid(format!(
                "voxel sizes must be positive, got {voxel_size:?}"
            )));
        }
        let total = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= MAX_VOXELS)
            .ok_or_else(|| {
                QsmError::InvalidGrid(format!("{dims:?} exceeds the {MAX_VOXELS} voxel budget"))
            })?;
        debug_assert!(total > 0);
        Ok(Self { dims, voxel_size })
    }

    /// Cubic grid with isotropic 1 mm voxels.
    pub fn cube(n: usize) -> Result<Self> {
        Self::new([n; 3], [1.0; 3])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        self.voxel_size
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let [nx, ny, _] = self.dims;
        (idx % nx, (idx / nx) % ny, idx / (nx * ny))
    }

    /// Flat index of the point reflection `-k mod dims`.
    #[inline]
    pub fn mirror(&self, idx: usize) -> usize {
        let (i, j, k) = self.coords(idx);
        let [nx, ny, nz] = self.dims;
        self.index((nx - i) % nx, (ny - j) % ny, (nz - k) % nz)
    }

    pub fn ensure_same(&self, other: &GridSpec) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(QsmError::GridMismatch {
                left: *self,
                right: *other,
            })
        }
    }
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [nx, ny, nz] = self.dims;
        let [vx, vy, vz] = self.voxel_size;
        write!(f, "{nx}x{ny}x{nz} @ {vx}x{vy}x{vz} mm")
    }
}

/// Real scalar volume: susceptibility in ppm or field shift normalised by B0.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    grid: GridSpec,
    data: Vec<f64>,
}

impl Volume3D {
    pub fn new(grid: GridSpec, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(QsmError::LengthMismatch {
                expected: grid.len(),
                got: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(QsmError::NonFinite { index });
        }
        Ok(Self { grid, data })
    }

    pub fn zeros(grid: GridSpec) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: GridSpec, value: f64) -> Self {
        assert!(value.is_finite());
        Self {
            grid,
            data: vec![value; grid.len()],
        }
    }

    /// Builds a volume by evaluating `f(i, j, k)` at every voxel.
    pub fn from_fn(grid: GridSpec, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let [nx, ny, nz] = grid.dims();
        let mut data = Vec::with_capacity(grid.len());
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    data.push(f(i, j, k));
                }
            }
        }
        Self::new(grid, data)
    }

    /// Skips the finiteness scan; callers must only pass values derived from
    /// finite inputs by finite arithmetic.
    pub(crate) fn from_vec_unchecked(grid: GridSpec, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), grid.len());
        Self { grid, data }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.grid.index(i, j, k)]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.grid, self.data.iter().map(|&v| f(v)).collect())
    }

    /// `a * self + b * other`.
    pub fn axpby(&self, a: f64, other: &Volume3D, b: f64) -> Result<Self> {
        self.grid.ensure_same(&other.grid)?;
        Self::new(
            self.grid,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(x, y)| a * x + b * y)
                .collect(),
        )
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Complex k-space counterpart of a [`Volume3D`], DC at flat index 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum3D {
    grid: GridSpec,
    data: Vec<Complex64>,
}

impl Spectrum3D {
    pub fn new(grid: GridSpec, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(QsmError::LengthMismatch {
                expected: grid.len(),
                got: data.len(),
            });
        }
        Ok(Self { grid, data })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Complex64> {
        self.data
    }

    /// Largest `|S(k) - conj(S(-k))|` relative to `max |S|`; zero for an all-zero spectrum.
    pub fn hermitian_deviation(&self) -> f64 {
        let scale = self.data.iter().map(|c| c.norm()).fold(0.0, f64::max);
        if scale == 0.0 {
            return 0.0;
        }
        let worst = (0..self.data.len())
            .map(|idx| (self.data[idx] - self.data[self.grid.mirror(idx)].conj()).norm())
            .fold(0.0, f64::max);
        worst / scale
    }
}

/// Boolean per-voxel flags on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask3D {
    grid: GridSpec,
    flags: Vec<bool>,
}

impl Mask3D {
    pub fn new(grid: GridSpec, flags: Vec<bool>) -> Result<Self> {
        if flags.len() != grid.len() {
            return Err(QsmError::LengthMismatch {
                expected: grid.len(),
                got: flags.len(),
            });
        }
        Ok(Self { grid, flags })
    }

    pub fn full(grid: GridSpec) -> Self {
        Self {
            grid,
            flags: vec![true; grid.len()],
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    /// Keeps only voxels at least `radius` voxels away from every face of the grid.
    pub fn interior(&self, radius: usize) -> Mask3D {
        let [nx, ny, nz] = self.grid.dims();
        let inside = |c: usize, n: usize| c >= radius && c + radius < n;
        let flags = self
            .flags
            .iter()
            .enumerate()
            .map(|(idx, &f)| {
                let (i, j, k) = self.grid.coords(idx);
                f && inside(i, nx) && inside(j, ny) && inside(k, nz)
            })
            .collect();
        Mask3D {
            grid: self.grid,
            flags,
        }
    }

    /// Binary dilation with a cubic structuring element of half-width `radius`.
    pub fn dilate(&self, radius: usize) -> Mask3D {
        let [nx, ny, nz] = self.grid.dims();
        let mut flags = vec![false; self.flags.len()];
        for (idx, _) in self.flags.iter().enumerate().filter(|(_, &f)| f) {
            let (i, j, k) = self.grid.coords(idx);
            for kk in k.saturating_sub(radius)..(k + radius + 1).min(nz) {
                for jj in j.saturating_sub(radius)..(j + radius + 1).min(ny) {
                    for ii in i.saturating_sub(radius)..(i + radius + 1).min(nx) {
                        flags[self.grid.index(ii, jj, kk)] = true;
                    }
                }
            }
        }
        Mask3D {
            grid: self.grid,
            flags,
        }
    }

    pub fn to_volume(&self) -> Volume3D {
        Volume3D::from_vec_unchecked(
            self.grid,
            self.flags.iter().map(|&f| if f { 1.0 } else { 0.0 }).collect(),
        )
    }

    /// Voxels with value > 0.5 are set.
    pub fn from_volume(v: &Volume3D) -> Mask3D {
        Mask3D {
            grid: *v.grid(),
            flags: v.data().iter().map(|&x| x > 0.5).collect(),
        }
    }
}

/// DFT-ordered spatial frequencies in cycles/mm, stored per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct FreqCoords {
    grid: GridSpec,
    axes: [Vec<f64>; 3],
}

impl FreqCoords {
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    /// Frequencies along one axis (0 = x, 1 = y, 2 = z).
    pub fn axis(&self, axis: usize) -> &[f64] {
        &self.axes[axis]
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [self.axes[0][i], self.axes[1][j], self.axes[2][k]]
    }

    #[inline]
    pub fn at_index(&self, idx: usize) -> [f64; 3] {
        let (i, j, k) = self.grid.coords(idx);
        self.at(i, j, k)
    }
}

/// Signed DFT bin for index `i` of an `n`-point axis; the Nyquist bin of an
/// even axis is negative.
#[inline]
pub fn signed_bin(i: usize, n: usize) -> isize {
    if i < n.div_ceil(2) {
        i as isize
    } else {
        i as isize - n as isize
    }
}

pub fn freq_coords(grid: &GridSpec) -> FreqCoords {
    let dims = grid.dims();
    let vs = grid.voxel_size();
    let axis = |a: usize| -> Vec<f64> {
        let n = dims[a];
        (0..n)
            .map(|i| signed_bin(i, n) as f64 / (n as f64 * vs[a]))
            .collect()
    };
    FreqCoords {
        grid: *grid,
        axes: [axis(0), axis(1), axis(2)],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deserialisation_validates() {
        let g: GridSpec = serde_json::from_str(r#"{"dims":[8,8,8]}"#).unwrap();
        assert_eq!(g, GridSpec::cube(8).unwrap());
        assert!(serde_json::from_str::<GridSpec>(r#"{"dims":[2,8,8]}"#).is_err());
        assert!(serde_json::from_str::<GridSpec>(r#"{"dims":[8,8,8],"size":1}"#).is_err());
    }

    #[test]
    fn rejects_small_or_degenerate_grids() {
        assert!(GridSpec::new([3, 8, 8], [1.0; 3]).is_err());
        assert!(GridSpec::new([8, 8, 8], [1.0, 0.0, 1.0]).is_err());
        assert!(GridSpec::new([8, 8, 8], [1.0, f64::NAN, 1.0]).is_err());
        assert!(GridSpec::new([1024, 1024, 256], [1.0; 3]).is_err());
        assert!(GridSpec::new([512, 512, 512], [1.0; 3]).is_ok());
    }

    #[test]
    fn volume_rejects_wrong_length_and_nan() {
        let g = GridSpec::cube(4).unwrap();
        assert!(matches!(
            Volume3D::new(g, vec![0.0; 10]),
            Err(QsmError::LengthMismatch { .. })
        ));
        let mut data = vec![0.0; 64];
        data[7] = f64::INFINITY;
        assert!(matches!(
            Volume3D::new(g, data),
            Err(QsmError::NonFinite { index: 7 })
        ));
    }

    #[test]
    fn index_roundtrip_is_x_fastest() {
        let g = GridSpec::new([4, 5, 6], [1.0; 3]).unwrap();
        assert_eq!(g.index(1, 0, 0), 1);
        assert_eq!(g.index(0, 1, 0), 4);
        assert_eq!(g.index(0, 0, 1), 20);
        for idx in 0..g.len() {
            let (i, j, k) = g.coords(idx);
            assert_eq!(g.index(i, j, k), idx);
        }
    }

    #[test]
    fn even_axis_frequencies() {
        let g = GridSpec::new([4, 4, 4], [1.0; 3]).unwrap();
        assert_eq!(freq_coords(&g).axis(0), &[0.0, 0.25, -0.5, -0.25]);
    }

    #[test]
    fn odd_axis_frequencies() {
        let g = GridSpec::new([5, 4, 4], [2.0, 1.0, 1.0]).unwrap();
        let fc = freq_coords(&g);
        // enumerate j/(n*v) for the signed bins of a 5-point axis
        let expected: Vec<f64> = [0i32, 1, 2, -2, -1]
            .iter()
            .map(|&b| b as f64 / 10.0)
            .collect();
        assert_eq!(fc.axis(0), expected.as_slice());
        assert_eq!(fc.at(0, 0, 0), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn frequencies_stay_in_half_open_band() {
        let g = GridSpec::new([6, 7, 8], [0.5, 1.0, 2.0]).unwrap();
        let fc = freq_coords(&g);
        for a in 0..3 {
            let half = 0.5 / g.voxel_size()[a];
            assert!(fc.axis(a).iter().all(|&f| f >= -half && f < half));
        }
        assert_eq!(fc, freq_coords(&g));
    }

    #[test]
    fn dilation_and_interior() {
        let g = GridSpec::cube(8).unwrap();
        let mut flags = vec![false; g.len()];
        flags[g.index(4, 4, 4)] = true;
        let m = Mask3D::new(g, flags).unwrap();
        assert_eq!(m.dilate(1).count(), 27);
        assert_eq!(m.dilate(2).count(), 125);
        assert_eq!(Mask3D::full(g).interior(2).count(), 4 * 4 * 4);
    }
}
