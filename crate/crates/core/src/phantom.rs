//! Synthetic susceptibility phantoms and simulated field data.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::classical::OrientationSet;
use crate::dipole::{dipole_kernel, forward_field, Orientation};
use crate::error::{QsmError, Result};
use crate::grid::{GridSpec, Mask3D, Volume3D};

/// Voxel margin added around the union of shape supports.
pub const MASK_DILATION: usize = 2;

/// Positions are in mm; voxel `i` is centred at `(i + 0.5) * voxel_size`, so
/// the grid spans `[0, n * voxel_size]` on each axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    Sphere {
        center: [f64; 3],
        radius: f64,
        chi: f64,
    },
    /// `length` bounds the cylinder symmetrically about `center`; without it
    /// the cylinder runs through the whole grid.
    Cylinder {
        axis: [f64; 3],
        center: [f64; 3],
        radius: f64,
        #[serde(default)]
        length: Option<f64>,
        chi: f64,
    },
    Box {
        min: [f64; 3],
        max: [f64; 3],
        chi: f64,
    },
}

impl Shape {
    pub fn chi(&self) -> f64 {
        match self {
            Shape::Sphere { chi, .. } | Shape::Cylinder { chi, .. } | Shape::Box { chi, .. } => *chi,
        }
    }

    fn contains(&self, p: [f64; 3]) -> bool {
        match self {
            Shape::Sphere { center, radius, .. } => dist2(p, *center) <= radius * radius,
            Shape::Cylinder {
                axis,
                center,
                radius,
                length,
                ..
            } => {
                let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
                let u = [axis[0] / n, axis[1] / n, axis[2] / n];
                let d = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
                let t = d[0] * u[0] + d[1] * u[1] + d[2] * u[2];
                let radial = d[0] * d[0] + d[1] * d[1] + d[2] * d[2] - t * t;
                radial <= radius * radius && length.map_or(true, |l| t.abs() <= l / 2.0)
            }
            Shape::Box { min, max, .. } => (0..3).all(|a| p[a] >= min[a] && p[a] <= max[a]),
        }
    }

    /// Axis-aligned bounding box, `None` when the shape is unbounded.
    fn bounds(&self) -> Option<([f64; 3], [f64; 3])> {
        match self {
            Shape::Sphere { center, radius, .. } => Some((
                center.map(|c| c - radius),
                center.map(|c| c + radius),
            )),
            Shape::Cylinder {
                axis,
                center,
                radius,
                length: Some(l),
                ..
            } => {
                let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
                let mut lo = [0.0; 3];
                let mut hi = [0.0; 3];
                for a in 0..3 {
                    let u = axis[a] / n;
                    let ext = (l / 2.0) * u.abs() + radius * (1.0 - u * u).max(0.0).sqrt();
                    lo[a] = center[a] - ext;
                    hi[a] = center[a] + ext;
                }
                Some((lo, hi))
            }
            Shape::Cylinder { .. } => None,
            Shape::Box { min, max, .. } => Some((*min, *max)),
        }
    }

    fn validate(&self) -> Result<()> {
        let chi = self.chi();
        if !(-1.0..=1.0).contains(&chi) {
            return Err(QsmError::InvalidParameter(format!(
                "susceptibility {chi} outside [-1, 1] ppm"
            )));
        }
        let ok = match self {
            Shape::Sphere { radius, .. } => *radius > 0.0,
            Shape::Cylinder {
                axis, radius, length, ..
            } => *radius > 0.0 && axis.iter().any(|&a| a != 0.0) && length.map_or(true, |l| l > 0.0),
            Shape::Box { min, max, .. } => (0..3).all(|a| min[a] < max[a]),
        };
        if !ok {
            return Err(QsmError::InvalidParameter(format!("degenerate shape {self:?}")));
        }
        Ok(())
    }
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub grid: GridSpec,
    #[serde(default)]
    pub shapes: Vec<Shape>,
    #[serde(default)]
    pub background: f64,
}

impl PhantomSpec {
    /// 32³ test object: two spheres and a cylinder along x, in 1 mm voxels.
    pub fn sphere_cylinder(n: usize) -> Result<Self> {
        let s = n as f64 / 32.0;
        Ok(Self {
            grid: GridSpec::cube(n)?,
            shapes: vec![
                Shape::Cylinder {
                    axis: [1.0, 0.0, 0.0],
                    center: [16.5 * s, 22.5 * s, 20.5 * s],
                    radius: 3.0 * s,
                    length: Some(20.0 * s),
                    chi: -0.05,
                },
                Shape::Sphere {
                    center: [12.5 * s, 12.5 * s, 14.5 * s],
                    radius: 6.0 * s,
                    chi: 0.1,
                },
                Shape::Sphere {
                    center: [21.5 * s, 18.5 * s, 12.5 * s],
                    radius: 4.0 * s,
                    chi: 0.15,
                },
            ],
            background: 0.0,
        })
    }

    /// A single sphere at the grid centre.
    pub fn centered_sphere(n: usize, radius: f64, chi: f64) -> Result<Self> {
        let grid = GridSpec::cube(n)?;
        Ok(Self {
            grid,
            shapes: vec![Shape::Sphere {
                center: [n as f64 / 2.0; 3],
                radius,
                chi,
            }],
            background: 0.0,
        })
    }
}

/// Voxelises the shapes in order (later ones overwrite earlier ones) and
/// returns the susceptibility map and the dilated support mask.
pub fn build_phantom(spec: &PhantomSpec) -> Result<(Volume3D, Mask3D)> {
    let grid = spec.grid;
    let dims = grid.dims();
    let vs = grid.voxel_size();
    let extent = [dims[0] as f64 * vs[0], dims[1] as f64 * vs[1], dims[2] as f64 * vs[2]];
    if !(-1.0..=1.0).contains(&spec.background) {
        return Err(QsmError::InvalidParameter(format!(
            "background {} outside [-1, 1] ppm",
            spec.background
        )));
    }
    for (index, shape) in spec.shapes.iter().enumerate() {
        shape.validate()?;
        let inside = match shape.bounds() {
            Some((lo, hi)) => (0..3).all(|a| lo[a] >= 0.0 && hi[a] <= extent[a]),
            None => match shape {
                Shape::Cylinder { center, .. } => (0..3).all(|a| (0.0..=extent[a]).contains(&center[a])),
                _ => true,
            },
        };
        if !inside {
            return Err(QsmError::ShapeOutOfBounds { index });
        }
    }
    let mut chi = vec![spec.background; grid.len()];
    let mut support = vec![false; grid.len()];
    for (idx, (c, s)) in chi.iter_mut().zip(support.iter_mut()).enumerate() {
        let (i, j, k) = grid.coords(idx);
        let p = [(i as f64 + 0.5) * vs[0], (j as f64 + 0.5) * vs[1], (k as f64 + 0.5) * vs[2]];
        for shape in &spec.shapes {
            if shape.contains(p) {
                *c = shape.chi();
                *s = true;
            }
        }
    }
    let mask = Mask3D::new(grid, support)?.dilate(MASK_DILATION);
    Ok((Volume3D::new(grid, chi)?, mask))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    #[default]
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    #[serde(default)]
    pub kind: NoiseKind,
    pub sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self {
            kind: NoiseKind::Gaussian,
            sigma: 0.0,
            seed: 0,
        }
    }
}

/// Simulated fields for each orientation, plus independent Gaussian noise
/// drawn from one stream seeded by `noise.seed`.
pub fn synth_orientation_set(chi: &Volume3D, orientations: &[Orientation], noise: &NoiseSpec) -> Result<OrientationSet> {
    if orientations.is_empty() {
        return Err(QsmError::InsufficientOrientations { got: 0 });
    }
    if !(noise.sigma.is_finite() && noise.sigma >= 0.0) {
        return Err(QsmError::InvalidParameter(format!(
            "noise sigma must be non-negative, got {}",
            noise.sigma
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let normal = Normal::new(0.0, noise.sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| QsmError::InvalidParameter(e.to_string()))?;
    let mut entries = Vec::with_capacity(orientations.len());
    for &o in orientations {
        let field = forward_field(chi, &dipole_kernel(chi.grid(), o))?;
        let field = if noise.sigma > 0.0 {
            let data = field.data().iter().map(|v| v + normal.sample(&mut rng)).collect();
            Volume3D::new(*chi.grid(), data)?
        } else {
            field
        };
        entries.push((o, field));
    }
    OrientationSet::new(entries)
}

/// `n` directions on a Fibonacci spiral covering the polar cap of half-angle
/// `cap_half_angle_deg` around z. The first point is z itself; `seed` sets
/// the azimuth of the spiral.
pub fn orientation_sweep(n: usize, cap_half_angle_deg: f64, seed: u64) -> Result<Vec<Orientation>> {
    if n == 0 {
        return Err(QsmError::InvalidParameter("orientation count must be at least 1".into()));
    }
    if !(cap_half_angle_deg > 0.0 && cap_half_angle_deg <= 90.0) {
        return Err(QsmError::InvalidParameter(format!(
            "cap half-angle must lie in (0, 90], got {cap_half_angle_deg}"
        )));
    }
    use rand::Rng;
    let phase = ChaCha8Rng::seed_from_u64(seed).gen_range(0.0..std::f64::consts::TAU);
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let z_min = cap_half_angle_deg.to_radians().cos();
    (0..n)
        .map(|i| {
            let frac = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
            let z = 1.0 - (1.0 - z_min) * frac;
            let rho = (1.0 - z * z).max(0.0).sqrt();
            let phi = phase + golden * i as f64;
            Orientation::from_direction([rho * phi.cos(), rho * phi.sin(), z])
        })
        .collect()
}
