//! 3D discrete Fourier transforms.
//!
//! Convention: the forward transform is unnormalised and the inverse carries
//! the full `1/N` factor, so `fft_inverse(fft_forward(v)) == v`.

use std::cell::RefCell;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{QsmError, Result};
use crate::grid::{GridSpec, Spectrum3D, Volume3D};

/// Relative Hermitian deviation accepted by [`fft_inverse`].
pub const HERMITIAN_TOL: f64 = 1e-6;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Direction {
    Forward,
    Inverse,
}

fn plan(n: usize, dir: Direction) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        match dir {
            Direction::Forward => p.plan_fft_forward(n),
            Direction::Inverse => p.plan_fft_inverse(n),
        }
    })
}

/// Unnormalised 3D transform in place along all three axes.
fn transform(grid: &GridSpec, data: &mut [Complex64], dir: Direction) {
    let [nx, ny, nz] = grid.dims();
    let fx = plan(nx, dir);
    let fy = plan(ny, dir);
    let fz = plan(nz, dir);
    let scratch_len = fx
        .get_inplace_scratch_len()
        .max(fy.get_inplace_scratch_len())
        .max(fz.get_inplace_scratch_len());
    let mut scratch = vec![Complex64::new(0.0, 0.0); scratch_len];

    // x lines are contiguous
    for line in data.chunks_exact_mut(nx) {
        fx.process_with_scratch(line, &mut scratch);
    }

    let mut buf = vec![Complex64::new(0.0, 0.0); ny.max(nz)];
    for k in 0..nz {
        for i in 0..nx {
            let base = i + nx * ny * k;
            for j in 0..ny {
                buf[j] = data[base + nx * j];
            }
            fy.process_with_scratch(&mut buf[..ny], &mut scratch);
            for j in 0..ny {
                data[base + nx * j] = buf[j];
            }
        }
    }

    let plane = nx * ny;
    for j in 0..ny {
        for i in 0..nx {
            let base = i + nx * j;
            for k in 0..nz {
                buf[k] = data[base + plane * k];
            }
            fz.process_with_scratch(&mut buf[..nz], &mut scratch);
            for k in 0..nz {
                data[base + plane * k] = buf[k];
            }
        }
    }
}

pub fn fft_forward(v: &Volume3D) -> Spectrum3D {
    let grid = *v.grid();
    let mut data: Vec<Complex64> = v.data().iter().map(|&x| Complex64::new(x, 0.0)).collect();
    transform(&grid, &mut data, Direction::Forward);
    Spectrum3D::new(grid, data).expect("length preserved")
}

/// Inverse transform of a Hermitian spectrum; the imaginary residue is discarded.
pub fn fft_inverse(s: &Spectrum3D) -> Result<Volume3D> {
    let deviation = s.hermitian_deviation();
    if deviation > HERMITIAN_TOL {
        return Err(QsmError::NonHermitianSpectrum { deviation });
    }
    Ok(fft_inverse_real_part(s))
}

/// Real part of the normalised inverse transform, without the symmetry check.
/// Used where the adjoint of a real-to-complex map is wanted.
pub(crate) fn fft_inverse_real_part(s: &Spectrum3D) -> Volume3D {
    let grid = *s.grid();
    let mut data = s.data().to_vec();
    transform(&grid, &mut data, Direction::Inverse);
    let scale = 1.0 / grid.len() as f64;
    Volume3D::new(grid, data.iter().map(|c| c.re * scale).collect())
        .expect("inverse of a finite spectrum is finite")
}

/// Applies a real per-bin multiplier in k-space: `Re(IFFT(m · FFT(v)))`.
pub(crate) fn apply_real_multiplier(v: &Volume3D, multiplier: &[f64]) -> Volume3D {
    let mut s = fft_forward(v);
    for (c, &m) in s.data_mut().iter_mut().zip(multiplier) {
        *c *= m;
    }
    fft_inverse_real_part(&s)
}
