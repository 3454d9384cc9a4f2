//! Frequency weighting and the training losses, each returning its value
//! together with exact gradients.
//!
//! k-space losses are evaluated on the unnormalised DFT, so `L_DC` scales with
//! the voxel count; all of them are plain sums, never means.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dipole::{forward_field, DipoleKernel};
use crate::error::{QsmError, Result};
use crate::fft::{fft_forward, fft_inverse_real_part};
use crate::grid::{GridSpec, Spectrum3D, Volume3D};

/// Every scalar knob of the losses and the trainer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    /// Decay of the weighting mask.
    pub tau: f64,
    /// Floor the averaged kernel magnitude is pushed above.
    pub eps: f64,
    /// Weight of the dipole loss in the total; `w_dipole` is accepted as an alias.
    #[serde(alias = "w_dipole")]
    pub lambda: f64,
    pub w_model: f64,
    pub w_grad: f64,
    pub w_voxel: f64,
    pub t_tkd: f64,
    pub t_cone: f64,
    /// Number of orientations the network is asked to predict.
    pub orientations: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            tau: 0.15,
            eps: 0.1,
            lambda: 1.0,
            w_model: 0.4,
            w_grad: 0.1,
            w_voxel: 0.2,
            t_tkd: 0.2,
            t_cone: 0.2,
            orientations: 1,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [("tau", self.tau), ("eps", self.eps)];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(QsmError::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        let weights = [
            ("lambda", self.lambda),
            ("w_model", self.w_model),
            ("w_grad", self.w_grad),
            ("w_voxel", self.w_voxel),
        ];
        for (name, v) in weights {
            if !(v.is_finite() && v >= 0.0) {
                return Err(QsmError::InvalidParameter(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        if self.w_model + self.w_grad + self.w_voxel + self.lambda <= 0.0 {
            return Err(QsmError::InvalidParameter("all loss weights are zero".into()));
        }
        if !(self.t_tkd > 0.0 && self.t_tkd <= 1.0 / 3.0) {
            return Err(QsmError::InvalidParameter(format!(
                "t_tkd must lie in (0, 1/3], got {}",
                self.t_tkd
            )));
        }
        if !(self.t_cone > 0.0 && self.t_cone < 1.0 / 3.0) {
            return Err(QsmError::InvalidParameter(format!(
                "t_cone must lie in (0, 1/3), got {}",
                self.t_cone
            )));
        }
        if self.orientations == 0 {
            return Err(QsmError::InsufficientOrientations { got: 0 });
        }
        Ok(())
    }
}

/// `exp(-D_ref^2 / tau^2)` per frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMask {
    grid: GridSpec,
    values: Vec<f64>,
}

impl WeightMask {
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

pub fn weight_mask(d_ref: &DipoleKernel, tau: f64) -> Result<WeightMask> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(QsmError::InvalidParameter(format!("tau must be positive, got {tau}")));
    }
    let tau2 = tau * tau;
    Ok(WeightMask {
        grid: *d_ref.grid(),
        values: d_ref.values().iter().map(|d| (-(d * d) / tau2).exp()).collect(),
    })
}

/// A loss value and its gradient with respect to each predicted kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelLoss {
    pub value: f64,
    pub grad: Vec<Vec<f64>>,
}

fn check_kernels(kernels: &[DipoleKernel], grid: &GridSpec) -> Result<()> {
    if kernels.is_empty() {
        return Err(QsmError::InsufficientOrientations { got: 0 });
    }
    kernels.iter().try_for_each(|k| grid.ensure_same(k.grid()))
}

/// `Σ_i Σ_k (W (D̂_i - D_i))^2`.
pub fn loss_inr(d_hat: &[DipoleKernel], d_ref: &[DipoleKernel], w: &WeightMask) -> Result<KernelLoss> {
    check_kernels(d_hat, &w.grid)?;
    check_kernels(d_ref, &w.grid)?;
    if d_hat.len() != d_ref.len() {
        return Err(QsmError::LengthMismatch {
            expected: d_ref.len(),
            got: d_hat.len(),
        });
    }
    let mut value = 0.0;
    let grad = d_hat
        .iter()
        .zip(d_ref)
        .map(|(h, r)| {
            h.values()
                .iter()
                .zip(r.values())
                .zip(&w.values)
                .map(|((&a, &b), &wk)| {
                    let e = wk * (a - b);
                    value += e * e;
                    2.0 * wk * e
                })
                .collect()
        })
        .collect();
    Ok(KernelLoss { value, grad })
}

/// `Σ_k W max(0, eps - mean_i |D̂_i|)^2`.
///
/// The mask enters once, outside the square. The subgradient of `|·|` at 0 is 0.
pub fn loss_fill(d_hat: &[DipoleKernel], w: &WeightMask, eps: f64) -> Result<KernelLoss> {
    check_kernels(d_hat, &w.grid)?;
    let m = d_hat.len() as f64;
    let n = w.grid.len();
    let mut value = 0.0;
    let mut grad = vec![vec![0.0; n]; d_hat.len()];
    for k in 0..n {
        let mean = d_hat.iter().map(|h| h.values()[k].abs()).sum::<f64>() / m;
        let hinge = (eps - mean).max(0.0);
        if hinge == 0.0 {
            continue;
        }
        let wk = w.values[k];
        value += wk * hinge * hinge;
        for (g, h) in grad.iter_mut().zip(d_hat) {
            let d = h.values()[k];
            let sign = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            g[k] = -2.0 * wk * hinge * sign / m;
        }
    }
    Ok(KernelLoss { value, grad })
}

/// Data-consistency loss with gradients for the source estimate and each kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct DcLoss {
    pub value: f64,
    pub grad_chi: Volume3D,
    pub grad_d: Vec<Vec<f64>>,
}

/// `Σ_i Σ_k W^2 |F{field_i} - D̂_i F{chi_hat}|^2`.
///
/// `fields` holds either a single field, compared against every kernel, or
/// one field per kernel.
pub fn loss_dc(
    fields: &[Volume3D],
    chi_hat: &Volume3D,
    d_hat: &[DipoleKernel],
    w: &WeightMask,
) -> Result<DcLoss> {
    let grid = w.grid;
    check_kernels(d_hat, &grid)?;
    grid.ensure_same(chi_hat.grid())?;
    if fields.len() != 1 && fields.len() != d_hat.len() {
        return Err(QsmError::LengthMismatch {
            expected: d_hat.len(),
            got: fields.len(),
        });
    }
    for f in fields {
        grid.ensure_same(f.grid())?;
    }
    let spectra: Vec<Spectrum3D> = fields.iter().map(fft_forward).collect();
    let chi_spec = fft_forward(chi_hat);
    let n = grid.len();

    let mut value = 0.0;
    let mut back = vec![Complex64::new(0.0, 0.0); n];
    let mut grad_d = Vec::with_capacity(d_hat.len());
    for (i, kernel) in d_hat.iter().enumerate() {
        let fb = spectra[if spectra.len() == 1 { 0 } else { i }].data();
        let mut g = vec![0.0; n];
        for k in 0..n {
            let d = kernel.values()[k];
            let c = chi_spec.data()[k];
            let r = fb[k] - c * d;
            let w2 = w.values[k] * w.values[k];
            value += w2 * r.norm_sqr();
            g[k] = -2.0 * w2 * (c.conj() * r).re;
            back[k] += r * (w2 * d);
        }
        grad_d.push(g);
    }
    // d/dchi of Σ |R|^2 is -2 Re(Σ_k W^2 D R e^{+2πi k·n/N}) = -2 N Re(IFFT(W^2 D R)).
    let scale = -2.0 * n as f64;
    let grad_chi = fft_inverse_real_part(&Spectrum3D::new(grid, back)?)
        .map(|v| scale * v)?;
    Ok(DcLoss {
        value,
        grad_chi,
        grad_d,
    })
}

/// Component values of the dipole loss.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DipoleTerms {
    pub inr: f64,
    pub fill: f64,
    pub dc: f64,
}

impl DipoleTerms {
    pub fn total(&self) -> f64 {
        loss_dipole(self.inr, self.fill, self.dc)
    }
}

pub fn loss_dipole(inr: f64, fill: f64, dc: f64) -> f64 {
    inr + fill + dc
}

/// Dipole loss evaluated in one pass, gradients summed over its components.
#[derive(Debug, Clone, PartialEq)]
pub struct DipoleLoss {
    pub terms: DipoleTerms,
    pub grad_d: Vec<Vec<f64>>,
    pub grad_chi: Volume3D,
}

pub fn dipole_loss(
    fields: &[Volume3D],
    chi_hat: &Volume3D,
    d_hat: &[DipoleKernel],
    d_ref: &[DipoleKernel],
    w: &WeightMask,
    eps: f64,
) -> Result<DipoleLoss> {
    let inr = loss_inr(d_hat, d_ref, w)?;
    let fill = loss_fill(d_hat, w, eps)?;
    let dc = loss_dc(fields, chi_hat, d_hat, w)?;
    let grad_d = inr
        .grad
        .iter()
        .zip(&fill.grad)
        .zip(&dc.grad_d)
        .map(|((a, b), c)| a.iter().zip(b).zip(c).map(|((x, y), z)| x + y + z).collect())
        .collect();
    Ok(DipoleLoss {
        terms: DipoleTerms {
            inr: inr.value,
            fill: fill.value,
            dc: dc.value,
        },
        grad_d,
        grad_chi: dc.grad_chi,
    })
}

/// Supervised reconstruction loss split into its weighted terms.
#[derive(Debug, Clone, PartialEq)]
pub struct QsmnetLoss {
    pub model: f64,
    pub voxel: f64,
    pub gradient: f64,
    pub value: f64,
    pub grad_chi: Volume3D,
}

#[inline]
fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `w_model |A(χ̂ - χ)|_1 + w_voxel |χ̂ - χ|_1 + w_grad |∇(χ̂ - χ)|_1`, where
/// `A` is the forward model of `kernel` and `∇` takes forward differences
/// along each axis without wrap-around.
pub fn loss_qsmnet(
    chi_hat: &Volume3D,
    chi_label: &Volume3D,
    kernel: &DipoleKernel,
    hp: &HyperParams,
) -> Result<QsmnetLoss> {
    chi_hat.grid().ensure_same(chi_label.grid())?;
    let grid = *chi_hat.grid();
    let resid = chi_hat.axpby(1.0, chi_label, -1.0)?;
    let e = resid.data();
    let n = grid.len();
    let mut grad = vec![0.0; n];

    let voxel: f64 = e.iter().map(|v| v.abs()).sum();
    for (g, &v) in grad.iter_mut().zip(e) {
        *g += hp.w_voxel * sign0(v);
    }

    let ae = forward_field(&resid, kernel)?;
    let model: f64 = ae.data().iter().map(|v| v.abs()).sum();
    let signs = Volume3D::new(grid, ae.data().iter().map(|&v| sign0(v)).collect())?;
    // the forward model is self-adjoint for a point-symmetric real kernel
    let back = forward_field(&signs, kernel)?;
    for (g, &b) in grad.iter_mut().zip(back.data()) {
        *g += hp.w_model * b;
    }

    let dims = grid.dims();
    let strides = [1, dims[0], dims[0] * dims[1]];
    let mut gradient = 0.0;
    for idx in 0..n {
        let c = grid.coords(idx);
        let c = [c.0, c.1, c.2];
        for a in 0..3 {
            if c[a] + 1 < dims[a] {
                let d = e[idx + strides[a]] - e[idx];
                gradient += d.abs();
                let s = hp.w_grad * sign0(d);
                grad[idx + strides[a]] += s;
                grad[idx] -= s;
            }
        }
    }

    let value = hp.w_model * model + hp.w_voxel * voxel + hp.w_grad * gradient;
    Ok(QsmnetLoss {
        model,
        voxel,
        gradient,
        value,
        grad_chi: Volume3D::new(grid, grad)?,
    })
}

pub fn loss_total(l_qsmnet: f64, l_dipole: f64, lambda: f64) -> f64 {
    l_qsmnet + lambda * l_dipole
}
