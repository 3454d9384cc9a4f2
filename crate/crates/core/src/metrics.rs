//! Image-quality metrics evaluated inside an optional mask.
//!
//! SSIM and HFEN filter the whole volume with zero padding and then score
//! only centres far enough from the grid faces that the window never reaches
//! the padding.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{QsmError, Result};
use crate::grid::{GridSpec, Mask3D, Volume3D};

pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_RADIUS: usize = 5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const LOG_SIGMA: f64 = 1.5;
/// Half-width of the 15-tap Laplacian-of-Gaussian support.
pub const LOG_RADIUS: usize = 7;

pub const CSV_HEADER: &str = "hfen,nrmse,ssim,psnr,mask_voxels";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub hfen: f64,
    pub nrmse: f64,
    pub ssim: f64,
    /// `+inf` when the two volumes agree exactly inside the mask.
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub psnr: f64,
    pub mask_voxels: usize,
}

fn ser_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str(&fmt_value(*v))
    }
}

fn de_db<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Db {
        Num(f64),
        Text(String),
    }
    match Db::deserialize(d)? {
        Db::Num(v) => Ok(v),
        Db::Text(t) => match t.as_str() {
            "inf" => Ok(f64::INFINITY),
            "-inf" => Ok(f64::NEG_INFINITY),
            other => Err(serde::de::Error::custom(format!("bad psnr value {other:?}"))),
        },
    }
}

fn fmt_value(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v:e}")
    }
}

impl MetricsReport {
    /// Values in [`CSV_HEADER`] order.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            fmt_value(self.hfen),
            fmt_value(self.nrmse),
            fmt_value(self.ssim),
            fmt_value(self.psnr),
            self.mask_voxels
        )
    }
}

fn resolve_mask(x: &Volume3D, reference: &Volume3D, mask: Option<&Mask3D>) -> Result<Mask3D> {
    x.grid().ensure_same(reference.grid())?;
    match mask {
        Some(m) => {
            x.grid().ensure_same(m.grid())?;
            Ok(m.clone())
        }
        None => Ok(Mask3D::full(*x.grid())),
    }
}

fn masked(mask: &Mask3D) -> impl Iterator<Item = usize> + '_ {
    mask.flags().iter().enumerate().filter(|(_, &f)| f).map(|(i, _)| i)
}

pub fn nrmse(x: &Volume3D, reference: &Volume3D, mask: Option<&Mask3D>) -> Result<f64> {
    let m = resolve_mask(x, reference, mask)?;
    let (xs, r) = (x.data(), reference.data());
    let mut num = 0.0;
    let mut den = 0.0;
    for i in masked(&m) {
        num += (xs[i] - r[i]).powi(2);
        den += r[i] * r[i];
    }
    if den == 0.0 {
        return Err(QsmError::ZeroReference);
    }
    Ok((num / den).sqrt())
}

/// Max minus min of `reference` inside `mask`; 0 for an empty mask.
fn dynamic_range(reference: &Volume3D, mask: &Mask3D) -> f64 {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in masked(mask) {
        lo = lo.min(reference.data()[i]);
        hi = hi.max(reference.data()[i]);
    }
    if hi >= lo {
        hi - lo
    } else {
        0.0
    }
}

pub fn psnr(x: &Volume3D, reference: &Volume3D, mask: Option<&Mask3D>) -> Result<f64> {
    let m = resolve_mask(x, reference, mask)?;
    let count = m.count();
    if count == 0 {
        return Err(QsmError::EmptyMask);
    }
    let sse: f64 = masked(&m).map(|i| (x.data()[i] - reference.data()[i]).powi(2)).sum();
    if sse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let peak = dynamic_range(reference, &m);
    Ok(10.0 * (peak * peak / (sse / count as f64)).log10())
}

/// Normalised 1-D Gaussian taps on `-radius..=radius`.
pub fn gaussian_taps(sigma: f64, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let raw: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Second-derivative-of-Gaussian taps, shifted to sum to zero.
pub fn gaussian_second_derivative_taps(sigma: f64, radius: usize) -> Vec<f64> {
    let g = gaussian_taps(sigma, radius);
    let s2 = sigma * sigma;
    let raw: Vec<f64> = g
        .iter()
        .enumerate()
        .map(|(i, gv)| {
            let x = i as f64 - radius as f64;
            (x * x - s2) / (s2 * s2) * gv
        })
        .collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    raw.into_iter().map(|v| v - mean).collect()
}

/// Zero-padded correlation along one axis with centred odd-length taps.
fn filter_axis(data: &[f64], grid: &GridSpec, axis: usize, taps: &[f64]) -> Vec<f64> {
    let dims = grid.dims();
    let r = (taps.len() / 2) as isize;
    let n = dims[axis] as isize;
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    } as isize;
    let mut out = vec![0.0; data.len()];
    for (idx, o) in out.iter_mut().enumerate() {
        let (i, j, k) = grid.coords(idx);
        let c = [i, j, k][axis] as isize;
        let mut acc = 0.0;
        for (t, w) in taps.iter().enumerate() {
            let p = c + t as isize - r;
            if p >= 0 && p < n {
                acc += w * data[(idx as isize + (p - c) * stride) as usize];
            }
        }
        *o = acc;
    }
    out
}

fn separable(data: &[f64], grid: &GridSpec, taps: [&[f64]; 3]) -> Vec<f64> {
    let a = filter_axis(data, grid, 0, taps[0]);
    let b = filter_axis(&a, grid, 1, taps[1]);
    filter_axis(&b, grid, 2, taps[2])
}

/// Laplacian of Gaussian with a zero-sum 15-tap separable kernel.
pub fn laplacian_of_gaussian(v: &Volume3D) -> Volume3D {
    let g = gaussian_taps(LOG_SIGMA, LOG_RADIUS);
    let d2 = gaussian_second_derivative_taps(LOG_SIGMA, LOG_RADIUS);
    let grid = v.grid();
    let mut out = separable(v.data(), grid, [&d2, &g, &g]);
    for taps in [[&g[..], &d2[..], &g[..]], [&g[..], &g[..], &d2[..]]] {
        for (o, t) in out.iter_mut().zip(separable(v.data(), grid, taps)) {
            *o += t;
        }
    }
    Volume3D::new(*grid, out).expect("filter output matches grid")
}

pub fn hfen(x: &Volume3D, reference: &Volume3D, mask: Option<&Mask3D>) -> Result<f64> {
    let m = resolve_mask(x, reference, mask)?.interior(LOG_RADIUS);
    if m.count() == 0 {
        return Err(QsmError::EmptyMask);
    }
    let lx = laplacian_of_gaussian(x);
    let lr = laplacian_of_gaussian(reference);
    let mut num = 0.0;
    let mut den = 0.0;
    for i in masked(&m) {
        num += (lx.data()[i] - lr.data()[i]).powi(2);
        den += lr.data()[i].powi(2);
    }
    if den == 0.0 {
        return Err(QsmError::ZeroReference);
    }
    Ok((num / den).sqrt())
}

/// Mean local SSIM over mask centres whose window stays inside the grid.
/// The dynamic range is taken from `reference` over the full mask; a
/// constant reference falls back to 1.
pub fn ssim(x: &Volume3D, reference: &Volume3D, mask: Option<&Mask3D>) -> Result<f64> {
    let full = resolve_mask(x, reference, mask)?;
    let m = full.interior(SSIM_RADIUS);
    if m.count() == 0 {
        return Err(QsmError::EmptyMask);
    }
    let mut range = dynamic_range(reference, &full);
    if range == 0.0 {
        range = 1.0;
    }
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let g = gaussian_taps(SSIM_SIGMA, SSIM_RADIUS);
    let grid = x.grid();
    let blur = |v: &[f64]| separable(v, grid, [&g, &g, &g]);
    let (a, b) = (x.data(), reference.data());
    let mu_a = blur(a);
    let mu_b = blur(b);
    let aa = blur(&a.iter().map(|v| v * v).collect::<Vec<_>>());
    let bb = blur(&b.iter().map(|v| v * v).collect::<Vec<_>>());
    let ab = blur(&a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>());
    let mut total = 0.0;
    for i in masked(&m) {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / m.count() as f64)
}

pub fn evaluate(x: &Volume3D, reference: &Volume3D, mask: Option<&Mask3D>) -> Result<MetricsReport> {
    let m = resolve_mask(x, reference, mask)?;
    Ok(MetricsReport {
        hfen: hfen(x, reference, Some(&m))?,
        nrmse: nrmse(x, reference, Some(&m))?,
        ssim: ssim(x, reference, Some(&m))?,
        psnr: psnr(x, reference, Some(&m))?,
        mask_voxels: m.count(),
    })
}
