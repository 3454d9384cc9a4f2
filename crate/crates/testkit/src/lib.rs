//! Deliberately slow, loop-by-loop reference implementations used as test
//! oracles, plus finite-difference helpers. The oracles share nothing with
//! `qsm-core` beyond plain slices; the checks in [`gradients`] drive the
//! library types against them.

use std::f64::consts::PI;

pub mod gradients;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn flat(dims: [usize; 3], i: usize, j: usize, k: usize) -> usize {
    i + dims[0] * (j + dims[1] * k)
}

fn signed(i: usize, n: usize) -> f64 {
    if 2 * i >= n {
        i as f64 - n as f64
    } else {
        i as f64
    }
}

/// Direct DFT `X[k] = Σ_n x[n] exp(sign · 2πi Σ_a k_a n_a / N_a)`.
pub fn naive_dft(dims: [usize; 3], x: &[Complex64], sign: f64) -> Vec<Complex64> {
    let [nx, ny, nz] = dims;
    let mut out = vec![Complex64::new(0.0, 0.0); x.len()];
    for kz in 0..nz {
        for ky in 0..ny {
            for kx in 0..nx {
                let mut acc = Complex64::new(0.0, 0.0);
                for z in 0..nz {
                    for y in 0..ny {
                        for xx in 0..nx {
                            let phase = sign
                                * 2.0
                                * PI
                                * ((kx * xx) as f64 / nx as f64
                                    + (ky * y) as f64 / ny as f64
                                    + (kz * z) as f64 / nz as f64);
                            acc += x[flat(dims, xx, y, z)] * Complex64::from_polar(1.0, phase);
                        }
                    }
                }
                out[flat(dims, kx, ky, kz)] = acc;
            }
        }
    }
    out
}

pub fn naive_fft_real(dims: [usize; 3], x: &[f64]) -> Vec<Complex64> {
    let c: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    naive_dft(dims, &c, -1.0)
}

/// Real part of the normalised inverse DFT.
pub fn naive_ifft_real(dims: [usize; 3], s: &[Complex64]) -> Vec<f64> {
    let n = s.len() as f64;
    naive_dft(dims, s, 1.0).iter().map(|c| c.re / n).collect()
}

fn dipole_at(k: [f64; 3], b: [f64; 3]) -> f64 {
    let k2 = k[0] * k[0] + k[1] * k[1] + k[2] * k[2];
    if k2 == 0.0 {
        return 0.0;
    }
    let kb = k[0] * b[0] + k[1] * b[1] + k[2] * b[2];
    1.0 / 3.0 - kb * kb / k2
}

/// Dipole kernel by direct evaluation. Bins on a Nyquist plane of an even
/// axis carry the mean of `D(k)` and `D` at `k` with those components negated.
pub fn naive_kernel(dims: [usize; 3], voxel: [f64; 3], b: [f64; 3]) -> Vec<f64> {
    let mut out = vec![0.0; dims.iter().product()];
    for kz in 0..dims[2] {
        for ky in 0..dims[1] {
            for kx in 0..dims[0] {
                let idx = [kx, ky, kz];
                let k: Vec<f64> = (0..3)
                    .map(|a| signed(idx[a], dims[a]) / (dims[a] as f64 * voxel[a]))
                    .collect();
                let nyq: Vec<usize> = (0..3)
                    .filter(|&a| dims[a] % 2 == 0 && idx[a] == dims[a] / 2)
                    .collect();
                let mut alias = [k[0], k[1], k[2]];
                for &a in &nyq {
                    alias[a] = -alias[a];
                }
                let direct = dipole_at([k[0], k[1], k[2]], b);
                out[flat(dims, kx, ky, kz)] = if nyq.is_empty() {
                    direct
                } else {
                    0.5 * (direct + dipole_at(alias, b))
                };
            }
        }
    }
    out
}

pub fn naive_forward_field(dims: [usize; 3], voxel: [f64; 3], b: [f64; 3], chi: &[f64]) -> Vec<f64> {
    let d = naive_kernel(dims, voxel, b);
    let s: Vec<Complex64> = naive_fft_real(dims, chi)
        .iter()
        .zip(&d)
        .map(|(c, &dk)| c * dk)
        .collect();
    naive_ifft_real(dims, &s)
}

pub fn naive_weight(d_ref: &[f64], tau: f64) -> Vec<f64> {
    d_ref.iter().map(|d| (-(d.abs() / tau).powi(2)).exp()).collect()
}

pub fn naive_loss_inr(d_hat: &[Vec<f64>], d_ref: &[Vec<f64>], w: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..d_hat.len() {
        for k in 0..w.len() {
            total += (w[k] * (d_hat[i][k] - d_ref[i][k])).powi(2);
        }
    }
    total
}

pub fn naive_loss_fill(d_hat: &[Vec<f64>], w: &[f64], eps: f64) -> f64 {
    let mut total = 0.0;
    for k in 0..w.len() {
        let mut mean = 0.0;
        for h in d_hat {
            mean += h[k].abs();
        }
        mean /= d_hat.len() as f64;
        let hinge = if eps > mean { eps - mean } else { 0.0 };
        total += w[k] * hinge * hinge;
    }
    total
}

pub fn naive_loss_dc(dims: [usize; 3], fields: &[Vec<f64>], chi: &[f64], d_hat: &[Vec<f64>], w: &[f64]) -> f64 {
    let fc = naive_fft_real(dims, chi);
    let mut total = 0.0;
    for (i, d) in d_hat.iter().enumerate() {
        let field = if fields.len() == 1 { &fields[0] } else { &fields[i] };
        let fb = naive_fft_real(dims, field);
        for k in 0..w.len() {
            let r = fb[k] - fc[k] * d[k];
            total += w[k] * w[k] * r.norm_sqr();
        }
    }
    total
}

/// Weighted L1 terms `(model, voxel, gradient)` of the supervised loss.
pub fn naive_qsmnet_terms(
    dims: [usize; 3],
    voxel: [f64; 3],
    b: [f64; 3],
    chi_hat: &[f64],
    label: &[f64],
) -> (f64, f64, f64) {
    let a_hat = naive_forward_field(dims, voxel, b, chi_hat);
    let a_lab = naive_forward_field(dims, voxel, b, label);
    let model = a_hat.iter().zip(&a_lab).map(|(x, y)| (x - y).abs()).sum();
    let vox = chi_hat.iter().zip(label).map(|(x, y)| (x - y).abs()).sum();
    let mut grad = 0.0;
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let p = flat(dims, i, j, k);
                let mut nb = Vec::new();
                if i + 1 < dims[0] {
                    nb.push(flat(dims, i + 1, j, k));
                }
                if j + 1 < dims[1] {
                    nb.push(flat(dims, i, j + 1, k));
                }
                if k + 1 < dims[2] {
                    nb.push(flat(dims, i, j, k + 1));
                }
                for q in nb {
                    grad += ((chi_hat[q] - chi_hat[p]) - (label[q] - label[p])).abs();
                }
            }
        }
    }
    (model, vox, grad)
}

/// Residual convolutional stack evaluated with explicit nested loops.
/// Parameter layout per layer: weights `[c_out][c_in][kz][ky][kx]`, then biases.
pub fn naive_conv_net(channels: &[usize], ksize: usize, slope: f64, params: &[f64], dims: [usize; 3], input: &[f64]) -> Vec<f64> {
    naive_conv_trace(channels, ksize, slope, params, dims, input).0
}

/// Output of [`naive_conv_net`] together with every hidden pre-activation.
pub fn naive_conv_trace(
    channels: &[usize],
    ksize: usize,
    slope: f64,
    params: &[f64],
    dims: [usize; 3],
    input: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut pre = Vec::new();
    let n = input.len();
    let r = (ksize / 2) as isize;
    let taps = ksize * ksize * ksize;
    let mut h = input.to_vec();
    let mut off = 0;
    let layers = channels.len() - 1;
    for l in 0..layers {
        let (cin, cout) = (channels[l], channels[l + 1]);
        let w = &params[off..off + cout * cin * taps];
        let bias = &params[off + cout * cin * taps..off + cout * cin * taps + cout];
        off += cout * cin * taps + cout;
        let mut out = vec![0.0; cout * n];
        for co in 0..cout {
            for z in 0..dims[2] {
                for y in 0..dims[1] {
                    for x in 0..dims[0] {
                        let mut acc = bias[co];
                        for ci in 0..cin {
                            for dz in 0..ksize {
                                for dy in 0..ksize {
                                    for dx in 0..ksize {
                                        let sx = x as isize + dx as isize - r;
                                        let sy = y as isize + dy as isize - r;
                                        let sz = z as isize + dz as isize - r;
                                        if sx < 0
                                            || sy < 0
                                            || sz < 0
                                            || sx >= dims[0] as isize
                                            || sy >= dims[1] as isize
                                            || sz >= dims[2] as isize
                                        {
                                            continue;
                                        }
                                        let t = dx + ksize * (dy + ksize * dz);
                                        acc += w[(co * cin + ci) * taps + t]
                                            * h[ci * n + flat(dims, sx as usize, sy as usize, sz as usize)];
                                    }
                                }
                            }
                        }
                        if l + 1 < layers {
                            pre.push(acc);
                        }
                        let v = if l + 1 < layers && acc <= 0.0 { slope * acc } else { acc };
                        out[co * n + flat(dims, x, y, z)] = v;
                    }
                }
            }
        }
        h = out;
    }
    (h.iter().zip(input).map(|(a, b)| a + b).collect(), pre)
}

/// Sine network on one input row. Parameter layout per layer: weights
/// row-major `[out][in]`, then biases.
pub fn naive_siren(depth: usize, width: usize, omega0: f64, params: &[f64], row: &[f64; 6]) -> f64 {
    let mut h: Vec<f64> = row.to_vec();
    let mut off = 0;
    for l in 0..depth {
        let fan_in = h.len();
        let fan_out = if l + 1 == depth { 1 } else { width };
        let mut z = vec![0.0; fan_out];
        for o in 0..fan_out {
            let mut acc = params[off + fan_in * fan_out + o];
            for i in 0..fan_in {
                acc += params[off + o * fan_in + i] * h[i];
            }
            z[o] = if l + 1 == depth { acc } else { (omega0 * acc).sin() };
        }
        off += fan_in * fan_out + fan_out;
        h = z;
    }
    h[0]
}

/// Central difference of `f` along coordinate `i` of `x`; `x` is restored.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &mut [f64], i: usize, h: f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let plus = f(x);
    x[i] = orig - h;
    let minus = f(x);
    x[i] = orig;
    (plus - minus) / (2.0 * h)
}

/// Smallest gradient magnitude a central difference of step `h` can resolve
/// to relative accuracy `tol` when the objective has magnitude `value`:
/// below it, roundoff in the two evaluations dominates the difference.
pub fn fd_floor(value: f64, h: f64, tol: f64) -> f64 {
    10.0 * f64::EPSILON * value.abs().max(1.0) / (h * tol)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Gaussian weights on `-r..=r`, normalised to unit sum, and the
/// zero-sum second derivative built from them.
fn naive_gauss_pair(sigma: f64, r: usize) -> (Vec<f64>, Vec<f64>) {
    let xs: Vec<f64> = (0..=2 * r).map(|i| i as f64 - r as f64).collect();
    let mut g: Vec<f64> = xs.iter().map(|x| (-x * x / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= total);
    let s2 = sigma * sigma;
    let mut d2: Vec<f64> = xs.iter().zip(&g).map(|(x, gv)| (x * x - s2) / (s2 * s2) * gv).collect();
    let mean = d2.iter().sum::<f64>() / d2.len() as f64;
    d2.iter_mut().for_each(|v| *v -= mean);
    (g, d2)
}

fn inside(dims: [usize; 3], i: usize, j: usize, k: usize, r: usize) -> bool {
    [i, j, k].iter().zip(dims).all(|(&c, n)| c >= r && c + r < n)
}

pub fn naive_nrmse(x: &[f64], reference: &[f64], mask: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..x.len() {
        if mask[i] {
            num += (x[i] - reference[i]) * (x[i] - reference[i]);
            den += reference[i] * reference[i];
        }
    }
    (num / den).sqrt()
}

pub fn naive_psnr(x: &[f64], reference: &[f64], mask: &[bool]) -> f64 {
    let idx: Vec<usize> = (0..x.len()).filter(|&i| mask[i]).collect();
    let mse = idx.iter().map(|&i| (x[i] - reference[i]).powi(2)).sum::<f64>() / idx.len() as f64;
    let hi = idx.iter().map(|&i| reference[i]).fold(f64::MIN, f64::max);
    let lo = idx.iter().map(|&i| reference[i]).fold(f64::MAX, f64::min);
    10.0 * ((hi - lo) * (hi - lo) / mse).log10()
}

/// Direct 15x15x15 zero-padded Laplacian-of-Gaussian at every voxel.
pub fn naive_log(dims: [usize; 3], v: &[f64]) -> Vec<f64> {
    let r = 7usize;
    let (g, d2) = naive_gauss_pair(1.5, r);
    let mut out = vec![0.0; v.len()];
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let mut acc = 0.0;
                for c in 0..=2 * r {
                    for b in 0..=2 * r {
                        for a in 0..=2 * r {
                            let (ii, jj, kk) = (i + a, j + b, k + c);
                            if ii < r || jj < r || kk < r || ii - r >= dims[0] || jj - r >= dims[1] || kk - r >= dims[2] {
                                continue;
                            }
                            let w = d2[a] * g[b] * g[c] + g[a] * d2[b] * g[c] + g[a] * g[b] * d2[c];
                            acc += w * v[flat(dims, ii - r, jj - r, kk - r)];
                        }
                    }
                }
                out[flat(dims, i, j, k)] = acc;
            }
        }
    }
    out
}

pub fn naive_hfen(dims: [usize; 3], x: &[f64], reference: &[f64], mask: &[bool]) -> f64 {
    let lx = naive_log(dims, x);
    let lr = naive_log(dims, reference);
    let mut num = 0.0;
    let mut den = 0.0;
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let p = flat(dims, i, j, k);
                if mask[p] && inside(dims, i, j, k, 7) {
                    num += (lx[p] - lr[p]).powi(2);
                    den += lr[p].powi(2);
                }
            }
        }
    }
    (num / den).sqrt()
}

/// Windowed SSIM evaluated one centre at a time with explicit 11x11x11 weights.
pub fn naive_ssim(dims: [usize; 3], x: &[f64], reference: &[f64], mask: &[bool]) -> f64 {
    let r = 5usize;
    let (g, _) = naive_gauss_pair(1.5, r);
    let sel: Vec<usize> = (0..x.len()).filter(|&i| mask[i]).collect();
    let hi = sel.iter().map(|&i| reference[i]).fold(f64::MIN, f64::max);
    let lo = sel.iter().map(|&i| reference[i]).fold(f64::MAX, f64::min);
    let range = if hi > lo { hi - lo } else { 1.0 };
    let c1 = (0.01 * range) * (0.01 * range);
    let c2 = (0.03 * range) * (0.03 * range);
    let mut total = 0.0;
    let mut count = 0usize;
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                if !mask[flat(dims, i, j, k)] || !inside(dims, i, j, k, r) {
                    continue;
                }
                let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for c in 0..=2 * r {
                    for b in 0..=2 * r {
                        for a in 0..=2 * r {
                            let w = g[a] * g[b] * g[c];
                            let p = flat(dims, i + a - r, j + b - r, k + c - r);
                            ma += w * x[p];
                            mb += w * reference[p];
                            aa += w * x[p] * x[p];
                            bb += w * reference[p] * reference[p];
                            ab += w * x[p] * reference[p];
                        }
                    }
                }
                let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
                total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    total / count as f64
}
