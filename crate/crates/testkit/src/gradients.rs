//! Analytic gradients against central finite differences. Each check
//! returns the worst relative error it saw.

use qsm_core::dipole::{dipole_kernel, forward_field, DipoleKernel, Orientation};
use qsm_core::grid::{GridSpec, Volume3D};
use qsm_core::loss::*;
use qsm_core::recon::{ConvReconstructor, ReconConfig};
use qsm_core::siren::{CoordBatch, SirenConfig, SirenNet};
use crate::*;
use rand::seq::SliceRandom;
use rand::Rng;

const H: f64 = 1e-6;

fn orientation(r: &mut rand_chacha::ChaCha8Rng) -> Orientation {
    Orientation::from_direction([r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(0.2..1.0)]).unwrap()
}

pub fn siren_parameter_gradients(trials: usize) -> f64 {
    let g = GridSpec::cube(8).unwrap();
    let mut r = rng(100);
    let mut worst: f64 = 0.0;
    for trial in 0..trials as u64 {
        let cfg = SirenConfig {
            depth: r.gen_range(2..=5),
            width: r.gen_range(4..=16),
            omega0: 30.0,
        };
        let mut net = SirenNet::new(cfg, trial).unwrap();
        let full = CoordBatch::for_grid(&g, orientation(&mut r));
        let rows: Vec<usize> = (0..12).map(|_| r.gen_range(0..g.len())).collect();
        let batch = full.select(&rows);
        let weights = uniform_vec(&mut r, batch.len(), -1.0, 1.0);

        let out = net.forward(&batch);
        for (row, o) in batch.rows().iter().zip(&out) {
            let naive = naive_siren(cfg.depth, cfg.width, cfg.omega0, net.params(), row);
            assert!((naive - o).abs() < 1e-12 * (1.0 + naive.abs()));
        }
        net.zero_grad();
        net.backward(&batch, &weights).unwrap();
        let analytic = net.grads().to_vec();
        let objective_at: f64 = out.iter().zip(&weights).map(|(y, w)| y * w).sum();

        let mut params = net.params().to_vec();
        let probe = net.clone();
        for i in 0..params.len() {
            let numeric = central_difference(
                |p| {
                    let mut n = probe.clone();
                    n.set_params(p).unwrap();
                    n.predict(&batch).iter().zip(&weights).map(|(y, w)| y * w).sum()
                },
                &mut params,
                i,
                H,
            );
            worst = worst.max(rel_err(analytic[i], numeric, fd_floor(objective_at, H, 1e-5)));
        }
    }
    worst
}

pub fn inr_and_fill_gradients(trials: usize) -> f64 {
    let g = GridSpec::cube(8).unwrap();
    let n = g.len();
    let mut r = rng(101);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let m = r.gen_range(1..=3);
        let eps = 0.1;
        let orients: Vec<_> = (0..m).map(|_| orientation(&mut r)).collect();
        let d_ref: Vec<_> = orients.iter().map(|o| dipole_kernel(&g, *o)).collect();
        let w = weight_mask(&d_ref[0], 0.15).unwrap();
        // keep every |D̂| and every averaged magnitude at least 1e-3 away from a kink
        let mut vals = vec![vec![0.0; n]; m];
        for k in 0..n {
            loop {
                for v in vals.iter_mut() {
                    let mag: f64 = r.gen_range(1e-3..0.2);
                    v[k] = if r.gen_bool(0.5) { mag } else { -mag };
                }
                let mean = vals.iter().map(|v| v[k].abs()).sum::<f64>() / m as f64;
                if (mean - eps).abs() > 1e-3 {
                    break;
                }
            }
        }
        let kernels = |vals: &[Vec<f64>]| -> Vec<DipoleKernel> {
            vals.iter()
                .zip(&orients)
                .map(|(v, o)| DipoleKernel::from_values(g, *o, v.clone()).unwrap())
                .collect()
        };
        let inr = loss_inr(&kernels(&vals), &d_ref, &w).unwrap();
        let fill = loss_fill(&kernels(&vals), &w, eps).unwrap();
        let (fl_inr, fl_fill) = (fd_floor(inr.value, H, 1e-4), fd_floor(fill.value, H, 1e-4));
        for i in 0..m {
            for k in 0..n {
                let mut flat = vals[i].clone();
                let f_inr = |x: &[f64]| {
                    let mut v = vals.clone();
                    v[i] = x.to_vec();
                    loss_inr(&kernels(&v), &d_ref, &w).unwrap().value
                };
                let num = central_difference(f_inr, &mut flat, k, H);
                worst = worst.max(rel_err(inr.grad[i][k], num, fl_inr));
                let f_fill = |x: &[f64]| {
                    let mut v = vals.clone();
                    v[i] = x.to_vec();
                    loss_fill(&kernels(&v), &w, eps).unwrap().value
                };
                let num = central_difference(f_fill, &mut flat, k, H);
                let e = rel_err(fill.grad[i][k], num, fl_fill);
                worst = worst.max(e);
            }
        }
    }
    worst
}

pub fn data_consistency_gradients(trials: usize) -> f64 {
    let g = GridSpec::cube(8).unwrap();
    let n = g.len();
    let mut r = rng(102);
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let m = 1 + trial % 2;
        let orients: Vec<_> = (0..m).map(|_| orientation(&mut r)).collect();
        let d_ref = dipole_kernel(&g, orients[0]);
        let w = weight_mask(&d_ref, 0.15).unwrap();
        let d_hat: Vec<_> = orients
            .iter()
            .map(|o| DipoleKernel::from_values(g, *o, uniform_vec(&mut r, n, -0.5, 0.3)).unwrap())
            .collect();
        let chi = uniform_vec(&mut r, n, -0.1, 0.1);
        let fields: Vec<Volume3D> = (0..m)
            .map(|_| Volume3D::new(g, uniform_vec(&mut r, n, -0.05, 0.05)).unwrap())
            .collect();
        let fields = &fields[..if trial % 4 < 2 { 1 } else { m }];
        let base = loss_dc(fields, &Volume3D::new(g, chi.clone()).unwrap(), &d_hat, &w).unwrap();
        let floor = fd_floor(base.value, H, 1e-4);

        let mut x = chi.clone();
        let picks: Vec<usize> = (0..n).collect::<Vec<_>>().choose_multiple(&mut r, 48).copied().collect();
        for &k in &picks {
            let num = central_difference(
                |c| loss_dc(fields, &Volume3D::new(g, c.to_vec()).unwrap(), &d_hat, &w).unwrap().value,
                &mut x,
                k,
                H,
            );
            let e = rel_err(base.grad_chi.data()[k], num, floor);
            worst = worst.max(e);
        }
        let chi_v = Volume3D::new(g, chi).unwrap();
        for i in 0..m {
            let mut vals = d_hat[i].values().to_vec();
            for &k in &picks {
                let num = central_difference(
                    |v| {
                        let mut ks = d_hat.clone();
                        ks[i] = DipoleKernel::from_values(g, orients[i], v.to_vec()).unwrap();
                        loss_dc(fields, &chi_v, &ks, &w).unwrap().value
                    },
                    &mut vals,
                    k,
                    H,
                );
                let e = rel_err(base.grad_d[i][k], num, floor);
                worst = worst.max(e);
            }
        }
    }
    worst
}

/// Probes within one step of a kink are skipped; the count of smooth probes
/// is returned alongside the error.
pub fn supervised_loss_gradient(trials: usize) -> (f64, usize) {
    let g = GridSpec::cube(8).unwrap();
    let n = g.len();
    let mut r = rng(103);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for _ in 0..trials {
        let o = orientation(&mut r);
        let d = dipole_kernel(&g, o);
        let hp = HyperParams {
            w_model: r.gen_range(0.1..1.0),
            w_voxel: r.gen_range(0.1..1.0),
            w_grad: r.gen_range(0.1..1.0),
            ..HyperParams::default()
        };
        let label = Volume3D::new(g, uniform_vec(&mut r, n, -0.1, 0.1)).unwrap();
        let chi = uniform_vec(&mut r, n, -0.1, 0.1);
        let base = loss_qsmnet(&Volume3D::new(g, chi.clone()).unwrap(), &label, &d, &hp).unwrap();
        // all kinked quantities of the loss, used to skip probes that cross a kink
        let kinks = |c: &[f64]| -> Vec<f64> {
            let v = Volume3D::new(g, c.to_vec()).unwrap();
            let e = v.axpby(1.0, &label, -1.0).unwrap();
            let mut out = forward_field(&e, &d).unwrap().into_data();
            out.extend_from_slice(e.data());
            let dims = g.dims();
            for idx in 0..n {
                let (i, j, k) = g.coords(idx);
                if i + 1 < dims[0] {
                    out.push(e.data()[idx + 1] - e.data()[idx]);
                }
                if j + 1 < dims[1] {
                    out.push(e.data()[idx + dims[0]] - e.data()[idx]);
                }
                if k + 1 < dims[2] {
                    out.push(e.data()[idx + dims[0] * dims[1]] - e.data()[idx]);
                }
            }
            out
        };
        let centre = kinks(&chi);
        let mut x = chi.clone();
        for k in 0..n {
            let smooth = [H, -H].iter().all(|&s| {
                x[k] += s;
                let moved = kinks(&x);
                x[k] -= s;
                moved
                    .iter()
                    .zip(&centre)
                    .all(|(a, b)| a.signum() == b.signum() && *a != 0.0 && b.abs() > 1e-9)
            });
            if !smooth {
                continue;
            }
            let num = central_difference(
                |c| loss_qsmnet(&Volume3D::new(g, c.to_vec()).unwrap(), &label, &d, &hp).unwrap().value,
                &mut x,
                k,
                H,
            );
            worst = worst.max(rel_err(base.grad_chi.data()[k], num, fd_floor(base.value, H, 1e-4)));
            checked += 1;
        }
    }
    (worst, checked)
}

/// Also checks the forward pass against the naive convolution and panics on
/// disagreement.
pub fn reconstructor_gradients(trials: usize) -> f64 {
    let g = GridSpec::cube(8).unwrap();
    let n = g.len();
    let mut r = rng(104);
    let mut worst: f64 = 0.0;
    let cfg = ReconConfig::default();
    for trial in 0..trials as u64 {
        let mut net = ConvReconstructor::new(cfg.clone(), trial).unwrap();
        // the default last layer starts at zero; randomise it so every path is exercised
        let mut p = net.params().to_vec();
        let np = p.len();
        for v in &mut p[np - 217..] {
            *v = r.gen_range(-0.2..0.2);
        }
        net.set_params(&p).unwrap();
        let input = Volume3D::new(g, uniform_vec(&mut r, n, -0.1, 0.1)).unwrap();
        let upstream = Volume3D::new(g, uniform_vec(&mut r, n, -1.0, 1.0)).unwrap();

        let out = net.forward(&input);
        let (naive, pre) = naive_conv_trace(&cfg.channels, cfg.kernel, cfg.leaky_slope, &p, g.dims(), input.data());
        for (a, b) in out.data().iter().zip(&naive) {
            assert!((a - b).abs() < 1e-12);
        }
        net.zero_grad();
        net.backward(&upstream).unwrap();
        let analytic = net.grads().to_vec();

        let objective = |q: &[f64]| -> f64 {
            naive_conv_net(&cfg.channels, cfg.kernel, cfg.leaky_slope, q, g.dims(), input.data())
                .iter()
                .zip(upstream.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let base_value = objective(&p);
        let picks: Vec<usize> = (0..np).collect::<Vec<_>>().choose_multiple(&mut r, 6).copied().collect();
        for &i in &picks {
            let smooth = [H, -H].iter().all(|&s| {
                p[i] += s;
                let (_, moved) = naive_conv_trace(&cfg.channels, cfg.kernel, cfg.leaky_slope, &p, g.dims(), input.data());
                p[i] -= s;
                moved.iter().zip(&pre).all(|(a, b)| (*a > 0.0) == (*b > 0.0))
            });
            if !smooth {
                continue;
            }
            let num = central_difference(objective, &mut p, i, H);
            worst = worst.max(rel_err(analytic[i], num, fd_floor(base_value, H, 1e-4)));
        }
    }
    worst
}
