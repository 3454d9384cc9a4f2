//! The acceptance run: every criterion at its stated tolerance, one line of
//! output each. Pass criterion numbers as arguments to run a subset.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use common::Check;
use qsm_cli::commands::{cmd_sweep_orientations, cmd_train, spreads};
use qsm_cli::config::ExperimentConfig;
use qsm_core::classical::{cosmos_invert, tkd_invert, OrientationSet, TkdConfig};
use qsm_core::dipole::{cone_mask, dipole_kernel, forward_field, DipoleKernel, Orientation};
use qsm_core::fft::fft_forward;
use qsm_core::grid::{signed_bin, GridSpec, Mask3D, Volume3D};
use qsm_core::io::Checkpoint;
use qsm_core::loss::*;
use qsm_core::metrics::{evaluate, hfen, nrmse, ssim};
use qsm_core::phantom::{build_phantom, orientation_sweep, synth_orientation_set, NoiseSpec, PhantomSpec, Shape};
use qsm_core::trainer::{alternate_train, TrainConfig, TrainSample};
use qsm_testkit::gradients::*;
use qsm_testkit::*;
use rand::Rng;

// Frozen from the first verified run (seed 0, 32³ sphere+cylinder, ẑ, 2000 steps).
const MECH_NRMSE: f64 = 1.4734630133353518e-1;
const MECH_TKD_NRMSE: f64 = 2.4974957159871514e-1;
const MECH_CONE_MEAN: f64 = 1.2054328244223544e-1;
const MECH_FINAL_TOTAL: f64 = 5.8484178261203802e1;
// SSIM max - min of that model over the 18-direction sweep.
const SWEEP_SSIM_SPREAD: f64 = 4.9330541322051391e-2;
// Best row of the six-combination weight sweep.
const TABLE_BEST: [f64; 3] = [0.4, 0.1, 0.3];
const TABLE_BEST_SSIM: f64 = 9.477702784549181e-1;

const GOLDEN_RTOL: f64 = 1e-9;

struct Ctx {
    dir: PathBuf,
    trained: Option<PathBuf>,
}

fn golden(name: &str, got: f64, want: f64) -> Result<(), String> {
    if (got - want).abs() <= GOLDEN_RTOL * want.abs() {
        Ok(())
    } else {
        Err(format!("{name} = {got:.16e}, golden {want:.16e}"))
    }
}

fn kernel_identities(_: &mut Ctx) -> Check {
    let g = GridSpec::cube(32).unwrap();
    let dims = g.dims();
    let mut worst: f64 = 0.0;
    for b in [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.3, -0.5, 0.8], [-0.7, 0.2, 0.4]] {
        let o = Orientation::from_direction(b).unwrap();
        let fast = dipole_kernel(&g, o);
        let direct = naive_kernel(dims, g.voxel_size(), o.vector());
        for (a, d) in fast.values().iter().zip(&direct) {
            worst = worst.max((a - d).abs());
        }
    }
    if worst > 1e-12 {
        return Err(format!("max deviation from direct evaluation {worst:e}"));
    }
    let d = dipole_kernel(&g, Orientation::z());
    let (mut axis, mut plane, mut cone) = (0, 0, 0);
    for idx in 0..g.len() {
        let (i, j, k) = g.coords(idx);
        let [a, b, c] = [signed_bin(i, dims[0]), signed_bin(j, dims[1]), signed_bin(k, dims[2])];
        let v = d.values()[idx];
        let expect = if idx == 0 {
            Some(0.0)
        } else if a == 0 && b == 0 {
            axis += 1;
            Some(-2.0 / 3.0)
        } else if c == 0 {
            plane += 1;
            Some(1.0 / 3.0)
        } else if 2 * c * c == a * a + b * b {
            cone += 1;
            Some(0.0)
        } else {
            None
        };
        if let Some(e) = expect {
            if (v - e).abs() > 1e-12 {
                return Err(format!("bin ({a},{b},{c}) is {v}, expected {e}"));
            }
        }
    }
    Ok(format!(
        "4 directions exhaustive, max dev {worst:.1e}; {axis} on-axis, {plane} in-plane, {cone} cone bins exact"
    ))
}

/// The FFT model is periodic, so the analytic exterior field is summed over
/// the sphere and its 26 nearest periodic copies.
fn sphere_field(_: &mut Ctx) -> Check {
    let (n, r, dchi) = (64usize, 8.0, 0.1);
    let spec = PhantomSpec::centered_sphere(n, r, dchi).unwrap();
    let (chi, _) = build_phantom(&spec).unwrap();
    let field = forward_field(&chi, &dipole_kernel(chi.grid(), Orientation::z())).unwrap();
    let (c, l) = (n as f64 / 2.0, n as f64);
    let exterior = |p: [f64; 3]| {
        let d2 = p[0] * p[0] + p[1] * p[1] + p[2] * p[2];
        dchi / 3.0 * r.powi(3) / d2.powf(1.5) * (3.0 * p[2] * p[2] / d2 - 1.0)
    };
    let (mut err, mut norm, mut count) = (0.0, 0.0, 0);
    for idx in 0..chi.grid().len() {
        let (i, j, k) = chi.grid().coords(idx);
        let p = [i as f64 + 0.5 - c, j as f64 + 0.5 - c, k as f64 + 0.5 - c];
        if (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() <= 1.5 * r {
            continue;
        }
        let mut analytic = 0.0;
        for a in -1..=1 {
            for b in -1..=1 {
                for e in -1..=1 {
                    analytic += exterior([p[0] + a as f64 * l, p[1] + b as f64 * l, p[2] + e as f64 * l]);
                }
            }
        }
        err += (field.data()[idx] - analytic).powi(2);
        norm += analytic * analytic;
        count += 1;
    }
    let rel = (err / norm).sqrt();
    if rel < 0.05 {
        Ok(format!("relative L2 {rel:.4} over {count} voxels"))
    } else {
        Err(format!("relative L2 {rel:.4} exceeds 0.05"))
    }
}

fn tkd_exact_inverse(_: &mut Ctx) -> Check {
    let g = GridSpec::cube(16).unwrap();
    let mut r = rng(30);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let shapes = (0..4)
            .map(|_| {
                let radius = r.gen_range(1.5..4.0);
                let mut at = || r.gen_range(radius..16.0 - radius);
                Shape::Sphere {
                    center: [at(), at(), at()],
                    radius,
                    chi: r.gen_range(-0.2..0.2),
                }
            })
            .collect();
        let (chi, _) = build_phantom(&PhantomSpec {
            grid: g,
            shapes,
            background: 0.0,
        })
        .unwrap();
        let o = Orientation::from_direction([r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(0.3..1.0)]).unwrap();
        let d = dipole_kernel(&g, o);
        let field = forward_field(&chi, &d).unwrap();
        let truth = fft_forward(&chi);
        let scale = truth.data().iter().map(|c| c.norm()).fold(0.0, f64::max);
        for t in [0.1, 0.2, 0.3] {
            let est = fft_forward(&tkd_invert(&field, &d, &TkdConfig::new(t).unwrap()).unwrap());
            for k in 0..g.len() {
                if d.values()[k].abs() >= t {
                    worst = worst.max((est.data()[k] - truth.data()[k]).norm() / scale);
                }
            }
        }
    }
    if worst <= 1e-9 {
        Ok(format!("20 phantoms x 3 thresholds, max relative bin error {worst:.1e}"))
    } else {
        Err(format!("max relative bin error {worst:e}"))
    }
}

fn cosmos_recovery(_: &mut Ctx) -> Check {
    let (chi, _) = build_phantom(&PhantomSpec::sphere_cylinder(32).unwrap()).unwrap();
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let orients = [[0.0, 0.0, 1.0], [s, 0.0, s], [0.0, s, s]].map(|b| Orientation::from_direction(b).unwrap());
    let set = synth_orientation_set(&chi, &orients, &NoiseSpec::none()).unwrap();
    let est = cosmos_invert(&OrientationSet::new(set.entries().to_vec()).unwrap(), 0.0).unwrap();
    // No orientation sees the k = 0 bin, so the mean is not recoverable.
    let mean = chi.mean();
    let target = chi.map(|v| v - mean).unwrap();
    let e = nrmse(&est, &target, None).unwrap();
    if e < 1e-6 {
        Ok(format!("nrmse {e:.1e} against the zero-mean phantom"))
    } else {
        Err(format!("nrmse {e:e}"))
    }
}

fn gradient_suite(_: &mut Ctx) -> Check {
    let siren = siren_parameter_gradients(100);
    let kernel = inr_and_fill_gradients(100);
    let dc = data_consistency_gradients(100);
    let (q, probes) = supervised_loss_gradient(100);
    let recon = reconstructor_gradients(100);
    let summary = format!("siren {siren:.1e}, inr+fill {kernel:.1e}, dc {dc:.1e}, qsmnet {q:.1e} ({probes} probes), recon {recon:.1e}");
    if siren < 1e-5 && kernel.max(dc).max(q).max(recon) < 1e-4 {
        Ok(summary)
    } else {
        Err(summary)
    }
}

fn loss_fidelity(_: &mut Ctx) -> Check {
    let g = GridSpec::new([8, 8, 8], [1.0, 1.2, 0.9]).unwrap();
    let n = g.len();
    let mut r = rng(60);
    let mut worst: f64 = 0.0;
    let mut check = |a: f64, b: f64| worst = worst.max((a - b).abs() / a.abs().max(b.abs()).max(1e-300));
    for trial in 0..6 {
        let m = 1 + trial % 3;
        let orients: Vec<_> = (0..m)
            .map(|_| Orientation::from_direction([r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(0.2..1.0)]).unwrap())
            .collect();
        let d_ref: Vec<_> = orients.iter().map(|o| dipole_kernel(&g, *o)).collect();
        let d_hat: Vec<_> = orients
            .iter()
            .map(|o| DipoleKernel::from_values(g, *o, uniform_vec(&mut r, n, -0.7, 0.4)).unwrap())
            .collect();
        let (tau, eps) = (r.gen_range(0.05..0.3), r.gen_range(0.05..0.2));
        let w = weight_mask(&d_ref[0], tau).unwrap();
        let w_naive = naive_weight(d_ref[0].values(), tau);
        for (a, b) in w.values().iter().zip(&w_naive) {
            check(*a, *b);
        }
        let hat: Vec<Vec<f64>> = d_hat.iter().map(|k| k.values().to_vec()).collect();
        let refs: Vec<Vec<f64>> = d_ref.iter().map(|k| k.values().to_vec()).collect();
        let inr = naive_loss_inr(&hat, &refs, &w_naive);
        let fill = naive_loss_fill(&hat, &w_naive, eps);
        check(loss_inr(&d_hat, &d_ref, &w).unwrap().value, inr);
        check(loss_fill(&d_hat, &w, eps).unwrap().value, fill);
        let chi = Volume3D::new(g, uniform_vec(&mut r, n, -0.1, 0.1)).unwrap();
        let fields: Vec<Volume3D> = (0..m).map(|_| Volume3D::new(g, uniform_vec(&mut r, n, -0.05, 0.05)).unwrap()).collect();
        let raw: Vec<Vec<f64>> = fields.iter().map(|f| f.data().to_vec()).collect();
        let dc = naive_loss_dc(g.dims(), &raw, chi.data(), &hat, &w_naive);
        check(loss_dc(&fields, &chi, &d_hat, &w).unwrap().value, dc);
        check(
            loss_dc(&fields[..1], &chi, &d_hat, &w).unwrap().value,
            naive_loss_dc(g.dims(), &raw[..1], chi.data(), &hat, &w_naive),
        );
        let dip = dipole_loss(&fields, &chi, &d_hat, &d_ref, &w, eps).unwrap().terms.total();
        check(dip, inr + fill + dc);
        let label = Volume3D::new(g, uniform_vec(&mut r, n, -0.1, 0.1)).unwrap();
        let hp = HyperParams {
            w_model: r.gen_range(0.1..1.0),
            w_voxel: r.gen_range(0.1..1.0),
            w_grad: r.gen_range(0.1..1.0),
            ..HyperParams::default()
        };
        let q = loss_qsmnet(&chi, &label, &d_ref[0], &hp).unwrap();
        let (nm, nv, ng) = naive_qsmnet_terms(g.dims(), g.voxel_size(), orients[0].vector(), chi.data(), label.data());
        let q_naive = hp.w_model * nm + hp.w_voxel * nv + hp.w_grad * ng;
        check(q.value, q_naive);
        check(loss_total(q.value, dip, 0.3), q_naive + 0.3 * (inr + fill + dc));
    }
    if worst > 1e-12 {
        return Err(format!("max relative deviation from naive loops {worst:e}"));
    }
    let tau = 0.15;
    let g = GridSpec::cube(4).unwrap();
    let mut vals = vec![0.25; g.len()];
    vals[0] = 0.0;
    vals[1] = tau;
    vals[2] = -tau;
    let w = weight_mask(&DipoleKernel::from_values(g, Orientation::z(), vals).unwrap(), tau).unwrap();
    let e1 = (-1.0f64).exp();
    if w.values()[0] != 1.0 || w.values()[1] != e1 || w.values()[2] != e1 {
        return Err(format!("weights at 0, tau, -tau are {:?}", &w.values()[..3]));
    }
    Ok(format!("7 formulas within {worst:.1e} of naive loops; W = 1 at D = 0 and exp(-1) at |D| = tau"))
}

fn windowed_descent(trace: &[f64], window: usize, part: usize) -> Vec<usize> {
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    (0..=trace.len().saturating_sub(window))
        .filter(|&s| mean(&trace[s + window - part..s + window]) > mean(&trace[s..s + part]))
        .collect()
}

fn mechanism(ctx: &mut Ctx) -> Check {
    let cfg = ExperimentConfig::default();
    let (chi, mask) = build_phantom(&cfg.phantom).unwrap();
    let o = Orientation::z();
    let field = forward_field(&chi, &dipole_kernel(chi.grid(), o)).unwrap();
    let data = vec![TrainSample {
        field: field.clone(),
        chi_label: chi.clone(),
        orientation: o,
    }];
    let hp = HyperParams::default();
    let state = alternate_train(data, hp, TrainConfig::default(), 2000, 0).map_err(|e| e.to_string())?;
    let path = ctx.dir.join("mechanism.ckpt");
    Checkpoint::from_state(&state).save(&path).map_err(|e| e.to_string())?;
    ctx.trained = Some(path);

    let learned = nrmse(&state.reconstruct(&field, o).unwrap(), &chi, Some(&mask)).unwrap();
    let tkd = tkd_invert(&field, &dipole_kernel(chi.grid(), o), &TkdConfig::new(0.2).unwrap()).unwrap();
    let baseline = nrmse(&tkd, &chi, Some(&mask)).unwrap();
    let cone = cone_mask(&dipole_kernel(chi.grid(), o), 0.2).unwrap();
    let d_hat = state.predicted_kernel(o);
    let inside: Vec<f64> = d_hat.values().iter().zip(cone.flags()).filter(|(_, &c)| c).map(|(v, _)| v.abs()).collect();
    let cone_mean = inside.iter().sum::<f64>() / inside.len() as f64;
    let totals: Vec<f64> = state.history().iter().map(|r| r.total).collect();
    let violations = windowed_descent(&totals, 200, 50);
    let last = *totals.last().unwrap();

    let mut problems = Vec::new();
    if learned >= baseline {
        problems.push(format!("(a) nrmse {learned:.4} not below tkd {baseline:.4}"));
    }
    if cone_mean < hp.eps / 2.0 {
        problems.push(format!("(b) cone mean |D-hat| {cone_mean:.4} < {}", hp.eps / 2.0));
    }
    if !violations.is_empty() {
        problems.push(format!(
            "(c) {} of {} windows rise, first at step {}",
            violations.len(),
            totals.len() - 199,
            violations[0]
        ));
    }
    for (name, got, want) in [
        ("nrmse", learned, MECH_NRMSE),
        ("tkd nrmse", baseline, MECH_TKD_NRMSE),
        ("cone mean", cone_mean, MECH_CONE_MEAN),
        ("final total", last, MECH_FINAL_TOTAL),
    ] {
        if let Err(e) = golden(name, got, want) {
            problems.push(e);
        }
    }
    let summary = format!(
        "nrmse {learned:.4} vs tkd {baseline:.4}, cone mean {cone_mean:.4}, L_total {:.1} -> {last:.1}",
        totals[0]
    );
    if problems.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{summary}; {}", problems.join("; ")))
    }
}

fn alternation(_: &mut Ctx) -> Check {
    let (chi, _) = build_phantom(&PhantomSpec::sphere_cylinder(16).unwrap()).unwrap();
    let o = Orientation::z();
    let data = vec![TrainSample {
        field: forward_field(&chi, &dipole_kernel(chi.grid(), o)).unwrap(),
        chi_label: chi,
        orientation: o,
    }];
    let mut state = qsm_core::trainer::TrainState::new(data, HyperParams::default(), TrainConfig::default(), 0).unwrap();
    let mut prev = (state.recon_hash(), state.siren_hash());
    let mut counts = [0; 2];
    for _ in 0..10 {
        let rec = state.step().map_err(|e| e.to_string())?;
        let (moved, kept, slot) = match rec.phase {
            qsm_core::trainer::Phase::Reconstructor => (rec.recon_hash != prev.0, rec.siren_hash == prev.1, 0),
            qsm_core::trainer::Phase::Inr => (rec.siren_hash != prev.1, rec.recon_hash == prev.0, 1),
        };
        if !(moved && kept) {
            return Err(format!("step {} ({:?}) broke phase isolation", rec.step, rec.phase));
        }
        counts[slot] += 1;
        prev = (rec.recon_hash, rec.siren_hash);
    }
    if counts != [5, 5] {
        return Err(format!("{} reconstructor and {} INR updates", counts[0], counts[1]));
    }
    Ok("5 reconstructor + 5 INR updates, each leaving the other network bit-unchanged".into())
}

fn orientation_robustness(ctx: &mut Ctx) -> Check {
    let ckpt = ctx.trained.clone().ok_or("no trained model (criterion 7 did not run)")?;
    let cfg = ExperimentConfig::default();
    let run = |out: &Path| cmd_sweep_orientations(&cfg, &ckpt, out, true).map_err(|e| e.message);
    let (rows, _) = run(&ctx.dir.join("sweep-a"))?;
    run(&ctx.dir.join("sweep-b"))?;
    let read = |d: &str| std::fs::read(ctx.dir.join(d).join("orientations.csv")).unwrap();
    if rows.len() != 18 {
        return Err(format!("{} orientations evaluated", rows.len()));
    }
    if read("sweep-a") != read("sweep-b") {
        return Err("two sweeps of the same model differ".into());
    }
    let expected = orientation_sweep(18, 30.0, 0).unwrap();
    if rows.iter().zip(&expected).any(|(r, o)| r.orientation != o.vector()) {
        return Err("sweep directions differ from the configured spiral".into());
    }
    let spread = spreads(&rows).into_iter().find(|s| s.metric == "ssim").unwrap();
    golden("ssim spread", spread.spread, SWEEP_SSIM_SPREAD)?;
    Ok(format!(
        "18 directions, ssim {:.4}..{:.4} (spread {:.4}), repeat byte-identical",
        spread.min, spread.max, spread.spread
    ))
}

fn table_structure(ctx: &mut Ctx) -> Check {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/table3.json");
    let cfg = ExperimentConfig::load(&path).map_err(|e| e.message)?;
    if cfg.phantom.grid.dims() != [16; 3] || cfg.steps != 200 || cfg.weight_triples().len() != 6 {
        return Err("configs/table3.json is not the 6-combination 16³/200-step sweep".into());
    }
    let out = ctx.dir.join("table3");
    let outcome = cmd_train(&cfg, &out, 1).map_err(|e| e.message)?;
    let table = std::fs::read_to_string(out.join("table.csv")).unwrap();
    if table.lines().count() != 7 {
        return Err(format!("table.csv has {} lines", table.lines().count()));
    }
    for r in &outcome.rows {
        let m = &r.metrics;
        if ![m.hfen, m.nrmse, m.ssim, m.psnr].iter().all(|v| v.is_finite()) {
            return Err(format!("non-finite metrics for {:?}", [r.w_model, r.w_grad, r.w_dipole]));
        }
    }
    let best = &outcome.rows[outcome.best];
    let triple = [best.w_model, best.w_grad, best.w_dipole];
    if triple != TABLE_BEST {
        return Err(format!("best combination {triple:?}, golden {TABLE_BEST:?}"));
    }
    golden("best ssim", best.metrics.ssim, TABLE_BEST_SSIM)?;
    Ok(format!(
        "6 rows; best by ssim {triple:?} at {:.4} (tkd baseline {:.4})",
        best.metrics.ssim, outcome.baseline.ssim
    ))
}

fn metrics_fixtures(_: &mut Ctx) -> Check {
    let (chi, mask) = build_phantom(&PhantomSpec::sphere_cylinder(32).unwrap()).unwrap();
    let same = evaluate(&chi, &chi, Some(&mask)).unwrap();
    if !(same.hfen == 0.0 && same.nrmse == 0.0 && same.ssim == 1.0 && same.psnr == f64::INFINITY) {
        return Err(format!("identical inputs gave {same:?}"));
    }
    let x = Volume3D::new(*chi.grid(), uniform_vec(&mut rng(110), chi.grid().len(), -0.1, 0.2)).unwrap();
    let base = nrmse(&x, &chi, Some(&mask)).unwrap();
    for a in [2.0, 0.5, -4.0, 0.125, 1024.0] {
        let scaled = nrmse(&x.map(|v| a * v).unwrap(), &chi.map(|v| a * v).unwrap(), Some(&mask)).unwrap();
        if scaled != base {
            return Err(format!("nrmse scale law fails for a = {a}: {scaled:e} vs {base:e}"));
        }
    }
    let full = Mask3D::full(*chi.grid());
    let shifted = hfen(&chi.map(|v| v + 0.37).unwrap(), &chi, Some(&full)).unwrap();
    if shifted >= 1e-10 {
        return Err(format!("hfen of a constant offset is {shifted:e}"));
    }
    let flat = ssim(&Volume3D::constant(*chi.grid(), chi.mean()), &chi, Some(&mask)).unwrap();
    if flat >= 1.0 {
        return Err(format!("constant estimate scored ssim {flat}"));
    }
    Ok(format!("identity (0, 0, 1, inf), exact scale law, offset hfen {shifted:.1e}, flat ssim {flat:.3}"))
}

fn cli_integrity(ctx: &mut Ctx) -> Check {
    let dir = ctx.dir.join("cli");
    let mut lines = Vec::new();
    let checks: [fn(&Path) -> Check; 7] = [
        common::pipeline_matches_library,
        common::unknown_key_is_a_config_error,
        common::cosmos_needs_three_orientations,
        common::mask_grid_mismatch_is_a_grid_error,
        common::malformed_volume_is_a_file_error,
        common::missing_checkpoint_is_a_state_error,
        common::smoke_train_resume_and_determinism,
    ];
    for (i, check) in checks.iter().enumerate() {
        let d = dir.join(i.to_string());
        std::fs::create_dir_all(&d).unwrap();
        lines.push(check(&d)?);
    }
    Ok(lines.join("; "))
}

type Criterion = (u32, &'static str, fn(&mut Ctx) -> Check);

fn main() {
    let criteria: [Criterion; 12] = [
        (1, "kernel identities", kernel_identities),
        (2, "sphere external field", sphere_field),
        (3, "tkd exact inverse", tkd_exact_inverse),
        (4, "cosmos recovery", cosmos_recovery),
        (5, "gradient suite", gradient_suite),
        (6, "loss formula fidelity", loss_fidelity),
        (7, "mechanism demonstration", mechanism),
        (8, "alternation contract", alternation),
        (9, "directional robustness sweep", orientation_robustness),
        (10, "loss-weight table", table_structure),
        (11, "metrics correctness", metrics_fixtures),
        (12, "cli integrity", cli_integrity),
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    // Failures are reported on the criterion line instead.
    std::panic::set_hook(Box::new(|_| {}));
    let tmp = tempfile::tempdir().expect("temporary directory");
    let mut ctx = Ctx {
        dir: tmp.path().to_path_buf(),
        trained: None,
    };
    let mut failed = 0;
    for (n, name, run) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| run(&mut ctx))).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail} [{secs:.1} s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {detail} [{secs:.1} s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
