use qsm_core::dipole::{dipole_kernel, forward_field, DipoleKernel, Orientation};
use qsm_core::fft::fft_forward;
use qsm_core::grid::{GridSpec, Volume3D};
use qsm_core::loss::*;
use qsm_testkit::*;
use rand::Rng;

const TOL: f64 = 1e-12;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TOL * a.abs().max(b.abs()).max(1e-300)
}

fn random_orientation(r: &mut rand_chacha::ChaCha8Rng) -> Orientation {
    Orientation::from_direction([r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(0.2..1.0)]).unwrap()
}

#[test]
fn losses_match_naive_loops_on_8_cubed() {
    let g = GridSpec::new([8, 8, 8], [1.0, 1.2, 0.9]).unwrap();
    let n = g.len();
    let mut r = rng(11);
    for trial in 0..6 {
        let m = 1 + trial % 3;
        let orients: Vec<_> = (0..m).map(|_| random_orientation(&mut r)).collect();
        let d_ref: Vec<DipoleKernel> = orients.iter().map(|o| dipole_kernel(&g, *o)).collect();
        let d_hat: Vec<DipoleKernel> = orients
            .iter()
            .map(|o| DipoleKernel::from_values(g, *o, uniform_vec(&mut r, n, -0.7, 0.4)).unwrap())
            .collect();
        let tau = r.gen_range(0.05..0.3);
        let eps = r.gen_range(0.05..0.2);
        let w = weight_mask(&d_ref[0], tau).unwrap();
        let w_naive = naive_weight(d_ref[0].values(), tau);
        for (a, b) in w.values().iter().zip(&w_naive) {
            assert!(close(*a, *b));
        }
        let hat: Vec<Vec<f64>> = d_hat.iter().map(|k| k.values().to_vec()).collect();
        let refs: Vec<Vec<f64>> = d_ref.iter().map(|k| k.values().to_vec()).collect();

        let inr = loss_inr(&d_hat, &d_ref, &w).unwrap().value;
        assert!(close(inr, naive_loss_inr(&hat, &refs, &w_naive)));
        let fill = loss_fill(&d_hat, &w, eps).unwrap().value;
        assert!(close(fill, naive_loss_fill(&hat, &w_naive, eps)));

        let chi = Volume3D::new(g, uniform_vec(&mut r, n, -0.1, 0.1)).unwrap();
        let fields: Vec<Volume3D> = (0..m).map(|_| Volume3D::new(g, uniform_vec(&mut r, n, -0.05, 0.05)).unwrap()).collect();
        let raw: Vec<Vec<f64>> = fields.iter().map(|f| f.data().to_vec()).collect();
        let dc1 = loss_dc(&fields[..1], &chi, &d_hat, &w).unwrap().value;
        let naive1 = naive_loss_dc(g.dims(), &raw[..1], chi.data(), &hat, &w_naive);
        assert!((dc1 - naive1).abs() <= 1e-12 * naive1, "{dc1} vs {naive1}");
        let dcm = loss_dc(&fields, &chi, &d_hat, &w).unwrap().value;
        let naive_m = naive_loss_dc(g.dims(), &raw, chi.data(), &hat, &w_naive);
        assert!((dcm - naive_m).abs() <= 1e-12 * naive_m);

        let both = dipole_loss(&fields, &chi, &d_hat, &d_ref, &w, eps).unwrap();
        let expected = naive_loss_inr(&hat, &refs, &w_naive) + naive_loss_fill(&hat, &w_naive, eps) + naive_m;
        assert!((both.terms.total() - expected).abs() <= 1e-12 * expected);

        let label = Volume3D::new(g, uniform_vec(&mut r, n, -0.1, 0.1)).unwrap();
        let hp = HyperParams {
            w_model: r.gen_range(0.1..1.0),
            w_voxel: r.gen_range(0.1..1.0),
            w_grad: r.gen_range(0.1..1.0),
            ..HyperParams::default()
        };
        let q = loss_qsmnet(&chi, &label, &d_ref[0], &hp).unwrap();
        let (nm, nv, ng) = naive_qsmnet_terms(g.dims(), g.voxel_size(), orients[0].vector(), chi.data(), label.data());
        assert!((q.model - nm).abs() <= 1e-12 * nm, "{} vs {nm}", q.model);
        assert!(close(q.voxel, nv));
        assert!(close(q.gradient, ng));
        let total = hp.w_model * nm + hp.w_voxel * nv + hp.w_grad * ng;
        assert!((q.value - total).abs() <= 1e-12 * total);
        let combined = loss_total(q.value, both.terms.total(), 0.3);
        let naive_total = total + 0.3 * expected;
        assert!((combined - naive_total).abs() <= 1e-12 * naive_total);
    }
}

#[test]
fn dipole_gradient_is_sum_of_component_gradients() {
    let g = GridSpec::cube(8).unwrap();
    let mut r = rng(5);
    let o = random_orientation(&mut r);
    let d_ref = vec![dipole_kernel(&g, o)];
    let d_hat = vec![DipoleKernel::from_values(g, o, uniform_vec(&mut r, g.len(), -0.3, 0.3)).unwrap()];
    let w = weight_mask(&d_ref[0], 0.15).unwrap();
    let chi = Volume3D::new(g, uniform_vec(&mut r, g.len(), -0.1, 0.1)).unwrap();
    let field = vec![forward_field(&chi, &d_ref[0]).unwrap()];
    let all = dipole_loss(&field, &chi, &d_hat, &d_ref, &w, 0.1).unwrap();
    let a = loss_inr(&d_hat, &d_ref, &w).unwrap();
    let b = loss_fill(&d_hat, &w, 0.1).unwrap();
    let c = loss_dc(&field, &chi, &d_hat, &w).unwrap();
    for k in 0..g.len() {
        assert_eq!(all.grad_d[0][k], a.grad[0][k] + b.grad[0][k] + c.grad_d[0][k]);
    }
    assert_eq!(all.grad_chi, c.grad_chi);
    assert_eq!(all.terms, DipoleTerms { inr: a.value, fill: b.value, dc: c.value });
}

#[test]
fn consistent_triple_has_no_data_mismatch() {
    let g = GridSpec::cube(16).unwrap();
    let mut r = rng(2);
    let o = random_orientation(&mut r);
    let d = dipole_kernel(&g, o);
    let chi = Volume3D::new(g, uniform_vec(&mut r, g.len(), -0.1, 0.1)).unwrap();
    let field = forward_field(&chi, &d).unwrap();
    let w = weight_mask(&d, 0.15).unwrap();
    let dc = loss_dc(&[field], &chi, &[d], &w).unwrap();
    assert!(dc.value < 1e-18, "{}", dc.value);
}

#[test]
fn zero_estimate_costs_weighted_field_energy() {
    let g = GridSpec::cube(8).unwrap();
    let mut r = rng(3);
    let kernels: Vec<_> = [Orientation::z(), Orientation::x()].iter().map(|o| dipole_kernel(&g, *o)).collect();
    let field = Volume3D::new(g, uniform_vec(&mut r, g.len(), -0.05, 0.05)).unwrap();
    let w = weight_mask(&kernels[0], 0.15).unwrap();
    let dc = loss_dc(&[field.clone()], &Volume3D::zeros(g), &kernels, &w).unwrap();
    let spec = fft_forward(&field);
    let closed: f64 = 2.0
        * spec
            .data()
            .iter()
            .zip(w.values())
            .map(|(s, wk)| wk * wk * s.norm_sqr())
            .sum::<f64>();
    assert!((dc.value - closed).abs() <= 1e-13 * closed);
}

#[test]
fn constant_offset_only_costs_voxel_term() {
    let g = GridSpec::cube(8).unwrap();
    let mut r = rng(4);
    let label = Volume3D::new(g, uniform_vec(&mut r, g.len(), -0.1, 0.1)).unwrap();
    let c = 0.03;
    let shifted = label.map(|v| v + c).unwrap();
    let d = dipole_kernel(&g, Orientation::z());
    let hp = HyperParams::default();
    let q = loss_qsmnet(&shifted, &label, &d, &hp).unwrap();
    assert!(q.model < 1e-14);
    assert!(q.gradient < 1e-12);
    assert!((q.voxel - c * g.len() as f64).abs() < 1e-10);
    let same = loss_qsmnet(&label, &label, &d, &hp).unwrap();
    assert_eq!(same.value, 0.0);
    assert!(same.grad_chi.data().iter().all(|&v| v == 0.0));
}

#[test]
fn losses_vanish_exactly_on_matching_inputs() {
    let g = GridSpec::cube(8).unwrap();
    let d = vec![dipole_kernel(&g, Orientation::from_direction([0.2, 0.1, 1.0]).unwrap())];
    let w = weight_mask(&d[0], 0.15).unwrap();
    let inr = loss_inr(&d, &d, &w).unwrap();
    assert_eq!(inr.value, 0.0);
    assert!(inr.grad[0].iter().all(|&x| x == 0.0));
}

/// Share of a fixed residual's loss coming from bins with `D_ref = 0`
/// grows as `tau` shrinks.
#[test]
fn weighting_concentrates_on_cone_as_tau_shrinks() {
    let g = GridSpec::cube(16).unwrap();
    let d = dipole_kernel(&g, Orientation::from_direction([0.3, 0.0, 1.0]).unwrap());
    let mut r = rng(9);
    let resid = uniform_vec(&mut r, g.len(), -1.0, 1.0);
    let zero = DipoleKernel::from_values(g, d.orientation(), vec![0.0; g.len()]).unwrap();
    let hat = DipoleKernel::from_values(g, d.orientation(), resid).unwrap();
    let mut last_share = 0.0;
    for tau in [0.3, 0.15, 0.05] {
        let w = weight_mask(&d, tau).unwrap();
        let l = loss_inr(&[hat.clone()], &[zero.clone()], &w).unwrap();
        let cone: f64 = (0..g.len())
            .filter(|&k| d.values()[k] == 0.0)
            .map(|k| (w.values()[k] * hat.values()[k]).powi(2))
            .sum();
        let share = cone / l.value;
        assert!(share >= last_share, "tau {tau}: {share} < {last_share}");
        last_share = share;
    }
    assert!(last_share > 0.0);
}
