//! Alternating optimisation of the reconstructor and the kernel network.
//!
//! Reconstructor steps minimise the supervised loss with the kernel network
//! frozen; kernel steps minimise `L_total` (or `L_dipole` alone) with the
//! reconstructor frozen, so gradients reach only the network parameters.
//! Each phase owns its Adam state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classical::{tkd_invert, TkdConfig};
use crate::dipole::{dipole_kernel, forward_field, DipoleKernel, Orientation};
use crate::error::{QsmError, Result};
use crate::grid::{signed_bin, GridSpec, Volume3D};
use crate::loss::{dipole_loss, loss_qsmnet, loss_total, weight_mask, HyperParams, WeightMask};
use crate::optim::{Adam, AdamConfig};
use crate::phantom::orientation_sweep;
use crate::recon::{ConvReconstructor, ReconConfig};
use crate::siren::{synthesize_kernel, CoordBatch, SirenConfig, SirenNet};

/// Cap used to place auxiliary orientations when none are configured.
const AUX_CAP_DEG: f64 = 30.0;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub field: Volume3D,
    pub chi_label: Volume3D,
    pub orientation: Orientation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Reconstructor,
    Inr,
}

/// What the kernel-network phase minimises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InrObjective {
    /// `L_QSMnet + lambda * L_dipole`; only the second term depends on the network.
    #[default]
    Total,
    Dipole,
}

/// What the reconstructor phase minimises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconObjective {
    #[default]
    Qsmnet,
    /// Adds `lambda * L_DC` against the frozen predicted kernels.
    Total,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DcMode {
    /// The measured field is compared against every predicted kernel.
    #[default]
    AsWritten,
    /// Each extra orientation gets its own field simulated from the label.
    PerOrientationFields,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconInput {
    /// TKD estimate at `hp.t_tkd`.
    #[default]
    Tkd,
    /// The raw local field.
    Field,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub siren: SirenConfig,
    pub recon: ReconConfig,
    pub recon_lr: f64,
    pub inr_lr: f64,
    /// Consecutive reconstructor steps per cycle.
    pub recon_steps: usize,
    /// Consecutive kernel-network steps per cycle.
    pub inr_steps: usize,
    pub inr_phase_objective: InrObjective,
    pub recon_objective: ReconObjective,
    pub dc_mode: DcMode,
    pub recon_input: ReconInput,
    /// k-space rows per kernel-network gradient; 0 uses the whole grid.
    pub inr_batch: usize,
    /// Bins within this many steps of k = 0 along every axis are always in
    /// the minibatch; the rest of it is sampled from the remaining bins.
    pub inr_anchor_radius: usize,
    /// Orientations beyond the acquisition direction, used when
    /// `hp.orientations > 1`.
    pub extra_orientations: Vec<Orientation>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            siren: SirenConfig::default(),
            recon: ReconConfig::default(),
            recon_lr: 1e-3,
            inr_lr: 1e-4,
            recon_steps: 1,
            inr_steps: 1,
            inr_phase_objective: InrObjective::Total,
            recon_objective: ReconObjective::Qsmnet,
            dc_mode: DcMode::AsWritten,
            recon_input: ReconInput::Tkd,
            inr_batch: 4096,
            inr_anchor_radius: 2,
            extra_orientations: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.siren.validate()?;
        self.recon.validate()?;
        for (name, lr) in [("recon_lr", self.recon_lr), ("inr_lr", self.inr_lr)] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(QsmError::InvalidParameter(format!("{name} must be positive, got {lr}")));
            }
        }
        if self.recon_steps == 0 || self.inr_steps == 0 {
            return Err(QsmError::InvalidParameter(
                "each phase needs at least one step per cycle".into(),
            ));
        }
        let anchors = (2 * self.inr_anchor_radius + 1).pow(3);
        if self.inr_batch != 0 && self.inr_batch <= anchors {
            return Err(QsmError::InvalidParameter(format!(
                "inr_batch must exceed the {anchors} anchor bins, got {}",
                self.inr_batch
            )));
        }
        Ok(())
    }
}

/// Losses at the parameters in force before a step's update, and parameter
/// hashes after it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub phase: Phase,
    pub qsmnet: f64,
    pub inr: f64,
    pub fill: f64,
    pub dc: f64,
    pub dipole: f64,
    pub total: f64,
    pub recon_hash: u64,
    pub siren_hash: u64,
}

pub const LOSS_CSV_HEADER: &str = "step,phase,l_qsmnet,l_inr,l_fill,l_dc,l_dipole,l_total";

pub fn loss_csv(history: &[LossRecord]) -> String {
    let mut out = String::from(LOSS_CSV_HEADER);
    out.push('\n');
    for r in history {
        let phase = match r.phase {
            Phase::Reconstructor => "reconstructor",
            Phase::Inr => "inr",
        };
        out.push_str(&format!(
            "{},{},{:e},{:e},{:e},{:e},{:e},{:e}\n",
            r.step, phase, r.qsmnet, r.inr, r.fill, r.dc, r.dipole, r.total
        ));
    }
    out
}

/// FNV-1a over the bit patterns of `values`.
pub fn param_hash(values: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

#[derive(Debug, Clone)]
struct Prepared {
    sample: TrainSample,
    input: Volume3D,
    kernel: DipoleKernel,
    d_ref: Vec<DipoleKernel>,
    fields: Vec<Volume3D>,
    weight: WeightMask,
    coords: Vec<CoordBatch>,
    d_hat: Option<Vec<DipoleKernel>>,
    chi_hat: Option<Volume3D>,
}

/// Reconstructor input for `field` acquired along `orientation`.
pub fn recon_input(field: &Volume3D, orientation: Orientation, hp: &HyperParams, mode: ReconInput) -> Result<Volume3D> {
    match mode {
        ReconInput::Field => Ok(field.clone()),
        ReconInput::Tkd => tkd_invert(field, &dipole_kernel(field.grid(), orientation), &TkdConfig::new(hp.t_tkd)?),
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    recon: ConvReconstructor,
    siren: SirenNet,
    recon_opt: Adam,
    inr_opt: Adam,
    hp: HyperParams,
    cfg: TrainConfig,
    iteration: u64,
    history: Vec<LossRecord>,
    seed: u64,
    samples: Vec<Prepared>,
}

impl TrainState {
    pub fn new(data: Vec<TrainSample>, hp: HyperParams, cfg: TrainConfig, seed: u64) -> Result<Self> {
        hp.validate()?;
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let recon = ConvReconstructor::new(cfg.recon.clone(), rng.gen())?;
        let siren = SirenNet::new(cfg.siren, rng.gen())?;
        let samples = prepare(data, &hp, &cfg)?;
        Ok(Self {
            recon_opt: Adam::new(AdamConfig::with_lr(cfg.recon_lr), recon.num_params()),
            inr_opt: Adam::new(AdamConfig::with_lr(cfg.inr_lr), siren.num_params()),
            recon,
            siren,
            hp,
            cfg,
            iteration: 0,
            history: Vec::new(),
            seed,
            samples,
        })
    }

    /// Rebuilds a state from saved networks and optimiser moments.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        data: Vec<TrainSample>,
        hp: HyperParams,
        cfg: TrainConfig,
        recon: ConvReconstructor,
        siren: SirenNet,
        recon_opt: Adam,
        inr_opt: Adam,
        iteration: u64,
        seed: u64,
    ) -> Result<Self> {
        hp.validate()?;
        cfg.validate()?;
        let samples = prepare(data, &hp, &cfg)?;
        Ok(Self {
            recon,
            siren,
            recon_opt,
            inr_opt,
            hp,
            cfg,
            iteration,
            history: Vec::new(),
            seed,
            samples,
        })
    }

    pub fn recon(&self) -> &ConvReconstructor {
        &self.recon
    }

    pub fn siren(&self) -> &SirenNet {
        &self.siren
    }

    pub fn recon_optimizer(&self) -> &Adam {
        &self.recon_opt
    }

    pub fn inr_optimizer(&self) -> &Adam {
        &self.inr_opt
    }

    pub fn hyper_params(&self) -> &HyperParams {
        &self.hp
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn history(&self) -> &[LossRecord] {
        &self.history
    }

    pub fn recon_hash(&self) -> u64 {
        param_hash(self.recon.params())
    }

    pub fn siren_hash(&self) -> u64 {
        param_hash(self.siren.params())
    }

    /// Phase the step with index `step` runs.
    pub fn phase_at(&self, step: u64) -> Phase {
        let cycle = (self.cfg.recon_steps + self.cfg.inr_steps) as u64;
        if step % cycle < self.cfg.recon_steps as u64 {
            Phase::Reconstructor
        } else {
            Phase::Inr
        }
    }

    pub fn next_phase(&self) -> Phase {
        self.phase_at(self.iteration)
    }

    fn sample_index(&self, step: u64) -> usize {
        let cycle = (self.cfg.recon_steps + self.cfg.inr_steps) as u64;
        ((step / cycle) % self.samples.len() as u64) as usize
    }

    /// Susceptibility estimate of the current reconstructor.
    pub fn reconstruct(&self, field: &Volume3D, orientation: Orientation) -> Result<Volume3D> {
        let input = recon_input(field, orientation, &self.hp, self.cfg.recon_input)?;
        Ok(self.recon.predict(&input))
    }

    /// Kernel the network currently predicts for `orientation` on the training grid.
    pub fn predicted_kernel(&self, orientation: Orientation) -> DipoleKernel {
        synthesize_kernel(&self.siren, self.samples[0].input.grid(), orientation)
    }

    fn refresh_kernels(&mut self, si: usize) {
        if self.samples[si].d_hat.is_none() {
            let siren = &self.siren;
            let p = &self.samples[si];
            let kernels = p
                .coords
                .iter()
                .zip(&p.d_ref)
                .map(|(c, r)| {
                    DipoleKernel::from_values(*p.input.grid(), r.orientation(), siren.predict(c))
                        .expect("network output is finite")
                })
                .collect();
            self.samples[si].d_hat = Some(kernels);
        }
    }

    pub fn step(&mut self) -> Result<LossRecord> {
        let step = self.iteration;
        let phase = self.phase_at(step);
        let si = self.sample_index(step);
        self.refresh_kernels(si);
        let hp = self.hp;
        let record = match phase {
            Phase::Reconstructor => {
                let p = &self.samples[si];
                let chi_hat = self.recon.forward(&p.input);
                let q = loss_qsmnet(&chi_hat, &p.sample.chi_label, &p.kernel, &hp)?;
                let d_hat = p.d_hat.as_ref().expect("kernels refreshed");
                let dip = dipole_loss(&p.fields, &chi_hat, d_hat, &p.d_ref, &p.weight, hp.eps)?;
                let upstream = match self.cfg.recon_objective {
                    ReconObjective::Qsmnet => q.grad_chi.clone(),
                    ReconObjective::Total => q.grad_chi.axpby(1.0, &dip.grad_chi, hp.lambda)?,
                };
                self.recon.zero_grad();
                self.recon.backward(&upstream)?;
                let (params, grads) = self.recon.params_and_grads();
                self.recon_opt.step(params, grads);
                self.samples.iter_mut().for_each(|s| s.chi_hat = None);
                (q.value, dip.terms)
            }
            Phase::Inr => {
                if self.samples[si].chi_hat.is_none() {
                    let chi = self.recon.predict(&self.samples[si].input);
                    self.samples[si].chi_hat = Some(chi);
                }
                let p = &self.samples[si];
                let chi_hat = p.chi_hat.as_ref().expect("estimate cached");
                let q = loss_qsmnet(chi_hat, &p.sample.chi_label, &p.kernel, &hp)?;
                let d_hat = p.d_hat.as_ref().expect("kernels refreshed");
                let dip = dipole_loss(&p.fields, chi_hat, d_hat, &p.d_ref, &p.weight, hp.eps)?;
                let scale = match self.cfg.inr_phase_objective {
                    InrObjective::Total => hp.lambda,
                    InrObjective::Dipole => 1.0,
                };
                self.siren.zero_grad();
                if scale != 0.0 {
                    let (rows, weights) = self.inr_rows(step, p.input.grid());
                    for (coords, grad) in p.coords.iter().zip(&dip.grad_d) {
                        let batch = coords.select(&rows);
                        self.siren.forward(&batch);
                        let upstream: Vec<f64> = rows.iter().zip(&weights).map(|(&k, w)| scale * w * grad[k]).collect();
                        self.siren.backward(&batch, &upstream)?;
                    }
                }
                let (params, grads) = self.siren.params_and_grads();
                self.inr_opt.step(params, grads);
                self.samples.iter_mut().for_each(|s| s.d_hat = None);
                (q.value, dip.terms)
            }
        };
        let (qsmnet, terms) = record;
        let dipole = terms.total();
        let rec = LossRecord {
            step,
            phase,
            qsmnet,
            inr: terms.inr,
            fill: terms.fill,
            dc: terms.dc,
            dipole,
            total: loss_total(qsmnet, dipole, hp.lambda),
            recon_hash: self.recon_hash(),
            siren_hash: self.siren_hash(),
        };
        self.history.push(rec);
        self.iteration += 1;
        Ok(rec)
    }

    /// Rows for one kernel-network gradient and the factor each one's
    /// gradient is scaled by, so the estimate is unbiased: anchor bins count
    /// once, sampled bins stand in for all the bins they were drawn from.
    fn inr_rows(&self, step: u64, grid: &GridSpec) -> (Vec<usize>, Vec<f64>) {
        let n = grid.len();
        if self.cfg.inr_batch == 0 || self.cfg.inr_batch >= n {
            return ((0..n).collect(), vec![1.0; n]);
        }
        let dims = grid.dims();
        let r = self.cfg.inr_anchor_radius as isize;
        let (anchors, rest): (Vec<usize>, Vec<usize>) = (0..n).partition(|&k| {
            let (i, j, l) = grid.coords(k);
            [(i, 0), (j, 1), (l, 2)].iter().all(|&(c, a)| signed_bin(c, dims[a]).abs() <= r)
        });
        let draw = self.cfg.inr_batch.saturating_sub(anchors.len()).min(rest.len());
        // One stream per step so a resumed run draws the same rows.
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(step + 1);
        let picked = rand::seq::index::sample(&mut rng, rest.len(), draw);
        let w = rest.len() as f64 / draw as f64;
        let mut rows: Vec<(usize, f64)> = anchors.iter().map(|&k| (k, 1.0)).collect();
        rows.extend(picked.iter().map(|i| (rest[i], w)));
        rows.sort_unstable_by_key(|r| r.0);
        rows.into_iter().unzip()
    }

    pub fn run(&mut self, steps: u64) -> Result<()> {
        for _ in 0..steps {
            self.step()?;
        }
        Ok(())
    }
}

fn prepare(data: Vec<TrainSample>, hp: &HyperParams, cfg: &TrainConfig) -> Result<Vec<Prepared>> {
    let first = data.first().ok_or(QsmError::EmptyDataset)?;
    let grid = *first.field.grid();
    let extras = auxiliary_orientations(hp.orientations - 1, &cfg.extra_orientations)?;
    let mut out = Vec::with_capacity(data.len());
    for sample in data {
        grid.ensure_same(sample.field.grid())?;
        grid.ensure_same(sample.chi_label.grid())?;
        let kernel = dipole_kernel(&grid, sample.orientation);
        let orients: Vec<Orientation> = std::iter::once(sample.orientation).chain(extras.iter().copied()).collect();
        let d_ref: Vec<DipoleKernel> = std::iter::once(kernel.clone())
            .chain(extras.iter().map(|o| dipole_kernel(&grid, *o)))
            .collect();
        let fields = match cfg.dc_mode {
            DcMode::AsWritten => vec![sample.field.clone()],
            DcMode::PerOrientationFields => {
                let mut f = vec![sample.field.clone()];
                for k in &d_ref[1..] {
                    f.push(forward_field(&sample.chi_label, k)?);
                }
                f
            }
        };
        out.push(Prepared {
            input: recon_input(&sample.field, sample.orientation, hp, cfg.recon_input)?,
            weight: weight_mask(&kernel, hp.tau)?,
            coords: orients.iter().map(|o| CoordBatch::for_grid(&grid, *o)).collect(),
            kernel,
            d_ref,
            fields,
            sample,
            d_hat: None,
            chi_hat: None,
        });
    }
    Ok(out)
}

fn auxiliary_orientations(count: usize, configured: &[Orientation]) -> Result<Vec<Orientation>> {
    if configured.len() >= count {
        return Ok(configured[..count].to_vec());
    }
    let mut out = configured.to_vec();
    let sweep = orientation_sweep(count + 1, AUX_CAP_DEG, 0)?;
    out.extend(sweep.into_iter().skip(1).take(count - configured.len()));
    Ok(out)
}

/// Runs `steps` alternating steps from a fresh state.
pub fn alternate_train(
    data: Vec<TrainSample>,
    hp: HyperParams,
    cfg: TrainConfig,
    steps: u64,
    seed: u64,
) -> Result<TrainState> {
    if steps < 2 {
        return Err(QsmError::InvalidParameter(format!(
            "training needs at least 2 steps, got {steps}"
        )));
    }
    let mut state = TrainState::new(data, hp, cfg, seed)?;
    state.run(steps)?;
    Ok(state)
}
