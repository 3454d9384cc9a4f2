//! Experiment configuration read from JSON. Unknown keys are rejected and
//! every omitted key takes the default shown by `qsm config`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use qsm_core::dipole::Orientation;
use qsm_core::loss::HyperParams;
use qsm_core::phantom::{NoiseSpec, PhantomSpec};
use qsm_core::trainer::TrainConfig;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OrientationSweepConfig {
    pub count: usize,
    pub cap_deg: f64,
    pub seed: u64,
}

impl Default for OrientationSweepConfig {
    fn default() -> Self {
        Self {
            count: 18,
            cap_deg: 30.0,
            seed: 0,
        }
    }
}

/// Loss-weight combinations to train. `combinations` lists
/// `[w_model, w_grad, w_dipole]` triples explicitly; the three lists form a
/// cartesian product in which an empty list means "the value in
/// `hyper_params`". Explicit triples come first.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightSweep {
    pub combinations: Vec<[f64; 3]>,
    pub w_model: Vec<f64>,
    pub w_grad: Vec<f64>,
    pub w_dipole: Vec<f64>,
}

impl WeightSweep {
    pub fn triples(&self, base: &HyperParams) -> Vec<[f64; 3]> {
        let mut out = self.combinations.clone();
        if !(self.w_model.is_empty() && self.w_grad.is_empty() && self.w_dipole.is_empty()) {
            let or = |v: &Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v.clone() };
            for &m in &or(&self.w_model, base.w_model) {
                for &g in &or(&self.w_grad, base.w_grad) {
                    for &d in &or(&self.w_dipole, base.lambda) {
                        out.push([m, g, d]);
                    }
                }
            }
        }
        let mut seen = Vec::new();
        out.retain(|t| {
            let fresh = !seen.contains(t);
            seen.push(*t);
            fresh
        });
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub phantom: PhantomSpec,
    pub noise: NoiseSpec,
    /// Acquisition directions; each one becomes a training sample.
    pub orientations: Vec<Orientation>,
    pub hyper_params: HyperParams,
    pub train: TrainConfig,
    pub steps: u64,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub sweep: Option<WeightSweep>,
    pub orientation_sweep: OrientationSweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            phantom: PhantomSpec::sphere_cylinder(32).expect("valid default phantom"),
            noise: NoiseSpec::none(),
            orientations: vec![Orientation::z()],
            hyper_params: HyperParams::default(),
            train: TrainConfig::default(),
            steps: 2000,
            seed: 0,
            out_dir: PathBuf::from("out"),
            sweep: None,
            orientation_sweep: OrientationSweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::file(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |e: qsm_core::QsmError| CliError::config(e.to_string());
        self.hyper_params.validate().map_err(bad)?;
        self.train.validate().map_err(bad)?;
        if self.orientations.is_empty() {
            return Err(CliError::config("orientations: at least one direction is required"));
        }
        if !(self.noise.sigma >= 0.0 && self.noise.sigma.is_finite()) {
            return Err(CliError::config(format!("noise.sigma must be >= 0, got {}", self.noise.sigma)));
        }
        if self.steps < 2 {
            return Err(CliError::config(format!("steps must be at least 2, got {}", self.steps)));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Loss-weight triples to train, in run order.
    pub fn weight_triples(&self) -> Vec<[f64; 3]> {
        let base = &self.hyper_params;
        match &self.sweep {
            Some(s) => {
                let t = s.triples(base);
                if t.is_empty() {
                    vec![[base.w_model, base.w_grad, base.lambda]]
                } else {
                    t
                }
            }
            None => vec![[base.w_model, base.w_grad, base.lambda]],
        }
    }

    /// The single-run configuration for one weight triple.
    pub fn for_triple(&self, t: [f64; 3]) -> Self {
        let mut c = self.clone();
        c.sweep = None;
        c.hyper_params.w_model = t[0];
        c.hyper_params.w_grad = t[1];
        c.hyper_params.lambda = t[2];
        c
    }

    /// SHA-256 of the run-relevant fields; the output directory is excluded
    /// so moving a sweep does not invalidate it.
    pub fn run_hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        hex::encode(Sha256::digest(serde_json::to_vec(&c).expect("config serialises")))
    }
}

pub fn triple_dir_name(t: [f64; 3]) -> String {
    format!("wm{:.3}_wg{:.3}_wd{:.3}", t[0], t[1], t[2])
}
