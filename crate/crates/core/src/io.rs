//! On-disk formats: a one-line JSON header followed by raw little-endian f64s.

use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{QsmError, Result};
use crate::grid::{GridSpec, Volume3D};
use crate::loss::HyperParams;
use crate::optim::{Adam, AdamConfig};
use crate::recon::ConvReconstructor;
use crate::siren::SirenNet;
use crate::trainer::{TrainConfig, TrainSample, TrainState};

pub const VOLUME_MAGIC: &str = "QSMV1";
pub const CHECKPOINT_MAGIC: &str = "QSMCK1";

/// Longest header line accepted before giving up on a file.
const MAX_HEADER: u64 = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub magic: String,
    pub dims: [usize; 3],
    pub voxel_size: [f64; 3],
    pub dtype: String,
    pub order: String,
}

impl VolumeHeader {
    fn for_grid(grid: &GridSpec) -> Self {
        Self {
            magic: VOLUME_MAGIC.into(),
            dims: grid.dims(),
            voxel_size: grid.voxel_size(),
            dtype: "f64".into(),
            order: "x-fastest".into(),
        }
    }

    fn grid(&self) -> Result<GridSpec> {
        if self.magic != VOLUME_MAGIC {
            return Err(QsmError::Format(format!("bad magic {:?}", self.magic)));
        }
        if self.dtype != "f64" || self.order != "x-fastest" {
            return Err(QsmError::Format(format!(
                "unsupported layout dtype={:?} order={:?}",
                self.dtype, self.order
            )));
        }
        GridSpec::new(self.dims, self.voxel_size)
    }
}

fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    out.reserve(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn parse_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect()
}

fn header_line<T: Serialize>(header: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec(header).expect("header serialises");
    out.push(b'\n');
    out
}

pub fn encode_volume(v: &Volume3D) -> Vec<u8> {
    let mut out = header_line(&VolumeHeader::for_grid(v.grid()));
    push_f64s(&mut out, v.data());
    out
}

/// Splits off the first line and parses it as JSON.
fn split_header<T: for<'de> Deserialize<'de>>(bytes: &[u8]) -> Result<(T, &[u8])> {
    let nl = bytes
        .iter()
        .take(MAX_HEADER as usize)
        .position(|&b| b == b'\n')
        .ok_or_else(|| QsmError::Format("missing header line".into()))?;
    let header = serde_json::from_slice(&bytes[..nl]).map_err(|e| QsmError::Format(format!("header: {e}")))?;
    Ok((header, &bytes[nl + 1..]))
}

fn check_len(got: usize, values: usize) -> Result<()> {
    if got != values * 8 {
        return Err(QsmError::Format(format!(
            "payload is {got} bytes, header requires {}",
            values * 8
        )));
    }
    Ok(())
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume3D> {
    let (header, payload): (VolumeHeader, _) = split_header(bytes)?;
    let grid = header.grid()?;
    check_len(payload.len(), grid.len())?;
    Volume3D::new(grid, parse_f64s(payload))
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_volume(path: &Path, v: &Volume3D) -> Result<()> {
    write_atomic(path, &encode_volume(v))
}

/// Reads the header line, checks the file length against it, and only then
/// reads the payload.
pub fn read_volume(path: &Path) -> Result<Volume3D> {
    let file = File::open(path)?;
    let total = file.metadata()?.len();
    let mut reader = BufReader::new(file);
    let mut line = Vec::new();
    reader.by_ref().take(MAX_HEADER).read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(QsmError::Format("missing header line".into()));
    }
    let header: VolumeHeader =
        serde_json::from_slice(&line[..line.len() - 1]).map_err(|e| QsmError::Format(format!("header: {e}")))?;
    let grid = header.grid()?;
    check_len((total - line.len() as u64) as usize, grid.len())?;
    let mut payload = Vec::with_capacity(grid.len() * 8);
    reader.read_to_end(&mut payload)?;
    check_len(payload.len(), grid.len())?;
    Volume3D::new(grid, parse_f64s(&payload))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Section {
    name: String,
    len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    magic: String,
    iteration: u64,
    seed: u64,
    hyper_params: HyperParams,
    train_config: TrainConfig,
    recon_adam: AdamConfig,
    inr_adam: AdamConfig,
    recon_adam_steps: u64,
    inr_adam_steps: u64,
    sections: Vec<Section>,
}

const SECTIONS: [&str; 6] = ["recon_params", "siren_params", "recon_m", "recon_v", "inr_m", "inr_v"];

/// Everything needed to continue training or to run the trained networks.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub iteration: u64,
    pub seed: u64,
    pub hyper_params: HyperParams,
    pub train_config: TrainConfig,
    pub recon: ConvReconstructor,
    pub siren: SirenNet,
    pub recon_opt: Adam,
    pub inr_opt: Adam,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState) -> Self {
        Self {
            iteration: state.iteration(),
            seed: state.seed(),
            hyper_params: *state.hyper_params(),
            train_config: state.config().clone(),
            recon: state.recon().clone(),
            siren: state.siren().clone(),
            recon_opt: state.recon_optimizer().clone(),
            inr_opt: state.inr_optimizer().clone(),
        }
    }

    pub fn into_state(self, data: Vec<TrainSample>) -> Result<TrainState> {
        TrainState::from_parts(
            data,
            self.hyper_params,
            self.train_config,
            self.recon,
            self.siren,
            self.recon_opt,
            self.inr_opt,
            self.iteration,
            self.seed,
        )
    }

    pub fn encode(&self) -> Vec<u8> {
        let (rm, rv) = self.recon_opt.moments();
        let (im, iv) = self.inr_opt.moments();
        let parts: [&[f64]; 6] = [self.recon.params(), self.siren.params(), rm, rv, im, iv];
        let header = CheckpointHeader {
            magic: CHECKPOINT_MAGIC.into(),
            iteration: self.iteration,
            seed: self.seed,
            hyper_params: self.hyper_params,
            train_config: self.train_config.clone(),
            recon_adam: *self.recon_opt.config(),
            inr_adam: *self.inr_opt.config(),
            recon_adam_steps: self.recon_opt.steps_taken(),
            inr_adam_steps: self.inr_opt.steps_taken(),
            sections: SECTIONS
                .iter()
                .zip(parts)
                .map(|(n, p)| Section {
                    name: (*n).into(),
                    len: p.len(),
                })
                .collect(),
        };
        let mut out = header_line(&header);
        for p in parts {
            push_f64s(&mut out, p);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (h, payload): (CheckpointHeader, _) = split_header(bytes)?;
        if h.magic != CHECKPOINT_MAGIC {
            return Err(QsmError::Format(format!("bad magic {:?}", h.magic)));
        }
        let names: Vec<&str> = h.sections.iter().map(|s| s.name.as_str()).collect();
        if names != SECTIONS {
            return Err(QsmError::Format(format!("unexpected sections {names:?}")));
        }
        let total: usize = h.sections.iter().map(|s| s.len).sum();
        check_len(payload.len(), total)?;
        let values = parse_f64s(payload);
        let mut parts = Vec::with_capacity(6);
        let mut at = 0;
        for s in &h.sections {
            parts.push(values[at..at + s.len].to_vec());
            at += s.len;
        }
        let mut recon = ConvReconstructor::zeros(h.train_config.recon.clone())?;
        recon.set_params(&parts[0])?;
        let mut siren = SirenNet::zeros(h.train_config.siren)?;
        siren.set_params(&parts[1])?;
        let restore = |cfg: AdamConfig, m: &[f64], v: &[f64], n: usize, t: u64| -> Result<Adam> {
            if m.len() != n || v.len() != n {
                return Err(QsmError::LengthMismatch {
                    expected: n,
                    got: m.len().min(v.len()),
                });
            }
            let mut a = Adam::new(cfg, n);
            a.restore(m.to_vec(), v.to_vec(), t);
            Ok(a)
        };
        let recon_opt = restore(h.recon_adam, &parts[2], &parts[3], recon.num_params(), h.recon_adam_steps)?;
        let inr_opt = restore(h.inr_adam, &parts[4], &parts[5], siren.num_params(), h.inr_adam_steps)?;
        Ok(Self {
            iteration: h.iteration,
            seed: h.seed,
            hyper_params: h.hyper_params,
            train_config: h.train_config,
            recon,
            siren,
            recon_opt,
            inr_opt,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}
