//! Sinusoidal coordinate network representing the dipole kernel.
//!
//! `h_0 = (r, b)`, `h_l = sin(omega0 (W_l h_{l-1} + b_l))` for the hidden
//! layers, and a linear head `f(r, b) = W_L h_{L-1} + b_L`. The input is a
//! normalised k-space coordinate `r ∈ [-1, 1]^3` concatenated with the field
//! direction `b`, so one parameter set serves every orientation.
//!
//! Gradients are derived by hand for this architecture only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dipole::{DipoleKernel, Orientation};
use crate::error::{QsmError, Result};
use crate::grid::GridSpec;

pub const INPUT_DIM: usize = 6;
pub const OUTPUT_DIM: usize = 1;

/// Rows evaluated per block by [`SirenNet::predict`].
const PREDICT_CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SirenConfig {
    /// Total layer count including the linear head.
    pub depth: usize,
    pub width: usize,
    pub omega0: f64,
}

impl Default for SirenConfig {
    fn default() -> Self {
        Self {
            depth: 5,
            width: 128,
            omega0: 30.0,
        }
    }
}

impl SirenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 {
            return Err(QsmError::InvalidParameter(
                "SIREN depth and width must be positive".into(),
            ));
        }
        if !(self.omega0.is_finite() && self.omega0 > 0.0) {
            return Err(QsmError::InvalidParameter(format!(
                "omega0 must be positive, got {}",
                self.omega0
            )));
        }
        Ok(())
    }
}

/// Maps DFT index `i` of an `n`-point axis to its centred coordinate in
/// `[-1, 1]`: frequencies are reordered low-to-high (fftshift) and placed at
/// cell centres `2s/n - 1 + 1/n`.
#[inline]
pub fn normalized_coord(i: usize, n: usize) -> f64 {
    let s = (i + n / 2) % n;
    (2 * s + 1) as f64 / n as f64 - 1.0
}

/// Inverse of [`normalized_coord`].
pub fn index_from_normalized(r: f64, n: usize) -> usize {
    let s = ((r + 1.0) * n as f64 / 2.0 - 0.5).round() as usize;
    (s + n.div_ceil(2)) % n
}

/// Network inputs: one `(r, b)` row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordBatch {
    rows: Vec<[f64; INPUT_DIM]>,
}

impl CoordBatch {
    pub fn new(rows: Vec<[f64; INPUT_DIM]>) -> Result<Self> {
        for row in &rows {
            if row[..3].iter().any(|c| !(-1.0..=1.0).contains(c)) {
                return Err(QsmError::InvalidParameter(format!(
                    "coordinate {:?} outside [-1, 1]^3",
                    &row[..3]
                )));
            }
            Orientation::new([row[3], row[4], row[5]])?;
        }
        Ok(Self { rows })
    }

    /// One row per k-space voxel of `grid`, in flat voxel order.
    pub fn for_grid(grid: &GridSpec, orient: Orientation) -> Self {
        let [nx, ny, nz] = grid.dims();
        let rx: Vec<f64> = (0..nx).map(|i| normalized_coord(i, nx)).collect();
        let ry: Vec<f64> = (0..ny).map(|j| normalized_coord(j, ny)).collect();
        let rz: Vec<f64> = (0..nz).map(|k| normalized_coord(k, nz)).collect();
        let b = orient.vector();
        let mut rows = Vec::with_capacity(grid.len());
        for &z in &rz {
            for &y in &ry {
                for &x in &rx {
                    rows.push([x, y, z, b[0], b[1], b[2]]);
                }
            }
        }
        Self { rows }
    }

    /// Subset of rows, in the order given.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            rows: indices.iter().map(|&i| self.rows[i]).collect(),
        }
    }

    pub fn rows(&self) -> &[[f64; INPUT_DIM]] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn flat(&self) -> Vec<f64> {
        self.rows.iter().flatten().copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LayerShape {
    fan_in: usize,
    fan_out: usize,
    w_off: usize,
    b_off: usize,
}

#[derive(Debug, Clone)]
struct ForwardCache {
    /// Row-major network input, `rows x INPUT_DIM`.
    input: Vec<f64>,
    /// Hidden activations `h_l`, one buffer per hidden layer.
    acts: Vec<Vec<f64>>,
    /// `cos(omega0 z_l)` for each hidden layer.
    cos: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct SirenNet {
    cfg: SirenConfig,
    shapes: Vec<LayerShape>,
    params: Vec<f64>,
    grads: Vec<f64>,
    cache: Option<ForwardCache>,
}

/// `c = alpha * a * b + beta * c` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    if k > 0 {
        assert!(last(m, k, rsa, csa) < a.len());
        assert!(last(k, n, rsb, csb) < b.len());
    }
    assert!(last(m, n, rsc, csc) < c.len());
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

impl SirenNet {
    /// Random initialisation: first-layer weights in `±1/fan_in`, later
    /// layers in `±sqrt(6/fan_in)/omega0`, biases in `±1/sqrt(fan_in)`.
    pub fn new(cfg: SirenConfig, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (l, shape) in net.shapes.clone().iter().enumerate() {
            let fan_in = shape.fan_in as f64;
            let w_bound = if l == 0 {
                1.0 / fan_in
            } else {
                (6.0 / fan_in).sqrt() / cfg.omega0
            };
            let b_bound = 1.0 / fan_in.sqrt();
            let n_w = shape.fan_in * shape.fan_out;
            for w in &mut net.params[shape.w_off..shape.w_off + n_w] {
                *w = rng.gen_range(-w_bound..=w_bound);
            }
            for b in &mut net.params[shape.b_off..shape.b_off + shape.fan_out] {
                *b = rng.gen_range(-b_bound..=b_bound);
            }
        }
        Ok(net)
    }

    /// All parameters zero.
    pub fn zeros(cfg: SirenConfig) -> Result<Self> {
        cfg.validate()?;
        let mut shapes = Vec::with_capacity(cfg.depth);
        let mut off = 0;
        for l in 0..cfg.depth {
            let fan_in = if l == 0 { INPUT_DIM } else { cfg.width };
            let fan_out = if l + 1 == cfg.depth { OUTPUT_DIM } else { cfg.width };
            shapes.push(LayerShape {
                fan_in,
                fan_out,
                w_off: off,
                b_off: off + fan_in * fan_out,
            });
            off += fan_in * fan_out + fan_out;
        }
        Ok(Self {
            cfg,
            shapes,
            params: vec![0.0; off],
            grads: vec![0.0; off],
            cache: None,
        })
    }

    pub fn config(&self) -> &SirenConfig {
        &self.cfg
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Parameters flattened layer by layer, weights (row-major `out x in`) then bias.
    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn grads(&self) -> &[f64] {
        &self.grads
    }

    /// Parameters and gradients together, for optimiser updates.
    pub fn params_and_grads(&mut self) -> (&mut [f64], &[f64]) {
        self.cache = None;
        (&mut self.params, &self.grads)
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Replaces all parameters; the length must match [`Self::num_params`].
    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(QsmError::LengthMismatch {
                expected: self.params.len(),
                got: params.len(),
            });
        }
        if let Some(index) = params.iter().position(|v| !v.is_finite()) {
            return Err(QsmError::NonFinite { index });
        }
        self.params.copy_from_slice(params);
        self.cache = None;
        Ok(())
    }

    /// Mutable weight (`out x in`, row-major) and bias slices of layer `l`.
    pub fn layer_mut(&mut self, l: usize) -> (&mut [f64], &mut [f64]) {
        let s = self.shapes[l];
        let (w, rest) = self.params[s.w_off..].split_at_mut(s.fan_in * s.fan_out);
        (w, &mut rest[..s.fan_out])
    }

    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let s = self.shapes[l];
        (
            &self.params[s.w_off..s.w_off + s.fan_in * s.fan_out],
            &self.params[s.b_off..s.b_off + s.fan_out],
        )
    }

    pub fn layer_grads(&self, l: usize) -> (&[f64], &[f64]) {
        let s = self.shapes[l];
        (
            &self.grads[s.w_off..s.w_off + s.fan_in * s.fan_out],
            &self.grads[s.b_off..s.b_off + s.fan_out],
        )
    }

    pub fn depth(&self) -> usize {
        self.shapes.len()
    }

    /// Affine map of layer `l` for `rows` inputs: `out = h W^T + b`.
    fn affine(&self, l: usize, h: &[f64], rows: usize) -> Vec<f64> {
        let s = self.shapes[l];
        let (w, b) = self.layer(l);
        let mut z = Vec::with_capacity(rows * s.fan_out);
        for _ in 0..rows {
            z.extend_from_slice(b);
        }
        gemm(
            rows,
            s.fan_in,
            s.fan_out,
            h,
            (s.fan_in, 1),
            w,
            (1, s.fan_in),
            1.0,
            &mut z,
            (s.fan_out, 1),
        );
        z
    }

    fn run(&self, input: &[f64], rows: usize, mut cache: Option<&mut ForwardCache>) -> Vec<f64> {
        let w0 = self.cfg.omega0;
        let last = self.shapes.len() - 1;
        let mut h: Vec<f64> = input.to_vec();
        for l in 0..last {
            let mut z = self.affine(l, &h, rows);
            match cache.as_deref_mut() {
                Some(c) => {
                    let mut cos = Vec::with_capacity(z.len());
                    for v in z.iter_mut() {
                        let (s, co) = (w0 * *v).sin_cos();
                        *v = s;
                        cos.push(co);
                    }
                    c.cos.push(cos);
                    c.acts.push(z.clone());
                }
                None => z.iter_mut().for_each(|v| *v = (w0 * *v).sin()),
            }
            h = z;
        }
        self.affine(last, &h, rows)
    }

    /// Evaluates the network and keeps the activations needed by [`Self::backward`].
    pub fn forward(&mut self, batch: &CoordBatch) -> Vec<f64> {
        let input = batch.flat();
        let mut cache = ForwardCache {
            input,
            acts: Vec::new(),
            cos: Vec::new(),
        };
        let out = self.run(&cache.input.clone(), batch.len(), Some(&mut cache));
        self.cache = Some(cache);
        out
    }

    /// Read-only evaluation without caching, in fixed-size row blocks.
    pub fn predict(&self, batch: &CoordBatch) -> Vec<f64> {
        let input = batch.flat();
        let mut out = Vec::with_capacity(batch.len());
        for block in input.chunks(PREDICT_CHUNK * INPUT_DIM) {
            out.extend(self.run(block, block.len() / INPUT_DIM, None));
        }
        out
    }

    /// Accumulates `sum_r dl_dout[r] * d f(x_r) / d theta` into the gradient
    /// buffers. `batch` must be the batch of the most recent [`Self::forward`].
    pub fn backward(&mut self, batch: &CoordBatch, dl_dout: &[f64]) -> Result<()> {
        let cache = self.cache.take().ok_or(QsmError::MissingForwardCache)?;
        let matches = cache.input.len() == batch.len() * INPUT_DIM
            && batch
                .rows
                .iter()
                .flatten()
                .zip(&cache.input)
                .all(|(a, b)| a.to_bits() == b.to_bits());
        if !matches {
            self.cache = Some(cache);
            return Err(QsmError::MissingForwardCache);
        }
        if dl_dout.len() != batch.len() {
            self.cache = Some(cache);
            return Err(QsmError::LengthMismatch {
                expected: batch.len(),
                got: dl_dout.len(),
            });
        }
        self.backprop(&cache.input, &cache.acts, &cache.cos, batch.len(), dl_dout);
        self.cache = Some(cache);
        Ok(())
    }

    /// Backward pass restricted to cached rows `rows` of the last forward batch.
    pub fn backward_rows(&mut self, rows: &[usize], dl_dout: &[f64]) -> Result<()> {
        let cache = self.cache.take().ok_or(QsmError::MissingForwardCache)?;
        let n_rows = cache.input.len() / INPUT_DIM;
        if dl_dout.len() != rows.len() || rows.iter().any(|&r| r >= n_rows) {
            self.cache = Some(cache);
            return Err(QsmError::InvalidParameter(
                "row selection does not fit the cached batch".into(),
            ));
        }
        let gather = |buf: &[f64], width: usize| -> Vec<f64> {
            let mut out = Vec::with_capacity(rows.len() * width);
            for &r in rows {
                out.extend_from_slice(&buf[r * width..(r + 1) * width]);
            }
            out
        };
        let input = gather(&cache.input, INPUT_DIM);
        let width = self.cfg.width;
        let acts: Vec<Vec<f64>> = cache.acts.iter().map(|a| gather(a, width)).collect();
        let cos: Vec<Vec<f64>> = cache.cos.iter().map(|c| gather(c, width)).collect();
        self.backprop(&input, &acts, &cos, rows.len(), dl_dout);
        self.cache = Some(cache);
        Ok(())
    }

    fn backprop(&mut self, input: &[f64], acts: &[Vec<f64>], cos: &[Vec<f64>], rows: usize, dl_dout: &[f64]) {
        let w0 = self.cfg.omega0;
        let last = self.shapes.len() - 1;
        let mut delta: Vec<f64> = dl_dout.to_vec();
        for l in (0..=last).rev() {
            let s = self.shapes[l];
            let h_prev: &[f64] = if l == 0 { input } else { &acts[l - 1] };
            if l < last {
                for (d, &c) in delta.iter_mut().zip(&cos[l]) {
                    *d *= w0 * c;
                }
            }
            {
                let gw = &mut self.grads[s.w_off..s.w_off + s.fan_in * s.fan_out];
                // gW += delta^T h_prev
                gemm(
                    s.fan_out,
                    rows,
                    s.fan_in,
                    &delta,
                    (1, s.fan_out),
                    h_prev,
                    (s.fan_in, 1),
                    1.0,
                    gw,
                    (s.fan_in, 1),
                );
            }
            let gb = &mut self.grads[s.b_off..s.b_off + s.fan_out];
            for row in delta.chunks_exact(s.fan_out) {
                for (g, d) in gb.iter_mut().zip(row) {
                    *g += d;
                }
            }
            if l > 0 {
                let w = &self.params[s.w_off..s.w_off + s.fan_in * s.fan_out];
                let mut next = vec![0.0; rows * s.fan_in];
                gemm(
                    rows,
                    s.fan_out,
                    s.fan_in,
                    &delta,
                    (s.fan_out, 1),
                    w,
                    (s.fan_in, 1),
                    0.0,
                    &mut next,
                    (s.fan_in, 1),
                );
                delta = next;
            }
        }
    }
}

/// Predicted kernel for `orient`: the raw network output at every k-space voxel.
pub fn synthesize_kernel(net: &SirenNet, grid: &GridSpec, orient: Orientation) -> DipoleKernel {
    let values = net.predict(&CoordBatch::for_grid(grid, orient));
    DipoleKernel::from_values(*grid, orient, values).expect("network output is finite")
}
