//! Small residual 3D convolutional network mapping a field map to a
//! susceptibility estimate: `chi = input + conv_L(...leaky(conv_1(input)))`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{QsmError, Result};
use crate::grid::{GridSpec, Volume3D};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconConfig {
    /// Channel counts from input to output; both ends must be 1.
    pub channels: Vec<usize>,
    /// Odd cubic kernel edge length.
    pub kernel: usize,
    pub leaky_slope: f64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            channels: vec![1, 8, 8, 1],
            kernel: 3,
            leaky_slope: 0.1,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        let c = &self.channels;
        if c.len() < 2 || c[0] != 1 || c[c.len() - 1] != 1 || c.contains(&0) {
            return Err(QsmError::InvalidParameter(format!(
                "channels must start and end with 1 and be positive, got {c:?}"
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(QsmError::InvalidParameter(format!(
                "kernel size must be odd, got {}",
                self.kernel
            )));
        }
        if !self.leaky_slope.is_finite() {
            return Err(QsmError::InvalidParameter("leaky slope must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ConvShape {
    c_in: usize,
    c_out: usize,
    w_off: usize,
    b_off: usize,
}

#[derive(Debug, Clone)]
struct Cache {
    grid: GridSpec,
    /// Input of each layer, channel-major.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of every layer but the last.
    pre: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct ConvReconstructor {
    cfg: ReconConfig,
    shapes: Vec<ConvShape>,
    params: Vec<f64>,
    grads: Vec<f64>,
    cache: Option<Cache>,
}

/// `out[p] += w * inp[p + offset]` over every voxel whose shifted partner lies
/// inside the grid (zero padding).
fn shift_axpy(dims: [usize; 3], offset: [isize; 3], w: f64, inp: &[f64], out: &mut [f64]) {
    let [nx, ny, nz] = dims;
    let range = |n: usize, o: isize| -> (usize, usize) {
        let lo = (-o).max(0) as usize;
        let hi = (n as isize - o.max(0)).max(0) as usize;
        (lo.min(n), hi)
    };
    let (x0, x1) = range(nx, offset[0]);
    let (y0, y1) = range(ny, offset[1]);
    let (z0, z1) = range(nz, offset[2]);
    if x0 >= x1 {
        return;
    }
    for z in z0..z1 {
        let zs = (z as isize + offset[2]) as usize;
        for y in y0..y1 {
            let ys = (y as isize + offset[1]) as usize;
            let o = nx * (y + ny * z);
            let s = (nx * (ys + ny * zs)) as isize + offset[0];
            let dst = &mut out[o + x0..o + x1];
            let src = &inp[(s + x0 as isize) as usize..(s + x1 as isize) as usize];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d += w * v;
            }
        }
    }
}

/// `Σ_p a[p] * b[p + offset]` over voxels where both are inside the grid.
fn shift_dot(dims: [usize; 3], offset: [isize; 3], a: &[f64], b: &[f64]) -> f64 {
    let [nx, ny, nz] = dims;
    let range = |n: usize, o: isize| -> (usize, usize) {
        let lo = (-o).max(0) as usize;
        let hi = (n as isize - o.max(0)).max(0) as usize;
        (lo.min(n), hi)
    };
    let (x0, x1) = range(nx, offset[0]);
    let (y0, y1) = range(ny, offset[1]);
    let (z0, z1) = range(nz, offset[2]);
    let mut acc = 0.0;
    if x0 >= x1 {
        return acc;
    }
    for z in z0..z1 {
        let zs = (z as isize + offset[2]) as usize;
        for y in y0..y1 {
            let ys = (y as isize + offset[1]) as usize;
            let o = nx * (y + ny * z);
            let s = (nx * (ys + ny * zs)) as isize + offset[0];
            let av = &a[o + x0..o + x1];
            let bv = &b[(s + x0 as isize) as usize..(s + x1 as isize) as usize];
            acc += av.iter().zip(bv).map(|(x, y)| x * y).sum::<f64>();
        }
    }
    acc
}

impl ConvReconstructor {
    /// Hidden layers start uniform in `±1/sqrt(fan_in)`; the last layer starts
    /// at zero so the untrained network is the identity.
    pub fn new(cfg: ReconConfig, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let taps = net.taps();
        let last = net.shapes.len() - 1;
        for s in net.shapes[..last].to_vec() {
            let bound = 1.0 / ((s.c_in * taps) as f64).sqrt();
            for p in &mut net.params[s.w_off..s.b_off + s.c_out] {
                *p = rng.gen_range(-bound..=bound);
            }
        }
        Ok(net)
    }

    pub fn zeros(cfg: ReconConfig) -> Result<Self> {
        cfg.validate()?;
        let taps = cfg.kernel.pow(3);
        let mut shapes = Vec::new();
        let mut off = 0;
        for pair in cfg.channels.windows(2) {
            let (c_in, c_out) = (pair[0], pair[1]);
            shapes.push(ConvShape {
                c_in,
                c_out,
                w_off: off,
                b_off: off + c_out * c_in * taps,
            });
            off += c_out * c_in * taps + c_out;
        }
        Ok(Self {
            cfg,
            shapes,
            params: vec![0.0; off],
            grads: vec![0.0; off],
            cache: None,
        })
    }

    pub fn config(&self) -> &ReconConfig {
        &self.cfg
    }

    fn taps(&self) -> usize {
        self.cfg.kernel.pow(3)
    }

    fn offset(&self, t: usize) -> [isize; 3] {
        let k = self.cfg.kernel;
        let r = (k / 2) as isize;
        [
            (t % k) as isize - r,
            ((t / k) % k) as isize - r,
            (t / (k * k)) as isize - r,
        ]
    }

    pub fn num_layers(&self) -> usize {
        self.shapes.len()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Flat parameters: per layer, weights `[c_out][c_in][kz][ky][kx]` then biases.
    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

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

    /// Weight of layer `l` connecting input channel `ci` to output channel
    /// `co` at tap `t` (x fastest inside the kernel cube).
    pub fn weight_index(&self, l: usize, co: usize, ci: usize, t: usize) -> usize {
        let s = self.shapes[l];
        s.w_off + (co * s.c_in + ci) * self.taps() + t
    }

    pub fn bias_index(&self, l: usize, co: usize) -> usize {
        self.shapes[l].b_off + co
    }

    fn conv(&self, l: usize, dims: [usize; 3], input: &[f64]) -> Vec<f64> {
        let s = self.shapes[l];
        let n = dims[0] * dims[1] * dims[2];
        let taps = self.taps();
        let mut out = vec![0.0; s.c_out * n];
        for co in 0..s.c_out {
            let dst = &mut out[co * n..(co + 1) * n];
            dst.fill(self.params[s.b_off + co]);
            for ci in 0..s.c_in {
                let src = &input[ci * n..(ci + 1) * n];
                for t in 0..taps {
                    let w = self.params[s.w_off + (co * s.c_in + ci) * taps + t];
                    if w != 0.0 {
                        shift_axpy(dims, self.offset(t), w, src, dst);
                    }
                }
            }
        }
        out
    }

    fn run(&self, input: &Volume3D, mut cache: Option<&mut Cache>) -> Volume3D {
        let dims = input.grid().dims();
        let slope = self.cfg.leaky_slope;
        let last = self.shapes.len() - 1;
        let mut h = input.data().to_vec();
        for l in 0..=last {
            let mut z = self.conv(l, dims, &h);
            if let Some(c) = cache.as_deref_mut() {
                c.inputs.push(std::mem::take(&mut h));
                if l < last {
                    c.pre.push(z.clone());
                }
            }
            if l < last {
                z.iter_mut().for_each(|v| {
                    if *v <= 0.0 {
                        *v *= slope
                    }
                });
            }
            h = z;
        }
        for (o, &x) in h.iter_mut().zip(input.data()) {
            *o += x;
        }
        Volume3D::from_vec_unchecked(*input.grid(), h)
    }

    /// Evaluates the network and keeps what [`Self::backward`] needs.
    pub fn forward(&mut self, input: &Volume3D) -> Volume3D {
        let mut cache = Cache {
            grid: *input.grid(),
            inputs: Vec::new(),
            pre: Vec::new(),
        };
        let out = self.run(input, Some(&mut cache));
        self.cache = Some(cache);
        out
    }

    pub fn predict(&self, input: &Volume3D) -> Volume3D {
        self.run(input, None)
    }

    /// Accumulates parameter gradients for upstream gradient `dl_dout` and
    /// returns the gradient with respect to the network input.
    pub fn backward(&mut self, dl_dout: &Volume3D) -> Result<Volume3D> {
        let cache = self.cache.take().ok_or(QsmError::MissingForwardCache)?;
        if let Err(e) = cache.grid.ensure_same(dl_dout.grid()) {
            self.cache = Some(cache);
            return Err(e);
        }
        let dims = cache.grid.dims();
        let n = cache.grid.len();
        let taps = self.taps();
        let slope = self.cfg.leaky_slope;
        let mut delta = dl_dout.data().to_vec();
        for l in (0..self.shapes.len()).rev() {
            let s = self.shapes[l];
            let inp = &cache.inputs[l];
            let mut d_in = vec![0.0; s.c_in * n];
            for co in 0..s.c_out {
                let dz = &delta[co * n..(co + 1) * n];
                self.grads[s.b_off + co] += dz.iter().sum::<f64>();
                for ci in 0..s.c_in {
                    let src = &inp[ci * n..(ci + 1) * n];
                    let dst = &mut d_in[ci * n..(ci + 1) * n];
                    for t in 0..taps {
                        let off = self.offset(t);
                        let wi = s.w_off + (co * s.c_in + ci) * taps + t;
                        self.grads[wi] += shift_dot(dims, off, dz, src);
                        let w = self.params[wi];
                        if w != 0.0 {
                            shift_axpy(dims, [-off[0], -off[1], -off[2]], w, dz, dst);
                        }
                    }
                }
            }
            if l > 0 {
                for (d, &z) in d_in.iter_mut().zip(&cache.pre[l - 1]) {
                    if z <= 0.0 {
                        *d *= slope;
                    }
                }
            }
            delta = d_in;
        }
        for (d, &g) in delta.iter_mut().zip(dl_dout.data()) {
            *d += g;
        }
        let grid = cache.grid;
        self.cache = Some(cache);
        Ok(Volume3D::from_vec_unchecked(grid, delta))
    }
}
