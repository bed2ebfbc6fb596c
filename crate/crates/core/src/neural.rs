//! The dual-stream Q-network and its training math: deterministic Kaiming
//! init, forward pass, hand-derived backprop, weighted Huber loss, AdamW,
//! gradient clipping, Polyak target updates, and checkpoint IO.
//!
//! Everything is generic over the float type: production runs in f32, the
//! finite-difference test suite runs the identical code paths in f64.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2};
use num_traits::Float;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::observe::Observation;

/// Scalar bound for all network math.
pub trait Scalar:
    Float + ndarray::LinalgScalar + std::fmt::Debug + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64_(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64_(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64_(self) -> f64 {
        self
    }
}

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    File(#[from] std::io::Error),
}

/// Architecture and input-scaling knobs.
///
/// Spatial channels are already in `[0, 1]`; vector entries are scaled at
/// encode time (goal offsets by `goal_scale`, waypoints by
/// `waypoint_scale`) to keep dense-layer inputs bounded.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub conv_filters: Vec<usize>,
    pub vector_hidden: usize,
    pub merge_hidden: usize,
    pub input_channels: usize,
    pub fov_side: usize,
    pub vector_len: usize,
    pub n_actions: usize,
    /// Divisor for the goal-offset entries (roughly the map diagonal).
    pub goal_scale: f64,
    /// Divisor for waypoint offsets (twice the FoV radius).
    pub waypoint_scale: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            conv_filters: vec![32, 64, 64],
            vector_hidden: 64,
            merge_hidden: 128,
            input_channels: 4,
            fov_side: 15,
            vector_len: 13,
            n_actions: 5,
            goal_scale: 45.25,
            waypoint_scale: 14.0,
        }
    }
}

impl NetConfig {
    pub fn area(&self) -> usize {
        self.fov_side * self.fov_side
    }

    pub fn conv_out_dim(&self) -> usize {
        self.conv_filters.last().copied().unwrap_or(self.input_channels) * self.area()
    }

    pub fn spatial_len(&self) -> usize {
        self.input_channels * self.area()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    /// 3x3 same-padding convolution; weight is `[out_c, in_c * 9]`.
    Conv,
    /// Fully connected; weight is `[out, in]`.
    Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<F> {
    pub kind: LayerKind,
    pub w: Array2<F>,
    pub b: Array1<F>,
}

/// All weights of the dual-stream network, in fixed layer order:
/// conv stack, vector dense, merge dense, Q head.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<F> {
    pub layers: Vec<Layer<F>>,
    pub cfg: NetConfig,
}

/// Same shapes as [`NetworkParams`]; holds gradients.
pub type Gradients<F> = NetworkParams<F>;

impl<F: Scalar> NetworkParams<F> {
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    kind: l.kind,
                    w: Array2::zeros(l.w.raw_dim()),
                    b: Array1::zeros(l.b.raw_dim()),
                })
                .collect(),
            cfg: self.cfg.clone(),
        }
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    fn conv_count(&self) -> usize {
        self.cfg.conv_filters.len()
    }
}

/// Kaiming-uniform weights `U(-sqrt(6/fan_in), +sqrt(6/fan_in))`, zero
/// biases, deterministic per seed.
pub fn init_network<F: Scalar>(cfg: &NetConfig, seed: u64) -> NetworkParams<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let make = |kind: LayerKind, out: usize, fan_in: usize, rng: &mut ChaCha8Rng| {
        let bound = (6.0 / fan_in as f64).sqrt();
        let w = Array2::from_shape_fn((out, fan_in), |_| {
            F::from_f64(rng.gen_range(-bound..bound))
        });
        Layer {
            kind,
            w,
            b: Array1::zeros(out),
        }
    };
    let mut c_in = cfg.input_channels;
    for &c_out in &cfg.conv_filters {
        layers.push(make(LayerKind::Conv, c_out, c_in * 9, &mut rng));
        c_in = c_out;
    }
    layers.push(make(LayerKind::Dense, cfg.vector_hidden, cfg.vector_len, &mut rng));
    layers.push(make(
        LayerKind::Dense,
        cfg.merge_hidden,
        cfg.conv_out_dim() + cfg.vector_hidden,
        &mut rng,
    ));
    layers.push(make(LayerKind::Dense, cfg.n_actions, cfg.merge_hidden, &mut rng));
    NetworkParams {
        layers,
        cfg: cfg.clone(),
    }
}

/// Scale observations into the network's two input matrices:
/// spatial `[batch, channels * V * V]`, vector `[batch, vector_len]`.
pub fn encode_batch<F: Scalar>(
    obs: &[&Observation],
    cfg: &NetConfig,
) -> Result<(Array2<F>, Array2<F>), NetError> {
    let b = obs.len();
    let mut spatial = Array2::zeros((b, cfg.spatial_len()));
    let mut vector = Array2::zeros((b, cfg.vector_len));
    let gs = F::from_f64(cfg.goal_scale);
    let ws = F::from_f64(cfg.waypoint_scale);
    for (i, o) in obs.iter().enumerate() {
        if o.spatial.len() != cfg.spatial_len() || o.vector.len() != cfg.vector_len {
            return Err(NetError::Shape(format!(
                "observation {}x{} does not match net input {}x{}",
                o.spatial.len(),
                o.vector.len(),
                cfg.spatial_len(),
                cfg.vector_len
            )));
        }
        for (j, &v) in o.spatial.iter().enumerate() {
            spatial[[i, j]] = F::from_f64(v as f64);
        }
        for (j, &v) in o.vector.iter().enumerate() {
            let scale = if j < 2 { gs } else if j == 2 { F::one() } else { ws };
            vector[[i, j]] = F::from_f64(v as f64) / scale;
        }
    }
    Ok((spatial, vector))
}

/// `[batch, C*A]` row-major to channel-major `[C, batch*A]`.
fn to_channel_major<F: Scalar>(x: &Array2<F>, channels: usize, area: usize) -> Array2<F> {
    let batch = x.nrows();
    let mut out = Array2::zeros((channels, batch * area));
    for b in 0..batch {
        for c in 0..channels {
            for p in 0..area {
                out[[c, b * area + p]] = x[[b, c * area + p]];
            }
        }
    }
    out
}

/// Gather 3x3 same-padding patches: `[c_in, B*A]` -> `[c_in*9, B*A]`.
fn im2col<F: Scalar>(x: &Array2<F>, v: usize, batch: usize) -> Array2<F> {
    let c_in = x.nrows();
    let a = v * v;
    let mut cols = Array2::zeros((c_in * 9, batch * a));
    let xs = x.as_slice().expect("row-major");
    for c in 0..c_in {
        let x_row = &xs[c * batch * a..(c + 1) * batch * a];
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = c * 9 + ky * 3 + kx;
                let mut cols_row = cols.row_mut(row);
                let cr = cols_row.as_slice_mut().expect("row-major");
                for b in 0..batch {
                    for oy in 0..v {
                        let iy = oy as isize + ky as isize - 1;
                        if iy < 0 || iy >= v as isize {
                            continue;
                        }
                        let shift = kx as isize - 1;
                        let (ox0, ox1) = if shift < 0 { (1, v) } else if shift > 0 { (0, v - 1) } else { (0, v) };
                        let src = b * a + iy as usize * v;
                        let dst = b * a + oy * v;
                        for ox in ox0..ox1 {
                            cr[dst + ox] = x_row[src + (ox as isize + shift) as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add the transpose of [`im2col`]: `[c_in*9, B*A]` -> `[c_in, B*A]`.
fn col2im<F: Scalar>(d_cols: &Array2<F>, v: usize, batch: usize) -> Array2<F> {
    let c_in = d_cols.nrows() / 9;
    let a = v * v;
    let mut dx = Array2::zeros((c_in, batch * a));
    let ds = d_cols.as_slice().expect("row-major");
    for c in 0..c_in {
        let dx_row = &mut dx.as_slice_mut().expect("row-major")[c * batch * a..(c + 1) * batch * a];
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = c * 9 + ky * 3 + kx;
                let cr = &ds[row * batch * a..(row + 1) * batch * a];
                for b in 0..batch {
                    for oy in 0..v {
                        let iy = oy as isize + ky as isize - 1;
                        if iy < 0 || iy >= v as isize {
                            continue;
                        }
                        let shift = kx as isize - 1;
                        let (ox0, ox1) = if shift < 0 { (1, v) } else if shift > 0 { (0, v - 1) } else { (0, v) };
                        let src = b * a + iy as usize * v;
                        let dst = b * a + oy * v;
                        for ox in ox0..ox1 {
                            dx_row[src + (ox as isize + shift) as usize] =
                                dx_row[src + (ox as isize + shift) as usize] + cr[dst + ox];
                        }
                    }
                }
            }
        }
    }
    dx
}

fn relu_inplace<F: Scalar>(x: &mut Array2<F>) {
    x.mapv_inplace(|v| if v > F::zero() { v } else { F::zero() });
}

fn add_bias_rows<F: Scalar>(x: &mut Array2<F>, b: &Array1<F>) {
    for mut row in x.rows_mut() {
        ndarray::Zip::from(&mut row).and(b).for_each(|v, &bb| *v = *v + bb);
    }
}

/// Cached activations from one forward pass, consumed by [`backward`].
pub struct Cache<F> {
    batch: usize,
    /// conv stack inputs in channel-major layout, per layer
    conv_inputs: Vec<Array2<F>>,
    /// post-ReLU conv outputs, per layer
    conv_outputs: Vec<Array2<F>>,
    vector_in: Array2<F>,
    vec_hidden: Array2<F>,
    concat: Array2<F>,
    merge_hidden: Array2<F>,
}

/// Q-values for a batch; `spatial` is `[B, C*A]`, `vector` `[B, vector_len]`.
pub fn forward<F: Scalar>(
    params: &NetworkParams<F>,
    spatial: &Array2<F>,
    vector: &Array2<F>,
) -> Result<(Array2<F>, Cache<F>), NetError> {
    let cfg = &params.cfg;
    let batch = spatial.nrows();
    if spatial.ncols() != cfg.spatial_len() || vector.ncols() != cfg.vector_len || vector.nrows() != batch {
        return Err(NetError::Shape(format!(
            "inputs {}x{} / {}x{} vs expected {}x{} / {}x{}",
            spatial.nrows(),
            spatial.ncols(),
            vector.nrows(),
            vector.ncols(),
            batch,
            cfg.spatial_len(),
            batch,
            cfg.vector_len
        )));
    }
    let v = cfg.fov_side;
    let a = cfg.area();

    let mut conv_inputs = Vec::new();
    let mut conv_outputs = Vec::new();
    let mut x = to_channel_major(spatial, cfg.input_channels, a);
    for li in 0..params.conv_count() {
        let layer = &params.layers[li];
        conv_inputs.push(x.clone());
        let cols = im2col(&x, v, batch);
        let mut y = Array2::zeros((layer.w.nrows(), batch * a));
        general_mat_mul(F::one(), &layer.w, &cols, F::zero(), &mut y);
        for (mut row, &bias) in y.rows_mut().into_iter().zip(layer.b.iter()) {
            row.mapv_inplace(|t| t + bias);
        }
        relu_inplace(&mut y);
        conv_outputs.push(y.clone());
        x = y;
    }

    // flatten channel-major conv output to [B, c_last * A]
    let c_last = x.nrows();
    let mut conv_flat = Array2::zeros((batch, c_last * a));
    for b in 0..batch {
        for c in 0..c_last {
            for p in 0..a {
                conv_flat[[b, c * a + p]] = x[[c, b * a + p]];
            }
        }
    }

    let vec_layer = &params.layers[params.conv_count()];
    let mut vec_hidden = vector.dot(&vec_layer.w.t());
    add_bias_rows(&mut vec_hidden, &vec_layer.b);
    relu_inplace(&mut vec_hidden);

    let mut concat = Array2::zeros((batch, c_last * a + vec_hidden.ncols()));
    concat.slice_mut(ndarray::s![.., ..c_last * a]).assign(&conv_flat);
    concat
        .slice_mut(ndarray::s![.., c_last * a..])
        .assign(&vec_hidden);

    let merge_layer = &params.layers[params.conv_count() + 1];
    let mut merge_hidden = concat.dot(&merge_layer.w.t());
    add_bias_rows(&mut merge_hidden, &merge_layer.b);
    relu_inplace(&mut merge_hidden);

    let head = &params.layers[params.conv_count() + 2];
    let mut q = merge_hidden.dot(&head.w.t());
    add_bias_rows(&mut q, &head.b);

    Ok((
        q,
        Cache {
            batch,
            conv_inputs,
            conv_outputs,
            vector_in: vector.clone(),
            vec_hidden,
            concat,
            merge_hidden,
        },
    ))
}

/// Q-values only; convenience for greedy actors.
pub fn forward_q<F: Scalar>(
    params: &NetworkParams<F>,
    spatial: &Array2<F>,
    vector: &Array2<F>,
) -> Result<Array2<F>, NetError> {
    forward(params, spatial, vector).map(|(q, _)| q)
}

fn relu_mask_mul<F: Scalar>(grad: &mut Array2<F>, act: &Array2<F>) {
    ndarray::Zip::from(grad).and(act).for_each(|g, &a| {
        if a <= F::zero() {
            *g = F::zero();
        }
    });
}

/// Analytic gradients of a scalar loss with upstream `d_q = dL/dQ`
/// (`[B, n_actions]`), given the forward cache.
pub fn backward<F: Scalar>(
    params: &NetworkParams<F>,
    cache: &Cache<F>,
    d_q: &Array2<F>,
) -> Gradients<F> {
    let cfg = &params.cfg;
    let v = cfg.fov_side;
    let a = cfg.area();
    let batch = cache.batch;
    let nconv = params.conv_count();
    let mut grads = params.zeros_like();

    // Q head
    let head = &params.layers[nconv + 2];
    grads.layers[nconv + 2].w = d_q.t().dot(&cache.merge_hidden);
    grads.layers[nconv + 2].b = d_q.sum_axis(ndarray::Axis(0));
    let mut d_merge = d_q.dot(&head.w);
    relu_mask_mul(&mut d_merge, &cache.merge_hidden);

    // merge dense
    let merge_layer = &params.layers[nconv + 1];
    grads.layers[nconv + 1].w = d_merge.t().dot(&cache.concat);
    grads.layers[nconv + 1].b = d_merge.sum_axis(ndarray::Axis(0));
    let d_concat = d_merge.dot(&merge_layer.w);

    let c_last = cfg.conv_filters.last().copied().unwrap_or(cfg.input_channels);
    let mut d_vec_hidden = d_concat.slice(ndarray::s![.., c_last * a..]).to_owned();
    relu_mask_mul(&mut d_vec_hidden, &cache.vec_hidden);
    grads.layers[nconv].w = d_vec_hidden.t().dot(&cache.vector_in);
    grads.layers[nconv].b = d_vec_hidden.sum_axis(ndarray::Axis(0));

    // conv flat slice back to channel-major [c_last, B*A]
    let d_conv_flat = d_concat.slice(ndarray::s![.., ..c_last * a]);
    let mut d_y = Array2::zeros((c_last, batch * a));
    for b in 0..batch {
        for c in 0..c_last {
            for p in 0..a {
                d_y[[c, b * a + p]] = d_conv_flat[[b, c * a + p]];
            }
        }
    }

    for li in (0..nconv).rev() {
        relu_mask_mul(&mut d_y, &cache.conv_outputs[li]);
        let cols = im2col(&cache.conv_inputs[li], v, batch);
        let layer = &params.layers[li];
        let mut dw = Array2::zeros(layer.w.raw_dim());
        general_mat_mul(F::one(), &d_y, &cols.t(), F::zero(), &mut dw);
        grads.layers[li].w = dw;
        grads.layers[li].b = d_y.sum_axis(ndarray::Axis(1));
        if li > 0 {
            let mut d_cols = Array2::zeros(cols.raw_dim());
            general_mat_mul(F::one(), &layer.w.t().to_owned(), &d_y, F::zero(), &mut d_cols);
            d_y = col2im(&d_cols, v, batch);
        }
    }
    grads
}

/// Weighted Huber loss over per-sample Q predictions:
/// `L = (1/M) sum w_i * l_delta(q_i - y_i)`, gradient
/// `(w_i/M) * clip(q_i - y_i, -delta, delta)`.
pub fn huber_loss_and_grad<F: Scalar>(
    q_pred: &[F],
    targets: &[F],
    is_weights: &[F],
    delta: F,
) -> (F, Vec<F>) {
    let m = F::from_f64(q_pred.len() as f64);
    let mut loss = F::zero();
    let mut grad = Vec::with_capacity(q_pred.len());
    for ((&q, &y), &w) in q_pred.iter().zip(targets).zip(is_weights) {
        let e = q - y;
        let ae = e.abs();
        let l = if ae <= delta {
            F::from_f64(0.5) * e * e
        } else {
            delta * (ae - F::from_f64(0.5) * delta)
        };
        loss = loss + w * l / m;
        grad.push(w / m * e.max(-delta).min(delta));
    }
    (loss, grad)
}

/// Scale all gradients so the global L2 norm is at most `max_norm`.
pub fn clip_gradients<F: Scalar>(grads: &mut Gradients<F>, max_norm: F) -> F {
    let mut sq = F::zero();
    for l in &grads.layers {
        sq = sq + l.w.iter().fold(F::zero(), |s, &g| s + g * g);
        sq = sq + l.b.iter().fold(F::zero(), |s, &g| s + g * g);
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > F::zero() {
        let scale = max_norm / norm;
        for l in &mut grads.layers {
            l.w.mapv_inplace(|g| g * scale);
            l.b.mapv_inplace(|g| g * scale);
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moments per parameter tensor plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState<F> {
    pub m: NetworkParams<F>,
    pub v: NetworkParams<F>,
    pub step: u64,
    pub cfg: AdamWConfig,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new(params: &NetworkParams<F>, cfg: AdamWConfig) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            cfg,
        }
    }
}

/// One decoupled-weight-decay Adam step, in place.
pub fn adamw_step<F: Scalar>(
    params: &mut NetworkParams<F>,
    grads: &Gradients<F>,
    opt: &mut OptimizerState<F>,
) {
    opt.step += 1;
    let b1 = F::from_f64(opt.cfg.beta1);
    let b2 = F::from_f64(opt.cfg.beta2);
    let lr = F::from_f64(opt.cfg.lr);
    let wd = F::from_f64(opt.cfg.weight_decay);
    let eps = F::from_f64(opt.cfg.eps);
    let bc1 = F::one() - F::from_f64(opt.cfg.beta1.powi(opt.step as i32));
    let bc2 = F::one() - F::from_f64(opt.cfg.beta2.powi(opt.step as i32));
    let one = F::one();
    for ((pl, gl), (ml, vl)) in params
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(opt.m.layers.iter_mut().zip(opt.v.layers.iter_mut()))
    {
        let update = |p: &mut F, g: F, m: &mut F, v: &mut F, decay: bool| {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            let mut step = lr * m_hat / (v_hat.sqrt() + eps);
            if decay {
                step = step + lr * wd * *p;
            }
            *p = *p - step;
        };
        for ((p, &g), (m, v)) in pl.w.iter_mut().zip(gl.w.iter()).zip(ml.w.iter_mut().zip(vl.w.iter_mut())) {
            update(p, g, m, v, true);
        }
        // biases are conventionally exempt from weight decay
        for ((p, &g), (m, v)) in pl.b.iter_mut().zip(gl.b.iter()).zip(ml.b.iter_mut().zip(vl.b.iter_mut())) {
            update(p, g, m, v, false);
        }
    }
}

/// Soft target update `target = tau * online + (1 - tau) * target`.
pub fn polyak_update<F: Scalar>(target: &mut NetworkParams<F>, online: &NetworkParams<F>, tau: F) {
    let keep = F::one() - tau;
    for (tl, ol) in target.layers.iter_mut().zip(&online.layers) {
        ndarray::Zip::from(&mut tl.w).and(&ol.w).for_each(|t, &o| *t = tau * o + keep * *t);
        ndarray::Zip::from(&mut tl.b).and(&ol.b).for_each(|t, &o| *t = tau * o + keep * *t);
    }
}

// --- checkpoint format -----------------------------------------------------
//
// Little-endian binary: magic "NMQ1", u32 format version, u64 global step,
// u32 JSON-config length + bytes, then each tensor as u32 rank, u32 dims,
// f32 payload; network weights, then target weights, then optimizer m/v
// and the optimizer step + hyperparameters. Round-trips bit-exactly.

const CKPT_MAGIC: &[u8; 4] = b"NMQ1";
const CKPT_VERSION: u32 = 1;

pub struct Checkpoint {
    pub params: NetworkParams<f32>,
    pub target: NetworkParams<f32>,
    pub opt: OptimizerState<f32>,
    pub global_step: u64,
}

fn write_tensor(out: &mut Vec<u8>, dims: &[usize], data: &[f32]) {
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn write_params(out: &mut Vec<u8>, p: &NetworkParams<f32>) {
    for l in &p.layers {
        write_tensor(out, &[l.w.nrows(), l.w.ncols()], l.w.as_slice().unwrap());
        write_tensor(out, &[l.b.len()], l.b.as_slice().unwrap());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NetError> {
        if self.pos + n > self.buf.len() {
            return Err(NetError::Checkpoint("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, NetError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, NetError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<(Vec<usize>, Vec<f32>), NetError> {
        let rank = self.u32()? as usize;
        if rank > 2 {
            return Err(NetError::Checkpoint(format!("bad tensor rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.u32()? as usize);
        }
        let n: usize = dims.iter().product();
        if n > 1 << 28 {
            return Err(NetError::Checkpoint(format!("tensor too large: {n}")));
        }
        let raw = self.take(4 * n)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((dims, data))
    }
}

fn read_params(r: &mut Reader, cfg: &NetConfig) -> Result<NetworkParams<f32>, NetError> {
    let template = init_network::<f32>(cfg, 0);
    let mut layers = Vec::with_capacity(template.layers.len());
    for tl in &template.layers {
        let (wd, wv) = r.tensor()?;
        let (bd, bv) = r.tensor()?;
        if wd != [tl.w.nrows(), tl.w.ncols()] || bd != [tl.b.len()] {
            return Err(NetError::Checkpoint(format!(
                "tensor shape {wd:?}/{bd:?} does not match config"
            )));
        }
        layers.push(Layer {
            kind: tl.kind,
            w: Array2::from_shape_vec((wd[0], wd[1]), wv).unwrap(),
            b: Array1::from_vec(bv),
        });
    }
    Ok(NetworkParams {
        layers,
        cfg: cfg.clone(),
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &std::path::Path) -> Result<(), NetError> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&ck.global_step.to_le_bytes());
    let cfg_json = serde_json::to_vec(&ck.params.cfg).expect("config serializes");
    out.extend_from_slice(&(cfg_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg_json);
    write_params(&mut out, &ck.params);
    write_params(&mut out, &ck.target);
    write_params(&mut out, &ck.opt.m);
    write_params(&mut out, &ck.opt.v);
    out.extend_from_slice(&ck.opt.step.to_le_bytes());
    let oc = &ck.opt.cfg;
    for v in [oc.lr, oc.weight_decay, oc.beta1, oc.beta2, oc.eps] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<Checkpoint, NetError> {
    let buf = std::fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(4)? != CKPT_MAGIC {
        return Err(NetError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(NetError::Checkpoint(format!("unsupported version {version}")));
    }
    let global_step = r.u64()?;
    let cfg_len = r.u32()? as usize;
    let cfg: NetConfig = serde_json::from_slice(r.take(cfg_len)?)
        .map_err(|e| NetError::Checkpoint(e.to_string()))?;
    let params = read_params(&mut r, &cfg)?;
    let target = read_params(&mut r, &cfg)?;
    let m = read_params(&mut r, &cfg)?;
    let v = read_params(&mut r, &cfg)?;
    let step = r.u64()?;
    let opt_cfg = AdamWConfig {
        lr: r.f64()?,
        weight_decay: r.f64()?,
        beta1: r.f64()?,
        beta2: r.f64()?,
        eps: r.f64()?,
    };
    Ok(Checkpoint {
        params,
        target,
        opt: OptimizerState {
            m,
            v,
            step,
            cfg: opt_cfg,
        },
        global_step,
    })
}
