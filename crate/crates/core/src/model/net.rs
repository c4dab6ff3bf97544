//! The reaction network on a flat parameter vector.
//!
//! Two affine encoders (facial units, head motion) are concatenated and fed
//! through blocks of affine, batch-norm, leaky rectifier and inverted
//! dropout. A three-class head reads the last block; an auxiliary head reads
//! the first block and predicts the window's annotations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{WindowConfig, FAU_DIM, HEAD_DIM};
use crate::observer::N_CHANNELS;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LEAKY_SLOPE: f64 = 0.01;
pub const DEFAULT_DROPOUT: f64 = 0.6314;
pub const N_CLASSES: usize = 3;
pub const POSITIVE_CLASS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub fau_in: usize,
    pub head_in: usize,
    pub fau_enc: usize,
    pub head_enc: usize,
    pub blocks: Vec<usize>,
    pub aux_out: usize,
    pub dropout: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Self::for_window(&WindowConfig::default(), vec![128, 128, 64, 8], DEFAULT_DROPOUT)
    }
}

impl Architecture {
    pub fn for_window(w: &WindowConfig, blocks: Vec<usize>, dropout: f64) -> Self {
        Self {
            fau_in: FAU_DIM * w.len(),
            head_in: HEAD_DIM * w.len(),
            fau_enc: 64,
            head_enc: 32,
            blocks,
            aux_out: N_CHANNELS * w.len(),
            dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() || self.blocks.contains(&0) {
            return Err(Error::InvalidArgument("trunk needs at least one nonempty block".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Offsets of one affine map inside the parameter vector; weights are
/// stored row-major as `[out][in]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Affine {
    pub w: usize,
    pub b: usize,
    pub inp: usize,
    pub out: usize,
}

impl Affine {
    fn alloc(next: &mut usize, inp: usize, out: usize) -> Self {
        let w = *next;
        let b = w + inp * out;
        *next = b + out;
        Self { w, b, inp, out }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockLayout {
    pub affine: Affine,
    pub gamma: usize,
    pub beta: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub fau: Affine,
    pub head: Affine,
    pub blocks: Vec<BlockLayout>,
    pub class: Affine,
    pub aux: Affine,
    pub len: usize,
}

impl Layout {
    pub fn new(arch: &Architecture) -> Self {
        let mut next = 0;
        let fau = Affine::alloc(&mut next, arch.fau_in, arch.fau_enc);
        let head = Affine::alloc(&mut next, arch.head_in, arch.head_enc);
        let mut inp = arch.fau_enc + arch.head_enc;
        let mut blocks = Vec::new();
        for &w in &arch.blocks {
            let affine = Affine::alloc(&mut next, inp, w);
            let gamma = next;
            let beta = gamma + w;
            next = beta + w;
            blocks.push(BlockLayout { affine, gamma, beta });
            inp = w;
        }
        let class = Affine::alloc(&mut next, inp, N_CLASSES);
        let aux = Affine::alloc(&mut next, arch.blocks[0], arch.aux_out);
        Self { fau, head, blocks, class, aux, len: next }
    }
}

/// Batch-norm running statistics, one pair of vectors per block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub mean: Vec<Vec<f64>>,
    pub var: Vec<Vec<f64>>,
}

impl BnStats {
    pub fn new(arch: &Architecture) -> Self {
        Self { mean: arch.blocks.iter().map(|w| vec![0.0; *w]).collect(), var: arch.blocks.iter().map(|w| vec![1.0; *w]).collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ce: f64,
    pub binary: f64,
    pub aux: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { ce: 1.0, binary: 2.0, aux: 1.0 }
    }
}

/// Row-major inputs and targets of a minibatch.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub n: usize,
    pub fau: &'a [f64],
    pub head: &'a [f64],
    pub labels: &'a [usize],
    pub aux: &'a [f64],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub z: [f64; N_CLASSES],
    pub probs: [f64; N_CLASSES],
    pub z_bin: [f64; 2],
    pub positivity: f64,
    pub o: Vec<f64>,
}

impl Prediction {
    pub fn from_logits(z: [f64; N_CLASSES], o: Vec<f64>) -> Self {
        let probs = softmax3(&z);
        let z_bin = binary_logits(&z);
        let pb = softmax2(&z_bin);
        Self { z, probs, z_bin, positivity: pb[1], o }
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for c in 1..N_CLASSES {
            if self.probs[c] > self.probs[best] {
                best = c;
            }
        }
        best
    }
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax3(z: &[f64; 3]) -> [f64; 3] {
    let l = logsumexp(z);
    z.map(|v| (v - l).exp())
}

fn softmax2(z: &[f64; 2]) -> [f64; 2] {
    let l = logsumexp(z);
    z.map(|v| (v - l).exp())
}

/// Negative logit marginalizes the two negative classes.
pub fn binary_logits(z: &[f64; 3]) -> [f64; 2] {
    [logsumexp(&z[..2]), z[POSITIVE_CLASS]]
}

/// The three loss terms of one sample: class cross-entropy, binary
/// cross-entropy and the Euclidean norm of the auxiliary residual.
pub fn loss_terms(z: &[f64; 3], o: &[f64], label: usize, aux: &[f64]) -> [f64; 3] {
    let ce = logsumexp(z) - z[label];
    let zb = binary_logits(z);
    let yb = usize::from(label == POSITIVE_CLASS);
    let bce = logsumexp(&zb) - zb[yb];
    let norm = o.iter().zip(aux).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    [ce, bce, norm]
}

pub fn weighted_loss(terms: &[f64; 3], w: &LossWeights) -> f64 {
    w.ce * terms[0] + w.binary * terms[1] + w.aux * terms[2]
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in chunks * 4..a.len() {
        s += a[j] * b[j];
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `y[n][out] = x[n][in] . W[out][in] + b`.
fn affine_forward(theta: &[f64], a: &Affine, x: &[f64], n: usize) -> Vec<f64> {
    let w = &theta[a.w..a.w + a.inp * a.out];
    let b = &theta[a.b..a.b + a.out];
    let mut y = vec![0.0; n * a.out];
    for r in 0..n {
        let xr = &x[r * a.inp..(r + 1) * a.inp];
        let yr = &mut y[r * a.out..(r + 1) * a.out];
        for o in 0..a.out {
            yr[o] = dot(xr, &w[o * a.inp..(o + 1) * a.inp]) + b[o];
        }
    }
    y
}

/// Accumulates parameter gradients and optionally returns the input gradient.
fn affine_backward(theta: &[f64], a: &Affine, x: &[f64], dy: &[f64], n: usize, grad: &mut [f64], want_dx: bool) -> Option<Vec<f64>> {
    {
        let (gw, gb) = grad[a.w..a.b + a.out].split_at_mut(a.inp * a.out);
        for r in 0..n {
            let xr = &x[r * a.inp..(r + 1) * a.inp];
            let dyr = &dy[r * a.out..(r + 1) * a.out];
            for o in 0..a.out {
                if dyr[o] != 0.0 {
                    axpy(dyr[o], xr, &mut gw[o * a.inp..(o + 1) * a.inp]);
                }
                gb[o] += dyr[o];
            }
        }
    }
    if !want_dx {
        return None;
    }
    let w = &theta[a.w..a.w + a.inp * a.out];
    let mut dx = vec![0.0; n * a.inp];
    for r in 0..n {
        let dyr = &dy[r * a.out..(r + 1) * a.out];
        let dxr = &mut dx[r * a.inp..(r + 1) * a.inp];
        for o in 0..a.out {
            if dyr[o] != 0.0 {
                axpy(dyr[o], &w[o * a.inp..(o + 1) * a.inp], dxr);
            }
        }
    }
    Some(dx)
}

#[derive(Debug, Clone)]
struct BlockCache {
    input: Vec<f64>,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    /// Batch-norm output, the rectifier's input.
    v: Vec<f64>,
    /// Inverted-dropout multipliers (0 or 1/(1-p)); all ones in eval mode.
    mask: Vec<f64>,
    out: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var_unbiased: Vec<f64>,
}

/// Intermediate values of a forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    n: usize,
    blocks: Vec<BlockCache>,
    pub z: Vec<f64>,
    pub o: Vec<f64>,
}

impl Trace {
    /// Rectifier inputs of every block, used to detect kink crossings.
    pub fn preactivations(&self) -> impl Iterator<Item = f64> + '_ {
        self.blocks.iter().flat_map(|b| b.v.iter().copied())
    }

    pub fn block_output(&self, i: usize) -> &[f64] {
        &self.blocks[i].out
    }

    pub fn predictions(&self, aux_out: usize) -> Vec<Prediction> {
        (0..self.n)
            .map(|r| {
                let z = [self.z[r * 3], self.z[r * 3 + 1], self.z[r * 3 + 2]];
                Prediction::from_logits(z, self.o[r * aux_out..(r + 1) * aux_out].to_vec())
            })
            .collect()
    }
}

/// Train mode uses batch statistics and dropout; eval mode uses the running
/// statistics and no dropout.
#[derive(Debug, Clone, Copy)]
pub enum Mode<'a> {
    Train { dropout_seed: u64 },
    Eval(&'a BnStats),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Net {
    pub arch: Architecture,
    pub layout: Layout,
}

impl Net {
    pub fn new(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        Ok(Self { arch, layout })
    }

    pub fn n_params(&self) -> usize {
        self.layout.len
    }

    /// Affine weights and biases uniform in `+-1/sqrt(fan_in)`; batch-norm
    /// scale 1 and shift 0.
    pub fn init(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = vec![0.0; self.layout.len];
        let l = &self.layout;
        let mut affines = vec![l.fau, l.head];
        affines.extend(l.blocks.iter().map(|b| b.affine));
        affines.push(l.class);
        affines.push(l.aux);
        for a in affines {
            let bound = 1.0 / (a.inp as f64).sqrt();
            for v in &mut theta[a.w..a.b + a.out] {
                *v = rng.random_range(-bound..bound);
            }
        }
        for b in &l.blocks {
            theta[b.gamma..b.gamma + b.affine.out].fill(1.0);
        }
        theta
    }

    pub fn check_batch(&self, batch: &Batch) -> Result<()> {
        let n = batch.n;
        if batch.fau.len() != n * self.arch.fau_in || batch.head.len() != n * self.arch.head_in {
            return Err(Error::Shape(format!(
                "inputs of width {}/{} expected, got {}/{}",
                self.arch.fau_in,
                self.arch.head_in,
                batch.fau.len() / n.max(1),
                batch.head.len() / n.max(1)
            )));
        }
        if batch.labels.len() != n || batch.aux.len() != n * self.arch.aux_out {
            return Err(Error::Shape("targets do not match the batch".into()));
        }
        Ok(())
    }

    pub fn forward(&self, theta: &[f64], fau: &[f64], head: &[f64], n: usize, mode: Mode) -> Trace {
        let l = &self.layout;
        let ef = affine_forward(theta, &l.fau, fau, n);
        let eh = affine_forward(theta, &l.head, head, n);
        let cat_w = l.fau.out + l.head.out;
        let mut x = vec![0.0; n * cat_w];
        for r in 0..n {
            x[r * cat_w..r * cat_w + l.fau.out].copy_from_slice(&ef[r * l.fau.out..(r + 1) * l.fau.out]);
            x[r * cat_w + l.fau.out..(r + 1) * cat_w].copy_from_slice(&eh[r * l.head.out..(r + 1) * l.head.out]);
        }
        let mut rng = match mode {
            Mode::Train { dropout_seed } => Some(ChaCha8Rng::seed_from_u64(dropout_seed)),
            Mode::Eval(_) => None,
        };
        let keep = 1.0 - self.arch.dropout;
        let mut blocks = Vec::with_capacity(l.blocks.len());
        for (bi, b) in l.blocks.iter().enumerate() {
            let w = b.affine.out;
            let u = affine_forward(theta, &b.affine, &x, n);
            let (mean, var_biased, var_unbiased) = match mode {
                Mode::Train { .. } => {
                    let mut mean = vec![0.0; w];
                    for r in 0..n {
                        axpy(1.0 / n as f64, &u[r * w..(r + 1) * w], &mut mean);
                    }
                    let mut var = vec![0.0; w];
                    for r in 0..n {
                        for j in 0..w {
                            let d = u[r * w + j] - mean[j];
                            var[j] += d * d;
                        }
                    }
                    let biased: Vec<f64> = var.iter().map(|v| v / n as f64).collect();
                    let unbiased: Vec<f64> = var.iter().map(|v| if n > 1 { v / (n - 1) as f64 } else { 0.0 }).collect();
                    (mean, biased, unbiased)
                }
                Mode::Eval(stats) => (stats.mean[bi].clone(), stats.var[bi].clone(), Vec::new()),
            };
            let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let gamma = &theta[b.gamma..b.gamma + w];
            let beta = &theta[b.beta..b.beta + w];
            let mut xhat = vec![0.0; n * w];
            let mut v = vec![0.0; n * w];
            let mut mask = vec![1.0; n * w];
            let mut out = vec![0.0; n * w];
            for r in 0..n {
                for j in 0..w {
                    let i = r * w + j;
                    xhat[i] = (u[i] - mean[j]) * inv_std[j];
                    v[i] = gamma[j] * xhat[i] + beta[j];
                    let act = if v[i] > 0.0 { v[i] } else { LEAKY_SLOPE * v[i] };
                    if let Some(rng) = rng.as_mut() {
                        if self.arch.dropout > 0.0 {
                            mask[i] = if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 };
                        }
                    }
                    out[i] = act * mask[i];
                }
            }
            let next = out.clone();
            blocks.push(BlockCache {
                input: std::mem::replace(&mut x, next),
                xhat,
                inv_std,
                v,
                mask,
                out,
                batch_mean: mean,
                batch_var_unbiased: var_unbiased,
            });
        }
        let z = affine_forward(theta, &l.class, &x, n);
        let o = affine_forward(theta, &l.aux, &blocks[0].out, n);
        Trace { n, blocks, z, o }
    }

    /// Mean batch loss and its three mean terms.
    pub fn batch_loss(&self, trace: &Trace, batch: &Batch, w: &LossWeights) -> (f64, [f64; 3]) {
        let a = self.arch.aux_out;
        let mut terms = [0.0; 3];
        for r in 0..batch.n {
            let z = [trace.z[r * 3], trace.z[r * 3 + 1], trace.z[r * 3 + 2]];
            let t = loss_terms(&z, &trace.o[r * a..(r + 1) * a], batch.labels[r], &batch.aux[r * a..(r + 1) * a]);
            for k in 0..3 {
                terms[k] += t[k] / batch.n as f64;
            }
        }
        (weighted_loss(&terms, w), terms)
    }

    /// Mean batch loss and its exact gradient. In train mode the dropout
    /// masks are drawn from `dropout_seed`, so repeated calls with the same
    /// seed evaluate the same function.
    pub fn loss_grad(&self, theta: &[f64], batch: &Batch, w: &LossWeights, mode: Mode) -> (f64, Vec<f64>, Trace) {
        let n = batch.n;
        let trace = self.forward(theta, batch.fau, batch.head, n, mode);
        let (loss, _) = self.batch_loss(&trace, batch, w);
        let mut grad = vec![0.0; theta.len()];
        let l = &self.layout;
        let a = self.arch.aux_out;
        let inv_n = 1.0 / n as f64;

        let mut dz = vec![0.0; n * 3];
        let mut d_o = vec![0.0; n * a];
        for r in 0..n {
            let z = [trace.z[r * 3], trace.z[r * 3 + 1], trace.z[r * 3 + 2]];
            let y = batch.labels[r];
            let p = softmax3(&z);
            let zb = binary_logits(&z);
            let pb = softmax2(&zb);
            let yb = usize::from(y == POSITIVE_CLASS);
            let dneg = pb[0] - f64::from(yb == 0);
            let dpos = pb[1] - f64::from(yb == 1);
            let pn = softmax2(&[z[0], z[1]]);
            for c in 0..3 {
                let mut g = w.ce * (p[c] - f64::from(c == y));
                g += w.binary * if c < 2 { dneg * pn[c] } else { dpos };
                dz[r * 3 + c] = g * inv_n;
            }
            let o = &trace.o[r * a..(r + 1) * a];
            let t = &batch.aux[r * a..(r + 1) * a];
            let norm = o.iter().zip(t).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            if norm > 0.0 && w.aux != 0.0 {
                for k in 0..a {
                    d_o[r * a + k] = w.aux * (o[k] - t[k]) / norm * inv_n;
                }
            }
        }

        let last = trace.blocks.len() - 1;
        let mut dx = affine_backward(theta, &l.class, &trace.blocks[last].out, &dz, n, &mut grad, true).expect("requested");
        let d_aux = affine_backward(theta, &l.aux, &trace.blocks[0].out, &d_o, n, &mut grad, true).expect("requested");
        for bi in (0..trace.blocks.len()).rev() {
            if bi == 0 {
                for (d, e) in dx.iter_mut().zip(&d_aux) {
                    *d += e;
                }
            }
            let b = &l.blocks[bi];
            let c = &trace.blocks[bi];
            let wdt = b.affine.out;
            let gamma = &theta[b.gamma..b.gamma + wdt];
            let mut dxhat = vec![0.0; n * wdt];
            for i in 0..n * wdt {
                let dact = dx[i] * c.mask[i];
                let dv = if c.v[i] > 0.0 { dact } else { LEAKY_SLOPE * dact };
                let j = i % wdt;
                grad[b.gamma + j] += dv * c.xhat[i];
                grad[b.beta + j] += dv;
                dxhat[i] = dv * gamma[j];
            }
            let du = match mode {
                Mode::Train { .. } => {
                    let mut sum = vec![0.0; wdt];
                    let mut sum_x = vec![0.0; wdt];
                    for r in 0..n {
                        for j in 0..wdt {
                            sum[j] += dxhat[r * wdt + j];
                            sum_x[j] += dxhat[r * wdt + j] * c.xhat[r * wdt + j];
                        }
                    }
                    let mut du = vec![0.0; n * wdt];
                    for r in 0..n {
                        for j in 0..wdt {
                            let i = r * wdt + j;
                            du[i] = c.inv_std[j] * inv_n * (n as f64 * dxhat[i] - sum[j] - c.xhat[i] * sum_x[j]);
                        }
                    }
                    du
                }
                Mode::Eval(_) => dxhat.iter().enumerate().map(|(i, d)| d * c.inv_std[i % wdt]).collect(),
            };
            dx = affine_backward(theta, &b.affine, &c.input, &du, n, &mut grad, true).expect("requested");
        }
        let cat_w = l.fau.out + l.head.out;
        let mut dfau = vec![0.0; n * l.fau.out];
        let mut dhead = vec![0.0; n * l.head.out];
        for r in 0..n {
            dfau[r * l.fau.out..(r + 1) * l.fau.out].copy_from_slice(&dx[r * cat_w..r * cat_w + l.fau.out]);
            dhead[r * l.head.out..(r + 1) * l.head.out].copy_from_slice(&dx[r * cat_w + l.fau.out..(r + 1) * cat_w]);
        }
        affine_backward(theta, &l.fau, batch.fau, &dfau, n, &mut grad, false);
        affine_backward(theta, &l.head, batch.head, &dhead, n, &mut grad, false);
        (loss, grad, trace)
    }

    /// Folds a train-mode trace's batch statistics into the running ones.
    pub fn update_running(&self, stats: &mut BnStats, trace: &Trace) {
        for (bi, c) in trace.blocks.iter().enumerate() {
            for j in 0..c.batch_mean.len() {
                stats.mean[bi][j] = (1.0 - BN_MOMENTUM) * stats.mean[bi][j] + BN_MOMENTUM * c.batch_mean[j];
                stats.var[bi][j] = (1.0 - BN_MOMENTUM) * stats.var[bi][j] + BN_MOMENTUM * c.batch_var_unbiased[j];
            }
        }
    }
}

/// Inverted dropout applied to a vector.
pub fn dropout<R: Rng>(x: &[f64], p: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 - p;
    x.iter().map(|v| if rng.random::<f64>() < keep { v / keep } else { 0.0 }).collect()
}
