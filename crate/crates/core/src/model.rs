//! Reference encoder: a small convolutional network with hand-written
//! backward pass, the softmax posterior, and the EMA shadow.
//!
//! Activations flow through the network in a channel-major `[C, N, H, W]`
//! layout so each convolution is a single im2col GEMM over the whole batch.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{stream, Tag};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    SmallCnn,
    WideResnet28x2,
    WideResnet28x8,
    Resnet50,
}

/// Architecture descriptor, including the fixed input standardization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub kind: ArchKind,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub conv_channels: Vec<usize>,
    pub classes: usize,
    pub input_mean: Vec<f32>,
    pub input_std: Vec<f32>,
}

impl ArchSpec {
    pub fn small_cnn(
        in_channels: usize,
        height: usize,
        width: usize,
        conv_channels: Vec<usize>,
        classes: usize,
    ) -> Self {
        Self {
            kind: ArchKind::SmallCnn,
            in_channels,
            height,
            width,
            conv_channels,
            classes,
            input_mean: vec![0.0; in_channels],
            input_std: vec![1.0; in_channels],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind != ArchKind::SmallCnn {
            return Err(Error::Unsupported(format!(
                "architecture {:?} is declared but not built at desk scale",
                self.kind
            )));
        }
        if self.in_channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::config("input dimensions must be positive"));
        }
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return Err(Error::config("conv_channels must be a non-empty list of positive widths"));
        }
        if self.classes < 2 {
            return Err(Error::config("at least two classes are required"));
        }
        if self.input_mean.len() != self.in_channels || self.input_std.len() != self.in_channels {
            return Err(Error::config("input statistics must have one entry per channel"));
        }
        if self.input_std.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::config("input std entries must be positive"));
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        *self.conv_channels.last().expect("validated")
    }

    /// Spatial size entering conv block `l` for every block, plus the final
    /// size after the last pool.
    fn spatial_sizes(&self) -> Vec<(usize, usize)> {
        let mut sizes = vec![(self.height, self.width)];
        let (mut h, mut w) = (self.height, self.width);
        for _ in &self.conv_channels {
            if h >= 2 && w >= 2 {
                h /= 2;
                w /= 2;
            }
            sizes.push((h, w));
        }
        sizes
    }

    pub fn block_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut shapes = Vec::new();
        let mut cin = self.in_channels;
        for (l, &cout) in self.conv_channels.iter().enumerate() {
            shapes.push((format!("conv{l}.weight"), vec![cout, cin, 3, 3]));
            shapes.push((format!("conv{l}.bias"), vec![cout]));
            cin = cout;
        }
        shapes.push(("fc.weight".into(), vec![self.classes, cin]));
        shapes.push(("fc.bias".into(), vec![self.classes]));
        shapes
    }
}

/// Per-channel mean and standard deviation over a pool of images. Channels
/// with (near) zero spread get std 1.
pub fn channel_stats(images: &[Image]) -> (Vec<f32>, Vec<f32>) {
    let Some(first) = images.first() else {
        return (Vec::new(), Vec::new());
    };
    let c = first.channels();
    let mut sum = vec![0.0f64; c];
    let mut sq = vec![0.0f64; c];
    let mut count = 0usize;
    for img in images {
        for (ch, (s, q)) in sum.iter_mut().zip(sq.iter_mut()).enumerate() {
            for &v in img.plane(ch) {
                *s += f64::from(v);
                *q += f64::from(v) * f64::from(v);
            }
        }
        count += first.height() * first.width();
    }
    let n = count as f64;
    let mean: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
    let std = sum
        .iter()
        .zip(&sq)
        .map(|(s, q)| {
            let var = (q / n - (s / n) * (s / n)).max(0.0);
            let sd = var.sqrt();
            if sd < 1e-6 {
                1.0
            } else {
                sd as f32
            }
        })
        .collect();
    (mean, std)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl ParamBlock {
    pub fn is_bias(&self) -> bool {
        self.name.ends_with(".bias")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub arch: ArchSpec,
    pub blocks: Vec<ParamBlock>,
}

impl ModelParams {
    pub fn zeros(arch: &ArchSpec) -> Result<Self> {
        arch.validate()?;
        let blocks = arch
            .block_shapes()
            .into_iter()
            .map(|(name, shape)| ParamBlock {
                data: vec![0.0; shape.iter().product()],
                name,
                shape,
            })
            .collect();
        Ok(Self {
            arch: arch.clone(),
            blocks,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for b in &mut z.blocks {
            b.data.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    pub fn block(&self, name: &str) -> Option<&ParamBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn ensure_same_shape(&self, other: &ModelParams) -> Result<()> {
        let same = self.blocks.len() == other.blocks.len()
            && self
                .blocks
                .iter()
                .zip(&other.blocks)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape);
        if same {
            Ok(())
        } else {
            Err(Error::shape("parameter block layouts differ"))
        }
    }

    pub fn len(&self) -> usize {
        self.blocks.iter().map(|b| b.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().all(|b| b.data.iter().all(|v| v.is_finite()))
    }
}

/// He-normal weights (fan-in scaled), zero biases.
pub fn init_params(arch: &ArchSpec, seed: u64) -> Result<ModelParams> {
    let mut params = ModelParams::zeros(arch)?;
    let mut rng = stream(seed, Tag::Init, &[]);
    for block in &mut params.blocks {
        if block.is_bias() {
            continue;
        }
        let fan_in: usize = block.shape[1..].iter().product();
        let gain = if block.name.starts_with("fc") { 1.0 } else { 2.0 };
        let std = (gain / fan_in as f64).sqrt() as f32;
        let normal = Normal::new(0.0f32, std).expect("valid std");
        for v in &mut block.data {
            *v = normal.sample(&mut rng);
        }
    }
    Ok(params)
}

pub fn init_params_with(arch: &ArchSpec, rng: &mut impl Rng) -> Result<ModelParams> {
    init_params(arch, rng.random())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Logits(pub Matrix);

#[derive(Clone, Debug, PartialEq)]
pub struct Probabilities(pub Matrix);

impl Probabilities {
    pub fn rows(&self) -> usize {
        self.0.rows()
    }
}

/// Row-wise log-softmax with max subtraction.
pub fn log_softmax_row(z: &[f64], out: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    for (o, &v) in out.iter_mut().zip(z) {
        *o = v - lse;
    }
}

pub fn softmax_row(z: &[f64], out: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

pub fn softmax(z: &Logits) -> Probabilities {
    let mut y = Matrix::zeros(z.0.rows(), z.0.cols());
    for i in 0..z.0.rows() {
        softmax_row(z.0.row(i), y.row_mut(i));
    }
    Probabilities(y)
}

/// `shadow <- decay * shadow + (1 - decay) * params`, evaluated in `f64`
/// and rounded once per entry.
pub fn ema_update(shadow: &mut ModelParams, params: &ModelParams, decay: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::Domain(format!("EMA decay {decay} outside [0, 1]")));
    }
    shadow.ensure_same_shape(params)?;
    for (s, p) in shadow.blocks.iter_mut().zip(&params.blocks) {
        for (sv, &pv) in s.data.iter_mut().zip(&p.data) {
            *sv = (decay * f64::from(*sv) + (1.0 - decay) * f64::from(pv)) as f32;
        }
    }
    Ok(())
}

/// `c = a * b + beta * c` for row/column-strided operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
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
            n as isize,
            1,
        );
    }
}

struct ConvTape {
    cols: Vec<f32>,
    /// Post-ReLU activations, pre-pool, `[Cout, N, H, W]`.
    activated: Vec<f32>,
    /// For each pooled output, the flat index of its argmax in `activated`.
    pool_argmax: Option<Vec<u32>>,
    in_hw: (usize, usize),
    out_hw: (usize, usize),
}

/// Everything the backward pass needs from one forward pass.
pub struct Tape {
    batch: usize,
    convs: Vec<ConvTape>,
    /// `[N, C]`
    embedding: Vec<f32>,
    final_hw: (usize, usize),
}

pub struct ForwardOutput {
    pub logits: Logits,
    /// Penultimate (global-pooled) features, `N x C`.
    pub embedding: Matrix,
}

fn check_images(arch: &ArchSpec, images: &[Image]) -> Result<()> {
    for img in images {
        if img.dims() != (arch.in_channels, arch.height, arch.width) {
            return Err(Error::shape(format!(
                "image {:?} does not match architecture input {:?}",
                img.dims(),
                (arch.in_channels, arch.height, arch.width)
            )));
        }
    }
    Ok(())
}

fn im2col(input: &[f32], cin: usize, n: usize, h: usize, w: usize) -> Vec<f32> {
    let hw = h * w;
    let npix = n * hw;
    let mut cols = vec![0.0f32; cin * 9 * npix];
    for ci in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * npix;
                for b in 0..n {
                    let src = &input[(ci * n + b) * hw..(ci * n + b + 1) * hw];
                    let dst = &mut cols[row + b * hw..row + (b + 1) * hw];
                    for y in 0..h {
                        let sy = y as i64 + ky as i64 - 1;
                        if sy < 0 || sy >= h as i64 {
                            continue;
                        }
                        let sy = sy as usize;
                        for x in 0..w {
                            let sx = x as i64 + kx as i64 - 1;
                            if sx >= 0 && sx < w as i64 {
                                dst[y * w + x] = src[sy * w + sx as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f32], cin: usize, n: usize, h: usize, w: usize) -> Vec<f32> {
    let hw = h * w;
    let npix = n * hw;
    let mut out = vec![0.0f32; cin * npix];
    for ci in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * npix;
                for b in 0..n {
                    let src = &cols[row + b * hw..row + (b + 1) * hw];
                    let dst = &mut out[(ci * n + b) * hw..(ci * n + b + 1) * hw];
                    for y in 0..h {
                        let sy = y as i64 + ky as i64 - 1;
                        if sy < 0 || sy >= h as i64 {
                            continue;
                        }
                        let sy = sy as usize;
                        for x in 0..w {
                            let sx = x as i64 + kx as i64 - 1;
                            if sx >= 0 && sx < w as i64 {
                                dst[sy * w + sx as usize] += src[y * w + x];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn pack_input(arch: &ArchSpec, images: &[Image]) -> Vec<f32> {
    let n = images.len();
    let hw = arch.height * arch.width;
    let mut x = vec![0.0f32; arch.in_channels * n * hw];
    for c in 0..arch.in_channels {
        let (mean, inv) = (arch.input_mean[c], 1.0 / arch.input_std[c]);
        for (b, img) in images.iter().enumerate() {
            let dst = &mut x[(c * n + b) * hw..(c * n + b + 1) * hw];
            for (d, &v) in dst.iter_mut().zip(img.plane(c)) {
                *d = (v - mean) * inv;
            }
        }
    }
    x
}

/// Forward pass that records what backward needs.
pub fn forward_with_tape(params: &ModelParams, images: &[Image]) -> Result<(ForwardOutput, Tape)> {
    let arch = &params.arch;
    arch.validate()?;
    check_images(arch, images)?;
    let n = images.len();
    let sizes = arch.spatial_sizes();
    let mut act = pack_input(arch, images);
    let mut cin = arch.in_channels;
    let mut convs = Vec::with_capacity(arch.conv_channels.len());
    for (l, &cout) in arch.conv_channels.iter().enumerate() {
        let (h, w) = sizes[l];
        let npix = n * h * w;
        let weight = &params.blocks[2 * l].data;
        let bias = &params.blocks[2 * l + 1].data;
        let cols = im2col(&act, cin, n, h, w);
        let mut out = vec![0.0f32; cout * npix];
        gemm(cout, cin * 9, npix, weight, (cin * 9, 1), &cols, (npix, 1), 0.0, &mut out);
        for (o, row) in out.chunks_mut(npix.max(1)).enumerate() {
            let b = bias[o];
            for v in row {
                *v = (*v + b).max(0.0);
            }
        }
        let (ph, pw) = sizes[l + 1];
        let (pooled, argmax) = if (ph, pw) != (h, w) {
            let mut pooled = vec![0.0f32; cout * n * ph * pw];
            let mut idx = vec![0u32; pooled.len()];
            for cb in 0..cout * n {
                let base = cb * h * w;
                for py in 0..ph {
                    for px in 0..pw {
                        let mut best = base + 2 * py * w + 2 * px;
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let j = base + (2 * py + dy) * w + 2 * px + dx;
                            if out[j] > out[best] {
                                best = j;
                            }
                        }
                        let o = cb * ph * pw + py * pw + px;
                        pooled[o] = out[best];
                        idx[o] = best as u32;
                    }
                }
            }
            (pooled, Some(idx))
        } else {
            (out.clone(), None)
        };
        convs.push(ConvTape {
            cols,
            activated: out,
            pool_argmax: argmax,
            in_hw: (h, w),
            out_hw: (ph, pw),
        });
        act = pooled;
        cin = cout;
    }
    let (fh, fw) = *sizes.last().expect("non-empty");
    let fhw = fh * fw;
    let mut embedding = vec![0.0f32; n * cin];
    for c in 0..cin {
        for b in 0..n {
            let s: f32 = act[(c * n + b) * fhw..(c * n + b + 1) * fhw].iter().sum();
            embedding[b * cin + c] = s / fhw as f32;
        }
    }
    let k = arch.classes;
    let fc_w = &params.blocks[2 * arch.conv_channels.len()].data;
    let fc_b = &params.blocks[2 * arch.conv_channels.len() + 1].data;
    let mut logits = vec![0.0f32; n * k];
    gemm(n, cin, k, &embedding, (cin, 1), fc_w, (1, cin), 0.0, &mut logits);
    for row in logits.chunks_mut(k) {
        for (v, &b) in row.iter_mut().zip(fc_b) {
            *v += b;
        }
    }
    let logits = Matrix::from_vec(n, k, logits.iter().map(|&v| f64::from(v)).collect())?;
    let emb = Matrix::from_vec(n, cin, embedding.iter().map(|&v| f64::from(v)).collect())?;
    Ok((
        ForwardOutput {
            logits: Logits(logits),
            embedding: emb,
        },
        Tape {
            batch: n,
            convs,
            embedding,
            final_hw: (fh, fw),
        },
    ))
}

/// `train_mode` is accepted for interface parity; the reference network has
/// no stochastic layers.
pub fn forward(params: &ModelParams, images: &[Image], train_mode: bool) -> Result<Logits> {
    let _ = train_mode;
    forward_with_tape(params, images).map(|(out, _)| out.logits)
}

pub fn forward_full(params: &ModelParams, images: &[Image]) -> Result<ForwardOutput> {
    forward_with_tape(params, images).map(|(out, _)| out)
}

/// Parameter gradients, one flat vector per block in [`ModelParams`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub blocks: Vec<Vec<f32>>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            blocks: params.blocks.iter().map(|b| vec![0.0; b.data.len()]).collect(),
        }
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

/// Backpropagates `dL/dlogits` (and optionally an extra `dL/dembedding`)
/// through the network recorded in `tape`.
pub fn backward(
    params: &ModelParams,
    tape: &Tape,
    dlogits: &Matrix,
    dembedding: Option<&Matrix>,
) -> Result<Gradients> {
    let arch = &params.arch;
    let n = tape.batch;
    let k = arch.classes;
    let depth = arch.conv_channels.len();
    let c_last = arch.embedding_dim();
    if dlogits.shape() != (n, k) {
        return Err(Error::shape("dlogits does not match the recorded forward pass"));
    }
    if let Some(de) = dembedding {
        if de.shape() != (n, c_last) {
            return Err(Error::shape("dembedding does not match the recorded forward pass"));
        }
    }
    let mut grads = Gradients::zeros_like(params);
    let dz: Vec<f32> = dlogits.as_slice().iter().map(|&v| v as f32).collect();

    // fc.weight [k, C] = dz^T [k, N] * emb [N, C]
    gemm(k, n, c_last, &dz, (1, k), &tape.embedding, (c_last, 1), 0.0, &mut grads.blocks[2 * depth]);
    for row in dz.chunks(k) {
        for (g, &v) in grads.blocks[2 * depth + 1].iter_mut().zip(row) {
            *g += v;
        }
    }
    let mut demb = vec![0.0f32; n * c_last];
    let fc_w = &params.blocks[2 * depth].data;
    gemm(n, k, c_last, &dz, (k, 1), fc_w, (c_last, 1), 0.0, &mut demb);
    if let Some(de) = dembedding {
        for (d, &e) in demb.iter_mut().zip(de.as_slice()) {
            *d += e as f32;
        }
    }

    let (fh, fw) = tape.final_hw;
    let fhw = fh * fw;
    let mut dact = vec![0.0f32; c_last * n * fhw];
    for c in 0..c_last {
        for b in 0..n {
            let g = demb[b * c_last + c] / fhw as f32;
            dact[(c * n + b) * fhw..(c * n + b + 1) * fhw].fill(g);
        }
    }

    for l in (0..depth).rev() {
        let t = &tape.convs[l];
        let cout = arch.conv_channels[l];
        let cin = if l == 0 { arch.in_channels } else { arch.conv_channels[l - 1] };
        let (h, w) = t.in_hw;
        let npix = n * h * w;
        let mut dpre = match &t.pool_argmax {
            Some(idx) => {
                let mut d = vec![0.0f32; cout * npix];
                for (o, &j) in idx.iter().enumerate() {
                    d[j as usize] += dact[o];
                }
                d
            }
            None => dact,
        };
        debug_assert_eq!(t.out_hw, if t.pool_argmax.is_some() { (h / 2, w / 2) } else { (h, w) });
        for (d, &a) in dpre.iter_mut().zip(&t.activated) {
            if a <= 0.0 {
                *d = 0.0;
            }
        }
        let kk = cin * 9;
        gemm(cout, npix, kk, &dpre, (npix, 1), &t.cols, (1, npix), 0.0, &mut grads.blocks[2 * l]);
        for (o, row) in dpre.chunks(npix.max(1)).enumerate() {
            grads.blocks[2 * l + 1][o] = row.iter().sum();
        }
        if l > 0 {
            let weight = &params.blocks[2 * l].data;
            let mut dcols = vec![0.0f32; kk * npix];
            gemm(kk, cout, npix, weight, (1, kk), &dpre, (npix, 1), 0.0, &mut dcols);
            dact = col2im(&dcols, cin, n, h, w);
        } else {
            dact = Vec::new();
        }
    }
    Ok(grads)
}
