//! Dual-head convolutional scorer, SGD with momentum and the cosine schedule.
//!
//! Input images are shifted to zero mean and scaled by [`INPUT_GAIN`]. Backbone: `channels.len()` blocks
//! of 3x3 convolution (padding 1) + leaky ReLU (slope [`LEAK`]),
//! with 2x2 average pooling between blocks. The classification head is a
//! linear layer over the concatenated global average and global max of the
//! last feature map; the segmentation head is a 1x1 convolution on the last
//! feature map, so segmentation maps are downscaled by
//! `2^(channels.len() - 1)` relative to the input.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, JsonContext, Result};
use crate::image::Image;
use crate::seed;

/// Negative-side slope of the backbone activation.
pub const LEAK: f64 = 0.1;
/// Multiplier applied to the mean-centred input.
pub const INPUT_GAIN: f64 = 10.0;
/// Initial segmentation probability; lesion pixels are rare.
pub const SEG_PRIOR: f64 = 0.01;
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    /// `(height, width)` of the input slice.
    pub input: (usize, usize),
    /// Output channels of each convolution block.
    pub channels: Vec<usize>,
}

impl Default for ArchDescriptor {
    fn default() -> Self {
        Self { input: (32, 32), channels: vec![8, 16, 16] }
    }
}

impl ArchDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("architecture needs at least one block with nonzero channels".into()));
        }
        let f = self.seg_downscale();
        let (h, w) = self.input;
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::Config(format!("input {h}x{w} is not divisible by the downscale factor {f}")));
        }
        Ok(())
    }

    pub fn seg_downscale(&self) -> usize {
        1 << (self.channels.len() - 1)
    }

    pub fn seg_shape(&self) -> (usize, usize) {
        let f = self.seg_downscale();
        (self.input.0 / f, self.input.1 / f)
    }

    fn layout(&self) -> Layout {
        let mut offset = 0;
        let mut convs = Vec::new();
        let (mut h, mut w) = self.input;
        let mut cin = 1;
        for (i, &cout) in self.channels.iter().enumerate() {
            if i > 0 {
                h /= 2;
                w /= 2;
            }
            let weight = offset;
            offset += cout * cin * 9;
            let bias = offset;
            offset += cout;
            convs.push(ConvLayout { cin, cout, h, w, weight, bias });
            cin = cout;
        }
        let c = cin;
        let seg_w = offset;
        let seg_b = seg_w + c;
        let cls_w = seg_b + 1;
        let cls_b = cls_w + 2 * c;
        Layout { convs, seg_w, seg_b, cls_w, cls_b, n_params: cls_b + 1 }
    }

    pub fn n_params(&self) -> usize {
        self.layout().n_params
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvLayout {
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    convs: Vec<ConvLayout>,
    seg_w: usize,
    seg_b: usize,
    cls_w: usize,
    cls_b: usize,
    n_params: usize,
}

/// Classification probability and per-pixel segmentation probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    pub clf: T,
    pub seg: Image<T>,
}

/// Intermediate values kept by a training forward pass.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    cols: Vec<Vec<T>>,
    pre_act: Vec<Vec<T>>,
    features: Vec<T>,
    pooled: Vec<T>,
    argmax: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualHeadModel<T> {
    arch: ArchDescriptor,
    layout_cache: LayoutCache,
    params: Vec<T>,
    frozen: bool,
    seed: u64,
    iteration: usize,
}

#[derive(Debug, Clone)]
struct LayoutCache(Layout);

impl PartialEq for LayoutCache {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

#[inline]
fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, cols: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let iy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = T::zero();
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, dx: &mut [T]) {
    let hw = h * w;
    dx.fill(T::zero());
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += *s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += *s),
                    }
                }
            }
        }
    }
}

fn avg_pool2<T: Scalar>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let q = T::lit(0.25);
    let mut out = vec![T::zero(); c * oh * ow];
    for ci in 0..c {
        let p = &x[ci * h * w..];
        for y in 0..oh {
            for xx in 0..ow {
                let i = 2 * y * w + 2 * xx;
                out[ci * oh * ow + y * ow + xx] = (p[i] + p[i + 1] + p[i + w] + p[i + w + 1]) * q;
            }
        }
    }
    out
}

fn avg_pool2_backward<T: Scalar>(dy: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let q = T::lit(0.25);
    let mut dx = vec![T::zero(); c * h * w];
    for ci in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let g = dy[ci * oh * ow + y * ow + xx] * q;
                let i = ci * h * w + 2 * y * w + 2 * xx;
                dx[i] = g;
                dx[i + 1] = g;
                dx[i + w] = g;
                dx[i + w + 1] = g;
            }
        }
    }
    dx
}

impl<T: Scalar> DualHeadModel<T> {
    /// He-initialized model; deterministic given `seed`.
    pub fn init(arch: ArchDescriptor, seed_value: u64) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        let mut params = vec![T::zero(); layout.n_params];
        let mut rng = seed::rng(seed_value, &[seed::tag("init")]);
        for conv in &layout.convs {
            let fan_in = (conv.cin * 9) as f64;
            let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
            for p in &mut params[conv.weight..conv.bias] {
                *p = T::lit(dist.sample(&mut rng));
            }
        }
        let c = layout.convs.last().expect("nonempty").cout as f64;
        let head = Normal::new(0.0, (1.0 / c).sqrt()).expect("valid std");
        for p in &mut params[layout.seg_w..layout.seg_b] {
            *p = T::lit(head.sample(&mut rng));
        }
        let head = Normal::new(0.0, (1.0 / (2.0 * c)).sqrt()).expect("valid std");
        for p in &mut params[layout.cls_w..layout.cls_b] {
            *p = T::lit(head.sample(&mut rng));
        }
        params[layout.seg_b] = T::lit((SEG_PRIOR / (1.0 - SEG_PRIOR)).ln());
        Ok(Self { arch, layout_cache: LayoutCache(layout), params, frozen: false, seed: seed_value, iteration: 0 })
    }

    fn from_parts(arch: ArchDescriptor, params: Vec<T>, frozen: bool, seed_value: u64, iteration: usize) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        if params.len() != layout.n_params {
            return Err(Error::Config(format!("expected {} parameters, got {}", layout.n_params, params.len())));
        }
        Ok(Self { arch, layout_cache: LayoutCache(layout), params, frozen, seed: seed_value, iteration })
    }

    pub fn arch(&self) -> &ArchDescriptor {
        &self.arch
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    /// Mutable parameter access; fails on frozen models.
    pub fn params_mut(&mut self) -> Result<&mut [T]> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        Ok(&mut self.params)
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn set_iteration(&mut self, iteration: usize) {
        self.iteration = iteration;
    }

    /// Hex SHA-256 of the parameter bytes.
    pub fn param_hash(&self) -> String {
        hex::encode(Sha256::digest(T::to_le_bytes_vec(&self.params)))
    }

    fn check_input(&self, image: &Image<T>) -> Result<()> {
        if image.shape() != self.arch.input {
            return Err(Error::ShapeMismatch { what: "model input".into(), expected: self.arch.input, actual: image.shape() });
        }
        Ok(())
    }

    pub fn forward(&self, image: &Image<T>) -> Result<Prediction<T>> {
        self.check_input(image)?;
        let (clf, seg, _) = self.run(image, false);
        Ok(self.predict(clf, seg))
    }

    /// Forward pass that records what [`backward`](Self::backward) needs.
    pub fn forward_train(&self, image: &Image<T>) -> Result<(Prediction<T>, Tape<T>)> {
        self.check_input(image)?;
        let (clf, seg, tape) = self.run(image, true);
        Ok((self.predict(clf, seg), tape.expect("tape requested")))
    }

    fn predict(&self, clf_logit: T, seg_logits: Vec<T>) -> Prediction<T> {
        let (h, w) = self.arch.seg_shape();
        let seg = Image::from_vec(h, w, seg_logits.into_iter().map(sigmoid).collect()).expect("head shape");
        Prediction { clf: sigmoid(clf_logit), seg }
    }

    fn run(&self, image: &Image<T>, record: bool) -> (T, Vec<T>, Option<Tape<T>>) {
        let layout = &self.layout_cache.0;
        let p = &self.params;
        // centred and rescaled so first-layer responses start at unit order
        let mean = image.data().iter().copied().sum::<T>() / T::lit(image.len() as f64);
        let gain = T::lit(INPUT_GAIN);
        let mut act: Vec<T> = image.data().iter().map(|&v| (v - mean) * gain).collect();
        let mut tape_cols = Vec::new();
        let mut tape_pre = Vec::new();
        let n_blocks = layout.convs.len();
        for (i, conv) in layout.convs.iter().enumerate() {
            let hw = conv.h * conv.w;
            let k = conv.cin * 9;
            let mut cols = vec![T::zero(); k * hw];
            im2col(&act, conv.cin, conv.h, conv.w, &mut cols);
            let mut z = vec![T::zero(); conv.cout * hw];
            for (o, row) in z.chunks_mut(hw).enumerate() {
                row.fill(p[conv.bias + o]);
            }
            T::gemm(conv.cout, k, hw, T::one(), &p[conv.weight..conv.bias], k as isize, 1, &cols, hw as isize, 1, T::one(), &mut z, hw as isize, 1);
            let leak = T::lit(LEAK);
            let r: Vec<T> = z.iter().map(|&v| if v > T::zero() { v } else { leak * v }).collect();
            if record {
                tape_cols.push(cols);
                tape_pre.push(z);
            }
            act = if i + 1 < n_blocks { avg_pool2(&r, conv.cout, conv.h, conv.w) } else { r };
        }
        let last = layout.convs[n_blocks - 1];
        let hw = last.h * last.w;
        let c = last.cout;
        let features = act;

        let mut seg = vec![p[layout.seg_b]; hw];
        T::gemm(1, c, hw, T::one(), &p[layout.seg_w..layout.seg_b], c as isize, 1, &features, hw as isize, 1, T::one(), &mut seg, hw as isize, 1);

        let mut pooled = vec![T::zero(); 2 * c];
        let mut argmax = vec![0usize; c];
        let inv = T::one() / T::lit(hw as f64);
        for ci in 0..c {
            let plane = &features[ci * hw..(ci + 1) * hw];
            let mut best = 0;
            let mut sum = T::zero();
            for (j, &v) in plane.iter().enumerate() {
                sum += v;
                if v > plane[best] {
                    best = j;
                }
            }
            pooled[ci] = sum * inv;
            pooled[c + ci] = plane[best];
            argmax[ci] = best;
        }
        let clf = p[layout.cls_b] + pooled.iter().zip(&p[layout.cls_w..layout.cls_b]).map(|(&a, &b)| a * b).sum::<T>();
        let tape = record.then_some(Tape { cols: tape_cols, pre_act: tape_pre, features, pooled, argmax });
        (clf, seg, tape)
    }

    /// Accumulates parameter gradients into `grad` given gradients with respect
    /// to the classification logit and the segmentation logits.
    pub fn backward(&self, tape: &Tape<T>, d_clf: T, d_seg: &[T], grad: &mut [T]) {
        let layout = &self.layout_cache.0;
        let p = &self.params;
        assert_eq!(grad.len(), p.len(), "gradient buffer size");
        let n_blocks = layout.convs.len();
        let last = layout.convs[n_blocks - 1];
        let hw = last.h * last.w;
        let c = last.cout;
        assert_eq!(d_seg.len(), hw, "segmentation gradient size");

        grad[layout.cls_b] += d_clf;
        for (g, &v) in grad[layout.cls_w..layout.cls_b].iter_mut().zip(&tape.pooled) {
            *g += d_clf * v;
        }
        grad[layout.seg_b] += d_seg.iter().copied().sum::<T>();
        let inv = T::one() / T::lit(hw as f64);
        let mut d_act = vec![T::zero(); c * hw];
        for ci in 0..c {
            let plane = &tape.features[ci * hw..(ci + 1) * hw];
            grad[layout.seg_w + ci] += plane.iter().zip(d_seg).map(|(&f, &d)| f * d).sum::<T>();
            let w_seg = p[layout.seg_w + ci];
            let d_avg = d_clf * p[layout.cls_w + ci] * inv;
            let d_max = d_clf * p[layout.cls_w + c + ci];
            let dp = &mut d_act[ci * hw..(ci + 1) * hw];
            for (d, &ds) in dp.iter_mut().zip(d_seg) {
                *d = d_avg + w_seg * ds;
            }
            dp[tape.argmax[ci]] += d_max;
        }

        for i in (0..n_blocks).rev() {
            let conv = layout.convs[i];
            let hw = conv.h * conv.w;
            let k = conv.cin * 9;
            let mut dz = d_act;
            for (d, &z) in dz.iter_mut().zip(&tape.pre_act[i]) {
                if z <= T::zero() {
                    *d *= T::lit(LEAK);
                }
            }
            // dW += dz * cols^T
            T::gemm(
                conv.cout,
                hw,
                k,
                T::one(),
                &dz,
                hw as isize,
                1,
                &tape.cols[i],
                1,
                hw as isize,
                T::one(),
                &mut grad[conv.weight..conv.bias],
                k as isize,
                1,
            );
            for (o, row) in dz.chunks(hw).enumerate() {
                grad[conv.bias + o] += row.iter().copied().sum::<T>();
            }
            if i == 0 {
                break;
            }
            // dcols = W^T * dz
            let mut dcols = vec![T::zero(); k * hw];
            T::gemm(k, conv.cout, hw, T::one(), &p[conv.weight..conv.bias], 1, k as isize, &dz, hw as isize, 1, T::zero(), &mut dcols, hw as isize, 1);
            let mut dx = vec![T::zero(); conv.cin * hw];
            col2im(&dcols, conv.cin, conv.h, conv.w, &mut dx);
            let prev = layout.convs[i - 1];
            d_act = avg_pool2_backward(&dx, prev.cout, prev.h, prev.w);
        }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.to_string(),
            scalar: T::NAME.to_string(),
            arch: self.arch.clone(),
            seed: self.seed,
            iteration: self.iteration,
            frozen: self.frozen,
            n_params: self.params.len(),
            param_sha256: self.param_hash(),
        };
        let json = serde_json::to_vec(&header).json_ctx("checkpoint header")?;
        let mut f = fs::File::create(path).at(path)?;
        f.write_all(CHECKPOINT_MAGIC).at(path)?;
        f.write_all(&(json.len() as u32).to_le_bytes()).at(path)?;
        f.write_all(&json).at(path)?;
        f.write_all(&T::to_le_bytes_vec(&self.params)).at(path)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).at(path)?;
        let bad = |reason: &str| Error::Checkpoint { path: path.to_path_buf(), reason: reason.to_string() };
        let rest = bytes.strip_prefix(CHECKPOINT_MAGIC).ok_or_else(|| bad("bad magic"))?;
        if rest.len() < 4 {
            return Err(bad("truncated header length"));
        }
        let n = u32::from_le_bytes(rest[..4].try_into().expect("4 bytes")) as usize;
        if rest.len() < 4 + n {
            return Err(bad("truncated header"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&rest[4..4 + n]).json_ctx("checkpoint header")?;
        if header.scalar != T::NAME {
            return Err(bad(&format!("checkpoint stores {} parameters, requested {}", header.scalar, T::NAME)));
        }
        let params = T::from_le_bytes_slice(&rest[4 + n..]).ok_or_else(|| bad("parameter block has a partial value"))?;
        if params.len() != header.n_params {
            return Err(bad("parameter count does not match header"));
        }
        let model = Self::from_parts(header.arch, params, header.frozen, header.seed, header.iteration)?;
        if model.param_hash() != header.param_sha256 {
            return Err(bad("parameter checksum mismatch"));
        }
        Ok(model)
    }
}

const CHECKPOINT_MAGIC: &[u8] = b"SKDCKPT\n";
const CHECKPOINT_FORMAT: &str = "skd-checkpoint-v1";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    scalar: String,
    arch: ArchDescriptor,
    seed: u64,
    iteration: usize,
    frozen: bool,
    n_params: usize,
    param_sha256: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub total_iterations: usize,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { base_lr: 0.012, momentum: 0.9, weight_decay: 1e-4, total_iterations: 2000, batch_size: 32 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(Error::Config("base_lr must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if self.total_iterations == 0 || self.batch_size == 0 {
            return Err(Error::Config("total_iterations and batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Cosine-annealed learning rate at iteration `t`, decaying to zero.
pub fn lr_at(t: usize, cfg: &OptimizerConfig) -> Result<f64> {
    if t > cfg.total_iterations {
        return Err(Error::InvalidArgument(format!("iteration {t} beyond schedule of {}", cfg.total_iterations)));
    }
    let progress = t as f64 / cfg.total_iterations as f64;
    Ok((0.5 * cfg.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())).max(0.0))
}

/// Momentum SGD with L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub momentum: T,
    pub weight_decay: T,
    velocity: Vec<T>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(n_params: usize, momentum: f64, weight_decay: f64) -> Self {
        Self { momentum: T::lit(momentum), weight_decay: T::lit(weight_decay), velocity: vec![T::zero(); n_params] }
    }

    pub fn step(&mut self, model: &mut DualHeadModel<T>, grad: &[T], lr: T) -> Result<()> {
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Diverged { iteration: model.iteration, detail: format!("non-finite gradient at parameter {i}") });
        }
        if grad.len() != self.velocity.len() {
            return Err(Error::InvalidArgument("gradient length does not match optimizer state".into()));
        }
        let (mu, wd) = (self.momentum, self.weight_decay);
        let params = model.params_mut()?;
        for ((w, v), &g) in params.iter_mut().zip(self.velocity.iter_mut()).zip(grad) {
            *v = mu * *v + g + wd * *w;
            *w -= lr * *v;
        }
        model.iteration += 1;
        Ok(())
    }
}

/// One stateless momentum-SGD step with an explicit velocity buffer.
pub fn sgd_update<T: Scalar>(
    model: &mut DualHeadModel<T>,
    gradients: &[T],
    velocity: &mut Vec<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let mut opt = Sgd { momentum: T::lit(momentum), weight_decay: T::lit(weight_decay), velocity: std::mem::take(velocity) };
    if opt.velocity.is_empty() {
        opt.velocity = vec![T::zero(); model.n_params()];
    }
    let out = opt.step(model, gradients, T::lit(lr));
    *velocity = opt.velocity;
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ArchDescriptor {
        ArchDescriptor { input: (8, 8), channels: vec![3, 4] }
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a = DualHeadModel::<f32>::init(ArchDescriptor::default(), 1).unwrap();
        let b = DualHeadModel::<f32>::init(ArchDescriptor::default(), 1).unwrap();
        let c = DualHeadModel::<f32>::init(ArchDescriptor::default(), 2).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn forward_ranges_and_purity() {
        let m = DualHeadModel::<f32>::init(ArchDescriptor::default(), 3).unwrap();
        let zero = Image::filled(32, 32, 0.0f32);
        let p = m.forward(&zero).unwrap();
        assert!(p.clf > 0.0 && p.clf < 1.0);
        let img = Image::from_fn(32, 32, |r, c| ((r * c) % 13) as f32 / 12.0);
        let p1 = m.forward(&img).unwrap();
        let p2 = m.forward(&img).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(p1.seg.shape(), (8, 8));
        assert!(p1.seg.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(m.forward(&Image::filled(16, 32, 0.0f32)).is_err());
    }

    #[test]
    fn training_forward_matches_inference_forward() {
        let m = DualHeadModel::<f64>::init(tiny(), 4).unwrap();
        let img = Image::from_fn(8, 8, |r, c| (r as f64 * 0.1 + c as f64 * 0.05).sin().abs());
        let (p, _) = m.forward_train(&img).unwrap();
        assert_eq!(p, m.forward(&img).unwrap());
    }

    #[test]
    fn backward_matches_finite_differences_on_logits() {
        let m = DualHeadModel::<f64>::init(tiny(), 5).unwrap();
        let img = Image::from_fn(8, 8, |r, c| ((r * 3 + c * 5) % 7) as f64 / 6.0);
        // objective: clf_logit * 0.7 + sum(seg_logit * weights)
        let weights: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).cos()).collect();
        let objective = |m: &DualHeadModel<f64>| {
            let (clf, seg, _) = m.run(&img, false);
            0.7 * clf + seg.iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, tape) = m.forward_train(&img).unwrap();
        let mut grad = vec![0.0; m.n_params()];
        m.backward(&tape, 0.7, &weights, &mut grad);
        let h = 1e-6;
        let mut worst = 0.0f64;
        for i in 0..m.n_params() {
            let mut plus = m.clone();
            plus.params[i] += h;
            let mut minus = m.clone();
            minus.params[i] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            worst = worst.max((fd - grad[i]).abs() / (1e-6 + fd.abs().max(grad[i].abs())));
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn cosine_schedule() {
        let cfg = OptimizerConfig { total_iterations: 100, ..OptimizerConfig::default() };
        assert_eq!(lr_at(0, &cfg).unwrap(), 0.012);
        assert!(lr_at(100, &cfg).unwrap().abs() < 1e-18);
        assert!((lr_at(50, &cfg).unwrap() - 0.006).abs() < 1e-15);
        assert!(lr_at(101, &cfg).is_err());
        let mut prev = f64::INFINITY;
        for t in 0..=100 {
            let lr = lr_at(t, &cfg).unwrap();
            assert!(lr <= prev && lr >= 0.0);
            prev = lr;
        }
    }

    #[test]
    fn sgd_examples() {
        let mut m = DualHeadModel::<f64>::init(tiny(), 6).unwrap();
        let before = m.params().to_vec();
        let mut v = Vec::new();
        let zero = vec![0.0; m.n_params()];
        sgd_update(&mut m, &zero, &mut v, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(m.params(), &before[..]);

        // scalar weight decay example on one coordinate
        let mut m = DualHeadModel::<f64>::init(tiny(), 6).unwrap();
        m.params_mut().unwrap()[0] = 1.0;
        let mut v = Vec::new();
        let zero = vec![0.0; m.n_params()];
        sgd_update(&mut m, &zero, &mut v, 0.1, 0.0, 0.1).unwrap();
        assert!((m.params()[0] - 0.99).abs() < 1e-15);

        // momentum: second identical step moves further than the first
        let mut m = DualHeadModel::<f64>::init(tiny(), 6).unwrap();
        let g = vec![1.0; m.n_params()];
        let mut opt = Sgd::new(m.n_params(), 0.9, 0.0);
        let w0 = m.params()[0];
        opt.step(&mut m, &g, 0.01).unwrap();
        let w1 = m.params()[0];
        opt.step(&mut m, &g, 0.01).unwrap();
        let w2 = m.params()[0];
        assert!((w2 - w1).abs() > (w1 - w0).abs());

        let mut bad = g.clone();
        bad[3] = f64::NAN;
        assert!(matches!(opt.step(&mut m, &bad, 0.01), Err(Error::Diverged { .. })));
    }

    #[test]
    fn frozen_model_rejects_updates() {
        let mut m = DualHeadModel::<f32>::init(tiny(), 7).unwrap().freeze();
        let hash = m.param_hash();
        let mut opt = Sgd::new(m.n_params(), 0.9, 0.0);
        let ones = vec![1.0; m.n_params()];
        assert!(matches!(opt.step(&mut m, &ones, 0.1), Err(Error::Frozen)));
        assert_eq!(m.param_hash(), hash);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = DualHeadModel::<f32>::init(ArchDescriptor::default(), 8).unwrap().freeze();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        m.save_checkpoint(&p).unwrap();
        let back = DualHeadModel::<f32>::load_checkpoint(&p).unwrap();
        assert_eq!(back, m);
        assert!(back.is_frozen());
        assert!(DualHeadModel::<f64>::load_checkpoint(&p).is_err());
        let mut bytes = fs::read(&p).unwrap();
        let n = bytes.len();
        bytes[n - 1] ^= 0xff;
        fs::write(&p, bytes).unwrap();
        assert!(DualHeadModel::<f32>::load_checkpoint(&p).is_err());
    }

    #[test]
    fn arch_validation() {
        assert!(ArchDescriptor { input: (30, 32), channels: vec![4, 4, 4] }.validate().is_err());
        assert!(ArchDescriptor { input: (32, 32), channels: vec![] }.validate().is_err());
        assert_eq!(ArchDescriptor::default().seg_shape(), (8, 8));
    }
}
