//! The classifier: three 3x3 same-padding convolutions (32/64/128 channels,
//! ReLU, 2x2 max-pool each) and one fully connected layer to 2 logits.
//!
//! All arithmetic runs in f64, but parameters are snapped to the f32 grid
//! after every update, so the f32 checkpoint format round-trips without any
//! loss and loaded models predict bit-identically to in-memory ones.

pub mod checkpoint;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusedImage;
use crate::hashing;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnnConfig {
    pub input_rows: usize,
    pub input_cols: usize,
    pub conv_channels: [usize; 3],
    pub kernel: usize,
    pub pool: usize,
    pub classes: usize,
}

impl CnnConfig {
    /// The production architecture for an m-backend combo: (32·m)x32 input,
    /// 32/64/128 channels.
    pub fn for_input_rows(rows: usize) -> CnnConfig {
        CnnConfig {
            input_rows: rows,
            input_cols: 32,
            conv_channels: [32, 64, 128],
            kernel: 3,
            pool: 2,
            classes: 2,
        }
    }

    /// Structural constraints the math depends on.
    fn validate_structure(&self) -> Result<()> {
        let ok = self.kernel == 3
            && self.pool == 2
            && self.classes == 2
            && self.input_rows >= 1
            && self.input_cols >= 1
            && self.conv_channels.iter().all(|&c| c >= 1);
        if ok {
            Ok(())
        } else {
            Err(Error::ArchInvalid {
                message: format!("{self:?} (supported: 3x3 kernels, 2x2 pool, 2 classes)"),
            })
        }
    }

    /// Production-shape constraint: one to three 32-row embedding blocks.
    pub fn validate(&self) -> Result<()> {
        self.validate_structure()?;
        if ![32, 64, 96].contains(&self.input_rows) || self.input_cols != 32 {
            return Err(Error::ArchInvalid {
                message: format!(
                    "input shape {}x{} unsupported (expected 32/64/96 rows x 32 cols)",
                    self.input_rows, self.input_cols
                ),
            });
        }
        Ok(())
    }

    /// Stable 64-bit architecture fingerprint, embedded in checkpoints.
    pub fn fingerprint(&self) -> u64 {
        hashing::stable_seed(&[
            "cnn-v1",
            &format!(
                "{}x{}:{},{},{}:k{}:p{}:c{}",
                self.input_rows,
                self.input_cols,
                self.conv_channels[0],
                self.conv_channels[1],
                self.conv_channels[2],
                self.kernel,
                self.pool,
                self.classes
            ),
        ])
    }
}

/// Shapes at every stage: what enters each conv, what leaves it, and what
/// the 2x2 ceil-mode pool reduces it to.
#[derive(Debug, Clone)]
struct StagePlan {
    conv_in: [(usize, usize, usize); 3],
    conv_out: [(usize, usize, usize); 3],
    pool_out: [(usize, usize, usize); 3],
    flat: usize,
}

impl StagePlan {
    fn new(config: &CnnConfig) -> StagePlan {
        let mut conv_in = [(0, 0, 0); 3];
        let mut conv_out = [(0, 0, 0); 3];
        let mut pool_out = [(0, 0, 0); 3];
        let (mut ch, mut h, mut w) = (1usize, config.input_rows, config.input_cols);
        for l in 0..3 {
            conv_in[l] = (ch, h, w);
            ch = config.conv_channels[l];
            conv_out[l] = (ch, h, w);
            // Ceil-mode pooling: a trailing odd row/column forms its own
            // window, so tiny test architectures never collapse to zero.
            h = h.div_ceil(2);
            w = w.div_ceil(2);
            pool_out[l] = (ch, h, w);
        }
        StagePlan {
            conv_in,
            conv_out,
            pool_out,
            flat: ch * h * w,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn layout(config: &CnnConfig, plan: &StagePlan) -> Vec<TensorSpec> {
    let mut tensors = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, dims: Vec<usize>| {
        let spec = TensorSpec {
            name,
            dims,
            offset,
        };
        offset += spec.len();
        tensors.push(spec);
    };
    for l in 0..3 {
        let (ic, _, _) = plan.conv_in[l];
        let oc = config.conv_channels[l];
        push(format!("conv{}.weight", l + 1), vec![oc, ic, 3, 3]);
        push(format!("conv{}.bias", l + 1), vec![oc]);
    }
    push("fc.weight".into(), vec![config.classes, plan.flat]);
    push("fc.bias".into(), vec![config.classes]);
    tensors
}

/// One per-sample prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub prob_machine: f64,
    pub label: u8,
}

pub struct Cnn {
    pub config: CnnConfig,
    plan: StagePlan,
    tensors: Vec<TensorSpec>,
    params: Vec<f64>,
    /// Seed of the training run that produced these weights (the build seed
    /// until `train` overwrites it); persisted in checkpoints.
    pub train_seed: u64,
}

impl std::fmt::Debug for Cnn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Cnn")
            .field("config", &self.config)
            .field("num_params", &self.params.len())
            .field("train_seed", &self.train_seed)
            .finish()
    }
}

impl Cnn {
    /// Builds a production model (32/64/96-row inputs only).
    pub fn build(config: CnnConfig, seed: u64) -> Result<Cnn> {
        config.validate()?;
        Ok(Cnn::init(config, seed))
    }

    /// Builds any structurally valid instance, including the miniature
    /// architectures used by gradient checks.
    pub fn build_unchecked(config: CnnConfig, seed: u64) -> Result<Cnn> {
        config.validate_structure()?;
        Ok(Cnn::init(config, seed))
    }

    fn init(config: CnnConfig, seed: u64) -> Cnn {
        let plan = StagePlan::new(&config);
        let tensors = layout(&config, &plan);
        let total = tensors.iter().map(TensorSpec::len).sum();
        let mut params = vec![0f64; total];
        let mut rng = rng::rng_from_seed(seed);
        // He-uniform weights drawn in fixed tensor order; biases stay zero.
        for spec in &tensors {
            if spec.name.ends_with(".weight") {
                let fan_in: usize = spec.dims[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                for p in &mut params[spec.offset..spec.offset + spec.len()] {
                    *p = rng::uniform_f64(&mut rng, -bound, bound);
                }
            }
        }
        let mut model = Cnn {
            config,
            plan,
            tensors,
            params,
            train_seed: seed,
        };
        model.snap_params_to_f32();
        model
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameter access for optimizers and finite-difference checks.
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Rounds every parameter to its nearest f32, keeping the working copy
    /// in f64. Called after construction and after each optimizer step.
    pub fn snap_params_to_f32(&mut self) {
        for p in &mut self.params {
            *p = *p as f32 as f64;
        }
    }

    fn tensor_slice(&self, name: &str) -> &[f64] {
        let spec = self
            .tensors
            .iter()
            .find(|t| t.name == name)
            .expect("tensor names are fixed by the layout");
        &self.params[spec.offset..spec.offset + spec.len()]
    }

    pub fn workspace(&self) -> Workspace {
        Workspace::new(&self.plan)
    }

    fn check_image(&self, image: &FusedImage) -> Result<()> {
        if image.rows != self.config.input_rows || image.cols != self.config.input_cols {
            return Err(Error::DimensionMismatch {
                context: format!("image {} vs model input", image.sample_id),
                expected: self.config.input_rows * self.config.input_cols,
                actual: image.rows * image.cols,
            });
        }
        Ok(())
    }

    /// Forward pass for one image; fills the workspace and returns logits.
    pub fn forward(&self, input: &[f64], ws: &mut Workspace) -> [f64; 2] {
        let mut x: &[f64] = input;
        for l in 0..3 {
            let (ic, h, w) = self.plan.conv_in[l];
            let oc = self.config.conv_channels[l];
            {
                let out = &mut ws.conv_out[l];
                conv3x3_forward(
                    x,
                    (ic, h, w),
                    self.tensor_slice(&format!("conv{}.weight", l + 1)),
                    self.tensor_slice(&format!("conv{}.bias", l + 1)),
                    oc,
                    out,
                );
                for v in out.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            let (pc, ph, pw) = self.plan.pool_out[l];
            debug_assert_eq!(pc, oc);
            pool2x2_forward(
                &ws.conv_out[l],
                (oc, h, w),
                (ph, pw),
                &mut ws.pool_out[l],
                &mut ws.argmax[l],
            );
            x = &ws.pool_out[l];
        }
        let flat = &ws.pool_out[2];
        let fw = self.tensor_slice("fc.weight");
        let fb = self.tensor_slice("fc.bias");
        let mut logits = [0f64; 2];
        for (k, logit) in logits.iter_mut().enumerate() {
            let row = &fw[k * self.plan.flat..(k + 1) * self.plan.flat];
            *logit = fb[k] + dot(row, flat);
        }
        logits
    }

    /// Backward pass for one image. `dlogits` is the loss gradient at the
    /// logits; parameter gradients are accumulated into `grad`.
    fn backward(&self, input: &[f64], ws: &mut Workspace, dlogits: [f64; 2], grad: &mut [f64]) {
        let flat_len = self.plan.flat;
        let fw_spec = self.spec("fc.weight");
        let fb_spec = self.spec("fc.bias");
        {
            let flat = &ws.pool_out[2];
            let dflat = &mut ws.d_pool[2];
            dflat.iter_mut().for_each(|v| *v = 0.0);
            for k in 0..2 {
                grad[fb_spec.offset + k] += dlogits[k];
                let wrow = &self.params[fw_spec.offset + k * flat_len..fw_spec.offset + (k + 1) * flat_len];
                let grow = &mut grad[fw_spec.offset + k * flat_len..fw_spec.offset + (k + 1) * flat_len];
                for f in 0..flat_len {
                    grow[f] += dlogits[k] * flat[f];
                    dflat[f] += dlogits[k] * wrow[f];
                }
            }
        }
        for l in (0..3).rev() {
            let (ic, h, w) = self.plan.conv_in[l];
            let oc = self.config.conv_channels[l];
            // Un-pool: gradient flows only to each window's argmax cell,
            // then the ReLU mask zeroes inactive cells.
            {
                let dcv = &mut ws.d_conv[l];
                dcv.iter_mut().for_each(|v| *v = 0.0);
                let dpl = &ws.d_pool[l];
                for (p, &src) in ws.argmax[l].iter().enumerate() {
                    dcv[src] += dpl[p];
                }
                let act = &ws.conv_out[l];
                for (d, a) in dcv.iter_mut().zip(act) {
                    if *a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let wspec = self.spec(&format!("conv{}.weight", l + 1));
            let bspec = self.spec(&format!("conv{}.bias", l + 1));
            // Split the workspace into disjoint field borrows: the layer's
            // own gradient is read while the previous stage's is written.
            let Workspace {
                ref pool_out,
                ref d_conv,
                ref mut d_pool,
                ..
            } = *ws;
            let layer_input = if l == 0 { input } else { &pool_out[l - 1] };
            let din = if l == 0 {
                None
            } else {
                let slot = &mut d_pool[l - 1];
                slot.iter_mut().for_each(|v| *v = 0.0);
                Some(&mut slot[..])
            };
            // The bias tensor sits directly after its weight tensor.
            debug_assert_eq!(bspec.offset, wspec.offset + wspec.len());
            let (gw, gb) = grad.split_at_mut(bspec.offset);
            conv3x3_backward(
                layer_input,
                (ic, h, w),
                &self.params[wspec.offset..wspec.offset + wspec.len()],
                oc,
                &d_conv[l],
                &mut gw[wspec.offset..],
                &mut gb[..bspec.len()],
                din,
            );
        }
    }

    fn spec(&self, name: &str) -> &TensorSpec {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .expect("tensor names are fixed by the layout")
    }

    /// Mean cross-entropy loss and parameter gradient over a batch,
    /// accumulated per sample in input order (deterministic).
    pub fn loss_and_grad(&self, batch: &[&FusedImage]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::EmptyInput {
                what: "training batch".into(),
            });
        }
        let mut ws = self.workspace();
        let mut grad = vec![0f64; self.params.len()];
        let mut loss = 0f64;
        let mut input = vec![0f64; self.config.input_rows * self.config.input_cols];
        for image in batch {
            self.check_image(image)?;
            for (x, &v) in input.iter_mut().zip(&image.data) {
                *x = v as f64;
            }
            let logits = self.forward(&input, &mut ws);
            let (sample_loss, dlogits) = softmax_ce(logits, image.label);
            loss += sample_loss;
            self.backward(&input, &mut ws, dlogits, &mut grad);
        }
        let n = batch.len() as f64;
        loss /= n;
        for g in &mut grad {
            *g /= n;
        }
        Ok((loss, grad))
    }

    /// Per-sample class probabilities and hard labels at threshold 0.5.
    /// Evaluation is sample-by-sample, so results are independent of any
    /// batch partitioning.
    pub fn predict(&self, images: &[FusedImage]) -> Result<Vec<Prediction>> {
        let mut ws = self.workspace();
        let mut input = vec![0f64; self.config.input_rows * self.config.input_cols];
        let mut out = Vec::with_capacity(images.len());
        for image in images {
            self.check_image(image)?;
            for (x, &v) in input.iter_mut().zip(&image.data) {
                *x = v as f64;
            }
            let logits = self.forward(&input, &mut ws);
            let prob_machine = softmax_prob1(logits);
            out.push(Prediction {
                prob_machine,
                label: u8::from(prob_machine >= 0.5),
            });
        }
        Ok(out)
    }
}

/// Reusable per-sample buffers sized for one architecture.
pub struct Workspace {
    conv_out: [Vec<f64>; 3],
    pool_out: [Vec<f64>; 3],
    argmax: [Vec<usize>; 3],
    d_conv: [Vec<f64>; 3],
    d_pool: [Vec<f64>; 3],
}

impl Workspace {
    fn new(plan: &StagePlan) -> Workspace {
        let volume = |(c, h, w): (usize, usize, usize)| c * h * w;
        Workspace {
            conv_out: plan.conv_out.map(|d| vec![0f64; volume(d)]),
            pool_out: plan.pool_out.map(|d| vec![0f64; volume(d)]),
            argmax: plan.pool_out.map(|d| vec![0usize; volume(d)]),
            d_conv: plan.conv_out.map(|d| vec![0f64; volume(d)]),
            d_pool: plan.pool_out.map(|d| vec![0f64; volume(d)]),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable softmax cross-entropy for 2 logits; returns the loss
/// and its gradient at the logits.
fn softmax_ce(logits: [f64; 2], label: u8) -> (f64, [f64; 2]) {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let z = e0 + e1;
    let p = [e0 / z, e1 / z];
    let y = label as usize;
    let loss = -(p[y].max(f64::MIN_POSITIVE)).ln();
    let mut dlogits = p;
    dlogits[y] -= 1.0;
    (loss, dlogits)
}

fn softmax_prob1(logits: [f64; 2]) -> f64 {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    e1 / (e0 + e1)
}

/// Same-padding 3x3 convolution, written as nine shifted row operations per
/// (in, out) channel pair so the inner loops stay contiguous.
fn conv3x3_forward(
    input: &[f64],
    (ic, h, w): (usize, usize, usize),
    weight: &[f64],
    bias: &[f64],
    oc: usize,
    out: &mut [f64],
) {
    let plane = h * w;
    for o in 0..oc {
        out[o * plane..(o + 1) * plane].fill(bias[o]);
        for i in 0..ic {
            let in_plane = &input[i * plane..(i + 1) * plane];
            let wbase = (o * ic + i) * 9;
            for kh in 0..3usize {
                let dy = kh as isize - 1;
                for kw in 0..3usize {
                    let dx = kw as isize - 1;
                    let coeff = weight[wbase + kh * 3 + kw];
                    if coeff == 0.0 {
                        continue;
                    }
                    let (y0, y1) = shift_range(h, dy);
                    let (x0, x1) = shift_range(w, dx);
                    for y in y0..y1 {
                        let iy = (y as isize + dy) as usize;
                        let ix0 = (x0 as isize + dx) as usize;
                        let orow = &mut out[o * plane + y * w + x0..o * plane + y * w + x1];
                        let irow = &in_plane[iy * w + ix0..iy * w + ix0 + (x1 - x0)];
                        for (ov, iv) in orow.iter_mut().zip(irow) {
                            *ov += coeff * iv;
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of the 3x3 convolution: bias and weight gradients always,
/// input gradients when `din` is given (skipped for the first layer).
#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f64],
    (ic, h, w): (usize, usize, usize),
    weight: &[f64],
    oc: usize,
    dout: &[f64],
    dweight: &mut [f64],
    dbias: &mut [f64],
    din: Option<&mut [f64]>,
) {
    let plane = h * w;
    for o in 0..oc {
        let dout_plane = &dout[o * plane..(o + 1) * plane];
        dbias[o] += dout_plane.iter().sum::<f64>();
        for i in 0..ic {
            let in_plane = &input[i * plane..(i + 1) * plane];
            let wbase = (o * ic + i) * 9;
            for kh in 0..3usize {
                let dy = kh as isize - 1;
                for kw in 0..3usize {
                    let dx = kw as isize - 1;
                    let (y0, y1) = shift_range(h, dy);
                    let (x0, x1) = shift_range(w, dx);
                    let mut acc = 0f64;
                    for y in y0..y1 {
                        let iy = (y as isize + dy) as usize;
                        let ix0 = (x0 as isize + dx) as usize;
                        let drow = &dout_plane[y * w + x0..y * w + x1];
                        let irow = &in_plane[iy * w + ix0..iy * w + ix0 + (x1 - x0)];
                        acc += dot(drow, irow);
                    }
                    dweight[wbase + kh * 3 + kw] += acc;
                }
            }
        }
    }
    if let Some(din) = din {
        for o in 0..oc {
            let dout_plane = &dout[o * plane..(o + 1) * plane];
            for i in 0..ic {
                let wbase = (o * ic + i) * 9;
                for kh in 0..3usize {
                    let dy = kh as isize - 1;
                    for kw in 0..3usize {
                        let dx = kw as isize - 1;
                        let coeff = weight[wbase + kh * 3 + kw];
                        if coeff == 0.0 {
                            continue;
                        }
                        let (y0, y1) = shift_range(h, dy);
                        let (x0, x1) = shift_range(w, dx);
                        for y in y0..y1 {
                            let iy = (y as isize + dy) as usize;
                            let ix0 = (x0 as isize + dx) as usize;
                            let drow = &dout_plane[y * w + x0..y * w + x1];
                            let irow =
                                &mut din[i * plane + iy * w + ix0..i * plane + iy * w + ix0 + (x1 - x0)];
                            for (dv, &gv) in irow.iter_mut().zip(drow) {
                                *dv += coeff * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Output rows `[y0, y1)` whose shifted input row `y + dy` stays in bounds.
fn shift_range(n: usize, d: isize) -> (usize, usize) {
    let start = (-d).max(0) as usize;
    let end = (n as isize - d.max(0)) as usize;
    (start, end.max(start))
}

/// 2x2 max-pool with ceil-mode windows (trailing odd rows/columns form
/// partial windows). Records each window's argmax for the backward pass;
/// ties break toward the first cell in scan order.
fn pool2x2_forward(
    input: &[f64],
    (c, h, w): (usize, usize, usize),
    (ph, pw): (usize, usize),
    out: &mut [f64],
    argmax: &mut [usize],
) {
    let plane = h * w;
    let pplane = ph * pw;
    for ch in 0..c {
        let in_plane = &input[ch * plane..(ch + 1) * plane];
        for py in 0..ph {
            for px in 0..pw {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for y in (2 * py)..(2 * py + 2).min(h) {
                    for x in (2 * px)..(2 * px + 2).min(w) {
                        let v = in_plane[y * w + x];
                        if v > best {
                            best = v;
                            best_idx = y * w + x;
                        }
                    }
                }
                out[ch * pplane + py * pw + px] = best;
                argmax[ch * pplane + py * pw + px] = ch * plane + best_idx;
            }
        }
    }
}
