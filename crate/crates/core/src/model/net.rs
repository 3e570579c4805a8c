//! Convolutional classifier on a flat parameter vector.
//!
//! Activations are stored channel-major over the whole batch (`C x N x H x W`)
//! so each convolution is a single GEMM per batch. Fully connected stages use
//! batch-major rows (`N x D`).

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::gemm::{gemm, Mat};
use crate::error::{Error, Result};

pub(crate) const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Tiny,
    Small,
    Base,
}

impl Preset {
    /// `(output channels, stride)` of every convolution stage.
    pub fn stages(&self) -> &'static [(usize, usize)] {
        match self {
            Preset::Tiny => &[(8, 2), (16, 2), (32, 2)],
            Preset::Small => &[(16, 1), (32, 2), (64, 2), (64, 2)],
            Preset::Base => &[(32, 1), (64, 2), (128, 2), (128, 2), (256, 2)],
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Preset::Tiny => "tiny",
            Preset::Small => "small",
            Preset::Base => "base",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "tiny" => Ok(Preset::Tiny),
            "small" => Ok(Preset::Small),
            "base" => Ok(Preset::Base),
            _ => Err(format!("unknown preset {s:?} (expected tiny, small or base)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub preset: Preset,
    /// Side of the square input image.
    pub input_size: usize,
    pub embedding_dim: usize,
    pub n_classes: usize,
    /// The last feature map is average pooled to a `pool_grid x pool_grid` grid.
    pub pool_grid: usize,
}

impl Architecture {
    pub fn new(preset: Preset, input_size: usize, n_classes: usize) -> Self {
        Self {
            preset,
            input_size,
            embedding_dim: 256,
            n_classes,
            pool_grid: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.embedding_dim == 0 || self.pool_grid == 0 {
            return Err(Error::usage("architecture sizes must be positive"));
        }
        let mut side = self.input_size;
        for &(_, stride) in self.preset.stages() {
            side = conv_out(side, stride);
        }
        if self.input_size == 0 || side < self.pool_grid {
            return Err(Error::usage(format!(
                "input size {} is too small for the {} preset",
                self.input_size, self.preset
            )));
        }
        Ok(())
    }
}

fn conv_out(side: usize, stride: usize) -> usize {
    if side == 0 {
        0
    } else {
        (side - 1) / stride + 1
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ConvLayer {
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub side_in: usize,
    pub side_out: usize,
    /// `cout x cin*9` weights.
    pub weight: usize,
    pub gamma: usize,
    pub beta: usize,
    /// Offsets into the statistics vector.
    pub mean: usize,
    pub var: usize,
}

/// Parameter and statistics offsets for an architecture.
#[derive(Debug, Clone)]
pub(crate) struct Network {
    pub arch: Architecture,
    pub convs: Vec<ConvLayer>,
    pub feat_dim: usize,
    pub fc1_w: usize,
    pub fc1_b: usize,
    pub fc2_w: usize,
    pub fc2_b: usize,
    pub n_params: usize,
    pub n_stats: usize,
}

impl Network {
    pub fn new(arch: &Architecture) -> Result<Self> {
        arch.validate()?;
        let mut convs = Vec::new();
        let (mut p, mut s) = (0usize, 0usize);
        let (mut cin, mut side) = (3usize, arch.input_size);
        for &(cout, stride) in arch.preset.stages() {
            let side_out = conv_out(side, stride);
            let weight = p;
            p += cout * cin * 9;
            let gamma = p;
            p += cout;
            let beta = p;
            p += cout;
            let mean = s;
            s += cout;
            let var = s;
            s += cout;
            convs.push(ConvLayer {
                cin,
                cout,
                stride,
                side_in: side,
                side_out,
                weight,
                gamma,
                beta,
                mean,
                var,
            });
            cin = cout;
            side = side_out;
        }
        let feat_dim = cin * arch.pool_grid * arch.pool_grid;
        let e = arch.embedding_dim;
        let k = arch.n_classes;
        let fc1_w = p;
        p += e * feat_dim;
        let fc1_b = p;
        p += e;
        let fc2_w = p;
        p += k * e;
        let fc2_b = p;
        p += k;
        Ok(Self {
            arch: arch.clone(),
            convs,
            feat_dim,
            fc1_w,
            fc1_b,
            fc2_w,
            fc2_b,
            n_params: p,
            n_stats: s,
        })
    }

    pub fn input_len(&self) -> usize {
        3 * self.arch.input_size * self.arch.input_size
    }

    /// Ranges holding multiplicative weights (the ones subject to decay).
    pub fn weight_ranges(&self) -> Vec<Range<usize>> {
        let mut r: Vec<Range<usize>> = self
            .convs
            .iter()
            .map(|c| c.weight..c.weight + c.cout * c.cin * 9)
            .collect();
        r.push(self.fc1_w..self.fc1_b);
        r.push(self.fc2_w..self.fc2_b);
        r
    }

    /// Forward pass in inference mode. `x` is `3 x N x S x S`. Returns the
    /// embeddings (`N x E`) and class probabilities (`N x K`).
    pub fn infer(&self, params: &[f64], stats: &[f64], x: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
        let act = self.trunk(params, stats, x, n, None);
        let pooled = self.pool(&act, n);
        let hidden = self.hidden(params, &pooled, n);
        let probs = self.classify(params, &hidden, n);
        (hidden, probs)
    }

    /// Runs the convolution stages with stored statistics. With
    /// `stop = Some(l)` returns the raw (pre-normalization) output of stage l.
    pub fn trunk(&self, params: &[f64], stats: &[f64], x: &[f64], n: usize, stop: Option<usize>) -> Vec<f64> {
        let mut act = x.to_vec();
        for (l, layer) in self.convs.iter().enumerate() {
            let mut z = conv_forward(layer, params, &act, n);
            if stop == Some(l) {
                return z;
            }
            let m = n * layer.side_out * layer.side_out;
            for c in 0..layer.cout {
                let inv = 1.0 / (stats[layer.var + c] + BN_EPS).sqrt();
                let scale = params[layer.gamma + c] * inv;
                let shift = params[layer.beta + c] - stats[layer.mean + c] * scale;
                for v in &mut z[c * m..(c + 1) * m] {
                    *v = (*v * scale + shift).max(0.0);
                }
            }
            act = z;
        }
        act
    }

    fn last(&self) -> &ConvLayer {
        self.convs.last().expect("at least one stage")
    }

    /// Adaptive average pooling of the last feature map to `N x feat_dim`.
    pub fn pool(&self, act: &[f64], n: usize) -> Vec<f64> {
        let layer = self.last();
        let (c_n, side, g) = (layer.cout, layer.side_out, self.arch.pool_grid);
        let mut out = vec![0.0; n * self.feat_dim];
        for c in 0..c_n {
            for i in 0..n {
                let plane = &act[(c * n + i) * side * side..(c * n + i + 1) * side * side];
                for gy in 0..g {
                    let (y0, y1) = bin(gy, side, g);
                    for gx in 0..g {
                        let (x0, x1) = bin(gx, side, g);
                        let mut s = 0.0;
                        for y in y0..y1 {
                            for x in x0..x1 {
                                s += plane[y * side + x];
                            }
                        }
                        out[i * self.feat_dim + (c * g + gy) * g + gx] = s / ((y1 - y0) * (x1 - x0)) as f64;
                    }
                }
            }
        }
        out
    }

    /// Embedding stage: `relu(pooled * W1^T + b1)`.
    pub fn hidden(&self, params: &[f64], pooled: &[f64], n: usize) -> Vec<f64> {
        let e = self.arch.embedding_dim;
        let mut h = vec![0.0; n * e];
        for row in h.chunks_mut(e) {
            row.copy_from_slice(&params[self.fc1_b..self.fc1_b + e]);
        }
        gemm(
            Mat::new(pooled, n, self.feat_dim),
            Mat::new(&params[self.fc1_w..self.fc1_b], e, self.feat_dim).t(),
            &mut h,
            1.0,
        );
        for v in &mut h {
            *v = v.max(0.0);
        }
        h
    }

    /// Output stage and softmax on `N x E` embeddings.
    pub fn classify(&self, params: &[f64], hidden: &[f64], n: usize) -> Vec<f64> {
        let (e, k) = (self.arch.embedding_dim, self.arch.n_classes);
        let mut logits = vec![0.0; n * k];
        for row in logits.chunks_mut(k) {
            row.copy_from_slice(&params[self.fc2_b..self.fc2_b + k]);
        }
        gemm(
            Mat::new(hidden, n, e),
            Mat::new(&params[self.fc2_w..self.fc2_b], k, e).t(),
            &mut logits,
            1.0,
        );
        for row in logits.chunks_mut(k) {
            softmax_in_place(row);
        }
        logits
    }

    /// Mean cross-entropy of a batch with batch-statistics normalization.
    /// When `grad` is given it receives the gradient (overwritten).
    pub fn loss_and_grad(
        &self,
        params: &[f64],
        x: &[f64],
        n: usize,
        labels: &[usize],
        grad: Option<&mut [f64]>,
    ) -> f64 {
        assert_eq!(labels.len(), n);
        let k = self.arch.n_classes;
        let e = self.arch.embedding_dim;

        // forward, keeping what the backward pass needs
        let mut cols_all = Vec::with_capacity(self.convs.len());
        let mut xhat_all = Vec::with_capacity(self.convs.len());
        let mut inv_all = Vec::with_capacity(self.convs.len());
        let mut act_all: Vec<Vec<f64>> = Vec::with_capacity(self.convs.len());
        for layer in &self.convs {
            let input = act_all.last().map(|a| a.as_slice()).unwrap_or(x);
            let cols = im2col(layer, input, n);
            let m = n * layer.side_out * layer.side_out;
            let mut z = vec![0.0; layer.cout * m];
            gemm(
                Mat::new(&params[layer.weight..layer.gamma], layer.cout, layer.cin * 9),
                Mat::new(&cols, layer.cin * 9, m),
                &mut z,
                0.0,
            );
            let mut inv = vec![0.0; layer.cout];
            let mut a = vec![0.0; layer.cout * m];
            for c in 0..layer.cout {
                let zc = &mut z[c * m..(c + 1) * m];
                let (mean, var) = mean_var(zc);
                inv[c] = 1.0 / (var + BN_EPS).sqrt();
                let (g, b) = (params[layer.gamma + c], params[layer.beta + c]);
                for (v, o) in zc.iter_mut().zip(&mut a[c * m..(c + 1) * m]) {
                    *v = (*v - mean) * inv[c];
                    *o = (*v * g + b).max(0.0);
                }
            }
            cols_all.push(cols);
            xhat_all.push(z);
            inv_all.push(inv);
            act_all.push(a);
        }
        let pooled = self.pool(act_all.last().unwrap(), n);
        let hidden = self.hidden(params, &pooled, n);
        let probs = self.classify(params, &hidden, n);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -probs[i * k + y].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / n as f64;

        let Some(grad) = grad else {
            return loss;
        };
        assert_eq!(grad.len(), self.n_params);
        grad.fill(0.0);

        // output stage
        let mut dlogits = probs;
        for (i, &y) in labels.iter().enumerate() {
            dlogits[i * k + y] -= 1.0;
        }
        for v in &mut dlogits {
            *v /= n as f64;
        }
        gemm(
            Mat::new(&dlogits, n, k).t(),
            Mat::new(&hidden, n, e),
            &mut grad[self.fc2_w..self.fc2_b],
            0.0,
        );
        col_sums(&dlogits, n, k, &mut grad[self.fc2_b..self.fc2_b + k]);
        let mut dhidden = vec![0.0; n * e];
        gemm(
            Mat::new(&dlogits, n, k),
            Mat::new(&params[self.fc2_w..self.fc2_b], k, e),
            &mut dhidden,
            0.0,
        );
        for (d, h) in dhidden.iter_mut().zip(&hidden) {
            if *h <= 0.0 {
                *d = 0.0;
            }
        }

        // embedding stage
        gemm(
            Mat::new(&dhidden, n, e).t(),
            Mat::new(&pooled, n, self.feat_dim),
            &mut grad[self.fc1_w..self.fc1_b],
            0.0,
        );
        col_sums(&dhidden, n, e, &mut grad[self.fc1_b..self.fc1_b + e]);
        let mut dpooled = vec![0.0; n * self.feat_dim];
        gemm(
            Mat::new(&dhidden, n, e),
            Mat::new(&params[self.fc1_w..self.fc1_b], e, self.feat_dim),
            &mut dpooled,
            0.0,
        );
        let mut dact = self.unpool(&dpooled, n);

        // convolution stages, last to first
        for l in (0..self.convs.len()).rev() {
            let layer = &self.convs[l];
            let m = n * layer.side_out * layer.side_out;
            let a = &act_all[l];
            let xhat = &xhat_all[l];
            let mut dz = vec![0.0; layer.cout * m];
            for c in 0..layer.cout {
                let r = c * m..(c + 1) * m;
                let g = params[layer.gamma + c];
                let (mut sum_d, mut sum_dx) = (0.0, 0.0);
                for j in r.clone() {
                    let d = if a[j] > 0.0 { dact[j] } else { 0.0 };
                    dz[j] = d;
                    sum_d += d;
                    sum_dx += d * xhat[j];
                }
                grad[layer.gamma + c] = sum_dx;
                grad[layer.beta + c] = sum_d;
                let scale = g * inv_all[l][c] / m as f64;
                for j in r {
                    dz[j] = scale * (m as f64 * dz[j] - sum_d - xhat[j] * sum_dx);
                }
            }
            gemm(
                Mat::new(&dz, layer.cout, m),
                Mat::new(&cols_all[l], layer.cin * 9, m).t(),
                &mut grad[layer.weight..layer.gamma],
                0.0,
            );
            if l > 0 {
                let mut dcols = vec![0.0; layer.cin * 9 * m];
                gemm(
                    Mat::new(&params[layer.weight..layer.gamma], layer.cout, layer.cin * 9).t(),
                    Mat::new(&dz, layer.cout, m),
                    &mut dcols,
                    0.0,
                );
                dact = col2im(layer, &dcols, n);
            }
        }
        loss
    }

    fn unpool(&self, dpooled: &[f64], n: usize) -> Vec<f64> {
        let layer = self.last();
        let (c_n, side, g) = (layer.cout, layer.side_out, self.arch.pool_grid);
        let mut out = vec![0.0; c_n * n * side * side];
        for c in 0..c_n {
            for i in 0..n {
                let plane = &mut out[(c * n + i) * side * side..(c * n + i + 1) * side * side];
                for gy in 0..g {
                    let (y0, y1) = bin(gy, side, g);
                    for gx in 0..g {
                        let (x0, x1) = bin(gx, side, g);
                        let d = dpooled[i * self.feat_dim + (c * g + gy) * g + gx]
                            / ((y1 - y0) * (x1 - x0)) as f64;
                        for y in y0..y1 {
                            for x in x0..x1 {
                                plane[y * side + x] += d;
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Half-open pixel range of adaptive pooling bin `i` out of `g`.
fn bin(i: usize, side: usize, g: usize) -> (usize, usize) {
    (i * side / g, ((i + 1) * side).div_ceil(g))
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

fn col_sums(m: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    out.fill(0.0);
    for r in 0..rows {
        for (o, v) in out.iter_mut().zip(&m[r * cols..(r + 1) * cols]) {
            *o += v;
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn conv_forward(layer: &ConvLayer, params: &[f64], input: &[f64], n: usize) -> Vec<f64> {
    let cols = im2col(layer, input, n);
    let m = n * layer.side_out * layer.side_out;
    let mut z = vec![0.0; layer.cout * m];
    gemm(
        Mat::new(&params[layer.weight..layer.gamma], layer.cout, layer.cin * 9),
        Mat::new(&cols, layer.cin * 9, m),
        &mut z,
        0.0,
    );
    z
}

/// `cin x N x S x S` to `cin*9 x N*So*So` patches for a 3x3, pad 1 kernel.
fn im2col(layer: &ConvLayer, input: &[f64], n: usize) -> Vec<f64> {
    let (si, so, s) = (layer.side_in, layer.side_out, layer.stride);
    let m = n * so * so;
    let mut cols = vec![0.0; layer.cin * 9 * m];
    for ci in 0..layer.cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 3 + ky) * 3 + kx) * m..][..m];
                for i in 0..n {
                    let plane = &input[(ci * n + i) * si * si..][..si * si];
                    for oy in 0..so {
                        let iy = (oy * s + ky) as isize - 1;
                        if iy < 0 || iy >= si as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * si..][..si];
                        let dst = &mut row[(i * so + oy) * so..][..so];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - 1;
                            if ix >= 0 && ix < si as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im(layer: &ConvLayer, cols: &[f64], n: usize) -> Vec<f64> {
    let (si, so, s) = (layer.side_in, layer.side_out, layer.stride);
    let m = n * so * so;
    let mut out = vec![0.0; layer.cin * n * si * si];
    for ci in 0..layer.cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 3 + ky) * 3 + kx) * m..][..m];
                for i in 0..n {
                    let plane = &mut out[(ci * n + i) * si * si..][..si * si];
                    for oy in 0..so {
                        let iy = (oy * s + ky) as isize - 1;
                        if iy < 0 || iy >= si as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * si..][..si];
                        let src = &row[(i * so + oy) * so..][..so];
                        for (ox, v) in src.iter().enumerate() {
                            let ix = (ox * s + kx) as isize - 1;
                            if ix >= 0 && ix < si as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// One parameter's analytic gradient next to its central-difference estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientProbe {
    pub param: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

/// Compares the backward pass with central finite differences (step 1e-5)
/// on a random micro-batch of four images, for ten parameters drawn from
/// every parameter group of a three-stage network.
pub fn gradient_check(arch: &Architecture, seed: u64) -> Result<Vec<GradientProbe>> {
    let net = Network::new(arch)?;
    if net.convs.len() < 3 {
        return Err(Error::usage("gradient check needs at least three convolution stages"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params: Vec<f64> = (0..net.n_params).map(|_| rng.gen_range(-0.3..0.3)).collect();
    for c in &net.convs {
        for j in 0..c.cout {
            params[c.gamma + j] = 1.0 + 0.1 * rng.gen_range(-1.0..1.0);
        }
    }
    let n = 4;
    let x: Vec<f64> = (0..n * net.input_len()).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let labels: Vec<usize> = (0..n).map(|i| i % arch.n_classes).collect();
    let mut grad = vec![0.0; net.n_params];
    net.loss_and_grad(&params, &x, n, &labels, Some(&mut grad));

    let mut picks: Vec<usize> = Vec::new();
    for c in net.convs.iter().take(3) {
        picks.push(rng.gen_range(c.weight..c.gamma));
    }
    picks.push(rng.gen_range(net.convs[0].gamma..net.convs[0].beta));
    picks.push(rng.gen_range(net.convs[1].beta..net.convs[1].beta + net.convs[1].cout));
    picks.push(rng.gen_range(net.convs[2].gamma..net.convs[2].beta));
    picks.push(rng.gen_range(net.fc1_w..net.fc1_b));
    picks.push(rng.gen_range(net.fc1_b..net.fc2_w));
    picks.push(rng.gen_range(net.fc2_w..net.fc2_b));
    picks.push(rng.gen_range(net.fc2_b..net.n_params));

    let h = 1e-5;
    Ok(picks
        .into_iter()
        .map(|i| {
            let mut p = params.clone();
            p[i] += h;
            let up = net.loss_and_grad(&p, &x, n, &labels, None);
            p[i] -= 2.0 * h;
            let down = net.loss_and_grad(&p, &x, n, &labels, None);
            let numeric = (up - down) / (2.0 * h);
            GradientProbe {
                param: i,
                analytic: grad[i],
                numeric,
                relative_error: (numeric - grad[i]).abs() / numeric.abs().max(grad[i].abs()).max(1e-7),
            }
        })
        .collect())
}
