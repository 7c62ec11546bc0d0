//! Dense grid arithmetic shared by every stage of the pipeline.
//!
//! Grids are row-major with the channel index innermost, so the value at
//! `(y, x, c)` of an `H×W×C` grid lives at `(y * W + x) * C + c`. All
//! spatial filters use replicate-edge padding.

use crate::error::{ensure, Result};

/// Fractional parts closer than this to an integer are treated as integers
/// by the bilinear sampler, so warps that are the identity up to round-off
/// reproduce their source exactly.
pub const SNAP_EPS: f64 = 1e-9;

/// A dense `height × width × channels` grid of reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid2 {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Grid2 {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            data.len() == height * width * channels,
            ShapeMismatch,
            "grid {height}x{width}x{channels} needs {} values, got {}",
            height * width * channels,
            data.len()
        );
        ensure!(
            data.iter().all(|v| v.is_finite()),
            Contract,
            "grid values must be finite"
        );
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    #[inline]
    pub(crate) fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let start = (y * self.width + x) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    /// Value at `(y, x, c)` with coordinates clamped into the grid.
    #[inline]
    pub fn at_clamped(&self, y: isize, x: isize, c: usize) -> f64 {
        let y = y.clamp(0, self.height as isize - 1) as usize;
        let x = x.clamp(0, self.width as isize - 1) as usize;
        self.at(y, x, c)
    }

    pub fn same_shape(&self, other: &Grid2) -> bool {
        self.shape() == other.shape()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid2 {
        Grid2 {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn zip_map(&self, other: &Grid2, f: impl Fn(f64, f64) -> f64) -> Result<Grid2> {
        ensure!(
            self.same_shape(other),
            ShapeMismatch,
            "{:?} vs {:?}",
            self.shape(),
            other.shape()
        );
        Ok(Grid2 {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            ..*self
        })
    }

    pub fn add(&self, other: &Grid2) -> Result<Grid2> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn scale(&self, s: f64) -> Grid2 {
        self.map(|v| v * s)
    }

    /// Keeps channels `start..start + count`.
    pub fn select_channels(&self, start: usize, count: usize) -> Result<Grid2> {
        ensure!(
            start + count <= self.channels,
            Contract,
            "channel range {start}..{} exceeds {}",
            start + count,
            self.channels
        );
        Ok(Grid2::from_fn(self.height, self.width, count, |y, x, c| {
            self.at(y, x, start + c)
        }))
    }

    /// Averages channels into a single-channel grid.
    pub fn channel_mean(&self) -> Grid2 {
        let inv = 1.0 / self.channels as f64;
        Grid2::from_fn(self.height, self.width, 1, |y, x, _| {
            self.pixel(y, x).iter().sum::<f64>() * inv
        })
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }
}

/// A dense `bins × height × width × channels` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid3 {
    bins: usize,
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Grid3 {
    pub fn new(
        bins: usize,
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        ensure!(
            data.len() == bins * height * width * channels,
            ShapeMismatch,
            "grid {bins}x{height}x{width}x{channels} needs {} values, got {}",
            bins * height * width * channels,
            data.len()
        );
        ensure!(
            data.iter().all(|v| v.is_finite()),
            Contract,
            "grid values must be finite"
        );
        Ok(Self {
            bins,
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(bins: usize, height: usize, width: usize, channels: usize) -> Self {
        Self {
            bins,
            height,
            width,
            channels,
            data: vec![0.0; bins * height * width * channels],
        }
    }

    /// Stacks equally shaped 2D slices along the bin axis.
    pub fn from_slices(slices: Vec<Grid2>) -> Result<Self> {
        ensure!(!slices.is_empty(), Contract, "need at least one slice");
        let (h, w, c) = slices[0].shape();
        ensure!(
            slices.iter().all(|s| s.shape() == (h, w, c)),
            ShapeMismatch,
            "volume slices differ in shape"
        );
        let bins = slices.len();
        let mut data = Vec::with_capacity(bins * h * w * c);
        for s in slices {
            data.extend(s.data);
        }
        Ok(Self {
            bins,
            height: h,
            width: w,
            channels: c,
            data,
        })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.bins, self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn index(&self, i: usize, y: usize, x: usize, c: usize) -> usize {
        ((i * self.height + y) * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn at(&self, i: usize, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(i, y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, y: usize, x: usize, c: usize, v: f64) {
        let k = self.index(i, y, x, c);
        self.data[k] = v;
    }

    #[inline]
    pub fn cell(&self, i: usize, y: usize, x: usize) -> &[f64] {
        let start = self.index(i, y, x, 0);
        &self.data[start..start + self.channels]
    }

    #[inline]
    pub(crate) fn cell_mut(&mut self, i: usize, y: usize, x: usize) -> &mut [f64] {
        let start = self.index(i, y, x, 0);
        &mut self.data[start..start + self.channels]
    }

    /// Copies out bin `i` as a 2D grid.
    pub fn slice(&self, i: usize) -> Grid2 {
        let n = self.height * self.width * self.channels;
        Grid2 {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data[i * n..(i + 1) * n].to_vec(),
        }
    }
}

/// A 3×3 convolution with replicate-edge padding.
///
/// Weights are laid out `[ky][kx][in][out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel3x3 {
    in_channels: usize,
    out_channels: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl ConvKernel3x3 {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        ensure!(
            weights.len() == 9 * in_channels * out_channels,
            ShapeMismatch,
            "kernel {in_channels}->{out_channels} needs {} weights, got {}",
            9 * in_channels * out_channels,
            weights.len()
        );
        ensure!(
            bias.len() == out_channels,
            ShapeMismatch,
            "bias needs {out_channels} values, got {}",
            bias.len()
        );
        ensure!(
            weights.iter().chain(&bias).all(|v| v.is_finite()),
            Contract,
            "kernel weights must be finite"
        );
        Ok(Self {
            in_channels,
            out_channels,
            weights,
            bias,
        })
    }

    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            weights: vec![0.0; 9 * in_channels * out_channels],
            bias: vec![0.0; out_channels],
        }
    }

    /// Center tap 1 on matching channels: passes its input through.
    pub fn identity(channels: usize) -> Self {
        let mut k = Self::zeros(channels, channels);
        for c in 0..channels {
            k.set_weight(1, 1, c, c, 1.0);
        }
        k
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    #[inline]
    fn weight_index(&self, ky: usize, kx: usize, i: usize, o: usize) -> usize {
        ((ky * 3 + kx) * self.in_channels + i) * self.out_channels + o
    }

    #[inline]
    pub fn weight(&self, ky: usize, kx: usize, i: usize, o: usize) -> f64 {
        self.weights[self.weight_index(ky, kx, i, o)]
    }

    pub fn set_weight(&mut self, ky: usize, kx: usize, i: usize, o: usize, v: f64) {
        let k = self.weight_index(ky, kx, i, o);
        self.weights[k] = v;
    }

    pub fn set_bias(&mut self, o: usize, v: f64) {
        self.bias[o] = v;
    }
}

/// Result of sampling a grid at continuous coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Sampled {
    pub values: Grid2,
    /// Single-channel validity in `[0, 1]`.
    pub mask: Grid2,
}

#[inline]
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP_EPS {
        r
    } else {
        v
    }
}

/// Bilinear corner indices and weights for `(x, y)` on a `width × height`
/// lattice; `None` when the point lies outside `[0, W-1] × [0, H-1]`.
#[inline]
pub(crate) fn bilinear_footprint(
    x: f64,
    y: f64,
    width: usize,
    height: usize,
) -> Option<(usize, usize, f64, f64)> {
    let x = snap(x);
    let y = snap(y);
    if !(x >= 0.0 && y >= 0.0 && x <= (width - 1) as f64 && y <= (height - 1) as f64) {
        return None;
    }
    let mut x0 = x.floor() as usize;
    let mut y0 = y.floor() as usize;
    if x0 + 1 >= width && width > 1 {
        x0 = width - 2;
    }
    if y0 + 1 >= height && height > 1 {
        y0 = height - 2;
    }
    Some((x0, y0, x - x0 as f64, y - y0 as f64))
}

/// Samples one point, writing `src.channels()` values into `out`.
///
/// Returns `false` (and zeros `out`) outside the grid.
#[inline]
pub fn sample_point(src: &Grid2, x: f64, y: f64, out: &mut [f64]) -> bool {
    let (w, h) = (src.width, src.height);
    match bilinear_footprint(x, y, w, h) {
        None => {
            out.iter_mut().for_each(|v| *v = 0.0);
            false
        }
        Some((x0, y0, tx, ty)) => {
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let (p00, p01) = (src.pixel(y0, x0), src.pixel(y0, x1));
            let (p10, p11) = (src.pixel(y1, x0), src.pixel(y1, x1));
            for c in 0..src.channels {
                let top = p00[c] * (1.0 - tx) + p01[c] * tx;
                let bot = p10[c] * (1.0 - tx) + p11[c] * tx;
                out[c] = top * (1.0 - ty) + bot * ty;
            }
            true
        }
    }
}

/// Samples `src` and its derivative with respect to the sample position.
///
/// Writes values into `out`, `d/dx` into `dx` and `d/dy` into `dy`.
pub fn sample_point_with_gradient(
    src: &Grid2,
    x: f64,
    y: f64,
    out: &mut [f64],
    dx: &mut [f64],
    dy: &mut [f64],
) -> bool {
    let (w, h) = (src.width, src.height);
    match bilinear_footprint(x, y, w, h) {
        None => {
            for buf in [&mut *out, &mut *dx, &mut *dy] {
                buf.iter_mut().for_each(|v| *v = 0.0);
            }
            false
        }
        Some((x0, y0, tx, ty)) => {
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let (p00, p01) = (src.pixel(y0, x0), src.pixel(y0, x1));
            let (p10, p11) = (src.pixel(y1, x0), src.pixel(y1, x1));
            for c in 0..src.channels {
                let top = p00[c] * (1.0 - tx) + p01[c] * tx;
                let bot = p10[c] * (1.0 - tx) + p11[c] * tx;
                out[c] = top * (1.0 - ty) + bot * ty;
                dx[c] = (p01[c] - p00[c]) * (1.0 - ty) + (p11[c] - p10[c]) * ty;
                dy[c] = bot - top;
            }
            true
        }
    }
}

/// Samples `src` at `coords`, one `(x, y)` per output pixel.
///
/// `coords` is row-major over an `out_height × out_width` image. Points
/// outside `[0, W-1] × [0, H-1]` (or non-finite) get value 0 and mask 0.
pub fn bilinear_sample(
    src: &Grid2,
    coords: &[[f64; 2]],
    out_height: usize,
    out_width: usize,
) -> Result<Sampled> {
    ensure!(
        coords.len() == out_height * out_width,
        ShapeMismatch,
        "{} coordinates for a {out_height}x{out_width} output",
        coords.len()
    );
    let c = src.channels;
    let mut values = Grid2::zeros(out_height, out_width, c);
    let mut mask = Grid2::zeros(out_height, out_width, 1);
    for (k, &[x, y]) in coords.iter().enumerate() {
        let out = &mut values.data[k * c..(k + 1) * c];
        if sample_point(src, x, y, out) {
            mask.data[k] = 1.0;
        }
    }
    Ok(Sampled { values, mask })
}

/// Like [`bilinear_sample`], but validity is the bilinear interpolation of
/// `src_mask`; sampled values are premultiplied by nothing and zeroed where
/// the interpolated validity is 0.
pub fn bilinear_sample_masked(
    src: &Grid2,
    src_mask: &Grid2,
    coords: &[[f64; 2]],
    out_height: usize,
    out_width: usize,
) -> Result<Sampled> {
    ensure!(
        src_mask.height == src.height && src_mask.width == src.width && src_mask.channels == 1,
        ShapeMismatch,
        "mask must be {}x{}x1",
        src.height,
        src.width
    );
    let mut s = bilinear_sample(src, coords, out_height, out_width)?;
    let c = src.channels;
    let mut m = [0.0];
    for (k, &[x, y]) in coords.iter().enumerate() {
        sample_point(src_mask, x, y, &mut m);
        s.mask.data[k] = m[0].clamp(0.0, 1.0);
        if s.mask.data[k] == 0.0 {
            s.values.data[k * c..(k + 1) * c]
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
    }
    Ok(s)
}

/// 3×3 convolution with replicate padding; output keeps the input size.
pub fn conv3x3(src: &Grid2, kernel: &ConvKernel3x3) -> Result<Grid2> {
    ensure!(
        src.channels == kernel.in_channels,
        Contract,
        "input has {} channels, kernel expects {}",
        src.channels,
        kernel.in_channels
    );
    let (h, w) = (src.height, src.width);
    let oc = kernel.out_channels;
    let mut out = Grid2::zeros(h, w, oc);
    for y in 0..h {
        for x in 0..w {
            let acc = out.pixel_mut(y, x);
            acc.copy_from_slice(&kernel.bias);
            for ky in 0..3 {
                let sy = (y as isize + ky as isize - 1).clamp(0, h as isize - 1) as usize;
                for kx in 0..3 {
                    let sx = (x as isize + kx as isize - 1).clamp(0, w as isize - 1) as usize;
                    let px = src.pixel(sy, sx);
                    for (i, &v) in px.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        let base = kernel.weight_index(ky, kx, i, 0);
                        let wrow = &kernel.weights[base..base + oc];
                        for (a, &wt) in acc.iter_mut().zip(wrow) {
                            *a += wt * v;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Vector-Jacobian product of [`conv3x3`] with respect to its input.
///
/// Given `upstream = dL/d(conv output)`, returns `dL/d(input)`. Replicated
/// border taps accumulate into the edge pixel they were copied from.
pub fn conv3x3_input_vjp(upstream: &Grid2, kernel: &ConvKernel3x3) -> Result<Grid2> {
    ensure!(
        upstream.channels == kernel.out_channels,
        Contract,
        "upstream has {} channels, kernel produces {}",
        upstream.channels,
        kernel.out_channels
    );
    let (h, w) = (upstream.height, upstream.width);
    let ic = kernel.in_channels;
    let mut grad = Grid2::zeros(h, w, ic);
    for y in 0..h {
        for x in 0..w {
            let g = upstream.pixel(y, x);
            for ky in 0..3 {
                let sy = (y as isize + ky as isize - 1).clamp(0, h as isize - 1) as usize;
                for kx in 0..3 {
                    let sx = (x as isize + kx as isize - 1).clamp(0, w as isize - 1) as usize;
                    for i in 0..ic {
                        let base = kernel.weight_index(ky, kx, i, 0);
                        let wrow = &kernel.weights[base..base + kernel.out_channels];
                        let s: f64 = wrow.iter().zip(g).map(|(a, b)| a * b).sum();
                        let k = grad.index(sy, sx, i);
                        grad.data[k] += s;
                    }
                }
            }
        }
    }
    Ok(grad)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn sigmoid_grid(g: &Grid2) -> Grid2 {
    g.map(sigmoid)
}

pub fn relu_grid(g: &Grid2) -> Grid2 {
    g.map(relu)
}

/// Softmax over the bin axis, independently per `(pixel, channel)`.
pub fn softmax_over_bins(v: &Grid3) -> Grid3 {
    let (d, h, w, c) = v.shape();
    let mut out = Grid3::zeros(d, h, w, c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let max = (0..d)
                    .map(|i| v.at(i, y, x, ch))
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for i in 0..d {
                    let e = (v.at(i, y, x, ch) - max).exp();
                    out.set(i, y, x, ch, e);
                    sum += e;
                }
                for i in 0..d {
                    let k = out.index(i, y, x, ch);
                    out.data[k] /= sum;
                }
            }
        }
    }
    out
}

/// 3×3 box mean with replicate padding, per channel.
pub fn box3(src: &Grid2) -> Grid2 {
    let (h, w, c) = src.shape();
    Grid2::from_fn(h, w, c, |y, x, ch| {
        let mut s = 0.0;
        for dy in -1..=1 {
            for dx in -1..=1 {
                s += src.at_clamped(y as isize + dy, x as isize + dx, ch);
            }
        }
        s / 9.0
    })
}

/// Local statistics over a 3×3 replicate-padded window.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowStats {
    pub mean_a: Grid2,
    pub mean_b: Grid2,
    pub var_a: Grid2,
    pub var_b: Grid2,
    pub cov: Grid2,
}

/// Per-pixel, per-channel window means, (population) variances and covariance.
pub fn window_stats(a: &Grid2, b: &Grid2) -> Result<WindowStats> {
    ensure!(
        a.same_shape(b),
        ShapeMismatch,
        "{:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    let mean_a = box3(a);
    let mean_b = box3(b);
    let aa = box3(&a.zip_map(a, |x, y| x * y)?);
    let bb = box3(&b.zip_map(b, |x, y| x * y)?);
    let ab = box3(&a.zip_map(b, |x, y| x * y)?);
    // Not clamped: with a == b the covariance and variance share arithmetic.
    let var_a = aa.zip_map(&mean_a, |s, m| s - m * m)?;
    let var_b = bb.zip_map(&mean_b, |s, m| s - m * m)?;
    let cov = Grid2::from_fn(a.height, a.width, a.channels, |y, x, c| {
        ab.at(y, x, c) - mean_a.at(y, x, c) * mean_b.at(y, x, c)
    });
    Ok(WindowStats {
        mean_a,
        mean_b,
        var_a,
        var_b,
        cov,
    })
}

/// Mean over non-overlapping `factor × factor` blocks.
pub fn avg_pool(src: &Grid2, factor: usize) -> Result<Grid2> {
    ensure!(factor >= 1, Contract, "pool factor must be >= 1");
    ensure!(
        src.height.is_multiple_of(factor) && src.width.is_multiple_of(factor),
        Contract,
        "{}x{} is not divisible by {factor}",
        src.height,
        src.width
    );
    let (h, w, c) = (src.height / factor, src.width / factor, src.channels);
    let inv = 1.0 / (factor * factor) as f64;
    Ok(Grid2::from_fn(h, w, c, |y, x, ch| {
        let mut s = 0.0;
        for dy in 0..factor {
            for dx in 0..factor {
                s += src.at(y * factor + dy, x * factor + dx, ch);
            }
        }
        s * inv
    }))
}

/// Sobel derivatives `(d/dx, d/dy)` with replicate padding, per channel.
///
/// Normalized by 1/8 so a unit ramp has unit derivative.
pub fn sobel(src: &Grid2) -> (Grid2, Grid2) {
    let (h, w, c) = src.shape();
    let at = |y: usize, x: usize, dy: isize, dx: isize, ch: usize| {
        src.at_clamped(y as isize + dy, x as isize + dx, ch)
    };
    let gx = Grid2::from_fn(h, w, c, |y, x, ch| {
        ((at(y, x, -1, 1, ch) + 2.0 * at(y, x, 0, 1, ch) + at(y, x, 1, 1, ch))
            - (at(y, x, -1, -1, ch) + 2.0 * at(y, x, 0, -1, ch) + at(y, x, 1, -1, ch)))
            / 8.0
    });
    let gy = Grid2::from_fn(h, w, c, |y, x, ch| {
        ((at(y, x, 1, -1, ch) + 2.0 * at(y, x, 1, 0, ch) + at(y, x, 1, 1, ch))
            - (at(y, x, -1, -1, ch) + 2.0 * at(y, x, -1, 0, ch) + at(y, x, -1, 1, ch)))
            / 8.0
    });
    (gx, gy)
}

/// Sobel taps: `SOBEL_X[dy+1][dx+1]`, already divided by 8.
const SOBEL_X: [[f64; 3]; 3] = [
    [-0.125, 0.0, 0.125],
    [-0.25, 0.0, 0.25],
    [-0.125, 0.0, 0.125],
];
const SOBEL_Y: [[f64; 3]; 3] = [
    [-0.125, -0.25, -0.125],
    [0.0, 0.0, 0.0],
    [0.125, 0.25, 0.125],
];

fn stencil_adjoint(upstream: &Grid2, taps: &[[f64; 3]; 3], out: &mut Grid2) {
    let (h, w, c) = upstream.shape();
    for y in 0..h {
        for x in 0..w {
            for (ky, row) in taps.iter().enumerate() {
                for (kx, &t) in row.iter().enumerate() {
                    if t == 0.0 {
                        continue;
                    }
                    let sy = (y + ky).saturating_sub(1).min(h - 1);
                    let sx = (x + kx).saturating_sub(1).min(w - 1);
                    for ch in 0..c {
                        out.data[(sy * w + sx) * c + ch] += t * upstream.data[(y * w + x) * c + ch];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`box3`]: maps a gradient on the output to one on the input.
pub fn box3_adjoint(upstream: &Grid2) -> Grid2 {
    let (h, w, c) = upstream.shape();
    let mut out = Grid2::zeros(h, w, c);
    stencil_adjoint(upstream, &[[1.0 / 9.0; 3]; 3], &mut out);
    out
}

/// Adjoint of [`sobel`] given gradients on both outputs.
pub fn sobel_adjoint(up_x: &Grid2, up_y: &Grid2) -> Result<Grid2> {
    ensure!(up_x.same_shape(up_y), ShapeMismatch, "{:?} vs {:?}", up_x.shape(), up_y.shape());
    let (h, w, c) = up_x.shape();
    let mut out = Grid2::zeros(h, w, c);
    stencil_adjoint(up_x, &SOBEL_X, &mut out);
    stencil_adjoint(up_y, &SOBEL_Y, &mut out);
    Ok(out)
}
