//! Feature providers and multi-grained feature fusion.
//!
//! `W = σ(k2 ∗ relu(k1 ∗ (C + S)))`, `M = k3 ∗ (C + W ⊙ S)`, with `C` the
//! internal feature and `S` the prior feature at the same resolution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::numerics::{
    avg_pool, box3, conv3x3, conv3x3_input_vjp, relu_grid, sigmoid_grid, ConvKernel3x3,
    Grid2,
};

/// Maps an image to a feature map `1/scale` its size.
pub trait FeatureProvider: Send + Sync {
    fn name(&self) -> &str;
    /// Downsampling factor of the output.
    fn scale(&self) -> usize;
    fn channels(&self) -> usize;
    fn extract(&self, image: &Grid2) -> Result<Grid2>;
}

/// Luma of a 1- or 3-channel image.
pub fn grayscale(image: &Grid2) -> Grid2 {
    match image.channels() {
        3 => Grid2::from_fn(image.height(), image.width(), 1, |y, x, _| {
            let p = image.pixel(y, x);
            0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
        }),
        _ => image.channel_mean(),
    }
}

fn tile(base: &[Grid2], channels: usize) -> Grid2 {
    let (h, w) = (base[0].height(), base[0].width());
    Grid2::from_fn(h, w, channels, |y, x, c| base[c % base.len()].at(y, x, 0))
}

/// Pooled intensity (centred on 0.5) interleaved with a constant channel.
///
/// Under group-wise cosine scoring each group holds one intensity and one
/// constant channel, so the score peaks only where intensities agree rather
/// than wherever they share a sign.
#[derive(Clone, Debug, PartialEq)]
pub struct IntensityFeatures {
    pub scale: usize,
    pub channels: usize,
    /// Value of the constant channels.
    pub offset: f64,
    /// Box-filter passes on the pooled intensity.
    pub smoothing: usize,
}

impl Default for IntensityFeatures {
    fn default() -> Self {
        Self {
            scale: 4,
            channels: 16,
            offset: 0.2,
            smoothing: 0,
        }
    }
}

impl FeatureProvider for IntensityFeatures {
    fn name(&self) -> &str {
        "intensity"
    }

    fn scale(&self) -> usize {
        self.scale
    }

    fn channels(&self) -> usize {
        self.channels
    }

    fn extract(&self, image: &Grid2) -> Result<Grid2> {
        ensure!(self.channels >= 1, Config, "feature channel count must be positive");
        let mut g = avg_pool(&grayscale(image), self.scale)?.map(|v| v - 0.5);
        for _ in 0..self.smoothing {
            g = box3(&g);
        }
        let k = Grid2::from_fn(g.height(), g.width(), 1, |_, _, _| self.offset);
        Ok(tile(&[g, k], self.channels))
    }
}

/// Pooled local-variance maps at a few window sizes: a cheap cue for where
/// surfaces change.
#[derive(Clone, Debug, PartialEq)]
pub struct TextureFeatures {
    pub scale: usize,
    pub channels: usize,
}

impl Default for TextureFeatures {
    fn default() -> Self {
        Self {
            scale: 4,
            channels: 16,
        }
    }
}

impl FeatureProvider for TextureFeatures {
    fn name(&self) -> &str {
        "texture"
    }

    fn scale(&self) -> usize {
        self.scale
    }

    fn channels(&self) -> usize {
        self.channels
    }

    fn extract(&self, image: &Grid2) -> Result<Grid2> {
        ensure!(self.channels >= 1, Config, "feature channel count must be positive");
        let g = grayscale(image);
        let mut base = Vec::new();
        let mut mean = g.clone();
        let mut sq = g.zip_map(&g, |a, b| a * b)?;
        for _ in 0..3 {
            mean = box3(&mean);
            sq = box3(&sq);
            let var = sq.zip_map(&mean, |s, m| (s - m * m).max(0.0).sqrt())?;
            base.push(avg_pool(&var, self.scale)?.scale(4.0));
        }
        Ok(tile(&base, self.channels))
    }
}

/// The three fusion convolutions.
#[derive(Clone, Debug, PartialEq)]
pub struct MffKernels {
    pub k1: ConvKernel3x3,
    pub k2: ConvKernel3x3,
    pub k3: ConvKernel3x3,
}

/// Seed used when no kernel file is given.
pub const MFF_DEFAULT_SEED: u64 = 0x004D_4646;

impl MffKernels {
    /// Gaussian weights with variance `1/(9·in)`, zero bias; `k3` adds the
    /// identity so the fused feature starts close to `C + W ⊙ S`.
    pub fn seeded(channels: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |i: usize, o: usize| {
            let n = Normal::new(0.0, (1.0 / (9.0 * i as f64)).sqrt()).expect("valid std");
            let w = (0..9 * i * o).map(|_| n.sample(&mut rng)).collect();
            ConvKernel3x3::new(i, o, w, vec![0.0; o]).expect("sized by construction")
        };
        let k1 = draw(channels, hidden);
        let k2 = draw(hidden, channels);
        let mut k3 = draw(channels, channels);
        for c in 0..channels {
            let v = k3.weight(1, 1, c, c);
            k3.set_weight(1, 1, c, c, v + 1.0);
        }
        Self { k1, k2, k3 }
    }

    pub fn to_file(&self) -> MffKernelFile {
        let f = |k: &ConvKernel3x3| KernelEntry {
            in_channels: k.in_channels(),
            out_channels: k.out_channels(),
            weights: k.weights().to_vec(),
            bias: k.bias().to_vec(),
        };
        MffKernelFile {
            k1: f(&self.k1),
            k2: f(&self.k2),
            k3: f(&self.k3),
        }
    }

    pub fn from_file(file: &MffKernelFile) -> Result<Self> {
        let f = |e: &KernelEntry| {
            ConvKernel3x3::new(e.in_channels, e.out_channels, e.weights.clone(), e.bias.clone())
        };
        let k = Self {
            k1: f(&file.k1)?,
            k2: f(&file.k2)?,
            k3: f(&file.k3)?,
        };
        ensure!(
            k.k1.out_channels() == k.k2.in_channels()
                && k.k2.out_channels() == k.k1.in_channels()
                && k.k3.in_channels() == k.k1.in_channels(),
            Config,
            "fusion kernel widths do not chain"
        );
        Ok(k)
    }
}

/// On-disk fusion kernels; weights laid out `[ky][kx][in][out]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MffKernelFile {
    pub k1: KernelEntry,
    pub k2: KernelEntry,
    pub k3: KernelEntry,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelEntry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

fn same(a: &Grid2, b: &Grid2) -> Result<()> {
    ensure!(
        a.same_shape(b),
        ShapeMismatch,
        "{:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    Ok(())
}

/// `σ(k2 ∗ relu(k1 ∗ (C + S)))`.
pub fn attn_weights(c: &Grid2, s: &Grid2, k1: &ConvKernel3x3, k2: &ConvKernel3x3) -> Result<Grid2> {
    same(c, s)?;
    let hidden = relu_grid(&conv3x3(&c.add(s)?, k1)?);
    Ok(sigmoid_grid(&conv3x3(&hidden, k2)?))
}

/// `k3 ∗ (C + W ⊙ S)`.
pub fn fuse_features(c: &Grid2, s: &Grid2, w: &Grid2, k3: &ConvKernel3x3) -> Result<Grid2> {
    same(c, s)?;
    same(c, w)?;
    let ws = w.zip_map(s, |a, b| a * b)?;
    conv3x3(&c.add(&ws)?, k3)
}

/// `C + S`.
pub fn vanilla_fuse(c: &Grid2, s: &Grid2) -> Result<Grid2> {
    same(c, s)?;
    c.add(s)
}

/// Full fusion with the given kernels.
pub fn mff(c: &Grid2, s: &Grid2, k: &MffKernels) -> Result<Grid2> {
    let w = attn_weights(c, s, &k.k1, &k.k2)?;
    fuse_features(c, s, &w, &k.k3)
}

/// Gradients of `⟨r, mff(C, S)⟩` with respect to `C` and `S`.
pub fn mff_input_gradients(
    c: &Grid2,
    s: &Grid2,
    k: &MffKernels,
    r: &Grid2,
) -> Result<(Grid2, Grid2)> {
    same(c, s)?;
    let a = c.add(s)?;
    let h1 = conv3x3(&a, &k.k1)?;
    let hidden = relu_grid(&h1);
    let w = sigmoid_grid(&conv3x3(&hidden, &k.k2)?);
    let g_z = conv3x3_input_vjp(r, &k.k3)?;
    let g_w = g_z.zip_map(s, |g, sv| g * sv)?;
    let g_s_direct = g_z.zip_map(&w, |g, wv| g * wv)?;
    let g_h2 = g_w.zip_map(&w, |g, wv| g * wv * (1.0 - wv))?;
    let g_hidden = conv3x3_input_vjp(&g_h2, &k.k2)?;
    let g_h1 = g_hidden.zip_map(&h1, |g, h| if h > 0.0 { g } else { 0.0 })?;
    let g_a = conv3x3_input_vjp(&g_h1, &k.k1)?;
    Ok((g_z.add(&g_a)?, g_s_direct.add(&g_a)?))
}

/// Outcome of [`gradient_check`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradientCheck {
    /// `max |analytic − numeric| / max(|analytic|, |numeric|, 1e-3)`.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries whose perturbation flipped a relu.
    pub skipped: usize,
}

/// Compares [`mff_input_gradients`] with central differences of step `eps`
/// on every input entry.
///
/// Entries whose ±`eps` evaluations disagree on any relu sign, or put a relu
/// input within `10·eps` of its kink, are skipped.
pub fn gradient_check(
    c: &Grid2,
    s: &Grid2,
    k: &MffKernels,
    r: &Grid2,
    eps: f64,
) -> Result<GradientCheck> {
    ensure!(
        (1e-7..=1e-4).contains(&eps),
        Contract,
        "eps must be in [1e-7, 1e-4], got {eps}"
    );
    let (gc, gs) = mff_input_gradients(c, s, k, r)?;
    let objective = |c: &Grid2, s: &Grid2| -> Result<(f64, Grid2)> {
        let m = mff(c, s, k)?;
        let h1 = conv3x3(&c.add(s)?, &k.k1)?;
        Ok((m.data().iter().zip(r.data()).map(|(a, b)| a * b).sum(), h1))
    };
    let near_kink = |a: &Grid2, b: &Grid2| {
        a.data()
            .iter()
            .zip(b.data())
            .any(|(x, y)| (x > &0.0) != (y > &0.0) || x.abs() < 10.0 * eps)
    };
    let mut report = GradientCheck {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for which in 0..2 {
        let (base, grad) = if which == 0 { (c, &gc) } else { (s, &gs) };
        for idx in 0..base.data().len() {
            let mut plus = base.clone();
            plus.data_mut()[idx] += eps;
            let mut minus = base.clone();
            minus.data_mut()[idx] -= eps;
            let ((fp, hp), (fm, hm)) = if which == 0 {
                (objective(&plus, s)?, objective(&minus, s)?)
            } else {
                (objective(c, &plus)?, objective(c, &minus)?)
            };
            if near_kink(&hp, &hm) {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * eps);
            let analytic = grad.data()[idx];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}
