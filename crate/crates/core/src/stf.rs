//! Spatial-temporal fusion, the correlation matching head, depth decoding
//! and convex upsampling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::depth_map::DepthMap;
use crate::error::{ensure, Result};
use crate::hypotheses::DepthHypothesisSet;
use crate::numerics::{Grid2, Grid3};
use crate::volumes::{FeatureVolume, VolumeSource};

/// Which volumes feed the matching head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StfMode {
    /// Correlation-weighted sum of both volumes.
    #[default]
    On,
    /// No fusion: the temporal volume alone.
    Off,
    SpatialOnly,
    TemporalOnly,
}

/// Group-wise correlation per `(bin, pixel, group)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMap {
    bins: usize,
    height: usize,
    width: usize,
    groups: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl CorrelationMap {
    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    #[inline]
    fn cell(&self, i: usize, y: usize, x: usize) -> usize {
        (i * self.height + y) * self.width + x
    }

    /// Correlation of group `g`; 0 on invalid cells.
    #[inline]
    pub fn at(&self, i: usize, y: usize, x: usize, g: usize) -> f64 {
        self.values[self.cell(i, y, x) * self.groups + g]
    }

    #[inline]
    pub fn is_valid(&self, i: usize, y: usize, x: usize) -> bool {
        self.valid[self.cell(i, y, x)]
    }

    fn same_shape(&self, o: &CorrelationMap) -> bool {
        (self.bins, self.height, self.width) == (o.bins, o.height, o.width)
    }
}

fn check_groups(channels: usize, groups: usize) -> Result<()> {
    ensure!(
        groups >= 1 && channels.is_multiple_of(groups),
        Contract,
        "{groups} groups do not divide {channels} channels"
    );
    Ok(())
}

fn check_volume(f: &Grid2, v: &FeatureVolume) -> Result<()> {
    ensure!(
        f.height() == v.height() && f.width() == v.width() && f.channels() == v.channels(),
        ShapeMismatch,
        "features {:?} vs volume {:?}",
        f.shape(),
        v.values.shape()
    );
    Ok(())
}

/// `Cr^g(p, i) = (G/C)·⟨F(p)^g, V(p, i)^g⟩`. Cells with zero validity are
/// marked invalid and hold 0.
pub fn group_correlation(f: &Grid2, v: &FeatureVolume, groups: usize) -> Result<CorrelationMap> {
    check_volume(f, v)?;
    let c = f.channels();
    check_groups(c, groups)?;
    let (d, h, w) = (v.bins(), v.height(), v.width());
    let per = c / groups;
    let scale = groups as f64 / c as f64;
    let mut values = vec![0.0; d * h * w * groups];
    let mut valid = vec![false; d * h * w];
    for i in 0..d {
        for y in 0..h {
            for x in 0..w {
                let k = (i * h + y) * w + x;
                if v.valid_at(i, y, x) <= 0.0 {
                    continue;
                }
                valid[k] = true;
                let fp = f.pixel(y, x);
                let vp = v.values.cell(i, y, x);
                for g in 0..groups {
                    let s: f64 = (g * per..(g + 1) * per).map(|j| fp[j] * vp[j]).sum();
                    values[k * groups + g] = scale * s;
                }
            }
        }
    }
    Ok(CorrelationMap {
        bins: d,
        height: h,
        width: w,
        groups,
        values,
        valid,
    })
}

/// Max over groups of each correlation map; 0 on invalid cells.
///
/// Returns `(W_sp, W_tp)`, each `D × H × W × 1`.
pub fn fusion_weights(cr_sp: &CorrelationMap, cr_tp: &CorrelationMap) -> Result<(Grid3, Grid3)> {
    ensure!(
        cr_sp.same_shape(cr_tp),
        ShapeMismatch,
        "spatial and temporal correlation maps differ in shape"
    );
    let weights = |cr: &CorrelationMap| {
        let (d, h, w) = (cr.bins, cr.height, cr.width);
        let mut data = vec![0.0; d * h * w];
        for (k, out) in data.iter_mut().enumerate() {
            if cr.valid[k] {
                *out = cr.values[k * cr.groups..(k + 1) * cr.groups]
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max);
            }
        }
        Grid3::new(d, h, w, 1, data)
    };
    Ok((weights(cr_sp)?, weights(cr_tp)?))
}

/// `V = W_sp·V_sp + W_tp·V_tp` per cell.
///
/// A cell is valid when some side is valid with a nonzero weight; its
/// validity is the larger of those sides' validities.
pub fn fuse(
    v_sp: &FeatureVolume,
    v_tp: &FeatureVolume,
    w_sp: &Grid3,
    w_tp: &Grid3,
) -> Result<FeatureVolume> {
    let shape = v_sp.values.shape();
    ensure!(
        v_tp.values.shape() == shape
            && w_sp.shape() == (shape.0, shape.1, shape.2, 1)
            && w_tp.shape() == w_sp.shape(),
        ShapeMismatch,
        "fusion inputs disagree in shape"
    );
    let (d, h, w, c) = shape;
    let mut values = Grid3::zeros(d, h, w, c);
    let mut validity = Grid3::zeros(d, h, w, 1);
    for i in 0..d {
        for y in 0..h {
            for x in 0..w {
                let (a, b) = (w_sp.at(i, y, x, 0), w_tp.at(i, y, x, 0));
                let va = if a != 0.0 { v_sp.valid_at(i, y, x) } else { 0.0 };
                let vb = if b != 0.0 { v_tp.valid_at(i, y, x) } else { 0.0 };
                let m = va.max(vb);
                if m <= 0.0 {
                    continue;
                }
                validity.set(i, y, x, 0, m);
                let (ps, pt) = (v_sp.values.cell(i, y, x), v_tp.values.cell(i, y, x));
                for (j, out) in values.cell_mut(i, y, x).iter_mut().enumerate() {
                    *out = a * ps[j] + b * pt[j];
                }
            }
        }
    }
    Ok(FeatureVolume {
        values,
        validity,
        source: VolumeSource::Fused,
    })
}

/// Runs the fusion selected by `mode`.
pub fn fuse_by_mode(
    f: &Grid2,
    v_sp: &FeatureVolume,
    v_tp: &FeatureVolume,
    groups: usize,
    mode: StfMode,
) -> Result<FeatureVolume> {
    match mode {
        StfMode::Off | StfMode::TemporalOnly => Ok(v_tp.clone()),
        StfMode::SpatialOnly => Ok(v_sp.clone()),
        StfMode::On => {
            let cr_sp = group_correlation(f, v_sp, groups)?;
            let cr_tp = group_correlation(f, v_tp, groups)?;
            let (w_sp, w_tp) = fusion_weights(&cr_sp, &cr_tp)?;
            fuse(v_sp, v_tp, &w_sp, &w_tp)
        }
    }
}

/// How feature vectors are scaled before scoring.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreNorm {
    /// Raw group correlation.
    Raw,
    /// Both vectors rescaled to norm `√C` first, so scores are cosines.
    #[default]
    Cosine,
}

/// Per-pixel distribution over depth bins.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityVolume {
    bins: usize,
    height: usize,
    width: usize,
    /// Bin-major like the hypotheses.
    probs: Vec<f64>,
    pixel_valid: Vec<bool>,
}

impl ProbabilityVolume {
    pub fn new(
        bins: usize,
        height: usize,
        width: usize,
        probs: Vec<f64>,
        pixel_valid: Vec<bool>,
    ) -> Result<Self> {
        ensure!(
            probs.len() == bins * height * width && pixel_valid.len() == height * width,
            ShapeMismatch,
            "probability volume buffers do not match {bins}x{height}x{width}"
        );
        Ok(Self {
            bins,
            height,
            width,
            probs,
            pixel_valid,
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

    #[inline]
    pub fn at(&self, i: usize, y: usize, x: usize) -> f64 {
        self.probs[(i * self.height + y) * self.width + x]
    }

    /// False where no bin had a valid cell.
    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.pixel_valid[y * self.width + x]
    }

    pub fn argmax(&self, y: usize, x: usize) -> usize {
        (0..self.bins)
            .max_by(|&a, &b| self.at(a, y, x).total_cmp(&self.at(b, y, x)).then(b.cmp(&a)))
            .unwrap_or(0)
    }

    /// Probability of bin `i` as a single-channel image.
    pub fn marginal(&self, i: usize) -> Grid2 {
        Grid2::from_fn(self.height, self.width, 1, |y, x, _| self.at(i, y, x))
    }

    /// Largest bin probability per pixel.
    pub fn peak(&self) -> Grid2 {
        Grid2::from_fn(self.height, self.width, 1, |y, x, _| {
            self.at(self.argmax(y, x), y, x)
        })
    }
}

/// Per-cell matching scores: mean over groups of the group correlation.
///
/// Returns `D × H × W × 1` scores and per-cell validity.
pub fn matching_scores(
    f: &Grid2,
    v: &FeatureVolume,
    groups: usize,
    norm: ScoreNorm,
) -> Result<(Grid3, Vec<bool>)> {
    check_volume(f, v)?;
    let c = f.channels();
    check_groups(c, groups)?;
    let (d, h, w) = (v.bins(), v.height(), v.width());
    let unit = |p: &[f64]| -> Vec<f64> {
        let n = p.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 0.0 {
            let s = (c as f64).sqrt() / n;
            p.iter().map(|a| a * s).collect()
        } else {
            vec![0.0; c]
        }
    };
    let per = c / groups;
    let scale = groups as f64 / c as f64;
    let mut scores = Grid3::zeros(d, h, w, 1);
    let mut valid = vec![false; d * h * w];
    for y in 0..h {
        for x in 0..w {
            let fp = match norm {
                ScoreNorm::Raw => f.pixel(y, x).to_vec(),
                ScoreNorm::Cosine => unit(f.pixel(y, x)),
            };
            for i in 0..d {
                if v.valid_at(i, y, x) <= 0.0 {
                    continue;
                }
                valid[(i * h + y) * w + x] = true;
                let vp = match norm {
                    ScoreNorm::Raw => v.values.cell(i, y, x).to_vec(),
                    ScoreNorm::Cosine => unit(v.values.cell(i, y, x)),
                };
                let mut s = 0.0;
                for g in 0..groups {
                    let dot: f64 = (g * per..(g + 1) * per).map(|j| fp[j] * vp[j]).sum();
                    s += scale * dot;
                }
                scores.set(i, y, x, 0, s / groups as f64);
            }
        }
    }
    Ok((scores, valid))
}

/// Softmax over the valid bins of `scores / tau`.
///
/// Pixels without any valid bin get a uniform distribution and are
/// flagged invalid.
pub fn scores_to_probability(scores: &Grid3, valid: &[bool], tau: f64) -> Result<ProbabilityVolume> {
    ensure!(tau > 0.0 && tau.is_finite(), Contract, "tau must be positive, got {tau}");
    let (d, h, w, _) = scores.shape();
    ensure!(valid.len() == d * h * w, ShapeMismatch, "validity length mismatch");
    let mut probs = vec![0.0; d * h * w];
    let mut pixel_valid = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let k = |i: usize| (i * h + y) * w + x;
            let max = (0..d)
                .filter(|&i| valid[k(i)])
                .map(|i| scores.at(i, y, x, 0) / tau)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                for i in 0..d {
                    probs[k(i)] = 1.0 / d as f64;
                }
                continue;
            }
            pixel_valid[y * w + x] = true;
            let mut sum = 0.0;
            for i in (0..d).filter(|&i| valid[k(i)]) {
                let e = (scores.at(i, y, x, 0) / tau - max).exp();
                probs[k(i)] = e;
                sum += e;
            }
            for i in 0..d {
                probs[k(i)] /= sum;
            }
        }
    }
    ProbabilityVolume::new(d, h, w, probs, pixel_valid)
}

/// Averages each cell's score with the scores that pixels in a
/// `(2r+1)²` window assign to the same depth.
///
/// Neighbor scores are interpolated linearly in inverse depth between that
/// neighbor's own bins, so per-pixel hypothesis sets stay consistent; a
/// neighbor contributes only if the depth lies inside its valid bins.
/// Validity is unchanged. `radius = 0` returns the input.
pub fn aggregate_scores(
    scores: &Grid3,
    valid: &[bool],
    hyps: &DepthHypothesisSet,
    radius: usize,
) -> Result<Grid3> {
    let (d, h, w, _) = scores.shape();
    ensure!(
        d == hyps.bins() && h == hyps.height() && w == hyps.width(),
        ShapeMismatch,
        "scores and hypotheses disagree in shape"
    );
    ensure!(valid.len() == d * h * w, ShapeMismatch, "validity length mismatch");
    if radius == 0 || d < 2 {
        return Ok(scores.clone());
    }
    let k = |i: usize, y: usize, x: usize| (i * h + y) * w + x;
    // Score that pixel (y, x) assigns to inverse depth `inv`, if bracketed
    // by two valid bins.
    let lookup = |y: usize, x: usize, inv: f64| -> Option<f64> {
        let at = |i: usize| 1.0 / hyps.at(i, y, x);
        let (first, last) = (at(0), at(d - 1));
        let (lo, hi) = (first.min(last), first.max(last));
        if inv < lo || inv > hi {
            return None;
        }
        let decreasing = first > last;
        // Largest j with inv between at(j) and at(j + 1).
        let (mut a, mut b) = (0usize, d - 1);
        while b - a > 1 {
            let m = (a + b) / 2;
            let past = if decreasing { at(m) < inv } else { at(m) > inv };
            if past {
                b = m;
            } else {
                a = m;
            }
        }
        let (va, vb) = (valid[k(a, y, x)], valid[k(b, y, x)]);
        let (ia, ib) = (at(a), at(b));
        let t = if ib == ia { 0.0 } else { (inv - ia) / (ib - ia) };
        match (va, vb) {
            (true, true) => Some(scores.at(a, y, x, 0) * (1.0 - t) + scores.at(b, y, x, 0) * t),
            (true, false) if t == 0.0 => Some(scores.at(a, y, x, 0)),
            (false, true) if t == 1.0 => Some(scores.at(b, y, x, 0)),
            _ => None,
        }
    };
    let r = radius as isize;
    let rows: Vec<Vec<f64>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row = vec![0.0; d * w];
            for x in 0..w {
                for i in 0..d {
                    let own = scores.at(i, y, x, 0);
                    if !valid[k(i, y, x)] {
                        row[i * w + x] = own;
                        continue;
                    }
                    let inv = 1.0 / hyps.at(i, y, x);
                    let (mut sum, mut n) = (own, 1usize);
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (qy, qx) = (y as isize + dy, x as isize + dx);
                            if (dy == 0 && dx == 0)
                                || qy < 0
                                || qx < 0
                                || qy >= h as isize
                                || qx >= w as isize
                            {
                                continue;
                            }
                            if let Some(v) = lookup(qy as usize, qx as usize, inv) {
                                sum += v;
                                n += 1;
                            }
                        }
                    }
                    row[i * w + x] = sum / n as f64;
                }
            }
            row
        })
        .collect();
    let mut out = Grid3::zeros(d, h, w, 1);
    for (y, row) in rows.into_iter().enumerate() {
        for i in 0..d {
            for x in 0..w {
                out.set(i, y, x, 0, row[i * w + x]);
            }
        }
    }
    Ok(out)
}

/// Correlation scoring of the fused volume against the reference features,
/// turned into a distribution with temperature `tau`.
pub fn matching_head(
    f: &Grid2,
    v_fused: &FeatureVolume,
    groups: usize,
    tau: f64,
    norm: ScoreNorm,
) -> Result<ProbabilityVolume> {
    let (scores, valid) = matching_scores(f, v_fused, groups, norm)?;
    scores_to_probability(&scores, &valid, tau)
}

/// `d(p) = Σ_i d_i · P(p, i)`; invalid probability pixels stay invalid.
pub fn depth_expectation(prob: &ProbabilityVolume, hyps: &DepthHypothesisSet) -> Result<DepthMap> {
    ensure!(
        prob.bins == hyps.bins() && prob.height == hyps.height() && prob.width == hyps.width(),
        ShapeMismatch,
        "probability volume and hypotheses disagree in shape"
    );
    let (h, w) = (prob.height, prob.width);
    let mut depth = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            depth[y * w + x] = (0..prob.bins).map(|i| hyps.at(i, y, x) * prob.at(i, y, x)).sum();
        }
    }
    DepthMap::with_mask(h, w, depth, prob.pixel_valid.clone())
}

/// Depth of the most probable bin per pixel.
pub fn depth_argmax(prob: &ProbabilityVolume, hyps: &DepthHypothesisSet) -> Result<DepthMap> {
    ensure!(
        prob.bins == hyps.bins() && prob.height == hyps.height() && prob.width == hyps.width(),
        ShapeMismatch,
        "probability volume and hypotheses disagree in shape"
    );
    let mut d = DepthMap::from_fn(prob.height, prob.width, |y, x| {
        hyps.at(prob.argmax(y, x), y, x)
    });
    for y in 0..prob.height {
        for x in 0..prob.width {
            d.set_valid(y, x, prob.is_valid(y, x));
        }
    }
    Ok(d)
}

/// Nine weights over the 3×3 coarse neighborhood for every fine subpixel.
#[derive(Clone, Debug, PartialEq)]
pub struct UpsampleMask {
    height: usize,
    width: usize,
    factor: usize,
    /// `[(y * width + x) * factor² + sy * factor + sx][ky * 3 + kx]`.
    weights: Vec<[f64; 9]>,
}

impl UpsampleMask {
    pub fn new(height: usize, width: usize, factor: usize, weights: Vec<[f64; 9]>) -> Result<Self> {
        ensure!(factor >= 1, Contract, "upsample factor must be >= 1");
        ensure!(
            weights.len() == height * width * factor * factor,
            ShapeMismatch,
            "mask has {} rows, expected {}",
            weights.len(),
            height * width * factor * factor
        );
        ensure!(
            weights.iter().flatten().all(|&v| v >= 0.0 && v.is_finite()),
            Contract,
            "mask weights must be finite and nonnegative"
        );
        Ok(Self {
            height,
            width,
            factor,
            weights,
        })
    }

    /// Weights reproducing bilinear interpolation between coarse pixel
    /// centers (clamped at the border).
    pub fn bilinear(height: usize, width: usize, factor: usize) -> Self {
        let taps: Vec<[f64; 3]> = (0..factor).map(|s| bilinear_taps(s, factor)).collect();
        let mut weights = Vec::with_capacity(height * width * factor * factor);
        for _ in 0..height * width {
            for sy in 0..factor {
                for sx in 0..factor {
                    let mut row = [0.0; 9];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            row[ky * 3 + kx] = taps[sy][ky] * taps[sx][kx];
                        }
                    }
                    weights.push(row);
                }
            }
        }
        Self {
            height,
            width,
            factor,
            weights,
        }
    }

    /// Bilinear weights damped across feature discontinuities:
    /// `w_k ∝ bilinear_k · exp(−‖f_k − f_center‖² / (C·σ²))`.
    pub fn feature_guided(features: &Grid2, factor: usize, sigma: f64) -> Result<Self> {
        ensure!(sigma > 0.0, Contract, "sigma must be positive, got {sigma}");
        let (h, w, c) = features.shape();
        let base = Self::bilinear(h, w, factor);
        let mut weights = base.weights;
        let denom = c as f64 * sigma * sigma;
        for y in 0..h {
            for x in 0..w {
                let centre = features.pixel(y, x);
                let mut affinity = [0.0; 9];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let ny = (y as isize + ky as isize - 1).clamp(0, h as isize - 1) as usize;
                        let nx = (x as isize + kx as isize - 1).clamp(0, w as isize - 1) as usize;
                        let dist: f64 = features
                            .pixel(ny, nx)
                            .iter()
                            .zip(centre)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum();
                        affinity[ky * 3 + kx] = (-dist / denom).exp();
                    }
                }
                let start = (y * w + x) * factor * factor;
                for row in &mut weights[start..start + factor * factor] {
                    for (v, a) in row.iter_mut().zip(affinity) {
                        *v *= a;
                    }
                    let s: f64 = row.iter().sum();
                    row.iter_mut().for_each(|v| *v /= s);
                }
            }
        }
        Self::new(h, w, factor, weights)
    }

    /// A mask that copies the center coarse pixel.
    pub fn nearest(height: usize, width: usize, factor: usize) -> Self {
        let mut row = [0.0; 9];
        row[4] = 1.0;
        Self {
            height,
            width,
            factor,
            weights: vec![row; height * width * factor * factor],
        }
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn row(&self, y: usize, x: usize, sy: usize, sx: usize) -> &[f64; 9] {
        &self.weights[(y * self.width + x) * self.factor * self.factor + sy * self.factor + sx]
    }
}

/// 1D interpolation weights over coarse offsets `{-1, 0, +1}` for fine
/// subpixel `s`, whose center lies `(s − (f−1)/2)/f` coarse pixels away.
fn bilinear_taps(s: usize, factor: usize) -> [f64; 3] {
    let f = factor as f64;
    let o = (s as f64 - (f - 1.0) / 2.0) / f;
    if o < 0.0 {
        [-o, 1.0 + o, 0.0]
    } else {
        [0.0, 1.0 - o, o]
    }
}

/// Result of [`convex_upsample`].
#[derive(Clone, Debug, PartialEq)]
pub struct Upsampled {
    pub depth: DepthMap,
    /// Mask rows that did not sum to 1 and were renormalized.
    pub renormalized: usize,
}

/// Each fine pixel is a convex combination of its coarse 3×3 neighborhood
/// (replicate-padded). Rows not summing to 1 within 1e-9 are renormalized
/// and counted. A fine pixel is valid when every neighbor with nonzero
/// weight is valid.
pub fn convex_upsample(coarse: &DepthMap, mask: &UpsampleMask) -> Result<Upsampled> {
    ensure!(
        coarse.height() == mask.height && coarse.width() == mask.width,
        ShapeMismatch,
        "coarse map {}x{} vs mask {}x{}",
        coarse.height(),
        coarse.width(),
        mask.height,
        mask.width
    );
    let (h, w, f) = (mask.height, mask.width, mask.factor);
    let (fh, fw) = (h * f, w * f);
    let mut depth = vec![0.0; fh * fw];
    let mut valid = vec![true; fh * fw];
    let mut renormalized = 0;
    for y in 0..h {
        for x in 0..w {
            for sy in 0..f {
                for sx in 0..f {
                    let row = mask.row(y, x, sy, sx);
                    let mut sum: f64 = row.iter().sum();
                    ensure!(sum > 0.0, Contract, "upsample mask row sums to zero");
                    if (sum - 1.0).abs() > 1e-9 {
                        renormalized += 1;
                    } else {
                        sum = 1.0;
                    }
                    let (mut acc, mut ok) = (0.0, true);
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let wgt = row[ky * 3 + kx];
                            if wgt == 0.0 {
                                continue;
                            }
                            let ny = (y as isize + ky as isize - 1).clamp(0, h as isize - 1) as usize;
                            let nx = (x as isize + kx as isize - 1).clamp(0, w as isize - 1) as usize;
                            acc += wgt * coarse.at(ny, nx);
                            ok &= coarse.is_valid(ny, nx);
                        }
                    }
                    let k = (y * f + sy) * fw + x * f + sx;
                    depth[k] = acc / sum;
                    valid[k] = ok;
                }
            }
        }
    }
    Ok(Upsampled {
        depth: DepthMap::with_mask(fh, fw, depth, valid)?,
        renormalized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypotheses::{DepthRange, Spacing};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(seed)
    }

    fn volume(d: usize, h: usize, w: usize, c: usize, seed: u64) -> FeatureVolume {
        let mut r = rng(seed);
        let values = Grid3::new(d, h, w, c, (0..d * h * w * c).map(|_| r.random()).collect()).unwrap();
        FeatureVolume {
            values,
            validity: Grid3::new(d, h, w, 1, vec![1.0; d * h * w]).unwrap(),
            source: VolumeSource::Spatial,
        }
    }

    fn grid(h: usize, w: usize, c: usize, seed: u64) -> Grid2 {
        let mut r = rng(seed);
        Grid2::from_fn(h, w, c, |_, _, _| r.random())
    }

    #[test]
    fn one_group_is_scaled_inner_product() {
        let f = grid(2, 3, 4, 1);
        let v = volume(2, 2, 3, 4, 2);
        let cr = group_correlation(&f, &v, 1).unwrap();
        let dot: f64 = (0..4).map(|j| f.at(1, 2, j) * v.values.at(1, 1, 2, j)).sum();
        assert_relative_eq!(cr.at(1, 1, 2, 0), dot / 4.0, epsilon = 1e-15);
    }

    #[test]
    fn all_ones_correlate_to_one() {
        let f = Grid2::filled(2, 2, 8, 1.0);
        let mut v = volume(3, 2, 2, 8, 0);
        v.values = Grid3::new(3, 2, 2, 8, vec![1.0; 96]).unwrap();
        for g in [1, 2, 4, 8] {
            let cr = group_correlation(&f, &v, g).unwrap();
            assert!(cr.values.iter().all(|&c| c == 1.0));
        }
    }

    #[test]
    fn orthogonal_groups_correlate_to_zero() {
        let f = Grid2::new(1, 1, 4, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut v = volume(1, 1, 1, 4, 0);
        v.values = Grid3::new(1, 1, 1, 4, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let cr = group_correlation(&f, &v, 2).unwrap();
        assert_eq!((cr.at(0, 0, 0, 0), cr.at(0, 0, 0, 1)), (0.0, 0.0));
    }

    #[test]
    fn groups_must_divide_channels() {
        let f = grid(2, 2, 6, 1);
        let v = volume(1, 2, 2, 6, 1);
        assert!(group_correlation(&f, &v, 4).is_err());
        assert!(group_correlation(&f, &v, 0).is_err());
    }

    #[test]
    fn weights_are_group_maxima() {
        let f = Grid2::new(1, 1, 3, vec![1.0, 1.0, 1.0]).unwrap();
        let mut v = volume(1, 1, 1, 3, 0);
        v.values = Grid3::new(1, 1, 1, 3, vec![0.2, 0.7, 0.1]).unwrap();
        let cr = group_correlation(&f, &v, 3).unwrap();
        let (w_sp, _) = fusion_weights(&cr, &cr).unwrap();
        assert_relative_eq!(w_sp.at(0, 0, 0, 0), 0.7, epsilon = 1e-15);
        let one = group_correlation(&f, &v, 1).unwrap();
        let (w1, _) = fusion_weights(&one, &one).unwrap();
        assert_eq!(w1.at(0, 0, 0, 0), one.at(0, 0, 0, 0));
    }

    #[test]
    fn invalid_cells_get_zero_weight() {
        let f = grid(1, 2, 2, 3);
        let mut a = volume(1, 1, 2, 2, 4);
        a.validity = Grid3::new(1, 1, 2, 1, vec![0.0, 1.0]).unwrap();
        let cra = group_correlation(&f, &a, 1).unwrap();
        let (wa, wb) = fusion_weights(&cra, &cra).unwrap();
        assert_eq!((wa.at(0, 0, 0, 0), wb.at(0, 0, 0, 0)), (0.0, 0.0));
        assert!(!cra.is_valid(0, 0, 0));
    }

    #[test]
    fn fuse_special_cases() {
        let a = volume(2, 2, 2, 3, 5);
        let b = volume(2, 2, 2, 3, 6);
        let ones = Grid3::new(2, 2, 2, 1, vec![1.0; 8]).unwrap();
        let zeros = Grid3::zeros(2, 2, 2, 1);
        let halves = Grid3::new(2, 2, 2, 1, vec![0.5; 8]).unwrap();
        assert_eq!(fuse(&a, &b, &ones, &zeros).unwrap().values, a.values);
        assert_eq!(fuse(&a, &a, &halves, &halves).unwrap().values, a.values);
    }

    #[test]
    fn fuse_matches_elementwise_oracle() {
        let a = volume(2, 2, 2, 2, 7);
        let b = volume(2, 2, 2, 2, 8);
        let mut r = rng(9);
        let wa = Grid3::new(2, 2, 2, 1, (0..8).map(|_| r.random()).collect()).unwrap();
        let wb = Grid3::new(2, 2, 2, 1, (0..8).map(|_| r.random()).collect()).unwrap();
        let out = fuse(&a, &b, &wa, &wb).unwrap();
        for i in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    for c in 0..2 {
                        let want = wa.at(i, y, x, 0) * a.values.at(i, y, x, c)
                            + wb.at(i, y, x, 0) * b.values.at(i, y, x, c);
                        assert_relative_eq!(out.values.at(i, y, x, c), want, epsilon = 1e-15);
                    }
                }
            }
        }
    }

    #[test]
    fn fused_follows_spatial_where_temporal_invalid() {
        let f = grid(2, 2, 4, 10);
        let sp = volume(3, 2, 2, 4, 11);
        let mut tp = volume(3, 2, 2, 4, 12);
        tp.validity = Grid3::zeros(3, 2, 2, 1);
        tp.values = Grid3::zeros(3, 2, 2, 4);
        let fused = fuse_by_mode(&f, &sp, &tp, 2, StfMode::On).unwrap();
        let (s_f, _) = matching_scores(&f, &fused, 2, ScoreNorm::Cosine).unwrap();
        let (s_s, _) = matching_scores(&f, &sp, 2, ScoreNorm::Cosine).unwrap();
        for (a, b) in s_f.data().iter().zip(s_s.data()) {
            assert_relative_eq!(*a, *b, epsilon = 1e-12);
        }
    }

    #[test]
    fn head_one_hot_and_uniform() {
        let mut scores = Grid3::zeros(4, 1, 1, 1);
        scores.set(2, 0, 0, 0, 10.0);
        let p = scores_to_probability(&scores, &[true; 4], 0.01).unwrap();
        assert!(p.at(2, 0, 0) > 1.0 - 1e-12);
        let flat = scores_to_probability(&Grid3::zeros(4, 1, 1, 1), &[true; 4], 1.0).unwrap();
        assert!((0..4).all(|i| flat.at(i, 0, 0) == 0.25));
    }

    #[test]
    fn head_without_valid_bins_is_uniform_and_flagged() {
        let p = scores_to_probability(&Grid3::zeros(4, 1, 1, 1), &[false; 4], 1.0).unwrap();
        assert!(!p.is_valid(0, 0));
        assert!((0..4).all(|i| p.at(i, 0, 0) == 0.25));
        let q = scores_to_probability(&Grid3::zeros(2, 1, 1, 1), &[false, true], 1.0).unwrap();
        assert_eq!((q.at(0, 0, 0), q.at(1, 0, 0)), (0.0, 1.0));
        assert!(scores_to_probability(&Grid3::zeros(2, 1, 1, 1), &[true; 2], 0.0).is_err());
    }

    fn hyps4() -> DepthHypothesisSet {
        let r = DepthRange::new(1, 1, vec![5.0], vec![20.0]).unwrap();
        DepthHypothesisSet::generate(&r, 4, Spacing::InverseDepth).unwrap()
    }

    #[test]
    fn expectation_cases() {
        let h = hyps4();
        let p = ProbabilityVolume::new(4, 1, 1, vec![0.0, 0.0, 1.0, 0.0], vec![true]).unwrap();
        assert_eq!(depth_expectation(&p, &h).unwrap().at(0, 0), 10.0);
        let u = ProbabilityVolume::new(4, 1, 1, vec![0.25; 4], vec![true]).unwrap();
        assert_relative_eq!(depth_expectation(&u, &h).unwrap().at(0, 0), 10.416666666666666, epsilon = 1e-12);
        let m = ProbabilityVolume::new(4, 1, 1, vec![0.25, 0.0, 0.75, 0.0], vec![true]).unwrap();
        assert_relative_eq!(depth_expectation(&m, &h).unwrap().at(0, 0), 8.75, epsilon = 1e-12);
    }

    #[test]
    fn upsample_constant_and_nearest() {
        let c = DepthMap::constant(3, 4, 7.5);
        let up = convex_upsample(&c, &UpsampleMask::bilinear(3, 4, 4)).unwrap();
        assert!(up.depth.depths().iter().all(|&d| (d - 7.5).abs() < 1e-12));
        assert_eq!(up.renormalized, 0);
        let ramp = DepthMap::from_fn(3, 4, |y, x| (y * 4 + x) as f64);
        let nn = convex_upsample(&ramp, &UpsampleMask::nearest(3, 4, 4)).unwrap();
        for y in 0..12 {
            for x in 0..16 {
                assert_eq!(nn.depth.at(y, x), ramp.at(y / 4, x / 4));
            }
        }
    }

    #[test]
    fn bilinear_mask_reproduces_linear_ramps() {
        let (h, w, f) = (5, 6, 4);
        let ramp = DepthMap::from_fn(h, w, |y, x| 2.0 + 0.5 * x as f64 - 0.25 * y as f64);
        let up = convex_upsample(&ramp, &UpsampleMask::bilinear(h, w, f)).unwrap();
        // Interior fine pixels: coarse coordinate (X - 1.5) / 4 in closed form.
        for fy in f..(h - 1) * f {
            for fx in f..(w - 1) * f {
                let cx = (fx as f64 - 1.5) / 4.0;
                let cy = (fy as f64 - 1.5) / 4.0;
                let want = 2.0 + 0.5 * cx - 0.25 * cy;
                assert!((up.depth.at(fy, fx) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unnormalized_rows_are_counted() {
        let mut row = [0.0; 9];
        row[4] = 2.0;
        let m = UpsampleMask::new(1, 1, 2, vec![row; 4]).unwrap();
        let up = convex_upsample(&DepthMap::constant(1, 1, 3.0), &m).unwrap();
        assert_eq!(up.renormalized, 4);
        assert!(up.depth.depths().iter().all(|&d| d == 3.0));
    }

    #[test]
    fn guided_mask_rows_are_convex() {
        let feats = grid(3, 4, 2, 13);
        let m = UpsampleMask::feature_guided(&feats, 4, 0.3).unwrap();
        for row in &m.weights {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn scaling_features_scales_correlation(s in 0.1f64..10.0, seed in 0u64..1000) {
            let f = grid(2, 2, 4, seed);
            let v = volume(3, 2, 2, 4, seed + 1);
            let a = group_correlation(&f, &v, 2).unwrap();
            let b = group_correlation(&f.scale(s), &v, 2).unwrap();
            for (x, y) in a.values.iter().zip(&b.values) {
                prop_assert!((x * s - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }

        #[test]
        fn argmax_invariant_to_score_scaling(s in 0.01f64..100.0, seed in 0u64..1000) {
            let f = grid(2, 2, 4, seed);
            let v = volume(5, 2, 2, 4, seed + 7);
            let (sc, valid) = matching_scores(&f, &v, 2, ScoreNorm::Raw).unwrap();
            let p = scores_to_probability(&sc, &valid, 1.0).unwrap();
            let q = scores_to_probability(&sc, &valid, 1.0 / s).unwrap();
            for y in 0..2 { for x in 0..2 {
                prop_assert_eq!(p.argmax(y, x), q.argmax(y, x));
            }}
        }

        #[test]
        fn probability_sums_to_one(seed in 0u64..1000, tau in 0.01f64..5.0) {
            let f = grid(3, 3, 4, seed);
            let v = volume(6, 3, 3, 4, seed + 3);
            let p = matching_head(&f, &v, 4, tau, ScoreNorm::Cosine).unwrap();
            for y in 0..3 { for x in 0..3 {
                let s: f64 = (0..6).map(|i| p.at(i, y, x)).sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
                prop_assert!((0..6).all(|i| p.at(i, y, x) >= 0.0));
            }}
        }

        #[test]
        fn expectation_stays_within_samples(seed in 0u64..1000) {
            let mut r = rng(seed);
            let raw: Vec<f64> = (0..4).map(|_| r.random::<f64>() + 1e-3).collect();
            let s: f64 = raw.iter().sum();
            let p = ProbabilityVolume::new(4, 1, 1, raw.iter().map(|v| v / s).collect(), vec![true]).unwrap();
            let d = depth_expectation(&p, &hyps4()).unwrap().at(0, 0);
            prop_assert!((5.0 - 1e-12..=20.0 + 1e-12).contains(&d));
        }

        #[test]
        fn upsample_stays_in_neighborhood_range(seed in 0u64..1000) {
            let mut r = rng(seed);
            let c = DepthMap::from_fn(4, 5, |_, _| 1.0 + 10.0 * r.random::<f64>());
            let feats = grid(4, 5, 3, seed);
            let m = UpsampleMask::feature_guided(&feats, 4, 0.5).unwrap();
            let up = convex_upsample(&c, &m).unwrap();
            for fy in 0..16 { for fx in 0..20 {
                let (y, x) = (fy / 4, fx / 4);
                let mut lo = f64::INFINITY; let mut hi = f64::NEG_INFINITY;
                for dy in -1isize..=1 { for dx in -1isize..=1 {
                    let v = c.at((y as isize + dy).clamp(0, 3) as usize, (x as isize + dx).clamp(0, 4) as usize);
                    lo = lo.min(v); hi = hi.max(v);
                }}
                let v = up.depth.at(fy, fx);
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }}
        }
    }
}
