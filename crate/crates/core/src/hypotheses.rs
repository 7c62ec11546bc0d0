//! Per-pixel depth hypotheses for the plane sweep.

use serde::{Deserialize, Serialize};

use crate::depth_map::DepthMap;
use crate::error::{ensure, Result};
use crate::geometry::Z_MIN;

/// How samples are spread between `d_min` and `d_max`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spacing {
    /// Uniform in `1/d`.
    #[default]
    InverseDepth,
    /// Uniform in `d`.
    Linear,
}

/// Where each pixel's range comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// The whole scene range at every pixel.
    Vanilla,
    /// A window of fixed width (in meters) centred on the prior.
    Fixed,
    /// `[d/(1+α), d(1+α)]` around the prior.
    #[default]
    Adaptive,
}

/// Per-pixel `(d_min, d_max)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthRange {
    height: usize,
    width: usize,
    min: Vec<f64>,
    max: Vec<f64>,
}

impl DepthRange {
    pub fn new(height: usize, width: usize, min: Vec<f64>, max: Vec<f64>) -> Result<Self> {
        ensure!(
            min.len() == height * width && max.len() == height * width,
            ShapeMismatch,
            "range arrays do not match {height}x{width}"
        );
        for (a, b) in min.iter().zip(&max) {
            ensure!(
                a.is_finite() && b.is_finite() && a <= b,
                Contract,
                "invalid depth range [{a}, {b}]"
            );
        }
        Ok(Self {
            height,
            width,
            min,
            max,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn at(&self, y: usize, x: usize) -> (f64, f64) {
        let k = y * self.width + x;
        (self.min[k], self.max[k])
    }
}

/// `d_min = d/(1+α)`, `d_max = d·(1+α)` per pixel.
///
/// Invalid prior pixels are ranged from their stored value as well; only
/// valid pixels must be positive.
pub fn adaptive_range(d_init: &DepthMap, alpha: f64) -> Result<DepthRange> {
    ensure!(
        alpha >= 0.0 && alpha.is_finite(),
        Contract,
        "alpha must be nonnegative, got {alpha}"
    );
    let n = d_init.len();
    let mut min = Vec::with_capacity(n);
    let mut max = Vec::with_capacity(n);
    for (k, (&d, &v)) in d_init.depths().iter().zip(d_init.valid()).enumerate() {
        ensure!(
            d > 0.0 || !v,
            Contract,
            "prior depth {d} at pixel {k} is not positive"
        );
        let d = d.max(Z_MIN);
        min.push(d / (1.0 + alpha));
        max.push(d * (1.0 + alpha));
    }
    DepthRange::new(d_init.height(), d_init.width(), min, max)
}

/// `[d − half_width, d + half_width]`, lower end clamped to `Z_MIN`.
pub fn fixed_range(d_init: &DepthMap, half_width: f64) -> Result<DepthRange> {
    ensure!(
        half_width >= 0.0 && half_width.is_finite(),
        Contract,
        "half width must be nonnegative, got {half_width}"
    );
    let d = d_init.depths();
    DepthRange::new(
        d_init.height(),
        d_init.width(),
        d.iter().map(|&d| (d - half_width).max(Z_MIN)).collect(),
        d.iter().map(|&d| (d + half_width).max(Z_MIN)).collect(),
    )
}

/// The same `[scene_min, scene_max]` at every pixel.
pub fn vanilla_range(
    height: usize,
    width: usize,
    scene_min: f64,
    scene_max: f64,
) -> Result<DepthRange> {
    ensure!(
        scene_min > 0.0 && scene_min < scene_max && scene_max.is_finite(),
        Config,
        "scene bounds must satisfy 0 < min < max, got ({scene_min}, {scene_max})"
    );
    let n = height * width;
    DepthRange::new(height, width, vec![scene_min; n], vec![scene_max; n])
}

/// Clamps a prior into `[Z_MIN, scene_max]`.
pub fn clamp_prior(prior: &DepthMap, scene_max: f64) -> DepthMap {
    prior.map(|d| d.clamp(Z_MIN, scene_max.max(Z_MIN)))
}

/// `D` depth samples per pixel, nondecreasing in the bin index.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthHypothesisSet {
    bins: usize,
    height: usize,
    width: usize,
    spacing: Spacing,
    /// Bin-major: `samples[(i * height + y) * width + x]`.
    samples: Vec<f64>,
}

/// Sample `i` of `bins` between `lo` and `hi`.
#[inline]
fn sample(lo: f64, hi: f64, i: usize, bins: usize, spacing: Spacing) -> f64 {
    match spacing {
        Spacing::InverseDepth => {
            let (lo, hi) = (lo.max(Z_MIN), hi.max(Z_MIN));
            if lo == hi {
                return lo;
            }
            if bins == 1 {
                return (lo * hi).sqrt();
            }
            // Endpoints exact; 1/d uniform from 1/lo down to 1/hi.
            if i == 0 {
                return lo;
            }
            if i == bins - 1 {
                return hi;
            }
            let t = i as f64 / (bins - 1) as f64;
            1.0 / ((1.0 - t) / lo + t / hi)
        }
        Spacing::Linear => {
            if lo == hi {
                return lo.max(Z_MIN);
            }
            if bins == 1 {
                return (0.5 * (lo + hi)).max(Z_MIN);
            }
            let t = i as f64 / (bins - 1) as f64;
            ((1.0 - t) * lo + t * hi).max(Z_MIN)
        }
    }
}

impl DepthHypothesisSet {
    pub fn generate(range: &DepthRange, bins: usize, spacing: Spacing) -> Result<Self> {
        ensure!(bins >= 1, Config, "need at least one depth bin");
        let (h, w) = (range.height, range.width);
        let mut samples = vec![0.0; bins * h * w];
        for i in 0..bins {
            for k in 0..h * w {
                samples[i * h * w + k] = sample(range.min[k], range.max[k], i, bins, spacing);
            }
        }
        Ok(Self {
            bins,
            height: h,
            width: w,
            spacing,
            samples,
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

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    #[inline]
    pub fn at(&self, i: usize, y: usize, x: usize) -> f64 {
        self.samples[(i * self.height + y) * self.width + x]
    }

    /// The samples of one pixel, in bin order.
    pub fn pixel(&self, y: usize, x: usize) -> Vec<f64> {
        (0..self.bins).map(|i| self.at(i, y, x)).collect()
    }

    /// Bin whose sample is closest to `depth` in inverse depth.
    pub fn nearest_bin(&self, y: usize, x: usize, depth: f64) -> usize {
        let inv = 1.0 / depth;
        (0..self.bins)
            .min_by(|&a, &b| {
                let da = (1.0 / self.at(a, y, x) - inv).abs();
                let db = (1.0 / self.at(b, y, x) - inv).abs();
                da.total_cmp(&db)
            })
            .unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn one(d: f64) -> DepthMap {
        DepthMap::constant(1, 1, d)
    }

    #[test]
    fn adaptive_range_formula() {
        let r = adaptive_range(&one(10.0), 0.5).unwrap();
        let (lo, hi) = r.at(0, 0);
        assert_relative_eq!(lo, 20.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(hi, 15.0, epsilon = 1e-12);
        assert_eq!(adaptive_range(&one(10.0), 0.0).unwrap().at(0, 0), (10.0, 10.0));
        let r2 = adaptive_range(&one(20.0), 0.5).unwrap().at(0, 0);
        assert_relative_eq!(r2.0, 2.0 * lo, epsilon = 1e-12);
        assert_relative_eq!(r2.1, 2.0 * hi, epsilon = 1e-12);
    }

    #[test]
    fn adaptive_range_rejects_nonpositive_valid_prior() {
        assert!(adaptive_range(&one(0.0), 0.5).is_err());
        let masked = DepthMap::with_mask(1, 1, vec![0.0], vec![false]).unwrap();
        assert!(adaptive_range(&masked, 0.5).is_ok());
        assert!(adaptive_range(&one(1.0), -0.1).is_err());
    }

    #[test]
    fn inverse_depth_samples() {
        let r = DepthRange::new(1, 1, vec![5.0], vec![20.0]).unwrap();
        let h = DepthHypothesisSet::generate(&r, 4, Spacing::InverseDepth).unwrap();
        let want = [5.0, 20.0 / 3.0, 10.0, 20.0];
        for (a, b) in h.pixel(0, 0).iter().zip(want) {
            assert_relative_eq!(*a, b, epsilon = 1e-12);
        }
        let mid = DepthHypothesisSet::generate(&r, 1, Spacing::InverseDepth).unwrap();
        assert_relative_eq!(mid.at(0, 0, 0), 10.0, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_range_repeats() {
        let r = DepthRange::new(1, 1, vec![7.0], vec![7.0]).unwrap();
        for s in [Spacing::InverseDepth, Spacing::Linear] {
            for d in [1, 3, 16] {
                let h = DepthHypothesisSet::generate(&r, d, s).unwrap();
                assert!(h.pixel(0, 0).iter().all(|&v| v == 7.0));
            }
        }
    }

    #[test]
    fn linear_samples_clamp_to_z_min() {
        let r = DepthRange::new(1, 1, vec![0.0], vec![3.0]).unwrap();
        let h = DepthHypothesisSet::generate(&r, 4, Spacing::Linear).unwrap();
        assert_eq!(h.pixel(0, 0), vec![Z_MIN, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn zero_bins_rejected() {
        let r = DepthRange::new(1, 1, vec![1.0], vec![2.0]).unwrap();
        assert!(DepthHypothesisSet::generate(&r, 0, Spacing::Linear).is_err());
    }

    #[test]
    fn vanilla_ranges() {
        for max in [200.0, 80.0] {
            let r = vanilla_range(3, 4, 1.0, max).unwrap();
            for y in 0..3 {
                for x in 0..4 {
                    assert_eq!(r.at(y, x), (1.0, max));
                }
            }
        }
        assert!(vanilla_range(2, 2, 5.0, 5.0).is_err());
        assert!(vanilla_range(2, 2, 0.0, 5.0).is_err());
    }

    #[test]
    fn fixed_range_clamps() {
        let r = fixed_range(&one(1.0), 2.0).unwrap();
        assert_eq!(r.at(0, 0), (Z_MIN, 3.0));
    }

    #[test]
    fn nearest_bin_uses_inverse_depth() {
        let r = DepthRange::new(1, 1, vec![5.0], vec![20.0]).unwrap();
        let h = DepthHypothesisSet::generate(&r, 4, Spacing::InverseDepth).unwrap();
        assert_eq!(h.nearest_bin(0, 0, 9.0), 2);
        assert_eq!(h.nearest_bin(0, 0, 12.0), 2);
        assert_eq!(h.nearest_bin(0, 0, 16.0), 3);
    }

    #[test]
    fn clamp_prior_bounds() {
        let p = DepthMap::new(1, 3, vec![-1.0, 5.0, 500.0]).unwrap();
        assert_eq!(clamp_prior(&p, 200.0).depths(), &[Z_MIN, 5.0, 200.0]);
    }

    proptest! {
        #[test]
        fn adaptive_range_brackets_prior(d in 0.01f64..500.0, alpha in 0.0f64..3.0) {
            let (lo, hi) = adaptive_range(&one(d), alpha).unwrap().at(0, 0);
            prop_assert!(lo <= d && d <= hi);
            if alpha > 0.0 {
                prop_assert!(lo < d && d < hi);
            }
            let width = hi - lo;
            prop_assert!((width - d * (alpha + alpha / (1.0 + alpha))).abs() < 1e-9 * d.max(1.0));
        }

        #[test]
        fn range_width_grows_with_prior(d in 0.01f64..500.0, alpha in 0.01f64..3.0) {
            let w = |d: f64| { let (a, b) = adaptive_range(&one(d), alpha).unwrap().at(0, 0); b - a };
            prop_assert!(w(d * 1.01) > w(d));
        }

        #[test]
        fn samples_follow_spacing_law(
            lo in 0.5f64..50.0,
            span in 0.1f64..100.0,
            bins in 2usize..70,
        ) {
            let hi = lo + span;
            let r = DepthRange::new(1, 1, vec![lo], vec![hi]).unwrap();
            let h = DepthHypothesisSet::generate(&r, bins, Spacing::InverseDepth).unwrap();
            let s = h.pixel(0, 0);
            for i in 0..bins {
                let oracle = 1.0 / (1.0 / lo + (1.0 / hi - 1.0 / lo) * i as f64 / (bins - 1) as f64);
                prop_assert!((s[i] - oracle).abs() < 1e-9 * oracle);
                if i > 0 { prop_assert!(s[i] > s[i - 1]); }
            }
            let l = DepthHypothesisSet::generate(&r, bins, Spacing::Linear).unwrap();
            let s = l.pixel(0, 0);
            for i in 1..bins {
                prop_assert!(s[i] > s[i - 1]);
            }
        }
    }
}
