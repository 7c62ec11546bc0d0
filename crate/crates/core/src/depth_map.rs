use crate::error::{ensure, Result};
use crate::numerics::Grid2;

/// Per-pixel metric z-depth with a validity flag.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    depth: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    /// Every pixel valid.
    pub fn new(height: usize, width: usize, depth: Vec<f64>) -> Result<Self> {
        let valid = vec![true; depth.len()];
        Self::with_mask(height, width, depth, valid)
    }

    pub fn with_mask(
        height: usize,
        width: usize,
        depth: Vec<f64>,
        valid: Vec<bool>,
    ) -> Result<Self> {
        ensure!(
            depth.len() == height * width && valid.len() == height * width,
            ShapeMismatch,
            "depth map {height}x{width} got {} depths and {} flags",
            depth.len(),
            valid.len()
        );
        ensure!(
            depth.iter().all(|d| d.is_finite()),
            Contract,
            "depths must be finite"
        );
        Ok(Self {
            height,
            width,
            depth,
            valid,
        })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            depth: vec![value; height * width],
            valid: vec![true; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut depth = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                depth.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            valid: vec![true; depth.len()],
            depth,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.depth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depth.is_empty()
    }

    pub fn depths(&self) -> &[f64] {
        &self.depth
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.depth[y * self.width + x]
    }

    #[inline]
    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.valid[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, d: f64) {
        self.depth[y * self.width + x] = d;
    }

    pub fn set_valid(&mut self, y: usize, x: usize, v: bool) {
        self.valid[y * self.width + x] = v;
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn same_shape(&self, other: &DepthMap) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Applies `f` to every depth, keeping the mask.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> DepthMap {
        DepthMap {
            depth: self.depth.iter().map(|&d| f(d)).collect(),
            valid: self.valid.clone(),
            ..*self
        }
    }

    pub fn scaled(&self, s: f64) -> DepthMap {
        self.map(|d| d * s)
    }

    /// Mean depth over valid pixels (0 when none are valid).
    pub fn valid_mean(&self) -> f64 {
        let (s, n) = self
            .depth
            .iter()
            .zip(&self.valid)
            .filter(|(_, &v)| v)
            .fold((0.0, 0usize), |(s, n), (d, _)| (s + d, n + 1));
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    }

    pub fn to_grid(&self) -> Grid2 {
        Grid2::from_fn(self.height, self.width, 1, |y, x, _| self.at(y, x))
    }

    pub fn from_grid(g: &Grid2) -> Result<Self> {
        ensure!(g.channels() == 1, Contract, "depth grid must be 1-channel");
        Self::new(g.height(), g.width(), g.data().to_vec())
    }
}
