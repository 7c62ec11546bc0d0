//! Two-frame surround depth estimation: features, hypotheses, spatial and
//! temporal volumes, fusion, decoding and upsampling for every camera.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::depth_map::DepthMap;
use crate::error::{ensure, Result};
use crate::geometry::{camera_pose_from_ego, spatial_relative_pose, CameraRig, RigidPose};
use crate::hypotheses::{
    adaptive_range, clamp_prior, fixed_range, vanilla_range, DepthHypothesisSet, SamplingMode,
    Spacing,
};
use crate::mff::{mff, vanilla_fuse, FeatureProvider, IntensityFeatures, MffKernels, TextureFeatures};
use crate::numerics::Grid2;
use crate::stf::{
    aggregate_scores, convex_upsample, depth_argmax, depth_expectation, fuse_by_mode,
    matching_scores, scores_to_probability,
    ProbabilityVolume, ScoreNorm, StfMode, UpsampleMask,
};
use crate::synthetic::{render, sparse_pseudo_depth, PseudoDepthOptions, Scene};
use crate::volumes::{build_spatial, build_temporal, sweep_length};

/// How the context feature for upsampling is built.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    /// Attention-weighted fusion.
    #[default]
    Mff,
    /// Plain addition.
    Vff,
}

/// Upsampling mask source.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleKind {
    #[default]
    Bilinear,
    /// Bilinear weights damped across context-feature edges.
    Guided,
}

/// Knobs of the estimation pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateOptions {
    pub bins: usize,
    pub alpha: f64,
    pub spacing: Spacing,
    pub mode: SamplingMode,
    /// Half width in meters of the `fixed` sampling window.
    pub fixed_half_width: f64,
    pub scene_min: f64,
    pub scene_max: f64,
    pub groups: usize,
    pub tau: f64,
    pub stf: StfMode,
    pub score_norm: ScoreNorm,
    pub fusion: FusionKind,
    pub upsample: UpsampleKind,
    /// Feature-space bandwidth of the guided mask.
    pub guide_sigma: f64,
    /// Pixels whose hypotheses sweep less than this many feature pixels in
    /// every source view are flagged low-confidence.
    pub min_sweep: f64,
    /// Window radius of depth-consistent score aggregation (0 disables).
    pub aggregation: usize,
    /// Matching feature channels.
    pub channels: usize,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self {
            bins: 16,
            alpha: 0.5,
            spacing: Spacing::InverseDepth,
            mode: SamplingMode::Adaptive,
            fixed_half_width: 2.0,
            scene_min: 0.5,
            scene_max: 200.0,
            groups: 8,
            tau: 0.05,
            stf: StfMode::On,
            score_norm: ScoreNorm::Cosine,
            fusion: FusionKind::Mff,
            upsample: UpsampleKind::Bilinear,
            guide_sigma: 0.5,
            min_sweep: 1.0,
            aggregation: 2,
            channels: 16,
        }
    }
}

impl EstimateOptions {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.bins >= 1, Config, "bins must be at least 1");
        ensure!(self.alpha >= 0.0, Config, "alpha must be nonnegative");
        ensure!(
            self.scene_min > 0.0 && self.scene_min < self.scene_max,
            Config,
            "scene bounds must satisfy 0 < scene_min < scene_max"
        );
        ensure!(self.tau > 0.0, Config, "tau must be positive");
        ensure!(
            self.groups >= 1 && self.channels.is_multiple_of(self.groups),
            Config,
            "groups ({}) must divide channels ({})",
            self.groups,
            self.channels
        );
        ensure!(self.fixed_half_width >= 0.0, Config, "fixed_half_width must be nonnegative");
        Ok(())
    }
}

/// Everything produced for one camera.
#[derive(Clone, Debug)]
pub struct CameraEstimate {
    pub hypotheses: DepthHypothesisSet,
    pub probability: ProbabilityVolume,
    /// Expectation over bins at feature resolution; the prior where no bin
    /// could be scored.
    pub coarse: DepthMap,
    /// Most probable bin at feature resolution.
    pub argmax: DepthMap,
    /// Longest epipolar sweep over the active source views (feature pixels).
    pub sweep: Grid2,
    /// True where the estimate is trusted.
    pub confident: Vec<bool>,
    /// Upsampled to image resolution.
    pub depth: DepthMap,
}

/// Feature extractors and fusion kernels.
pub struct Extractors {
    pub matching: Box<dyn FeatureProvider>,
    pub prior: Box<dyn FeatureProvider>,
    pub kernels: MffKernels,
}

impl Extractors {
    pub fn default_for(opts: &EstimateOptions) -> Self {
        Self {
            matching: Box::new(IntensityFeatures {
                channels: opts.channels,
                ..IntensityFeatures::default()
            }),
            prior: Box::new(TextureFeatures {
                channels: opts.channels,
                ..TextureFeatures::default()
            }),
            kernels: MffKernels::seeded(opts.channels, opts.channels, crate::mff::MFF_DEFAULT_SEED),
        }
    }
}

/// Inputs for one estimation.
pub struct EstimateInputs<'a> {
    /// Rig at image resolution.
    pub rig: &'a CameraRig,
    pub prev: &'a [Grid2],
    pub curr: &'a [Grid2],
    /// `P_{t→t-1}`.
    pub ego_motion: &'a RigidPose,
    /// Depth prior per camera at feature resolution.
    pub priors: &'a [DepthMap],
    /// Precomputed matching features `(prev, curr)` per camera, used instead
    /// of `Extractors::matching`.
    pub matching_features: Option<(&'a [Grid2], &'a [Grid2])>,
    /// Precomputed prior features of the current frames, used instead of
    /// `Extractors::prior`.
    pub prior_features: Option<&'a [Grid2]>,
}

impl<'a> EstimateInputs<'a> {
    pub fn new(
        rig: &'a CameraRig,
        prev: &'a [Grid2],
        curr: &'a [Grid2],
        ego_motion: &'a RigidPose,
        priors: &'a [DepthMap],
    ) -> Self {
        Self {
            rig,
            prev,
            curr,
            ego_motion,
            priors,
            matching_features: None,
            prior_features: None,
        }
    }
}

fn check_features(set: &[Grid2], rig: &CameraRig, scale: usize, what: &str) -> Result<()> {
    ensure!(set.len() == rig.len(), ShapeMismatch, "need {what} features for {} cameras", rig.len());
    for (c, (g, cam)) in set.iter().zip(rig.cameras()).enumerate() {
        ensure!(
            g.height() == cam.height / scale && g.width() == cam.width / scale,
            ShapeMismatch,
            "camera {c}: {what} features are {}x{}, expected {}x{}",
            g.height(),
            g.width(),
            cam.height / scale,
            cam.width / scale
        );
    }
    Ok(())
}

fn hypotheses_for(prior: &DepthMap, opts: &EstimateOptions) -> Result<DepthHypothesisSet> {
    let prior = clamp_prior(prior, opts.scene_max);
    let range = match opts.mode {
        SamplingMode::Adaptive => adaptive_range(&prior, opts.alpha)?,
        SamplingMode::Fixed => fixed_range(&prior, opts.fixed_half_width)?,
        SamplingMode::Vanilla => {
            vanilla_range(prior.height(), prior.width(), opts.scene_min, opts.scene_max)?
        }
    };
    DepthHypothesisSet::generate(&range, opts.bins, opts.spacing)
}

/// Runs the full pipeline on every camera.
pub fn estimate(
    inputs: &EstimateInputs<'_>,
    ex: &Extractors,
    opts: &EstimateOptions,
) -> Result<Vec<CameraEstimate>> {
    opts.validate()?;
    let n = inputs.rig.len();
    ensure!(
        inputs.prev.len() == n && inputs.curr.len() == n && inputs.priors.len() == n,
        ShapeMismatch,
        "need one previous image, current image and prior per camera ({n})"
    );
    let scale = ex.matching.scale();
    ensure!(
        ex.prior.scale() == scale,
        Config,
        "matching and prior features must share a scale"
    );
    let coarse_rig = inputs.rig.pooled(scale);
    let (f_prev, f_curr): (Vec<Grid2>, Vec<Grid2>) = match inputs.matching_features {
        Some((p, c)) => {
            check_features(p, inputs.rig, scale, "previous matching")?;
            check_features(c, inputs.rig, scale, "current matching")?;
            ensure!(
                p.iter().chain(c).all(|g| g.channels() == p[0].channels()),
                ShapeMismatch,
                "matching features disagree in channel count"
            );
            (p.to_vec(), c.to_vec())
        }
        None => (
            inputs
                .prev
                .par_iter()
                .map(|im| ex.matching.extract(im))
                .collect::<Result<_>>()?,
            inputs
                .curr
                .par_iter()
                .map(|im| ex.matching.extract(im))
                .collect::<Result<_>>()?,
        ),
    };
    if let Some(s) = inputs.prior_features {
        check_features(s, inputs.rig, scale, "prior")?;
    }
    (0..n)
        .into_par_iter()
        .map(|c| estimate_camera(c, inputs, ex, opts, &coarse_rig, &f_prev, &f_curr))
        .collect()
}

fn estimate_camera(
    c: usize,
    inputs: &EstimateInputs<'_>,
    ex: &Extractors,
    opts: &EstimateOptions,
    coarse_rig: &CameraRig,
    f_prev: &[Grid2],
    f_curr: &[Grid2],
) -> Result<CameraEstimate> {
    let cam = coarse_rig.camera(c)?;
    let f = &f_curr[c];
    let prior = &inputs.priors[c];
    ensure!(
        prior.height() == f.height() && prior.width() == f.width(),
        ShapeMismatch,
        "prior for camera {c} is {}x{}, features are {}x{}",
        prior.height(),
        prior.width(),
        f.height(),
        f.width()
    );
    let hyps = hypotheses_for(prior, opts)?;
    let cam_motion = camera_pose_from_ego(inputs.ego_motion, &cam.extrinsic);
    let use_tp = opts.stf != StfMode::SpatialOnly;
    let use_sp = matches!(opts.stf, StfMode::On | StfMode::SpatialOnly);
    let v_tp = build_temporal(f, &f_prev[c], &cam_motion, &cam.intrinsics, &hyps)?;
    let (l, r) = coarse_rig.neighbors(c)?;
    let v_sp = build_spatial(f, &f_curr[l], &f_curr[r], coarse_rig, c, &hyps)?;
    let fused = fuse_by_mode(f, &v_sp, &v_tp, opts.groups, opts.stf)?;
    let (scores, valid) = matching_scores(f, &fused, opts.groups, opts.score_norm)?;
    let scores = aggregate_scores(&scores, &valid, &hyps, opts.aggregation)?;
    let probability = scores_to_probability(&scores, &valid, opts.tau)?;
    let scored = depth_expectation(&probability, &hyps)?;
    let argmax = depth_argmax(&probability, &hyps)?;
    // Pixels no source view reaches keep the prior, so the output is dense.
    let fallback = clamp_prior(prior, opts.scene_max);
    let coarse = DepthMap::new(
        f.height(),
        f.width(),
        scored
            .depths()
            .iter()
            .zip(scored.valid())
            .zip(fallback.depths())
            .map(|((&d, &ok), &p)| if ok { d } else { p })
            .collect(),
    )?;

    let mut sweep = Grid2::zeros(f.height(), f.width(), 1);
    let mut take = |s: Grid2| {
        sweep = sweep.zip_map(&s, f64::max).expect("same shape");
    };
    if use_tp {
        take(sweep_length(&cam.intrinsics, &cam.intrinsics, &cam_motion, &hyps, cam.width, cam.height));
    }
    if use_sp {
        for nb in [l, r] {
            let other = coarse_rig.camera(nb)?;
            let rel = spatial_relative_pose(coarse_rig, c, nb)?;
            take(sweep_length(&cam.intrinsics, &other.intrinsics, &rel, &hyps, other.width, other.height));
        }
    }
    let confident: Vec<bool> = sweep
        .data()
        .iter()
        .zip(scored.valid())
        .map(|(&s, &v)| v && s >= opts.min_sweep)
        .collect();

    let scale = ex.matching.scale();
    let mask = match opts.upsample {
        UpsampleKind::Bilinear => UpsampleMask::bilinear(f.height(), f.width(), scale),
        UpsampleKind::Guided => {
            let s_feat = match inputs.prior_features {
                Some(s) => s[c].clone(),
                None => ex.prior.extract(&inputs.curr[c])?,
            };
            let context = match opts.fusion {
                FusionKind::Mff => mff(f, &s_feat, &ex.kernels)?,
                FusionKind::Vff => vanilla_fuse(f, &s_feat)?,
            };
            UpsampleMask::feature_guided(&context, scale, opts.guide_sigma)?
        }
    };
    let depth = convex_upsample(&coarse, &mask)?.depth;
    Ok(CameraEstimate {
        hypotheses: hyps,
        probability,
        coarse,
        argmax,
        sweep,
        confident,
        depth,
    })
}

/// Ground-truth depth at feature-pixel centres, rendered with the pooled rig.
pub fn coarse_ground_truth(
    scene: &Scene,
    rig: &CameraRig,
    ego_to_world: &RigidPose,
    factor: usize,
) -> Result<Vec<DepthMap>> {
    Ok(render(scene, &rig.pooled(factor), ego_to_world)?
        .into_iter()
        .map(|f| f.depth_gt)
        .collect())
}

/// Sparse SfM-style pseudo-depth at feature resolution for the frames at
/// `ego_to_world`.
pub fn coarse_pseudo_depth(
    scene: &Scene,
    rig: &CameraRig,
    ego_to_world: &RigidPose,
    factor: usize,
    opts: &PseudoDepthOptions,
) -> Result<Vec<DepthMap>> {
    let coarse = rig.pooled(factor);
    let frames = render(scene, &coarse, ego_to_world)?;
    Ok(sparse_pseudo_depth(&frames, &coarse, opts)?
        .into_iter()
        .map(|p| p.depth)
        .collect())
}

/// Lattice spacing, in pixels, of the smooth part of [`noisy_prior`].
pub const PRIOR_NOISE_CELL: usize = 8;

/// `gt · exp(σ·n)`, where `n` is a per-map offset plus a field bilinearly
/// interpolated from a lattice of normal samples, each weighted `1/√2` and
/// clamped to ±3.
pub fn noisy_prior(gt: &DepthMap, sigma: f64, seed: u64) -> DepthMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (gt.height(), gt.width());
    let cell = PRIOR_NOISE_CELL as f64;
    let (lh, lw) = (h / PRIOR_NOISE_CELL + 2, w / PRIOR_NOISE_CELL + 2);
    let offset: f64 = StandardNormal.sample(&mut rng);
    let lattice: Vec<f64> = (0..lh * lw).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut out = gt.clone();
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y as f64 / cell, x as f64 / cell);
            let (iy, ix) = (fy.floor() as usize, fx.floor() as usize);
            let (ty, tx) = (fy - iy as f64, fx - ix as f64);
            let l = |a: usize, b: usize| lattice[a * lw + b];
            let field = (1.0 - ty) * ((1.0 - tx) * l(iy, ix) + tx * l(iy, ix + 1))
                + ty * ((1.0 - tx) * l(iy + 1, ix) + tx * l(iy + 1, ix + 1));
            let n = ((offset + field) * std::f64::consts::FRAC_1_SQRT_2).clamp(-3.0, 3.0);
            out.set(y, x, gt.at(y, x) * (sigma * n).exp());
        }
    }
    out
}
