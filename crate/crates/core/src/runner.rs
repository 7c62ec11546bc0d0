//! The four commands: `synth`, `estimate`, `refine` and `eval`.
//!
//! Each reads a resolved [`PipelineConfig`], does its work in memory and
//! writes every artifact from the calling thread.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{InputMode, PipelineConfig, ProviderKind};
use crate::depth_map::DepthMap;
use crate::error::{ensure, Error, Result};
use crate::geometry::{CameraRig, RigidPose};
use crate::io::{
    read_features, read_json, read_pfm, read_ppm, write_json, write_pfm, write_pgm, write_ppm,
    DatasetLayout, Frame, PoseFile,
};
use crate::losses::LossReport;
use crate::metrics::{abs_rel_map, evaluate_masked, per_camera_report, CameraReport, EvalBounds};
use crate::numerics::Grid2;
use crate::pipeline::{
    coarse_ground_truth, coarse_pseudo_depth, estimate, noisy_prior, CameraEstimate, EstimateInputs,
    EstimateOptions,
};
use crate::refine::{run_refine, HistoryEntry, RefineOptions, RefineProblem, RefinementState};
use crate::stf::{convex_upsample, UpsampleMask};
use crate::synthetic::{make_two_frame_sequence, PseudoDepthOptions, Scene};

/// Frames, calibration and whatever ground truth is known.
pub struct Dataset {
    pub rig: CameraRig,
    pub prev: Vec<Grid2>,
    pub curr: Vec<Grid2>,
    /// Depth of the current frames at image resolution.
    pub gt: Option<Vec<DepthMap>>,
    pub gt_pose: Option<RigidPose>,
    /// Present in synthetic mode only.
    pub scene: Option<Scene>,
    /// Matching features `(prev, curr)` read from files.
    pub matching_features: Option<(Vec<Grid2>, Vec<Grid2>)>,
    /// Prior features of the current frames read from files.
    pub prior_features: Option<Vec<Grid2>>,
}

fn read_feature_set(layout: &DatasetLayout, n: usize, frame: Frame, scale: usize) -> Result<Vec<Grid2>> {
    (0..n)
        .map(|c| {
            let (g, s) = read_features(&layout.features(c, frame))?;
            ensure!(
                s == scale,
                Format,
                "camera {c}: feature file scale {s}, pipeline expects {scale}"
            );
            Ok(g)
        })
        .collect()
}

/// Renders or reads the frames named by `cfg.input`.
pub fn load_dataset(cfg: &PipelineConfig) -> Result<Dataset> {
    let rig = cfg.load_rig()?;
    match &cfg.input {
        InputMode::Synthetic { .. } => {
            let scene = cfg.load_scene()?;
            let motion = cfg.synthetic_motion();
            let seq = make_two_frame_sequence(&scene, &rig, &motion)?;
            Ok(Dataset {
                prev: seq.prev.iter().map(|f| f.image.clone()).collect(),
                curr: seq.curr.iter().map(|f| f.image.clone()).collect(),
                gt: Some(seq.curr.into_iter().map(|f| f.depth_gt).collect()),
                gt_pose: Some(seq.ego_motion),
                scene: Some(scene),
                rig,
                matching_features: None,
                prior_features: None,
            })
        }
        InputMode::Images { dir } => {
            let layout = DatasetLayout::new(dir.clone());
            let n = rig.len();
            let read = |frame| -> Result<Vec<Grid2>> {
                (0..n).map(|c| read_ppm(&layout.image(c, frame))).collect()
            };
            let prev = read(Frame::Prev)?;
            let curr = read(Frame::Curr)?;
            for (c, (a, cam)) in curr.iter().zip(rig.cameras()).enumerate() {
                ensure!(
                    a.height() == cam.height && a.width() == cam.width && prev[c].same_shape(a),
                    ShapeMismatch,
                    "camera {c}: images do not match the {}x{} calibration",
                    cam.height,
                    cam.width
                );
            }
            let gt = if (0..n).all(|c| layout.depth(c, Frame::Curr).exists()) {
                Some((0..n).map(|c| read_pfm(&layout.depth(c, Frame::Curr))).collect::<Result<_>>()?)
            } else {
                None
            };
            let gt_pose = if layout.pose().exists() {
                Some(read_json::<PoseFile>(&layout.pose())?.pose()?)
            } else {
                None
            };
            let scale = feature_scale(cfg);
            let matching_features = if cfg.features.matching == ProviderKind::File {
                Some((
                    read_feature_set(&layout, n, Frame::Prev, scale)?,
                    read_feature_set(&layout, n, Frame::Curr, scale)?,
                ))
            } else {
                None
            };
            let prior_features = if cfg.features.prior == ProviderKind::File {
                Some(read_feature_set(&layout, n, Frame::Curr, scale)?)
            } else {
                None
            };
            Ok(Dataset {
                rig,
                prev,
                curr,
                gt,
                gt_pose,
                scene: None,
                matching_features,
                prior_features,
            })
        }
    }
}

fn feature_scale(cfg: &PipelineConfig) -> usize {
    cfg.extractors().map(|e| e.matching.scale()).unwrap_or(4)
}

/// Where the ego motion came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseSource {
    Config,
    GroundTruth,
    Refinement,
}

/// Seed of camera `c`'s prior noise.
fn prior_seed(seed: u64, c: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(c as u64)
}

/// Noisy ground truth in synthetic mode, a constant plane otherwise.
pub fn priors(cfg: &PipelineConfig, ds: &Dataset) -> Result<Vec<DepthMap>> {
    let scale = feature_scale(cfg);
    match (&ds.scene, &ds.gt_pose) {
        (Some(scene), Some(pose)) => Ok(coarse_ground_truth(scene, &ds.rig, pose, scale)?
            .iter()
            .enumerate()
            .map(|(c, g)| noisy_prior(g, cfg.prior_sigma, prior_seed(cfg.seed, c)))
            .collect()),
        _ => Ok(ds
            .rig
            .cameras()
            .iter()
            .map(|cam| DepthMap::constant(cam.height / scale, cam.width / scale, cfg.plane_prior))
            .collect()),
    }
}

/// Config pose, else the dataset's pose, else pose-only refinement from
/// identity against `depths`.
pub fn choose_pose(
    cfg: &PipelineConfig,
    ds: &Dataset,
    depths: &[DepthMap],
) -> Result<(RigidPose, PoseSource)> {
    if let Some(p) = cfg.configured_pose()? {
        return Ok((p, PoseSource::Config));
    }
    if let Some(p) = ds.gt_pose {
        return Ok((p, PoseSource::GroundTruth));
    }
    let opts = RefineOptions {
        refine_depth: false,
        refine_pose: true,
        ..cfg.refine.clone()
    };
    let problem = RefineProblem::new(&ds.rig, &ds.prev, &ds.curr, None, feature_scale(cfg), opts)?;
    let out = run_refine(
        &problem,
        RefinementState::new(depths.to_vec(), RigidPose::identity()),
    )?;
    Ok((out.pose, PoseSource::Refinement))
}

fn run_pipeline(
    cfg: &PipelineConfig,
    ds: &Dataset,
    priors: &[DepthMap],
    pose: &RigidPose,
) -> Result<Vec<CameraEstimate>> {
    let ex = cfg.extractors()?;
    let mut inputs = EstimateInputs::new(&ds.rig, &ds.prev, &ds.curr, pose, priors);
    inputs.matching_features = ds
        .matching_features
        .as_ref()
        .map(|(p, c)| (p.as_slice(), c.as_slice()));
    inputs.prior_features = ds.prior_features.as_deref();
    estimate(&inputs, &ex, &cfg.estimate)
}

fn out_dir(cfg: &PipelineConfig) -> Result<PathBuf> {
    cfg.out
        .clone()
        .ok_or_else(|| Error::Config("no output directory given".into()))
}

fn inverse_depth(d: &DepthMap) -> (Grid2, f64) {
    let g = Grid2::from_fn(d.height(), d.width(), 1, |y, x, _| {
        if d.is_valid(y, x) && d.at(y, x) > 0.0 {
            1.0 / d.at(y, x)
        } else {
            0.0
        }
    });
    let hi = g.data().iter().copied().fold(0.0, f64::max);
    (g, if hi > 0.0 { hi } else { 1.0 })
}

fn write_depth_set(dir: &Path, depths: &[DepthMap]) -> Result<()> {
    for (c, d) in depths.iter().enumerate() {
        write_pfm(&dir.join(format!("cam{c}.pfm")), d)?;
        let (g, hi) = inverse_depth(d);
        write_pgm(&dir.join(format!("cam{c}.pgm")), &g, 0.0, hi)?;
    }
    Ok(())
}

fn camera_report(pred: &[DepthMap], gt: &[DepthMap], bounds: &EvalBounds) -> Result<CameraReport> {
    let rows = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| evaluate_masked(p, g, bounds, None))
        .collect::<Result<Vec<_>>>()?;
    per_camera_report(&rows)
}

/// Counts of what `synth` wrote.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub cameras: usize,
    pub images: usize,
    pub depth_maps: usize,
    pub pose_files: usize,
}

/// Renders both frames of every camera and writes a dataset directory.
pub fn run_synth(cfg: &PipelineConfig) -> Result<SynthSummary> {
    ensure!(
        matches!(cfg.input, InputMode::Synthetic { .. }),
        Config,
        "synth needs synthetic input"
    );
    let out = out_dir(cfg)?;
    let rig = cfg.load_rig()?;
    let scene = cfg.load_scene()?;
    let motion = cfg.synthetic_motion();
    let seq = make_two_frame_sequence(&scene, &rig, &motion)?;
    let layout = DatasetLayout::new(out);
    write_json(&layout.rig(), &rig.to_file())?;
    write_json(&layout.scene(), &scene)?;
    write_json(&layout.pose(), &PoseFile::from_pose(&motion))?;
    let mut summary = SynthSummary {
        cameras: rig.len(),
        images: 0,
        depth_maps: 0,
        pose_files: 1,
    };
    for (frame, frames) in [(Frame::Prev, &seq.prev), (Frame::Curr, &seq.curr)] {
        for (c, f) in frames.iter().enumerate() {
            write_ppm(&layout.image(c, frame), &f.image)?;
            write_pfm(&layout.depth(c, frame), &f.depth_gt)?;
            summary.images += 1;
            summary.depth_maps += 1;
        }
    }
    Ok(summary)
}

/// `report.json` of `estimate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub pose_source: PoseSource,
    pub ego_motion: Vec<f64>,
    pub options: EstimateOptions,
    pub ablations: Vec<String>,
    /// Fraction of feature pixels flagged confident, per camera.
    pub confident_fraction: Vec<f64>,
    /// Upsampled depth against image-resolution ground truth.
    pub metrics: Option<CameraReport>,
    /// Feature-resolution expectation against feature-resolution ground
    /// truth (synthetic mode).
    pub coarse_metrics: Option<CameraReport>,
}

pub struct EstimateRun {
    pub estimates: Vec<CameraEstimate>,
    pub report: EstimateReport,
}

/// Estimates every camera's depth and writes `depth/`, `coarse/`,
/// `confidence/` and `report.json`.
pub fn run_estimate(cfg: &PipelineConfig) -> Result<EstimateRun> {
    let out = out_dir(cfg)?;
    let ds = load_dataset(cfg)?;
    let priors = priors(cfg, &ds)?;
    let (pose, pose_source) = choose_pose(cfg, &ds, &priors)?;
    let estimates = run_pipeline(cfg, &ds, &priors, &pose)?;
    let depths: Vec<DepthMap> = estimates.iter().map(|e| e.depth.clone()).collect();
    let coarse: Vec<DepthMap> = estimates.iter().map(|e| e.coarse.clone()).collect();
    let metrics = ds
        .gt
        .as_ref()
        .map(|gt| camera_report(&depths, gt, &cfg.eval))
        .transpose()?;
    let coarse_metrics = match (&ds.scene, &ds.gt_pose) {
        (Some(scene), Some(p)) => {
            let gt = coarse_ground_truth(scene, &ds.rig, p, feature_scale(cfg))?;
            Some(camera_report(&coarse, &gt, &cfg.eval)?)
        }
        _ => None,
    };
    let report = EstimateReport {
        pose_source,
        ego_motion: pose.to_row_major_3x4().to_vec(),
        options: cfg.estimate.clone(),
        ablations: cfg.ablations.clone(),
        confident_fraction: estimates
            .iter()
            .map(|e| e.confident.iter().filter(|&&v| v).count() as f64 / e.confident.len() as f64)
            .collect(),
        metrics,
        coarse_metrics,
    };
    write_depth_set(&out.join("depth"), &depths)?;
    for (c, e) in estimates.iter().enumerate() {
        write_pfm(&out.join("coarse").join(format!("cam{c}.pfm")), &e.coarse)?;
        let mask = Grid2::from_fn(e.coarse.height(), e.coarse.width(), 1, |y, x, _| {
            if e.confident[y * e.coarse.width() + x] {
                1.0
            } else {
                0.0
            }
        });
        write_pgm(&out.join("confidence").join(format!("cam{c}.pgm")), &mask, 0.0, 1.0)?;
    }
    write_json(&out.join("report.json"), &report)?;
    Ok(EstimateRun { estimates, report })
}

/// `report.json` of `refine`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineReport {
    pub pose_source: PoseSource,
    pub initial_ego_motion: Vec<f64>,
    pub ego_motion: Vec<f64>,
    pub iterations: usize,
    pub loss: Option<LossReport>,
    pub initial_total: f64,
    /// Feature-resolution metrics before and after (synthetic mode).
    pub before: Option<CameraReport>,
    pub after: Option<CameraReport>,
}

pub struct RefineRun {
    pub state: RefinementState,
    pub report: RefineReport,
}

/// Estimates, then refines the feature-resolution depth (and the pose,
/// when it did not come from the config or a pose file) against the
/// self-supervised objective.
pub fn run_refine_command(cfg: &PipelineConfig) -> Result<RefineRun> {
    let out = out_dir(cfg)?;
    let ds = load_dataset(cfg)?;
    let scale = feature_scale(cfg);
    let priors = priors(cfg, &ds)?;
    let (pose, pose_source) = choose_pose(cfg, &ds, &priors)?;
    let estimates = run_pipeline(cfg, &ds, &priors, &pose)?;
    // Unscored pixels start from the prior.
    let init: Vec<DepthMap> = estimates
        .iter()
        .zip(&priors)
        .map(|(e, p)| {
            let d = e
                .coarse
                .depths()
                .iter()
                .zip(e.coarse.valid())
                .zip(p.depths())
                .map(|((&d, &ok), &q)| if ok && d > 0.0 { d } else { q })
                .collect();
            DepthMap::with_mask(e.coarse.height(), e.coarse.width(), d, p.valid().to_vec())
        })
        .collect::<Result<_>>()?;
    let pseudo = match (&ds.scene, &ds.gt_pose) {
        (Some(scene), Some(p)) => Some(coarse_pseudo_depth(
            scene,
            &ds.rig,
            p,
            scale,
            &PseudoDepthOptions {
                seed: cfg.seed,
                ..PseudoDepthOptions::default()
            },
        )?),
        _ => None,
    };
    let opts = RefineOptions {
        refine_pose: cfg.refine.refine_pose && pose_source == PoseSource::Refinement,
        ..cfg.refine.clone()
    };
    let problem = RefineProblem::new(&ds.rig, &ds.prev, &ds.curr, pseudo, scale, opts)?;
    let state = run_refine(&problem, RefinementState::new(init.clone(), pose))?;

    let coarse_gt = match (&ds.scene, &ds.gt_pose) {
        (Some(scene), Some(p)) => Some(coarse_ground_truth(scene, &ds.rig, p, scale)?),
        _ => None,
    };
    let (before, after) = match &coarse_gt {
        Some(gt) => (
            Some(camera_report(&init, gt, &cfg.eval)?),
            Some(camera_report(&state.depths, gt, &cfg.eval)?),
        ),
        None => (None, None),
    };
    let report = RefineReport {
        pose_source,
        initial_ego_motion: pose.to_row_major_3x4().to_vec(),
        ego_motion: state.pose.to_row_major_3x4().to_vec(),
        iterations: state.iteration,
        loss: state.report,
        initial_total: state.history.first().map_or(f64::NAN, |h| h.total),
        before,
        after,
    };
    write_depth_set(&out.join("refined"), &state.depths)?;
    let upsampled = state
        .depths
        .iter()
        .map(|d| {
            let mask = UpsampleMask::bilinear(d.height(), d.width(), scale);
            Ok(convex_upsample(d, &mask)?.depth)
        })
        .collect::<Result<Vec<_>>>()?;
    write_depth_set(&out.join("depth"), &upsampled)?;
    write_json(&out.join("pose.json"), &PoseFile::from_pose(&state.pose))?;
    write_json::<Vec<HistoryEntry>>(&out.join("history.json"), &state.history)?;
    write_json(&out.join("report.json"), &report)?;
    Ok(RefineRun { state, report })
}

/// Depth file of camera `c` inside an `estimate`/`refine` output or a
/// `synth` dataset.
fn depth_file(dir: &Path, c: usize) -> Option<PathBuf> {
    [
        dir.join("depth").join(format!("cam{c}.pfm")),
        dir.join("depth").join(format!("cam{c}_curr.pfm")),
        dir.join(format!("cam{c}.pfm")),
    ]
    .into_iter()
    .find(|p| p.exists())
}

/// Scores every predicted depth map in `pred` against its counterpart in
/// `gt`. Writes `eval.json` and per-camera error maps when `out` is given.
pub fn run_eval(pred: &Path, gt: &Path, bounds: &EvalBounds, out: Option<&Path>) -> Result<CameraReport> {
    let mut pairs = Vec::new();
    for c in 0.. {
        match (depth_file(pred, c), depth_file(gt, c)) {
            (Some(p), Some(g)) => pairs.push((p, g)),
            (None, None) => break,
            (Some(p), None) => {
                return Err(Error::Config(format!(
                    "{} has no ground truth for camera {c}",
                    p.display()
                )))
            }
            (None, Some(g)) => {
                return Err(Error::Config(format!(
                    "{} has no prediction for camera {c}",
                    g.display()
                )))
            }
        }
    }
    ensure!(
        !pairs.is_empty(),
        Config,
        "no depth maps found in {}",
        pred.display()
    );
    let mut rows = Vec::new();
    let mut maps = Vec::new();
    for (p, g) in &pairs {
        let (p, g) = (read_pfm(p)?, read_pfm(g)?);
        rows.push(evaluate_masked(&p, &g, bounds, None)?);
        maps.push(abs_rel_map(&p, &g, bounds)?);
    }
    let report = per_camera_report(&rows)?;
    if let Some(out) = out {
        write_json(&out.join("eval.json"), &report)?;
        for (c, m) in maps.iter().enumerate() {
            write_pgm(&out.join("errors").join(format!("cam{c}.pgm")), m, 0.0, 0.5)?;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pose_precedence() {
        let mut cfg = PipelineConfig::default();
        let ds = Dataset {
            rig: CameraRig::default_surround(),
            prev: Vec::new(),
            curr: Vec::new(),
            gt: None,
            gt_pose: Some(RigidPose::from_translation(nalgebra::Vector3::new(2.0, 0.0, 0.0))),
            scene: None,
            matching_features: None,
            prior_features: None,
        };
        let (p, s) = choose_pose(&cfg, &ds, &[]).unwrap();
        assert_eq!(s, PoseSource::GroundTruth);
        assert_eq!(p.translation().x, 2.0);
        cfg.ego_motion = Some(PoseFile::from_pose(&RigidPose::identity()).ego_motion);
        let (p, s) = choose_pose(&cfg, &ds, &[]).unwrap();
        assert_eq!(s, PoseSource::Config);
        assert!(p.is_identity());
    }

    #[test]
    fn eval_needs_pairs() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let d = DepthMap::constant(2, 3, 5.0);
        write_pfm(&a.path().join("cam0.pfm"), &d).unwrap();
        assert!(matches!(
            run_eval(a.path(), b.path(), &EvalBounds::default(), None),
            Err(Error::Config(_))
        ));
        write_pfm(&b.path().join("depth").join("cam0_curr.pfm"), &d).unwrap();
        let r = run_eval(a.path(), b.path(), &EvalBounds::default(), Some(a.path())).unwrap();
        assert_eq!(r.mean.abs_rel, 0.0);
        assert!(a.path().join("eval.json").exists());
        assert!(a.path().join("errors").join("cam0.pgm").exists());
        let empty = tempfile::tempdir().unwrap();
        assert!(run_eval(empty.path(), empty.path(), &EvalBounds::default(), None).is_err());
    }
}
