//! Plane-sweep feature volumes from neighboring cameras and the previous frame.

use rayon::prelude::*;

use crate::error::{ensure, Result};
use crate::geometry::{spatial_relative_pose, CameraIntrinsics, CameraRig, RigidPose, Warper};
use crate::hypotheses::DepthHypothesisSet;
use crate::numerics::{sample_point, Grid2, Grid3};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VolumeSource {
    Spatial,
    Temporal,
    Fused,
}

/// Warped features per depth bin, with a validity weight per cell.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVolume {
    pub values: Grid3,
    /// `D × H × W × 1`, in `[0, 1]`.
    pub validity: Grid3,
    pub source: VolumeSource,
}

impl FeatureVolume {
    pub fn bins(&self) -> usize {
        self.values.bins()
    }

    pub fn height(&self) -> usize {
        self.values.height()
    }

    pub fn width(&self) -> usize {
        self.values.width()
    }

    pub fn channels(&self) -> usize {
        self.values.channels()
    }

    #[inline]
    pub fn valid_at(&self, i: usize, y: usize, x: usize) -> f64 {
        self.validity.at(i, y, x, 0)
    }

    /// True when every cell with zero validity holds zero values.
    pub fn masks_sound(&self) -> bool {
        let (d, h, w, _) = self.values.shape();
        (0..d).all(|i| {
            (0..h).all(|y| {
                (0..w).all(|x| {
                    self.valid_at(i, y, x) > 0.0
                        || self.values.cell(i, y, x).iter().all(|&v| v == 0.0)
                })
            })
        })
    }
}

fn check_hyps(f: &Grid2, hyps: &DepthHypothesisSet) -> Result<()> {
    ensure!(
        hyps.height() == f.height() && hyps.width() == f.width(),
        ShapeMismatch,
        "hypotheses are {}x{}, features {}x{}",
        hyps.height(),
        hyps.width(),
        f.height(),
        f.width()
    );
    Ok(())
}

/// One bin of `src` warped into the reference view. Returns values and a
/// 0/1 mask, both row-major over the reference image.
fn warp_slice(
    src: &Grid2,
    warper: &Warper,
    hyps: &DepthHypothesisSet,
    i: usize,
) -> (Vec<f64>, Vec<f64>) {
    let (h, w, c) = (hyps.height(), hyps.width(), src.channels());
    let mut values = vec![0.0; h * w * c];
    let mut mask = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let k = y * w + x;
            let wp = warper.warp(x as f64, y as f64, hyps.at(i, y, x), src.width(), src.height());
            if !wp.valid {
                continue;
            }
            if sample_point(src, wp.x, wp.y, &mut values[k * c..(k + 1) * c]) {
                mask[k] = 1.0;
            }
        }
    }
    (values, mask)
}

fn assemble(
    slices: Vec<(Vec<f64>, Vec<f64>)>,
    h: usize,
    w: usize,
    c: usize,
    source: VolumeSource,
) -> Result<FeatureVolume> {
    let d = slices.len();
    let mut values = Vec::with_capacity(d * h * w * c);
    let mut validity = Vec::with_capacity(d * h * w);
    for (v, m) in slices {
        values.extend(v);
        validity.extend(m);
    }
    Ok(FeatureVolume {
        values: Grid3::new(d, h, w, c, values)?,
        validity: Grid3::new(d, h, w, 1, validity)?,
        source,
    })
}

/// Warps `f_prev` into the current frame at every hypothesis.
///
/// `cam_pose` maps current-camera coordinates to previous-camera
/// coordinates; `k` is the intrinsics at feature resolution.
pub fn build_temporal(
    f_t: &Grid2,
    f_prev: &Grid2,
    cam_pose: &RigidPose,
    k: &CameraIntrinsics,
    hyps: &DepthHypothesisSet,
) -> Result<FeatureVolume> {
    ensure!(
        f_t.same_shape(f_prev),
        ShapeMismatch,
        "current features {:?} vs previous {:?}",
        f_t.shape(),
        f_prev.shape()
    );
    check_hyps(f_t, hyps)?;
    let warper = Warper::new(k, k, cam_pose);
    let slices: Vec<_> = (0..hyps.bins())
        .into_par_iter()
        .map(|i| warp_slice(f_prev, &warper, hyps, i))
        .collect();
    assemble(
        slices,
        f_t.height(),
        f_t.width(),
        f_t.channels(),
        VolumeSource::Temporal,
    )
}

/// Warps both neighbors of camera `c` into it and averages them, weighted
/// by validity.
///
/// `rig` must describe the cameras at feature resolution.
pub fn build_spatial(
    f_ref: &Grid2,
    f_left: &Grid2,
    f_right: &Grid2,
    rig: &CameraRig,
    c: usize,
    hyps: &DepthHypothesisSet,
) -> Result<FeatureVolume> {
    ensure!(
        f_ref.same_shape(f_left) && f_ref.same_shape(f_right),
        ShapeMismatch,
        "neighbor features must match the reference {:?}",
        f_ref.shape()
    );
    check_hyps(f_ref, hyps)?;
    let (l, r) = rig.neighbors(c)?;
    let k_ref = rig.camera(c)?.intrinsics;
    let wl = Warper::new(&k_ref, &rig.camera(l)?.intrinsics, &spatial_relative_pose(rig, c, l)?);
    let wr = Warper::new(&k_ref, &rig.camera(r)?.intrinsics, &spatial_relative_pose(rig, c, r)?);
    let ch = f_ref.channels();
    let slices: Vec<_> = (0..hyps.bins())
        .into_par_iter()
        .map(|i| {
            let (vl, ml) = warp_slice(f_left, &wl, hyps, i);
            let (vr, mr) = warp_slice(f_right, &wr, hyps, i);
            let mut values = vec![0.0; vl.len()];
            let mut mask = vec![0.0; ml.len()];
            for k in 0..ml.len() {
                let s = ml[k] + mr[k];
                if s == 0.0 {
                    continue;
                }
                for j in 0..ch {
                    let q = k * ch + j;
                    values[q] = (ml[k] * vl[q] + mr[k] * vr[q]) / s;
                }
                mask[k] = ml[k].max(mr[k]);
            }
            (values, mask)
        })
        .collect();
    assemble(
        slices,
        f_ref.height(),
        f_ref.width(),
        ch,
        VolumeSource::Spatial,
    )
}

/// Pixel length of the epipolar segment swept by the hypotheses of each
/// reference pixel; 0 unless every bin lands inside the destination image.
pub fn sweep_length(
    k_src: &CameraIntrinsics,
    k_dst: &CameraIntrinsics,
    rel: &RigidPose,
    hyps: &DepthHypothesisSet,
    dst_width: usize,
    dst_height: usize,
) -> Grid2 {
    let warper = Warper::new(k_src, k_dst, rel);
    let last = hyps.bins() - 1;
    Grid2::from_fn(hyps.height(), hyps.width(), 1, |y, x, _| {
        let (u, v) = (x as f64, y as f64);
        let inside = (0..=last).all(|i| warper.warp(u, v, hyps.at(i, y, x), dst_width, dst_height).valid);
        if !inside {
            return 0.0;
        }
        let a = warper.warp(u, v, hyps.at(0, y, x), dst_width, dst_height);
        let b = warper.warp(u, v, hyps.at(last, y, x), dst_width, dst_height);
        (a.x - b.x).hypot(a.y - b.y)
    })
}
