//! Pinhole cameras, rigid transforms and the plane-sweep warp.
//!
//! Frames: cameras are x-right, y-down, z-forward; the ego vehicle is
//! x-forward, y-left, z-up. A camera extrinsic maps camera coordinates into
//! the ego frame. A motion `P_{t→t-1}` maps coordinates expressed in a frame
//! at time `t` into the same frame at time `t-1`.

use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Transformed points closer than this (meters along the optical axis) are
/// treated as behind the camera.
pub const Z_MIN: f64 = 1e-3;

const ORTHO_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        ensure!(
            fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite(),
            Contract,
            "focal lengths must be positive, got ({fx}, {fy})"
        );
        ensure!(
            cx.is_finite() && cy.is_finite(),
            Contract,
            "principal point must be finite"
        );
        Ok(Self { fx, fy, cx, cy })
    }

    /// Intrinsics of the image obtained by `factor × factor` average pooling.
    ///
    /// Integer pixel coordinates are pixel centers, so coarse pixel `j`
    /// sits at fine coordinate `factor * j + (factor - 1) / 2`.
    pub fn pooled(&self, factor: usize) -> Self {
        let f = factor as f64;
        let off = (f - 1.0) / 2.0;
        Self {
            fx: self.fx / f,
            fy: self.fy / f,
            cx: (self.cx - off) / f,
            cy: (self.cy - off) / f,
        }
    }

    /// Camera-frame direction with unit z through pixel `(u, v)`.
    #[inline]
    pub fn unproject(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64) {
        (
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        )
    }
}

/// A rigid transform `x ↦ R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidPose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for RigidPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidPose {
    /// Checks `RᵀR = I` and `det R = +1` to 1e-9.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        ensure!(
            ortho <= ORTHO_TOL,
            Contract,
            "rotation is not orthonormal (max |RᵀR - I| = {ortho:e})"
        );
        let det = rotation.determinant();
        ensure!(
            (det - 1.0).abs() <= ORTHO_TOL,
            Contract,
            "rotation determinant is {det}, expected +1"
        );
        ensure!(
            translation.iter().all(|v| v.is_finite()),
            Contract,
            "translation must be finite"
        );
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Rotation given as an axis-angle vector (radians × unit axis).
    pub fn from_axis_angle(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: *Rotation3::from_scaled_axis(axis_angle).matrix(),
            translation,
        }
    }

    /// Rotation about +z by `angle` radians.
    pub fn rot_z(angle: f64) -> Self {
        Self::from_axis_angle(Vector3::new(0.0, 0.0, angle), Vector3::zeros())
    }

    /// Rotation about +y by `angle` radians.
    pub fn rot_y(angle: f64) -> Self {
        Self::from_axis_angle(Vector3::new(0.0, angle, 0.0), Vector3::zeros())
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn axis_angle(&self) -> Vector3<f64> {
        Rotation3::from_matrix_unchecked(self.rotation).scaled_axis()
    }

    pub fn with_translation(&self, t: Vector3<f64>) -> Self {
        Self {
            translation: t,
            ..*self
        }
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidPose) -> RigidPose {
        RigidPose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidPose {
        let rt = self.rotation.transpose();
        RigidPose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn to_matrix4(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Row-major `[R | t]`.
    pub fn to_row_major_3x4(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 4 + c] = self.rotation[(r, c)];
            }
            out[r * 4 + 3] = self.translation[r];
        }
        out
    }

    pub fn from_row_major_3x4(m: &[f64]) -> Result<Self> {
        ensure!(m.len() == 12, Format, "expected 12 values, got {}", m.len());
        let rot = Matrix3::from_fn(|r, c| m[r * 4 + c]);
        let t = Vector3::new(m[3], m[7], m[11]);
        Self::new(rot, t)
    }

    /// Largest absolute entry of `self⁻¹ ∘ other − I` in homogeneous form.
    pub fn distance(&self, other: &RigidPose) -> f64 {
        (self.to_matrix4() - other.to_matrix4()).abs().max()
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == Matrix3::identity() && self.translation == Vector3::zeros()
    }
}

/// `a ∘ b`.
pub fn compose(a: &RigidPose, b: &RigidPose) -> RigidPose {
    a.compose(b)
}

pub fn invert(p: &RigidPose) -> RigidPose {
    p.inverse()
}

/// Ego motion from the front camera's motion: `T⁰ · P⁰ · (T⁰)⁻¹`.
///
/// `front_extrinsic` maps front-camera coordinates into the ego frame, so
/// this is the exact inverse of [`camera_pose_from_ego`] for that camera.
pub fn ego_pose_from_front(front_pose: &RigidPose, front_extrinsic: &RigidPose) -> RigidPose {
    front_extrinsic
        .compose(front_pose)
        .compose(&front_extrinsic.inverse())
}

/// Motion of camera `c` induced by an ego motion: `(Tᶜ)⁻¹ · P · Tᶜ`.
pub fn camera_pose_from_ego(ego_pose: &RigidPose, cam_extrinsic: &RigidPose) -> RigidPose {
    cam_extrinsic
        .inverse()
        .compose(ego_pose)
        .compose(cam_extrinsic)
}

/// One camera of a rig.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub intrinsics: CameraIntrinsics,
    /// Camera → ego.
    pub extrinsic: RigidPose,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    /// Same camera after `factor × factor` pooling.
    pub fn pooled(&self, factor: usize) -> Camera {
        Camera {
            intrinsics: self.intrinsics.pooled(factor),
            extrinsic: self.extrinsic,
            width: self.width / factor,
            height: self.height / factor,
        }
    }

    /// Optical center in the ego frame.
    pub fn center(&self) -> Vector3<f64> {
        *self.extrinsic.translation()
    }
}

/// Calibrated multi-camera rig. Camera 0 is the front camera.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraRig {
    cameras: Vec<Camera>,
    /// `(left, right)` neighbor of each camera.
    adjacency: Vec<(usize, usize)>,
}

impl CameraRig {
    pub fn new(cameras: Vec<Camera>, adjacency: Vec<(usize, usize)>) -> Result<Self> {
        let n = cameras.len();
        ensure!(n > 0, Config, "rig needs at least one camera");
        ensure!(
            adjacency.len() == n,
            Config,
            "adjacency lists {} entries for {n} cameras",
            adjacency.len()
        );
        for (c, &(l, r)) in adjacency.iter().enumerate() {
            ensure!(
                l < n && r < n,
                Config,
                "camera {c} has neighbor index out of range ({l}, {r})"
            );
            for nb in [l, r] {
                let (nl, nr) = adjacency[nb];
                ensure!(
                    nl == c || nr == c || nb == c,
                    Config,
                    "adjacency is not symmetric: {nb} is a neighbor of {c} but not vice versa"
                );
            }
        }
        Ok(Self { cameras, adjacency })
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn cameras(&self) -> &[Camera] {
        &self.cameras
    }

    pub fn camera(&self, c: usize) -> Result<&Camera> {
        self.cameras
            .get(c)
            .ok_or_else(|| Error::Contract(format!("camera index {c} out of range")))
    }

    pub fn neighbors(&self, c: usize) -> Result<(usize, usize)> {
        self.adjacency
            .get(c)
            .copied()
            .ok_or_else(|| Error::Config(format!("no adjacency for camera {c}")))
    }

    pub fn adjacency(&self) -> &[(usize, usize)] {
        &self.adjacency
    }

    /// The rig as seen by `factor`-pooled feature maps.
    pub fn pooled(&self, factor: usize) -> CameraRig {
        CameraRig {
            cameras: self.cameras.iter().map(|c| c.pooled(factor)).collect(),
            adjacency: self.adjacency.clone(),
        }
    }

    /// Ring of `count` cameras at equal yaw spacing, camera 0 facing +x.
    ///
    /// Each camera sits `radius` meters from the ego origin along its
    /// viewing direction, `mount_height` above it, with a horizontal field
    /// of view `hfov_deg`. The left neighbor is the next camera
    /// counter-clockwise.
    pub fn ring(
        count: usize,
        width: usize,
        height: usize,
        hfov_deg: f64,
        radius: f64,
        mount_height: f64,
    ) -> Result<Self> {
        ensure!(count >= 1, Config, "ring needs cameras");
        let f = (width as f64 / 2.0) / (hfov_deg.to_radians() / 2.0).tan();
        let k = CameraIntrinsics::new(
            f,
            f,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
        )?;
        let cameras = (0..count)
            .map(|c| {
                let yaw = std::f64::consts::TAU * c as f64 / count as f64;
                Camera {
                    intrinsics: k,
                    extrinsic: camera_to_ego(yaw, radius, mount_height),
                    width,
                    height,
                }
            })
            .collect();
        let adjacency = (0..count)
            .map(|c| ((c + 1) % count, (c + count - 1) % count))
            .collect();
        Self::new(cameras, adjacency)
    }

    /// Six cameras, 60° apart, 90° horizontal field of view, 96×160 images.
    pub fn default_surround() -> Self {
        Self::ring(6, 160, 96, 90.0, 1.0, 1.6).expect("default rig is valid")
    }

    pub fn to_file(&self) -> RigFile {
        RigFile {
            cameras: self
                .cameras
                .iter()
                .map(|c| RigCameraEntry {
                    fx: c.intrinsics.fx,
                    fy: c.intrinsics.fy,
                    cx: c.intrinsics.cx,
                    cy: c.intrinsics.cy,
                    width: c.width,
                    height: c.height,
                    extrinsic: c.extrinsic.to_row_major_3x4().to_vec(),
                })
                .collect(),
            adjacency: self.adjacency.iter().map(|&(l, r)| [l, r]).collect(),
        }
    }

    pub fn from_file(f: &RigFile) -> Result<Self> {
        let cameras = f
            .cameras
            .iter()
            .map(|e| {
                Ok(Camera {
                    intrinsics: CameraIntrinsics::new(e.fx, e.fy, e.cx, e.cy)
                        .map_err(|err| Error::Config(err.to_string()))?,
                    extrinsic: RigidPose::from_row_major_3x4(&e.extrinsic)
                        .map_err(|err| Error::Config(format!("extrinsic: {err}")))?,
                    width: e.width,
                    height: e.height,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(cameras, f.adjacency.iter().map(|a| (a[0], a[1])).collect())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let f: RigFile = serde_json::from_str(&text)?;
        Self::from_file(&f)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.to_file())?)?;
        Ok(())
    }
}

/// Extrinsic of a camera looking along ego yaw `yaw`.
pub fn camera_to_ego(yaw: f64, radius: f64, mount_height: f64) -> RigidPose {
    let (s, c) = yaw.sin_cos();
    let forward = Vector3::new(c, s, 0.0);
    let right = Vector3::new(s, -c, 0.0);
    let down = Vector3::new(0.0, 0.0, -1.0);
    let rot = Matrix3::from_columns(&[right, down, forward]);
    RigidPose {
        rotation: rot,
        translation: forward * radius + Vector3::new(0.0, 0.0, mount_height),
    }
}

/// On-disk rig calibration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigFile {
    pub cameras: Vec<RigCameraEntry>,
    /// `[left, right]` per camera.
    pub adjacency: Vec<[usize; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigCameraEntry {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Camera → ego, row-major 3×4 `[R | t]`.
    pub extrinsic: Vec<f64>,
}

/// Transform taking camera `c` coordinates into camera `c'`: `(T^{c'})⁻¹ · Tᶜ`.
pub fn spatial_relative_pose(rig: &CameraRig, c: usize, c_prime: usize) -> Result<RigidPose> {
    let a = rig.camera(c)?;
    let b = rig.camera(c_prime)?;
    Ok(b.extrinsic.inverse().compose(&a.extrinsic))
}

/// Outcome of warping one pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Warped {
    pub x: f64,
    pub y: f64,
    /// Depth of the transformed point in the destination camera.
    pub z: f64,
    pub valid: bool,
}

/// Back-projects `p` at depth `d` through `k_src`, applies `rel`, and
/// projects through `k_dst` into a `dst_width × dst_height` image.
pub fn warp_pixel(
    p: (f64, f64),
    d: f64,
    k_src: &CameraIntrinsics,
    k_dst: &CameraIntrinsics,
    rel: &RigidPose,
    dst_width: usize,
    dst_height: usize,
) -> Result<Warped> {
    ensure!(d > 0.0, Contract, "warp depth must be positive, got {d}");
    Ok(Warper::new(k_src, k_dst, rel).warp(p.0, p.1, d, dst_width, dst_height))
}

/// Precomputed warp between two cameras.
#[derive(Clone, Copy, Debug)]
pub struct Warper {
    k_src: CameraIntrinsics,
    k_dst: CameraIntrinsics,
    rel: RigidPose,
    identity: bool,
}

impl Warper {
    pub fn new(k_src: &CameraIntrinsics, k_dst: &CameraIntrinsics, rel: &RigidPose) -> Self {
        Self {
            k_src: *k_src,
            k_dst: *k_dst,
            rel: *rel,
            identity: rel.is_identity() && k_src == k_dst,
        }
    }

    /// Transformed 3D point for pixel `(u, v)` at depth `d`.
    #[inline]
    pub fn point(&self, u: f64, v: f64, d: f64) -> Vector3<f64> {
        self.rel.transform_point(&(self.k_src.unproject(u, v) * d))
    }

    #[inline]
    pub fn warp(&self, u: f64, v: f64, d: f64, dst_width: usize, dst_height: usize) -> Warped {
        if self.identity {
            let inside = u >= 0.0
                && v >= 0.0
                && u <= (dst_width - 1) as f64
                && v <= (dst_height - 1) as f64;
            return Warped {
                x: u,
                y: v,
                z: d,
                valid: inside,
            };
        }
        let q = self.point(u, v, d);
        if q.z <= Z_MIN {
            return Warped {
                x: f64::NAN,
                y: f64::NAN,
                z: q.z,
                valid: false,
            };
        }
        let (x, y) = self.k_dst.project(&q);
        let inside =
            x >= 0.0 && y >= 0.0 && x <= (dst_width - 1) as f64 && y <= (dst_height - 1) as f64;
        Warped {
            x,
            y,
            z: q.z,
            valid: inside,
        }
    }

    /// Warped coordinates and their derivative with respect to `d`.
    ///
    /// Returns `None` when the point lands behind the destination camera.
    #[inline]
    pub fn warp_with_depth_derivative(
        &self,
        u: f64,
        v: f64,
        d: f64,
    ) -> Option<((f64, f64), (f64, f64))> {
        let ray = self.rel.rotation * self.k_src.unproject(u, v);
        let q = ray * d + self.rel.translation;
        if q.z <= Z_MIN {
            return None;
        }
        let (x, y) = self.k_dst.project(&q);
        let iz2 = 1.0 / (q.z * q.z);
        let dx = self.k_dst.fx * (ray.x * q.z - q.x * ray.z) * iz2;
        let dy = self.k_dst.fy * (ray.y * q.z - q.y * ray.z) * iz2;
        Some(((x, y), (dx, dy)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    // Homogeneous 4×4 oracle independent of RigidPose::compose.
    fn mat(p: &RigidPose) -> Matrix4<f64> {
        p.to_matrix4()
    }

    fn apply4(m: &Matrix4<f64>, p: [f64; 3]) -> [f64; 3] {
        let v = m * nalgebra::Vector4::new(p[0], p[1], p[2], 1.0);
        [v.x, v.y, v.z]
    }

    fn close(a: [f64; 3], b: [f64; 3], tol: f64) -> bool {
        a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= tol)
    }

    fn arb_pose() -> impl Strategy<Value = RigidPose> {
        (
            prop::array::uniform3(-1.5f64..1.5),
            prop::array::uniform3(-3.0f64..3.0),
        )
            .prop_map(|(r, t)| RigidPose::from_axis_angle(Vector3::from(r), Vector3::from(t)))
    }

    #[test]
    fn compose_with_identity() {
        let p = RigidPose::from_axis_angle(Vector3::new(0.1, -0.2, 0.3), Vector3::new(1., 2., 3.));
        assert_eq!(compose(&RigidPose::identity(), &p), p);
        assert!(compose(&invert(&p), &p).distance(&RigidPose::identity()) < 1e-9);
    }

    #[test]
    fn compose_order() {
        let rz = RigidPose::rot_z(FRAC_PI_2);
        let tx = RigidPose::from_translation(Vector3::new(1.0, 0.0, 0.0));
        // Rotate first, then translate.
        let a = compose(&tx, &rz).transform_point(&Vector3::zeros());
        let oracle = apply4(&(mat(&tx) * mat(&rz)), [0.0; 3]);
        assert!(close([a.x, a.y, a.z], oracle, 1e-12));
        assert!(close(oracle, [1.0, 0.0, 0.0], 1e-12));
        // Translate first, then rotate.
        let b = compose(&rz, &tx).transform_point(&Vector3::zeros());
        let oracle = apply4(&(mat(&rz) * mat(&tx)), [0.0; 3]);
        assert!(close([b.x, b.y, b.z], oracle, 1e-12));
        assert!(close(oracle, [0.0, 1.0, 0.0], 1e-12));
    }

    #[test]
    fn rejects_non_rotation() {
        let bad = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!(RigidPose::new(bad, Vector3::zeros()).is_err());
        let skew = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(RigidPose::new(skew, Vector3::zeros()).is_err());
    }

    #[test]
    fn ego_pose_identity_cases() {
        let p0 = RigidPose::from_axis_angle(Vector3::new(0.0, 0.05, 0.0), Vector3::new(0., 0., 1.));
        assert!(ego_pose_from_front(&p0, &RigidPose::identity()).distance(&p0) < 1e-12);
        let t0 = camera_to_ego(0.3, 1.0, 1.5);
        assert!(
            ego_pose_from_front(&RigidPose::identity(), &t0).distance(&RigidPose::identity())
                < 1e-12
        );
    }

    #[test]
    fn ego_pose_from_rotated_front_camera() {
        let t0 = RigidPose::rot_z(FRAC_PI_2);
        let p0 = RigidPose::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let got = ego_pose_from_front(&p0, &t0);
        let oracle = mat(&t0) * mat(&p0) * mat(&t0).try_inverse().unwrap();
        assert!((got.to_matrix4() - oracle).abs().max() < 1e-12);
        // A translation along the camera's x axis is along the ego's y axis.
        assert!(got.rotation().relative_eq(&Matrix3::identity(), 1e-12, 1e-12));
        assert!((got.translation() - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn camera_pose_cases() {
        let e = RigidPose::from_axis_angle(Vector3::new(0.0, 0.0, 0.1), Vector3::new(2., 0., 0.));
        assert!(camera_pose_from_ego(&e, &RigidPose::identity()).distance(&e) < 1e-12);
        let tc = camera_to_ego(1.0, 1.0, 1.6);
        assert!(
            camera_pose_from_ego(&RigidPose::identity(), &tc).distance(&RigidPose::identity())
                < 1e-12
        );
        let oracle = mat(&tc).try_inverse().unwrap() * mat(&e) * mat(&tc);
        assert!((camera_pose_from_ego(&e, &tc).to_matrix4() - oracle).abs().max() < 1e-12);
    }

    #[test]
    fn relative_pose_between_yawed_cameras() {
        let k = CameraIntrinsics::new(10.0, 10.0, 5.0, 5.0).unwrap();
        let cam = |yaw: f64| Camera {
            intrinsics: k,
            extrinsic: camera_to_ego(yaw, 0.0, 0.0),
            width: 10,
            height: 10,
        };
        let rig = CameraRig::new(vec![cam(0.0), cam(60f64.to_radians())], vec![(1, 1), (0, 0)])
            .unwrap();
        let rel = spatial_relative_pose(&rig, 0, 1).unwrap();
        // Camera 1 is yawed left, so camera 0's forward axis appears on
        // camera 1's right: a +60° rotation about the down (y) axis.
        let oracle = RigidPose::rot_y(60f64.to_radians());
        assert!(rel.distance(&oracle) < 1e-12, "{rel:?}");
        assert!(spatial_relative_pose(&rig, 0, 0)
            .unwrap()
            .distance(&RigidPose::identity())
            < 1e-12);
        let back = spatial_relative_pose(&rig, 1, 0).unwrap();
        assert!(back.compose(&rel).distance(&RigidPose::identity()) < 1e-12);
        assert!(spatial_relative_pose(&rig, 0, 5).is_err());
    }

    #[test]
    fn warp_identity_returns_pixel() {
        let k = CameraIntrinsics::new(50.0, 50.0, 20.0, 10.0).unwrap();
        for d in [0.5, 3.0, 100.0] {
            let w = warp_pixel((7.0, 3.0), d, &k, &k, &RigidPose::identity(), 40, 20).unwrap();
            assert_eq!((w.x, w.y, w.valid), (7.0, 3.0, true));
        }
    }

    #[test]
    fn warp_hand_projection() {
        let k = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0).unwrap();
        let rel = RigidPose::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let w = warp_pixel((0.0, 0.0), 2.0, &k, &k, &rel, 10, 10).unwrap();
        assert!((w.x - 0.5).abs() < 1e-15 && w.y.abs() < 1e-15);
        assert!(w.valid);
    }

    #[test]
    fn warp_behind_camera_is_invalid() {
        let k = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0).unwrap();
        let rel = RigidPose::from_translation(Vector3::new(0.0, 0.0, -5.0));
        let w = warp_pixel((0.0, 0.0), 2.0, &k, &k, &rel, 10, 10).unwrap();
        assert!(!w.valid);
        assert!((w.z + 3.0).abs() < 1e-15);
    }

    #[test]
    fn warp_rejects_nonpositive_depth() {
        let k = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0).unwrap();
        let r = RigidPose::identity();
        assert!(warp_pixel((0.0, 0.0), 0.0, &k, &k, &r, 4, 4).is_err());
        assert!(warp_pixel((0.0, 0.0), -1.0, &k, &k, &r, 4, 4).is_err());
    }

    #[test]
    fn depth_derivative_matches_differences() {
        let k = CameraIntrinsics::new(40.0, 42.0, 20.0, 12.0).unwrap();
        let rel = RigidPose::from_axis_angle(Vector3::new(0.02, 0.3, -0.01), Vector3::new(0.7, 0.1, 0.2));
        let w = Warper::new(&k, &k, &rel);
        let (_, (dx, dy)) = w.warp_with_depth_derivative(13.0, 7.0, 6.0).unwrap();
        let h = 1e-6;
        let a = w.warp(13.0, 7.0, 6.0 + h, 1000, 1000);
        let b = w.warp(13.0, 7.0, 6.0 - h, 1000, 1000);
        assert!(((a.x - b.x) / (2.0 * h) - dx).abs() < 1e-6);
        assert!(((a.y - b.y) / (2.0 * h) - dy).abs() < 1e-6);
    }

    #[test]
    fn rig_file_round_trip() {
        let rig = CameraRig::default_surround();
        let back = CameraRig::from_file(&rig.to_file()).unwrap();
        for (a, b) in rig.cameras().iter().zip(back.cameras()) {
            assert!(a.extrinsic.distance(&b.extrinsic) < 1e-15);
            assert_eq!(a.intrinsics, b.intrinsics);
        }
        assert_eq!(rig.adjacency(), back.adjacency());
    }

    #[test]
    fn rig_rejects_asymmetric_adjacency() {
        let k = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0).unwrap();
        let cam = Camera {
            intrinsics: k,
            extrinsic: RigidPose::identity(),
            width: 4,
            height: 4,
        };
        assert!(CameraRig::new(vec![cam; 3], vec![(1, 2), (2, 2), (1, 1)]).is_err());
        assert!(CameraRig::new(vec![cam; 2], vec![(1, 1)]).is_err());
    }

    #[test]
    fn default_rig_layout() {
        let rig = CameraRig::default_surround();
        assert_eq!(rig.len(), 6);
        assert_eq!(rig.neighbors(0).unwrap(), (1, 5));
        let c0 = rig.camera(0).unwrap();
        // Camera 0 looks along ego +x.
        let fwd = c0.extrinsic.rotation() * Vector3::new(0.0, 0.0, 1.0);
        assert!((fwd - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
        assert!((c0.intrinsics.fx - 80.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn ego_and_camera_conjugations_invert(p0 in arb_pose(), t0 in arb_pose()) {
            let back = camera_pose_from_ego(&ego_pose_from_front(&p0, &t0), &t0);
            prop_assert!(back.distance(&p0) < 1e-9);
        }

        #[test]
        fn warp_round_trip(
            rel in (prop::array::uniform3(-0.3f64..0.3), prop::array::uniform3(-1.0f64..1.0))
                .prop_map(|(r, t)| RigidPose::from_axis_angle(Vector3::from(r), Vector3::from(t))),
            u in 0.0f64..63.0,
            v in 0.0f64..47.0,
            d in 0.5f64..50.0,
        ) {
            let k = CameraIntrinsics::new(40.0, 40.0, 31.5, 23.5).unwrap();
            let fwd = warp_pixel((u, v), d, &k, &k, &rel, 64, 48).unwrap();
            prop_assume!(fwd.valid);
            let back = warp_pixel((fwd.x, fwd.y), fwd.z, &k, &k, &rel.inverse(), 64, 48).unwrap();
            prop_assert!((back.x - u).abs() < 1e-6 && (back.y - v).abs() < 1e-6);
        }

        #[test]
        fn epipolar_sweep_is_a_line(
            rel in arb_pose(),
            u in 0.0f64..63.0,
            v in 0.0f64..47.0,
        ) {
            prop_assume!(rel.translation().norm() > 0.1);
            let k = CameraIntrinsics::new(40.0, 40.0, 31.5, 23.5).unwrap();
            let w = Warper::new(&k, &k, &rel);
            let pts: Vec<Vector3<f64>> = [1.0, 2.5, 7.0, 30.0]
                .iter()
                .map(|&d| w.point(u, v, d))
                .filter(|q| q.z > Z_MIN)
                .map(|q| { let (x, y) = k.project(&q); Vector3::new(x, y, 0.0) })
                .collect();
            prop_assume!(pts.len() >= 3);
            let dir = pts[1] - pts[0];
            prop_assume!(dir.norm() > 1e-3);
            let n = dir.normalize();
            for p in &pts[2..] {
                let r = p - pts[0];
                let resid = (r - n * r.dot(&n)).norm();
                prop_assert!(resid < 1e-7 * (1.0 + r.norm()), "{resid}");
            }
        }
    }
}
