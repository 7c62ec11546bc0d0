//! Procedural multi-camera scenes with exact depth, two-frame sequences and
//! two-view triangulation.
//!
//! Scenes live in a world frame equal to the ego frame at `t-1`. Surfaces
//! are pure albedo, so a point has the same color in every view.

use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::depth_map::DepthMap;
use crate::error::{ensure, Error, Result};
use crate::geometry::{Camera, CameraRig, RigidPose, Warper, Z_MIN};
use crate::numerics::Grid2;

/// Albedo pattern on a surface.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    /// Seeds the noise lattice.
    pub id: u64,
    /// Base-octave lattice cell size in meters.
    pub cell: f64,
    pub octaves: u32,
    /// Peak-to-peak albedo swing.
    pub contrast: f64,
    /// Mean albedo per channel.
    pub base: [f64; 3],
}

impl Texture {
    pub fn noise(id: u64, cell: f64) -> Self {
        Self {
            id,
            cell,
            octaves: 2,
            contrast: 0.9,
            base: [0.5, 0.5, 0.5],
        }
    }

    pub fn flat(value: f64) -> Self {
        Self {
            id: 0,
            cell: 1.0,
            octaves: 0,
            contrast: 0.0,
            base: [value; 3],
        }
    }

    /// Albedo at surface coordinates `p` (meters).
    pub fn albedo(&self, p: &Vector3<f64>) -> [f64; 3] {
        if self.octaves == 0 || self.contrast == 0.0 {
            return self.base;
        }
        let q = p / self.cell;
        let gray = fractal(&q, self.id.wrapping_mul(4), self.octaves);
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let tint = fractal(&q, self.id.wrapping_mul(4) + 1 + c as u64, 1);
            let n = 0.85 * gray + 0.15 * tint;
            *o = (self.base[c] + self.contrast * (n - 0.5)).clamp(0.0, 1.0);
        }
        out
    }
}

fn hash3(x: i64, y: i64, z: i64, seed: u64) -> f64 {
    let mut h = seed
        ^ (x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (y as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ (z as u64).wrapping_mul(0x1656_67B1_9E37_79F9);
    // splitmix64 finalizer
    h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^= h >> 31;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

#[inline]
fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// Value noise in `[0, 1]` with quintic interpolation.
fn value_noise(p: &Vector3<f64>, seed: u64) -> f64 {
    let (fx, fy, fz) = (p.x.floor(), p.y.floor(), p.z.floor());
    let (ix, iy, iz) = (fx as i64, fy as i64, fz as i64);
    let (u, v, w) = (fade(p.x - fx), fade(p.y - fy), fade(p.z - fz));
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
    let c = |dx, dy, dz| hash3(ix + dx, iy + dy, iz + dz, seed);
    let x00 = lerp(c(0, 0, 0), c(1, 0, 0), u);
    let x10 = lerp(c(0, 1, 0), c(1, 1, 0), u);
    let x01 = lerp(c(0, 0, 1), c(1, 0, 1), u);
    let x11 = lerp(c(0, 1, 1), c(1, 1, 1), u);
    lerp(lerp(x00, x10, v), lerp(x01, x11, v), w)
}

/// Octave sum rescaled so its spread roughly matches one octave.
fn fractal(p: &Vector3<f64>, seed: u64, octaves: u32) -> f64 {
    let (mut sum, mut norm, mut amp, mut freq) = (0.0, 0.0, 1.0, 1.0);
    for o in 0..octaves {
        sum += amp * (value_noise(&(p * freq), seed.wrapping_add(o as u64 * 7919)) - 0.5);
        norm += amp * amp;
        amp *= 0.5;
        freq *= 2.0;
    }
    (0.5 + sum / norm.sqrt()).clamp(0.0, 1.0)
}

/// A textured surface.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    /// Rectangle centred at `center` spanned by `u_axis` and `normal × u_axis`.
    Plane {
        center: [f64; 3],
        normal: [f64; 3],
        u_axis: [f64; 3],
        half_u: f64,
        half_v: f64,
        texture: Texture,
    },
    Sphere {
        center: [f64; 3],
        radius: f64,
        texture: Texture,
    },
}

/// Primitives plus a textured backdrop sphere centred on the world origin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
    pub backdrop_radius: f64,
    pub backdrop_texture: Texture,
}

struct Hit {
    t: f64,
    albedo: [f64; 3],
}

fn v3(a: &[f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

/// Nearest `t > eps` with `|o + t d - c| = r`.
fn sphere_hit(o: &Vector3<f64>, d: &Vector3<f64>, c: &Vector3<f64>, r: f64) -> Option<f64> {
    let oc = o - c;
    let a = d.dot(d);
    let b = oc.dot(d);
    let cc = oc.dot(&oc) - r * r;
    let disc = b * b - a * cc;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    let t0 = (-b - s) / a;
    let t1 = (-b + s) / a;
    [t0, t1].into_iter().find(|&t| t > 1e-9)
}

impl Primitive {
    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
        match self {
            Primitive::Plane {
                center,
                normal,
                u_axis,
                half_u,
                half_v,
                texture,
            } => {
                let (c, n, u) = (v3(center), v3(normal).normalize(), v3(u_axis).normalize());
                let denom = n.dot(d);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = n.dot(&(c - o)) / denom;
                if t <= 1e-9 {
                    return None;
                }
                let rel = o + d * t - c;
                let v = n.cross(&u);
                let (a, b) = (rel.dot(&u), rel.dot(&v));
                if a.abs() > *half_u || b.abs() > *half_v {
                    return None;
                }
                Some(Hit {
                    t,
                    albedo: texture.albedo(&Vector3::new(a, b, 0.0)),
                })
            }
            Primitive::Sphere {
                center,
                radius,
                texture,
            } => {
                let c = v3(center);
                let t = sphere_hit(o, d, &c, *radius)?;
                Some(Hit {
                    t,
                    albedo: texture.albedo(&(o + d * t - c)),
                })
            }
        }
    }
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.backdrop_radius > 0.0 && self.backdrop_radius.is_finite(),
            Config,
            "backdrop radius must be positive"
        );
        for p in &self.primitives {
            match p {
                Primitive::Plane {
                    normal,
                    u_axis,
                    half_u,
                    half_v,
                    ..
                } => {
                    let (n, u) = (v3(normal), v3(u_axis));
                    ensure!(
                        n.norm() > 0.0 && u.norm() > 0.0 && n.cross(&u).norm() > 1e-9,
                        Config,
                        "plane axes are degenerate"
                    );
                    ensure!(*half_u > 0.0 && *half_v > 0.0, Config, "plane extent must be positive");
                }
                Primitive::Sphere { radius, .. } => {
                    ensure!(*radius > 0.0, Config, "sphere radius must be positive")
                }
            }
        }
        Ok(())
    }

    /// Nearest surface along `o + t d`: `(t, albedo)`.
    fn trace(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, [f64; 3])> {
        let mut best = sphere_hit(o, d, &Vector3::zeros(), self.backdrop_radius).map(|t| Hit {
            t,
            albedo: self.backdrop_texture.albedo(&(o + d * t)),
        });
        for p in &self.primitives {
            if let Some(h) = p.intersect(o, d) {
                if best.as_ref().is_none_or(|b| h.t < b.t) {
                    best = Some(h);
                }
            }
        }
        best.map(|h| (h.t, h.albedo))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s: Scene = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        s.validate()?;
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// A single fronto-parallel plane `distance` meters in front of an
    /// ego-frame direction of yaw `yaw`, large enough to fill the view.
    pub fn facing_plane(yaw: f64, distance: f64, texture: Texture) -> Self {
        let (s, c) = yaw.sin_cos();
        Scene {
            primitives: vec![Primitive::Plane {
                center: [c * distance, s * distance, 0.0],
                normal: [c, s, 0.0],
                u_axis: [-s, c, 0.0],
                half_u: 1e3,
                half_v: 1e3,
                texture,
            }],
            backdrop_radius: 1e4,
            backdrop_texture: Texture::flat(0.5),
        }
    }

    /// Large planes and spheres scattered around the vehicle, 4–10 m away,
    /// in front of a 20 m textured backdrop.
    pub fn default_scene(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut primitives = Vec::new();
        let mut id = 1u64;
        for sector in 0..6 {
            let centre_yaw = (sector as f64 * 60.0).to_radians();
            let yaw = centre_yaw + rng.random_range(-15f64..15.0).to_radians();
            let dist = rng.random_range(7.0..10.0);
            let facing = yaw + rng.random_range(-20f64..20.0).to_radians();
            let (s, c) = yaw.sin_cos();
            let (fs, fc) = facing.sin_cos();
            primitives.push(Primitive::Plane {
                center: [c * dist, s * dist, rng.random_range(0.5..2.0)],
                normal: [fc, fs, 0.0],
                u_axis: [-fs, fc, 0.0],
                half_u: rng.random_range(3.0..4.5),
                half_v: rng.random_range(2.0..3.0),
                texture: Texture::noise(id, TEXTURE_CELL * dist),
            });
            id += 1;
            let yaw = centre_yaw + rng.random_range(-25f64..25.0).to_radians();
            let dist = rng.random_range(4.5..6.0);
            let (s, c) = yaw.sin_cos();
            primitives.push(Primitive::Sphere {
                center: [c * dist, s * dist, rng.random_range(0.5..2.0)],
                radius: rng.random_range(1.2..1.8),
                texture: Texture::noise(id, TEXTURE_CELL * dist),
            });
            id += 1;
        }
        Scene {
            primitives,
            backdrop_radius: 20.0,
            backdrop_texture: Texture::noise(1000 + seed, 0.35 * 20.0),
        }
    }
}

impl Scene {
    /// Textured backdrop of the given radius and nothing else: no
    /// occlusions anywhere in the rig.
    pub fn enclosure(seed: u64, radius: f64) -> Self {
        Scene {
            primitives: Vec::new(),
            backdrop_radius: radius,
            backdrop_texture: Texture::noise(1000 + seed, 0.35 * radius),
        }
    }
}

/// Texture lattice cell of [`Scene::default_scene`] per meter of distance.
pub const TEXTURE_CELL: f64 = 0.25;

/// One rendered view.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedFrame {
    /// Three channels in `[0, 1]`.
    pub image: Grid2,
    pub depth_gt: DepthMap,
    pub camera: usize,
    /// 0 for `t`, −1 for `t-1`.
    pub timestamp: i32,
}

/// Renders one camera with the ego frame placed at `ego_to_world`.
pub fn render_camera(
    scene: &Scene,
    camera: &Camera,
    ego_to_world: &RigidPose,
    index: usize,
    timestamp: i32,
) -> Result<RenderedFrame> {
    let cam_to_world = ego_to_world.compose(&camera.extrinsic);
    let origin = *cam_to_world.translation();
    let rot = *cam_to_world.rotation();
    let (h, w) = (camera.height, camera.width);
    let rows: Vec<Option<(Vec<f64>, Vec<f64>)>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut img = Vec::with_capacity(w * 3);
            let mut dep = Vec::with_capacity(w);
            for x in 0..w {
                let dir = rot * camera.intrinsics.unproject(x as f64, y as f64);
                let (t, albedo) = scene.trace(&origin, &dir)?;
                img.extend_from_slice(&albedo);
                dep.push(t);
            }
            Some((img, dep))
        })
        .collect();
    let mut image = Vec::with_capacity(h * w * 3);
    let mut depth = Vec::with_capacity(h * w);
    for row in rows {
        let (i, d) = row.ok_or_else(|| {
            Error::Degenerate(format!("camera {index} has rays that miss the backdrop"))
        })?;
        image.extend(i);
        depth.extend(d);
    }
    Ok(RenderedFrame {
        image: Grid2::new(h, w, 3, image)?,
        depth_gt: DepthMap::new(h, w, depth)?,
        camera: index,
        timestamp,
    })
}

/// Renders every camera of `rig` with the ego frame at `ego_to_world`.
pub fn render(scene: &Scene, rig: &CameraRig, ego_to_world: &RigidPose) -> Result<Vec<RenderedFrame>> {
    scene.validate()?;
    rig.cameras()
        .par_iter()
        .enumerate()
        .map(|(c, cam)| render_camera(scene, cam, ego_to_world, c, 0))
        .collect()
}

/// Frames at `t-1` and `t` with the ground-truth ego motion between them.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoFrameSequence {
    pub prev: Vec<RenderedFrame>,
    pub curr: Vec<RenderedFrame>,
    /// `P_{t→t-1}`: ego coordinates at `t` to ego coordinates at `t-1`.
    pub ego_motion: RigidPose,
}

/// Fraction of pixels of `curr` whose ground-truth point lands inside the
/// previous view of the same camera.
fn temporal_coverage(curr: &RenderedFrame, cam: &Camera, cam_motion: &RigidPose) -> f64 {
    let warper = Warper::new(&cam.intrinsics, &cam.intrinsics, cam_motion);
    let (h, w) = (cam.height, cam.width);
    let mut inside = 0usize;
    for y in 0..h {
        for x in 0..w {
            if warper.warp(x as f64, y as f64, curr.depth_gt.at(y, x), w, h).valid {
                inside += 1;
            }
        }
    }
    inside as f64 / (h * w) as f64
}

/// Renders the rig at `t-1` (ego at the world origin) and at `t` (ego at
/// `ego_motion`).
///
/// Fails when some camera at `t` sees nothing of its previous frame.
pub fn make_two_frame_sequence(
    scene: &Scene,
    rig: &CameraRig,
    ego_motion: &RigidPose,
) -> Result<TwoFrameSequence> {
    let prev: Vec<RenderedFrame> = render(scene, rig, &RigidPose::identity())?
        .into_iter()
        .map(|f| RenderedFrame {
            timestamp: -1,
            ..f
        })
        .collect();
    let curr = render(scene, rig, ego_motion)?;
    for (c, cam) in rig.cameras().iter().enumerate() {
        let motion = crate::geometry::camera_pose_from_ego(ego_motion, &cam.extrinsic);
        ensure!(
            temporal_coverage(&curr[c], cam, &motion) > 0.0,
            Degenerate,
            "camera {c} has no overlap with its previous frame"
        );
    }
    Ok(TwoFrameSequence {
        prev,
        curr,
        ego_motion: *ego_motion,
    })
}

/// Midpoint triangulation result.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Triangulated {
    /// z-depth of the midpoint in camera `a`.
    pub depth: f64,
    /// Distance between the two rays at closest approach (meters).
    pub residual: f64,
}

/// Rays closer than this angle (radians) are treated as parallel.
pub const MIN_RAY_ANGLE: f64 = 1e-3;

/// Triangulates pixel `p_a` of `cam_a` against pixel `p_b` of `cam_b` by
/// the midpoint of closest approach, in the rig's ego frame.
pub fn triangulate(
    p_a: (f64, f64),
    p_b: (f64, f64),
    cam_a: &Camera,
    cam_b: &Camera,
) -> Result<Triangulated> {
    let oa = cam_a.center();
    let ob = cam_b.center();
    ensure!(
        (oa - ob).norm() > 1e-9,
        Degenerate,
        "camera centers coincide"
    );
    let da = (cam_a.extrinsic.rotation() * cam_a.intrinsics.unproject(p_a.0, p_a.1)).normalize();
    let db = (cam_b.extrinsic.rotation() * cam_b.intrinsics.unproject(p_b.0, p_b.1)).normalize();
    let angle = da.cross(&db).norm().atan2(da.dot(&db));
    ensure!(
        angle > MIN_RAY_ANGLE,
        Degenerate,
        "rays are near parallel ({angle:e} rad)"
    );
    // Minimize |oa + s da - ob - t db|.
    let w0 = oa - ob;
    let b = da.dot(&db);
    let d = da.dot(&w0);
    let e = db.dot(&w0);
    let denom = 1.0 - b * b;
    let s = (b * e - d) / denom;
    let t = (e - b * d) / denom;
    let pa = oa + da * s;
    let pb = ob + db * t;
    let mid = (pa + pb) * 0.5;
    let in_a = cam_a.extrinsic.inverse().transform_point(&mid);
    Ok(Triangulated {
        depth: in_a.z,
        residual: (pa - pb).norm(),
    })
}

/// A pixel match between two cameras.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    pub a: (f64, f64),
    pub b: (f64, f64),
}

/// Gating for pseudo-label triangulation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PseudoDepthOptions {
    /// Sample every `stride`-th pixel in both directions.
    pub stride: usize,
    /// Reject triangulations whose ray gap exceeds this many meters.
    pub max_residual: f64,
    /// Replace this fraction of matches with random pixels.
    pub outlier_fraction: f64,
    pub seed: u64,
}

impl Default for PseudoDepthOptions {
    fn default() -> Self {
        Self {
            stride: 4,
            max_residual: 0.02,
            outlier_fraction: 0.0,
            seed: 0,
        }
    }
}

/// Sparse depth for one camera and how many matches the gate rejected.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoDepth {
    pub depth: DepthMap,
    pub accepted: usize,
    pub rejected: usize,
}

/// Triangulates `matches` of `cam_a` against `cam_b` into a sparse depth map
/// of `cam_a`'s size. Pixels without an accepted match are invalid.
pub fn pseudo_depth_from_matches(
    matches: &[Correspondence],
    cam_a: &Camera,
    cam_b: &Camera,
    max_residual: f64,
) -> PseudoDepth {
    let (h, w) = (cam_a.height, cam_a.width);
    let mut depth = DepthMap::with_mask(h, w, vec![0.0; h * w], vec![false; h * w])
        .expect("buffers sized to the camera");
    let (mut accepted, mut rejected) = (0, 0);
    for m in matches {
        let (x, y) = (m.a.0.round() as usize, m.a.1.round() as usize);
        match triangulate(m.a, m.b, cam_a, cam_b) {
            Ok(t) if t.residual <= max_residual && t.depth > Z_MIN && x < w && y < h => {
                depth.set(y, x, t.depth);
                depth.set_valid(y, x, true);
                accepted += 1;
            }
            _ => rejected += 1,
        }
    }
    PseudoDepth {
        depth,
        accepted,
        rejected,
    }
}

/// Ground-truth correspondences from camera `a` to camera `b`: pixels of
/// `a` on a `stride` lattice whose surface point is visible in `b`.
pub fn gt_correspondences(
    frame_a: &RenderedFrame,
    frame_b: &RenderedFrame,
    cam_a: &Camera,
    cam_b: &Camera,
    stride: usize,
) -> Vec<Correspondence> {
    let rel = cam_b.extrinsic.inverse().compose(&cam_a.extrinsic);
    let warper = Warper::new(&cam_a.intrinsics, &cam_b.intrinsics, &rel);
    let mut out = Vec::new();
    for y in (0..cam_a.height).step_by(stride.max(1)) {
        for x in (0..cam_a.width).step_by(stride.max(1)) {
            let wp = warper.warp(x as f64, y as f64, frame_a.depth_gt.at(y, x), cam_b.width, cam_b.height);
            if !wp.valid {
                continue;
            }
            // Occlusion test against the nearest pixel's depth in b.
            let (bx, by) = (wp.x.round() as usize, wp.y.round() as usize);
            let seen = frame_b.depth_gt.at(by, bx);
            if (seen - wp.z).abs() > 0.01 * wp.z {
                continue;
            }
            out.push(Correspondence {
                a: (x as f64, y as f64),
                b: (wp.x, wp.y),
            });
        }
    }
    out
}

/// Sparse triangulated depth for every camera at one timestamp, from
/// ground-truth matches with both adjacent cameras.
pub fn sparse_pseudo_depth(
    frames: &[RenderedFrame],
    rig: &CameraRig,
    opts: &PseudoDepthOptions,
) -> Result<Vec<PseudoDepth>> {
    ensure!(
        frames.len() == rig.len(),
        ShapeMismatch,
        "{} frames for {} cameras",
        frames.len(),
        rig.len()
    );
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut out = Vec::with_capacity(rig.len());
    for c in 0..rig.len() {
        let cam = rig.camera(c)?;
        let (l, r) = rig.neighbors(c)?;
        let mut total = PseudoDepth {
            depth: DepthMap::with_mask(
                cam.height,
                cam.width,
                vec![0.0; cam.height * cam.width],
                vec![false; cam.height * cam.width],
            )?,
            accepted: 0,
            rejected: 0,
        };
        for nb in [l, r] {
            if nb == c {
                continue;
            }
            let cb = rig.camera(nb)?;
            let mut matches = gt_correspondences(&frames[c], &frames[nb], cam, cb, opts.stride);
            for m in &mut matches {
                if rng.random::<f64>() < opts.outlier_fraction {
                    m.b = (
                        rng.random_range(0.0..(cb.width - 1) as f64),
                        rng.random_range(0.0..(cb.height - 1) as f64),
                    );
                }
            }
            let pd = pseudo_depth_from_matches(&matches, cam, cb, opts.max_residual);
            total.accepted += pd.accepted;
            total.rejected += pd.rejected;
            for y in 0..cam.height {
                for x in 0..cam.width {
                    if pd.depth.is_valid(y, x) && !total.depth.is_valid(y, x) {
                        total.depth.set(y, x, pd.depth.at(y, x));
                        total.depth.set_valid(y, x, true);
                    }
                }
            }
        }
        out.push(total);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{camera_to_ego, CameraIntrinsics};

    fn single_camera(width: usize, height: usize) -> CameraRig {
        let k = CameraIntrinsics::new(40.0, 40.0, (width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0)
            .unwrap();
        let cam = Camera {
            intrinsics: k,
            extrinsic: camera_to_ego(0.0, 0.0, 0.0),
            width,
            height,
        };
        CameraRig::new(vec![cam], vec![(0, 0)]).unwrap()
    }

    #[test]
    fn fronto_parallel_plane_has_constant_depth() {
        let rig = single_camera(16, 12);
        let scene = Scene::facing_plane(0.0, 10.0, Texture::noise(3, 1.0));
        let f = &render(&scene, &rig, &RigidPose::identity()).unwrap()[0];
        assert!(f.depth_gt.depths().iter().all(|&d| (d - 10.0).abs() < 1e-9));
        assert!(f.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn sphere_on_axis_center_depth() {
        let rig = single_camera(17, 13);
        let scene = Scene {
            primitives: vec![Primitive::Sphere {
                center: [7.0, 0.0, 0.0],
                radius: 1.5,
                texture: Texture::flat(0.3),
            }],
            backdrop_radius: 50.0,
            backdrop_texture: Texture::flat(0.9),
        };
        let f = &render(&scene, &rig, &RigidPose::identity()).unwrap()[0];
        assert!((f.depth_gt.at(6, 8) - 5.5).abs() < 1e-12);
        assert_eq!(f.image.at(6, 8, 0), 0.3);
    }

    #[test]
    fn rendering_is_deterministic() {
        let rig = CameraRig::default_surround();
        let scene = Scene::default_scene(7);
        let a = render(&scene, &rig, &RigidPose::identity()).unwrap();
        let b = render(&scene, &rig, &RigidPose::identity()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_motion_toward_plane() {
        let rig = single_camera(16, 12);
        let scene = Scene::facing_plane(0.0, 10.0, Texture::noise(3, 1.0));
        let m = RigidPose::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let seq = make_two_frame_sequence(&scene, &rig, &m).unwrap();
        assert!(seq.curr[0].depth_gt.depths().iter().all(|&d| (d - 9.0).abs() < 1e-9));
        assert_eq!(seq.ego_motion, m);
        let still = make_two_frame_sequence(&scene, &rig, &RigidPose::identity()).unwrap();
        assert_eq!(still.prev[0].image, still.curr[0].image);
    }

    #[test]
    fn recorded_motion_matches_composition() {
        let rig = single_camera(16, 12);
        let scene = Scene::facing_plane(0.0, 10.0, Texture::noise(3, 1.0));
        let m = RigidPose::from_translation(Vector3::new(0.5, 0.0, 0.0))
            .compose(&RigidPose::rot_z(5f64.to_radians()));
        let seq = make_two_frame_sequence(&scene, &rig, &m).unwrap();
        let oracle = RigidPose::from_translation(Vector3::new(0.5, 0.0, 0.0)).to_matrix4()
            * RigidPose::rot_z(5f64.to_radians()).to_matrix4();
        assert!((seq.ego_motion.to_matrix4() - oracle).abs().max() < 1e-12);
    }

    #[test]
    fn no_coverage_is_rejected() {
        let rig = single_camera(16, 12);
        let scene = Scene::facing_plane(0.0, 10.0, Texture::noise(3, 1.0));
        let turn = RigidPose::rot_z(std::f64::consts::PI);
        assert!(matches!(
            make_two_frame_sequence(&scene, &rig, &turn),
            Err(Error::Degenerate(_))
        ));
    }

    fn stereo_pair() -> (Camera, Camera) {
        let k = CameraIntrinsics::new(50.0, 50.0, 31.5, 23.5).unwrap();
        let a = Camera {
            intrinsics: k,
            extrinsic: camera_to_ego(0.0, 1.0, 1.5),
            width: 64,
            height: 48,
        };
        let b = Camera {
            intrinsics: k,
            extrinsic: camera_to_ego(0.5, 1.0, 1.5),
            width: 64,
            height: 48,
        };
        (a, b)
    }

    #[test]
    fn triangulation_recovers_known_point() {
        let (a, b) = stereo_pair();
        let x = Vector3::new(6.0, 1.2, 2.0);
        let proj = |cam: &Camera| {
            let p = cam.extrinsic.inverse().transform_point(&x);
            (cam.intrinsics.project(&p), p.z)
        };
        let ((pa, za), (pb, _)) = (proj(&a), proj(&b));
        let t = triangulate(pa, pb, &a, &b).unwrap();
        assert!((t.depth - za).abs() < 1e-9);
        assert!(t.residual < 1e-9);
        let perturbed = triangulate(pa, (pb.0 + 0.5, pb.1 + 0.5), &a, &b).unwrap();
        assert!(perturbed.residual > 0.0);
    }

    #[test]
    fn coincident_centers_rejected() {
        let (a, _) = stereo_pair();
        let mut b = a;
        b.extrinsic = camera_to_ego(0.0, 1.0, 1.5);
        assert!(triangulate((10.0, 10.0), (20.0, 10.0), &a, &b).is_err());
    }
}
