//! Self-supervised objective: photometric, edge-aware smoothness, depth-edge
//! focal and SfM pseudo-label terms, and their weighted total.
//!
//! Every term that refinement differentiates has a `*_with_gradient`
//! variant returning the analytic gradient with respect to its depth (or
//! reconstructed image) input.

use serde::{Deserialize, Serialize};

use crate::depth_map::DepthMap;
use crate::error::{ensure, Result};
use crate::geometry::{CameraIntrinsics, RigidPose, Warper};
use crate::mff::grayscale;
use crate::numerics::{
    box3_adjoint, sample_point, sample_point_with_gradient, sobel, sobel_adjoint, window_stats,
    Grid2,
};

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// SSIM/L1 blend of the photometric term.
pub const PHOTO_ALPHA: f64 = 0.85;
pub const FOCAL_GAMMA: f64 = 2.0;
pub const FOCAL_ALPHA: f64 = 0.25;
/// Image edges are pixels whose Sobel magnitude exceeds this quantile.
pub const EDGE_QUANTILE: f64 = 0.9;
/// Gain inside `tanh` turning normalized depth-gradient magnitude into an
/// edge probability.
pub const EDGE_GAIN: f64 = 4.0;
/// Edge probabilities are clamped to `[ε, 1-ε]`.
pub const PROB_EPS: f64 = 1e-6;

/// A loss value and the number of pixels it averages over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TermValue {
    pub value: f64,
    pub count: usize,
}

fn check_shape(a: &Grid2, b: &Grid2) -> Result<()> {
    ensure!(
        a.same_shape(b),
        ShapeMismatch,
        "{:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    Ok(())
}

fn check_mask(mask: &[bool], h: usize, w: usize) -> Result<()> {
    ensure!(
        mask.len() == h * w,
        ShapeMismatch,
        "mask of {} for {h}x{w}",
        mask.len()
    );
    Ok(())
}

struct SsimParts {
    /// Unclamped per-channel SSIM.
    s: Grid2,
    n1: Grid2,
    n2: Grid2,
    d1: Grid2,
    d2: Grid2,
    mean_a: Grid2,
    mean_b: Grid2,
}

fn ssim_parts(a: &Grid2, b: &Grid2) -> Result<SsimParts> {
    check_shape(a, b)?;
    let st = window_stats(a, b)?;
    let (h, w, c) = a.shape();
    let n1 = Grid2::from_fn(h, w, c, |y, x, k| {
        2.0 * st.mean_a.at(y, x, k) * st.mean_b.at(y, x, k) + SSIM_C1
    });
    let n2 = st.cov.map(|v| 2.0 * v + SSIM_C2);
    let d1 = Grid2::from_fn(h, w, c, |y, x, k| {
        let (ma, mb) = (st.mean_a.at(y, x, k), st.mean_b.at(y, x, k));
        ma * ma + mb * mb + SSIM_C1
    });
    let d2 = st.var_a.zip_map(&st.var_b, |va, vb| va + vb + SSIM_C2)?;
    let s = Grid2::from_fn(h, w, c, |y, x, k| {
        n1.at(y, x, k) * n2.at(y, x, k) / (d1.at(y, x, k) * d2.at(y, x, k))
    });
    Ok(SsimParts {
        s,
        n1,
        n2,
        d1,
        d2,
        mean_a: st.mean_a,
        mean_b: st.mean_b,
    })
}

/// Per-pixel SSIM over a 3×3 box window, clamped to `[0, 1]` and averaged
/// over channels.
pub fn ssim(a: &Grid2, b: &Grid2) -> Result<Grid2> {
    let p = ssim_parts(a, b)?;
    Ok(p.s.map(|v| v.clamp(0.0, 1.0)).channel_mean())
}

/// Gradient with respect to `b` of `Σ upstream · S`, with `upstream` given
/// per channel on the raw SSIM map.
fn ssim_vjp_b(a: &Grid2, b: &Grid2, p: &SsimParts, upstream: &Grid2) -> Result<Grid2> {
    let (h, w, c) = a.shape();
    let mut g_mu = Grid2::zeros(h, w, c);
    let mut g_bb = Grid2::zeros(h, w, c);
    let mut g_ab = Grid2::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            for k in 0..c {
                let u = upstream.at(y, x, k);
                if u == 0.0 {
                    continue;
                }
                let (n1, n2) = (p.n1.at(y, x, k), p.n2.at(y, x, k));
                let (d1, d2) = (p.d1.at(y, x, k), p.d2.at(y, x, k));
                let (ma, mb) = (p.mean_a.at(y, x, k), p.mean_b.at(y, x, k));
                let s = p.s.at(y, x, k);
                let den = d1 * d2;
                // S as a function of E[b], E[b²] and E[ab].
                let dn_dmb = 2.0 * ma * n2 - 2.0 * ma * n1;
                let dd_dmb = 2.0 * mb * d2 - 2.0 * mb * d1;
                g_mu.set(y, x, k, u * (dn_dmb - s * dd_dmb) / den);
                g_bb.set(y, x, k, u * (-s * d1 / den));
                g_ab.set(y, x, k, u * (2.0 * n1 / den));
            }
        }
    }
    let t_mu = box3_adjoint(&g_mu);
    let t_bb = box3_adjoint(&g_bb);
    let t_ab = box3_adjoint(&g_ab);
    Ok(Grid2::from_fn(h, w, c, |y, x, k| {
        t_mu.at(y, x, k) + 2.0 * b.at(y, x, k) * t_bb.at(y, x, k) + a.at(y, x, k) * t_ab.at(y, x, k)
    }))
}

fn photometric(
    target: &Grid2,
    recon: &Grid2,
    mask: &[bool],
    alpha: f64,
    want_grad: bool,
) -> Result<(TermValue, Option<Grid2>)> {
    check_shape(target, recon)?;
    let (h, w, c) = target.shape();
    check_mask(mask, h, w)?;
    ensure!(
        (0.0..=1.0).contains(&alpha),
        Contract,
        "photometric alpha {alpha} outside [0, 1]"
    );
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        let g = want_grad.then(|| Grid2::zeros(h, w, c));
        return Ok((TermValue::default(), g));
    }
    let parts = ssim_parts(target, recon)?;
    let inv_c = 1.0 / c as f64;
    let mut sum = 0.0;
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            let mut s = 0.0;
            let mut l1 = 0.0;
            for k in 0..c {
                s += parts.s.at(y, x, k).clamp(0.0, 1.0);
                l1 += (target.at(y, x, k) - recon.at(y, x, k)).abs();
            }
            sum += 0.5 * alpha * (1.0 - s * inv_c) + (1.0 - alpha) * l1 * inv_c;
        }
    }
    let value = TermValue {
        value: sum / n as f64,
        count: n,
    };
    if !want_grad {
        return Ok((value, None));
    }
    let scale = 1.0 / n as f64;
    let upstream = Grid2::from_fn(h, w, c, |y, x, k| {
        let s = parts.s.at(y, x, k);
        if mask[y * w + x] && (0.0..=1.0).contains(&s) {
            -0.5 * alpha * inv_c * scale
        } else {
            0.0
        }
    });
    let mut grad = ssim_vjp_b(target, recon, &parts, &upstream)?;
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            for k in 0..c {
                let diff = recon.at(y, x, k) - target.at(y, x, k);
                let sign = if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                let g = grad.at(y, x, k) + (1.0 - alpha) * inv_c * scale * sign;
                grad.set(y, x, k, g);
            }
        }
    }
    Ok((value, Some(grad)))
}

/// Mean over masked pixels of `(α/2)(1 − SSIM) + (1 − α)·L1`, with L1
/// averaged over channels. An empty mask gives 0 with count 0.
pub fn photometric_loss(
    target: &Grid2,
    recon: &Grid2,
    mask: &[bool],
    alpha: f64,
) -> Result<TermValue> {
    Ok(photometric(target, recon, mask, alpha, false)?.0)
}

/// [`photometric_loss`] and its gradient with respect to `recon`.
pub fn photometric_loss_with_gradient(
    target: &Grid2,
    recon: &Grid2,
    mask: &[bool],
    alpha: f64,
) -> Result<(TermValue, Grid2)> {
    let (v, g) = photometric(target, recon, mask, alpha, true)?;
    Ok((v, g.expect("gradient requested")))
}

/// Per-pixel photometric error (0 outside the mask), for heatmaps.
pub fn photometric_error_map(
    target: &Grid2,
    recon: &Grid2,
    mask: &[bool],
    alpha: f64,
) -> Result<Grid2> {
    check_shape(target, recon)?;
    let (h, w, c) = target.shape();
    check_mask(mask, h, w)?;
    let s = ssim(target, recon)?;
    Ok(Grid2::from_fn(h, w, 1, |y, x, _| {
        if !mask[y * w + x] {
            return 0.0;
        }
        let l1: f64 = (0..c)
            .map(|k| (target.at(y, x, k) - recon.at(y, x, k)).abs())
            .sum::<f64>()
            / c as f64;
        0.5 * alpha * (1.0 - s.at(y, x, 0)) + (1.0 - alpha) * l1
    }))
}

/// A source image resampled into a target camera.
#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    pub image: Grid2,
    /// Pixels whose own warp and whole 3×3 neighborhood landed inside the
    /// source, so SSIM windows never see unsampled values.
    pub mask: Vec<bool>,
    /// `∂image/∂depth` per pixel and channel, when requested.
    pub depth_derivative: Option<Grid2>,
}

fn erode(raw: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut ok = true;
            'win: for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    if !raw[yy * w + xx] {
                        ok = false;
                        break 'win;
                    }
                }
            }
            out[y * w + x] = ok;
        }
    }
    out
}

fn reconstruct(
    source: &Grid2,
    depth: &DepthMap,
    rel: &RigidPose,
    k_src: &CameraIntrinsics,
    k_dst: &CameraIntrinsics,
    want_derivative: bool,
) -> Result<Reconstruction> {
    let (h, w) = (depth.height(), depth.width());
    let (sh, sw, c) = source.shape();
    let warper = Warper::new(k_dst, k_src, rel);
    let mut image = Grid2::zeros(h, w, c);
    let mut deriv = want_derivative.then(|| Grid2::zeros(h, w, c));
    let mut raw = vec![false; h * w];
    let mut v = vec![0.0; c];
    let mut gx = vec![0.0; c];
    let mut gy = vec![0.0; c];
    for y in 0..h {
        for x in 0..w {
            let d = depth.at(y, x);
            if !depth.is_valid(y, x) || d <= 0.0 {
                continue;
            }
            let (u, vv) = (x as f64, y as f64);
            let ok = match deriv.as_mut() {
                None => {
                    let p = warper.warp(u, vv, d, sw, sh);
                    p.valid && sample_point(source, p.x, p.y, &mut v)
                }
                Some(dg) => match warper.warp_with_depth_derivative(u, vv, d) {
                    None => false,
                    Some(((px, py), (dx, dy))) => {
                        let inside = sample_point_with_gradient(
                            source, px, py, &mut v, &mut gx, &mut gy,
                        );
                        if inside {
                            for k in 0..c {
                                dg.set(y, x, k, gx[k] * dx + gy[k] * dy);
                            }
                        }
                        inside
                    }
                },
            };
            if ok {
                raw[y * w + x] = true;
                for k in 0..c {
                    image.set(y, x, k, v[k]);
                }
            }
        }
    }
    Ok(Reconstruction {
        image,
        mask: erode(&raw, h, w),
        depth_derivative: deriv,
    })
}

/// Inverse-warps `source` into the camera that owns `depth`.
///
/// `rel` maps target-camera coordinates to source-camera coordinates;
/// `k_src` and `k_dst` are the source and target intrinsics.
pub fn reconstruct_view(
    source: &Grid2,
    depth: &DepthMap,
    rel: &RigidPose,
    k_src: &CameraIntrinsics,
    k_dst: &CameraIntrinsics,
) -> Result<Reconstruction> {
    reconstruct(source, depth, rel, k_src, k_dst, false)
}

/// [`reconstruct_view`] that also fills `depth_derivative`.
pub fn reconstruct_view_with_derivative(
    source: &Grid2,
    depth: &DepthMap,
    rel: &RigidPose,
    k_src: &CameraIntrinsics,
    k_dst: &CameraIntrinsics,
) -> Result<Reconstruction> {
    reconstruct(source, depth, rel, k_src, k_dst, true)
}

/// Gradient through `d ↦ d / mean(d)` over valid pixels.
fn denormalize_gradient(depth: &DepthMap, g_norm: &[f64], mean: f64) -> Vec<f64> {
    let nv = depth.valid_count().max(1) as f64;
    let mut dot = 0.0;
    for (k, (&d, &v)) in depth.depths().iter().zip(depth.valid()).enumerate() {
        if v {
            dot += g_norm[k] * d;
        }
    }
    let corr = dot / (mean * mean * nv);
    depth
        .valid()
        .iter()
        .enumerate()
        .map(|(k, &v)| if v { g_norm[k] / mean - corr } else { 0.0 })
        .collect()
}

fn normalizer(depth: &DepthMap, normalize: bool) -> Result<f64> {
    if !normalize {
        return Ok(1.0);
    }
    let m = depth.valid_mean();
    ensure!(
        m.is_finite() && m > 0.0,
        Contract,
        "depth normalization needs a positive valid mean, got {m}"
    );
    Ok(m)
}

fn smoothness(
    depth: &DepthMap,
    image: &Grid2,
    normalize: bool,
    want_grad: bool,
) -> Result<(TermValue, Option<Vec<f64>>)> {
    let (h, w) = (depth.height(), depth.width());
    ensure!(
        image.height() == h && image.width() == w,
        ShapeMismatch,
        "image {:?} for depth {h}x{w}",
        image.shape()
    );
    let m = normalizer(depth, normalize)?;
    let c = image.channels() as f64;
    let edge_weight = |y0: usize, x0: usize, y1: usize, x1: usize| {
        let g: f64 = (0..image.channels())
            .map(|k| (image.at(y1, x1, k) - image.at(y0, x0, k)).abs())
            .sum::<f64>()
            / c;
        (-g).exp()
    };
    // (a, b, weight) for every forward-difference pair of valid pixels.
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let k = y * w + x;
            if !depth.valid()[k] {
                continue;
            }
            if x + 1 < w && depth.valid()[k + 1] {
                xs.push((k, k + 1, edge_weight(y, x, y, x + 1)));
            }
            if y + 1 < h && depth.valid()[k + w] {
                ys.push((k, k + w, edge_weight(y, x, y + 1, x)));
            }
        }
    }
    let d = depth.depths();
    let mut g = want_grad.then(|| vec![0.0; h * w]);
    let mut value = 0.0;
    for pairs in [&xs, &ys] {
        if pairs.is_empty() {
            continue;
        }
        let inv = 1.0 / pairs.len() as f64;
        for &(a, b, wt) in pairs.iter() {
            let diff = (d[b] - d[a]) / m;
            value += diff.abs() * wt * inv;
            if let Some(g) = g.as_mut() {
                let s = if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                g[b] += s * wt * inv;
                g[a] -= s * wt * inv;
            }
        }
    }
    let count = xs.len() + ys.len();
    let grad = g.map(|g| {
        if normalize {
            denormalize_gradient(depth, &g, m)
        } else {
            g
        }
    });
    Ok((TermValue { value, count }, grad))
}

/// Edge-aware smoothness: mean `|∂x d|·e^{−|∂x I|}` plus mean
/// `|∂y d|·e^{−|∂y I|}` over forward differences between valid pixels.
///
/// With `normalize`, depth is divided by its valid mean first, which makes
/// the term invariant to global depth scale.
pub fn smoothness_loss(depth: &DepthMap, image: &Grid2, normalize: bool) -> Result<TermValue> {
    Ok(smoothness(depth, image, normalize, false)?.0)
}

/// [`smoothness_loss`] and its gradient with respect to depth.
pub fn smoothness_loss_with_gradient(
    depth: &DepthMap,
    image: &Grid2,
    normalize: bool,
) -> Result<(TermValue, Vec<f64>)> {
    let (v, g) = smoothness(depth, image, normalize, true)?;
    Ok((v, g.expect("gradient requested")))
}

/// Binary edge map: Sobel magnitude of the luma above its
/// [`EDGE_QUANTILE`] quantile.
pub fn image_edges(image: &Grid2) -> Grid2 {
    let (gx, gy) = sobel(&grayscale(image));
    let mag = gx.zip_map(&gy, |a, b| a.hypot(b)).expect("same shape");
    let mut sorted = mag.data().to_vec();
    sorted.sort_by(f64::total_cmp);
    let thr = sorted[((sorted.len() - 1) as f64 * EDGE_QUANTILE) as usize];
    mag.map(|m| if m > thr { 1.0 } else { 0.0 })
}

struct EdgeParts {
    gx: Grid2,
    gy: Grid2,
    mag: Grid2,
    t: Grid2,
}

fn edge_parts(depth: &DepthMap, mean: f64) -> EdgeParts {
    let norm = depth.to_grid().scale(1.0 / mean);
    let (gx, gy) = sobel(&norm);
    let mag = gx.zip_map(&gy, |a, b| a.hypot(b)).expect("same shape");
    let t = mag.map(|m| (EDGE_GAIN * m).tanh());
    EdgeParts { gx, gy, mag, t }
}

/// Edge probability of a depth map: `tanh(gain · |∇(d / mean d)|)`,
/// clamped to `[ε, 1-ε]`.
pub fn depth_edge_probability(depth: &DepthMap) -> Result<Grid2> {
    let m = normalizer(depth, true)?;
    Ok(edge_parts(depth, m)
        .t
        .map(|v| v.clamp(PROB_EPS, 1.0 - PROB_EPS)))
}

fn focal_pointwise(target: f64, p: f64, gamma: f64, alpha: f64) -> (f64, f64) {
    // Returns (loss, d loss / d p).
    if target >= 0.5 {
        let q = 1.0 - p;
        let l = -alpha * q.powf(gamma) * p.ln();
        let mut d = -alpha * q.powf(gamma) / p;
        if gamma != 0.0 {
            d += alpha * gamma * q.powf(gamma - 1.0) * p.ln();
        }
        (l, d)
    } else {
        let q = 1.0 - p;
        let l = -alpha * p.powf(gamma) * q.ln();
        let mut d = alpha * p.powf(gamma) / q;
        if gamma != 0.0 {
            d -= alpha * gamma * p.powf(gamma - 1.0) * q.ln();
        }
        (l, d)
    }
}

/// Mean focal loss `−α (1 − p_t)^γ log p_t` of predictions against a binary
/// target, with the same `α` for both classes.
pub fn focal_loss(target: &Grid2, pred: &Grid2, gamma: f64, alpha: f64) -> Result<f64> {
    check_shape(target, pred)?;
    ensure!(
        pred.data().iter().all(|&p| p > 0.0 && p < 1.0),
        Contract,
        "focal loss predictions must lie in (0, 1)"
    );
    let n = target.data().len().max(1) as f64;
    Ok(target
        .data()
        .iter()
        .zip(pred.data())
        .map(|(&t, &p)| focal_pointwise(t, p, gamma, alpha).0)
        .sum::<f64>()
        / n)
}

fn edge(
    edges: &Grid2,
    depth: &DepthMap,
    gamma: f64,
    alpha_f: f64,
    want_grad: bool,
) -> Result<(TermValue, Option<Vec<f64>>)> {
    let (h, w) = (depth.height(), depth.width());
    ensure!(
        edges.shape() == (h, w, 1),
        ShapeMismatch,
        "edge map {:?} for depth {h}x{w}",
        edges.shape()
    );
    let m = normalizer(depth, true)?;
    let parts = edge_parts(depth, m);
    let n = h * w;
    let mut sum = 0.0;
    let mut ugx = Grid2::zeros(h, w, 1);
    let mut ugy = Grid2::zeros(h, w, 1);
    for y in 0..h {
        for x in 0..w {
            let t = parts.t.at(y, x, 0);
            let p = t.clamp(PROB_EPS, 1.0 - PROB_EPS);
            let (l, dl) = focal_pointwise(edges.at(y, x, 0), p, gamma, alpha_f);
            sum += l;
            let mag = parts.mag.at(y, x, 0);
            if want_grad && p == t && mag > 0.0 {
                let dm = dl / n as f64 * EDGE_GAIN * (1.0 - t * t) / mag;
                ugx.set(y, x, 0, dm * parts.gx.at(y, x, 0));
                ugy.set(y, x, 0, dm * parts.gy.at(y, x, 0));
            }
        }
    }
    let value = TermValue {
        value: sum / n as f64,
        count: n,
    };
    if !want_grad {
        return Ok((value, None));
    }
    let g_norm = sobel_adjoint(&ugx, &ugy)?.into_data();
    // d̃ = d / m: the sobel adjoint gives ∂L/∂d̃ at every pixel, including
    // invalid ones, which still feed the stencil but carry no gradient.
    let grad = denormalize_gradient(depth, &g_norm, m);
    Ok((value, Some(grad)))
}

/// Focal loss between binary image edges and the depth edge probability.
pub fn edge_loss(edges: &Grid2, depth: &DepthMap, gamma: f64, alpha_f: f64) -> Result<TermValue> {
    Ok(edge(edges, depth, gamma, alpha_f, false)?.0)
}

/// [`edge_loss`] and its gradient with respect to depth.
pub fn edge_loss_with_gradient(
    edges: &Grid2,
    depth: &DepthMap,
    gamma: f64,
    alpha_f: f64,
) -> Result<(TermValue, Vec<f64>)> {
    let (v, g) = edge(edges, depth, gamma, alpha_f, true)?;
    Ok((v, g.expect("gradient requested")))
}

fn sfm(depth: &DepthMap, pseudo: &DepthMap, want_grad: bool) -> Result<(TermValue, Option<Vec<f64>>)> {
    ensure!(
        depth.same_shape(pseudo),
        ShapeMismatch,
        "depth {}x{} vs pseudo {}x{}",
        depth.height(),
        depth.width(),
        pseudo.height(),
        pseudo.width()
    );
    let mask: Vec<bool> = depth
        .valid()
        .iter()
        .zip(pseudo.valid())
        .map(|(&a, &b)| a && b)
        .collect();
    let n = mask.iter().filter(|&&m| m).count();
    ensure!(n > 0, EmptyValidSet, "no pseudo-labelled pixels");
    let mut sum = 0.0;
    let mut g = want_grad.then(|| vec![0.0; mask.len()]);
    for (k, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        let diff = depth.depths()[k] - pseudo.depths()[k];
        sum += diff.abs();
        if let Some(g) = g.as_mut() {
            g[k] = if diff > 0.0 {
                1.0 / n as f64
            } else if diff < 0.0 {
                -1.0 / n as f64
            } else {
                0.0
            };
        }
    }
    Ok((
        TermValue {
            value: sum / n as f64,
            count: n,
        },
        g,
    ))
}

/// Mean absolute difference to pseudo-labels over pixels valid in both.
pub fn sfm_loss(depth: &DepthMap, pseudo: &DepthMap) -> Result<TermValue> {
    Ok(sfm(depth, pseudo, false)?.0)
}

/// [`sfm_loss`] and its gradient with respect to depth.
pub fn sfm_loss_with_gradient(depth: &DepthMap, pseudo: &DepthMap) -> Result<(TermValue, Vec<f64>)> {
    let (v, g) = sfm(depth, pseudo, true)?;
    Ok((v, g.expect("gradient requested")))
}

/// Term weights `λ1..λ4`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub photo: f64,
    pub smooth: f64,
    pub edge: f64,
    pub sfm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            photo: 1.0,
            smooth: 1e-3,
            edge: 1e-2,
            sfm: 1e-2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("photo", self.photo),
            ("smooth", self.smooth),
            ("edge", self.edge),
            ("sfm", self.sfm),
        ] {
            ensure!(
                v.is_finite() && v >= 0.0,
                Config,
                "loss weight {name} must be nonnegative, got {v}"
            );
        }
        Ok(())
    }

    /// The weights in effect during `phase`: the SfM weight is zero in the
    /// main phase.
    pub fn for_phase(&self, phase: Phase) -> LossWeights {
        match phase {
            Phase::Init => *self,
            Phase::Main => LossWeights { sfm: 0.0, ..*self },
        }
    }
}

/// Optimization phase.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// SfM pseudo-labels active.
    #[default]
    Init,
    Main,
}

/// Unweighted term values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub photo: TermValue,
    pub smooth: TermValue,
    pub edge: TermValue,
    pub sfm: TermValue,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermCounts {
    pub photo: usize,
    pub smooth: usize,
    pub edge: usize,
    pub sfm: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub photo: f64,
    pub smooth: f64,
    pub edge: f64,
    pub sfm: f64,
    pub total: f64,
    pub valid_pixel_counts: TermCounts,
    /// Weights actually applied.
    pub weights: LossWeights,
    pub phase: Phase,
}

/// Weighted sum of the terms under `phase`.
pub fn total_loss(terms: &LossTerms, weights: &LossWeights, phase: Phase) -> LossReport {
    let w = weights.for_phase(phase);
    let total = w.photo * terms.photo.value
        + w.smooth * terms.smooth.value
        + w.edge * terms.edge.value
        + w.sfm * terms.sfm.value;
    LossReport {
        photo: terms.photo.value,
        smooth: terms.smooth.value,
        edge: terms.edge.value,
        sfm: terms.sfm.value,
        total,
        valid_pixel_counts: TermCounts {
            photo: terms.photo.count,
            smooth: terms.smooth.count,
            edge: terms.edge.count,
            sfm: terms.sfm.count,
        },
        weights: w,
        phase,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(h: usize, w: usize, c: usize, seed: u64) -> Grid2 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Grid2::from_fn(h, w, c, |_, _, _| rng.random_range(0.0..1.0))
    }

    // Direct per-window SSIM with replicate padding.
    fn ssim_oracle(a: &Grid2, b: &Grid2, y: usize, x: usize, k: usize) -> f64 {
        let mut va = Vec::new();
        let mut vb = Vec::new();
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                va.push(a.at_clamped(y as isize + dy, x as isize + dx, k));
                vb.push(b.at_clamped(y as isize + dy, x as isize + dx, k));
            }
        }
        let ma = va.iter().sum::<f64>() / 9.0;
        let mb = vb.iter().sum::<f64>() / 9.0;
        let sa = va.iter().map(|v| (v - ma).powi(2)).sum::<f64>() / 9.0;
        let sb = vb.iter().map(|v| (v - mb).powi(2)).sum::<f64>() / 9.0;
        let sab = va.iter().zip(&vb).map(|(p, q)| (p - ma) * (q - mb)).sum::<f64>() / 9.0;
        (2.0 * ma * mb + SSIM_C1) * (2.0 * sab + SSIM_C2)
            / ((ma * ma + mb * mb + SSIM_C1) * (sa + sb + SSIM_C2))
    }

    #[test]
    fn ssim_of_identical_is_one() {
        let a = random(5, 6, 3, 1);
        assert!(ssim(&a, &a).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn ssim_of_constants_matches_closed_form() {
        let (a, b) = (0.3, 0.7);
        let s = ssim(&Grid2::filled(4, 4, 1, a), &Grid2::filled(4, 4, 1, b)).unwrap();
        let want = (2.0 * a * b + SSIM_C1) * SSIM_C2 / ((a * a + b * b + SSIM_C1) * SSIM_C2);
        for &v in s.data() {
            assert!((v - want).abs() < 1e-9);
        }
    }

    #[test]
    fn ssim_matches_window_oracle() {
        let a = random(5, 7, 2, 2);
        let b = random(5, 7, 2, 3);
        let s = ssim(&a, &b).unwrap();
        for y in 0..5 {
            for x in 0..7 {
                let want = (0..2)
                    .map(|k| ssim_oracle(&a, &b, y, x, k).clamp(0.0, 1.0))
                    .sum::<f64>()
                    / 2.0;
                assert!((s.at(y, x, 0) - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn photometric_cases() {
        let a = random(6, 6, 3, 4);
        let mask = vec![true; 36];
        for alpha in [0.0, 0.5, 0.85, 1.0] {
            assert_eq!(photometric_loss(&a, &a, &mask, alpha).unwrap().value, 0.0);
        }
        let b = random(6, 6, 3, 5);
        let l1 = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).sum::<f64>() / 108.0;
        let got = photometric_loss(&a, &b, &mask, 0.0).unwrap().value;
        assert!((got - l1).abs() < 1e-12);
        // α = 1 on constants offset by 0.1: half of one minus closed-form SSIM.
        let (p, q) = (0.4, 0.5);
        let s = (2.0 * p * q + SSIM_C1) / (p * p + q * q + SSIM_C1);
        let got = photometric_loss(
            &Grid2::filled(4, 4, 1, p),
            &Grid2::filled(4, 4, 1, q),
            &[true; 16],
            1.0,
        )
        .unwrap();
        assert!((got.value - 0.5 * (1.0 - s)).abs() < 1e-9);
        let empty = photometric_loss(&a, &b, &[false; 36], 0.85).unwrap();
        assert_eq!((empty.value, empty.count), (0.0, 0));
    }

    #[test]
    fn photometric_gradient_matches_finite_differences() {
        let a = random(5, 6, 2, 6);
        let b = random(5, 6, 2, 7).map(|v| 0.5 * v + 0.25);
        let mut mask = vec![true; 30];
        mask[7] = false;
        let (_, g) = photometric_loss_with_gradient(&a, &b, &mask, PHOTO_ALPHA).unwrap();
        let h = 1e-6;
        for i in [0, 5, 13, 14, 29, 40, 59] {
            let mut bp = b.clone();
            let mut bm = b.clone();
            let (y, x, k) = (i / 12, (i / 2) % 6, i % 2);
            bp.set(y, x, k, b.at(y, x, k) + h);
            bm.set(y, x, k, b.at(y, x, k) - h);
            let fd = (photometric_loss(&a, &bp, &mask, PHOTO_ALPHA).unwrap().value
                - photometric_loss(&a, &bm, &mask, PHOTO_ALPHA).unwrap().value)
                / (2.0 * h);
            assert!((fd - g.at(y, x, k)).abs() < 1e-6, "{i}: {fd} vs {}", g.at(y, x, k));
        }
    }

    #[test]
    fn identity_reconstruction_is_the_source() {
        let k = CameraIntrinsics::new(10.0, 10.0, 4.0, 3.0).unwrap();
        let src = random(6, 8, 3, 8);
        let depth = DepthMap::constant(6, 8, 5.0);
        let r = reconstruct_view(&src, &depth, &RigidPose::identity(), &k, &k).unwrap();
        assert_eq!(r.image, src);
        assert!(r.mask.iter().all(|&m| m));
    }

    #[test]
    fn reconstruction_derivative_matches_finite_differences() {
        let k = CameraIntrinsics::new(10.0, 10.0, 4.0, 3.0).unwrap();
        let src = random(6, 8, 1, 9);
        let rel = RigidPose::from_translation(nalgebra::Vector3::new(0.3, 0.1, 0.0));
        let depth = DepthMap::from_fn(6, 8, |y, x| 4.0 + 0.13 * y as f64 + 0.07 * x as f64);
        let r = reconstruct_view_with_derivative(&src, &depth, &rel, &k, &k).unwrap();
        let dg = r.depth_derivative.unwrap();
        let h = 1e-6;
        for (y, x) in [(2, 3), (3, 4), (1, 2)] {
            let mut dp = depth.clone();
            dp.set(y, x, depth.at(y, x) + h);
            let mut dm = depth.clone();
            dm.set(y, x, depth.at(y, x) - h);
            let fp = reconstruct_view(&src, &dp, &rel, &k, &k).unwrap().image.at(y, x, 0);
            let fm = reconstruct_view(&src, &dm, &rel, &k, &k).unwrap().image.at(y, x, 0);
            assert!(((fp - fm) / (2.0 * h) - dg.at(y, x, 0)).abs() < 1e-5);
        }
    }

    #[test]
    fn smoothness_cases() {
        let flat = Grid2::filled(5, 6, 3, 0.5);
        assert_eq!(smoothness_loss(&DepthMap::constant(5, 6, 3.0), &flat, true).unwrap().value, 0.0);
        let ramp = DepthMap::from_fn(5, 6, |_, x| 2.0 + 0.5 * x as f64);
        let mean = ramp.depths().iter().sum::<f64>() / 30.0;
        let got = smoothness_loss(&ramp, &flat, true).unwrap().value;
        assert!((got - 0.5 / mean).abs() < 1e-12);
        let raw = smoothness_loss(&ramp, &flat, false).unwrap().value;
        assert!((raw - 0.5).abs() < 1e-12);
        let edged = Grid2::from_fn(5, 6, 3, |_, x, _| if x >= 3 { 1.0 } else { 0.0 });
        assert!(smoothness_loss(&ramp, &edged, true).unwrap().value < got);
    }

    #[test]
    fn smoothness_gradient_matches_finite_differences() {
        let img = random(4, 5, 3, 10);
        let depth = DepthMap::from_fn(4, 5, |y, x| 3.0 + ((y * 7 + x * 3) % 5) as f64 * 0.37);
        for normalize in [false, true] {
            let (_, g) = smoothness_loss_with_gradient(&depth, &img, normalize).unwrap();
            let h = 1e-7;
            for k in 0..20 {
                let (y, x) = (k / 5, k % 5);
                let mut dp = depth.clone();
                dp.set(y, x, depth.at(y, x) + h);
                let mut dm = depth.clone();
                dm.set(y, x, depth.at(y, x) - h);
                let fd = (smoothness_loss(&dp, &img, normalize).unwrap().value
                    - smoothness_loss(&dm, &img, normalize).unwrap().value)
                    / (2.0 * h);
                assert!((fd - g[k]).abs() < 1e-6, "{k}: {fd} vs {}", g[k]);
            }
        }
    }

    #[test]
    fn edge_cases() {
        let target = Grid2::from_fn(4, 4, 1, |y, x, _| ((y + x) % 2) as f64);
        let exact = target.map(|t| t.clamp(PROB_EPS, 1.0 - PROB_EPS));
        let l = focal_loss(&target, &exact, FOCAL_GAMMA, FOCAL_ALPHA).unwrap();
        assert!(l <= -FOCAL_ALPHA * PROB_EPS.powf(FOCAL_GAMMA) * (1.0 - PROB_EPS).ln() + 1e-15);
        let p = random(4, 4, 1, 11).map(|v| 0.05 + 0.9 * v);
        let bce = target
            .data()
            .iter()
            .zip(p.data())
            .map(|(&t, &q)| -(t * q.ln() + (1.0 - t) * (1.0 - q).ln()))
            .sum::<f64>()
            / 16.0;
        assert!((focal_loss(&target, &p, 0.0, 0.5).unwrap() - 0.5 * bce).abs() < 1e-12);
        let zeros = Grid2::zeros(3, 3, 1);
        let half = Grid2::filled(3, 3, 1, 0.5);
        let want = -FOCAL_ALPHA * 0.5f64.powf(FOCAL_GAMMA) * 0.5f64.ln();
        assert!((focal_loss(&zeros, &half, FOCAL_GAMMA, FOCAL_ALPHA).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn edge_gradient_matches_finite_differences() {
        let edges = Grid2::from_fn(5, 6, 1, |_, x, _| if x == 3 { 1.0 } else { 0.0 });
        let depth = DepthMap::from_fn(5, 6, |y, x| if x >= 3 { 6.0 } else { 3.0 } + 0.1 * y as f64);
        let (_, g) = edge_loss_with_gradient(&edges, &depth, FOCAL_GAMMA, FOCAL_ALPHA).unwrap();
        let h = 1e-7;
        for k in 0..30 {
            let (y, x) = (k / 6, k % 6);
            let mut dp = depth.clone();
            dp.set(y, x, depth.at(y, x) + h);
            let mut dm = depth.clone();
            dm.set(y, x, depth.at(y, x) - h);
            let fd = (edge_loss(&edges, &dp, FOCAL_GAMMA, FOCAL_ALPHA).unwrap().value
                - edge_loss(&edges, &dm, FOCAL_GAMMA, FOCAL_ALPHA).unwrap().value)
                / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-6, "{k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn image_edges_of_flat_image_are_empty() {
        assert!(image_edges(&Grid2::filled(6, 6, 3, 0.4)).data().iter().all(|&v| v == 0.0));
        let step = Grid2::from_fn(8, 20, 1, |_, x, _| if x >= 10 { 1.0 } else { 0.0 });
        let e = image_edges(&step);
        assert!(e.at(4, 9, 0) == 1.0 && e.at(4, 10, 0) == 1.0 && e.at(4, 0, 0) == 0.0);
        assert_eq!(e.data().iter().sum::<f64>(), 16.0);
    }

    #[test]
    fn sfm_cases() {
        let mask = vec![true, false, true, false];
        let pseudo = DepthMap::with_mask(2, 2, vec![2.0, 0.0, 3.0, 0.0], mask.clone()).unwrap();
        let same = DepthMap::new(2, 2, vec![2.0, 9.0, 3.0, 9.0]).unwrap();
        assert_eq!(sfm_loss(&same, &pseudo).unwrap().value, 0.0);
        let off = same.map(|d| d + 0.5);
        assert_eq!(sfm_loss(&off, &pseudo).unwrap().value, 0.5);
        let mixed = DepthMap::new(2, 2, vec![3.0, 0.0, 2.75, 0.0]).unwrap();
        let t = sfm_loss(&mixed, &pseudo).unwrap();
        assert_eq!((t.value, t.count), (0.625, 2));
        let none = DepthMap::with_mask(2, 2, vec![1.0; 4], vec![false; 4]).unwrap();
        assert!(matches!(sfm_loss(&same, &none), Err(crate::Error::EmptyValidSet(_))));
    }

    #[test]
    fn total_loss_weighting() {
        let w = LossWeights::default();
        assert_eq!((w.photo, w.smooth, w.edge, w.sfm), (1.0, 1e-3, 1e-2, 1e-2));
        assert_eq!(total_loss(&LossTerms::default(), &w, Phase::Init).total, 0.0);
        let photo = LossTerms {
            photo: TermValue { value: 1.0, count: 1 },
            ..Default::default()
        };
        assert_eq!(total_loss(&photo, &w, Phase::Init).total, 1.0);
        let sfm = LossTerms {
            sfm: TermValue { value: 100.0, count: 1 },
            ..Default::default()
        };
        assert_eq!(total_loss(&sfm, &w, Phase::Main).total, 0.0);
        assert_eq!(total_loss(&sfm, &w, Phase::Init).total, 1.0);
    }

    proptest! {
        #[test]
        fn smoothness_is_scale_invariant(s in 0.1f64..10.0, seed in 0u64..50) {
            let img = random(4, 5, 3, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let d = DepthMap::from_fn(4, 5, |_, _| rng.random_range(1.0..20.0));
            let a = smoothness_loss(&d, &img, true).unwrap().value;
            let b = smoothness_loss(&d.scaled(s), &img, true).unwrap().value;
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }

        #[test]
        fn photometric_is_nonnegative(seed in 0u64..100, alpha in 0.0f64..1.0) {
            let a = random(4, 4, 3, seed);
            let b = random(4, 4, 3, seed + 1000);
            prop_assert!(photometric_loss(&a, &b, &[true; 16], alpha).unwrap().value >= 0.0);
        }
    }
}
