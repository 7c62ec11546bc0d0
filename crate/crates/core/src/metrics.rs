//! Scale-aware depth metrics: no median scaling, thresholds with strict `<`.

use serde::{Deserialize, Serialize};

use crate::depth_map::DepthMap;
use crate::error::{ensure, Result};
use crate::numerics::Grid2;

/// Predictions are clamped to `[PRED_FLOOR, d_max]` before scoring.
pub const PRED_FLOOR: f64 = 1e-3;

/// One evaluation, serialized with the usual table headings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    #[serde(rename = "Abs.Rel")]
    pub abs_rel: f64,
    #[serde(rename = "Sq.Rel")]
    pub sq_rel: f64,
    #[serde(rename = "RMSE")]
    pub rmse: f64,
    #[serde(rename = "RMSElog")]
    pub rmse_log: f64,
    #[serde(rename = "d<1.25")]
    pub delta_1: f64,
    #[serde(rename = "d<1.25^2")]
    pub delta_2: f64,
    #[serde(rename = "d<1.25^3")]
    pub delta_3: f64,
    pub n_valid: usize,
}

/// Ground truth is scored where `d_min < gt ≤ d_max`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalBounds {
    pub d_min: f64,
    pub d_max: f64,
}

impl Default for EvalBounds {
    fn default() -> Self {
        Self {
            d_min: 0.0,
            d_max: 200.0,
        }
    }
}

const THRESHOLDS: [f64; 3] = [1.25, 1.25 * 1.25, 1.25 * 1.25 * 1.25];

/// `max(p/g, g/p) < t`, written without division so that `p = t·g` is
/// excluded exactly.
fn within(p: f64, g: f64, t: f64) -> bool {
    p < t * g && g < t * p
}

/// Metrics of `pred` against `gt` over valid ground-truth pixels in
/// `(bounds.d_min, bounds.d_max]`, optionally restricted by `mask`.
pub fn evaluate_masked(
    pred: &DepthMap,
    gt: &DepthMap,
    bounds: &EvalBounds,
    mask: Option<&[bool]>,
) -> Result<EvalResult> {
    ensure!(
        pred.same_shape(gt),
        ShapeMismatch,
        "prediction {}x{} vs ground truth {}x{}",
        pred.height(),
        pred.width(),
        gt.height(),
        gt.width()
    );
    if let Some(m) = mask {
        ensure!(m.len() == gt.len(), ShapeMismatch, "mask of {} for {} pixels", m.len(), gt.len());
    }
    ensure!(
        bounds.d_max > bounds.d_min,
        Config,
        "empty evaluation range ({}, {}]",
        bounds.d_min,
        bounds.d_max
    );
    let (mut abs_rel, mut sq_rel, mut se, mut se_log) = (0.0, 0.0, 0.0, 0.0);
    let mut hits = [0usize; 3];
    let mut n = 0usize;
    for k in 0..gt.len() {
        let g = gt.depths()[k];
        if !gt.valid()[k] || g <= bounds.d_min || g > bounds.d_max {
            continue;
        }
        if mask.is_some_and(|m| !m[k]) {
            continue;
        }
        let p = pred.depths()[k].clamp(PRED_FLOOR, bounds.d_max);
        let e = p - g;
        abs_rel += e.abs() / g;
        sq_rel += e * e / g;
        se += e * e;
        let l = p.ln() - g.ln();
        se_log += l * l;
        for (h, &t) in hits.iter_mut().zip(&THRESHOLDS) {
            if within(p, g, t) {
                *h += 1;
            }
        }
        n += 1;
    }
    ensure!(
        n > 0,
        EmptyValidSet,
        "no ground-truth depth in ({}, {}]",
        bounds.d_min,
        bounds.d_max
    );
    let nf = n as f64;
    Ok(EvalResult {
        abs_rel: abs_rel / nf,
        sq_rel: sq_rel / nf,
        rmse: (se / nf).sqrt(),
        rmse_log: (se_log / nf).sqrt(),
        delta_1: hits[0] as f64 / nf,
        delta_2: hits[1] as f64 / nf,
        delta_3: hits[2] as f64 / nf,
        n_valid: n,
    })
}

/// Metrics of `pred` against `gt` with ground truth restricted to
/// `(d_min, d_max]`.
pub fn evaluate(pred: &DepthMap, gt: &DepthMap, d_min: f64, d_max: f64) -> Result<EvalResult> {
    evaluate_masked(pred, gt, &EvalBounds { d_min, d_max }, None)
}

/// Unweighted mean over cameras plus the per-camera rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraReport {
    pub mean: EvalResult,
    pub per_camera: Vec<EvalResult>,
}

/// Averages each metric across cameras; `n_valid` of the mean is the total.
pub fn per_camera_report(results: &[EvalResult]) -> Result<CameraReport> {
    ensure!(!results.is_empty(), Contract, "no per-camera results to aggregate");
    let k = results.len() as f64;
    let avg = |f: fn(&EvalResult) -> f64| results.iter().map(f).sum::<f64>() / k;
    Ok(CameraReport {
        mean: EvalResult {
            abs_rel: avg(|r| r.abs_rel),
            sq_rel: avg(|r| r.sq_rel),
            rmse: avg(|r| r.rmse),
            rmse_log: avg(|r| r.rmse_log),
            delta_1: avg(|r| r.delta_1),
            delta_2: avg(|r| r.delta_2),
            delta_3: avg(|r| r.delta_3),
            n_valid: results.iter().map(|r| r.n_valid).sum(),
        },
        per_camera: results.to_vec(),
    })
}

/// Per-pixel absolute relative error (0 outside the scored set).
pub fn abs_rel_map(pred: &DepthMap, gt: &DepthMap, bounds: &EvalBounds) -> Result<Grid2> {
    ensure!(pred.same_shape(gt), ShapeMismatch, "prediction and ground truth differ in shape");
    Ok(Grid2::from_fn(gt.height(), gt.width(), 1, |y, x, _| {
        let g = gt.at(y, x);
        if !gt.is_valid(y, x) || g <= bounds.d_min || g > bounds.d_max {
            return 0.0;
        }
        (pred.at(y, x).clamp(PRED_FLOOR, bounds.d_max) - g).abs() / g
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gt(seed: u64) -> DepthMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DepthMap::from_fn(6, 7, |_, _| rng.random_range(1.0..80.0))
    }

    #[test]
    fn perfect_prediction() {
        let g = gt(1);
        let r = evaluate(&g, &g, 0.0, 200.0).unwrap();
        assert_eq!(
            (r.abs_rel, r.sq_rel, r.rmse, r.rmse_log),
            (0.0, 0.0, 0.0, 0.0)
        );
        assert_eq!((r.delta_1, r.delta_2, r.delta_3, r.n_valid), (1.0, 1.0, 1.0, 42));
    }

    #[test]
    fn scaled_prediction() {
        let g = gt(2);
        let r = evaluate(&g.scaled(1.2), &g, 0.0, 200.0).unwrap();
        assert!((r.abs_rel - 0.2).abs() < 1e-12);
        assert_eq!(r.delta_1, 1.0);
        let r = evaluate(&g.scaled(1.25), &g, 0.0, 200.0).unwrap();
        assert_eq!(r.delta_1, 0.0);
        assert_eq!(r.delta_2, 1.0);
    }

    #[test]
    fn hand_computed_values() {
        let g = DepthMap::new(1, 2, vec![2.0, 4.0]).unwrap();
        let p = DepthMap::new(1, 2, vec![3.0, 4.0]).unwrap();
        let r = evaluate(&p, &g, 0.0, 10.0).unwrap();
        assert!((r.abs_rel - 0.25).abs() < 1e-15);
        assert!((r.sq_rel - 0.25).abs() < 1e-15);
        assert!((r.rmse - 0.5f64.sqrt()).abs() < 1e-15);
        assert!((r.rmse_log - (1.5f64.ln().powi(2) / 2.0).sqrt()).abs() < 1e-15);
        assert_eq!((r.delta_1, r.delta_2), (0.5, 1.0));
    }

    #[test]
    fn bounds_and_empty_set() {
        let g = DepthMap::new(1, 3, vec![1.0, 50.0, 100.0]).unwrap();
        let r = evaluate(&g, &g, 1.0, 50.0).unwrap();
        assert_eq!(r.n_valid, 1);
        assert!(matches!(
            evaluate(&g, &g, 200.0, 300.0),
            Err(crate::Error::EmptyValidSet(_))
        ));
    }

    #[test]
    fn aggregation() {
        let g = gt(3);
        let a = evaluate(&g.scaled(1.1), &g, 0.0, 200.0).unwrap();
        let rep = per_camera_report(&[a, a]).unwrap();
        assert_eq!(rep.mean.abs_rel, a.abs_rel);
        let b = EvalResult { abs_rel: 0.3, ..a };
        let c = EvalResult { abs_rel: 0.1, ..a };
        assert!((per_camera_report(&[b, c]).unwrap().mean.abs_rel - 0.2).abs() < 1e-15);
        assert!(per_camera_report(&[]).is_err());
    }

    #[test]
    fn json_uses_table_headings() {
        let g = gt(4);
        let v = serde_json::to_value(evaluate(&g, &g, 0.0, 200.0).unwrap()).unwrap();
        for key in ["Abs.Rel", "Sq.Rel", "RMSE", "RMSElog", "d<1.25", "d<1.25^2", "d<1.25^3"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }

    proptest! {
        #[test]
        fn invariants(seed in 0u64..200, s in 0.5f64..2.0) {
            let g = gt(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
            let p = DepthMap::new(6, 7, g.depths().iter().map(|d| d * rng.random_range(0.6..1.6)).collect()).unwrap();
            let r = evaluate(&p, &g, 0.0, 200.0).unwrap();
            let mean_abs = p.depths().iter().zip(g.depths()).map(|(a, b)| (a - b).abs()).sum::<f64>() / 42.0;
            prop_assert!(r.rmse + 1e-12 >= mean_abs);
            prop_assert!(r.delta_1 <= r.delta_2 && r.delta_2 <= r.delta_3);
            let up = evaluate(&g.scaled(s), &g, 0.0, 200.0).unwrap();
            let down = evaluate(&g.map(|d| d / s), &g, 0.0, 200.0).unwrap();
            prop_assert_eq!(
                (up.delta_1, up.delta_2, up.delta_3),
                (down.delta_1, down.delta_2, down.delta_3)
            );
            // Reversing pixel order changes nothing.
            let rev = |m: &DepthMap| DepthMap::new(6, 7, m.depths().iter().rev().copied().collect()).unwrap();
            let rr = evaluate(&rev(&p), &rev(&g), 0.0, 200.0).unwrap();
            prop_assert!((rr.abs_rel - r.abs_rel).abs() < 1e-12 && rr.delta_1 == r.delta_1);
        }
    }
}
