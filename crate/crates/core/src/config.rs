//! Run configuration and named ablations.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::geometry::{CameraRig, RigidPose};
use crate::hypotheses::SamplingMode;
use crate::io::PoseFile;
use crate::metrics::EvalBounds;
use crate::mff::{FeatureProvider, IntensityFeatures, MffKernels, TextureFeatures, MFF_DEFAULT_SEED};
use crate::pipeline::{EstimateOptions, Extractors, FusionKind, UpsampleKind};
use crate::refine::RefineOptions;
use crate::stf::StfMode;
use crate::synthetic::Scene;

/// Where frames come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum InputMode {
    /// Render a scene in memory. Without a scene file the seeded default
    /// scene is used.
    Synthetic {
        #[serde(default)]
        scene: Option<PathBuf>,
        /// Forward ego translation between the frames, meters.
        #[serde(default = "default_forward")]
        forward: f64,
        /// Ego yaw between the frames, degrees.
        #[serde(default)]
        yaw_deg: f64,
    },
    /// A dataset directory as written by `synth`.
    Images { dir: PathBuf },
}

fn default_forward() -> f64 {
    1.0
}

impl Default for InputMode {
    fn default() -> Self {
        InputMode::Synthetic {
            scene: None,
            forward: default_forward(),
            yaw_deg: 0.0,
        }
    }
}

/// Built-in feature providers, or per-camera feature files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Intensity,
    Texture,
    /// `features/cam{c}_{prev,curr}.m2df` inside an image dataset.
    File,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSelection {
    pub matching: ProviderKind,
    pub prior: ProviderKind,
    /// MFF kernel file; seeded kernels otherwise.
    pub kernels: Option<PathBuf>,
}

impl Default for FeatureSelection {
    fn default() -> Self {
        Self {
            matching: ProviderKind::Intensity,
            prior: ProviderKind::Texture,
            kernels: None,
        }
    }
}

/// Everything a run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Rig calibration; the default six-camera rig when absent.
    pub rig: Option<PathBuf>,
    pub input: InputMode,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub estimate: EstimateOptions,
    pub features: FeatureSelection,
    pub refine: RefineOptions,
    /// Log-normal σ of the synthetic prior.
    pub prior_sigma: f64,
    /// Constant prior depth for external images.
    pub plane_prior: f64,
    /// Ego motion `P_{t→t-1}` as a row-major 3×4 matrix; overrides any
    /// pose file.
    pub ego_motion: Option<Vec<f64>>,
    pub eval: EvalBounds,
    /// Applied in order after loading.
    pub ablations: Vec<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            rig: None,
            input: InputMode::default(),
            seed: 0,
            out: None,
            estimate: EstimateOptions::default(),
            features: FeatureSelection::default(),
            refine: RefineOptions::default(),
            prior_sigma: 0.1,
            plane_prior: 10.0,
            ego_motion: None,
            eval: EvalBounds::default(),
            ablations: Vec::new(),
        }
    }
}

/// Names accepted by [`apply_ablation`].
pub const ABLATIONS: &[&str] = &[
    "stf_on",
    "stf_off",
    "temporal_only",
    "spatial_only",
    "mff",
    "vff",
    "adaptive",
    "fixed",
    "vanilla",
    "bins<N>",
    "no_sfm",
    "no_edge",
    "no_smooth",
];

/// Applies one named ablation to `cfg`.
pub fn apply_ablation(cfg: &mut PipelineConfig, name: &str) -> Result<()> {
    let e = &mut cfg.estimate;
    match name {
        "stf_on" => e.stf = StfMode::On,
        "stf_off" => e.stf = StfMode::Off,
        "temporal_only" => e.stf = StfMode::TemporalOnly,
        "spatial_only" => e.stf = StfMode::SpatialOnly,
        // Fusion only matters where the context feature is used.
        "mff" => {
            e.fusion = FusionKind::Mff;
            e.upsample = UpsampleKind::Guided;
        }
        "vff" => {
            e.fusion = FusionKind::Vff;
            e.upsample = UpsampleKind::Guided;
        }
        "adaptive" => e.mode = SamplingMode::Adaptive,
        "fixed" => e.mode = SamplingMode::Fixed,
        "vanilla" => e.mode = SamplingMode::Vanilla,
        "no_sfm" => cfg.refine.weights.sfm = 0.0,
        "no_edge" => cfg.refine.weights.edge = 0.0,
        "no_smooth" => cfg.refine.weights.smooth = 0.0,
        other => {
            let bins = other
                .strip_prefix("bins")
                .and_then(|n| n.parse::<usize>().ok())
                .filter(|&n| n >= 1);
            match bins {
                Some(n) => e.bins = n,
                None => {
                    return Err(Error::Config(format!(
                        "unknown ablation '{other}' (known: {})",
                        ABLATIONS.join(", ")
                    )))
                }
            }
        }
    }
    Ok(())
}

impl PipelineConfig {
    /// Reads a JSON config; unreadable or malformed files are config errors.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        // Relative paths are taken relative to the config file.
        if let Some(base) = path.parent() {
            cfg.rebase(base);
        }
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.rig.as_mut() {
            fix(p);
        }
        if let Some(p) = self.features.kernels.as_mut() {
            fix(p);
        }
        match &mut self.input {
            InputMode::Synthetic { scene: Some(p), .. } => fix(p),
            InputMode::Images { dir } => fix(dir),
            _ => {}
        }
    }

    /// Applies `self.ablations` then checks every field.
    pub fn resolve(mut self) -> Result<Self> {
        for name in self.ablations.clone() {
            apply_ablation(&mut self, &name)?;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.estimate
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.refine.validate().map_err(|e| Error::Config(e.to_string()))?;
        ensure!(
            self.prior_sigma.is_finite() && self.prior_sigma >= 0.0,
            Config,
            "prior_sigma must be non-negative"
        );
        ensure!(
            self.plane_prior.is_finite() && self.plane_prior > 0.0,
            Config,
            "plane_prior must be positive"
        );
        ensure!(
            self.eval.d_max > self.eval.d_min && self.eval.d_min >= 0.0,
            Config,
            "eval bounds must satisfy 0 <= d_min < d_max"
        );
        if let Some(m) = &self.ego_motion {
            ensure!(m.len() == 12, Config, "ego_motion needs 12 values, got {}", m.len());
            RigidPose::from_row_major_3x4(m).map_err(|e| Error::Config(e.to_string()))?;
        }
        let exists = |p: &Path, what: &str| -> Result<()> {
            ensure!(p.exists(), Config, "{what} {} does not exist", p.display());
            Ok(())
        };
        if let Some(p) = &self.rig {
            exists(p, "rig file")?;
        }
        if let Some(p) = &self.features.kernels {
            exists(p, "kernel file")?;
        }
        match &self.input {
            InputMode::Synthetic { scene, forward, yaw_deg } => {
                if let Some(p) = scene {
                    exists(p, "scene file")?;
                }
                ensure!(
                    forward.is_finite() && yaw_deg.is_finite(),
                    Config,
                    "synthetic motion must be finite"
                );
            }
            InputMode::Images { dir } => exists(dir, "image directory")?,
        }
        for (role, kind) in [("matching", self.features.matching), ("prior", self.features.prior)] {
            if kind == ProviderKind::File {
                ensure!(
                    matches!(self.input, InputMode::Images { .. }),
                    Config,
                    "{role} features from files need an image dataset"
                );
            }
        }
        Ok(())
    }

    /// The rig file, the rig stored with an image dataset, or the default.
    pub fn load_rig(&self) -> Result<CameraRig> {
        if let Some(p) = &self.rig {
            return CameraRig::load(p);
        }
        if let InputMode::Images { dir } = &self.input {
            let p = crate::io::DatasetLayout::new(dir.clone()).rig();
            if p.exists() {
                return CameraRig::load(&p);
            }
        }
        Ok(CameraRig::default_surround())
    }

    /// The scene file or the seeded default scene.
    pub fn load_scene(&self) -> Result<Scene> {
        match &self.input {
            InputMode::Synthetic { scene: Some(p), .. } => Scene::load(p),
            _ => Ok(Scene::default_scene(self.seed)),
        }
    }

    /// Motion used to render synthetic frames.
    pub fn synthetic_motion(&self) -> RigidPose {
        match &self.input {
            InputMode::Synthetic { forward, yaw_deg, .. } => RigidPose::from_axis_angle(
                nalgebra::Vector3::new(0.0, 0.0, yaw_deg.to_radians()),
                nalgebra::Vector3::new(*forward, 0.0, 0.0),
            ),
            InputMode::Images { .. } => RigidPose::identity(),
        }
    }

    /// The configured ego motion, if any.
    pub fn configured_pose(&self) -> Result<Option<RigidPose>> {
        self.ego_motion
            .as_ref()
            .map(|m| {
                PoseFile {
                    ego_motion: m.clone(),
                }
                .pose()
            })
            .transpose()
    }

    /// Built-in extractors for the selected providers. File providers fall
    /// back to the built-in defaults here; their grids are passed separately.
    pub fn extractors(&self) -> Result<Extractors> {
        let c = self.estimate.channels;
        let make = |k: ProviderKind, fallback: ProviderKind| -> Box<dyn FeatureProvider> {
            let k = if k == ProviderKind::File { fallback } else { k };
            match k {
                ProviderKind::Texture => Box::new(TextureFeatures {
                    channels: c,
                    ..TextureFeatures::default()
                }),
                ProviderKind::Intensity | ProviderKind::File => Box::new(IntensityFeatures {
                    channels: c,
                    ..IntensityFeatures::default()
                }),
            }
        };
        let kernels = match &self.features.kernels {
            Some(p) => MffKernels::from_file(&crate::io::read_json(p)?)?,
            None => MffKernels::seeded(c, c, MFF_DEFAULT_SEED),
        };
        Ok(Extractors {
            matching: make(self.features.matching, ProviderKind::Intensity),
            prior: make(self.features.prior, ProviderKind::Texture),
            kernels,
        })
    }
}
