//! Experiment configuration: one TOML (or JSON) file drives every command.
//!
//! Angles are given in degrees here and converted to radians when samplers
//! are built. Relative paths resolve against the directory of the config
//! file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adversary::AttackConfig;
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, PoseTransform};
use crate::io;
use crate::model::{DepthNet, DEFAULT_MAX_DEPTH, DEFAULT_MIN_DEPTH};
use crate::scene::{make_synthetic_background, BackgroundPair, ObjectBoard, PlacementSampler, SceneSource};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    /// Focal length in pixels for both axes unless `fx`/`fy` are given.
    pub focal: f64,
    pub fx: Option<f64>,
    pub fy: Option<f64>,
    /// Principal point; the image center when absent.
    pub cx: Option<f64>,
    pub cy: Option<f64>,
    pub width: usize,
    pub height: usize,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            focal: 60.0,
            fx: None,
            fy: None,
            cx: None,
            cy: None,
            width: 64,
            height: 32,
        }
    }
}

impl CameraConfig {
    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        let k = CameraIntrinsics::centered(self.focal, self.width, self.height)
            .map_err(|e| Error::Config(format!("camera: {e}")))?;
        CameraIntrinsics::new(
            self.fx.unwrap_or(k.fx),
            self.fy.unwrap_or(k.fy),
            self.cx.unwrap_or(k.cx),
            self.cy.unwrap_or(k.cy),
            self.width,
            self.height,
        )
        .map_err(|e| Error::Config(format!("camera: {e}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    /// Procedural textured planes seen by a stereo rig.
    Synthetic,
    /// Stereo PNG pairs with JSON pose sidecars, see [`io::load_stereo_dir`].
    StereoDir,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenesConfig {
    pub source: SceneKind,
    /// Training pairs for `stereo_dir`.
    pub dir: Option<PathBuf>,
    /// Evaluation pairs for `stereo_dir`; defaults to `dir`.
    pub eval_dir: Option<PathBuf>,
    /// Number of synthetic training and evaluation backgrounds.
    pub count: usize,
    pub eval_count: usize,
    /// Seed of the first synthetic training / evaluation background; the
    /// rest count up from it.
    pub background_seed: u64,
    pub eval_background_seed: u64,
    /// Stereo baseline in meters.
    pub baseline: f64,
    pub plane_depth: f64,
    pub texture_scale: f64,
    /// Training placement ranges (meters, degrees).
    pub distance: [f64; 2],
    pub yaw_deg: [f64; 2],
}

impl Default for ScenesConfig {
    fn default() -> Self {
        Self {
            source: SceneKind::Synthetic,
            dir: None,
            eval_dir: None,
            count: 8,
            eval_count: 4,
            background_seed: 100,
            eval_background_seed: 900,
            baseline: 0.54,
            plane_depth: 16.2,
            texture_scale: 2.0,
            distance: [5.0, 10.0],
            yaw_deg: [-30.0, 30.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProceduralBoard {
    pub seed: u64,
    pub width_px: usize,
    pub height_px: usize,
}

/// Either `image` (with optional `mask`; the full rectangle otherwise) or
/// `procedural`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoardSpec {
    #[serde(default)]
    pub image: Option<PathBuf>,
    #[serde(default)]
    pub mask: Option<PathBuf>,
    #[serde(default)]
    pub procedural: Option<ProceduralBoard>,
    /// Physical width in meters; height follows the image aspect ratio.
    pub width_m: f64,
}

fn default_boards() -> Vec<BoardSpec> {
    vec![BoardSpec {
        image: None,
        mask: None,
        procedural: Some(ProceduralBoard {
            seed: 7,
            width_px: 32,
            height_px: 24,
        }),
        width_m: 1.6,
    }]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub base_width: usize,
    pub initial_depth: f64,
    pub min_depth: f64,
    pub max_depth: f64,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            base_width: 8,
            initial_depth: 15.0,
            min_depth: DEFAULT_MIN_DEPTH,
            max_depth: DEFAULT_MAX_DEPTH,
            seed: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub distance: [f64; 2],
    pub yaw_deg: [f64; 2],
    /// Number of evaluation scenes.
    pub n: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            distance: [5.0, 30.0],
            yaw_deg: [-30.0, 30.0],
            n: 100,
            seed: 5,
        }
    }
}

fn default_attacks() -> Vec<AttackConfig> {
    vec![AttackConfig {
        steps: 200,
        eot_samples: 4,
        seed: 11,
        ..AttackConfig::soft_l0(0.1)
    }]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seed of the training placement sampler.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub camera: CameraConfig,
    pub scenes: ScenesConfig,
    #[serde(default = "default_boards")]
    pub boards: Vec<BoardSpec>,
    pub net: NetConfig,
    pub train: TrainConfig,
    #[serde(default = "default_attacks")]
    pub attacks: Vec<AttackConfig>,
    pub eval: EvalConfig,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            output_dir: PathBuf::from("out"),
            camera: CameraConfig::default(),
            scenes: ScenesConfig::default(),
            boards: default_boards(),
            net: NetConfig::default(),
            train: TrainConfig::default(),
            attacks: default_attacks(),
            eval: EvalConfig::default(),
            base_dir: PathBuf::new(),
        }
    }
}

fn range(field: &str, r: [f64; 2]) -> Result<(f64, f64)> {
    if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
        return Err(Error::Config(format!("{field}: invalid range {r:?}")));
    }
    Ok((r[0], r[1]))
}

fn radians(r: (f64, f64)) -> (f64, f64) {
    (r.0.to_radians(), r.1.to_radians())
}

impl ExperimentConfig {
    /// Parses TOML, or JSON when the extension is `.json`. Does not validate.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_path(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    /// Checks every field without touching the network or drawing scenes.
    pub fn validate(&self) -> Result<()> {
        let k = self.camera.intrinsics()?;
        if k.width % 8 != 0 || k.height % 8 != 0 {
            return Err(Error::Config(format!(
                "camera: width and height must be multiples of 8, got {}x{}",
                k.width, k.height
            )));
        }
        let s = &self.scenes;
        let d = range("scenes.distance", s.distance)?;
        let y = range("scenes.yaw_deg", s.yaw_deg)?;
        PlacementSampler::new(d, radians(y), 0).map_err(|e| Error::Config(format!("scenes: {e}")))?;
        match s.source {
            SceneKind::Synthetic => {
                if s.count == 0 || s.eval_count == 0 {
                    return Err(Error::Config("scenes.count and scenes.eval_count must be positive".into()));
                }
                if !(s.baseline.is_finite() && s.baseline >= 0.0) {
                    return Err(Error::Config(format!("scenes.baseline must be non-negative, got {}", s.baseline)));
                }
                if !(s.plane_depth > 0.0 && s.plane_depth.is_finite()) {
                    return Err(Error::Config(format!("scenes.plane_depth must be positive, got {}", s.plane_depth)));
                }
                if !(s.texture_scale > 0.0 && s.texture_scale.is_finite()) {
                    return Err(Error::Config(format!(
                        "scenes.texture_scale must be positive, got {}",
                        s.texture_scale
                    )));
                }
            }
            SceneKind::StereoDir => {
                let dir = s
                    .dir
                    .as_ref()
                    .ok_or_else(|| Error::Config("scenes.dir is required for stereo_dir scenes".into()))?;
                for (field, p) in [("scenes.dir", Some(dir)), ("scenes.eval_dir", s.eval_dir.as_ref())] {
                    if let Some(p) = p {
                        if !self.resolve(p).is_dir() {
                            return Err(Error::Config(format!("{field}: {} is not a directory", p.display())));
                        }
                    }
                }
            }
        }
        if self.boards.is_empty() {
            return Err(Error::Config("boards: at least one board is required".into()));
        }
        for (i, b) in self.boards.iter().enumerate() {
            if !(b.width_m > 0.0 && b.width_m.is_finite()) {
                return Err(Error::Config(format!("boards[{i}].width_m must be positive, got {}", b.width_m)));
            }
            match (&b.image, &b.procedural) {
                (Some(img), None) => {
                    for (field, p) in [("image", Some(img)), ("mask", b.mask.as_ref())] {
                        if let Some(p) = p {
                            if !self.resolve(p).is_file() {
                                return Err(Error::Config(format!("boards[{i}].{field}: {} not found", p.display())));
                            }
                        }
                    }
                }
                (None, Some(p)) => {
                    if p.width_px == 0 || p.height_px == 0 {
                        return Err(Error::Config(format!("boards[{i}].procedural: size must be positive")));
                    }
                    if b.mask.is_some() {
                        return Err(Error::Config(format!("boards[{i}].mask: only allowed with an image")));
                    }
                }
                _ => {
                    return Err(Error::Config(format!(
                        "boards[{i}]: exactly one of image and procedural must be set"
                    )))
                }
            }
        }
        let n = &self.net;
        DepthNet::with_range(0, n.base_width, n.initial_depth, n.min_depth, n.max_depth)
            .map_err(|e| Error::Config(format!("net: {e}")))?;
        if self.train.steps == 0 {
            return Err(Error::Config("train.steps must be positive".into()));
        }
        self.train.validate()?;
        for (i, a) in self.attacks.iter().enumerate() {
            a.validate().map_err(|e| Error::Config(format!("attacks[{i}]: {e}")))?;
        }
        let e = &self.eval;
        let d = range("eval.distance", e.distance)?;
        let y = range("eval.yaw_deg", e.yaw_deg)?;
        PlacementSampler::new(d, radians(y), 0).map_err(|err| Error::Config(format!("eval: {err}")))?;
        if e.n == 0 {
            return Err(Error::Config("eval.n must be positive".into()));
        }
        Ok(())
    }

    pub fn build_boards(&self) -> Result<Vec<ObjectBoard>> {
        self.boards
            .iter()
            .map(|b| match (&b.image, &b.procedural) {
                (_, Some(p)) => Ok(ObjectBoard::procedural(p.seed, p.width_px, p.height_px, b.width_m)),
                (Some(img), None) => {
                    let image = io::read_rgb(self.resolve(img))?;
                    let (h, w) = (image.shape()[1], image.shape()[2]);
                    let mask = match &b.mask {
                        Some(m) => io::read_mask(self.resolve(m))?,
                        None => dh_tensor::Tensor::ones(&[1, h, w]),
                    };
                    ObjectBoard::new(image, mask, b.width_m, b.width_m * h as f64 / w as f64)
                }
                (None, None) => Err(Error::Config("board without image or procedural".into())),
            })
            .collect()
    }

    fn backgrounds(&self, eval: bool) -> Result<(CameraIntrinsics, Vec<BackgroundPair>)> {
        let s = &self.scenes;
        match s.source {
            SceneKind::Synthetic => {
                let k = self.camera.intrinsics()?;
                let pose = PoseTransform::stereo(s.baseline);
                let (first, n) = if eval {
                    (s.eval_background_seed, s.eval_count)
                } else {
                    (s.background_seed, s.count)
                };
                let bgs = (0..n as u64)
                    .map(|i| make_synthetic_background(first + i, &k, &pose, s.plane_depth, s.texture_scale))
                    .collect::<Result<Vec<_>>>()?;
                Ok((k, bgs))
            }
            SceneKind::StereoDir => {
                let dir = if eval { s.eval_dir.as_ref().or(s.dir.as_ref()) } else { s.dir.as_ref() };
                let dir = dir.ok_or_else(|| Error::Config("scenes.dir is required for stereo_dir scenes".into()))?;
                io::load_stereo_dir(self.resolve(dir))
            }
        }
    }

    /// Scenes for training and for attack optimization.
    pub fn train_source(&self) -> Result<SceneSource> {
        let (k, bgs) = self.backgrounds(false)?;
        let d = range("scenes.distance", self.scenes.distance)?;
        let y = radians(range("scenes.yaw_deg", self.scenes.yaw_deg)?);
        SceneSource::new(k, bgs, PlacementSampler::new(d, y, self.seed)?)
    }

    pub fn eval_source(&self) -> Result<SceneSource> {
        let (k, bgs) = self.backgrounds(true)?;
        let d = range("eval.distance", self.eval.distance)?;
        let y = radians(range("eval.yaw_deg", self.eval.yaw_deg)?);
        SceneSource::new(k, bgs, PlacementSampler::new(d, y, self.eval.seed)?)
    }

    pub fn build_net(&self) -> Result<DepthNet> {
        let n = &self.net;
        DepthNet::with_range(n.seed, n.base_width, n.initial_depth, n.min_depth, n.max_depth)
    }
}
