//! Two-view scene synthesis: stamping the object board into a background pair
//! through the projective geometry of [`crate::geometry`], plus the random
//! placement sampler used for expectation-over-transformation.

use dh_tensor::{bilinear_sample, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{board_hit, BoardPlacement, CameraIntrinsics, PoseTransform};

/// Planar image of the object with its cut-out mask and physical size.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectBoard {
    /// `[3, h, w]`, values in `[0, 1]`.
    pub image: Tensor,
    /// `[1, h, w]`, values in `{0, 1}`.
    pub mask: Tensor,
    pub width_m: f64,
    pub height_m: f64,
}

impl ObjectBoard {
    pub fn new(image: Tensor, mask: Tensor, width_m: f64, height_m: f64) -> Result<Self> {
        let b = Self {
            image,
            mask,
            width_m,
            height_m,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.image.shape();
        if s.len() != 3 || s[0] != 3 || s[1] == 0 || s[2] == 0 {
            return Err(Error::Config(format!("board image must be [3,h,w], got {s:?}")));
        }
        if self.mask.shape() != [1, s[1], s[2]] {
            return Err(Error::Config(format!(
                "board mask {:?} does not match image {s:?}",
                self.mask.shape()
            )));
        }
        if !self.image.data().iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::Config("board image values must lie in [0, 1]".into()));
        }
        if !self.mask.data().iter().all(|&v| v == 0.0 || v == 1.0) {
            return Err(Error::Config("board mask must be binary".into()));
        }
        if !(self.width_m > 0.0 && self.height_m > 0.0) {
            return Err(Error::Config("board physical size must be positive".into()));
        }
        let px_per_m_w = s[2] as f64 / self.width_m;
        let px_per_m_h = s[1] as f64 / self.height_m;
        if (px_per_m_w / px_per_m_h - 1.0).abs() > 0.01 {
            return Err(Error::Config(format!(
                "board aspect mismatch: {px_per_m_w:.3} px/m wide vs {px_per_m_h:.3} px/m high"
            )));
        }
        Ok(())
    }

    pub fn width_px(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn height_px(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn placement(&self, distance: f64, yaw: f64) -> BoardPlacement {
        BoardPlacement {
            distance,
            yaw,
            width_m: self.width_m,
            height_m: self.height_m,
            width_px: self.width_px() as f64,
            height_px: self.height_px() as f64,
        }
    }

    /// Same board with a different (e.g. perturbed) image.
    pub fn with_image(&self, image: Tensor) -> Result<Self> {
        Self::new(image, self.mask.clone(), self.width_m, self.height_m)
    }

    /// Procedural stand-in for a photographed object: a rounded body with a
    /// smooth colored texture and a few horizontal bands.
    pub fn procedural(seed: u64, width_px: usize, height_px: usize, width_m: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB0A2_D000);
        let (w, h) = (width_px, height_px);
        let base: [f64; 3] = [rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85)];
        let lum = smooth_field(&mut rng, w, h, 2);
        let bands = rng.gen_range(2..5) as f64;
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let mut image = Tensor::zeros(&[3, h, w]);
        let mut mask = Tensor::zeros(&[1, h, w]);
        for y in 0..h {
            for x in 0..w {
                let nx = (x as f64 + 0.5) / w as f64 * 2.0 - 1.0;
                let ny = (y as f64 + 0.5) / h as f64 * 2.0 - 1.0;
                if nx.powi(4) + ny.powi(4) <= 0.92 {
                    mask.set(&[0, y, x], 1.0);
                }
                let band = 0.12 * (bands * std::f64::consts::PI * ny + phase).sin();
                for (c, b) in base.iter().enumerate() {
                    let v = b + 0.22 * lum[y * w + x] + band * if c == 1 { -1.0 } else { 1.0 };
                    image.set(&[c, y, x], v.clamp(0.0, 1.0));
                }
            }
        }
        let height_m = width_m * h as f64 / w as f64;
        Self::new(image, mask, width_m, height_m).expect("procedural board is valid by construction")
    }
}

/// Background frames for the target and source cameras.
#[derive(Clone, Debug, PartialEq)]
pub struct BackgroundPair {
    pub frame_t: Tensor,
    pub frame_s: Tensor,
    /// Target-to-source camera transform.
    pub pose: PoseTransform,
    /// Ground-truth target depth, `[1, H, W]`, when known.
    pub depth_t: Option<Tensor>,
}

impl BackgroundPair {
    pub fn validate(&self) -> Result<()> {
        let s = self.frame_t.shape();
        if s.len() != 3 || s[0] != 3 || self.frame_s.shape() != s {
            return Err(Error::Config(format!(
                "background frames must share a [3,H,W] shape, got {s:?} and {:?}",
                self.frame_s.shape()
            )));
        }
        if let Some(d) = &self.depth_t {
            if d.shape() != [1, s[1], s[2]] {
                return Err(Error::Config(format!("depth {:?} does not match frames {s:?}", d.shape())));
            }
        }
        PoseTransform::new(self.pose.rotation, self.pose.translation)?;
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.frame_t.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frame_t.shape()[2]
    }
}

/// Per-pixel inverse mapping from one camera's frame onto the board.
#[derive(Clone, Debug, PartialEq)]
pub struct StampPlan {
    /// `[2, H, W]` board sampling coordinates; out of view outside the region.
    pub coords: Tensor,
    /// `[1, H, W]`, 1 where the mask-positive board covers the pixel.
    pub region: Tensor,
    /// `[1, H, W]`, board depth in this camera inside the region, 0 elsewhere.
    pub depth: Tensor,
}

impl StampPlan {
    /// Fails with a scene error when no part of the board lands in the frame.
    pub fn build(
        board: &ObjectBoard,
        place: &BoardPlacement,
        k: &CameraIntrinsics,
        view: &PoseTransform,
    ) -> Result<Self> {
        place.validate()?;
        let (h, w) = (k.height, k.width);
        let (bw, bh) = (board.width_px(), board.height_px());
        let np = h * w;
        let mut coords = vec![-1.0; 2 * np];
        let mut region = vec![0.0; np];
        let mut depth = vec![0.0; np];
        let mut footprint = 0usize;
        let mask = board.mask.data();
        for v in 0..h {
            for u in 0..w {
                let Some((ua, va, z)) = board_hit(k, view, place, u as f64, v as f64) else {
                    continue;
                };
                if !(0.0..=place.width_px).contains(&ua) || !(0.0..=place.height_px).contains(&va) {
                    continue;
                }
                footprint += 1;
                let tx = (ua.floor() as usize).min(bw - 1);
                let ty = (va.floor() as usize).min(bh - 1);
                if mask[ty * bw + tx] < 0.5 {
                    continue;
                }
                let p = v * w + u;
                // Board texel i has its center at board coordinate i + 0.5.
                coords[p] = (ua - 0.5).clamp(0.0, (bw - 1) as f64);
                coords[np + p] = (va - 0.5).clamp(0.0, (bh - 1) as f64);
                region[p] = 1.0;
                depth[p] = z;
            }
        }
        if footprint == 0 {
            return Err(Error::Scene(format!("board at {place:?} does not project into the frame")));
        }
        Ok(Self {
            coords: Tensor::new(vec![2, h, w], coords)?,
            region: Tensor::new(vec![1, h, w], region)?,
            depth: Tensor::new(vec![1, h, w], depth)?,
        })
    }

    pub fn region_pixels(&self) -> usize {
        self.region.data().iter().filter(|&&m| m > 0.5).count()
    }

    /// Stamp `board_image` into `frame` without recording gradients.
    pub fn apply(&self, board_image: &Tensor, frame: &Tensor) -> Result<Tensor> {
        let (sampled, _) = bilinear_sample(board_image, &self.coords)?;
        let np = self.region.numel();
        let mut out = frame.clone();
        let m = self.region.data();
        for (c, chunk) in out.data_mut().chunks_mut(np).enumerate() {
            let src = &sampled.data()[c * np..][..np];
            for p in 0..np {
                if m[p] > 0.5 {
                    chunk[p] = src[p];
                }
            }
        }
        Ok(out)
    }

    /// Differentiable stamping: `frame * (1 - region) + sample(board) * region`.
    pub fn compose(&self, tape: &mut Tape, board_image: Var, frame: &Tensor) -> Result<Var> {
        let keep = self.region.map(|m| 1.0 - m);
        let masked_frame = frame.zip_map(&broadcast_channels(&keep, frame.shape()[0]), |f, k| f * k)?;
        let coords = tape.constant(self.coords.clone());
        let (sampled, _) = tape.bilinear_sample(board_image, coords)?;
        let region = tape.constant(self.region.clone());
        let inside = tape.mul(sampled, region)?;
        let background = tape.constant(masked_frame);
        Ok(tape.add(background, inside)?)
    }
}

fn broadcast_channels(plane: &Tensor, channels: usize) -> Tensor {
    let mut data = Vec::with_capacity(plane.numel() * channels);
    for _ in 0..channels {
        data.extend_from_slice(plane.data());
    }
    let s = plane.shape();
    Tensor::new(vec![channels, s[1], s[2]], data).unwrap()
}

fn check_frame(bg: &Tensor, k: &CameraIntrinsics) -> Result<()> {
    if bg.shape() != [3, k.height, k.width] {
        return Err(Error::Config(format!(
            "frame {:?} does not match intrinsics {}x{}",
            bg.shape(),
            k.width,
            k.height
        )));
    }
    Ok(())
}

/// Target view: the board stamped into `frame_t`. Returns the image and the
/// region mask.
pub fn stamp_target(
    board: &ObjectBoard,
    bg: &BackgroundPair,
    place: &BoardPlacement,
    k: &CameraIntrinsics,
) -> Result<(Tensor, Tensor)> {
    check_frame(&bg.frame_t, k)?;
    let plan = StampPlan::build(board, place, k, &PoseTransform::identity())?;
    Ok((plan.apply(&board.image, &bg.frame_t)?, plan.region))
}

/// Source view: board points are carried through the background pose before
/// projection onto `frame_s`.
pub fn stamp_source(
    board: &ObjectBoard,
    bg: &BackgroundPair,
    place: &BoardPlacement,
    k: &CameraIntrinsics,
) -> Result<(Tensor, Tensor)> {
    check_frame(&bg.frame_s, k)?;
    let plan = StampPlan::build(board, place, k, &bg.pose)?;
    Ok((plan.apply(&board.image, &bg.frame_s)?, plan.region))
}

/// A synthesized training/evaluation pair with everything needed downstream.
#[derive(Clone, Debug)]
pub struct ScenePair {
    pub target: Tensor,
    pub source: Tensor,
    pub target_plan: StampPlan,
    pub source_plan: StampPlan,
    /// Ground-truth target depth including the board, when the background has one.
    pub target_depth: Option<Tensor>,
    pub placement: BoardPlacement,
    pub pose: PoseTransform,
}

impl ScenePair {
    pub fn synthesize(
        board: &ObjectBoard,
        bg: &BackgroundPair,
        place: &BoardPlacement,
        k: &CameraIntrinsics,
    ) -> Result<Self> {
        check_frame(&bg.frame_t, k)?;
        check_frame(&bg.frame_s, k)?;
        let target_plan = StampPlan::build(board, place, k, &PoseTransform::identity())?;
        let source_plan = StampPlan::build(board, place, k, &bg.pose)?;
        let target = target_plan.apply(&board.image, &bg.frame_t)?;
        let source = source_plan.apply(&board.image, &bg.frame_s)?;
        let target_depth = bg.depth_t.as_ref().map(|d| {
            d.zip_map(&target_plan.depth, |bgd, bd| if bd > 0.0 { bd } else { bgd })
                .expect("shapes checked")
        });
        Ok(Self {
            target,
            source,
            target_plan,
            source_plan,
            target_depth,
            placement: *place,
            pose: bg.pose,
        })
    }

    /// The target view with a different board image (e.g. adversarial).
    pub fn target_with(&self, board_image: &Tensor, bg: &BackgroundPair) -> Result<Tensor> {
        self.target_plan.apply(board_image, &bg.frame_t)
    }
}

/// Uniform random draws of board distance and yaw.
#[derive(Clone, Debug)]
pub struct PlacementSampler {
    distance: (f64, f64),
    yaw: (f64, f64),
    rng: ChaCha8Rng,
}

impl PlacementSampler {
    /// `yaw` is in radians.
    pub fn new(distance: (f64, f64), yaw: (f64, f64), seed: u64) -> Result<Self> {
        if !(distance.0 > 0.0 && distance.0 <= distance.1) {
            return Err(Error::Config(format!("invalid distance range {distance:?}")));
        }
        if !(yaw.0 <= yaw.1 && yaw.0 > -std::f64::consts::FRAC_PI_2 && yaw.1 < std::f64::consts::FRAC_PI_2) {
            return Err(Error::Config(format!("invalid yaw range {yaw:?}")));
        }
        Ok(Self {
            distance,
            yaw,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn distance_range(&self) -> (f64, f64) {
        self.distance
    }

    pub fn yaw_range(&self) -> (f64, f64) {
        self.yaw
    }

    fn uniform(&mut self, (lo, hi): (f64, f64)) -> f64 {
        if lo == hi {
            lo
        } else {
            self.rng.gen_range(lo..hi)
        }
    }

    /// Draw `(distance, yaw)`.
    pub fn draw(&mut self) -> (f64, f64) {
        let z = self.uniform(self.distance);
        let a = self.uniform(self.yaw);
        (z, a)
    }

    pub fn pick(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }
}

/// One expectation-over-transformation draw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneDraw {
    pub board: usize,
    pub background: usize,
    pub placement: BoardPlacement,
}

/// Uniformly pick a board and a background, then a placement.
pub fn sample_scene(
    sampler: &mut PlacementSampler,
    boards: &[ObjectBoard],
    backgrounds: &[BackgroundPair],
) -> Result<SceneDraw> {
    if boards.is_empty() || backgrounds.is_empty() {
        return Err(Error::Config("scene sampling needs at least one board and one background".into()));
    }
    let board = sampler.pick(boards.len());
    let background = sampler.pick(backgrounds.len());
    let (z, a) = sampler.draw();
    Ok(SceneDraw {
        board,
        background,
        placement: boards[board].placement(z, a),
    })
}

/// Camera intrinsics, a background pool and a placement sampler: everything
/// needed to draw scenes around a given board.
#[derive(Clone, Debug)]
pub struct SceneSource {
    pub intrinsics: CameraIntrinsics,
    pub backgrounds: Vec<BackgroundPair>,
    pub sampler: PlacementSampler,
}

impl SceneSource {
    pub fn new(intrinsics: CameraIntrinsics, backgrounds: Vec<BackgroundPair>, sampler: PlacementSampler) -> Result<Self> {
        if backgrounds.is_empty() {
            return Err(Error::Config("scene source has no backgrounds".into()));
        }
        for bg in &backgrounds {
            bg.validate()?;
            check_frame(&bg.frame_t, &intrinsics)?;
        }
        Ok(Self {
            intrinsics,
            backgrounds,
            sampler,
        })
    }

    /// Draw a background and placement for `board` and synthesize the pair.
    pub fn draw(&mut self, board: &ObjectBoard) -> Result<(usize, ScenePair)> {
        let draw = sample_scene(&mut self.sampler, std::slice::from_ref(board), &self.backgrounds)?;
        let pair = ScenePair::synthesize(board, &self.backgrounds[draw.background], &draw.placement, &self.intrinsics)?;
        Ok((draw.background, pair))
    }

    pub fn reseeded(&self, seed: u64) -> Self {
        let mut s = self.clone();
        s.sampler.rng = ChaCha8Rng::seed_from_u64(seed);
        s
    }
}

/// Smoothed uniform noise normalised to zero mean and unit variance.
fn smooth_field(rng: &mut ChaCha8Rng, w: usize, h: usize, radius: usize) -> Vec<f64> {
    let mut f: Vec<f64> = (0..w * h).map(|_| rng.gen_range(-1.0..1.0)).collect();
    for _ in 0..2 {
        f = box_blur(&f, w, h, radius);
    }
    let n = f.len() as f64;
    let mean = f.iter().sum::<f64>() / n;
    let var = f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-12);
    f.iter().map(|v| (v - mean) / sd).collect()
}

fn box_blur(src: &[f64], w: usize, h: usize, r: usize) -> Vec<f64> {
    let clampi = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let r = r as isize;
    let norm = (2 * r + 1) as f64;
    let mut tmp = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (-r..=r).map(|d| src[y * w + clampi(x as isize + d, w)]).sum::<f64>() / norm;
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (-r..=r).map(|d| tmp[clampi(y as isize + d, h) * w + x]).sum::<f64>() / norm;
        }
    }
    out
}

/// Target-frame pixel seen by source pixel `(u, v)` when the scene is the
/// fronto-parallel plane `z_t = plane_depth`.
fn source_to_target_on_plane(
    k: &CameraIntrinsics,
    pose: &PoseTransform,
    plane_depth: f64,
    u: f64,
    v: f64,
) -> Option<(f64, f64)> {
    let inv = pose.inverse();
    let ray = nalgebra::Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
    let dir = inv.rotation * ray;
    if dir.z.abs() < 1e-12 {
        return None;
    }
    let s = (plane_depth - inv.translation.z) / dir.z;
    if s <= 0.0 {
        return None;
    }
    let p = dir * s + inv.translation;
    Some((k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy))
}

/// Procedurally textured fronto-parallel plane seen by both cameras.
///
/// `frame_t` samples a smoothed random field at integer pixels; `frame_s` is
/// the same field sampled where each source pixel's ray meets the plane.
/// `texture_scale` is the blur radius of the field in pixels.
pub fn make_synthetic_background(
    seed: u64,
    k: &CameraIntrinsics,
    pose: &PoseTransform,
    plane_depth: f64,
    texture_scale: f64,
) -> Result<BackgroundPair> {
    k.validate()?;
    if !(plane_depth > 0.0) {
        return Err(Error::Config(format!("plane depth must be positive, got {plane_depth}")));
    }
    let (h, w) = (k.height, k.width);
    let mut src_coords = vec![(0.0, 0.0); h * w];
    let (mut lo_x, mut lo_y, mut hi_x, mut hi_y) = (0.0f64, 0.0f64, (w - 1) as f64, (h - 1) as f64);
    for v in 0..h {
        for u in 0..w {
            let (x, y) = source_to_target_on_plane(k, pose, plane_depth, u as f64, v as f64).ok_or_else(|| {
                Error::Geometry("source camera does not see the background plane".into())
            })?;
            lo_x = lo_x.min(x);
            lo_y = lo_y.min(y);
            hi_x = hi_x.max(x);
            hi_y = hi_y.max(y);
            src_coords[v * w + u] = (x, y);
        }
    }
    const MAX_CANVAS: f64 = 4096.0;
    if hi_x - lo_x > MAX_CANVAS || hi_y - lo_y > MAX_CANVAS {
        return Err(Error::Geometry("background plane too oblique for the source camera".into()));
    }
    let ox = lo_x.floor() as isize - 2;
    let oy = lo_y.floor() as isize - 2;
    let cw = (hi_x.ceil() as isize - ox + 3) as usize;
    let ch = (hi_y.ceil() as isize - oy + 3) as usize;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radius = texture_scale.round().max(1.0) as usize;
    let lum = smooth_field(&mut rng, cw, ch, radius);
    let mut canvas = Tensor::zeros(&[3, ch, cw]);
    let tint: [f64; 3] = [rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)];
    for c in 0..3 {
        let chroma = smooth_field(&mut rng, cw, ch, radius);
        let plane = &mut canvas.data_mut()[c * ch * cw..][..ch * cw];
        for (i, v) in plane.iter_mut().enumerate() {
            *v = (0.5 + tint[c] + 0.2 * lum[i] + 0.06 * chroma[i]).clamp(0.0, 1.0);
        }
    }

    let mut frame_t = Tensor::zeros(&[3, h, w]);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let cy = (y as isize - oy) as usize;
                let cx = (x as isize - ox) as usize;
                frame_t.set(&[c, y, x], canvas.at(&[c, cy, cx]));
            }
        }
    }
    let frame_s = if pose.is_identity() {
        frame_t.clone()
    } else {
        let mut coords = Tensor::zeros(&[2, h, w]);
        for (p, &(x, y)) in src_coords.iter().enumerate() {
            coords.data_mut()[p] = x - ox as f64;
            coords.data_mut()[h * w + p] = y - oy as f64;
        }
        bilinear_sample(&canvas, &coords)?.0
    };
    Ok(BackgroundPair {
        frame_t,
        frame_s,
        pose: *pose,
        depth_t: Some(Tensor::full(&[1, h, w], plane_depth)),
    })
}
