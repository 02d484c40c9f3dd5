//! Hardening loop: reconstruct the target view from the source view through
//! the depth predicted on the (perturbed) target view and minimize the
//! photometric error, or regress onto a frozen reference net's benign depth.

use std::io::Write;
use std::path::Path;

use dh_tensor::{Adam, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::adversary::{AttackConfig, AttackKind, AttackScene, Attacker};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, PoseTransform};
use crate::model::{DepthMap, DepthNet};
use crate::scene::{ObjectBoard, ScenePair, SceneSource};

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// `I_{s->t}` and the pixels where it is defined.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionResult {
    pub image: Tensor,
    pub valid_mask: Tensor,
}

/// Differentiable inverse warp of `source` (`[3,H,W]`) into the target view
/// using target depth `depth` (`[1,H,W]` var). Returns the warped image var
/// and the validity mask (in view and in front of the source camera).
pub fn reconstruct_on(
    tape: &mut Tape,
    source: Var,
    depth: Var,
    pose: &PoseTransform,
    k: &CameraIntrinsics,
) -> Result<(Var, Tensor)> {
    let ds = tape.shape(depth).to_vec();
    let ss = tape.shape(source).to_vec();
    if ds.len() != 3 || ds[0] != 1 || ss.len() != 3 || ss[1..] != ds[1..] {
        return Err(Error::Contract(format!("reconstruct got source {ss:?} and depth {ds:?}")));
    }
    let (h, w) = (ds[1], ds[2]);
    let np = h * w;
    // Rotated unit-depth rays: q = depth * (R ray) + t.
    let mut rays = [vec![0.0; np], vec![0.0; np], vec![0.0; np]];
    for v in 0..h {
        for u in 0..w {
            let ray = nalgebra::Vector3::new((u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0);
            let r = pose.rotation * ray;
            for a in 0..3 {
                rays[a][v * w + u] = r[a];
            }
        }
    }
    let mut q = Vec::with_capacity(3);
    for (a, ray) in rays.into_iter().enumerate() {
        let c = tape.constant(Tensor::new(vec![1, h, w], ray)?);
        let p = tape.mul(c, depth)?;
        q.push(tape.add_scalar(p, pose.translation[a]));
    }
    let x = tape.div(q[0], q[2])?;
    let y = tape.div(q[1], q[2])?;
    let x = tape.scale(x, k.fx);
    let x = tape.add_scalar(x, k.cx);
    let y = tape.scale(y, k.fy);
    let y = tape.add_scalar(y, k.cy);
    let coords = tape.concat(&[x, y], 0)?;
    let (warped, mut mask) = tape.bilinear_sample(source, coords)?;
    let z = tape.value(q[2]).clone();
    for (m, &zv) in mask.data_mut().iter_mut().zip(z.data()) {
        if !(zv > 0.0) {
            *m = 0.0;
        }
    }
    Ok((warped, mask))
}

pub fn reconstruct(
    source: &Tensor,
    depth: &DepthMap,
    pose: &PoseTransform,
    k: &CameraIntrinsics,
) -> Result<ReconstructionResult> {
    let mut tape = Tape::new();
    let s = tape.constant(source.clone());
    let d = tape.constant(depth.values.clone());
    let (img, valid_mask) = reconstruct_on(&mut tape, s, d, pose, k)?;
    Ok(ReconstructionResult {
        image: tape.value(img).clone(),
        valid_mask,
    })
}

/// Per-pixel, per-channel `alpha/2 * (1 - SSIM) + (1 - alpha) * |a - b|` with
/// 3x3 reflect-padded SSIM windows.
fn photometric_map(tape: &mut Tape, a: Var, b: Var, alpha: f64) -> Result<Var> {
    let mu_a = tape.avg_pool3x3(a)?;
    let mu_b = tape.avg_pool3x3(b)?;
    let aa = tape.square(a);
    let bb = tape.square(b);
    let ab = tape.mul(a, b)?;
    let e_aa = tape.avg_pool3x3(aa)?;
    let e_bb = tape.avg_pool3x3(bb)?;
    let e_ab = tape.avg_pool3x3(ab)?;
    let mu_aa = tape.square(mu_a);
    let mu_bb = tape.square(mu_b);
    let mu_ab = tape.mul(mu_a, mu_b)?;
    let sig_a = tape.sub(e_aa, mu_aa)?;
    let sig_b = tape.sub(e_bb, mu_bb)?;
    let sig_ab = tape.sub(e_ab, mu_ab)?;

    let n1 = tape.scale(mu_ab, 2.0);
    let n1 = tape.add_scalar(n1, SSIM_C1);
    let n2 = tape.scale(sig_ab, 2.0);
    let n2 = tape.add_scalar(n2, SSIM_C2);
    let num = tape.mul(n1, n2)?;
    let d1 = tape.add(mu_aa, mu_bb)?;
    let d1 = tape.add_scalar(d1, SSIM_C1);
    let d2 = tape.add(sig_a, sig_b)?;
    let d2 = tape.add_scalar(d2, SSIM_C2);
    let den = tape.mul(d1, d2)?;
    let ssim = tape.div(num, den)?;

    let dssim = tape.scale(ssim, -alpha / 2.0);
    let dssim = tape.add_scalar(dssim, alpha / 2.0);
    let diff = tape.sub(a, b)?;
    let l1 = tape.abs(diff);
    let l1 = tape.scale(l1, 1.0 - alpha);
    Ok(tape.add(dssim, l1)?)
}

/// Photometric error averaged over channels and then over pixels where
/// `mask` is set. `mask` is `[1,H,W]`.
pub fn photometric_error_on(tape: &mut Tape, a: Var, b: Var, mask: &Tensor, alpha: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("photometric alpha must be in [0, 1], got {alpha}")));
    }
    let sa = tape.shape(a).to_vec();
    if sa != tape.shape(b) || sa.len() != 3 || mask.shape() != [1, sa[1], sa[2]] {
        return Err(Error::Contract(format!(
            "photometric error on {sa:?}, {:?} with mask {:?}",
            tape.shape(b),
            mask.shape()
        )));
    }
    let count = mask.data().iter().filter(|&&m| m > 0.5).count();
    if count == 0 {
        return Err(Error::Contract("photometric error over an empty mask".into()));
    }
    let binary = mask.map(|m| if m > 0.5 { 1.0 } else { 0.0 });
    let map = photometric_map(tape, a, b, alpha)?;
    let m = tape.constant(binary);
    let masked = tape.mul(map, m)?;
    let total = tape.sum(masked);
    Ok(tape.scale(total, 1.0 / (count * sa[0]) as f64))
}

pub fn photometric_error(a: &Tensor, b: &Tensor, mask: &Tensor, alpha: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(a.clone());
    let b = tape.constant(b.clone());
    let e = photometric_error_on(&mut tape, a, b, mask, alpha)?;
    Ok(tape.value(e).item())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Selfsup,
    SupPseudo,
    Benign,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Selfsup => "selfsup",
            TrainMode::SupPseudo => "sup_pseudo",
            TrainMode::Benign => "benign",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub steps: usize,
    /// Scenes per optimizer step.
    pub batch_size: usize,
    pub lr: f64,
    /// Inner attack; `attack.steps` is the number of attack updates per
    /// training step.
    pub attack: AttackConfig,
    /// Keep each board's perturbation across training steps instead of
    /// restarting the inner attack from zero.
    pub warm_start: bool,
    /// Fraction of each batch trained on the benign target view; the rest
    /// is attacked. Rounded to a whole number of scenes.
    pub benign_fraction: f64,
    pub pe_alpha: f64,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Selfsup,
            steps: 2000,
            batch_size: 4,
            lr: 3e-4,
            attack: AttackConfig {
                steps: 5,
                ..AttackConfig::soft_l0(0.1)
            },
            warm_start: true,
            benign_fraction: 0.75,
            pe_alpha: 0.85,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.pe_alpha) {
            return Err(Error::Config(format!("train.pe_alpha must be in [0, 1], got {}", self.pe_alpha)));
        }
        if !(0.0..=1.0).contains(&self.benign_fraction) {
            return Err(Error::Config(format!(
                "train.benign_fraction must be in [0, 1], got {}",
                self.benign_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if self.mode != TrainMode::Benign {
            self.attack.validate()?;
        }
        Ok(())
    }

    /// Number of attacked scenes per batch.
    fn attacked_per_batch(&self) -> usize {
        if self.mode == TrainMode::Benign || self.attack.kind == AttackKind::None {
            return 0;
        }
        let benign = (self.batch_size as f64 * self.benign_fraction).round() as usize;
        self.batch_size - benign.min(self.batch_size)
    }
}

/// One JSON-lines log record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub mode: TrainMode,
    pub loss: f64,
    /// Photometric error of the benign target view (selfsup and benign modes).
    pub pe: Option<f64>,
    pub attack_adv_loss: Option<f64>,
}

/// A training context owning the net being hardened.
pub struct Trainer {
    pub net: DepthNet,
    cfg: TrainConfig,
    adam: Adam,
    source: SceneSource,
    reference: Option<DepthNet>,
    attackers: Vec<Option<Attacker>>,
    step: usize,
}

impl Trainer {
    /// `reference` is the frozen pseudo-label net for `sup_pseudo` and
    /// defaults to a copy of `net`.
    pub fn new(
        net: DepthNet,
        boards: usize,
        source: &SceneSource,
        cfg: &TrainConfig,
        reference: Option<DepthNet>,
    ) -> Result<Self> {
        cfg.validate()?;
        if boards == 0 {
            return Err(Error::Config("training needs at least one object board".into()));
        }
        if source.backgrounds.is_empty() {
            return Err(Error::Config("training needs at least one background scene".into()));
        }
        let reference = (cfg.mode == TrainMode::SupPseudo).then(|| reference.unwrap_or_else(|| net.clone()));
        Ok(Self {
            net,
            adam: Adam::new(cfg.lr),
            source: source.reseeded(cfg.seed),
            cfg: cfg.clone(),
            reference,
            attackers: vec![None; boards],
            step: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Perturbed board image for the inner attack on `pair`.
    fn adversarial_board(&mut self, idx: usize, board: &ObjectBoard, pair: &ScenePair, bg: usize) -> Result<(Tensor, f64)> {
        let slot = &mut self.attackers[idx];
        if slot.is_none() || !self.cfg.warm_start {
            let mut acfg = self.cfg.attack.clone();
            acfg.seed = acfg.seed.wrapping_add(self.step as u64);
            *slot = Some(Attacker::new(board, &acfg)?);
        }
        let attacker = slot.as_mut().expect("set above");
        let scene = [AttackScene {
            plan: pair.target_plan.clone(),
            frame: self.source.backgrounds[bg].frame_t.clone(),
        }];
        let mut adv = f64::NAN;
        if pair.target_plan.region_pixels() > 0 {
            let n = if attacker.is_optimizing() { self.cfg.attack.steps.max(1) } else { 1 };
            for _ in 0..n {
                adv = attacker.step(&self.net, &scene)?.adv_loss;
            }
        }
        Ok((attacker.current_board_image()?, adv))
    }

    /// One optimizer step on a fresh batch of scenes.
    pub fn step(&mut self, boards: &[ObjectBoard]) -> Result<StepRecord> {
        if boards.len() != self.attackers.len() {
            return Err(Error::Contract("board pool changed during training".into()));
        }
        let mut tape = Tape::new();
        let vars = self.net.bind(&mut tape, true);
        let mut losses = Vec::new();
        let mut pe_sum = 0.0;
        let mut adv_sum = 0.0;
        let mut adv_n = 0usize;
        let attacked_n = self.cfg.attacked_per_batch();
        for b in 0..self.cfg.batch_size {
            let idx = self.source.sampler.pick(boards.len());
            let board = &boards[idx];
            let (bg, pair) = self.source.draw(board)?;
            let attacked = if b < attacked_n {
                let (image, adv) = self.adversarial_board(idx, board, &pair, bg)?;
                if adv.is_finite() {
                    adv_sum += adv;
                    adv_n += 1;
                }
                pair.target_with(&image, &self.source.backgrounds[bg])?
            } else {
                pair.target.clone()
            };
            let x = tape.constant(attacked);
            let depth = self.net.forward_on(&mut tape, &vars, x)?;
            let loss = match self.cfg.mode {
                TrainMode::Selfsup | TrainMode::Benign => {
                    let src = tape.constant(pair.source.clone());
                    let (rec, valid) = reconstruct_on(&mut tape, src, depth, &pair.pose, &self.source.intrinsics)?;
                    let tgt = tape.constant(pair.target.clone());
                    let pe = photometric_error_on(&mut tape, tgt, rec, &valid, self.cfg.pe_alpha)?;
                    pe_sum += tape.value(pe).item();
                    pe
                }
                TrainMode::SupPseudo => {
                    let reference = self.reference.as_ref().expect("set for sup_pseudo");
                    let label = reference.forward(&pair.target)?.values;
                    let label = tape.constant(label);
                    let diff = tape.sub(depth, label)?;
                    let sq = tape.square(diff);
                    tape.mean(sq)
                }
            };
            losses.push(loss);
        }
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = tape.add(total, l)?;
        }
        let total = tape.scale(total, 1.0 / losses.len() as f64);
        let loss = tape.value(total).item();
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("training loss is {loss} at step {}", self.step)));
        }
        let grads = tape.backward(total)?;
        let g: Vec<Option<&Tensor>> = vars.vars().iter().map(|&v| grads.get(v)).collect();
        let mut params: Vec<&mut Tensor> = self.net.params_mut().iter_mut().collect();
        self.adam.step(&mut params, &g)?;
        if !self.net.params().iter().all(Tensor::is_finite) {
            return Err(Error::Numeric(format!("non-finite parameters after step {}", self.step)));
        }
        let record = StepRecord {
            step: self.step,
            mode: self.cfg.mode,
            loss,
            pe: (self.cfg.mode != TrainMode::SupPseudo).then(|| pe_sum / losses.len() as f64),
            attack_adv_loss: (adv_n > 0).then(|| adv_sum / adv_n as f64),
        };
        self.step += 1;
        Ok(record)
    }
}

/// Train `net` for `cfg.steps` steps. Log records are written as JSON lines
/// to `log`; checkpoints go to `checkpoint_dir` as `step_XXXXXX.dhck` and
/// `final.dhck`.
pub fn harden(
    net: &DepthNet,
    boards: &[ObjectBoard],
    source: &SceneSource,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
    checkpoint_dir: Option<&Path>,
) -> Result<(DepthNet, Vec<StepRecord>)> {
    let mut trainer = Trainer::new(net.clone(), boards.len(), source, cfg, None)?;
    let mut records = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let r = trainer.step(boards)?;
        if let Some(w) = log.as_mut() {
            serde_json::to_writer(&mut **w, &r).map_err(|e| Error::Io(e.into()))?;
            w.write_all(b"\n")?;
        }
        records.push(r);
        if let Some(dir) = checkpoint_dir {
            let s = trainer.steps_done();
            if cfg.checkpoint_every > 0 && s % cfg.checkpoint_every == 0 && s < cfg.steps {
                trainer.net.save(dir.join(format!("step_{s:06}.dhck")))?;
            }
        }
    }
    if let Some(dir) = checkpoint_dir {
        trainer.net.save(dir.join("final.dhck"))?;
    }
    Ok((trainer.net, records))
}
