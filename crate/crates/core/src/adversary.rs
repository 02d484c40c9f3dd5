//! Perturbations of the object board that push its predicted depth away.
//!
//! All attacks minimize the mean of `1/D^2` over the board's region in the
//! target view, averaged over freshly drawn scenes (expectation over
//! transformation). The soft-L0 attack parameterizes the perturbation as
//! `maxp * (clip01(b_p) - clip01(b_n))` with a tanh-tail sparsity penalty and
//! certifies the pixel budget by a final hard projection.

use dh_tensor::{Adam, Tape, Tensor, Var};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DepthNet, NetVars};
use crate::scene::{ObjectBoard, SceneSource, StampPlan};

/// A channel-max change above this counts as a perturbed pixel.
pub const PERTURBED_THRESHOLD: f64 = 1.0 / 255.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    SoftL0,
    PgdLinf,
    Patch,
    /// Same-budget salt-and-pepper noise on random pixels; a non-adversarial
    /// reference for how much any sparse change moves the prediction.
    RandomL0,
    None,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::SoftL0 => "soft_l0",
            AttackKind::PgdLinf => "pgd_linf",
            AttackKind::Patch => "patch",
            AttackKind::RandomL0 => "random_l0",
            AttackKind::None => "none",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// Pixel fraction (soft-L0, random-L0), L-inf bound (PGD) or patch area fraction.
    pub epsilon: f64,
    pub steps: usize,
    /// Adam learning rate for soft-L0 and patch; PGD uses `2.5 * epsilon / 10`
    /// unless this is set explicitly via `pgd_step`.
    pub lr: f64,
    pub pgd_step: Option<f64>,
    pub eot_samples: usize,
    pub seed: u64,
    pub gamma: f64,
    pub maxp: f64,
    pub lambda_pix: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            kind: AttackKind::SoftL0,
            epsilon: 0.1,
            steps: 100,
            lr: 0.05,
            pgd_step: None,
            eot_samples: 1,
            seed: 0,
            gamma: 0.05,
            maxp: 1.0,
            lambda_pix: 0.01,
        }
    }
}

impl AttackConfig {
    pub fn soft_l0(epsilon: f64) -> Self {
        Self {
            epsilon,
            ..Self::default()
        }
    }

    pub fn pgd_linf(epsilon: f64) -> Self {
        Self {
            kind: AttackKind::PgdLinf,
            epsilon,
            steps: 10,
            ..Self::default()
        }
    }

    pub fn patch(area: f64) -> Self {
        Self {
            kind: AttackKind::Patch,
            epsilon: area,
            ..Self::default()
        }
    }

    pub fn random_l0(epsilon: f64) -> Self {
        Self {
            kind: AttackKind::RandomL0,
            epsilon,
            steps: 0,
            ..Self::default()
        }
    }

    pub fn none() -> Self {
        Self {
            kind: AttackKind::None,
            epsilon: 0.0,
            steps: 0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match self.kind {
            AttackKind::None => return Ok(()),
            AttackKind::PgdLinf if self.epsilon == 0.0 => {}
            AttackKind::SoftL0 | AttackKind::RandomL0 | AttackKind::Patch
                if !(self.epsilon > 0.0 && self.epsilon <= 1.0) =>
            {
                return bad(format!("attack.epsilon must be in (0, 1], got {}", self.epsilon));
            }
            _ if !(self.epsilon > 0.0 && self.epsilon.is_finite()) => {
                return bad(format!("attack.epsilon must be positive, got {}", self.epsilon));
            }
            _ => {}
        }
        if self.eot_samples == 0 {
            return bad("attack.eot_samples must be at least 1".into());
        }
        if !(self.lr > 0.0) || !(self.gamma > 0.0) || !(self.maxp > 0.0) || !(self.lambda_pix >= 0.0) {
            return bad(format!(
                "attack lr, gamma and maxp must be positive and lambda_pix nonnegative: {self:?}"
            ));
        }
        if let Some(s) = self.pgd_step {
            if !(s > 0.0) {
                return bad(format!("attack.pgd_step must be positive, got {s}"));
            }
        }
        Ok(())
    }

    pub fn pgd_step_size(&self) -> f64 {
        self.pgd_step.unwrap_or(2.5 * self.epsilon / 10.0)
    }
}

/// Positive and negative perturbation components of the soft-L0 attack.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationState {
    pub b_p: Tensor,
    pub b_n: Tensor,
    pub maxp: f64,
    pub gamma: f64,
    pub lambda_pix: f64,
}

impl PerturbationState {
    /// Both components at zero: `delta = 0` and the gradient of `delta` is live.
    pub fn new(h: usize, w: usize, maxp: f64, gamma: f64, lambda_pix: f64) -> Self {
        Self {
            b_p: Tensor::zeros(&[3, h, w]),
            b_n: Tensor::zeros(&[3, h, w]),
            maxp,
            gamma,
            lambda_pix,
        }
    }

    pub fn materialize_delta(&self) -> Tensor {
        let clip = |v: f64| v.clamp(0.0, 1.0);
        self.b_p
            .zip_map(&self.b_n, |p, n| self.maxp * (clip(p) - clip(n)))
            .expect("components share a shape")
    }

    /// Normalized sparsity penalty: per-pixel channel max of `(tanh(b/gamma)+1)/2`
    /// summed over both components and divided by `h*w`.
    pub fn pixel_norm(&self) -> f64 {
        let (h, w) = (self.b_p.shape()[1], self.b_p.shape()[2]);
        let np = h * w;
        let branch = |b: &Tensor| -> f64 {
            (0..np)
                .map(|p| {
                    (0..3)
                        .map(|c| 0.5 * ((b.data()[c * np + p] / self.gamma).tanh() + 1.0))
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .sum()
        };
        (branch(&self.b_p) + branch(&self.b_n)) / np as f64
    }
}

pub fn delta_on(tape: &mut Tape, b_p: Var, b_n: Var, maxp: f64) -> Result<Var> {
    let p = tape.clip01(b_p);
    let n = tape.clip01(b_n);
    let d = tape.sub(p, n)?;
    Ok(tape.scale(d, maxp))
}

pub fn pixel_norm_on(tape: &mut Tape, b_p: Var, b_n: Var, gamma: f64) -> Result<Var> {
    let shape = tape.shape(b_p).to_vec();
    let np = (shape[1] * shape[2]) as f64;
    let mut branch = |b: Var| -> Result<Var> {
        let t = tape.scale(b, 1.0 / gamma);
        let t = tape.tanh(t);
        let t = tape.scale(t, 0.5);
        let t = tape.add_scalar(t, 0.5);
        let m = tape.max_axis0(t)?;
        Ok(tape.sum(m))
    };
    let a = branch(b_p)?;
    let b = branch(b_n)?;
    let s = tape.add(a, b)?;
    Ok(tape.scale(s, 1.0 / np))
}

/// Channel-max `|delta|` per pixel of a `[C, h, w]` tensor.
pub fn pixel_magnitudes(delta: &Tensor) -> Vec<f64> {
    let s = delta.shape();
    let np = s[1] * s[2];
    (0..np)
        .map(|p| (0..s[0]).map(|c| delta.data()[c * np + p].abs()).fold(0.0, f64::max))
        .collect()
}

/// Keep the `floor(epsilon*h*w)` pixels with the largest channel-max `|delta|`
/// (earlier row-major index wins ties) and zero the rest.
pub fn hard_l0_project(delta: &Tensor, epsilon: f64) -> Result<Tensor> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::Contract(format!("L0 budget must be in (0, 1], got {epsilon}")));
    }
    let s = delta.shape();
    if s.len() != 3 {
        return Err(Error::Contract(format!("perturbation must be [C,h,w], got {s:?}")));
    }
    let np = s[1] * s[2];
    let k = (epsilon * np as f64).floor() as usize;
    let mag = pixel_magnitudes(delta);
    let mut order: Vec<usize> = (0..np).collect();
    order.sort_by(|&a, &b| mag[b].total_cmp(&mag[a]).then(a.cmp(&b)));
    let mut keep = vec![false; np];
    for &p in &order[..k] {
        keep[p] = true;
    }
    let mut out = delta.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if !keep[i % np] {
            *v = 0.0;
        }
    }
    Ok(out)
}

/// `clip01(image + delta)`.
pub fn apply_delta(image: &Tensor, delta: &Tensor) -> Result<Tensor> {
    Ok(image.zip_map(delta, |a, d| (a + d).clamp(0.0, 1.0))?)
}

/// Fraction of pixels whose channel-max change exceeds [`PERTURBED_THRESHOLD`].
pub fn perturbed_fraction(original: &Tensor, perturbed: &Tensor) -> Result<f64> {
    let diff = perturbed.zip_map(original, |a, b| a - b)?;
    let mag = pixel_magnitudes(&diff);
    Ok(mag.iter().filter(|&&m| m > PERTURBED_THRESHOLD).count() as f64 / mag.len() as f64)
}

/// Centered rectangle with the board's aspect ratio covering about
/// `area * h * w` pixels; `[1, h, w]` with ones inside.
pub fn patch_mask(h: usize, w: usize, area: f64) -> Tensor {
    let ph = ((h as f64 * area.sqrt()).round() as usize).clamp(1, h);
    let pw = ((w as f64 * area.sqrt()).round() as usize).clamp(1, w);
    let (y0, x0) = ((h - ph) / 2, (w - pw) / 2);
    Tensor::from_fn(&[1, h, w], |i| {
        let (y, x) = (i / w, i % w);
        if (y0..y0 + ph).contains(&y) && (x0..x0 + pw).contains(&x) {
            1.0
        } else {
            0.0
        }
    })
}

/// One stamped target view the attack optimizes against.
#[derive(Clone, Debug)]
pub struct AttackScene {
    pub plan: StampPlan,
    pub frame: Tensor,
}

/// Mean of `1/D^2` over the board region of each scene, averaged over scenes.
/// Scenes with an empty region are skipped; `None` if all are empty.
pub fn adversarial_objective(
    tape: &mut Tape,
    net: &DepthNet,
    vars: &NetVars,
    board_image: Var,
    scenes: &[AttackScene],
) -> Result<Option<Var>> {
    let mut terms = Vec::new();
    for s in scenes {
        let n = s.plan.region_pixels();
        if n == 0 {
            continue;
        }
        let img = s.plan.compose(tape, board_image, &s.frame)?;
        let depth = net.forward_on(tape, vars, img)?;
        let inv = tape.reciprocal(depth);
        let sq = tape.square(inv);
        let region = tape.constant(s.plan.region.clone());
        let masked = tape.mul(sq, region)?;
        let total = tape.sum(masked);
        terms.push(tape.scale(total, 1.0 / n as f64));
    }
    if terms.is_empty() {
        return Ok(None);
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    let k = terms.len() as f64;
    Ok(Some(tape.scale(acc, 1.0 / k)))
}

#[derive(Clone, Debug)]
enum AttackState {
    SoftL0 { state: PerturbationState, adam: Adam },
    /// Direct perturbation, used by PGD and the patch attack.
    Direct { delta: Tensor, adam: Option<Adam> },
    Fixed { delta: Tensor },
}

/// Resumable attack against one board. `step` performs one optimization
/// update on the given scenes; `delta` returns the certified perturbation.
#[derive(Clone, Debug)]
pub struct Attacker {
    cfg: AttackConfig,
    image: Tensor,
    patch: Option<Tensor>,
    state: AttackState,
    steps_done: usize,
}

/// Loss values observed at one attack step (before the update).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub adv_loss: f64,
    pub pixel_norm: f64,
}

impl StepLoss {
    pub fn total(&self, lambda: f64) -> f64 {
        self.adv_loss + lambda * self.pixel_norm
    }
}

impl Attacker {
    pub fn new(board: &ObjectBoard, cfg: &AttackConfig) -> Result<Self> {
        cfg.validate()?;
        let (h, w) = (board.height_px(), board.width_px());
        let mut patch = None;
        let state = match cfg.kind {
            AttackKind::SoftL0 => AttackState::SoftL0 {
                state: PerturbationState::new(h, w, cfg.maxp, cfg.gamma, cfg.lambda_pix),
                adam: Adam::new(cfg.lr),
            },
            AttackKind::PgdLinf => AttackState::Direct {
                delta: Tensor::zeros(&[3, h, w]),
                adam: None,
            },
            AttackKind::Patch => {
                patch = Some(patch_mask(h, w, cfg.epsilon));
                AttackState::Direct {
                    delta: Tensor::zeros(&[3, h, w]),
                    adam: Some(Adam::new(cfg.lr)),
                }
            }
            AttackKind::RandomL0 => AttackState::Fixed {
                delta: random_l0_delta(&board.image, cfg.epsilon, cfg.seed),
            },
            AttackKind::None => AttackState::Fixed {
                delta: Tensor::zeros(&[3, h, w]),
            },
        };
        Ok(Self {
            cfg: cfg.clone(),
            image: board.image.clone(),
            patch,
            state,
            steps_done: 0,
        })
    }

    pub fn config(&self) -> &AttackConfig {
        &self.cfg
    }

    pub fn steps_done(&self) -> usize {
        self.steps_done
    }

    pub fn is_optimizing(&self) -> bool {
        !matches!(self.state, AttackState::Fixed { .. })
    }

    pub fn perturbation_state(&self) -> Option<&PerturbationState> {
        match &self.state {
            AttackState::SoftL0 { state, .. } => Some(state),
            _ => None,
        }
    }

    /// One update against `scenes`. Errors when every scene has an empty region.
    pub fn step(&mut self, net: &DepthNet, scenes: &[AttackScene]) -> Result<StepLoss> {
        let mut tape = Tape::new();
        let vars = net.bind(&mut tape, false);
        let image = tape.constant(self.image.clone());
        let empty = || Error::Attack("board region is empty in every drawn scene".into());
        let loss = match &mut self.state {
            AttackState::SoftL0 { state, adam } => {
                let bp = tape.leaf(state.b_p.clone());
                let bn = tape.leaf(state.b_n.clone());
                let delta = delta_on(&mut tape, bp, bn, state.maxp)?;
                let board = tape.add(image, delta)?;
                let board = tape.clip01(board);
                let adv = adversarial_objective(&mut tape, net, &vars, board, scenes)?.ok_or_else(empty)?;
                let pix = pixel_norm_on(&mut tape, bp, bn, state.gamma)?;
                let weighted = tape.scale(pix, state.lambda_pix);
                let total = tape.add(adv, weighted)?;
                let grads = tape.backward(total)?;
                let out = StepLoss {
                    adv_loss: tape.value(adv).item(),
                    pixel_norm: tape.value(pix).item(),
                };
                adam.step(&mut [&mut state.b_p, &mut state.b_n], &[grads.get(bp), grads.get(bn)])?;
                out
            }
            AttackState::Direct { delta, adam } => {
                let d = tape.leaf(delta.clone());
                let masked = match &self.patch {
                    Some(m) => {
                        let m = tape.constant(m.clone());
                        tape.mul(d, m)?
                    }
                    None => d,
                };
                let board = tape.add(image, masked)?;
                let board = tape.clip01(board);
                let adv = adversarial_objective(&mut tape, net, &vars, board, scenes)?.ok_or_else(empty)?;
                let grads = tape.backward(adv)?;
                let g = grads.get(d).cloned().unwrap_or_else(|| Tensor::zeros(delta.shape()));
                match adam {
                    Some(adam) => adam.step(&mut [&mut *delta], &[Some(&g)])?,
                    None => {
                        let a = self.cfg.pgd_step_size();
                        for (v, &gi) in delta.data_mut().iter_mut().zip(g.data()) {
                            // f64::signum maps 0 to 1; a zero gradient must not move.
                            if gi > 0.0 {
                                *v -= a;
                            } else if gi < 0.0 {
                                *v += a;
                            }
                        }
                    }
                }
                project_direct(delta, &self.image, self.patch.as_ref(), self.cfg.kind, self.cfg.epsilon);
                StepLoss {
                    adv_loss: tape.value(adv).item(),
                    pixel_norm: 0.0,
                }
            }
            AttackState::Fixed { .. } => {
                let board = tape.constant(self.current_board_image()?);
                let adv = adversarial_objective(&mut tape, net, &vars, board, scenes)?.ok_or_else(empty)?;
                StepLoss {
                    adv_loss: tape.value(adv).item(),
                    pixel_norm: 0.0,
                }
            }
        };
        if !loss.adv_loss.is_finite() || !loss.pixel_norm.is_finite() {
            return Err(Error::Numeric(format!("attack loss became {loss:?}")));
        }
        self.steps_done += 1;
        Ok(loss)
    }

    /// The perturbation with its budget enforced: hard-L0 projected for the
    /// soft-L0 attack, and the exact difference to the clipped board otherwise.
    pub fn delta(&self) -> Result<Tensor> {
        match &self.state {
            AttackState::SoftL0 { state, .. } => {
                let raw = state.materialize_delta();
                let projected = hard_l0_project(&raw, self.cfg.epsilon)?;
                let board = apply_delta(&self.image, &projected)?;
                Ok(board.zip_map(&self.image, |b, a| b - a)?)
            }
            AttackState::Direct { delta, .. } => Ok(delta.clone()),
            AttackState::Fixed { delta } => Ok(delta.clone()),
        }
    }

    pub fn current_board_image(&self) -> Result<Tensor> {
        let delta = self.delta()?;
        let mut out = apply_delta(&self.image, &delta)?;
        // Outside the patch the board must stay bitwise identical.
        if let Some(m) = &self.patch {
            let np = m.numel();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                if m.data()[i % np] == 0.0 {
                    *v = self.image.data()[i];
                }
            }
        }
        Ok(out)
    }

    pub fn perturbed_board(&self, board: &ObjectBoard) -> Result<ObjectBoard> {
        board.with_image(self.current_board_image()?)
    }
}

/// Keep `delta` within its bound and the board within [0, 1]; the result
/// satisfies `image + delta` in [0, 1] exactly when re-clipped.
fn project_direct(delta: &mut Tensor, image: &Tensor, patch: Option<&Tensor>, kind: AttackKind, eps: f64) {
    let np = image.numel() / 3;
    for (i, (d, &a)) in delta.data_mut().iter_mut().zip(image.data()).enumerate() {
        if let Some(m) = patch {
            if m.data()[i % np] == 0.0 {
                *d = 0.0;
                continue;
            }
        }
        let mut v = *d;
        if kind == AttackKind::PgdLinf {
            v = v.clamp(-eps, eps);
        }
        v = (a + v).clamp(0.0, 1.0) - a;
        if kind == AttackKind::PgdLinf {
            v = v.clamp(-eps, eps);
        }
        *d = v;
    }
}

fn random_l0_delta(image: &Tensor, epsilon: f64, seed: u64) -> Tensor {
    let s = image.shape();
    let np = s[1] * s[2];
    let k = (epsilon * np as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut delta = Tensor::zeros(s);
    for p in sample(&mut rng, np, k) {
        for c in 0..3 {
            let target = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
            delta.data_mut()[c * np + p] = target - image.data()[c * np + p];
        }
    }
    delta
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub kind: AttackKind,
    pub epsilon: f64,
    pub steps: usize,
    pub final_adv_loss: f64,
    pub final_pixel_norm: f64,
    pub perturbed_fraction: f64,
    pub per_step_loss: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct AttackOutcome {
    pub board: ObjectBoard,
    pub delta: Tensor,
    pub report: AttackReport,
}

/// Draw `n` target-view scenes for `board` from `source`.
pub fn draw_attack_scenes(source: &mut SceneSource, board: &ObjectBoard, n: usize) -> Result<Vec<AttackScene>> {
    (0..n)
        .map(|_| {
            let (bg, pair) = source.draw(board)?;
            Ok(AttackScene {
                plan: pair.target_plan,
                frame: source.backgrounds[bg].frame_t.clone(),
            })
        })
        .collect()
}

/// Run a full attack with a fresh EoT draw each step. The scene stream is
/// seeded from `cfg.seed`, so the result does not depend on `source`'s state.
pub fn run_attack(net: &DepthNet, board: &ObjectBoard, source: &SceneSource, cfg: &AttackConfig) -> Result<AttackOutcome> {
    let mut attacker = Attacker::new(board, cfg)?;
    let mut scenes = source.reseeded(cfg.seed);
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut last_adv = f64::NAN;
    let mut last_pix = 0.0;
    if attacker.is_optimizing() {
        for _ in 0..cfg.steps {
            let batch = draw_attack_scenes(&mut scenes, board, cfg.eot_samples)?;
            let l = attacker.step(net, &batch)?;
            trace.push(l.total(if cfg.kind == AttackKind::SoftL0 { cfg.lambda_pix } else { 0.0 }));
            last_adv = l.adv_loss;
            last_pix = l.pixel_norm;
        }
    }
    let delta = attacker.delta()?;
    let perturbed = attacker.perturbed_board(board)?;
    // Score the final board on one more draw so the report reflects the
    // certified perturbation rather than the last unprojected iterate.
    let batch = draw_attack_scenes(&mut scenes, board, cfg.eot_samples)?;
    let mut tape = Tape::new();
    let vars = net.bind(&mut tape, false);
    let img = tape.constant(perturbed.image.clone());
    if let Some(adv) = adversarial_objective(&mut tape, net, &vars, img, &batch)? {
        last_adv = tape.value(adv).item();
    } else if last_adv.is_nan() {
        return Err(Error::Attack("board region is empty in every drawn scene".into()));
    }
    if let Some(s) = attacker.perturbation_state() {
        last_pix = s.pixel_norm();
    }
    let report = AttackReport {
        kind: cfg.kind,
        epsilon: cfg.epsilon,
        steps: cfg.steps,
        final_adv_loss: last_adv,
        final_pixel_norm: last_pix,
        perturbed_fraction: perturbed_fraction(&board.image, &perturbed.image)?,
        per_step_loss: trace,
    };
    Ok(AttackOutcome {
        board: perturbed,
        delta,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(bp: f64, bn: f64) -> PerturbationState {
        PerturbationState {
            b_p: Tensor::full(&[3, 2, 2], bp),
            b_n: Tensor::full(&[3, 2, 2], bn),
            maxp: 1.0,
            gamma: 0.05,
            lambda_pix: 1.0,
        }
    }

    #[test]
    fn delta_examples() {
        assert!(state(0.7, 0.7).materialize_delta().data().iter().all(|&v| v == 0.0));
        assert!(state(2.0, -2.0).materialize_delta().data().iter().all(|&v| v == 1.0));
        assert!(state(0.3, 0.0).materialize_delta().data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn pixel_norm_examples() {
        assert_eq!(state(0.0, 0.0).pixel_norm(), 1.0);
        assert!(state(-50.0, -50.0).pixel_norm() < 1e-12);
        assert!((state(50.0, -50.0).pixel_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn projection_examples() {
        let d = Tensor::from_fn(&[3, 4, 4], |i| (i as f64 * 0.37).sin());
        assert_eq!(hard_l0_project(&d, 1.0).unwrap(), d);
        let eq = Tensor::full(&[3, 2, 4], 0.2);
        let p = hard_l0_project(&eq, 0.5).unwrap();
        let mag = pixel_magnitudes(&p);
        assert_eq!(mag, vec![0.2, 0.2, 0.2, 0.2, 0.0, 0.0, 0.0, 0.0]);
        assert!(hard_l0_project(&d, 0.0).is_err());
    }

    #[test]
    fn patch_area() {
        let m = patch_mask(40, 40, 0.1);
        let n = m.sum() as usize;
        // 13x13 for sqrt(0.1)*40 = 12.6
        assert_eq!(n, 169);
        assert!(m.at(&[0, 20, 20]) == 1.0 && m.at(&[0, 0, 0]) == 0.0);
    }

    #[test]
    fn random_l0_budget() {
        let img = Tensor::full(&[3, 10, 10], 0.5);
        let d = random_l0_delta(&img, 0.2, 3);
        assert_eq!(pixel_magnitudes(&d).iter().filter(|&&m| m > 0.0).count(), 20);
    }

    #[test]
    fn validation() {
        assert!(AttackConfig::soft_l0(0.0).validate().is_err());
        assert!(AttackConfig::soft_l0(1.5).validate().is_err());
        assert!(AttackConfig::pgd_linf(0.0).validate().is_ok());
        let mut c = AttackConfig::soft_l0(0.1);
        c.eot_samples = 0;
        assert!(c.validate().is_err());
    }
}
