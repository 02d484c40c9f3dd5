//! Depth error metrics and the attack / transfer evaluation protocol.

use std::fmt::Write as _;

use dh_tensor::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversary::{run_attack, AttackConfig, AttackReport};
use crate::error::{Error, Result};
use crate::model::DepthNet;
use crate::scene::{ObjectBoard, ScenePair, SceneSource};

/// Ratio threshold of the delta accuracy metric.
pub const DELTA_THRESHOLD: f64 = 1.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Object,
    FullFrame,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub abse: f64,
    pub rmse: f64,
    pub absr: f64,
    pub sqr: f64,
    pub delta: f64,
    pub n_pixels: usize,
    pub region: Region,
}

/// Metrics of estimate `x` against reference `y` over pixels where `mask`
/// exceeds 0.5.
pub fn compute_metrics(x: &Tensor, y: &Tensor, mask: &Tensor, region: Region) -> Result<MetricsReport> {
    if x.shape() != y.shape() || x.numel() != mask.numel() {
        return Err(Error::Contract(format!(
            "metrics on {:?} vs {:?} with mask {:?}",
            x.shape(),
            y.shape(),
            mask.shape()
        )));
    }
    let (mut abs, mut sq, mut absr, mut sqr) = (0.0, 0.0, 0.0, 0.0);
    let mut hits = 0usize;
    let mut n = 0usize;
    for ((&xe, &ye), &m) in x.data().iter().zip(y.data()).zip(mask.data()) {
        if m <= 0.5 {
            continue;
        }
        if !(ye > 0.0) {
            return Err(Error::Contract(format!("reference depth {ye} is not positive")));
        }
        let d = xe - ye;
        abs += d.abs();
        sq += d * d;
        absr += d.abs() / ye;
        sqr += d * d / ye;
        if (xe / ye).max(ye / xe) < DELTA_THRESHOLD {
            hits += 1;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Contract("metrics over an empty mask".into()));
    }
    let nf = n as f64;
    Ok(MetricsReport {
        abse: abs / nf,
        rmse: (sq / nf).sqrt(),
        absr: absr / nf,
        sqr: sqr / nf,
        delta: hits as f64 / nf,
        n_pixels: n,
        region,
    })
}

/// Unweighted mean of per-scene reports; `n_pixels` is the total.
pub fn mean_report(reports: &[MetricsReport]) -> Result<MetricsReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Contract("cannot average zero reports".into()))?;
    let k = reports.len() as f64;
    let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
    Ok(MetricsReport {
        abse: avg(|r| r.abse),
        rmse: avg(|r| r.rmse),
        absr: avg(|r| r.absr),
        sqr: avg(|r| r.sqr),
        delta: avg(|r| r.delta),
        n_pixels: reports.iter().map(|r| r.n_pixels).sum(),
        region: first.region,
    })
}

/// Evaluation scenes: `n` draws for `board`, deterministic in `seed`.
/// Draws whose board region is empty are kept out.
pub fn eval_scenes(source: &SceneSource, board: &ObjectBoard, n: usize, seed: u64) -> Result<Vec<(usize, ScenePair)>> {
    let mut s = source.reseeded(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let (bg, pair) = s.draw(board)?;
        if pair.target_plan.region_pixels() > 0 {
            out.push((bg, pair));
        }
    }
    if out.is_empty() {
        return Err(Error::Scene("no evaluation scene shows the board".into()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub distance: f64,
    pub yaw_deg: f64,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mean: MetricsReport,
    pub per_scene: Vec<SceneMetrics>,
}

/// Depth on the board region with `image` stamped in, against the depth on
/// the benign board, for every scene.
pub fn evaluate_image(
    net: &DepthNet,
    image: &Tensor,
    source: &SceneSource,
    scenes: &[(usize, ScenePair)],
) -> Result<Evaluation> {
    let per_scene = scenes
        .par_iter()
        .map(|(bg, pair)| {
            let benign = net.forward(&pair.target)?;
            let attacked_img = pair.target_with(image, &source.backgrounds[*bg])?;
            let attacked = net.forward(&attacked_img)?;
            let metrics = compute_metrics(&attacked.values, &benign.values, &pair.target_plan.region, Region::Object)?;
            Ok(SceneMetrics {
                distance: pair.placement.distance,
                yaw_deg: pair.placement.yaw.to_degrees(),
                metrics,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = mean_report(&per_scene.iter().map(|s| s.metrics.clone()).collect::<Vec<_>>())?;
    Ok(Evaluation { mean, per_scene })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackEvaluation {
    pub attack: AttackReport,
    pub evaluation: Evaluation,
}

/// Generate one perturbation with `cfg` against `net` (expectation over
/// scenes from `attack_source`) and measure it on `n` scenes from
/// `eval_source`, with the benign prediction as reference.
pub fn evaluate_attack(
    net: &DepthNet,
    board: &ObjectBoard,
    cfg: &AttackConfig,
    attack_source: &SceneSource,
    eval_source: &SceneSource,
    n: usize,
    eval_seed: u64,
) -> Result<AttackEvaluation> {
    let outcome = run_attack(net, board, attack_source, cfg)?;
    let scenes = eval_scenes(eval_source, board, n, eval_seed)?;
    let evaluation = evaluate_image(net, &outcome.board.image, eval_source, &scenes)?;
    Ok(AttackEvaluation {
        attack: outcome.report,
        evaluation,
    })
}

/// Full-frame metrics against ground truth on scenes that carry it.
pub fn benign_metrics(net: &DepthNet, scenes: &[(usize, ScenePair)]) -> Result<Evaluation> {
    let per_scene = scenes
        .par_iter()
        .filter_map(|(_, pair)| pair.target_depth.as_ref().map(|gt| (pair, gt)))
        .map(|(pair, gt)| {
            let est = net.forward(&pair.target)?;
            let mask = Tensor::ones(gt.shape());
            Ok(SceneMetrics {
                distance: pair.placement.distance,
                yaw_deg: pair.placement.yaw.to_degrees(),
                metrics: compute_metrics(&est.values, gt, &mask, Region::FullFrame)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if per_scene.is_empty() {
        return Err(Error::Scene("no evaluation scene has ground-truth depth".into()));
    }
    let mean = mean_report(&per_scene.iter().map(|s| s.metrics.clone()).collect::<Vec<_>>())?;
    Ok(Evaluation { mean, per_scene })
}

/// Entry `(i, j)`: perturbation generated against `nets[i]`, evaluated on `nets[j]`.
pub fn transfer_matrix(
    nets: &[DepthNet],
    board: &ObjectBoard,
    cfg: &AttackConfig,
    attack_source: &SceneSource,
    eval_source: &SceneSource,
    n: usize,
    eval_seed: u64,
) -> Result<Vec<Vec<MetricsReport>>> {
    if nets.is_empty() {
        return Err(Error::Config("transfer matrix needs at least one network".into()));
    }
    let scenes = eval_scenes(eval_source, board, n, eval_seed)?;
    nets.iter()
        .map(|src| {
            let outcome = run_attack(src, board, attack_source, cfg)?;
            nets.iter()
                .map(|dst| Ok(evaluate_image(dst, &outcome.board.image, eval_source, &scenes)?.mean))
                .collect()
        })
        .collect()
}

/// Fixed-width table: one row per attack, one `ABSE/delta` cell per model.
pub fn format_table(models: &[String], rows: &[(String, Vec<MetricsReport>)]) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:<18}", "attack");
    for m in models {
        let _ = write!(out, " {:>18}", truncate(m, 18));
    }
    out.push('\n');
    for (name, cells) in rows {
        let _ = write!(out, "{:<18}", truncate(name, 18));
        for c in cells {
            let _ = write!(out, " {:>18}", format!("{:.4}/{:.3}", c.abse, c.delta));
        }
        out.push('\n');
    }
    out
}

fn truncate(s: &str, n: usize) -> String {
    s.chars().take(n).collect()
}
