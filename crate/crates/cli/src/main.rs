use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dh_core::adversary::{run_attack, AttackConfig, AttackReport};
use dh_core::config::ExperimentConfig;
use dh_core::eval::{benign_metrics, compute_metrics, eval_scenes, evaluate_image, format_table, MetricsReport, Region};
use dh_core::io;
use dh_core::model::DepthNet;
use dh_core::trainer::{harden, TrainMode};
use dh_core::{Error, Result};
use dh_tensor::Tensor;
use serde::Serialize;

/// Adversarial attacks on, and self-supervised hardening of, a monocular
/// depth network.
#[derive(Parser, Debug)]
#[command(name = "depth-harden", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config (TOML, or JSON by extension). Built-in defaults when absent.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override the training scene sampler seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, short, global = true)]
    output_dir: Option<PathBuf>,
    /// Worker threads for per-scene evaluation (default: available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write stereo scene pairs with the board stamped in, plus region masks.
    Synthesize {
        /// Number of scene pairs.
        #[arg(long, short, default_value_t = 5)]
        n: usize,
    },
    /// Optimize a perturbation of the board against a checkpoint.
    Attack {
        /// Network checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Which entry of the config's attack list to run.
        #[arg(long, default_value_t = 0)]
        attack: usize,
        /// Which board to perturb.
        #[arg(long, default_value_t = 0)]
        board: usize,
        /// Override the attack budget.
        #[arg(long)]
        epsilon: Option<f64>,
        /// Override the number of optimization steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train or harden a network.
    Train {
        /// Start from this checkpoint instead of a fresh network.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Override the training mode: selfsup, sup_pseudo or benign.
        #[arg(long)]
        mode: Option<String>,
        /// Override the number of steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Override the learning rate.
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Benign and attacked metrics per checkpoint; a transfer matrix per
    /// attack when two or more checkpoints are given.
    Evaluate {
        /// Network checkpoints.
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
        /// Override the number of evaluation scenes.
        #[arg(long, short)]
        n: Option<usize>,
        /// Which board to attack.
        #[arg(long, default_value_t = 0)]
        board: usize,
    },
    /// Depth error metrics between two tensor dumps.
    Metrics {
        /// Estimated depth dump.
        estimate: PathBuf,
        /// Reference depth dump.
        reference: PathBuf,
        /// Mask as a tensor dump or PNG; every pixel when absent.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Io(_) | Error::Format(_) | Error::Version { .. } => 3,
        Error::Numeric(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Metrics {
        estimate,
        reference,
        mask,
        out,
    } = &cli.cmd
    {
        return cmd_metrics(estimate, reference, mask.as_deref(), out.as_deref());
    }
    let mut cfg = match &cli.common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.common.output_dir {
        cfg.output_dir = std::env::current_dir()?.join(o);
    }
    if let Some(t) = cli.common.threads {
        if t == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Error::Config(format!("--threads: {e}")))?;
    }
    match cli.cmd {
        Command::Synthesize { n } => {
            cfg.validate()?;
            cmd_synthesize(&cfg, n)
        }
        Command::Attack {
            checkpoint,
            attack,
            board,
            epsilon,
            steps,
        } => {
            let mut a = cfg
                .attacks
                .get(attack)
                .cloned()
                .ok_or_else(|| Error::Config(format!("--attack {attack}: config lists {} attacks", cfg.attacks.len())))?;
            if let Some(e) = epsilon {
                a.epsilon = e;
            }
            if let Some(s) = steps {
                a.steps = s;
            }
            cfg.attacks[attack] = a.clone();
            cfg.validate()?;
            check_board(&cfg, board)?;
            cmd_attack(&cfg, &checkpoint, &a, board)
        }
        Command::Train { init, mode, steps, lr } => {
            if let Some(m) = mode {
                cfg.train.mode = match m.as_str() {
                    "selfsup" => TrainMode::Selfsup,
                    "sup_pseudo" => TrainMode::SupPseudo,
                    "benign" => TrainMode::Benign,
                    other => return Err(Error::Config(format!("--mode: unknown mode {other:?}"))),
                };
            }
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            if let Some(l) = lr {
                cfg.train.lr = l;
            }
            cfg.validate()?;
            cmd_train(&cfg, init.as_deref())
        }
        Command::Evaluate { checkpoints, n, board } => {
            if let Some(n) = n {
                cfg.eval.n = n;
            }
            cfg.validate()?;
            check_board(&cfg, board)?;
            cmd_evaluate(&cfg, &checkpoints, board)
        }
        Command::Metrics { .. } => unreachable!("handled above"),
    }
}

fn check_board(cfg: &ExperimentConfig, board: usize) -> Result<()> {
    if board >= cfg.boards.len() {
        return Err(Error::Config(format!("--board {board}: config lists {} boards", cfg.boards.len())));
    }
    Ok(())
}

fn output_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.output_path();
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

#[derive(Serialize)]
struct SceneRecord {
    index: usize,
    board: usize,
    background: usize,
    distance: f64,
    yaw_deg: f64,
    region_pixels: usize,
}

fn cmd_synthesize(cfg: &ExperimentConfig, n: usize) -> Result<()> {
    let boards = cfg.build_boards()?;
    let mut source = cfg.train_source()?;
    let mut scenes = Vec::with_capacity(n);
    for i in 0..n {
        let b = i % boards.len();
        let (bg, pair) = source.draw(&boards[b])?;
        scenes.push((b, bg, pair));
    }
    let dir = output_dir(cfg)?;
    let mut records = Vec::with_capacity(n);
    for (i, (b, bg, pair)) in scenes.iter().enumerate() {
        io::write_rgb(dir.join(format!("scene_{i:03}_t.png")), &pair.target)?;
        io::write_rgb(dir.join(format!("scene_{i:03}_s.png")), &pair.source)?;
        io::write_gray(dir.join(format!("scene_{i:03}_mask_t.png")), &pair.target_plan.region)?;
        io::write_gray(dir.join(format!("scene_{i:03}_mask_s.png")), &pair.source_plan.region)?;
        let r = SceneRecord {
            index: i,
            board: *b,
            background: *bg,
            distance: pair.placement.distance,
            yaw_deg: pair.placement.yaw.to_degrees(),
            region_pixels: pair.target_plan.region_pixels(),
        };
        println!(
            "scene {i:03}: board {} background {} distance {:.3} m yaw {:+.2} deg",
            r.board, r.background, r.distance, r.yaw_deg
        );
        records.push(r);
    }
    write_json(&dir.join("scenes.json"), &records)
}

fn check_report(r: &AttackReport) -> Result<()> {
    if !r.final_adv_loss.is_finite() || !r.final_pixel_norm.is_finite() {
        return Err(Error::Numeric(format!("{} attack produced a non-finite loss", r.kind.name())));
    }
    Ok(())
}

fn cmd_attack(cfg: &ExperimentConfig, checkpoint: &Path, a: &AttackConfig, board: usize) -> Result<()> {
    let net = DepthNet::load(checkpoint)?;
    let boards = cfg.build_boards()?;
    let source = cfg.train_source()?;
    let outcome = run_attack(&net, &boards[board], &source, a)?;
    check_report(&outcome.report)?;
    let dir = output_dir(cfg)?;
    io::write_rgb(dir.join("perturbed_board.png"), &outcome.board.image)?;
    io::write_tensor(dir.join("perturbed_board.dhtn"), &outcome.board.image)?;
    io::write_tensor(dir.join("delta.dhtn"), &outcome.delta)?;
    write_json(&dir.join("attack_report.json"), &outcome.report)?;
    let r = &outcome.report;
    println!(
        "{} eps {}: final adversarial loss {:.6}, perturbed fraction {:.4}",
        r.kind.name(),
        r.epsilon,
        r.final_adv_loss,
        r.perturbed_fraction
    );
    Ok(())
}

fn cmd_train(cfg: &ExperimentConfig, init: Option<&Path>) -> Result<()> {
    let net = match init {
        Some(p) => DepthNet::load(p)?,
        None => cfg.build_net()?,
    };
    let boards = cfg.build_boards()?;
    let source = cfg.train_source()?;
    let dir = output_dir(cfg)?;
    let mut log = BufWriter::new(File::create(dir.join("train_log.jsonl"))?);
    let (_, records) = harden(&net, &boards, &source, &cfg.train, Some(&mut log), Some(&dir))?;
    log.flush()?;
    if let Some(last) = records.last() {
        println!("{} training: {} steps, final loss {:.6}", cfg.train.mode.name(), records.len(), last.loss);
    }
    Ok(())
}

#[derive(Serialize)]
struct AttackSummary {
    attack: AttackReport,
    mean: MetricsReport,
}

#[derive(Serialize)]
struct ModelSummary {
    checkpoint: String,
    benign: MetricsReport,
    attacks: Vec<AttackSummary>,
}

#[derive(Serialize)]
struct TransferSummary {
    attack: String,
    epsilon: f64,
    /// `matrix[i][j]`: generated against model `i`, evaluated on model `j`.
    matrix: Vec<Vec<MetricsReport>>,
}

#[derive(Serialize)]
struct EvaluateReport {
    models: Vec<ModelSummary>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    transfer: Vec<TransferSummary>,
}

fn cmd_evaluate(cfg: &ExperimentConfig, checkpoints: &[PathBuf], board: usize) -> Result<()> {
    let nets = checkpoints.iter().map(DepthNet::load).collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = checkpoints.iter().map(|p| p.display().to_string()).collect();
    let boards = cfg.build_boards()?;
    let board = &boards[board];
    let attack_source = cfg.train_source()?;
    let eval_source = cfg.eval_source()?;
    let scenes = eval_scenes(&eval_source, board, cfg.eval.n, cfg.eval.seed)?;

    let mut models: Vec<ModelSummary> = nets
        .iter()
        .zip(&names)
        .map(|(net, name)| {
            Ok(ModelSummary {
                checkpoint: name.clone(),
                benign: benign_metrics(net, &scenes)?.mean,
                attacks: Vec::new(),
            })
        })
        .collect::<Result<_>>()?;
    let mut rows = vec![("benign".to_string(), models.iter().map(|m| m.benign.clone()).collect::<Vec<_>>())];
    let mut transfer = Vec::new();
    for a in &cfg.attacks {
        let mut matrix = Vec::with_capacity(nets.len());
        for (i, src) in nets.iter().enumerate() {
            let outcome = run_attack(src, board, &attack_source, a)?;
            check_report(&outcome.report)?;
            let row = nets
                .iter()
                .map(|dst| Ok(evaluate_image(dst, &outcome.board.image, &eval_source, &scenes)?.mean))
                .collect::<Result<Vec<_>>>()?;
            models[i].attacks.push(AttackSummary {
                attack: outcome.report,
                mean: row[i].clone(),
            });
            matrix.push(row);
        }
        let label = format!("{} {}", a.kind.name(), a.epsilon);
        rows.push((label.clone(), (0..nets.len()).map(|i| matrix[i][i].clone()).collect()));
        if nets.len() >= 2 {
            transfer.push(TransferSummary {
                attack: a.kind.name().to_string(),
                epsilon: a.epsilon,
                matrix,
            });
        }
    }

    let mut text = format_table(&names, &rows);
    for t in &transfer {
        text.push_str(&format!("\ntransfer {} {} (row: source model, column: target model)\n", t.attack, t.epsilon));
        let trows: Vec<(String, Vec<MetricsReport>)> =
            names.iter().cloned().zip(t.matrix.iter().cloned()).collect();
        text.push_str(&format_table(&names, &trows));
    }
    print!("{text}");
    let dir = output_dir(cfg)?;
    std::fs::write(dir.join("metrics.txt"), &text)?;
    write_json(&dir.join("metrics.json"), &EvaluateReport { models, transfer })
}

fn read_mask_any(path: &Path) -> Result<Tensor> {
    if path.extension().is_some_and(|e| e == "png") {
        io::read_mask(path)
    } else {
        io::read_tensor(path)
    }
}

fn cmd_metrics(estimate: &Path, reference: &Path, mask: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let x = io::read_tensor(estimate)?;
    let y = io::read_tensor(reference)?;
    let m = match mask {
        Some(p) => read_mask_any(p)?,
        None => Tensor::ones(x.shape()),
    };
    let region = if mask.is_some() { Region::Object } else { Region::FullFrame };
    let report = compute_metrics(&x, &y, &m, region)?;
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
    println!("{text}");
    if let Some(p) = out {
        write_json(p, &report)?;
    }
    Ok(())
}
