mod common;

use common::*;
use dh_core::adversary::*;
use dh_core::model::DepthNet;
use dh_core::Error;
use dh_tensor::{Tape, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn small_net() -> DepthNet {
    DepthNet::new(3, 4, 15.0).unwrap()
}

proptest! {
    #[test]
    fn swapping_components_negates_delta(seed in 0u64..1000, maxp in 0.1..2.0f64) {
        let mut r = rng(seed);
        let s = PerturbationState {
            b_p: random(&mut r, &[3, 4, 5], -1.0, 2.0),
            b_n: random(&mut r, &[3, 4, 5], -1.0, 2.0),
            maxp,
            gamma: 0.05,
            lambda_pix: 0.01,
        };
        let swapped = PerturbationState { b_p: s.b_n.clone(), b_n: s.b_p.clone(), ..s.clone() };
        let d = s.materialize_delta();
        let e = swapped.materialize_delta();
        for (a, b) in d.data().iter().zip(e.data()) {
            prop_assert_eq!(*a, -*b);
            prop_assert!(a.abs() <= maxp);
        }
    }

    #[test]
    fn projection_keeps_at_most_the_budget(seed in 0u64..1000, eps in 0.01..1.0f64, sparsity in 0.0..1.0f64) {
        let mut r = rng(seed);
        let (h, w) = (9, 11);
        let delta = Tensor::from_fn(&[3, h, w], |_| if r.gen_bool(sparsity) { 0.0 } else { r.gen_range(-1.0..1.0) });
        let p = hard_l0_project(&delta, eps).unwrap();
        let k = (eps * (h * w) as f64).floor() as usize;
        let before = pixel_magnitudes(&delta).iter().filter(|&&m| m > 0.0).count();
        let after = pixel_magnitudes(&p).iter().filter(|&&m| m > 0.0).count();
        prop_assert_eq!(after, before.min(k));
        // Kept pixels are untouched, and no dropped pixel outranks a kept one.
        let (mp, md) = (pixel_magnitudes(&p), pixel_magnitudes(&delta));
        let kept_min = mp.iter().filter(|&&m| m > 0.0).fold(f64::INFINITY, |a, &b| a.min(b));
        for (i, (&a, &b)) in mp.iter().zip(&md).enumerate() {
            if a > 0.0 {
                for c in 0..3 {
                    prop_assert_eq!(p.data()[c * h * w + i], delta.data()[c * h * w + i]);
                }
            } else {
                prop_assert!(b <= kept_min);
            }
        }
    }
}

#[test]
fn pixel_norm_matches_tape_and_finite_differences() {
    let mut r = rng(5);
    let s = PerturbationState {
        b_p: random(&mut r, &[3, 5, 6], -0.2, 0.2),
        b_n: random(&mut r, &[3, 5, 6], -0.2, 0.2),
        maxp: 1.0,
        gamma: 0.05,
        lambda_pix: 0.01,
    };
    let mut tape = Tape::new();
    let bp = tape.leaf(s.b_p.clone());
    let bn = tape.leaf(s.b_n.clone());
    let pn = pixel_norm_on(&mut tape, bp, bn, s.gamma).unwrap();
    assert!((tape.value(pn).item() - s.pixel_norm()).abs() < 1e-14);
    let grads = tape.backward(pn).unwrap();
    let step = 1e-6;
    for (which, var) in [(0, bp), (1, bn)] {
        let g = grads.get(var).unwrap();
        for _ in 0..10 {
            let i = r.gen_range(0..g.numel());
            let at = |d: f64| {
                let mut t = s.clone();
                if which == 0 {
                    t.b_p.data_mut()[i] += d;
                } else {
                    t.b_n.data_mut()[i] += d;
                }
                t.pixel_norm()
            };
            let fd = (at(step) - at(-step)) / (2.0 * step);
            assert!(rel_err(g.data()[i], fd) < 1e-4, "{} vs {fd}", g.data()[i]);
        }
    }
}

#[test]
fn forty_by_forty_board_keeps_eighty_pixels() {
    let mut r = rng(1);
    let delta = random(&mut r, &[3, 40, 40], -1.0, 1.0);
    let p = hard_l0_project(&delta, 1.0 / 20.0).unwrap();
    assert_eq!(pixel_magnitudes(&p).iter().filter(|&&m| m > 0.0).count(), 80);
    assert!(matches!(hard_l0_project(&delta, 0.0), Err(Error::Contract(_))));
    assert!(matches!(hard_l0_project(&delta, 1.5), Err(Error::Contract(_))));
}

#[test]
fn soft_l0_respects_budget_and_reports_every_step() {
    let net = small_net();
    let board = board();
    let src = source(2, (5.0, 10.0), 1);
    let cfg = AttackConfig {
        steps: 6,
        lr: 0.2,
        lambda_pix: 0.0,
        ..AttackConfig::soft_l0(0.05)
    };
    let out = run_attack(&net, &board, &src, &cfg).unwrap();
    assert_eq!(out.report.per_step_loss.len(), 6);
    assert!(out.report.per_step_loss.iter().all(|l| l.is_finite()));
    assert!(out.report.perturbed_fraction <= 0.05);
    assert!(out.report.perturbed_fraction > 0.0);
    let np = (board.height_px() * board.width_px()) as f64;
    let changed = pixel_magnitudes(&out.delta).iter().filter(|&&m| m > 0.0).count() as f64;
    assert!(changed / np <= 0.05);
    // The reported delta is exactly the change applied to the board.
    let applied = out.board.image.zip_map(&board.image, |a, b| a - b).unwrap();
    assert_eq!(applied, out.delta);
    // Same config, same result.
    let again = run_attack(&net, &board, &src, &cfg).unwrap();
    assert_eq!(again.board.image, out.board.image);
    assert_eq!(again.report.per_step_loss, out.report.per_step_loss);
}

#[test]
fn zero_steps_leave_the_board_unchanged() {
    let net = small_net();
    let board = board();
    let src = source(1, (5.0, 10.0), 1);
    for cfg in [AttackConfig::soft_l0(0.1), AttackConfig::pgd_linf(0.1), AttackConfig::patch(0.1)] {
        let cfg = AttackConfig { steps: 0, ..cfg };
        let out = run_attack(&net, &board, &src, &cfg).unwrap();
        assert_eq!(out.board.image, board.image, "{}", cfg.kind.name());
        assert!(out.report.per_step_loss.is_empty());
        assert_eq!(out.report.perturbed_fraction, 0.0);
    }
}

#[test]
fn pgd_stays_in_the_linf_ball() {
    let net = small_net();
    let board = board();
    let src = source(2, (5.0, 10.0), 1);
    for eps in [0.05, 0.1, 0.2] {
        let out = run_attack(&net, &board, &src, &AttackConfig { steps: 4, ..AttackConfig::pgd_linf(eps) }).unwrap();
        assert!(out.delta.max_abs() <= eps);
        assert!(out.board.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn patch_only_touches_the_centered_rectangle() {
    let net = small_net();
    let board = board();
    let src = source(2, (5.0, 10.0), 1);
    let out = run_attack(&net, &board, &src, &AttackConfig { steps: 4, lr: 0.2, ..AttackConfig::patch(0.1) }).unwrap();
    let (h, w) = (board.height_px(), board.width_px());
    let mask = patch_mask(h, w, 0.1);
    for c in 0..3 {
        for p in 0..h * w {
            if mask.data()[p] < 0.5 {
                let i = c * h * w + p;
                assert_eq!(out.board.image.data()[i].to_bits(), board.image.data()[i].to_bits());
            }
        }
    }
    assert!(out.report.perturbed_fraction > 0.0);
    assert_eq!(patch_mask(40, 40, 0.1).sum(), 169.0);
}

#[test]
fn random_l0_budget_is_respected() {
    let board = board();
    let src = source(1, (5.0, 10.0), 1);
    let out = run_attack(&small_net(), &board, &src, &AttackConfig::random_l0(0.1)).unwrap();
    let np = board.height_px() * board.width_px();
    assert!(out.report.perturbed_fraction <= 0.1);
    let k = (0.1 * np as f64).floor() as usize;
    // A sampled pixel already at its salt-and-pepper value stays unchanged.
    let changed = pixel_magnitudes(&out.delta).iter().filter(|&&m| m > 0.0).count();
    assert!(changed <= k && changed * 10 >= k * 9, "{changed} of {k}");
}

#[test]
fn invalid_configs_are_rejected() {
    let board = board();
    for cfg in [
        AttackConfig::soft_l0(0.0),
        AttackConfig::soft_l0(1.5),
        AttackConfig::patch(-0.1),
        AttackConfig::pgd_linf(-0.1),
        AttackConfig { eot_samples: 0, ..AttackConfig::soft_l0(0.1) },
    ] {
        assert!(Attacker::new(&board, &cfg).is_err(), "{cfg:?}");
    }
}
