mod common;

use std::collections::BTreeMap;

use common::{micro_step_fd, rand_tensor, rng, tiny_buffer, tiny_model};
use rand::Rng;
use tempo_core::dataset::{render_split, SynthConfig};
use tempo_core::geometry::Offset;
use tempo_core::pipeline::Mode;
use tempo_core::roi::RoiGrid;
use tempo_core::tensor::Gradients;
use tempo_core::train::{
    joint_loss, sgd_step, smooth_l1, train, train_step, LossConfig, OptimState, Selection,
    StepConfig, TrainConfig,
};
use tempo_core::params::ParamStore;
use tempo_core::{Error, Graph64, Tensor64};

#[test]
fn smooth_l1_examples() {
    let t = [Offset::new(0.0, 0.0)];
    assert_eq!(smooth_l1(&t, &t), 0.0);
    assert_eq!(smooth_l1(&[Offset::new(0.5, 0.0)], &t), 0.125);
    assert_eq!(smooth_l1(&[Offset::new(2.0, 0.0)], &t), 1.5);
    assert_eq!(smooth_l1(&[Offset::new(-2.0, 0.5)], &t), 1.625);
    assert_eq!(smooth_l1(&[], &[]), 0.0);
}

fn store(values: &[f64]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.insert("w", Tensor64::from_f64([values.len()], values).unwrap());
    s
}

fn grads(values: &[f64]) -> Gradients<f64> {
    let mut m = BTreeMap::new();
    m.insert("w".to_string(), Tensor64::from_f64([values.len()], values).unwrap());
    Gradients::from_map(m)
}

#[test]
fn sgd_examples() {
    // weight decay alone
    let mut p = store(&[1.0]);
    let mut opt = OptimState::new(0.5, 0.0, 0.1);
    sgd_step(&mut p, &grads(&[0.0]), &mut opt).unwrap();
    assert!((p.get("w").unwrap().data()[0] - 0.95).abs() < 1e-15);

    // f = w²/2 shrinks by (1 − lr) per step
    let mut p = store(&[2.0]);
    let mut opt = OptimState::new(0.1, 0.0, 0.0);
    for _ in 0..3 {
        let w = p.get("w").unwrap().data()[0];
        sgd_step(&mut p, &grads(&[w]), &mut opt).unwrap();
    }
    assert!((p.get("w").unwrap().data()[0] - 2.0 * 0.9f64.powi(3)).abs() < 1e-14);

    // momentum: constant gradient g gives v₁ = g, v₂ = 1.9·g
    let mut p = store(&[0.0]);
    let mut opt = OptimState::new(1.0, 0.9, 0.0);
    sgd_step(&mut p, &grads(&[0.3]), &mut opt).unwrap();
    assert!((opt.velocity("w").unwrap()[0] - 0.3).abs() < 1e-15);
    sgd_step(&mut p, &grads(&[0.3]), &mut opt).unwrap();
    assert!((opt.velocity("w").unwrap()[0] - 0.57).abs() < 1e-15);
    assert!((p.get("w").unwrap().data()[0] + 0.87).abs() < 1e-15);
}

#[test]
fn zero_rate_and_zero_gradient_are_bit_stable() {
    let mut r = rng(40);
    let w: Vec<f64> = (0..20).map(|_| r.gen_range(-1.0..1.0)).collect();
    let g: Vec<f64> = (0..20).map(|_| r.gen_range(-1.0..1.0)).collect();
    let mut p = store(&w);
    let before = p.clone();
    let mut opt = OptimState::new(0.0, 0.9, 0.1);
    for _ in 0..3 {
        sgd_step(&mut p, &grads(&g), &mut opt).unwrap();
    }
    assert!(p.bit_equal(&before));
    let mut opt = OptimState::new(0.5, 0.9, 0.0);
    sgd_step(&mut p, &grads(&[0.0; 20]), &mut opt).unwrap();
    assert!(p.bit_equal(&before));
}

#[test]
fn non_finite_gradient_leaves_everything_untouched() {
    let mut p = store(&[1.0, 2.0]);
    p.insert("v", Tensor64::from_f64([1], &[3.0]).unwrap());
    let before = p.clone();
    let mut m = BTreeMap::new();
    m.insert("v".to_string(), Tensor64::from_f64([1], &[0.5]).unwrap());
    m.insert("w".to_string(), Tensor64::from_f64([2], &[1.0, f64::INFINITY]).unwrap());
    let mut opt = OptimState::new(0.1, 0.9, 0.0);
    let err = sgd_step(&mut p, &Gradients::from_map(m), &mut opt).unwrap_err();
    match err {
        Error::NonFiniteGradient { param, max_abs } => {
            assert_eq!(param, "w");
            assert_eq!(max_abs, f64::INFINITY);
        }
        other => panic!("unexpected {other}"),
    }
    assert!(p.bit_equal(&before));
    assert!(opt.velocity("v").is_none() && opt.velocity("w").is_none());
}

struct Case {
    logits: Tensor64,
    labels: Vec<usize>,
    preds: Tensor64,
    targets: Tensor64,
    fg: Vec<bool>,
}

fn random_case(r: &mut impl Rng) -> Case {
    let n = r.gen_range(1..20);
    let c = r.gen_range(2..6);
    let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..c)).collect();
    Case {
        logits: rand_tensor(&[n, c], r, -3.0, 3.0),
        fg: labels.iter().map(|&l| l > 0).collect(),
        labels,
        preds: rand_tensor(&[n, 2], r, -2.0, 2.0),
        targets: rand_tensor(&[n, 2], r, -2.0, 2.0),
    }
}

fn huber(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

fn reference(case: &Case, lambda: f64) -> f64 {
    let n = case.labels.len();
    let c = case.logits.dim(1);
    let mut ce = 0.0;
    for i in 0..n {
        let row = &case.logits.data()[i * c..(i + 1) * c];
        let lse = row.iter().map(|z| z.exp()).sum::<f64>().ln();
        ce += lse - row[case.labels[i]];
    }
    let mut reg = 0.0;
    let mut n_reg = 0;
    for i in 0..n {
        if case.fg[i] {
            n_reg += 1;
            for k in 0..2 {
                reg += huber(case.preds.data()[2 * i + k] - case.targets.data()[2 * i + k]);
            }
        }
    }
    let reg = if n_reg == 0 { 0.0 } else { reg / n_reg as f64 };
    ce / n as f64 + lambda * reg
}

fn eval(case: &Case, lambda: f64) -> (f64, Tensor64) {
    let mut g = Graph64::new();
    let logits = g.constant(case.logits.clone());
    let preds = g.param("preds", case.preds.clone());
    let terms = joint_loss(&mut g, logits, &case.labels, preds, &case.targets, &case.fg, &LossConfig { lambda }).unwrap();
    let grads = g.backward(terms.total).unwrap();
    (g.value(terms.total).item(), grads.get("preds").unwrap().clone())
}

#[test]
fn joint_loss_matches_scalar_reference() {
    let mut r = rng(41);
    for _ in 0..100 {
        let case = random_case(&mut r);
        let lambda = r.gen_range(0.1..3.0);
        let (total, _) = eval(&case, lambda);
        assert!((total - reference(&case, lambda)).abs() < 1e-12);
    }
}

#[test]
fn lambda_scales_only_the_regression_term() {
    let mut r = rng(42);
    let mut case = random_case(&mut r);
    case.fg[0] = true;
    let cls = reference(&case, 0.0);
    let (one, _) = eval(&case, 1.0);
    let (two, _) = eval(&case, 2.0);
    assert!(((two - cls) - 2.0 * (one - cls)).abs() < 1e-12);

    // no foreground rows: regression contributes nothing
    case.fg = vec![false; case.labels.len()];
    let (total, grad) = eval(&case, 5.0);
    assert!((total - cls).abs() < 1e-12);
    assert!(grad.data().iter().all(|&v| v == 0.0));
}

#[test]
fn background_targets_do_not_matter() {
    let mut r = rng(43);
    for _ in 0..20 {
        let case = random_case(&mut r);
        let (base, grad) = eval(&case, 1.0);
        let moved = Tensor64::from_fn(case.targets.shape().to_vec(), |j| {
            let v = case.targets.data()[j];
            if case.fg[j / 2] {
                v
            } else {
                v + 7.0
            }
        });
        let other = Case { targets: moved, ..case };
        let (again, grad2) = eval(&other, 1.0);
        assert_eq!(base, again);
        assert_eq!(grad, grad2);
        for (i, &f) in other.fg.iter().enumerate() {
            if !f {
                assert_eq!(grad.data()[2 * i], 0.0);
                assert_eq!(grad.data()[2 * i + 1], 0.0);
            }
        }
    }
}

#[test]
fn joint_loss_is_permutation_invariant() {
    let mut r = rng(44);
    for _ in 0..20 {
        let case = random_case(&mut r);
        let n = case.labels.len();
        let c = case.logits.dim(1);
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(&mut perm[..], &mut r);
        let rows = |t: &Tensor64, w: usize| {
            Tensor64::from_fn([n, w], |j| t.data()[perm[j / w] * w + j % w])
        };
        let shuffled = Case {
            logits: rows(&case.logits, c),
            labels: perm.iter().map(|&i| case.labels[i]).collect(),
            preds: rows(&case.preds, 2),
            targets: rows(&case.targets, 2),
            fg: perm.iter().map(|&i| case.fg[i]).collect(),
        };
        assert!((eval(&case, 1.0).0 - eval(&shuffled, 1.0).0).abs() < 1e-12);
    }
}

#[test]
fn whole_objective_gradient_matches_finite_differences() {
    for (i, mode) in [Mode::Single, Mode::TwoSum, Mode::TwoConcat].into_iter().enumerate() {
        let err = micro_step_fd(mode, 50 + i as u64, 6);
        assert!(err < 1e-6, "{mode:?}: {err}");
    }
}

fn step_config(selection: Selection) -> StepConfig {
    StepConfig {
        loss: LossConfig::default(),
        proposal_batch: 8,
        selection,
        frozen_layers: 0,
    }
}

#[test]
fn one_buffer_can_be_overfit() {
    let mut model = tiny_model(Mode::Single, 45);
    let mut r = rng(46);
    let buffer = tiny_buffer(&mut r, &[(0, 2.0, 10.0)]);
    let cfg = step_config(Selection::Sample { batch: 16 });
    let mut opt = OptimState::new(0.1, 0.9, 0.0);
    let mut totals = Vec::new();
    for _ in 0..50 {
        totals.push(train_step(&mut model, &buffer, &cfg, &mut opt, None, &mut r).unwrap().total);
    }
    assert!(totals[49] < totals[0], "{totals:?}");
    assert!(totals.windows(2).filter(|w| w[1] < w[0]).count() > 40);
}

#[test]
fn hard_mining_over_everything_equals_using_everything() {
    let mut r = rng(47);
    let buffer = tiny_buffer(&mut r, &[(1, 1.0, 9.0), (0, 9.0, 16.0)]);
    let base = tiny_model(Mode::TwoSum, 48);
    let run = |selection: Selection, readonly: bool| {
        let mut model = base.clone();
        let mut head = tempo_core::classifier::ReadOnlyHead::new(&model.params, &model.config.classifier()).unwrap();
        let mut opt = OptimState::new(0.05, 0.9, 5e-4);
        let mut step_rng = rng(49);
        for _ in 0..3 {
            let ro = if readonly { Some(&mut head) } else { None };
            train_step(&mut model, &buffer, &step_config(selection), &mut opt, ro, &mut step_rng).unwrap();
        }
        model
    };
    let all = run(Selection::All, false);
    let ohem = run(Selection::Ohem { top_n: 10_000 }, true);
    for (name, a) in all.params.iter() {
        let b = ohem.params.get(name).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-10, "{name}: {x} vs {y}");
        }
    }
}

fn small_run(ohem: bool) -> (tempo_core::train::TrainOutcome<f32>, TrainConfig) {
    let synth = SynthConfig {
        num_videos: 3,
        num_test_videos: 1,
        frames: 48,
        size: 16,
        min_duration: 8,
        max_duration: 16,
        block: 6,
        ..SynthConfig::default()
    };
    let data = render_split(&synth, 0..3);
    let mut cfg = TrainConfig {
        epochs: 2,
        widths: [2, 2, 3, 3, 4],
        buffer_len: 48,
        scales: vec![1, 2],
        hidden: 6,
        tpn_channels: 4,
        roi_grid: RoiGrid::new(1, 1, 1).unwrap(),
        proposal_batch: 16,
        cls_batch: 16,
        ohem,
        ohem_top_n: 16,
        ..TrainConfig::default()
    };
    cfg.seed = 3;
    (train(&data, &cfg, None).unwrap(), cfg)
}

#[test]
fn training_is_deterministic_per_seed() {
    for ohem in [false, true] {
        let (a, _) = small_run(ohem);
        let (b, _) = small_run(ohem);
        assert!(a.model.params.bit_equal(&b.model.params));
        assert_eq!(a.log.len(), 6);
        assert_eq!(
            a.log.iter().map(|r| r.losses.total.to_bits()).collect::<Vec<_>>(),
            b.log.iter().map(|r| r.losses.total.to_bits()).collect::<Vec<_>>()
        );
    }
}

#[test]
fn hard_mining_off_uses_the_sampler() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.step_config().selection, Selection::Sample { batch: 128 });
    let on = TrainConfig { ohem: true, ..cfg };
    assert_eq!(on.step_config().selection, Selection::Ohem { top_n: 128 });
}

#[test]
fn config_text_round_trip() {
    let (_, cfg) = small_run(false);
    assert_eq!(TrainConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    assert!(TrainConfig::from_text("lr=abc").is_err());
    assert!(TrainConfig::from_text("nonsense_key=1").is_err());
}
