use super::*;
use proptest::prelude::*;
use rand::Rng;

fn random_grid(rng: &mut ChaCha8Rng, w: usize, h: usize) -> LayerGrid {
    LayerGrid::from_fn(w, h, |_, _| rng.random_range(0.0..1.0))
}

fn names(c: usize) -> Vec<String> {
    (0..c).map(|i| format!("cand{i}")).collect()
}

fn random_stack(seed: u64, c: usize, w: usize, h: usize) -> Vec<LayerGrid> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..c).map(|_| random_grid(&mut rng, w, h)).collect()
}

fn plain_mean_oracle(stack: &[LayerGrid]) -> Vec<Option<f64>> {
    (0..stack[0].len())
        .map(|i| {
            let vals: Vec<f64> = stack.iter().filter_map(|g| g.get(i)).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect()
}

#[test]
fn sigmoid_examples() {
    assert_eq!(sigmoid(0.0), 0.5);
    assert!((sigmoid(20.0) - 1.0).abs() < 1e-8);
    assert!(sigmoid(-20.0) < 1e-8);
}

#[test]
fn gate_apply_scales_and_keeps_masks() {
    let stack = random_stack(1, 3, 4, 4);
    let mut masked = stack.clone();
    masked[1] = masked[1].with_mask((0..16).map(|i| i % 3 != 0).collect()).unwrap();
    let gate = SelectionGate::new(vec![0.0, 20.0, -1.0]);
    let out = gate.apply(&masked).unwrap();
    for c in 0..3 {
        assert_eq!(out[c].mask(), masked[c].mask());
        for i in 0..16 {
            if let Some(v) = masked[c].get(i) {
                assert!((out[c].values()[i] - sigmoid(gate.alphas[c]) * v).abs() < 1e-15);
            }
        }
    }
    assert!(matches!(
        SelectionGate::new(vec![0.0]).apply(&stack),
        Err(Error::Structural(_))
    ));
}

#[test]
fn closed_gate_ignores_channel_values() {
    // same model, the closed channel replaced by noise: outputs agree
    let stack = random_stack(2, 3, 6, 5);
    let mut noisy = stack.clone();
    noisy[2] = random_grid(&mut ChaCha8Rng::seed_from_u64(99), 6, 5);
    let mut m = EnsembleModel::new(EnsembleVariant::SLrFw, names(3), 0);
    m.set_parameters(vec![0.0, 0.0, -20.0, 0.7, 0.4, 1.0, 0.05]).unwrap();
    let a = m.forward_unclamped(&stack).unwrap();
    let b = m.forward_unclamped(&noisy).unwrap();
    for i in 0..a.len() {
        assert!((a.values()[i] - b.values()[i]).abs() < 1e-7);
    }
}

#[test]
fn plain_mean_of_identical_candidates_is_exact() {
    let g = random_stack(3, 1, 7, 3).remove(0);
    let m = EnsembleModel::new(EnsembleVariant::PlainMean, names(5), 0);
    let out = m.forward(&vec![g.clone(); 5]).unwrap();
    assert_eq!(out.values(), g.values());
}

#[test]
fn plain_mean_matches_oracle_with_invalid_cells() {
    let mut stack = random_stack(4, 3, 5, 4);
    stack[0] = stack[0].with_mask((0..20).map(|i| i % 2 == 0).collect()).unwrap();
    stack[2] = stack[2].with_mask((0..20).map(|i| i % 4 != 1).collect()).unwrap();
    let m = EnsembleModel::new(EnsembleVariant::PlainMean, names(3), 0);
    let out = m.forward(&stack).unwrap();
    for (i, want) in plain_mean_oracle(&stack).into_iter().enumerate() {
        match want {
            Some(v) => assert!((out.values()[i] - v).abs() < 1e-15),
            None => assert!(!out.mask()[i]),
        }
    }
}

#[test]
fn uniform_gates_reduce_s_mean_to_plain_mean() {
    let mut stack = random_stack(5, 4, 6, 6);
    stack[3] = stack[3].with_mask((0..36).map(|i| i % 5 != 0).collect()).unwrap();
    let plain = EnsembleModel::new(EnsembleVariant::PlainMean, names(4), 0).forward(&stack).unwrap();
    let mut s = EnsembleModel::new(EnsembleVariant::SMean, names(4), 0);
    s.set_parameters(vec![1.7; 4]).unwrap();
    let out = s.forward(&stack).unwrap();
    for i in 0..36 {
        assert!((out.values()[i] - plain.values()[i]).abs() < 1e-10);
    }
}

#[test]
fn single_open_candidate_is_identity() {
    let g = random_stack(6, 1, 4, 4).remove(0);
    for v in [EnsembleVariant::PlainMean, EnsembleVariant::SMean] {
        let mut m = EnsembleModel::new(v, names(1), 0);
        if v.has_gate() {
            m.set_parameters(vec![30.0]).unwrap();
        }
        let out = m.forward(std::slice::from_ref(&g)).unwrap();
        for i in 0..16 {
            assert!((out.values()[i] - g.values()[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn linear_weights_hand_evaluation() {
    let stack = random_stack(7, 3, 5, 5);
    let mut m = EnsembleModel::new(EnsembleVariant::SLrFw, names(3), 0);
    m.set_parameters(vec![20.0, -20.0, -20.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
    let out = m.forward(&stack).unwrap();
    for i in 0..25 {
        assert!((out.values()[i] - stack[0].values()[i]).abs() < 1e-6);
    }
}

#[test]
fn every_variant_starts_at_the_plain_mean() {
    let stack = random_stack(8, 5, 9, 7);
    let plain = plain_mean_oracle(&stack);
    for v in EnsembleVariant::ALL {
        let m = EnsembleModel::new(v, names(5), 11);
        let out = m.forward_unclamped(&stack).unwrap();
        for (i, want) in plain.iter().enumerate() {
            assert!((out.values()[i] - want.unwrap()).abs() < 1e-12, "{v} cell {i}");
        }
    }
}

fn probe(seed: u64, c: usize) -> (Vec<Vec<LayerGrid>>, Vec<LayerGrid>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stacks = Vec::new();
    let mut targets = Vec::new();
    for k in 0..2 {
        let mut s: Vec<LayerGrid> = (0..c).map(|_| random_grid(&mut rng, 7, 6)).collect();
        let mask = (0..42).map(|i| (i + k) % 6 != 0).collect();
        s[1] = s[1].with_mask(mask).unwrap();
        let t = random_grid(&mut rng, 7, 6).with_mask((0..42).map(|i| i % 5 != 2).collect()).unwrap();
        stacks.push(s);
        targets.push(t);
    }
    (stacks, targets)
}

#[test]
fn gradient_checks_for_every_learned_variant() {
    let (stacks, targets) = probe(12, 4);
    for v in EnsembleVariant::ALL.into_iter().filter(|v| v.has_gate()) {
        let mut m = EnsembleModel::new(v, names(4), 3);
        m.perturb_parameters(5, 0.3);
        let r = m.gradient_check(&stacks, &targets, 17).unwrap();
        assert!(r.checked >= m.parameters().len().min(50), "{v}: {r:?}");
        assert!(r.max_relative_error < 1e-4, "{v}: {r:?}");
        assert!(r.gradient_norm > 0.0);
    }
}

#[test]
fn realizable_target_is_fitted() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let stacks: Vec<Vec<LayerGrid>> = (0..4).map(|_| (0..4).map(|_| random_grid(&mut rng, 8, 8)).collect()).collect();
    let targets: Vec<LayerGrid> = stacks.iter().map(|s| s[2].clone()).collect();
    let config = TrainConfig {
        max_epochs: 1000,
        ..TrainConfig::default()
    };
    let (m, report) = fit_ensemble(EnsembleVariant::SLrFw, names(4), &stacks, &targets, &config).unwrap();
    assert!(report.final_loss < 1e-4, "{report:?}");
    let l2: f64 = stacks
        .iter()
        .zip(&targets)
        .map(|(s, t)| crate::grid::masked_l2(&m.forward(s).unwrap(), t).unwrap())
        .sum::<f64>()
        / 4.0;
    assert!(l2 < 1e-4);
}

#[test]
fn noise_candidate_gets_the_smallest_gate() {
    let mut wins = 0;
    for trial in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let mut stacks = Vec::new();
        let mut targets = Vec::new();
        for _ in 0..4 {
            let t = LayerGrid::from_fn(8, 8, |_, _| rng.random_range(0.2..0.8));
            let mut s: Vec<LayerGrid> = (0..3)
                .map(|_| LayerGrid::from_fn(8, 8, |x, y| t.value(x, y) + rng.random_range(-0.05..0.05)))
                .collect();
            s.insert(1, random_grid(&mut rng, 8, 8));
            stacks.push(s);
            targets.push(t);
        }
        let config = TrainConfig::default().with_seed(trial);
        let (m, _) = fit_ensemble(EnsembleVariant::SMean, names(4), &stacks, &targets, &config).unwrap();
        let s = m.gate().unwrap().weights();
        if s[1] < s[0].min(s[2]).min(s[3]) {
            wins += 1;
        }
    }
    assert!(wins > 10, "noise gate smallest in {wins}/20 trials");
}

#[test]
fn learned_variants_do_not_lose_to_plain_mean_on_training_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let stacks: Vec<Vec<LayerGrid>> = (0..3).map(|_| (0..4).map(|_| random_grid(&mut rng, 8, 6)).collect()).collect();
    let targets: Vec<LayerGrid> = stacks
        .iter()
        .map(|s| LayerGrid::from_fn(8, 6, |x, y| 0.7 * s[0].value(x, y) + 0.2 * s[3].value(x, y)))
        .collect();
    let config = TrainConfig {
        max_epochs: 30,
        ..TrainConfig::default()
    };
    let (_, plain) = fit_ensemble(EnsembleVariant::PlainMean, names(4), &stacks, &targets, &config).unwrap();
    for v in EnsembleVariant::ALL.into_iter().filter(|v| v.has_gate()) {
        let (m, report) = fit_ensemble(v, names(4), &stacks, &targets, &config).unwrap();
        assert!(report.final_loss <= plain.final_loss + 1e-6, "{v}: {} vs {}", report.final_loss, plain.final_loss);
        assert!((m.loss(&stacks, &targets).unwrap() - report.final_loss).abs() < 1e-12);
    }
}

#[test]
fn empty_labeled_set_is_rejected() {
    let r = fit_ensemble(EnsembleVariant::SMean, names(2), &[], &[], &TrainConfig::default());
    assert!(matches!(r, Err(Error::UndefinedObjective(_))));
}

#[test]
fn fitting_is_deterministic() {
    let (stacks, targets) = probe(40, 3);
    let config = TrainConfig {
        max_epochs: 10,
        seed: 4,
        ..TrainConfig::default()
    };
    let a = fit_ensemble(EnsembleVariant::SNnDpw, names(3), &stacks, &targets, &config).unwrap().0;
    let b = fit_ensemble(EnsembleVariant::SNnDpw, names(3), &stacks, &targets, &config).unwrap().0;
    assert_eq!(a.to_record().to_bytes(), b.to_record().to_bytes());
}

#[test]
fn channel_count_and_order_are_checked() {
    let stack = random_stack(9, 3, 4, 4);
    let m = EnsembleModel::new(EnsembleVariant::SNnD, names(4), 0);
    assert!(matches!(m.forward(&stack), Err(Error::Structural(_))));
    let m = EnsembleModel::new(EnsembleVariant::SMean, names(3), 0);
    let mut order = names(3);
    order.swap(0, 1);
    assert!(matches!(m.forward_named(&order, &stack), Err(Error::Structural(_))));
    assert!(m.forward_named(&names(3), &stack).is_ok());
}

#[test]
fn records_round_trip_for_every_variant() {
    for v in EnsembleVariant::ALL {
        let mut m = EnsembleModel::new(v, names(3), 8);
        m.perturb_parameters(1, 0.1);
        let bytes = m.to_record().to_bytes();
        let back = EnsembleModel::from_record(&ModelRecord::from_bytes(&bytes, "mem").unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(v.name().parse::<EnsembleVariant>().unwrap(), v);
    }
}

/// Values on a coarse dyadic lattice so every sum is exact whatever the
/// accumulation order.
fn dyadic_stack(seed: u64, c: usize) -> Vec<LayerGrid> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..c)
        .map(|_| LayerGrid::from_fn(4, 4, |_, _| rng.random_range(0..16) as f64 / 16.0))
        .collect()
}

fn dyadic_model(v: EnsembleVariant, c: usize, seed: u64) -> EnsembleModel {
    let mut m = EnsembleModel::new(v, names(c), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = if v.has_gate() { c } else { 0 };
    let params = m
        .parameters()
        .iter()
        .enumerate()
        .map(|(k, _)| if k < g { 0.0 } else { rng.random_range(-8i32..8) as f64 / 8.0 })
        .collect();
    m.set_parameters(params).unwrap();
    m
}

#[test]
fn permutation_is_bit_identical_on_dyadic_inputs() {
    let perm = [2, 0, 3, 1];
    for v in EnsembleVariant::ALL {
        let m = dyadic_model(v, 4, 3);
        let stack = dyadic_stack(5, 4);
        let permuted_stack: Vec<LayerGrid> = perm.iter().map(|&p| stack[p].clone()).collect();
        let a = m.forward_unclamped(&stack).unwrap();
        let b = m.permuted(&perm).unwrap().forward_unclamped(&permuted_stack).unwrap();
        assert_eq!(a.to_grd1_bytes(), b.to_grd1_bytes(), "{v}");
        assert_eq!(m.permuted(&perm).unwrap().candidate_order()[0], "cand2");
    }
}

#[test]
fn permuted_rejects_non_permutations() {
    let m = EnsembleModel::new(EnsembleVariant::SLrFw, names(3), 0);
    assert!(m.permuted(&[0, 0, 1]).is_err());
    assert!(m.permuted(&[0, 1]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn permutation_invariance_for_every_variant(seed in 0u64..1000, variant in 0usize..6, shift in 1usize..4) {
        let v = EnsembleVariant::ALL[variant];
        let mut m = EnsembleModel::new(v, names(4), seed);
        m.perturb_parameters(seed + 1, 0.5);
        let stack = random_stack(seed + 2, 4, 5, 4);
        let perm: Vec<usize> = (0..4).map(|k| (k + shift) % 4).collect();
        let permuted_stack: Vec<LayerGrid> = perm.iter().map(|&p| stack[p].clone()).collect();
        let a = m.forward_unclamped(&stack).unwrap();
        let b = m.permuted(&perm).unwrap().forward_unclamped(&permuted_stack).unwrap();
        for i in 0..a.len() {
            prop_assert!((a.values()[i] - b.values()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn normalized_means_stay_within_candidate_range(
        seed in 0u64..1000,
        alphas in proptest::collection::vec(-6.0f64..6.0, 3),
        holes in proptest::collection::vec(0usize..30, 0..20),
    ) {
        let mut stack = random_stack(seed, 3, 6, 5);
        let mut mask = vec![true; 30];
        holes.iter().for_each(|&h| mask[h] = false);
        stack[0] = stack[0].with_mask(mask).unwrap();
        let mut s = EnsembleModel::new(EnsembleVariant::SMean, names(3), 0);
        s.set_parameters(alphas).unwrap();
        let p = EnsembleModel::new(EnsembleVariant::PlainMean, names(3), 0);
        for m in [s, p] {
            let out = m.forward_unclamped(&stack).unwrap();
            for i in 0..30 {
                let vals: Vec<f64> = stack.iter().filter_map(|g| g.get(i)).collect();
                let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(out.values()[i] >= lo - 1e-12 && out.values()[i] <= hi + 1e-12);
            }
        }
    }
}
