use moelab_core::balance::aux_loss;
use moelab_core::routing::ec_capacity;
use moelab_lm::check::{gradcheck_config, gradient_check, prefix_routing_consistent, random_batch, randomize_params};
use moelab_lm::graph::Graph;
use moelab_lm::train::sample_batch;
use moelab_lm::{LmError, Model, ModelConfig, RouterSettings, RouterState, RoutingControl, RoutingMode, TrainPlan, Trainer};

fn warm_et(config: ModelConfig, seed: u64) -> Model<f64> {
    let settings = RouterSettings { et_warmup_steps: 0, ..RouterSettings::default() };
    let mut m = Model::<f64>::new(config.clone(), settings, seed).unwrap();
    randomize_params(&mut m, seed);
    for s in 0..3 {
        let mut g = Graph::new();
        m.forward(&mut g, &random_batch(100 + s, 4, config.seq_len, config.vocab_size), &RoutingControl::Train, 0.0)
            .unwrap();
    }
    m
}

#[test]
fn full_model_gradients_match_finite_differences() {
    for mode in RoutingMode::ALL {
        let r = gradient_check(gradcheck_config(mode), 0.01, 3, 1e-5).unwrap();
        assert!(r.max_rel_err < 1e-3, "{mode}: {r:?}");
        assert!(r.n_checked > 5000);
    }
}

#[test]
fn gate_gradient_on_two_tokens_two_experts() {
    let cfg = ModelConfig {
        n_layers: 1,
        d_model: 4,
        n_heads: 2,
        vocab_size: 8,
        seq_len: 1,
        n_routed_experts: 2,
        granularity: 1,
        expansion: 2,
        expert_dim: 4,
        routing_mode: RoutingMode::Tc,
        first_layer_dense: false,
        ..ModelConfig::default()
    };
    let r = gradient_check(cfg, 0.0, 11, 1e-5).unwrap();
    assert!(r.max_rel_err < 1e-4, "{r:?}");
}

#[test]
fn future_tokens_do_not_change_past_logits() {
    for mode in [RoutingMode::Dense, RoutingMode::Tc, RoutingMode::Et] {
        let cfg = ModelConfig { seq_len: 16, ..gradcheck_config(mode) };
        let mut m = warm_et(cfg.clone(), 4);
        let batch = random_batch(9, 1, 16, cfg.vocab_size);
        let logits = |m: &mut Model<f64>, b| {
            let mut g = Graph::new();
            let f = m.forward(&mut g, b, &RoutingControl::Eval, 0.0).unwrap();
            g.value(f.logits).data.clone()
        };
        let base = logits(&mut m, &batch);
        let t = 9;
        let mut pert = batch.clone();
        pert.inputs[t + 1] = (pert.inputs[t + 1] + 5) % cfg.vocab_size;
        let other = logits(&mut m, &pert);
        let v = cfg.vocab_size;
        assert_eq!(&base[..(t + 1) * v], &other[..(t + 1) * v], "{mode}");
        assert_ne!(&base[(t + 1) * v..], &other[(t + 1) * v..], "{mode}");
    }
}

#[test]
fn threshold_routing_matches_token_by_token_generation() {
    for mode in [RoutingMode::Et, RoutingMode::Ec, RoutingMode::Tc, RoutingMode::TcLossfree] {
        let cfg = ModelConfig { seq_len: 12, ..gradcheck_config(mode) };
        let mut m = warm_et(cfg.clone(), 8);
        let batch = random_batch(21, 2, 12, cfg.vocab_size);
        let compared = prefix_routing_consistent(&mut m, &batch).unwrap();
        assert!(compared.is_some(), "{mode}");
    }
}

#[test]
fn same_seed_same_parameters_and_first_loss() {
    let cfg = gradcheck_config(RoutingMode::Et);
    let plan = TrainPlan { batch_size: 2, seq_len: 8, seed: 42, ..TrainPlan::desk(10, &cfg) };
    let stream: Vec<usize> = (0..400).map(|i| (i * 13 + i / 7) % 32).collect();
    let run = || {
        let mut t = Trainer::<f32>::new(plan.clone(), cfg.clone()).unwrap();
        let params = t.model.params().to_vec();
        let b = sample_batch(&stream, 2, 8, 42, 0).unwrap();
        let rec = t.train_step(&b).unwrap();
        (params, rec.ce_loss.to_bits(), t.model.params().to_vec())
    };
    let (p1, l1, q1) = run();
    let (p2, l2, q2) = run();
    assert_eq!(p1, p2);
    assert_eq!(l1, l2);
    assert_eq!(q1, q2);
}

#[test]
fn shared_expert_alone_still_learns() {
    let cfg = gradcheck_config(RoutingMode::Et);
    let mut m = warm_et(cfg.clone(), 2);
    for p in m.params_mut() {
        if p.name.contains(".expert") || p.name == "head" || p.name.ends_with(".down") {
            let zero = p.name.contains(".expert");
            p.data.iter_mut().for_each(|x| *x = if zero { 0.0 } else { 0.01 });
        }
    }
    let mut g = Graph::new();
    let f = m.forward(&mut g, &random_batch(5, 2, 8, 32), &RoutingControl::Train, 0.0).unwrap();
    assert!(g.scalar(f.loss).is_finite());
    g.backward(f.loss).unwrap();
    let shared_up = m.params().iter().position(|p| p.name == "l1.shared.up").unwrap();
    assert!(g.grad(f.params[shared_up]).unwrap().iter().any(|&x| x != 0.0));
}

#[test]
fn unreachable_cutoffs_leave_only_the_shared_expert() {
    let cfg = gradcheck_config(RoutingMode::Et);
    let mut m = warm_et(cfg.clone(), 6);
    for r in m.routers_mut() {
        if let RouterState::Threshold(t) = r {
            t.cutoffs.iter_mut().for_each(|c| *c = 1e9);
        }
    }
    let batch = random_batch(7, 2, 8, 32);
    let logits = |m: &mut Model<f64>| {
        let mut g = Graph::new();
        let f = m.forward(&mut g, &batch, &RoutingControl::Eval, 0.0).unwrap();
        assert_eq!(f.moe[0].kept.total_selected(), 0);
        g.value(f.logits).data.clone()
    };
    let before = logits(&mut m);
    for p in m.params_mut() {
        if p.name.contains(".expert") {
            p.data.iter_mut().for_each(|x| *x += 1.0);
        }
    }
    assert_eq!(before, logits(&mut m));
}

#[test]
fn aux_term_is_exactly_alpha_f_p() {
    let cfg = ModelConfig { n_layers: 3, ..gradcheck_config(RoutingMode::TcAux) };
    let mut m = Model::<f64>::new(cfg, RouterSettings::default(), 1).unwrap();
    let mut g = Graph::new();
    let alpha = 0.001;
    let f = m.forward(&mut g, &random_batch(3, 4, 8, 32), &RoutingControl::Train, alpha).unwrap();
    let want: f64 = f.moe.iter().map(|r| aux_loss(&r.stats, alpha)).sum();
    assert_eq!(f.moe.len(), 2);
    let diff = g.scalar(f.loss) - g.scalar(f.ce);
    assert!((diff - want).abs() < 1e-15, "{diff} vs {want}");
    assert!(want > 0.0);
}

#[test]
fn loss_free_bias_changes_selection_not_gates() {
    let cfg = gradcheck_config(RoutingMode::TcLossfree);
    let mut m = Model::<f64>::new(cfg, RouterSettings::default(), 2).unwrap();
    let batch = random_batch(4, 4, 8, 32);
    let run = |m: &mut Model<f64>| {
        let mut g = Graph::new();
        m.forward(&mut g, &batch, &RoutingControl::Eval, 0.0).unwrap().moe.remove(0)
    };
    let unbiased = run(&mut m);
    if let RouterState::Bias(b) = &mut m.routers_mut()[0] {
        b.bias = vec![5.0, 0.0, 0.0, 0.0];
    }
    let biased = run(&mut m);
    assert_eq!(unbiased.kept.gates(), biased.kept.gates());
    assert_ne!(unbiased.kept.mask(), biased.kept.mask());
    assert_eq!(biased.kept.column_sum(0), 32);
}

#[test]
fn expert_choice_training_loads_are_exact() {
    let cfg = gradcheck_config(RoutingMode::Ec);
    let plan = TrainPlan { batch_size: 4, seq_len: 8, ..TrainPlan::desk(20, &cfg) };
    let mut t = Trainer::<f64>::new(plan, cfg).unwrap();
    let stream: Vec<usize> = (0..600).map(|i| (i * 11 + i / 5) % 32).collect();
    let k = ec_capacity(32, 4).unwrap();
    for s in 0..20 {
        let b = sample_batch(&stream, 4, 8, 0, s).unwrap();
        let mut g = Graph::new();
        let f = t.model.forward(&mut g, &b, &RoutingControl::Train, 0.0).unwrap();
        assert_eq!(f.moe[0].raw.column_sums(), vec![k; 4]);
        t.train_step(&b).unwrap();
    }
}

#[test]
fn identical_plans_give_identical_loss_series() {
    let cfg = gradcheck_config(RoutingMode::TcLossfree);
    let plan = TrainPlan { batch_size: 2, seq_len: 8, eval_batches: 1, eval_every: 5, seed: 9, ..TrainPlan::desk(15, &cfg) };
    let stream: Vec<usize> = (0..800).map(|i| (i * 31 + i / 3) % 32).collect();
    let series = || {
        let mut t = Trainer::<f32>::new(plan.clone(), cfg.clone()).unwrap();
        let mut out = Vec::new();
        t.run(&stream[..600], &stream[600..], |r, _| {
            out.push((r.step, r.split, r.ce_loss.to_bits()));
            Ok(())
        })
        .unwrap();
        out
    };
    let a = series();
    assert_eq!(a, series());
    assert_eq!(a.len(), 15 + 3);
}

#[test]
fn non_finite_loss_aborts_without_touching_parameters() {
    let cfg = gradcheck_config(RoutingMode::Et);
    let plan = TrainPlan { batch_size: 2, seq_len: 8, ..TrainPlan::desk(10, &cfg) };
    let mut t = Trainer::<f32>::new(plan, cfg).unwrap();
    let stream: Vec<usize> = (0..400).map(|i| i % 32).collect();
    t.train_step(&sample_batch(&stream, 2, 8, 0, 0).unwrap()).unwrap();
    t.model.params_mut()[0].data[0] = f32::NAN;
    let params = t.model.params().to_vec();
    let routers = t.model.routers().to_vec();
    let b = sample_batch(&stream, 2, 8, 0, 1).unwrap();
    // Token 0 must be present for the poisoned row to matter.
    let mut b = b;
    b.inputs[0] = 0;
    let err = t.train_step(&b).unwrap_err();
    assert!(matches!(err, LmError::NonFinite(_)), "{err:?}");
    assert_eq!(t.step, 1);
    assert_eq!(t.model.routers(), routers.as_slice());
    let same = t.model.params().iter().zip(&params).all(|(a, b)| {
        a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits())
    });
    assert!(same);
}
