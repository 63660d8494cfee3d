use super::*;
use crate::models::{init_params, param_distance, Activation};
use crate::stream::{EpisodeStream, Pools, StreamConfig};

fn small_net(seed: u64) -> NetSpec {
    NetSpec {
        input_dim: 16,
        hidden_dims: vec![32],
        output_dim: 5,
        activation: Activation::Relu,
        seed,
        shared_inner_lr: false,
    }
}

fn short_stream(len: usize, seed: u64) -> (StreamConfig, Vec<StepBatch>) {
    let cfg = StreamConfig {
        episode_length: len,
        ..StreamConfig::default_profile()
    };
    let pools = Pools::from_config(&cfg).unwrap();
    let batches = EpisodeStream::new(&cfg, &pools, seed)
        .unwrap()
        .map(|(b, _)| b)
        .collect();
    (cfg, batches)
}

fn bits(p: &ModelParams) -> Vec<u64> {
    p.flatten(true).iter().map(|v| v.to_bits()).collect()
}

#[test]
fn pretrain_zero_epochs_returns_init() {
    let net = small_net(3);
    let scfg = StreamConfig::default_profile();
    let pcfg = PretrainConfig {
        epochs: 0,
        ..Default::default()
    };
    let out = pretrain_maml(&net, &scfg, &pcfg).unwrap();
    let init = init_params(&net, pcfg.inner_lr_init).unwrap();
    assert_eq!(bits(&out.params), bits(&init));
    assert!(out.loss_curve.is_empty());
}

#[test]
fn pretrain_modes_agree_with_frozen_tiny_inner_lr() {
    // With inner step sizes at f64 underflow the inner update is exactly
    // zero, so first-order and exact meta-gradients coincide.
    let net = small_net(4);
    let scfg = StreamConfig::default_profile();
    let base = PretrainConfig {
        epochs: 3,
        inner_lr_init: 1e-300,
        ..Default::default()
    };
    let fo = pretrain_maml(
        &net,
        &scfg,
        &PretrainConfig {
            first_order: true,
            ..base.clone()
        },
    )
    .unwrap();
    let exact = pretrain_maml(
        &net,
        &scfg,
        &PretrainConfig {
            first_order: false,
            ..base
        },
    )
    .unwrap();
    assert_eq!(bits(&fo.params), bits(&exact.params));
}

#[test]
fn pretrain_meta_loss_decreases() {
    let net = small_net(5);
    let scfg = StreamConfig::default_profile();
    let pcfg = PretrainConfig {
        epochs: 200,
        ..Default::default()
    };
    let out = pretrain_maml(&net, &scfg, &pcfg).unwrap();
    let start: f64 = out.loss_curve[..10].iter().sum::<f64>() / 10.0;
    let end: f64 = out.loss_curve[out.loss_curve.len() - 10..]
        .iter()
        .sum::<f64>()
        / 10.0;
    assert!(end < start, "meta-loss did not improve: {start} -> {end}");
}

#[test]
fn cmaml_infinite_gamma_freezes_slow_weights() {
    let net = small_net(6);
    let phi = init_params(&net, 0.05).unwrap();
    let spec = LearnerSpec {
        gamma: f64::INFINITY,
        ..LearnerSpec::new(LearnerKind::Cmaml, 0.01)
    };
    let mut learner = make_learner(&spec, &net, Some(phi.clone()), 9).unwrap();
    let (_, batches) = short_stream(60, 9);
    for b in &batches {
        let diag = learner.update(b).unwrap();
        assert!(!diag.detected_boundary);
    }
    assert_eq!(bits(&learner.slow_params()), bits(&phi));
}

#[test]
fn cmaml_always_fire_with_empty_buffer_matches_no_pap_always_fire() {
    // gamma = -inf: every step is a detected boundary. The buffered variant
    // then never accumulates data (consolidation always skipped), and the
    // no-PAP variant never updates phi; both reduce to "reset theta one step
    // from phi on the current batch".
    let net = small_net(7);
    let phi = init_params(&net, 0.05).unwrap();
    let base = LearnerSpec {
        gamma: f64::NEG_INFINITY,
        ..LearnerSpec::new(LearnerKind::Cmaml, 0.01)
    };
    let spec_pap = base.clone();
    let spec_nopap = LearnerSpec {
        kind: LearnerKind::CmamlNoPap,
        ..base
    };
    let mut full = make_learner(&spec_pap, &net, Some(phi.clone()), 5).unwrap();
    let mut nopap = make_learner(&spec_nopap, &net, Some(phi.clone()), 5).unwrap();
    let (_, batches) = short_stream(40, 5);
    for b in &batches {
        let da = full.update(b).unwrap();
        let db = nopap.update(b).unwrap();
        assert!(da.detected_boundary && db.detected_boundary);
        assert_eq!(da.modulation, None);
        assert_eq!(db.modulation, None);
        let xa = full.predict(&b.x).unwrap();
        let xb = nopap.predict(&b.x).unwrap();
        assert!(xa.same_data(&xb));
    }
    assert_eq!(bits(&full.slow_params()), bits(&phi));
    assert_eq!(bits(&nopap.slow_params()), bits(&phi));
}

#[test]
fn no_pap_theta_depends_only_on_phi_and_current_batch() {
    let net = small_net(8);
    let phi = init_params(&net, 0.05).unwrap();
    let spec = LearnerSpec {
        gamma: f64::INFINITY, // never a boundary: phi updates every step
        ..LearnerSpec::new(LearnerKind::CmamlNoPap, 0.01)
    };
    let mut learner = make_learner(&spec, &net, Some(phi), 31).unwrap();
    let (_, batches) = short_stream(10, 31);
    for b in &batches {
        learner.update(b).unwrap();
    }
    // After any step, theta must equal one inner step from the PRE-update phi
    // on the current batch. Replay the last step from a state snapshot.
    let snapshot = learner.slow_params();
    let extra = &batches[5];
    let before = learner.slow_params();
    learner.update(extra).unwrap();
    let expect = crate::models::inner_adapt(
        &before,
        &extra.x,
        &crate::models::Target::Labels(&extra.y),
        &crate::models::AdaptOpts::default(),
    )
    .unwrap();
    let got_logits = learner.predict(&extra.x).unwrap();
    let want_logits = crate::models::forward(&expect, &extra.x).unwrap();
    assert!(got_logits.same_data(&want_logits));
    // phi moved (gamma = inf never detects, so the modulated update ran).
    assert!(param_distance(&snapshot, &learner.slow_params()).unwrap() > 0.0);
}

#[test]
fn maml_slow_weights_frozen_over_episode() {
    let net = small_net(10);
    let phi = init_params(&net, 0.05).unwrap();
    let spec = LearnerSpec::new(LearnerKind::Maml, 0.01);
    let mut learner = make_learner(&spec, &net, Some(phi.clone()), 12).unwrap();
    let (_, batches) = short_stream(50, 12);
    for b in &batches {
        learner.update(b).unwrap();
    }
    assert_eq!(bits(&learner.slow_params()), bits(&phi));
}

#[test]
fn anil_fast_weights_move_head_only() {
    let net = small_net(11);
    let phi = init_params(&net, 0.05).unwrap();
    let spec = LearnerSpec::new(LearnerKind::Anil, 0.01);
    let mut learner = make_learner(&spec, &net, Some(phi.clone()), 13).unwrap();
    let (_, batches) = short_stream(5, 13);
    for b in &batches {
        learner.update(b).unwrap();
    }
    // Probe the fast weights through a body-sensitive input: since only the
    // head adapts, hidden activations equal the frozen net's.
    let x = &batches[0].x;
    let got = learner.predict(x).unwrap();
    // Reconstruct: head-only adaptation from phi on the last batch.
    let last = batches.last().unwrap();
    let theta = crate::models::inner_adapt(
        &phi,
        &last.x,
        &crate::models::Target::Labels(&last.y),
        &crate::models::AdaptOpts {
            head_only: true,
            ..Default::default()
        },
    )
    .unwrap();
    let want = crate::models::forward(&theta, x).unwrap();
    assert!(got.same_data(&want));
}

#[test]
fn checkpoint_required_kinds_error_without_one() {
    let net = small_net(12);
    for kind in [
        LearnerKind::Maml,
        LearnerKind::Anil,
        LearnerKind::FineTuning,
    ] {
        let spec = LearnerSpec::new(kind, 0.01);
        assert!(matches!(
            make_learner(&spec, &net, None, 1),
            Err(AlgoError::Config(_))
        ));
    }
    // cmaml runs from scratch when no checkpoint is given.
    let spec = LearnerSpec::new(LearnerKind::Cmaml, 0.01);
    assert!(make_learner(&spec, &net, None, 1).is_ok());
}

#[test]
fn update_modulation_disabled_pins_factor_to_one() {
    let net = small_net(13);
    let phi = init_params(&net, 0.05).unwrap();
    let spec = LearnerSpec {
        update_modulation: false,
        gamma: f64::NEG_INFINITY,
        ..LearnerSpec::new(LearnerKind::CmamlNoPap, 0.01)
    };
    // NoPap with always-fire never updates; use never-fire to see factors.
    let spec = LearnerSpec {
        gamma: f64::INFINITY,
        ..spec
    };
    let mut learner = make_learner(&spec, &net, Some(phi), 17).unwrap();
    let (_, batches) = short_stream(8, 17);
    for b in &batches {
        let diag = learner.update(b).unwrap();
        assert_eq!(diag.modulation, Some(1.0));
    }
}

#[test]
fn predict_precedes_feedback() {
    // The prediction at step t must not depend on (x_t, y_t) labels: swap the
    // labels of the final batch and check the prediction is unchanged.
    let net = small_net(14);
    let (_, batches) = short_stream(6, 40);
    let specs = [
        LearnerSpec::new(LearnerKind::OnlineAdam, 0.01),
        LearnerSpec::new(LearnerKind::Cmaml, 0.01),
        LearnerSpec::new(LearnerKind::MetaBgd, 0.01),
    ];
    for spec in specs {
        let run = |tweak_last: bool| {
            let mut learner = make_learner(&spec, &net, None, 77).unwrap();
            for b in &batches[..5] {
                learner.update(b).unwrap();
            }
            let mut last = batches[5].clone();
            if tweak_last {
                for y in last.y.iter_mut() {
                    *y = (*y + 1) % 5;
                }
            }
            learner.predict(&last.x).unwrap()
        };
        let a = run(false);
        let b = run(true);
        assert!(
            a.same_data(&b),
            "{}: prediction at t reads the step-t labels",
            spec.kind.as_str()
        );
    }
}

#[test]
fn cmaml_buffer_spans_one_detected_segment() {
    // The buffer accumulates exactly the batches since the last detected
    // boundary: it grows by one on every no-shift step and is empty right
    // after a detection (the boundary batch is not appended).
    use super::cmaml::{cmaml_step, CmamlConfig, CmamlState};
    let net = small_net(77);
    let phi = init_params(&net, 0.05).unwrap();
    // Small threshold so the detector fires from a scratch initialization.
    let cfg = CmamlConfig { eta: 0.01, gamma: 0.25, ..Default::default() };
    let mut state = CmamlState::new(phi, crate::stream::seeded_rng(4, rng_streams::LEARNER));
    // A switch-heavy stream so both branches run.
    let cfg_stream =
        StreamConfig { alpha: 0.9, episode_length: 250, ..StreamConfig::default_profile() };
    let pools = Pools::from_config(&cfg_stream).unwrap();
    let batches: Vec<StepBatch> = EpisodeStream::new(&cfg_stream, &pools, 4)
        .unwrap()
        .map(|(b, _)| b)
        .collect();
    let mut since_detection = 0usize;
    let mut detections = 0usize;
    for b in &batches {
        let diag = cmaml_step(&mut state, &cfg, b).unwrap();
        if diag.detected_boundary {
            since_detection = 0;
            detections += 1;
        } else {
            since_detection += 1;
        }
        assert_eq!(state.buffer.len(), since_detection);
    }
    assert!(detections > 0, "no boundary ever detected in 250 steps");
    assert!(
        detections < batches.len(),
        "every step detected; the partition is trivial"
    );
}

#[test]
fn sinusoid_regression_smoke() {
    // MSE mode on the optional regression family: plain ADAM training on a
    // fixed sine task drives the loss down.
    use crate::models::{batch_loss, forward, init_params, Target};
    use crate::ndcore::Tape;
    use crate::stream::sinusoid::SineTask;

    let net = NetSpec {
        input_dim: 1,
        hidden_dims: vec![16, 16],
        output_dim: 1,
        activation: crate::models::Activation::Tanh,
        seed: 21,
        shared_inner_lr: false,
    };
    let mut params = init_params(&net, 0.05).unwrap();
    let mut rng = seeded_rng(3, rng_streams::EPISODE);
    let task = SineTask::draw(&mut rng);
    let (x, y) = task.sample(64, &mut rng);

    let mut adam = AdamState::new(params.weight_count());
    let mut losses = Vec::new();
    for _ in 0..300 {
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let out = forward(&bound, &x).unwrap();
        let loss = batch_loss(&out, &Target::Values(&y)).unwrap();
        losses.push(loss.item().unwrap());
        let wrt: Vec<&crate::ndcore::Tensor> =
            bound.layers.iter().flat_map(|l| [&l.w, &l.b]).collect();
        let grads = tape.grad_wrt(&loss, &wrt, false).unwrap();
        let flat_g: Vec<f64> = grads
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect();
        let mut flat = params.flatten(false);
        adam_step(&mut adam, &mut flat, &flat_g, 0.01).unwrap();
        params.load_flat(&flat, false).unwrap();
    }
    assert!(
        losses.last().unwrap() < &(losses[0] * 0.2),
        "sine regression did not improve: {} -> {}",
        losses[0],
        losses.last().unwrap()
    );
}

#[test]
fn learners_are_deterministic() {
    let net = small_net(15);
    let (_, batches) = short_stream(20, 55);
    for kind in [
        LearnerKind::OnlineAdam,
        LearnerKind::Bgd,
        LearnerKind::MetaBgd,
        LearnerKind::Cmaml,
        LearnerKind::CmamlNoPap,
    ] {
        let spec = LearnerSpec::new(kind, 0.01);
        let run = || {
            let mut learner = make_learner(&spec, &net, None, 91).unwrap();
            let mut out = Vec::new();
            for b in &batches {
                let d = learner.update(b).unwrap();
                out.push((d.loss.to_bits(), d.accuracy.to_bits(), d.detected_boundary));
            }
            out
        };
        assert_eq!(run(), run(), "{} not deterministic", kind.as_str());
    }
}
