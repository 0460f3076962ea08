mod common;

use common::{tiny_bench, tiny_cfg};
use egoprompt_core::data::Split;
use egoprompt_core::model::ParamGroup;
use egoprompt_core::trainer::{
    adamw_step, load_checkpoint, lr_at_step, save_checkpoint, AdamW, Checkpoint, LogEvent, OptimizerState,
    TrainConfig, Trainer, Variant,
};
use egoprompt_core::{Error, Tensor};

fn names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("p{i}")).collect()
}

#[test]
fn adamw_first_step_matches_closed_form() {
    let opt = AdamW {
        beta1: 0.9,
        beta2: 0.98,
        eps: 1e-8,
        weight_decay: 0.0,
    };
    let p0 = [1.0f64, -2.0, 0.5];
    let g = [0.5f64, -0.25, 1e-3];
    let mut p = Tensor::vector(p0.to_vec());
    let mut state = OptimizerState::new(&[3]);
    adamw_step(&mut [&mut p], &[g.to_vec()], &names(1), &mut state, 1e-3, &opt).unwrap();
    for i in 0..3 {
        // bias-corrected moments equal g and g^2 after one step
        let expected = p0[i] - 1e-3 * g[i] / (g[i].abs() + 1e-8);
        assert!((p.data()[i] - expected).abs() < 1e-12, "{i}: {} vs {expected}", p.data()[i]);
    }
    assert_eq!(state.step, 1);
}

#[test]
fn adamw_weight_decay_is_decoupled() {
    let opt = AdamW {
        beta1: 0.9,
        beta2: 0.98,
        eps: 1e-8,
        weight_decay: 0.01,
    };
    let mut p = Tensor::vector(vec![2.0f64]);
    let mut state = OptimizerState::new(&[1]);
    adamw_step(&mut [&mut p], &[vec![0.0]], &names(1), &mut state, 0.1, &opt).unwrap();
    assert!((p.data()[0] - (2.0 - 0.1 * 0.01 * 2.0)).abs() < 1e-12);
}

#[test]
fn adamw_rejects_non_finite_gradients_without_touching_parameters() {
    let opt = AdamW::from_config(&TrainConfig::default());
    let mut a = Tensor::vector(vec![1.0f32, 2.0]);
    let mut b = Tensor::vector(vec![3.0f32]);
    let mut state = OptimizerState::new(&[2, 1]);
    let err = adamw_step(
        &mut [&mut a, &mut b],
        &[vec![0.1, 0.2], vec![f32::NAN]],
        &names(2),
        &mut state,
        1e-3,
        &opt,
    )
    .unwrap_err();
    assert!(matches!(err, Error::NonFiniteGradient { ref param, .. } if param == "p1"), "{err}");
    assert_eq!(a.data(), &[1.0, 2.0]);
    assert_eq!(b.data(), &[3.0]);
    assert_eq!(state.step, 0);
}

#[test]
fn warmup_schedule_examples() {
    let cfg = TrainConfig::default();
    let spe = 10;
    let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
    assert!(close(lr_at_step(0, spe, &cfg), 2e-5));
    assert!(close(lr_at_step(10, spe, &cfg), 6e-5));
    assert!(close(lr_at_step(20, spe, &cfg), 1e-4));
    assert!(close(lr_at_step(57, spe, &cfg), 1e-4));
    let slope = (1e-4 - 2e-5) / 20.0;
    for s in 0..40 {
        let jump = lr_at_step(s + 1, spe, &cfg) - lr_at_step(s, spe, &cfg);
        assert!(jump >= -1e-15 && jump <= slope + 1e-15, "step {s}: {jump}");
    }
}

#[test]
fn zero_epochs_leave_parameters_unchanged() {
    let bench = tiny_bench(0);
    let mut cfg = tiny_cfg();
    cfg.epochs_stage1 = 0;
    cfg.epochs_stage2 = 0;
    let mut t = Trainer::<f32>::new(cfg, &bench).unwrap();
    let before = t.model.clone();
    t.run_variant(bench.split(Split::Train)).unwrap();
    assert_eq!(t.model, before);
    assert_eq!(t.steps_done, 0);
}

#[test]
fn stage1_loss_decreases() {
    let bench = tiny_bench(1);
    let mut t = Trainer::<f32>::new(tiny_cfg(), &bench).unwrap();
    let s = t.train_stage1(bench.split(Split::Train)).unwrap();
    assert_eq!(s.epochs, 3);
    assert_eq!(s.steps, 3 * 6);
    assert!(s.epoch_losses.last().unwrap() < &s.epoch_losses[0], "{:?}", s.epoch_losses);
}

#[test]
fn two_stage_freeze_contracts_hold() {
    let bench = tiny_bench(2);
    let mut t = Trainer::<f32>::new(tiny_cfg(), &bench).unwrap();
    t.run_variant(bench.split(Split::Train)).unwrap();
    assert!(t.freeze_holds());
    assert_eq!(t.freeze.len(), 2 * ParamGroup::ALL.len());
    for r in &t.freeze {
        if r.trainable {
            assert_ne!(r.checksum_before, r.checksum_after, "{r:?}");
            assert!(r.max_grad_norm == 0.0);
        } else {
            assert_eq!(r.max_grad_norm, 0.0, "{r:?}");
            assert_eq!(r.checksum_before, r.checksum_after, "{r:?}");
        }
    }
    let stage2_prompts = t
        .freeze
        .iter()
        .find(|r| r.phase.name() == "stage2" && r.group == ParamGroup::VerbPrompts)
        .unwrap();
    assert!(!stage2_prompts.on_tape);
}

#[test]
fn selection_counters_sum_to_samples_times_k() {
    let bench = tiny_bench(3);
    let cfg = tiny_cfg();
    let n = bench.split(Split::Train).len() as u64;
    let mut t = Trainer::<f32>::new(cfg.clone(), &bench).unwrap();
    t.train_stage2(bench.split(Split::Train)).unwrap();
    let mut epochs = 0;
    for e in &t.log {
        if let LogEvent::Epoch {
            counters: Some(c), ..
        } = e
        {
            epochs += 1;
            for comp in c {
                assert_eq!(comp.iter().sum::<u64>(), n * cfg.k as u64);
            }
        }
    }
    assert_eq!(epochs, cfg.epochs_stage2);
}

#[test]
fn identical_runs_are_byte_identical() {
    let bench = tiny_bench(4);
    let run = || {
        let mut t = Trainer::<f32>::new(tiny_cfg(), &bench).unwrap();
        let ck = t.run_variant(bench.split(Split::Train)).unwrap();
        let bytes: Vec<Vec<u8>> = ck.iter().map(|c| c.to_bytes().unwrap()).collect();
        (bytes, t.log_lines().unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn checkpoint_round_trip_is_byte_exact() {
    let bench = tiny_bench(5);
    let mut t = Trainer::<f32>::new(tiny_cfg(), &bench).unwrap();
    let ck = t.run_variant(bench.split(Split::Train)).unwrap();
    for c in &ck {
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(&back, c);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stage2.ckpt");
    save_checkpoint(&ck[1], &path).unwrap();
    let loaded = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(loaded.model.pool.counters, ck[1].model.pool.counters);
    assert_eq!(loaded.to_bytes().unwrap(), ck[1].to_bytes().unwrap());
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let bench = tiny_bench(6);
    let mut cfg = tiny_cfg();
    cfg.epochs_stage2 = 2;
    let mut t = Trainer::<f32>::new(cfg, &bench).unwrap();
    let ck = t.run_variant(bench.split(Split::Train)).unwrap();
    let bytes = ck[1].to_bytes().unwrap();
    let mut state = 0x9e3779b97f4a7c15u64;
    for _ in 0..20 {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let pos = (state >> 16) as usize % bytes.len();
        let mut bad = bytes.clone();
        bad[pos] ^= 1 << ((state >> 8) % 8);
        assert!(Checkpoint::<f32>::from_bytes(&bad).is_err(), "flip at {pos} accepted");
    }
    let err = Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 10]).unwrap_err();
    assert!(matches!(err, Error::Truncated { .. } | Error::Checksum { .. }), "{err}");
}

#[test]
fn stage2_resumed_from_a_stage1_checkpoint_matches_a_continuous_run() {
    let bench = tiny_bench(7);
    let train = bench.split(Split::Train);
    let mut full = Trainer::<f32>::new(tiny_cfg(), &bench).unwrap();
    let ck = full.run_variant(train).unwrap();
    let stage1 = Checkpoint::<f32>::from_bytes(&ck[0].to_bytes().unwrap()).unwrap();
    let mut resumed = Trainer::from_checkpoint(stage1);
    resumed.train_stage2(train).unwrap();
    assert_eq!(resumed.checkpoint(2).to_bytes().unwrap(), ck[1].to_bytes().unwrap());
}

#[test]
fn divergence_restores_the_last_good_model() {
    let bench = tiny_bench(8);
    let mut cfg = tiny_cfg();
    cfg.divergence_threshold = 1e-6;
    let mut t = Trainer::<f32>::new(cfg, &bench).unwrap();
    let before = t.model.clone();
    let err = t.train_stage1(bench.split(Split::Train)).unwrap_err();
    assert!(matches!(err, Error::Diverged { stage: 1, step: 0, .. }), "{err}");
    assert_eq!(t.model, before);
}

#[test]
fn config_constraints_name_the_key() {
    let mut cfg = TrainConfig::default();
    cfg.k = 20;
    match cfg.validate().unwrap_err() {
        Error::Config { key, .. } => assert_eq!(key, "train.k"),
        e => panic!("{e}"),
    }
    let err = "three-stage".parse::<Variant>().unwrap_err();
    assert!(matches!(err, Error::Config { ref key, .. } if key == "train.variant"));
    let json = r#"{"lr": 1e-3, "pool_sise": 8}"#;
    assert!(serde_json::from_str::<TrainConfig>(json).is_err());
    let cfg: TrainConfig = serde_json::from_str(r#"{"pool_size": 8}"#).unwrap();
    assert_eq!((cfg.pool_size, cfg.lr, cfg.weight_decay), (8, 1e-4, 0.01));
}

#[test]
fn geometry_mismatch_is_a_dimension_error() {
    let bench = tiny_bench(0);
    let err = Trainer::<f32>::new(TrainConfig::default(), &bench).unwrap_err();
    assert!(matches!(err, Error::Dimension { .. }), "{err}");
}

#[test]
fn every_variant_trains_the_expected_checkpoints() {
    let bench = tiny_bench(9);
    for v in Variant::ALL {
        let mut cfg = tiny_cfg();
        cfg.variant = v;
        let mut t = Trainer::<f32>::new(cfg, &bench).unwrap();
        let ck = t.run_variant(bench.split(Split::Train)).unwrap();
        let stages: Vec<u8> = ck.iter().map(|c| c.header.stage).collect();
        let expected: &[u8] = match v {
            Variant::Stage1Only => &[1],
            Variant::TwoStage => &[1, 2],
            _ => &[2],
        };
        assert_eq!(stages, expected, "{v}");
        assert!(t.freeze_holds(), "{v}");
    }
}
