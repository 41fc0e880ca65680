use mutualseg::data::{synthesize_dataset, LabelMap, Modality, ModalityStyle, PhantomSpec};
use mutualseg::eval::ExperimentData;
use mutualseg::nn::Tensor;
use mutualseg::optim::{AdamConfig, OptimizerState};
use mutualseg::models::{build_network, NetworkSpec};
use mutualseg::trainer::{
    checkpoint_load, checkpoint_save, decay_segmentor_lr, run_training, Batch, NetId, Trainer,
    TrainingConfig, TrainingMode,
};
use mutualseg::Error;

fn small_data(seed: u64) -> ExperimentData {
    ExperimentData::phantom(16, 3, 4, 3, 2, ModalityStyle::B, 5, seed).unwrap()
}

#[test]
fn zero_epochs_returns_initial_networks() {
    let data = small_data(0);
    for mode in TrainingMode::ALL {
        let cfg = TrainingConfig { epochs: 0, mode, ..Default::default() };
        let fresh = Trainer::<f64>::new(cfg.clone(), 3, 16).unwrap();
        let (t, log) = run_training::<f64>(&data.target_train, &data.assistant, &cfg).unwrap();
        assert_eq!(t.fingerprints(), fresh.fingerprints(), "{mode:?}");
        assert!(log.is_empty());
    }
}

#[test]
fn segmentor_lr_decays_only_for_segmentors() {
    let data = small_data(1);
    let cfg = TrainingConfig { epochs: 4, ..Default::default() };
    let (t, _) = run_training::<f32>(&data.target_train, &data.assistant, &cfg).unwrap();
    let expected = cfg.lr * 0.9f64.powi(2);
    for id in [NetId::SegSyn, NetId::SegReal] {
        assert!((t.optimizer(id).lr - expected).abs() < 1e-15, "{id:?}: {}", t.optimizer(id).lr);
    }
    for id in [NetId::GenA2T, NetId::GenT2A, NetId::DiscT, NetId::DiscA] {
        assert_eq!(t.optimizer(id).lr, cfg.lr, "{id:?}");
    }
}

#[test]
fn decay_schedule_examples() {
    let net = build_network::<f32>(NetworkSpec::segmentor(4, 1, 3), 0).unwrap();
    let mut opt = OptimizerState::new(&net, AdamConfig::standard(2e-4));
    let cfg = TrainingConfig::default();
    for (epoch, lr) in [(0, 2e-4), (1, 2e-4), (2, 1.8e-4), (3, 1.8e-4), (10, 2e-4 * 0.9f64.powi(5))] {
        decay_segmentor_lr(&mut opt, epoch, &cfg);
        assert!((opt.lr - lr).abs() < 1e-15, "epoch {epoch}: {}", opt.lr);
    }
}

#[test]
fn baseline_never_reads_assistant_data() {
    let data = small_data(2);
    let cfg = TrainingConfig { epochs: 2, mode: TrainingMode::Baseline, ..Default::default() };
    run_training::<f32>(&data.target_train, &data.assistant, &cfg).unwrap();
    assert_eq!(data.assistant.read_count(), 0);
    assert!(data.target_train.read_count() > 0);

    let cfg = TrainingConfig { mode: TrainingMode::Mkd, ..cfg };
    run_training::<f32>(&data.target_train, &data.assistant, &cfg).unwrap();
    assert!(data.assistant.read_count() > 0);
}

#[test]
fn every_mode_trains() {
    let data = small_data(3);
    for mode in TrainingMode::ALL {
        let cfg = TrainingConfig { epochs: 1, mode, ..Default::default() };
        let (t, log) = run_training::<f32>(&data.target_train, &data.assistant, &cfg).unwrap();
        let per_epoch = data.target_train.len();
        let expected = if mode == TrainingMode::FineTune { per_epoch + data.assistant.len() } else { per_epoch };
        assert_eq!(log.len(), expected, "{mode:?}");
        let fresh = Trainer::<f32>::new(cfg, 3, 16).unwrap();
        let real = NetId::SegReal as usize;
        assert_ne!(t.fingerprints()[real], fresh.fingerprints()[real], "{mode:?}");
        let moved: Vec<bool> = (0..6).map(|i| t.fingerprints()[i] != fresh.fingerprints()[i]).collect();
        assert_eq!(moved[NetId::SegSyn as usize], mode.is_mutual(), "{mode:?}");
        assert_eq!(moved[NetId::GenA2T as usize], mode.uses_alignment(), "{mode:?}");
    }
}

#[test]
fn mode_reductions_zero_one_distillation_weight() {
    let cfg = |mode| TrainingConfig { mode, ..Default::default() };
    assert_eq!(cfg(TrainingMode::KdR2sOnly).effective_kd(), (0.0, 1.0));
    assert_eq!(cfg(TrainingMode::KdS2rOnly).effective_kd(), (0.5, 0.0));
    assert_eq!(cfg(TrainingMode::Mkd).effective_kd(), (0.5, 1.0));
}

#[test]
fn checkpoint_round_trip_and_truncation() {
    let data = small_data(4);
    let cfg = TrainingConfig { epochs: 1, ..Default::default() };
    let (t, _) = run_training::<f64>(&data.target_train, &data.assistant, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.ckpt");
    checkpoint_save(&t, &path).unwrap();
    let back = checkpoint_load::<f64>(&path).unwrap();
    assert_eq!(back.fingerprints(), t.fingerprints());
    assert_eq!(back.iteration(), t.iteration());
    assert_eq!(back.epoch(), t.epoch());
    assert_eq!(back.config(), t.config());

    let bytes = std::fs::read(&path).unwrap();
    let cut = dir.path().join("cut.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(checkpoint_load::<f64>(&cut), Err(Error::Checkpoint(_))));

    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x40;
    std::fs::write(&cut, &flipped).unwrap();
    assert!(checkpoint_load::<f64>(&cut).is_err());

    assert!(checkpoint_load::<f32>(&path).is_err(), "dtype mismatch must be rejected");
}

#[test]
fn non_finite_loss_names_term_and_iteration() {
    let n = 16;
    let mut img = vec![0.1f64; n * n];
    img[7] = f64::NAN;
    let batch = Batch {
        images: vec![Tensor::from_vec(1, n, n, img).unwrap()],
        labels: vec![LabelMap::filled(n, n, 1)],
    };
    let cfg = TrainingConfig { mode: TrainingMode::Baseline, ..Default::default() };
    let mut t = Trainer::<f64>::new(cfg, 3, n).unwrap();
    let before = t.fingerprints();
    match t.train_iteration(&batch, None) {
        Err(Error::NonFinite { term, iteration }) => {
            assert_eq!(term, "sup_real");
            assert_eq!(iteration, 0);
        }
        other => panic!("expected a non-finite error, got {other:?}"),
    }
    assert_eq!(t.fingerprints(), before);

    let clean = Batch {
        images: vec![Tensor::filled(1, n, n, 0.1)],
        labels: vec![LabelMap::filled(n, n, 1)],
    };
    let mut t = Trainer::<f64>::new(TrainingConfig::default(), 3, n).unwrap();
    t.train_iteration(&clean, Some(&clean)).unwrap();
    match t.train_iteration(&clean, Some(&batch)) {
        Err(Error::NonFinite { term, iteration }) => {
            assert_eq!(term, "adv_t");
            assert_eq!(iteration, 1);
        }
        other => panic!("expected a non-finite error, got {other:?}"),
    }
    assert!(Error::NonFinite { term: "cyc", iteration: 12 }.to_string().contains("cyc"));
}

#[test]
fn incompatible_datasets_are_config_errors() {
    let data = small_data(5);
    let other = synthesize_dataset(&PhantomSpec::for_style(ModalityStyle::A, 16, 4, 5), Modality::Assistant, 2, 0).unwrap();
    let cfg = TrainingConfig { epochs: 1, ..Default::default() };
    assert!(matches!(run_training::<f32>(&data.target_train, &other, &cfg), Err(Error::Config(_))));
}

/// The supervised loss of `S_real` falls over a short run on default phantoms.
#[test]
fn supervised_loss_decreases() {
    for seed in 0..3 {
        let data = ExperimentData::phantom(64, 4, 40, 40, 1, ModalityStyle::B, 7, seed).unwrap();
        let cfg = TrainingConfig { epochs: 5, seed, ..Default::default() };
        let (_, log) = run_training::<f32>(&data.target_train, &data.assistant, &cfg).unwrap();
        assert_eq!(log.len(), 200);
        let avg = |r: &[mutualseg::trainer::MetricsRecord]| r.iter().map(|m| m.report.sup_real).sum::<f64>() / r.len() as f64;
        let (start, end) = (avg(&log[..20]), avg(&log[180..]));
        assert!(end < start, "seed {seed}: {start} -> {end}");
    }
}
