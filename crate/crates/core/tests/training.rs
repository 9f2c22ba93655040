use tgm_core::checkpoint::{encode_checkpoint, load_checkpoint};
use tgm_core::data::{gen_synthetic, SynthSpec};
use tgm_core::layers::{KernelSource, LayerConfig, LayerForm};
use tgm_core::model::{ClassifierKind, Model, ModelConfig};
use tgm_core::train::{fit, FitOptions, TrainPlan};
use tgm_core::{Sample64, TgmError};

fn data() -> Vec<Sample64> {
    gen_synthetic::<f64>(&SynthSpec {
        num_videos: 15,
        t_min: 30,
        t_max: 45,
        seed: 4,
        ..Default::default()
    })
    .unwrap()
    .samples
}

fn config() -> ModelConfig {
    ModelConfig {
        d: 16,
        num_classes: 5,
        layers: vec![
            LayerConfig::new(LayerForm::TgmSingle, KernelSource::LearnedGaussianMixture, 1, 4, 5, 3, 16),
            LayerConfig::new(LayerForm::TgmChannelCombine1x1, KernelSource::LearnedGaussianMixture, 4, 4, 5, 3, 16),
        ],
        classifier: ClassifierKind::SharedLinear,
    }
}

fn plan(epochs: usize) -> TrainPlan {
    TrainPlan {
        epochs,
        decay_every: 1,
        decay_factor: 0.5,
        seed: 11,
        ..Default::default()
    }
}

#[test]
fn validation_threads_do_not_change_results() {
    let data = data();
    let mut runs = Vec::new();
    for threads in [1, 3] {
        let mut model = Model::<f64>::new(config(), 1).unwrap();
        let options = FitOptions {
            threads,
            ..Default::default()
        };
        let records = fit(&mut model, &data, &plan(2), options).unwrap();
        let parts: Vec<_> = records.iter().map(|r| r.deterministic_part()).collect();
        runs.push((parts, encode_checkpoint(&model, None).unwrap()));
    }
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let data = data();
    let full = tempfile::tempdir().unwrap();
    let mut model = Model::<f64>::new(config(), 2).unwrap();
    let options = FitOptions {
        checkpoint_dir: Some(full.path()),
        ..Default::default()
    };
    let straight = fit(&mut model, &data, &plan(3), options).unwrap();

    let part = tempfile::tempdir().unwrap();
    let mut model = Model::<f64>::new(config(), 2).unwrap();
    let options = FitOptions {
        checkpoint_dir: Some(part.path()),
        ..Default::default()
    };
    let first = fit(&mut model, &data, &plan(1), options).unwrap();
    let ckpt = load_checkpoint::<f64>(part.path().join("last.tgmm")).unwrap();
    let mut model = ckpt.model;
    let options = FitOptions {
        checkpoint_dir: Some(part.path()),
        resume: ckpt.training,
        ..Default::default()
    };
    let rest = fit(&mut model, &data, &plan(3), options).unwrap();

    let joined: Vec<_> = first.iter().chain(&rest).map(|r| r.deterministic_part()).collect();
    let expect: Vec<_> = straight.iter().map(|r| r.deterministic_part()).collect();
    assert_eq!(joined, expect);
    for name in ["epoch_002.tgmm", "epoch_003.tgmm", "last.tgmm"] {
        assert_eq!(
            std::fs::read(full.path().join(name)).unwrap(),
            std::fs::read(part.path().join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let mut model = Model::<f64>::new(config(), 3).unwrap();
    let before = model.clone();
    let records = fit(
        &mut model,
        &data(),
        &TrainPlan {
            epochs: 1,
            base_lr: 0.0,
            ..Default::default()
        },
        FitOptions::default(),
    )
    .unwrap();
    assert_eq!(model, before);
    assert!(records[0].mean_loss.is_finite());
}

#[test]
fn divergence_restores_the_epoch_start() {
    let data = data();
    let dir = tempfile::tempdir().unwrap();
    let mut model = Model::<f64>::new(config(), 5).unwrap();
    let options = FitOptions {
        checkpoint_dir: Some(dir.path()),
        ..Default::default()
    };
    fit(&mut model, &data, &plan(1), options).unwrap();
    let good = model.clone();
    let saved = std::fs::read(dir.path().join("last.tgmm")).unwrap();

    let state = load_checkpoint::<f64>(dir.path().join("last.tgmm")).unwrap().training;
    let options = FitOptions {
        checkpoint_dir: Some(dir.path()),
        resume: state,
        ..Default::default()
    };
    let wild = TrainPlan {
        base_lr: 1e308,
        ..plan(2)
    };
    let err = fit(&mut model, &data, &wild, options).unwrap_err();
    assert!(matches!(err, TgmError::Numerical(_)), "{err}");
    assert_eq!(model, good);
    assert_eq!(std::fs::read(dir.path().join("last.tgmm")).unwrap(), saved);
    assert!(!dir.path().join("epoch_002.tgmm").exists());
}

#[test]
fn learning_reduces_the_loss() {
    let mut model = Model::<f64>::new(config(), 6).unwrap();
    let records = fit(&mut model, &data(), &plan(4), FitOptions::default()).unwrap();
    assert!(records[3].mean_loss < records[0].mean_loss, "{records:?}");
}
