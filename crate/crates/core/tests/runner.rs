mod common;

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use fedpt::config::{AnalysisConfig, DatasetSource, ExperimentConfig, FpsPretrainConfig, ModelChoice, PretrainSource};
use fedpt::data::{
    load_cifar10_binary, make_toy_dataset, parse_cifar10_records, ToyDatasetSpec, CIFAR_RECORD, CIFAR_RECORDS_PER_FILE,
    CIFAR_TEST_FILE, CIFAR_TRAIN_FILES,
};
use fedpt::experiment::{run_experiment, verify_manifest, StageStatus, MANIFEST_FILE, METRICS_FILE};
use fedpt::fedsim::{train_centralized, FederationConfig, METRICS_HEADER};
use fedpt::nn::{evaluate, ModelSpec};
use fedpt::seed::rng_from;
use proptest::prelude::*;

fn small_toy() -> ToyDatasetSpec {
    ToyDatasetSpec {
        classes: 3,
        train_per_class: 24,
        test_per_class: 8,
        side: 8,
        n_iters: 200,
        ..ToyDatasetSpec::default()
    }
}

fn small_config(dir: &Path) -> ExperimentConfig {
    ExperimentConfig {
        seed: 4,
        output_dir: dir.to_path_buf(),
        dataset: DatasetSource::Toy(small_toy()),
        federation: FederationConfig {
            clients: 3,
            rounds: 2,
            local_epochs: 1,
            batch_size: 8,
            ..FederationConfig::default()
        },
        ..ExperimentConfig::default()
    }
}

fn listing(dir: &Path) -> BTreeSet<String> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect()
}

#[test]
fn full_cifar_file_parses() {
    let mut bytes = vec![0u8; CIFAR_RECORDS_PER_FILE * CIFAR_RECORD];
    for i in 0..CIFAR_RECORDS_PER_FILE {
        bytes[i * CIFAR_RECORD] = (i % 10) as u8;
    }
    bytes[1] = 128;
    let (px, labels) = parse_cifar10_records(&bytes, Path::new("batch")).unwrap();
    assert_eq!(labels.len(), 10_000);
    let mut hist = [0usize; 10];
    for l in labels {
        hist[l] += 1;
    }
    assert_eq!(hist, [1000; 10]);
    assert_eq!(px.len(), 10_000 * 3072);
    assert_eq!(px[0], 128.0 / 255.0);
    // Record 1 is all zeros apart from its label: a black image.
    assert!(px[3072..2 * 3072].iter().all(|&v| v == 0.0));
}

#[test]
fn short_cifar_file_is_rejected_with_offset() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join(CIFAR_TRAIN_FILES[0]), vec![0u8; 5 * CIFAR_RECORD + 17]).unwrap();
    match load_cifar10_binary(dir.path()) {
        Err(fedpt::Error::Dataset { offset, .. }) => assert_eq!(offset, (5 * CIFAR_RECORD + 17) as u64),
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(CIFAR_TEST_FILE, "test_batch.bin");
}

#[test]
fn toy_dataset_is_balanced_and_seeded() {
    let spec = ToyDatasetSpec {
        classes: 2,
        train_per_class: 10,
        ..small_toy()
    };
    let a = make_toy_dataset(&spec, 1).unwrap();
    assert_eq!(a.train.len(), 20);
    assert_eq!(a.train.class_histogram(), vec![10, 10]);
    assert_eq!(a.train, make_toy_dataset(&spec, 1).unwrap().train);
}

#[test]
fn centralized_training_fits_the_toy_set_quickly() {
    let start = Instant::now();
    let data = make_toy_dataset(&ToyDatasetSpec::default(), 0).unwrap();
    let spec = ModelSpec::small_cnn(3, 16, data.train.classes).unwrap();
    let cfg = FederationConfig {
        clients: 1,
        rounds: 4,
        local_epochs: 5,
        lr: 0.01,
        ..FederationConfig::default()
    };
    let w = train_centralized(&spec, &data.train, spec.init(&mut rng_from(0)), &cfg).unwrap();
    let acc = evaluate(&spec, &w, &data.train.images, &data.train.labels)
        .unwrap()
        .accuracy;
    let elapsed = start.elapsed();
    assert!(acc > 0.9, "train accuracy {acc}");
    assert!(elapsed.as_secs() < 120, "took {elapsed:?}");
}

#[test]
fn plain_run_writes_exactly_three_files_and_reruns_identically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run_experiment(&small_config(a.path())).unwrap();
    run_experiment(&small_config(b.path())).unwrap();
    let expected: BTreeSet<String> = ["manifest.json", "metrics.csv", "final.fedw"].map(String::from).into();
    assert_eq!(listing(a.path()), expected);
    let ma = std::fs::read(a.path().join(METRICS_FILE)).unwrap();
    assert_eq!(ma, std::fs::read(b.path().join(METRICS_FILE)).unwrap());
    assert!(String::from_utf8(ma).unwrap().starts_with(METRICS_HEADER));
    assert_eq!(ra.manifest.files.len(), 2);
    assert!(ra.manifest.stages.iter().all(|s| s.status == StageStatus::Done));
    assert!(verify_manifest(a.path()).unwrap().ok());
}

#[test]
fn manifest_verification_catches_tampering_and_strays() {
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&small_config(dir.path())).unwrap();
    std::fs::write(dir.path().join("stray.txt"), "x").unwrap();
    let v = verify_manifest(dir.path()).unwrap();
    assert_eq!(v.problems.len(), 1);
    std::fs::remove_file(dir.path().join("stray.txt")).unwrap();
    let mut metrics = std::fs::read(dir.path().join(METRICS_FILE)).unwrap();
    metrics.push(b'\n');
    std::fs::write(dir.path().join(METRICS_FILE), metrics).unwrap();
    let v = verify_manifest(dir.path()).unwrap();
    assert!(!v.ok());
    assert!(v.problems[0].contains(METRICS_FILE));
}

fn with_analyses(dir: &Path, analysis_seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        analysis_seed,
        analysis: AnalysisConfig {
            decomposition: true,
            lambda_star: true,
            surface: true,
            segment: true,
            surface_samples: 20,
            segment_steps: 5,
            ..AnalysisConfig::default()
        },
        ..small_config(dir)
    }
}

#[test]
fn analysis_seed_never_changes_federation_outputs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_experiment(&with_analyses(a.path(), 1)).unwrap();
    run_experiment(&with_analyses(b.path(), 99)).unwrap();
    for f in [METRICS_FILE, "final.fedw", "client_metrics.csv"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    assert_ne!(
        std::fs::read(a.path().join("surface.csv")).unwrap(),
        std::fs::read(b.path().join("surface.csv")).unwrap()
    );
    for f in ["lambda_star.csv", "lambda_star.json", "surface.json", "segment.csv"] {
        assert!(a.path().join(f).exists(), "{f}");
    }
    assert!(verify_manifest(a.path()).unwrap().ok());
}

#[test]
fn pipeline_with_fps_pretraining_records_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        pretrain: PretrainSource::Fps(FpsPretrainConfig {
            codes: 20,
            pairs: 16,
            n_iters: 200,
            workers: 2,
            training: fedpt::ssl::PretrainConfig {
                epochs: 1,
                batch_size: 8,
                ..Default::default()
            },
            ..Default::default()
        }),
        ..small_config(dir.path())
    };
    let report = run_experiment(&cfg).unwrap();
    let files: BTreeSet<String> = report.manifest.files.iter().map(|f| f.path.clone()).collect();
    for f in [
        "codes.json",
        "pairs.fpsa",
        "encoder.fedw",
        "pretrain.csv",
        "metrics.csv",
        "final.fedw",
    ] {
        assert!(files.contains(f), "{f}");
    }
    assert!(verify_manifest(dir.path()).unwrap().ok());
    let names: Vec<&str> = report.manifest.stages.iter().map(|s| s.name.as_str()).collect();
    assert_eq!(names, ["data", "pretrain", "federate"]);
}

#[test]
fn failing_stage_is_recorded_in_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.fedw");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    let out = dir.path().join("out");
    let cfg = ExperimentConfig {
        pretrain: PretrainSource::Checkpoint { path: bad },
        ..small_config(&out)
    };
    let err = run_experiment(&cfg).unwrap_err();
    assert!(
        matches!(err, fedpt::Error::Stage { ref stage, .. } if stage == "pretrain"),
        "{err}"
    );
    let text = std::fs::read_to_string(out.join(MANIFEST_FILE)).unwrap();
    let manifest: fedpt::experiment::Manifest = serde_json::from_str(&text).unwrap();
    assert_eq!(manifest.failed_stage.as_deref(), Some("pretrain"));
    assert!(manifest.final_accuracy.is_none());
}

#[test]
fn missing_paths_fail_validation() {
    let cfg = ExperimentConfig {
        dataset: DatasetSource::Cifar10 {
            path: "/nonexistent/cifar".into(),
        },
        ..ExperimentConfig::default()
    };
    assert!(matches!(cfg.validate(), Err(fedpt::Error::Config(_))));
}

#[test]
fn desk_scale_pipeline_fits_the_time_budget() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let cfg = ExperimentConfig {
        output_dir: dir.path().to_path_buf(),
        ..ExperimentConfig::default()
    };
    let report = run_experiment(&cfg).unwrap();
    let elapsed = start.elapsed();
    assert_eq!(report.federation.unwrap().metrics.len(), 20);
    assert!(elapsed.as_secs() < 300, "took {elapsed:?}");
}

fn arb_config() -> impl Strategy<Value = ExperimentConfig> {
    (
        0u64..i64::MAX as u64,
        0u64..1000,
        1usize..20,
        0.01f64..100.0,
        0.05f64..=1.0,
        0usize..50,
        prop::bool::ANY,
        prop::collection::vec(1usize..64, 0..3),
        prop::bool::ANY,
    )
        .prop_map(
            |(seed, analysis_seed, clients, alpha, participation, rounds, prox, hidden, fps)| {
                let mut cfg = ExperimentConfig {
                    seed,
                    analysis_seed,
                    ..ExperimentConfig::default()
                };
                cfg.federation.clients = clients;
                cfg.federation.alpha = alpha;
                cfg.federation.participation = participation;
                cfg.federation.rounds = rounds;
                if prox {
                    cfg.federation.algorithm = fedpt::fedsim::Algorithm::FedProx { mu: alpha / 10.0 };
                }
                if !hidden.is_empty() {
                    cfg.model = ModelChoice::Mlp { hidden };
                }
                if fps {
                    cfg.pretrain = PretrainSource::Fps(FpsPretrainConfig::default());
                }
                cfg.analysis.lambda_star = prox;
                cfg
            },
        )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_round_trips_through_text(cfg in arb_config()) {
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::parse(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_toml().unwrap(), text);
        prop_assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
    }
}

#[test]
fn shipped_study_config_parses() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/fps_study.toml");
    let cfg = ExperimentConfig::load(&path).unwrap();
    assert_eq!(cfg.federation.clients, 8);
    assert_eq!(cfg.federation.alpha, 0.1);
    let PretrainSource::Fps(fps) = &cfg.pretrain else {
        panic!("expected FPS pre-training, got {:?}", cfg.pretrain);
    };
    assert_eq!((fps.codes, fps.pairs, fps.training.epochs), (1000, 1000, 2));
    assert_eq!(fps.codes_per_image, fedpt::ifs::CodesPerImage::Fixed { count: 1 });
    assert_eq!(fps.augment, fedpt::ifs::Augmentation::none());
    assert_eq!(
        fps.training.objective,
        fedpt::ssl::SslObjective::InfoNce { temperature: 0.2 }
    );
}
