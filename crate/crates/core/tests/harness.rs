use std::fs;
use std::path::Path;

use lws::adam::AdamConfig;
use lws::data::idx::{encode_images, encode_labels, load_idx, parse_images, parse_labels};
use lws::data::synthetic::SyntheticSuiteSpec;
use lws::experiment::{
    read_metrics, run_dir, run_experiment, DatasetSpec, ExperimentConfig, ExperimentSummary, IdxTask, RunResult,
    METRICS_FILE, RESULT_FILE, SUMMARY_FILE,
};
use lws::report::{accuracy_file, emit_reports, REPORT_DIR, SHARING_FILE, TABLE_FILE};
use lws::sharing::ArchitectureSpec;
use lws::stats::{mann_whitney_both, mann_whitney_u};
use lws::tensor::Tensor;
use lws::trainer::{Mode, Phase, TrainConfig};
use lws::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn experiment(out: &Path, repeats: usize) -> ExperimentConfig {
    ExperimentConfig {
        train: TrainConfig {
            lambda_theta: 2,
            lambda_pi: 4,
            eta_theta: 1e-2,
            eta_pi: 5e-2,
            k: 2,
            batch_per_task: 4,
            iterations: 6,
            seed: 100,
            floor: 0.001,
            mode: Mode::Lws,
            eval_interval: 3,
            adam: AdamConfig::default(),
        },
        architecture: ArchitectureSpec::mlp(4, &[5]),
        dataset: DatasetSpec::Synthetic {
            spec: SyntheticSuiteSpec {
                teacher_groups: vec![0, 0, 1],
                input_dim: 4,
                classes: 3,
                train_per_task: 20,
                test_per_task: 30,
                teacher_hidden: 5,
                label_noise: 0.0,
            },
            data_seed: 1,
        },
        repeats,
        out_dir: out.to_path_buf(),
        modes: None,
    }
}

#[test]
fn idx_round_trip_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let bytes: Vec<u8> = (0..3 * 5 * 4).map(|_| rng.gen()).collect();
    let images = Tensor::new(vec![3, 1, 5, 4], bytes.iter().map(|&b| f64::from(b) / 255.0).collect()).unwrap();
    let encoded = encode_images(&images).unwrap();
    assert_eq!(parse_images(&encoded, Path::new("mem")).unwrap(), images);
    let labels = vec![3u8, 0, 9];
    assert_eq!(parse_labels(&encode_labels(&labels), Path::new("mem")).unwrap(), labels);
}

#[test]
fn idx_files_load_and_mismatch_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let images = Tensor::new(vec![2, 1, 2, 2], vec![0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
    fs::write(dir.path().join("img"), encode_images(&images).unwrap()).unwrap();
    fs::write(dir.path().join("lab"), encode_labels(&[1, 0])).unwrap();
    fs::write(dir.path().join("lab3"), encode_labels(&[1, 0, 1])).unwrap();
    let (x, y) = load_idx(&dir.path().join("img"), &dir.path().join("lab")).unwrap();
    assert_eq!(x, images);
    assert_eq!(y, vec![1, 0]);
    assert!(matches!(load_idx(&dir.path().join("img"), &dir.path().join("lab3")), Err(Error::Data(_))));
    // labels file passed as images: wrong magic
    match load_idx(&dir.path().join("lab"), &dir.path().join("lab")) {
        Err(Error::Format { reason, .. }) => assert!(reason.contains("0x00000801"), "{reason}"),
        other => panic!("expected format error, got {other:?}"),
    }
}

#[test]
fn idx_dataset_spec_remaps_labels_and_subsamples() {
    let dir = tempfile::tempdir().unwrap();
    let images = Tensor::new(vec![4, 1, 1, 2], vec![0.0; 8]).unwrap();
    fs::write(dir.path().join("img"), encode_images(&images).unwrap()).unwrap();
    fs::write(dir.path().join("lab"), encode_labels(&[7, 3, 7, 5])).unwrap();
    let task = |name: &str| IdxTask {
        name: name.into(),
        train_images: "img".into(),
        train_labels: "lab".into(),
        test_images: "img".into(),
        test_labels: "lab".into(),
    };
    let mut spec = DatasetSpec::Idx {
        tasks: vec![task("digits"), task("letters")],
        train_per_task: Some(3),
        subsample_seed: 4,
    };
    spec.resolve_paths(dir.path());
    let tasks = spec.load().unwrap();
    assert_eq!(tasks.len(), 2);
    assert_eq!(tasks[0].classes, 3);
    assert_eq!(tasks[0].train.len(), 3);
    assert_eq!(tasks[0].test.y, vec![2, 0, 2, 1]);
}

proptest! {
    #[test]
    fn u_statistics_are_complementary(
        a in prop::collection::vec(0u8..6, 1..15),
        b in prop::collection::vec(0u8..6, 1..15),
    ) {
        let a: Vec<f64> = a.into_iter().map(f64::from).collect();
        let b: Vec<f64> = b.into_iter().map(f64::from).collect();
        let total = mann_whitney_u(&a, &b).u + mann_whitney_u(&b, &a).u;
        prop_assert_eq!(total, (a.len() * b.len()) as f64);
    }
}

#[test]
fn exact_and_normal_routes_agree_without_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..300 {
        let n_a = rng.gen_range(3..=6);
        let n_b = rng.gen_range(3..=6);
        let a: Vec<f64> = (0..n_a).map(|_| rng.gen::<f64>()).collect();
        let b: Vec<f64> = (0..n_b).map(|_| rng.gen::<f64>() + 0.2).collect();
        let (exact, normal) = mann_whitney_both(&a, &b);
        assert!((exact - normal).abs() < 0.05, "{n_a} vs {n_b}: exact {exact}, normal {normal}");
    }
}

#[test]
fn experiment_writes_runs_and_a_consistent_summary() {
    let dir = tempfile::tempdir().unwrap();
    let config = experiment(dir.path(), 3);
    let summary = run_experiment(&config, &config.modes()).unwrap();
    assert_eq!(summary.modes.len(), 3);
    assert!(summary.failures.is_empty());

    let on_disk: ExperimentSummary =
        serde_json::from_str(&fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap()).unwrap();
    assert_eq!(on_disk, summary);

    // recompute mean and sample std from the final evaluation row of each CSV
    for m in &summary.modes {
        let errors: Vec<f64> = (0..3)
            .map(|r| {
                let rows = read_metrics(&run_dir(dir.path(), m.mode, 100 + r).join(METRICS_FILE)).unwrap();
                let last = rows.iter().rev().find(|row| row.phase == Phase::Eval).unwrap();
                assert_eq!(last.iteration, 6);
                last.mean_test_error.unwrap()
            })
            .collect();
        let mean = errors.iter().sum::<f64>() / 3.0;
        let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / 2.0;
        assert!((m.mean_test_error - mean).abs() < 1e-12);
        assert!((m.std_test_error - var.sqrt()).abs() < 1e-12);
        assert!(!m.std_undefined);
    }
    let lws = summary.mode(Mode::Lws).unwrap();
    assert!(lws.p_vs_full.is_some() && lws.p_vs_none.is_some());
    assert!(summary.mode(Mode::NoSharing).unwrap().p_vs_none.is_none());
}

#[test]
fn metrics_csv_has_the_documented_header() {
    let dir = tempfile::tempdir().unwrap();
    let config = experiment(dir.path(), 1);
    run_experiment(&config, &[Mode::Lws]).unwrap();
    let text = fs::read_to_string(run_dir(dir.path(), Mode::Lws, 100).join(METRICS_FILE)).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "iteration,phase,mean_train_loss,mean_test_error,pi_entropy,effective_params"
    );
    let summary: ExperimentSummary =
        serde_json::from_str(&fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap()).unwrap();
    assert!(summary.modes[0].std_undefined);
    assert_eq!(summary.modes[0].std_test_error, 0.0);
}

#[test]
fn identical_configs_give_identical_summaries() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let c1 = experiment(d1.path(), 2);
    let c2 = experiment(d2.path(), 2);
    run_experiment(&c1, &c1.modes()).unwrap();
    run_experiment(&c2, &c2.modes()).unwrap();
    assert_eq!(
        fs::read(d1.path().join(SUMMARY_FILE)).unwrap(),
        fs::read(d2.path().join(SUMMARY_FILE)).unwrap()
    );
}

#[test]
fn a_failing_run_is_recorded_and_the_rest_proceed() {
    let dir = tempfile::tempdir().unwrap();
    let config = experiment(dir.path(), 3);
    // a plain file where the second run's directory belongs
    fs::create_dir_all(dir.path().join("lws")).unwrap();
    fs::write(run_dir(dir.path(), Mode::Lws, 101), b"").unwrap();
    let summary = run_experiment(&config, &[Mode::Lws]).unwrap();
    assert_eq!(summary.failures.len(), 1);
    assert_eq!(summary.failures[0].seed, 101);
    assert_eq!(summary.modes[0].runs, 2);
}

#[test]
fn invalid_configs_are_rejected_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = experiment(dir.path(), 1);
    config.train.lambda_pi = 1;
    assert!(matches!(run_experiment(&config, &[Mode::Lws]), Err(Error::Config(_))));
    let mut config = experiment(dir.path(), 0);
    config.repeats = 0;
    assert!(matches!(run_experiment(&config, &[Mode::Lws]), Err(Error::Config(_))));
}

#[test]
fn all_runs_failing_is_its_own_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = experiment(dir.path(), 2);
    // 6-dimensional inputs into a 4-input network fail in every run
    config.dataset = DatasetSpec::Synthetic {
        spec: SyntheticSuiteSpec {
            teacher_groups: vec![0, 1],
            input_dim: 6,
            classes: 3,
            train_per_task: 5,
            test_per_task: 5,
            teacher_hidden: 3,
            label_noise: 0.0,
        },
        data_seed: 0,
    };
    match run_experiment(&config, &[Mode::Lws, Mode::FullSharing]) {
        Err(Error::AllRunsFailed(_)) => {}
        other => panic!("expected all-runs-failed, got {other:?}"),
    }
    let summary: ExperimentSummary =
        serde_json::from_str(&fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap()).unwrap();
    assert_eq!(summary.failures.len(), 4);
    assert!(summary.modes.is_empty());
}

#[test]
fn reports_cover_accuracy_sharing_and_table() {
    let dir = tempfile::tempdir().unwrap();
    let config = experiment(dir.path(), 2);
    run_experiment(&config, &config.modes()).unwrap();
    let written = emit_reports(dir.path()).unwrap();
    assert_eq!(written.len(), 5);
    let report = dir.path().join(REPORT_DIR);

    let acc = fs::read_to_string(report.join(accuracy_file(Mode::Lws))).unwrap();
    let iterations: Vec<&str> = acc.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(iterations, ["0", "3", "6"]);

    let sharing = fs::read_to_string(report.join(SHARING_FILE)).unwrap();
    let mut sums: std::collections::BTreeMap<(String, String), f64> = Default::default();
    for line in sharing.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        *sums.entry((f[0].into(), f[1].into())).or_default() += f[3].parse::<f64>().unwrap();
        if f[0] == "full_sharing" {
            assert_eq!(f[2], "3");
            assert_eq!(f[3].parse::<f64>().unwrap(), 100.0);
        }
    }
    assert!(sums.values().all(|s| (s - 100.0).abs() < 0.01), "{sums:?}");

    let table = fs::read_to_string(report.join(TABLE_FILE)).unwrap();
    assert!(table.contains("lws") && table.contains("full_sharing") && table.contains("no_sharing"));
}

#[test]
fn empty_run_dir_is_an_error_without_output() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(emit_reports(dir.path()), Err(Error::Report(_))));
    assert!(!dir.path().join(REPORT_DIR).exists());
}

#[test]
fn missing_run_files_are_listed() {
    let dir = tempfile::tempdir().unwrap();
    let config = experiment(dir.path(), 2);
    run_experiment(&config, &[Mode::FullSharing]).unwrap();
    let victim = run_dir(dir.path(), Mode::FullSharing, 101);
    fs::remove_file(victim.join(METRICS_FILE)).unwrap();
    fs::remove_file(victim.join(RESULT_FILE)).unwrap();
    match emit_reports(dir.path()) {
        Err(Error::Report(msg)) => {
            assert!(msg.contains(&victim.join(METRICS_FILE).display().to_string()));
            assert!(msg.contains(&victim.join(RESULT_FILE).display().to_string()));
        }
        other => panic!("expected report error, got {other:?}"),
    }
    assert!(!dir.path().join(REPORT_DIR).exists());
}

#[test]
fn run_result_records_the_inference_assignment() {
    let dir = tempfile::tempdir().unwrap();
    let config = experiment(dir.path(), 1);
    run_experiment(&config, &[Mode::NoSharing]).unwrap();
    let result: RunResult = serde_json::from_str(
        &fs::read_to_string(run_dir(dir.path(), Mode::NoSharing, 100).join(RESULT_FILE)).unwrap(),
    )
    .unwrap();
    assert_eq!(result.assignment.0, vec![0, 1, 2]);
    assert!(result.sharing.layers.iter().all(|l| l.get(&1) == Some(&3)));
}
