mod common;

use calfat::attacks::AttackSpec;
use calfat::data::{dirichlet_partition, load_dataset, save_dataset, DataFormat, Dataset, PartitionConfig};
use calfat::federation::{run_federation, EvalSetup, FederationConfig};
use calfat::metrics::{accuracy, read_metrics_json, render_metrics, write_metrics, EvalAttack, MetricsFormat, MetricsSchema};
use calfat::modelio::{load_model, save_model};
use calfat::Error;
use common::{bits, random_mlp, toy_dataset};

#[test]
fn two_row_csv() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    std::fs::write(&path, "label,f0,f1\n0,0.5,1.5\n2,-1,3e-2\n").unwrap();
    let d = load_dataset(&path, DataFormat::Csv, 3).unwrap();
    assert_eq!(d.len(), 2);
    assert_eq!(d.features()[1], vec![-1.0, 0.03]);
    assert_eq!(d.labels(), &[0, 2]);
}

#[test]
fn label_equal_to_class_count_names_the_row() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    std::fs::write(&path, "label,f0\n0,0.5\n1,0.1\n3,0.2\n").unwrap();
    let err = load_dataset(&path, DataFormat::Csv, 3).unwrap_err();
    assert!(matches!(err, Error::Parse { .. }));
    assert!(err.to_string().contains("line 4"), "{err}");

    let data = Dataset::new(vec![vec![0.0], vec![1.0]], vec![0, 1], 2).unwrap();
    let raw = dir.path().join("d.bin");
    save_dataset(&data, &raw, DataFormat::RawBinary).unwrap();
    let err = load_dataset(&raw, DataFormat::RawBinary, 1).unwrap_err();
    assert!(matches!(err, Error::Parse { .. }));
}

#[test]
fn dataset_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let mut data = toy_dataset(4, 3, 10, 12);
    let mut feats = data.features().to_vec();
    feats[0][0] = 1.0 / 3.0;
    feats[1][2] = -2.5e-300;
    data = Dataset::new(feats, data.labels().to_vec(), 4).unwrap();
    for (name, fmt) in [("d.csv", DataFormat::Csv), ("d.bin", DataFormat::RawBinary)] {
        let path = dir.path().join(name);
        save_dataset(&data, &path, fmt).unwrap();
        let back = load_dataset(&path, fmt, 4).unwrap();
        assert_eq!(back.labels(), data.labels());
        for (a, b) in back.features().iter().zip(data.features()) {
            assert_eq!(bits(a), bits(b));
        }
    }
}

#[test]
fn partition_single_client_and_conservation() {
    let data = toy_dataset(5, 2, 40, 3);
    let one = dirichlet_partition(&data, &PartitionConfig { clients: 1, beta: 0.1, seed: 1 }).unwrap();
    assert_eq!(one.clients.len(), 1);
    assert_eq!(one.clients[0].class_counts, data.class_counts());
    let many = dirichlet_partition(&data, &PartitionConfig { clients: 6, beta: 0.3, seed: 9 }).unwrap();
    let mut seen: Vec<usize> = many.clients.iter().flat_map(|c| c.source_indices.clone()).collect();
    seen.sort_unstable();
    assert_eq!(seen, (0..data.len()).collect::<Vec<_>>());
    for y in 0..5 {
        let col: usize = many.count_matrix().iter().map(|r| r[y]).sum();
        assert_eq!(col, data.class_counts()[y]);
    }
}

fn short_run() -> (Vec<calfat::metrics::RoundMetrics>, MetricsSchema) {
    let data = toy_dataset(3, 4, 20, 5);
    let part = dirichlet_partition(&data, &PartitionConfig { clients: 2, beta: 1.0, seed: 5 }).unwrap();
    let attacks = vec![
        EvalAttack::from_name("fgsm", AttackSpec::evaluation_default()).unwrap(),
        EvalAttack::from_name("pgd3", AttackSpec::evaluation_default()).unwrap(),
    ];
    let eval = EvalSetup {
        data: toy_dataset(3, 4, 5, 6),
        attacks: attacks.clone(),
        robust_every: 0,
    };
    let cfg = FederationConfig {
        rounds: 2,
        hidden: vec![5],
        batch_size: 8,
        attack: AttackSpec { steps: 2, ..AttackSpec::training_default() },
        ..FederationConfig::default()
    };
    let run = run_federation(&cfg, &part.clients, &eval).unwrap();
    let schema = MetricsSchema {
        attacks: attacks.iter().map(|a| a.name.clone()).collect(),
        classes: 3,
    };
    (run.metrics, schema)
}

#[test]
fn metrics_files() {
    let dir = tempfile::tempdir().unwrap();
    let (series, schema) = short_run();
    let json = dir.path().join("m.json");
    write_metrics(&series, &schema, &json, MetricsFormat::Json).unwrap();
    assert_eq!(read_metrics_json(&json).unwrap(), series);

    let csv = render_metrics(&series, &schema, MetricsFormat::Csv).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    for l in &lines {
        assert_eq!(l.split(',').count(), 4 + 2 + 3);
    }
    // robust metrics only in the last round
    assert!(lines[1].split(',').nth(4).unwrap().is_empty());
    assert!(!lines[2].split(',').nth(4).unwrap().is_empty());

    let empty = render_metrics(&[], &schema, MetricsFormat::Csv).unwrap();
    assert_eq!(empty.lines().count(), 1);
}

#[test]
fn per_class_accuracy_reconstructs_overall() {
    let data = toy_dataset(4, 3, 25, 17);
    let model = random_mlp(17, &[3, 8, 4]);
    let (overall, per_class) = accuracy(&model, &data).unwrap();
    let counts = data.class_counts();
    let weighted: f64 = per_class
        .iter()
        .zip(&counts)
        .filter_map(|(a, &n)| a.map(|v| v * n as f64))
        .sum::<f64>()
        / data.len() as f64;
    assert!((weighted - overall).abs() < 1e-12);
}

#[test]
fn saved_model_evaluates_identically() {
    let dir = tempfile::tempdir().unwrap();
    let model = random_mlp(23, &[3, 6, 2]);
    let path = dir.path().join("m.fmd");
    save_model(&model, &path).unwrap();
    let back = load_model(&path).unwrap();
    let data = toy_dataset(2, 3, 30, 23);
    assert_eq!(accuracy(&model, &data).unwrap(), accuracy(&back, &data).unwrap());
}
