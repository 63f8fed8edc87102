use std::fs;

use sdlab::distill::SplitMetrics;
use sdlab_cli::layout::{RecordFile, RunManifest, SlotKind};
use sdlab_cli::report::Marker;
use sdlab_cli::{build_report, Manifest};

const MANIFEST: &str = r#"
kind = "self-distill"
seeds = [0, 1]
output_dir = "x"

[model]
kind = "mlp"
widths = [4]

[data]
source = "multiview"

[distill]
rounds = 4
"#;

fn write_record(dir: &std::path::Path, seed: u64, round: usize, acc: f64) {
    let label = if round == 0 {
        "T".to_string()
    } else {
        format!("S{round}")
    };
    let d = dir.join(format!("seed-{seed}/round-{round}"));
    fs::create_dir_all(&d).unwrap();
    let m = SplitMetrics {
        accuracy: acc,
        loss: 1.0,
    };
    let rec = RecordFile {
        label,
        seed,
        kind: SlotKind::Model,
        round: Some(round),
        checkpoint_epoch: Some(1),
        epochs_completed: Some(1),
        discrepancy: None,
        train: Some(m),
        heldout: m,
        test: m,
    };
    fs::write(d.join("record.json"), serde_json::to_string(&rec).unwrap()).unwrap();
    fs::write(d.join("model.ckpt"), b"").unwrap();
    fs::write(d.join("metrics.csv"), "epoch,split,accuracy,loss\n").unwrap();
}

/// Hand-made records: S1 ties the teacher, S2 beats it by 1e-9, S3 loses.
#[test]
fn markers_compare_unrounded_means() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = Manifest::parse(MANIFEST).unwrap();
    let run = RunManifest {
        version: "test".into(),
        seeds: vec![0, 1],
        manifest,
    };
    fs::write(
        dir.path().join("manifest.json"),
        serde_json::to_string(&run).unwrap(),
    )
    .unwrap();
    let accs = [[0.9, 0.8], [0.8, 0.9], [0.9, 0.8 + 2e-9], [0.85, 0.849]];
    for seed in 0..2u64 {
        for (round, a) in accs.iter().enumerate() {
            write_record(dir.path(), seed, round, a[seed as usize]);
        }
    }
    let report = build_report(dir.path()).unwrap();
    let marks: Vec<Marker> = report.columns.iter().map(|c| c.marker).collect();
    assert_eq!(
        marks,
        [Marker::None, Marker::None, Marker::Up, Marker::Down]
    );
    let table = report.accuracy_table();
    let cells: Vec<&str> = table.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(cells[1], "85.00 ± 7.07");
    assert_eq!(cells[2], "85.00 ± 7.07");
    assert_eq!(cells[3], "85.00 ± 7.07 ↑");
    assert!(cells[4].ends_with(" ↓"));
}

#[test]
fn single_column_has_no_marker() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = Manifest::parse(&MANIFEST.replace("self-distill", "scratch")).unwrap();
    let run = RunManifest {
        version: "test".into(),
        seeds: vec![0],
        manifest,
    };
    fs::write(
        dir.path().join("manifest.json"),
        serde_json::to_string(&run).unwrap(),
    )
    .unwrap();
    write_record(dir.path(), 0, 0, 0.7);
    let report = build_report(dir.path()).unwrap();
    assert_eq!(report.columns.len(), 1);
    assert_eq!(
        report.accuracy_table(),
        "experiment,Teacher\nmlp / multiview / no-aug / alpha=0.5,70.00 ± 0.00\n"
    );
}
