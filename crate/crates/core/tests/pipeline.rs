use czc_core::buffer::{materialize_record, ExemplarStore};
use czc_core::cam::CompressionMode;
use czc_core::codec::{self, ArchConfig};
use czc_core::datamodel::BudgetMode;
use czc_core::harness::{self, read_csv, DatasetSource, ExperimentConfig};
use czc_core::desk::DeskConfig;
use czc_core::Error;

fn small(mode: CompressionMode, out: &std::path::Path) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        dataset: DatasetSource::Desk(DeskConfig { classes: 4, train_per_class: 24, test_per_class: 8, size: 32, seed: 3 }),
        mode,
        out: out.to_path_buf(),
        seed: 5,
        ..Default::default()
    };
    c.protocol.budget_images = 3;
    c.train.initial_epochs = 2;
    c.train.incremental_epochs = 2;
    c.train.lr_decay_epochs = vec![1];
    c.train.batch_size = 16;
    c.codec.train.arch = ArchConfig { channels: 8, latent: 8, hyper: 8 };
    c.codec.train.epochs = 1;
    c.codec.finetune_epochs = 1;
    c
}

#[test]
fn composite_run_writes_consistent_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(CompressionMode::CamComposite, dir.path());
    let report = harness::run(&cfg).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert_eq!(report.rows.iter().map(|r| r.classes_seen).collect::<Vec<_>>(), vec![2, 4]);
    for r in &report.rows {
        assert!(r.buffer_bits <= r.budget_bits);
        assert!((0.0..=1.0).contains(&r.top1));
    }
    let csv = read_csv(&dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv, report.rows);
    for f in ["summary.json", "report.json", "accuracy.svg", "bpp.svg", "config.txt", "codec.ckpt", "store/manifest"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    // The store reloads and decodes with the saved codec.
    let model = codec::checkpoint::load(&dir.path().join("codec.ckpt")).unwrap();
    let store = ExemplarStore::load(&dir.path().join("store"), czc_core::buffer::MemoryBudget::bits(u64::MAX)).unwrap();
    assert_eq!(store.len(), report.rows[1].exemplar_count);
    let images = store.materialize(Some(&model)).unwrap();
    assert_eq!(images.len(), store.len());
    assert!(images.iter().all(|(img, _)| (img.height, img.width) == (32, 32)));
    // A different decoder is refused, naming the record.
    let other_dir = tempfile::tempdir().unwrap();
    let other_cfg = ExperimentConfig { seed: 6, ..small(CompressionMode::CamComposite, other_dir.path()) };
    harness::run(&other_cfg).unwrap();
    let other = codec::checkpoint::load(&other_dir.path().join("codec.ckpt")).unwrap();
    let rec = store.records.values().flatten().next().unwrap();
    match materialize_record(rec, Some(&other)) {
        Err(Error::IncompatibleModel { record: Some(r), .. }) => assert!(r.contains(&rec.source_id.to_string())),
        other => panic!("expected incompatible model, got {other:?}"),
    }
}

#[test]
fn raw_run_respects_the_image_budget_and_repeats_exactly() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut cfg = small(CompressionMode::Raw, a.path());
    cfg.protocol.budget_mode = BudgetMode::FixedTotal;
    cfg.protocol.budget_images = 6;
    let ra = harness::run(&cfg).unwrap();
    let rb = harness::run(&ExperimentConfig { out: b.path().to_path_buf(), ..cfg.clone() }).unwrap();
    for (x, y) in ra.rows.iter().zip(&rb.rows) {
        assert_eq!((x.top1, x.exemplar_count, x.buffer_bits), (y.top1, y.exemplar_count, y.buffer_bits));
    }
    // Raw records carry 96 bits of metadata, so six raw-image budgets hold five.
    assert!(ra.rows.iter().all(|r| r.exemplar_count <= 6));
    assert_eq!(ra.rows[1].exemplar_count, 5);
    let ma = std::fs::read_to_string(a.path().join("store/manifest")).unwrap();
    let mb = std::fs::read_to_string(b.path().join("store/manifest")).unwrap();
    assert_eq!(ma, mb);
}

#[test]
fn single_task_sequence_runs_one_phase() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(CompressionMode::BlankBackground, dir.path());
    cfg.protocol.base_classes = 4;
    let report = harness::run(&cfg).unwrap();
    assert_eq!(report.rows.len(), 1);
    assert_eq!(report.avg, report.last);
}

#[test]
fn malformed_configs_are_rejected() {
    let mut cfg = small(CompressionMode::Raw, std::path::Path::new("unused"));
    cfg.protocol.step_classes = 3;
    assert!(matches!(harness::run(&cfg), Err(Error::Config(_))));
    assert!(ExperimentConfig::parse("dataset = /definitely/not/here").unwrap().validate().is_err());
}
