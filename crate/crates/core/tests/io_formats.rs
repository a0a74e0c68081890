//! Round trips and rejection paths of every file format.

use std::fs;

use proptest::prelude::*;
use tpskg::io::{
    csv_text, encode_checkpoint, load_checkpoint, metrics_line, parse_csv, parse_pgm, pgm_bytes,
    read_checkpoint_header, read_dataset, read_metrics, save_checkpoint, write_dataset,
    FORMAT_VERSION,
};
use tpskg::{generate_dataset, EpochMetrics, Error, Mode, Model, RunConfig, Trainer};

fn small(mode: Mode) -> RunConfig {
    RunConfig {
        image_h: 16,
        image_w: 16,
        patch: 4,
        embed_dim: 8,
        layers: 1,
        heads: 2,
        classes: 3,
        train_per_class: 2,
        test_per_class: 1,
        ..RunConfig::toy(mode)
    }
}

#[test]
fn config_round_trips_and_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    for mode in Mode::ALL {
        let cfg = RunConfig::toy(mode);
        let path = dir.path().join("c.cfg");
        fs::write(&path, cfg.to_json()).unwrap();
        assert_eq!(RunConfig::load(&path).unwrap(), cfg);
    }
    let text = RunConfig::toy(Mode::Full)
        .to_json()
        .replacen('{', "{\n  \"dropout\": 0.1,", 1);
    let err = RunConfig::from_json(&text, "x.cfg".as_ref()).unwrap_err();
    assert!(matches!(&err, Error::Config { key, .. } if key == "dropout"), "{err}");

    let mut v: serde_json::Value = serde_json::from_str(&RunConfig::toy(Mode::Full).to_json()).unwrap();
    v.as_object_mut().unwrap().remove("momentum");
    let err = RunConfig::from_json(&v.to_string(), "x.cfg".as_ref()).unwrap_err();
    assert!(matches!(&err, Error::Config { key, .. } if key == "momentum"), "{err}");

    let bad = RunConfig { heads: 3, ..RunConfig::toy(Mode::Full) };
    let err = RunConfig::from_json(&bad.to_json(), "x.cfg".as_ref()).unwrap_err();
    assert!(err.to_string().contains("heads"));
}

#[test]
fn config_hash_tracks_content() {
    let a = RunConfig::toy(Mode::Full);
    let b = RunConfig { seed: 1, ..a.clone() };
    assert_eq!(a.hash(), a.clone().hash());
    assert_ne!(a.hash(), b.hash());
    assert_eq!(a.hash().len(), 64);
}

#[test]
fn checkpoint_round_trip_in_both_precisions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(Mode::Full);
    let (train, test) = generate_dataset(&cfg.dataset()).unwrap();
    let mut t = Trainer::<f32>::new(Model::new(&cfg.model(), cfg.mode).unwrap(), cfg.train()).unwrap();
    t.train_epoch(&train, &test).unwrap();
    let path = dir.path().join("a.bin");
    save_checkpoint(&path, &cfg, &t).unwrap();
    let header = read_checkpoint_header(&path).unwrap();
    assert_eq!(header.version, FORMAT_VERSION);
    assert_eq!((header.precision, header.epoch, header.step), (32, 1, t.step));
    assert_eq!(header.config_hash, cfg.hash());
    let (_, back) = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(encode_checkpoint(&cfg, &back), fs::read(&path).unwrap());
    assert!(load_checkpoint::<f64>(&path).is_err());

    let cfg64 = RunConfig { precision: 64, ..cfg };
    let t64 = Trainer::<f64>::new(Model::new(&cfg64.model(), cfg64.mode).unwrap(), cfg64.train()).unwrap();
    let path = dir.path().join("b.bin");
    save_checkpoint(&path, &cfg64, &t64).unwrap();
    let (_, back) = load_checkpoint::<f64>(&path).unwrap();
    for ((_, a), (_, b)) in back.model.store.iter().zip(t64.model.store.iter()) {
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(Mode::NoKg);
    let t = Trainer::<f32>::new(Model::new(&cfg.model(), cfg.mode).unwrap(), cfg.train()).unwrap();
    let good = encode_checkpoint(&cfg, &t);
    let path = dir.path().join("x.bin");

    let mut cases: Vec<Vec<u8>> = Vec::new();
    cases.push(good[..good.len() - 3].to_vec());
    let mut magic = good.clone();
    magic[0] = b'X';
    cases.push(magic);
    let mut version = good.clone();
    version[8] = 99;
    cases.push(version);
    let mut trailing = good.clone();
    trailing.push(0);
    cases.push(trailing);
    // flip a byte inside the stored hash
    let mut hash = good.clone();
    hash[20] ^= 1;
    cases.push(hash);
    for bytes in cases {
        fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint::<f32>(&path).map(|_| ()).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }
    let missing = dir.path().join("missing.bin");
    let err = load_checkpoint::<f32>(&missing).map(|_| ()).unwrap_err();
    assert!(err.to_string().contains("missing.bin"));
}

#[test]
fn metrics_lines_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let records = [
        EpochMetrics {
            epoch: 1,
            step: 10,
            lr: 0.01,
            loss_total: 2.5,
            loss_kl: Some(1.0),
            loss_rep: Some(0.75),
            train_acc: 0.5,
            test_acc: 0.25,
            wall_ms: None,
        },
        EpochMetrics {
            epoch: 2,
            step: 20,
            lr: 0.0,
            loss_total: 0.1,
            loss_kl: None,
            loss_rep: None,
            train_acc: 1.0,
            test_acc: 0.875,
            wall_ms: Some(12),
        },
    ];
    let text: String = records.iter().map(|m| metrics_line("abc", m) + "\n").collect();
    let path = dir.path().join("metrics.jsonl");
    fs::write(&path, &text).unwrap();
    let back = read_metrics(&path).unwrap();
    assert_eq!(back.len(), 2);
    for (r, m) in back.iter().zip(&records) {
        assert_eq!(r.config_hash, "abc");
        assert_eq!(&r.metrics, m);
    }
    assert!(text.lines().next().unwrap().contains("\"loss_kl\":1.0"));
    assert!(text.lines().nth(1).unwrap().contains("\"loss_kl\":null"));
}

#[test]
fn csv_keeps_header_and_values() {
    let rows = vec![vec![0.1f64, -2.5e-7, 3.0], vec![1.0 / 3.0, f64::MAX, 0.0]];
    let text = csv_text("h1", &["rows: truth"], &rows);
    assert!(text.starts_with(&format!("# tpskg-format {FORMAT_VERSION} config-hash h1\n# rows: truth\n")));
    assert_eq!(parse_csv(&text).unwrap(), rows);
    assert!(parse_csv("1,x\n").is_err());
}

#[test]
fn graymap_rescales_linearly() {
    let values = [0.25, 0.5, 1.25, 0.375];
    let bytes = pgm_bytes(&values, 2, 2, 3);
    let (w, h, px) = parse_pgm(&bytes).unwrap();
    assert_eq!((w, h), (6, 6));
    assert_eq!(*px.iter().min().unwrap(), 0);
    assert_eq!(*px.iter().max().unwrap(), 255);
    for y in 0..6 {
        for x in 0..6 {
            let v = values[(y / 3) * 2 + x / 3];
            let want = ((v - 0.25) * 255.0).round() as u8;
            assert_eq!(px[y * 6 + x], want);
        }
    }
    let (_, _, flat) = parse_pgm(&pgm_bytes(&[0.4; 4], 2, 2, 1)).unwrap();
    assert_eq!(flat, vec![0; 4]);
    assert!(parse_pgm(b"P2\n1 1\n255\n\x00").is_err());
}

#[test]
fn dataset_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small(Mode::Full).dataset();
    let (train, test) = generate_dataset(&spec).unwrap();
    write_dataset(dir.path(), &spec, &train, &test).unwrap();
    let (manifest, tr, te) = read_dataset(dir.path()).unwrap();
    assert_eq!(manifest.spec, spec);
    assert_eq!((tr, te), (train.clone(), test));
    assert_eq!(
        fs::metadata(dir.path().join("train.bin")).unwrap().len(),
        (train.len() * 16 * 16 * 8) as u64
    );

    let bin = dir.path().join("test.bin");
    let mut bytes = fs::read(&bin).unwrap();
    bytes.pop();
    fs::write(&bin, bytes).unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(Error::Format { .. })));
}

proptest! {
    #[test]
    fn metrics_reals_survive_text(loss in any::<f64>().prop_filter("finite", |v| v.is_finite()), lr in 0.0f64..1.0) {
        let m = EpochMetrics {
            epoch: 1,
            step: 1,
            lr,
            loss_total: loss,
            loss_kl: Some(loss / 3.0),
            loss_rep: None,
            train_acc: lr / 7.0,
            test_acc: 0.0,
            wall_ms: None,
        };
        let back: tpskg::io::MetricsRecord = serde_json::from_str(&metrics_line("h", &m)).unwrap();
        prop_assert_eq!(back.metrics, m);
    }

    #[test]
    fn csv_round_trips_any_finite_value(rows in prop::collection::vec(prop::collection::vec(-1e300f64..1e300, 1..5), 1..5)) {
        let text = csv_text("h", &[], &rows);
        prop_assert_eq!(parse_csv(&text).unwrap(), rows);
    }

    #[test]
    fn f32_csv_round_trips(rows in prop::collection::vec(prop::collection::vec(-1e30f32..1e30, 1..5), 1..5)) {
        let text = csv_text("h", &[], &rows);
        let back = parse_csv(&text).unwrap();
        for (a, b) in back.iter().flatten().zip(rows.iter().flatten()) {
            prop_assert_eq!(*a as f32, *b);
        }
    }
}

#[test]
fn shipped_presets_are_the_toy_defaults() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for mode in Mode::ALL {
        let cfg = RunConfig::load(&dir.join(format!("ablation_{mode}.cfg"))).unwrap();
        assert_eq!(cfg, RunConfig::toy(mode));
    }
    let fast = RunConfig::load(&dir.join("full_lr0_3e-2.cfg")).unwrap();
    assert_eq!(fast, RunConfig { lr0: 3e-2, ..RunConfig::toy(Mode::Full) });
}
