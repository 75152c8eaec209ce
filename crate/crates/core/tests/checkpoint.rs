mod common;

use std::collections::BTreeMap;

use boomerang::analysis::CalibrationSet;
use boomerang::checkpoint::{load_checkpoint, load_checkpoint_with_header, read_header, save_checkpoint, save_checkpoint_with};
use boomerang::model::{init_random, ModelConfig, ParameterSet};
use boomerang::pruning::{laco_merge, shortgpt_prune, LacoConfig};
use boomerang::surgery::{init_student, patch, BlockPartition, KeepRule};
use boomerang::Error;
use common::*;

fn kinds() -> Vec<(&'static str, ParameterSet<f32>)> {
    let tied = ModelConfig {
        tie_embeddings: true,
        ..tiny_config(8)
    };
    let teacher: ParameterSet<f32> = init_random(&tied, 1).unwrap();
    let part = BlockPartition::every_kth(8, 2, KeepRule::KeepLast).unwrap();
    let student = init_student(&teacher, &part).unwrap();
    let mut trained = student.clone();
    trained.embedding.data_mut()[0] += 0.5;
    let interp = patch(&trained, &teacher, &part, &[4, 5].into_iter().collect()).unwrap();
    let mut r = rng(1);
    let calib = CalibrationSet::new((0..2).map(|_| random_tokens(&mut r, 6, 19)).collect()).unwrap();
    let (short, _) = shortgpt_prune(&teacher, &calib, 3, true).unwrap();
    let laco_cfg = LacoConfig {
        threshold: -2.0,
        ..LacoConfig::default()
    };
    let (laco, _) = laco_merge(&teacher, &calib, &laco_cfg).unwrap();
    let learned: ParameterSet<f32> = init_random(&learned(tiny_config(2)), 2).unwrap();
    vec![
        ("teacher", teacher),
        ("student", student),
        ("interpolated", interp),
        ("shortgpt", short),
        ("laco", laco),
        ("learned-positions", learned),
    ]
}

#[test]
fn round_trip_all_kinds() {
    let dir = tempfile::tempdir().unwrap();
    for (name, p) in kinds() {
        let path = dir.path().join(format!("{name}.ckpt"));
        save_checkpoint(&p, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config, p.config, "{name}");
        assert!(params_identical(&back, &p), "{name}");
        assert_eq!(std::mem::discriminant(&back.head), std::mem::discriminant(&p.head), "{name}");
    }
}

#[test]
fn interpolated_is_untied_after_conflict() {
    let k = kinds();
    let interp = &k[2].1;
    assert!(!interp.config.tie_embeddings);
}

#[test]
fn saves_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let p: ParameterSet<f32> = init_random(&tiny_config(2), 3).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    save_checkpoint(&p, &a).unwrap();
    save_checkpoint(&p, &b).unwrap();
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn desk_teacher_loads_with_eight_layers() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.ckpt");
    save_checkpoint(&init_random::<f32>(&ModelConfig::default(), 0).unwrap(), &path).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap().n_layers(), 8);
    assert_eq!(read_header(&path).unwrap().config.n_layers, 8);
}

#[test]
fn metadata_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut meta = BTreeMap::new();
    meta.insert("kind".to_string(), serde_json::json!("student"));
    meta.insert("partition".to_string(), serde_json::json!([1, 3, 5, 7, 8]));
    save_checkpoint_with(&init_random::<f32>(&tiny_config(1), 0).unwrap(), &meta, &path).unwrap();
    assert_eq!(load_checkpoint_with_header(&path).unwrap().1.meta, meta);
}

fn saved() -> (tempfile::TempDir, std::path::PathBuf, Vec<u8>) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ckpt");
    save_checkpoint(&init_random::<f32>(&tiny_config(2), 4).unwrap(), &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    (dir, path, bytes)
}

#[test]
fn corrupted_magic_is_format_error() {
    let (_d, path, mut bytes) = saved();
    bytes[0] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
    std::fs::write(&path, b"BMR").unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
}

#[test]
fn version_mismatch_is_typed() {
    let (_d, path, mut bytes) = saved();
    bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Version { found: 7, .. })));
}

#[test]
fn truncated_payload_names_tensor() {
    let (_d, path, bytes) = saved();
    std::fs::write(&path, &bytes[..bytes.len() - 200]).unwrap();
    match load_checkpoint(&path) {
        Err(Error::Bounds { tensor, .. }) => assert_eq!(tensor, "lm_head"),
        other => panic!("expected bounds error, got {other:?}"),
    }
}

#[test]
fn garbage_header_is_format_error() {
    let (_d, path, mut bytes) = saved();
    bytes[20] = b'#';
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
    let (_d, path, mut bytes) = saved();
    bytes[12..20].copy_from_slice(&u64::MAX.to_le_bytes());
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
}

#[test]
fn header_inconsistent_with_config_rejected() {
    let (_d, path, bytes) = saved();
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let header = String::from_utf8(bytes[20..20 + len].to_vec()).unwrap();
    let tampered = header.replace("\"n_layers\":2", "\"n_layers\":3");
    assert_eq!(tampered.len(), header.len());
    let mut out = bytes.clone();
    out[20..20 + len].copy_from_slice(tampered.as_bytes());
    std::fs::write(&path, &out).unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn missing_file_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_checkpoint(&dir.path().join("none")), Err(Error::Io(_))));
}

#[test]
fn failed_save_leaves_no_file() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("missing-dir").join("x.ckpt");
    assert!(save_checkpoint(&init_random::<f32>(&tiny_config(1), 0).unwrap(), &target).is_err());
    assert!(!target.exists());
}
