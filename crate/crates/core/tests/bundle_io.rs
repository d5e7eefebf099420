mod common;

use std::fs;

use robust_adapt::dataio::{generate_synthetic, load_bundle, save_bundle, GroupPrompts};
use robust_adapt::{presets, Error, Matrix};

#[test]
fn s1_round_trips_bit_exactly() {
    let b = generate_synthetic(&presets::s1()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_bundle(&b, dir.path()).unwrap();
    let back = load_bundle(dir.path()).unwrap();
    assert_eq!(back, b);
    assert_eq!(back.checksum(), b.checksum());
}

#[test]
fn group_prompts_round_trip() {
    let mut b = common::random_bundle(3, 40, 4, 2, 2);
    b.group_prompts = Some(GroupPrompts {
        embeds: Matrix::from_vec(2, 4, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.5, -0.5]).unwrap(),
        classes: vec![0, 1],
        groups: vec![1, 0],
    });
    let dir = tempfile::tempdir().unwrap();
    save_bundle(&b, dir.path()).unwrap();
    assert_eq!(load_bundle(dir.path()).unwrap(), b);

    // Saving without prompts removes the stale prompt files.
    b.group_prompts = None;
    save_bundle(&b, dir.path()).unwrap();
    assert!(!dir.path().join("group_prompts.bin").exists());
    assert_eq!(load_bundle(dir.path()).unwrap(), b);
}

#[test]
fn truncated_embeddings_name_byte_counts() {
    let b = common::random_bundle(1, 30, 4, 2, 2);
    let dir = tempfile::tempdir().unwrap();
    save_bundle(&b, dir.path()).unwrap();
    let path = dir.path().join("embeddings.bin");
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    match load_bundle(dir.path()) {
        Err(Error::Format { file, message, .. }) => {
            assert_eq!(file, "embeddings.bin");
            assert!(message.contains(&(30 * 4 * 4).to_string()), "{message}");
            assert!(message.contains(&(30 * 4 * 4 - 3).to_string()), "{message}");
        }
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn label_row_count_mismatch_is_a_format_error() {
    let b = common::random_bundle(2, 30, 4, 2, 2);
    let dir = tempfile::tempdir().unwrap();
    save_bundle(&b, dir.path()).unwrap();
    let path = dir.path().join("labels.csv");
    let text = fs::read_to_string(&path).unwrap();
    let kept: Vec<&str> = text.lines().take(20).collect();
    fs::write(&path, kept.join("\n") + "\n").unwrap();
    let err = load_bundle(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Format { ref file, .. } if file == "labels.csv"), "{err}");
}

#[test]
fn unknown_version_is_rejected() {
    let b = common::random_bundle(4, 30, 4, 2, 2);
    let dir = tempfile::tempdir().unwrap();
    save_bundle(&b, dir.path()).unwrap();
    let path = dir.path().join("manifest.txt");
    let text = fs::read_to_string(&path).unwrap().replace("format_version = 1", "format_version = 2");
    fs::write(&path, text).unwrap();
    assert!(matches!(load_bundle(dir.path()), Err(Error::VersionMismatch { .. })));
}

#[test]
fn bad_label_field_reports_offset_and_field() {
    let b = common::random_bundle(5, 30, 4, 2, 2);
    let dir = tempfile::tempdir().unwrap();
    save_bundle(&b, dir.path()).unwrap();
    let path = dir.path().join("labels.csv");
    let text = fs::read_to_string(&path).unwrap();
    let broken = text.replacen("\n0,", "\n0,x", 1);
    let offset = broken.find("\n0,x").unwrap() as u64 + 1;
    fs::write(&path, broken).unwrap();
    match load_bundle(dir.path()) {
        Err(Error::Format { field, offset: got, .. }) => {
            assert_eq!(field, "class");
            assert_eq!(got, offset);
        }
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn missing_directory_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_bundle(&dir.path().join("absent")).unwrap_err();
    assert_eq!(err.class(), "IoError");
}

#[test]
fn generation_is_byte_identical() {
    for spec in [presets::s1(), presets::s2(), presets::s3()] {
        assert_eq!(
            generate_synthetic(&spec).unwrap().checksum(),
            generate_synthetic(&spec).unwrap().checksum()
        );
    }
}
