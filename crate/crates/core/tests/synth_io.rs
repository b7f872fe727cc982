use std::fs;

use crossfuse_core::synth::{self, SceneConfig};
use crossfuse_core::Error;

#[test]
fn ten_samples_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let (samples, manifest) = synth::synthesize(5, &SceneConfig::default(), 6, 2, 2);
    assert_eq!(samples.len(), 10);
    synth::write_dataset(&samples, &manifest, dir.path()).unwrap();
    let back = synth::read_dataset(dir.path()).unwrap();
    assert_eq!(back.manifest, manifest);
    assert_eq!(back.samples.len(), 10);
    for (a, b) in samples.iter().zip(&back.samples) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.visible, b.visible);
        assert_eq!(a.infrared, b.infrared);
        assert_eq!(a.labels.len(), b.labels.len());
        for (la, lb) in a.labels.iter().zip(&b.labels) {
            assert_eq!(la.to_line(), lb.to_line());
            assert_eq!(la.class, lb.class);
            assert_eq!(la.bbox, lb.bbox);
        }
    }
    assert_eq!(back.split("val").unwrap().len(), 2);
}

#[test]
fn same_seed_writes_identical_bytes() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let (s, m) = synth::synthesize(9, &SceneConfig::default(), 3, 1, 1);
        synth::write_dataset(&s, &m, d.path()).unwrap();
    }
    for rel in ["images/visible/000004.png", "images/infrared/000000.png", "labels/000002.txt", "manifest.json"] {
        assert_eq!(fs::read(a.path().join(rel)).unwrap(), fs::read(b.path().join(rel)).unwrap(), "{rel}");
    }
}

#[test]
fn orphan_image_names_its_partner() {
    let dir = tempfile::tempdir().unwrap();
    let (s, m) = synth::synthesize(1, &SceneConfig::default(), 3, 0, 0);
    synth::write_dataset(&s, &m, dir.path()).unwrap();
    let gone = dir.path().join("images/infrared/000001.png");
    fs::remove_file(&gone).unwrap();
    match synth::read_dataset(dir.path()) {
        Err(Error::MissingPair { missing, .. }) => assert_eq!(missing, gone),
        other => panic!("expected a missing-pair error, got {other:?}"),
    }
}

#[test]
fn malformed_label_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let (s, m) = synth::synthesize(1, &SceneConfig::default(), 1, 0, 0);
    synth::write_dataset(&s, &m, dir.path()).unwrap();
    let path = dir.path().join("labels/000000.txt");
    let mut text = fs::read_to_string(&path).unwrap();
    text.push_str("1 0.5 0.5 0.2\n");
    fs::write(&path, text).unwrap();
    match synth::read_dataset(dir.path()) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, s[0].labels.len() + 1),
        other => panic!("expected a parse error, got {other:?}"),
    }
}
