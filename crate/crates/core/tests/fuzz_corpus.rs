//! Replays the checked-in fuzz corpus through the parsers with the same
//! round-trip checks the fuzz targets make.

use std::fs;
use std::path::{Path, PathBuf};

use masktune::config::{KvConfig, RunConfig};
use masktune::container;
use masktune::data::idx;

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .map(|p| {
            let bytes = fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn idx_image_seeds() {
    let mut ok = 0;
    for (p, data) in seeds("idx_images") {
        if let Ok(img) = idx::parse_images(&data, &p) {
            assert_eq!(img.pixels.len(), img.count * img.rows * img.cols);
            assert_eq!(idx::parse_images(&idx::encode_images(&img), &p).unwrap(), img);
            ok += 1;
        }
    }
    assert!(ok >= 1);
}

#[test]
fn idx_label_seeds() {
    for (p, data) in seeds("idx_labels") {
        if let Ok(labels) = idx::parse_labels(&data, &p) {
            assert_eq!(idx::encode_labels(&labels), data);
        }
    }
}

#[test]
fn container_seeds() {
    let mut decoded = 0;
    for (_, data) in seeds("mtck_decode") {
        if let Ok(tensors) = container::decode(&data) {
            let bytes = container::encode(tensors.iter().map(|(n, t)| (n.as_str(), t))).unwrap();
            assert_eq!(bytes, data);
            decoded += 1;
        }
    }
    assert!(decoded >= 2);
}

#[test]
fn config_seeds() {
    let mut built = 0;
    for (_, data) in seeds("config_parse") {
        let Ok(text) = std::str::from_utf8(&data) else { continue };
        if let Ok(kv) = KvConfig::parse(text) {
            assert_eq!(KvConfig::parse(&kv.to_string()).unwrap(), kv);
            if let Ok(run) = RunConfig::from_kv(&kv) {
                assert_eq!(RunConfig::from_kv(&run.to_kv()).unwrap(), run);
                built += 1;
            }
        }
    }
    assert!(built >= 2);
}
