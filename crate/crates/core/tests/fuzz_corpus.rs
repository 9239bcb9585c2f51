//! The checked-in fuzz seeds must stay valid inputs for their decoders.

use std::fs;
use std::path::PathBuf;

use advfield::checkpoint::Checkpoint;
use advfield::cli::RunConfig;
use advfield::image::Image;
use advfield::scene_io::{decode_cameras, decode_depth, decode_split};

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir).unwrap().map(|e| e.unwrap().path()).map(|p| (p.clone(), fs::read(p).unwrap())).collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds in {}", dir.display());
    out
}

fn text(b: &[u8]) -> &str {
    std::str::from_utf8(b).unwrap()
}

#[test]
fn seeds_decode() {
    for (p, b) in seeds("checkpoint") {
        Checkpoint::decode(&b).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
    for (p, b) in seeds("cameras_json") {
        decode_cameras(text(&b)).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
    for (p, b) in seeds("split_json") {
        decode_split(text(&b)).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
    for (p, b) in seeds("run_config") {
        RunConfig::from_toml_over(&RunConfig::desk(), text(&b)).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
    for (p, b) in seeds("depth_f32") {
        decode_depth(&b[2..], b[0] as usize, b[1] as usize).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
    for (p, b) in seeds("png") {
        Image::decode_png(&b).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
}

#[test]
fn truncated_seeds_fail_cleanly() {
    for (_, b) in seeds("checkpoint") {
        for cut in [0, 1, 7, b.len() / 2, b.len() - 1] {
            assert!(Checkpoint::decode(&b[..cut]).is_err());
        }
    }
    for (_, b) in seeds("png") {
        for cut in [0, 8, b.len() / 2] {
            assert!(Image::decode_png(&b[..cut]).is_err());
        }
    }
}
