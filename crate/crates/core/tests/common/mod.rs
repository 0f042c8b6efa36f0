#![allow(dead_code)]

use std::path::{Path, PathBuf};

use thct_core::data::ntu::{load_ntu_file, parse_ntu_skeleton, write_ntu_skeleton};
use thct_core::data::skeleton::DatasetSplit;
use thct_core::data::synthetic::{generate_train_val, Archetype};
use thct_core::Error;

pub fn micro_data(classes: usize, train_per_class: usize, val_per_class: usize, seed: u64) -> (DatasetSplit, DatasetSplit) {
    let kinds = Archetype::first(classes).unwrap();
    generate_train_val(&kinds, train_per_class, val_per_class, 20, 0.05, seed).unwrap()
}

pub fn fixture_dir(kind: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/ntu").join(kind)
}

fn sorted_files(dir: &Path) -> Vec<PathBuf> {
    let mut files: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    files
}

pub struct FixtureOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Positive fixtures must parse, carry the label from their file name and
/// survive a write/parse round trip exactly. Negative fixtures must fail with
/// a parse error at the line encoded in their name (`..._line<N>.skeleton`).
pub fn ntu_fixture_outcomes() -> Vec<FixtureOutcome> {
    let mut out = Vec::new();
    for (i, path) in sorted_files(&fixture_dir("positive")).into_iter().enumerate() {
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        let outcome = (|| -> Result<String, String> {
            let seq = load_ntu_file(&path, i as u64).map_err(|e| e.to_string())?;
            let code: usize = name[17..20].parse().unwrap();
            if seq.label != code - 1 {
                return Err(format!("label {} for action code {code}", seq.label));
            }
            let c = seq.coords();
            for j in 0..25 {
                let want = [j as f32, 2.0 * j as f32, 3.0 * j as f32];
                let got = [c.get(&[0, 0, j, 0]), c.get(&[1, 0, j, 0]), c.get(&[2, 0, j, 0])];
                if got != want {
                    return Err(format!("joint {j}: {got:?} != {want:?}"));
                }
            }
            let text = write_ntu_skeleton(c).map_err(|e| e.to_string())?;
            let again = parse_ntu_skeleton(&text).map_err(|e| e.to_string())?;
            if !again.bit_eq(c) {
                return Err("write/parse round trip changed coordinates".into());
            }
            Ok(format!("shape {:?}", c.shape()))
        })();
        out.push(match outcome {
            Ok(detail) => FixtureOutcome { name, passed: true, detail },
            Err(detail) => FixtureOutcome { name, passed: false, detail },
        });
    }
    for path in sorted_files(&fixture_dir("negative")) {
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        let stem = name.trim_end_matches(".skeleton");
        let want: usize = stem[stem.rfind("line").unwrap() + 4..].parse().unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let (passed, detail) = match parse_ntu_skeleton(&text) {
            Err(Error::Parse { line, message }) => (line == want, format!("line {line}: {message}")),
            Err(other) => (false, format!("wrong error kind: {other}")),
            Ok(t) => (false, format!("parsed unexpectedly to {:?}", t.shape())),
        };
        out.push(FixtureOutcome { name, passed, detail });
    }
    out
}
