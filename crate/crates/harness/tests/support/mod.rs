#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const SMALL: &str = "T = 3\nrounds = 2\nper_client_n = 40\nstep_l = 3\nstep_c = 2\nbatch_size = 8\n";

pub fn evifed() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_evifed"));
    cmd.env_remove("EVIFED_OUT_DIR");
    cmd
}

pub fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

/// Runs the binary with `args`, panicking with its stderr unless it exits with `code`.
pub fn run_expect(args: &[&str], code: i32) -> Output {
    let out = evifed().args(args).output().unwrap();
    assert_eq!(
        out.status.code(),
        Some(code),
        "evifed {args:?}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(str::to_string).collect();
    let rows = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    (header, rows)
}

/// CSV rows as JSON objects: empty cells become null, numeric cells numbers.
pub fn csv_as_json(path: &Path) -> Vec<serde_json::Value> {
    let (header, rows) = read_csv(path);
    rows.into_iter()
        .map(|row| {
            assert_eq!(row.len(), header.len(), "{}: ragged row", path.display());
            let map = header
                .iter()
                .zip(row)
                .map(|(k, v)| {
                    let value = if v.is_empty() {
                        serde_json::Value::Null
                    } else if let Ok(i) = v.parse::<i64>() {
                        i.into()
                    } else if let Ok(f) = v.parse::<f64>() {
                        f.into()
                    } else {
                        v.into()
                    };
                    (k.clone(), value)
                })
                .collect();
            serde_json::Value::Object(map)
        })
        .collect()
}

/// Every regular file under `dir`, relative paths in sorted order.
pub fn files(dir: &Path) -> Vec<PathBuf> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

pub fn assert_same_tree(a: &Path, b: &Path) {
    let fa = files(a);
    assert_eq!(fa, files(b));
    for f in fa {
        assert!(std::fs::read(a.join(&f)).unwrap() == std::fs::read(b.join(&f)).unwrap(), "{} differs", f.display());
    }
}
