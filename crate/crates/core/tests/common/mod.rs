//! Helpers for driving the `cis` binary.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

pub fn cis(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cis"))
        .args(args)
        .output()
        .expect("cis binary runs")
}

/// Runs `cis` writing CSV to `out` and returns the file bytes.
pub fn run_to_file(args: &[&str], out: &Path) -> Vec<u8> {
    let mut full: Vec<&str> = args.to_vec();
    let out_str = out.to_str().expect("utf-8 temp path");
    full.extend(["--out", out_str]);
    let result = cis(&full);
    assert!(
        result.status.success(),
        "cis {full:?} failed: {}",
        String::from_utf8_lossy(&result.stderr)
    );
    std::fs::read(out).expect("CSV written")
}

/// `mean_mse` values keyed by every column except estimator, MSE and CI,
/// one entry per estimator in file order.
pub fn mse_by_step(csv: &[u8]) -> BTreeMap<String, Vec<(String, f64)>> {
    let text = std::str::from_utf8(csv).expect("utf-8 CSV");
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().expect("header").split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).expect("column present");
    let (est, mse, lo, hi) = (col("estimator"), col("mean_mse"), col("ci_lo"), col("ci_hi"));
    let mut groups: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        let key = fields
            .iter()
            .enumerate()
            .filter(|(i, _)| ![est, mse, lo, hi].contains(i))
            .map(|(_, f)| *f)
            .collect::<Vec<_>>()
            .join(",");
        let value: f64 = fields[mse].parse().expect("numeric MSE");
        groups.entry(key).or_default().push((fields[est].to_string(), value));
    }
    groups
}

/// Largest spread of `mean_mse` across estimators at any step.
pub fn max_estimator_spread(csv: &[u8]) -> f64 {
    mse_by_step(csv)
        .values()
        .map(|vals| {
            let first = vals[0].1;
            vals.iter().map(|(_, v)| (v - first).abs()).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}
