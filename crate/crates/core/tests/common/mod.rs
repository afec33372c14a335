//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use prince_bart::data::{CovariateInfo, Covariates, Kind};
use prince_bart::interpret::CartTree;
use rand::seq::SliceRandom;
use rand::Rng;

pub fn matrix(cols: Vec<Vec<f64>>) -> Covariates<f64> {
    Covariates::from_columns(
        cols.into_iter()
            .enumerate()
            .map(|(i, c)| (CovariateInfo { name: format!("x{}", i + 1), kind: Kind::Continuous, transform: None }, c))
            .collect(),
    )
}

fn sse(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|t| (t - m) * (t - m)).sum()
}

/// Exhaustive search over every (variable, observed cut) pair, scoring each
/// by the direct two-pass SSE reduction. Near-ties resolve to the lowest
/// variable, then the lowest cut.
pub fn exhaustive_split(targets: &[f64], x: &Covariates<f64>, rows: &[usize], min_node: usize) -> Option<(usize, f64, f64)> {
    let parent: Vec<f64> = rows.iter().map(|&r| targets[r]).collect();
    let parent_sse = sse(&parent);
    let tol = 1e-9 * parent_sse.max(1.0);
    let mut best: Option<(usize, f64, f64)> = None;
    for var in 0..x.p() {
        let mut values: Vec<f64> = rows.iter().map(|&r| x.get(r, var)).collect();
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        values.dedup();
        for &cut in values.iter().take(values.len().saturating_sub(1)) {
            let (l, r): (Vec<f64>, Vec<f64>) = {
                let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| x.get(i, var) <= cut);
                (l.iter().map(|&i| targets[i]).collect(), r.iter().map(|&i| targets[i]).collect())
            };
            if l.len() < min_node.max(1) || r.len() < min_node.max(1) {
                continue;
            }
            let gain = parent_sse - sse(&l) - sse(&r);
            if gain <= tol {
                continue;
            }
            if best.map_or(true, |b| gain > b.2 + tol) {
                best = Some((var, cut, gain));
            }
        }
    }
    best
}

/// Checks every node of a fitted tree against [`exhaustive_split`]: internal
/// nodes must carry the oracle's split and unconstrained leaves must have no
/// admissible improving split.
pub fn check_tree_against_oracle(tree: &CartTree, targets: &[f64], x: &Covariates<f64>) -> Result<usize, String> {
    let mut checked = 0;
    let mut stack = vec![(0usize, (0..x.n()).collect::<Vec<usize>>())];
    while let Some((id, rows)) = stack.pop() {
        let node = &tree.nodes[id];
        if node.n != rows.len() {
            return Err(format!("node {id}: size {} but {} rows reach it", node.n, rows.len()));
        }
        let depth_capped = tree.max_depth.is_some_and(|d| node.depth >= d);
        let oracle = if depth_capped { None } else { exhaustive_split(targets, x, &rows, tree.min_node_size) };
        match (node.split, oracle) {
            (Some(s), Some((var, cut, _))) => {
                if s.var != var || s.cut != cut {
                    return Err(format!("node {id}: greedy split (x{}, {}) but exhaustive (x{}, {cut})", s.var + 1, s.cut, var + 1));
                }
                checked += 1;
                let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| x.get(i, s.var) <= s.cut);
                stack.push((node.left, l));
                stack.push((node.right, r));
            }
            (None, None) => {}
            (Some(s), None) => return Err(format!("node {id}: split on x{} but no admissible split exists", s.var + 1)),
            (None, Some((var, cut, g))) => return Err(format!("node {id}: leaf but exhaustive finds (x{}, {cut}) gaining {g}", var + 1)),
        }
    }
    Ok(checked)
}

/// A random CART instance: integer-valued or continuous covariates, with a
/// step-structured target plus noise.
pub fn random_cart_instance<R: Rng>(rng: &mut R) -> (Vec<f64>, Covariates<f64>, Option<usize>, usize) {
    let n = rng.gen_range(10..=500);
    let p = rng.gen_range(1..=4);
    let cols: Vec<Vec<f64>> = (0..p)
        .map(|_| {
            let levels = [2usize, 3, 5, 12, 0][rng.gen_range(0..5)];
            (0..n)
                .map(|_| if levels == 0 { rng.gen_range(-1.0..1.0) } else { rng.gen_range(0..levels) as f64 })
                .collect()
        })
        .collect();
    let x = matrix(cols);
    let targets = (0..n)
        .map(|i| {
            let signal = if x.get(i, 0) > 0.5 { 1.0 } else { 0.0 } + if x.get(i, p - 1) > 0.0 { 0.5 } else { -0.5 };
            signal + rng.gen_range(-1.0..1.0)
        })
        .collect();
    let depth = if rng.gen_bool(0.5) { None } else { Some(rng.gen_range(1..=4)) };
    let min_node = rng.gen_range(1..=20);
    (targets, x, depth, min_node)
}

/// XOR surface `x1 xor x2` over a factorial design in `x1`, `x2` and `noise`
/// further binary columns, shuffled. `x2 = 1` in 40% of rows, so `x1` alone
/// explains R² = 0.04 and the greedy tree has a first split to take; the
/// noise columns and `x2` are exactly orthogonal to the surface.
pub fn xor_design<R: Rng>(noise: usize, reps: usize, rng: &mut R) -> (Vec<f64>, Covariates<f64>) {
    let p = 2 + noise;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for _ in 0..reps {
        for code in 0..(1usize << p) {
            let row: Vec<f64> = (0..p).map(|j| ((code >> j) & 1) as f64).collect();
            let copies = if row[1] == 1.0 { 2 } else { 3 };
            rows.extend(std::iter::repeat(row).take(copies));
        }
    }
    rows.shuffle(rng);
    let targets = rows.iter().map(|r| if r[0] != r[1] { 1.0 } else { 0.0 }).collect();
    let cols = (0..p).map(|j| rows.iter().map(|r| r[j]).collect()).collect();
    (targets, matrix(cols))
}

/// Writes a small instrument dataset with a positive complier effect that
/// grows with `x1`, plus a `site` column (`sites` groups) for reference-scale
/// estimation.
pub fn write_effect_csv(path: &std::path::Path, n: usize, sites: usize, seed: u64) {
    let mut rng = prince_bart::numeric::stream_rng(seed, 0);
    let mut out = String::from("z,w,y,x1,x2,site\n");
    for i in 0..n {
        let x1: f64 = rng.gen_range(0.0..1.0);
        let x2: u32 = rng.gen_range(0..3);
        let z = rng.gen_bool(0.5);
        let g: f64 = rng.gen_range(0.0..1.0);
        let w = if g < 0.2 { true } else if g < 0.7 { z } else { false };
        let complier = (0.2..0.7).contains(&g);
        let p = if complier && w { 0.35 + 0.4 * x1 } else { 0.3 + 0.05 * x2 as f64 };
        let y = rng.gen_bool(p);
        let site = i % sites.max(1);
        out.push_str(&format!("{},{},{},{x1:.4},{x2},s{site}\n", z as u8, w as u8, y as u8));
    }
    std::fs::write(path, out).unwrap();
}

/// Small run settings that keep command-level tests quick.
pub fn write_quick_config(path: &std::path::Path) {
    let cfg = serde_json::json!({
        "chains": 2,
        "iterations": 30,
        "burn_in": 10,
        "trees_m": 20,
        "propensity_iterations": 40,
        "seed": 5,
        "exclude": ["site"],
        "segments": [{ "name": "high_x1", "conditions": [{ "covariate": "x1", "min": 0.5 }] }]
    });
    std::fs::write(path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
}

pub struct CliOutcome {
    pub code: i32,
    pub stdout: String,
}

pub fn run_cli(args: &[&str]) -> CliOutcome {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_prince-bart"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    CliOutcome { code: out.status.code().unwrap_or(-1), stdout: String::from_utf8_lossy(&out.stdout).into_owned() }
}

/// Every file of `a` other than the manifest must exist in `b` with identical
/// bytes; returns the number of files compared.
pub fn assert_same_outputs(a: &std::path::Path, b: &std::path::Path) -> usize {
    let mut compared = 0;
    let mut names: Vec<_> = std::fs::read_dir(a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    for name in names {
        if name == "manifest.json" {
            continue;
        }
        let left = std::fs::read(a.join(&name)).unwrap();
        let right = std::fs::read(b.join(&name)).unwrap_or_else(|_| panic!("{name:?} missing from {}", b.display()));
        assert!(left == right, "{name:?} differs between {} and {}", a.display(), b.display());
        compared += 1;
    }
    let manifest = |d: &std::path::Path| -> serde_json::Value { serde_json::from_slice(&std::fs::read(d.join("manifest.json")).unwrap()).unwrap() };
    assert_eq!(manifest(a)["outputs"], manifest(b)["outputs"]);
    compared
}

pub fn read_json(path: &std::path::Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}
