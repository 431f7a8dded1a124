//! Runs every `hbl` subcommand once into a scratch directory and collects
//! what it produced, for byte-for-byte comparison between runs.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;

use hbl_core::Tensor;

pub fn run_hbl(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_hbl"))
        .args(args)
        .output()
        .expect("spawn hbl")
}

/// Drops the `wall_ns` column of a gemm-bench CSV.
pub fn strip_wall_clock(csv: &str) -> String {
    let header: Vec<&str> = csv.lines().next().unwrap_or("").split(',').collect();
    let col = header.iter().position(|h| *h == "wall_ns");
    csv.lines()
        .map(|line| {
            let cells: Vec<&str> = line.split(',').collect();
            cells
                .iter()
                .enumerate()
                .filter(|(i, _)| Some(*i) != col)
                .map(|(_, c)| *c)
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn collect_dir(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            collect_dir(root, &path, out);
        } else {
            let key = path
                .strip_prefix(root)
                .unwrap()
                .to_string_lossy()
                .into_owned();
            let mut bytes = fs::read(&path).unwrap();
            if key.ends_with("bench.csv") {
                bytes = strip_wall_clock(&String::from_utf8(bytes).unwrap()).into_bytes();
            }
            out.insert(key, bytes);
        }
    }
}

/// Every subcommand with fixed seeds; returns output files and stdout keyed
/// by name. Panics if a command fails.
pub fn run_every_command(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let x = dir.join("x.bnt");
    let data: Vec<f32> = (0..4 * 64)
        .map(|i| ((i as f32) * 0.377).sin() * if i % 64 == 0 { 30.0 } else { 1.0 })
        .collect();
    Tensor::from_vec(&[4, 64], data).unwrap().save(&x).unwrap();
    let cfg = dir.join("cfg.json");
    fs::write(
        &cfg,
        serde_json::json!({
            "layers": 1, "hidden": 16, "glu": 32, "heads": 2, "vocab": 8, "seq_len": 8,
            "batch": 4, "steps_a8": 18, "steps_a4": 2, "task": "copy",
            "lr_peak": 0.003, "lr_peak_stage2": 0.0015, "weight_decay": 0.1,
            "warmup_steps": 4, "stage_boundary": 0.9, "adam_beta1": 0.9, "adam_beta2": 0.95,
            "adam_eps": 1e-8, "grad_clip": 1.0, "rotation": "activation", "outlier_gain": 4.0,
            "seed": 5
        })
        .to_string(),
    )
    .unwrap();
    let out = dir.join("out");
    fs::create_dir_all(&out).unwrap();
    let o = |name: &str| s(&out.join(name));
    let (xs, cs) = (s(&x), s(&cfg));

    let runs: Vec<(&str, Vec<String>)> = vec![
        (
            "hadamard",
            vec![
                "hadamard".into(),
                "--in".into(),
                xs.clone(),
                "--out".into(),
                o("h.bnt"),
            ],
        ),
        (
            "quantize-w",
            vec![
                "quantize".into(),
                "--mode".into(),
                "w1.58".into(),
                "--in".into(),
                xs.clone(),
                "--out".into(),
                o("w.bnt"),
                "--dequant".into(),
                o("w.deq.bnt"),
            ],
        ),
        (
            "quantize-a8",
            vec![
                "quantize".into(),
                "--mode".into(),
                "a8".into(),
                "--in".into(),
                xs.clone(),
                "--out".into(),
                o("a8.bnt"),
            ],
        ),
        (
            "quantize-a4",
            vec![
                "quantize".into(),
                "--mode".into(),
                "a4".into(),
                "--in".into(),
                xs.clone(),
                "--out".into(),
                o("a4.bnt"),
            ],
        ),
        (
            "quantize-kv4",
            vec![
                "quantize".into(),
                "--mode".into(),
                "kv4".into(),
                "--in".into(),
                xs.clone(),
                "--out".into(),
                o("kv4.bnt"),
                "--bos-first".into(),
            ],
        ),
        (
            "quantize-kv3",
            vec![
                "quantize".into(),
                "--mode".into(),
                "kv3".into(),
                "--in".into(),
                xs.clone(),
                "--out".into(),
                o("kv3.bnt"),
            ],
        ),
        (
            "gemm-bench",
            vec![
                "gemm-bench".into(),
                "--m".into(),
                "8".into(),
                "--n".into(),
                "16".into(),
                "--k".into(),
                "64".into(),
                "--act-bits".into(),
                "4".into(),
                "--iters".into(),
                "3".into(),
                "--seed".into(),
                "7".into(),
                "--csv".into(),
                o("bench.csv"),
            ],
        ),
        (
            "stats",
            vec!["stats".into(), "--in".into(), xs.clone(), "--json".into()],
        ),
        (
            "stats-text",
            vec!["stats".into(), "--in".into(), xs.clone()],
        ),
        (
            "hist",
            vec![
                "hist".into(),
                "--in".into(),
                xs.clone(),
                "--bins".into(),
                "16".into(),
                "--min".into(),
                "-3".into(),
                "--max".into(),
                "3".into(),
                "--csv".into(),
                o("hist.csv"),
            ],
        ),
        (
            "rotate-compare",
            vec![
                "rotate-compare".into(),
                "--in".into(),
                xs.clone(),
                "--bits".into(),
                "4".into(),
                "--json".into(),
            ],
        ),
        (
            "train-a8",
            vec![
                "train-toy".into(),
                "--config".into(),
                cs.clone(),
                "--stage".into(),
                "a8".into(),
                "--out".into(),
                o("a8run"),
            ],
        ),
        (
            "train-a4",
            vec![
                "train-toy".into(),
                "--config".into(),
                cs.clone(),
                "--stage".into(),
                "a4".into(),
                "--resume".into(),
                o("a8run"),
                "--out".into(),
                o("a4run"),
            ],
        ),
        (
            "ablation",
            vec![
                "ablation".into(),
                "--config".into(),
                cs.clone(),
                "--out".into(),
                o("ablation.json"),
            ],
        ),
    ];
    let mut results = BTreeMap::new();
    for (name, args) in runs {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let output = run_hbl(&args);
        assert!(
            output.status.success(),
            "{name}: {}",
            String::from_utf8_lossy(&output.stderr)
        );
        results.insert(format!("stdout:{name}"), output.stdout);
    }
    collect_dir(&out, &out, &mut results);
    results
}
