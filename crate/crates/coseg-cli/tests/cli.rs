//! End-to-end checks of the command-line surface. Heavy training is covered
//! by the core acceptance suite; these runs use a tiny model config.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn coseg() -> Command {
    Command::new(env!("CARGO_BIN_EXE_coseg"))
}

fn tmp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("coseg-cli-{}-{}", tag, std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.cfg");
    fs::write(
        &path,
        "stage_channels=4,8\nconvs_per_stage=1\ninput_size=32\nvariant=ca\ndropout=0.5\npooling=avg\n",
    )
    .unwrap();
    path
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawn coseg")
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn help_exits_zero_for_every_subcommand() {
    for sub in [
        "gen-data",
        "train",
        "eval",
        "coseg-pair",
        "coseg-group",
        "benchmark",
        "gradcheck",
        "export-attention",
    ] {
        let out = run(coseg().args([sub, "--help"]));
        assert!(out.status.success(), "{} --help failed", sub);
    }
    assert_success(&run(coseg().arg("--help")));
}

#[test]
fn gen_data_writes_a_deterministic_tree() {
    let dir = tmp_dir("gendata");
    let args = |out: &Path| {
        vec![
            "gen-data".to_string(),
            "--out".to_string(),
            out.display().to_string(),
            "--seed".to_string(),
            "5".to_string(),
            "--canvas".to_string(),
            "32".to_string(),
            "--train-pairs".to_string(),
            "4".to_string(),
            "--val-pairs".to_string(),
            "2".to_string(),
            "--test-pairs-per-class".to_string(),
            "1".to_string(),
        ]
    };
    let a = dir.join("a");
    let b = dir.join("b");
    assert_success(&run(coseg().args(args(&a))));
    assert_success(&run(coseg().args(args(&b))));
    assert!(a.join("manifest.tsv").exists());
    assert!(a.join("train").exists());

    // Same seed, same bytes.
    let digest = |root: &Path| {
        let mut files = Vec::new();
        collect_files(root, &mut files);
        files.sort();
        let mut hash = 0xcbf29ce484222325u64;
        for f in files {
            for byte in fs::read(&f).unwrap() {
                hash ^= byte as u64;
                hash = hash.wrapping_mul(0x100000001b3);
            }
        }
        hash
    };
    assert_eq!(digest(&a), digest(&b));
    fs::remove_dir_all(&dir).unwrap();
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) {
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            collect_files(&path, out);
        } else {
            out.push(path);
        }
    }
}

#[test]
fn train_eval_pair_group_attention_roundtrip() {
    let dir = tmp_dir("pipeline");
    let cfg = write_tiny_config(&dir);
    let data = dir.join("data");
    assert_success(&run(coseg().args([
        "gen-data",
        "--out",
        data.to_str().unwrap(),
        "--seed",
        "3",
        "--canvas",
        "32",
        "--train-pairs",
        "4",
        "--val-pairs",
        "2",
        "--test-pairs-per-class",
        "1",
    ])));

    let ckpt = dir.join("model.ckpt");
    assert_success(&run(coseg().args([
        "train",
        "--data",
        data.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--epochs",
        "1",
        "--precision",
        "32",
    ])));
    assert!(ckpt.exists());

    let report = dir.join("report.tsv");
    assert_success(&run(coseg().args([
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--split",
        "test",
        "--out",
        report.to_str().unwrap(),
        "--precision",
        "32",
    ])));
    let report_text = fs::read_to_string(&report).unwrap();
    assert!(report_text.starts_with("class\tpairs\tjaccard\tprecision"));
    assert!(report_text.lines().any(|l| l.starts_with("mean\t")));

    // Pair prediction on two dataset images.
    let pair_dir = fs::read_to_string(data.join("manifest.tsv"))
        .unwrap()
        .lines()
        .nth(1)
        .map(|l| data.join(l.split('\t').nth(2).unwrap()))
        .unwrap();
    let masks = dir.join("masks");
    assert_success(&run(coseg().args([
        "coseg-pair",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        masks.to_str().unwrap(),
        "--precision",
        "32",
        pair_dir.join("a.ppm").to_str().unwrap(),
        pair_dir.join("b.ppm").to_str().unwrap(),
    ])));
    assert!(masks.join("a_mask.pgm").exists());
    assert!(masks.join("b_mask.pgm").exists());

    // Group over a directory of images.
    let group_dir = dir.join("group");
    fs::create_dir_all(&group_dir).unwrap();
    for (i, name) in ["a.ppm", "b.ppm"].iter().enumerate() {
        fs::copy(pair_dir.join(name), group_dir.join(format!("img{}.ppm", i))).unwrap();
    }
    let group_out = dir.join("group-out");
    assert_success(&run(coseg().args([
        "coseg-group",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--dir",
        group_dir.to_str().unwrap(),
        "--out",
        group_out.to_str().unwrap(),
        "--mode",
        "minimum",
        "--precision",
        "32",
    ])));
    assert!(group_out.join("img0_mask.pgm").exists());
    let attention = fs::read_to_string(group_out.join("attention.csv")).unwrap();
    assert_eq!(attention.lines().count(), 2);
    // label plus 8 channels.
    assert_eq!(attention.lines().next().unwrap().split(',').count(), 9);

    let export = dir.join("attention.txt");
    assert_success(&run(coseg().args([
        "export-attention",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--dir",
        group_dir.to_str().unwrap(),
        "--out",
        export.to_str().unwrap(),
        "--precision",
        "32",
    ])));
    assert_eq!(fs::read_to_string(&export).unwrap().lines().count(), 2);

    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn benchmark_reports_counting_laws() {
    let dir = tmp_dir("bench");
    let cfg = write_tiny_config(&dir);
    let out = run(coseg().args([
        "benchmark",
        "--n",
        "2,4",
        "--config",
        cfg.to_str().unwrap(),
        "--precision",
        "32",
    ]));
    assert_success(&out);
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    let mut rows = std::collections::HashMap::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        rows.insert((f[0].to_string(), f[1].to_string()), f[2].parse::<usize>().unwrap());
    }
    assert_eq!(rows[&("2".to_string(), "instant".to_string())], 2);
    assert_eq!(rows[&("2".to_string(), "pairwise".to_string())], 2);
    assert_eq!(rows[&("4".to_string(), "instant".to_string())], 4);
    assert_eq!(rows[&("4".to_string(), "pairwise".to_string())], 12);
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn invalid_config_key_fails_with_single_error_line() {
    let dir = tmp_dir("badcfg");
    let cfg = dir.join("bad.cfg");
    fs::write(&cfg, "input_size=16\nwombats=4\n").unwrap();
    let out = run(coseg().args([
        "benchmark",
        "--n",
        "2",
        "--config",
        cfg.to_str().unwrap(),
    ]));
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = stderr.lines().filter(|l| !l.trim().is_empty()).collect();
    assert_eq!(lines.len(), 1, "stderr: {}", stderr);
    assert!(lines[0].starts_with("error:"), "stderr: {}", stderr);
    assert!(lines[0].contains("unknown key"));
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn missing_checkpoint_fails_cleanly() {
    let out = run(coseg().args([
        "eval",
        "--data",
        "/nonexistent-data",
        "--checkpoint",
        "/nonexistent.ckpt",
    ]));
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
