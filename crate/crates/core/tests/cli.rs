use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use advrec::checkpoint::write_checkpoint;
use advrec::dataio::{gamma_quotas, write_pairs};
use advrec::encoder::{Encoder, EncoderKind};
use advrec::loss::HardnessModel;
use advrec::numkit::EmbeddingTable;
use advrec::rng::substream;
use rand::seq::SliceRandom;
use serde_json::Value;
use tempfile::TempDir;

fn advrec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_advrec"))
        .args(args)
        .output()
        .expect("spawn advrec")
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

/// 100 users and 50 items: six train, one valid and one test item each.
fn write_toy(dir: &Path) -> [PathBuf; 3] {
    let mut rng = substream(3, "cli-toy");
    let (mut train, mut valid, mut test) = (vec![], vec![], vec![]);
    for u in 0..100u64 {
        let mut items: Vec<u64> = (0..50).collect();
        items.shuffle(&mut rng);
        train.extend(items[..6].iter().map(|&i| (u, i)));
        valid.push((u, items[6]));
        test.push((u, items[7]));
    }
    let paths = [dir.join("train.tsv"), dir.join("valid.tsv"), dir.join("test.tsv")];
    for (p, pairs) in paths.iter().zip([&train, &valid, &test]) {
        write_pairs(p, pairs).unwrap();
    }
    paths
}

fn train_toy(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let [tr, va, te] = write_toy(dir);
    let out = s(&dir.join(out));
    let mut args = vec![
        "train",
        "--train",
        &*s(&tr),
        "--valid",
        &*s(&va),
        "--test",
        &*s(&te),
        "--out",
        &out,
    ]
    .into_iter()
    .map(String::from)
    .collect::<Vec<_>>();
    for a in [
        "--dim",
        "16",
        "--tau",
        "0.2",
        "--batch_size",
        "64",
        "--n_negatives",
        "16",
        "--k_weight",
        "16",
        "--max_epochs",
        "5",
        "--t_adv_interval",
        "2",
        "--lr",
        "1e-2",
        "--lr_adv",
        "1e-3",
    ] {
        args.push(a.into());
    }
    args.extend(extra.iter().map(|a| a.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    advrec(&refs)
}

fn last_metrics(out: &Path) -> Value {
    let text = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    serde_json::from_str(text.lines().last().unwrap()).unwrap()
}

#[test]
fn missing_train_file_exits_2_and_names_it() {
    let dir = TempDir::new().unwrap();
    let [_, va, te] = write_toy(dir.path());
    let missing = dir.path().join("nope.tsv");
    let o = advrec(&[
        "train",
        "--train",
        &s(&missing),
        "--valid",
        &s(&va),
        "--test",
        &s(&te),
        "--out",
        &s(&dir.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.tsv"));
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.ini");
    std::fs::write(&cfg, "[train]\nlearning_rate = 0.1\n").unwrap();
    let o = train_toy(dir.path(), "o", &["--config", &s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn toy_run_is_fast_and_writes_artifacts() {
    let dir = TempDir::new().unwrap();
    let start = Instant::now();
    let o = train_toy(dir.path(), "run", &["--encoder", "lightgcn"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(start.elapsed().as_secs_f64() < 10.0);
    let out = dir.path().join("run");
    for f in ["config.ini", "metrics.jsonl", "best.ckpt", "final.ckpt"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let lines = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 5);
}

#[test]
fn flag_overrides_config_and_snapshot_records_it() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.ini");
    std::fs::write(&cfg, "# toy\ndim = 8\nseed = 4\nstrategy = reverse\n").unwrap();
    let o = train_toy(dir.path(), "run", &["--config", &s(&cfg), "--seed", "9"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let snap = std::fs::read_to_string(dir.path().join("run/config.ini")).unwrap();
    // --dim 16 from the toy flags beats dim = 8 from the file
    assert!(snap.contains("dim = 16\n"));
    assert!(snap.contains("seed = 9\n"));
    assert!(snap.contains("strategy = reverse\n"));
}

#[test]
fn same_seed_gives_identical_metrics() {
    let dir = TempDir::new().unwrap();
    assert!(train_toy(dir.path(), "a", &["--seed", "5"]).status.success());
    assert!(train_toy(dir.path(), "b", &["--seed", "5"]).status.success());
    let read = |d: &str| std::fs::read(dir.path().join(d).join("metrics.jsonl")).unwrap();
    assert_eq!(read("a"), read("b"));
}

#[test]
fn evaluate_reproduces_last_logged_validation_metric() {
    let dir = TempDir::new().unwrap();
    let o = train_toy(dir.path(), "run", &["--encoder", "lightgcn", "--k_eval", "10"]);
    assert!(o.status.success());
    let logged = last_metrics(&dir.path().join("run"));
    let [tr, va, te] = [
        dir.path().join("train.tsv"),
        dir.path().join("valid.tsv"),
        dir.path().join("test.tsv"),
    ];
    let o = advrec(&[
        "evaluate",
        "--checkpoint",
        &s(&dir.path().join("run/final.ckpt")),
        "--train",
        &s(&tr),
        "--valid",
        &s(&va),
        "--test",
        &s(&te),
        "--split",
        "valid",
        "--k_eval",
        "10",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let printed: Value = serde_json::from_slice(&o.stdout).unwrap();
    for key in ["recall@10", "ndcg@10", "hr@10"] {
        assert_eq!(printed[key].as_f64().unwrap(), logged[key].as_f64().unwrap(), "{key}");
    }
    assert_eq!(printed["split"], "valid");
}

#[test]
fn perfect_model_has_recall_at_one_of_one() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    // user u and its test item u share a basis direction
    write_pairs(&p.join("train.tsv"), &[(0, 1), (1, 2), (2, 0)]).unwrap();
    write_pairs(&p.join("valid.tsv"), &[]).unwrap();
    write_pairs(&p.join("test.tsv"), &[(0, 0), (1, 1), (2, 2)]).unwrap();
    // first-seen remapping: raw item order in train is 1, 2, 0
    let eye = |rows: &[usize]| {
        let mut v = vec![0.0; 9];
        for (r, &c) in rows.iter().enumerate() {
            v[r * 3 + c] = 1.0;
        }
        EmbeddingTable::from_values(3, 3, v).unwrap()
    };
    let enc = Encoder::from_parts(EncoderKind::Mf, eye(&[0, 1, 2]), eye(&[1, 2, 0]), 0, None, 0.5).unwrap();
    let hardness = HardnessModel::embed(3, 3, 3, &mut substream(0, "h"));
    let ck = p.join("perfect.ckpt");
    write_checkpoint(&ck, &enc, &hardness).unwrap();
    let o = advrec(&[
        "evaluate",
        "--checkpoint",
        &s(&ck),
        "--train",
        &s(&p.join("train.tsv")),
        "--valid",
        &s(&p.join("valid.tsv")),
        "--test",
        &s(&p.join("test.tsv")),
        "--k_eval",
        "1",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let printed: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(printed["recall@1"].as_f64(), Some(1.0));
    assert_eq!(printed["n_users"].as_u64(), Some(3));
}

#[test]
fn mismatched_item_count_exits_2() {
    let dir = TempDir::new().unwrap();
    assert!(train_toy(dir.path(), "run", &[]).status.success());
    let other = dir.path().join("other");
    std::fs::create_dir(&other).unwrap();
    write_pairs(&other.join("train.tsv"), &[(0, 0), (1, 1), (2, 2)]).unwrap();
    write_pairs(&other.join("valid.tsv"), &[]).unwrap();
    write_pairs(&other.join("test.tsv"), &[(0, 1)]).unwrap();
    let o = advrec(&[
        "evaluate",
        "--checkpoint",
        &s(&dir.path().join("run/best.ckpt")),
        "--train",
        &s(&other.join("train.tsv")),
        "--valid",
        &s(&other.join("valid.tsv")),
        "--test",
        &s(&other.join("test.tsv")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

fn generate(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["generate", "--out"];
    let out = s(out);
    args.push(&out);
    args.extend(["--n_users", "200", "--n_items", "100", "--seed", "3"]);
    args.extend(extra);
    advrec(&args)
}

#[test]
fn generate_is_byte_identical_across_runs() {
    let dir = TempDir::new().unwrap();
    assert!(generate(&dir.path().join("a"), &[]).status.success());
    assert!(generate(&dir.path().join("b"), &[]).status.success());
    for f in [
        "train.tsv",
        "valid.tsv",
        "test.tsv",
        "planted_fn.tsv",
        "spec.ini",
        "manifest.json",
    ] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    assert!(!std::fs::read(dir.path().join("a/planted_fn.tsv")).unwrap().is_empty());
}

#[test]
fn gamma_manifest_quotas_follow_formula() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("g");
    let o = generate(&out, &["--gamma", "10", "--n0", "10"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let quotas: Vec<u64> = manifest["quotas"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap())
        .collect();
    let expect: Vec<u64> = (1..=50)
        .map(|i| (10.0 * 10f64.powf(-((i - 1) as f64) / 49.0)).round() as u64)
        .collect();
    assert_eq!(quotas, expect);
    assert_eq!(
        gamma_quotas(10, 10.0, 50)
            .unwrap()
            .iter()
            .map(|&q| q as u64)
            .collect::<Vec<_>>(),
        expect
    );
    // planted false negatives are kept only where they landed in test
    let test = std::fs::read_to_string(out.join("test.tsv")).unwrap();
    let test: std::collections::HashSet<&str> = test.lines().collect();
    for line in std::fs::read_to_string(out.join("planted_fn.tsv")).unwrap().lines() {
        assert!(test.contains(line));
    }
}

#[test]
fn zero_plant_rate_gives_empty_planted_list() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("z");
    assert!(generate(&out, &["--fn_plant_rate", "0"]).status.success());
    assert!(std::fs::read(out.join("planted_fn.tsv")).unwrap().is_empty());
}

fn data_flags(dir: &Path) -> Vec<String> {
    ["train", "valid", "test"]
        .iter()
        .flat_map(|k| [format!("--{k}"), s(&dir.join(format!("{k}.tsv")))])
        .collect()
}

fn diagnose(dir: &Path, which: &str, checkpoints: &[&Path], extra: &[&str]) -> Output {
    let mut args: Vec<String> = vec!["diagnose".into(), "--which".into(), which.into()];
    for ck in checkpoints {
        args.push("--checkpoint".into());
        args.push(s(ck));
    }
    args.extend(data_flags(dir));
    args.extend(["--out".into(), s(&dir.join("diag"))]);
    args.extend(extra.iter().map(|a| a.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    advrec(&refs)
}

#[test]
fn profile_of_untrained_hardness_is_flat() {
    let dir = TempDir::new().unwrap();
    assert!(train_toy(dir.path(), "run", &["--strategy", "none", "--encoder", "mf"])
        .status
        .success());
    let dim = 16;
    let enc_ck = dir.path().join("run/final.ckpt");
    let zero = dir.path().join("zero.ckpt");
    {
        let (enc, _) = advrec::checkpoint::read_checkpoint(&enc_ck, None).unwrap();
        let h = HardnessModel::from_tables(
            advrec::loss::HardnessKind::Embed,
            EmbeddingTable::zeros(100, dim),
            EmbeddingTable::zeros(50, dim),
        )
        .unwrap();
        write_checkpoint(&zero, &enc, &h).unwrap();
    }
    let o = diagnose(
        dir.path(),
        "profile",
        &[&zero],
        &["--n_negatives", "16", "--batches", "200", "--bins", "5"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("diag/profile.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert!(!rows.is_empty());
    for row in rows {
        let cols: Vec<&str> = row.split(',').collect();
        let mean_p: f64 = cols[2].parse().unwrap();
        assert!((mean_p - 1.0 / 16.0).abs() < 1e-12, "{row}");
    }
}

#[test]
fn fnrate_without_planted_list_exits_2() {
    let dir = TempDir::new().unwrap();
    assert!(train_toy(dir.path(), "run", &[]).status.success());
    let o = diagnose(dir.path(), "fnrate", &[&dir.path().join("run/best.ckpt")], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());
}

#[test]
fn alignuniform_has_one_row_per_snapshot() {
    let dir = TempDir::new().unwrap();
    assert!(train_toy(dir.path(), "run", &[]).status.success());
    let run = dir.path().join("run");
    let (best, fin) = (run.join("best.ckpt"), run.join("final.ckpt"));
    let o = diagnose(dir.path(), "alignuniform", &[&best, &fin], &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("diag/alignuniform.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("best.ckpt,"));
    assert!(rows[2].starts_with("final.ckpt,"));
}

#[test]
fn fnrate_on_generated_data_writes_rate() {
    let dir = TempDir::new().unwrap();
    let data = dir.path();
    assert!(generate(data, &[]).status.success());
    let flags = data_flags(data);
    let mut args: Vec<&str> = vec!["train", "--out"];
    let out = s(&data.join("run"));
    args.push(&out);
    args.extend(flags.iter().map(String::as_str));
    args.extend([
        "--encoder",
        "mf",
        "--dim",
        "8",
        "--batch_size",
        "256",
        "--n_negatives",
        "16",
        "--max_epochs",
        "2",
    ]);
    assert!(advrec(&args).status.success());
    let planted = s(&data.join("planted_fn.tsv"));
    let o = diagnose(
        data,
        "fnrate",
        &[&data.join("run/final.ckpt")],
        &["--planted_fn", &planted, "--n_negatives", "16"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(data.join("diag/fnrate.csv")).unwrap();
    let row = csv.lines().nth(1).unwrap();
    let rate: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&rate));
}
