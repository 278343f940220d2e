use std::path::Path;
use std::process::{Command, Output};

fn higen(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_higen"))
        .args(args)
        .current_dir(dir)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn only_dir(root: &Path, prefix: &str) -> std::path::PathBuf {
    let mut found: Vec<_> = std::fs::read_dir(root.join("work"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_str().unwrap().starts_with(prefix))
        .collect();
    assert_eq!(found.len(), 1, "{prefix} dirs: {found:?}");
    found.pop().unwrap()
}

#[test]
fn run_all_then_decode_and_expand() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(&higen(dir, &["gen-synthetic", "--out", "data"]));
    let stdout = ok(&higen(dir, &["run-all", "--out", "report.json"]));
    assert!(stdout.contains("held-in queries: 200"));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["label"], "full");
    assert!(report["metrics"]["held_in"]["recall_at_k"]["10"].as_f64().unwrap() >= 0.9);

    let again = higen(dir, &["run-all"]);
    ok(&again);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("work/report.json")).unwrap()).unwrap();
    assert!(report["stages"].as_array().unwrap().iter().all(|s| s["skipped"] == true));

    let decoder = only_dir(dir, "decoder-").join("decoder.json");
    let index = only_dir(dir, "docids-").join("index.bin");
    let i2i = only_dir(dir, "eval-").join("i2i.jsonl");
    std::fs::write(
        dir.join("q.jsonl"),
        "{\"user_id\":\"user1\",\"query\":\"cat3 style2 w5\",\"context\":[4,{\"item_id\":7,\"behavior\":\"click\"}]}\n\n{\"query\":\"cat9 style8\"}\n",
    )
    .unwrap();
    let decoded = ok(&higen(
        dir,
        &[
            "decode", "--checkpoint", decoder.to_str().unwrap(), "--index", index.to_str().unwrap(),
            "--beam", "8", "--topk", "3", "--input", "q.jsonl",
        ],
    ));
    let lines: Vec<serde_json::Value> = decoded.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["query"], "cat3 style2 w5");
    let results = lines[0]["results"].as_array().unwrap();
    assert_eq!(results.len(), 3);
    let lp: Vec<f64> = results.iter().map(|r| r["logprob"].as_f64().unwrap()).collect();
    assert!(lp.windows(2).all(|w| w[0] >= w[1]));
    assert!(results[0]["docid"].as_str().unwrap().split('-').all(|t| t.parse::<u32>().is_ok()));

    std::fs::write(dir.join("d.jsonl"), &decoded).unwrap();
    let expanded = ok(&higen(
        dir,
        &[
            "expand", "--index", index.to_str().unwrap(), "--variant", "cluster-1-i2i", "--i2i",
            i2i.to_str().unwrap(), "--cap", "15", "--input", "d.jsonl",
        ],
    ));
    let first: serde_json::Value = serde_json::from_str(expanded.lines().next().unwrap()).unwrap();
    assert_eq!(first["variant"], "cluster-1-i2i");
    assert_eq!(first["recall_num"], 15);
    assert_eq!(first["items"][0]["source"], "direct");

    let bad = higen(dir, &["expand", "--index", index.to_str().unwrap(), "--variant", "i2i", "--input", "d.jsonl"]);
    assert_eq!(bad.status.code(), Some(2), "i2i without a table is a config error");
}

#[test]
fn stage_commands_and_ablation_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(&higen(dir, &["gen-synthetic", "--out", "data", "--seed", "3"]));
    let out = higen(dir, &["build-docids"]);
    ok(&out);
    let err = String::from_utf8_lossy(&out.stderr).into_owned();
    assert!(err.contains("embed") && err.contains("docids") && !err.contains("decoder"));
    ok(&higen(dir, &["run-all", "--no-position-aware-loss", "--out", "ablated.json"]));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("ablated.json")).unwrap()).unwrap();
    assert_eq!(report["label"], "w/o position-aware loss");
    assert_eq!(report["config"]["decoder"]["model"]["position_aware"], false);
}

#[test]
fn exit_codes_follow_error_class() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("bad.toml"), "[docid]\nk = 1\n").unwrap();
    assert_eq!(higen(dir, &["--config", "bad.toml", "run-all"]).status.code(), Some(2));
    assert_eq!(
        Command::new(env!("CARGO_BIN_EXE_higen"))
            .args(["run-all"])
            .current_dir(dir)
            .env("HIGEN_EVAL__KS", "[0]")
            .output()
            .unwrap()
            .status
            .code(),
        Some(2)
    );
    // Missing data files are a data-class failure.
    assert_eq!(higen(dir, &["run-all"]).status.code(), Some(3));
    std::fs::write(dir.join("bad.jsonl"), "{\"query\":\n").unwrap();
    ok(&higen(dir, &["gen-synthetic", "--out", "data"]));
    ok(&higen(dir, &["build-docids"]));
    let index = only_dir(dir, "docids-").join("index.bin");
    let out = higen(dir, &["expand", "--index", index.to_str().unwrap(), "--input", "bad.jsonl"]);
    assert_eq!(out.status.code(), Some(3));
}
