use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn countforge(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_countforge"));
    cmd.args(args);
    for var in ["COUNTFORGE_SEED", "COUNTFORGE_JOBS", "COUNTFORGE_CONFIG", "COUNTFORGE_BASE_URL"] {
        cmd.env_remove(var);
    }
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn write_records(dir: &Path, name: &str, records: Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, records.to_string()).unwrap();
    p
}

#[test]
fn baseline_one_sample_per_image() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("b.json");
    let o = countforge(
        &["gen-baseline", "--annotations", fixture("annotations_small.json").to_str().unwrap(), "--out", out.to_str().unwrap()],
        &[],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let corpus = read_json(&out);
    assert_eq!(corpus.as_array().unwrap().len(), 30);
    let first = &corpus[0];
    assert_eq!(first["conversations"][0]["from"], "human");
    assert_eq!(first["conversations"][0]["value"], "How many oranges are there in the image?");
    assert_eq!(first["conversations"][1]["value"], "a photo of 3 oranges");
    assert_eq!(first["meta"]["task"], "baseline");
    assert_eq!(first["meta"]["fingerprint"].as_str().unwrap().len(), 16);
    assert!(first["meta"]["tool_version"].as_str().unwrap().starts_with("countforge "));
}

#[test]
fn empty_annotations_give_empty_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let ann = write_records(dir.path(), "empty.json", serde_json::json!([]));
    let out = dir.path().join("b.json");
    let o = countforge(&["gen-baseline", "--annotations", ann.to_str().unwrap(), "--out", out.to_str().unwrap()], &[]);
    assert!(o.status.success());
    assert_eq!(std::fs::read_to_string(&out).unwrap(), "[]\n");
    assert!(stderr(&o).contains("no annotation records"), "{}", stderr(&o));
}

#[test]
fn unreadable_annotations_exit_2() {
    let o = countforge(&["gen-baseline", "--annotations", "/nonexistent/a.json", "--out", "/tmp/never.json"], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("MalformedAnnotation"), "{}", stderr(&o));
}

#[test]
fn d3t_count_24_has_ten_turns() {
    let dir = tempfile::tempdir().unwrap();
    let ann = write_records(
        dir.path(),
        "a.json",
        serde_json::json!([{"image_id": "x", "image_path": "x.jpg", "category": "oranges", "count": 24, "width": 10, "height": 10}]),
    );
    let out = dir.path().join("d.json");
    let o = countforge(&["gen-d3t", "--annotations", ann.to_str().unwrap(), "--out", out.to_str().unwrap()], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let conv = read_json(&out)[0]["conversations"].as_array().unwrap().clone();
    assert_eq!(conv.len(), 20);
    assert_eq!(conv[0]["value"], "Are there more than 1000 oranges in the image?");
    assert_eq!(conv[19]["value"], "a photo of 24 oranges");
}

#[test]
fn single_round_samples_have_one_turn() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s.json");
    let o = countforge(
        &[
            "gen-d3t",
            "--annotations",
            fixture("annotations_small.json").to_str().unwrap(),
            "--mode",
            "single-round",
            "--delta",
            "300",
            "--out",
            out.to_str().unwrap(),
        ],
        &[],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let corpus = read_json(&out);
    for s in corpus.as_array().unwrap() {
        assert_eq!(s["conversations"].as_array().unwrap().len(), 2);
        assert_eq!(s["meta"]["task"], "single_round");
    }
    assert_eq!(corpus[2]["conversations"][1]["value"], "[1,300]");
}

#[test]
fn out_of_range_counts_skipped_or_clamped() {
    let dir = tempfile::tempdir().unwrap();
    let ann = write_records(
        dir.path(),
        "a.json",
        serde_json::json!([
            {"image_id": "big", "image_path": "b.jpg", "category": "people", "count": 2500, "width": 10, "height": 10},
            {"image_id": "ok", "image_path": "o.jpg", "category": "people", "count": 30, "width": 10, "height": 10}
        ]),
    );
    let out = dir.path().join("d.json");
    let o = countforge(&["gen-d3t", "--annotations", ann.to_str().unwrap(), "--out", out.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(read_json(&out).as_array().unwrap().len(), 1);

    let o = countforge(&["gen-d3t", "--annotations", ann.to_str().unwrap(), "--clamp", "--out", out.to_str().unwrap()], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("expanding range"), "{}", stderr(&o));
    let corpus = read_json(&out);
    assert_eq!(corpus.as_array().unwrap().len(), 2);
    assert_eq!(corpus[0]["conversations"][0]["value"], "Are there more than 1250 people in the image?");
}

#[test]
fn semi_cross_needs_grouping_file() {
    let o = countforge(
        &["gen-crco", "--annotations", fixture("annotations_small.json").to_str().unwrap(), "--mode", "semi-cross", "--out", "/tmp/x.json"],
        &[],
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn crco_corpus_shape() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c.json");
    let o = countforge(
        &["gen-crco", "--annotations", fixture("annotations_small.json").to_str().unwrap(), "--seed", "7", "--out", out.to_str().unwrap()],
        &[],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let corpus = read_json(&out);
    assert_eq!(corpus.as_array().unwrap().len(), 5);
    for s in corpus.as_array().unwrap() {
        // one image per non-empty count group
        let n = s["images"].as_array().unwrap().len();
        assert!((2..=4).contains(&n));
        let q = s["conversations"][0]["value"].as_str().unwrap();
        assert!(q.starts_with("Given "));
        assert!(q.contains(" images, rank them in ascending order based on their counts of "));
        let counts: Vec<u64> = s["meta"]["counts"].as_array().unwrap().iter().map(|c| c.as_u64().unwrap()).collect();
        assert_eq!(counts.len(), n);
        let mut slots: Vec<usize> = (1..=n).collect();
        slots.sort_by_key(|&j| counts[j - 1]);
        let expect: Vec<String> = slots.iter().map(|j| format!("Image {j}")).collect();
        assert_eq!(s["conversations"][1]["value"], expect.join(" < "));
    }
}

#[test]
fn scrco_sets_rank_by_area() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c.json");
    let o = countforge(
        &["gen-crco", "--annotations", fixture("annotations_small.json").to_str().unwrap(), "--mode", "scrco", "--out", out.to_str().unwrap()],
        &[],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let s = &read_json(&out)[0];
    assert_eq!(s["meta"]["area_ranked"], true);
    let crops = s["meta"]["crops"].as_array().unwrap();
    let areas: Vec<u64> = crops.iter().map(|c| c["w"].as_u64().unwrap() * c["h"].as_u64().unwrap()).collect();
    let mut slots: Vec<usize> = (1..=areas.len()).collect();
    slots.sort_by_key(|&j| areas[j - 1]);
    let expect: Vec<String> = slots.iter().map(|j| format!("Image {j}")).collect();
    assert_eq!(s["conversations"][1]["value"], expect.join(" < "));
}

#[test]
fn infer_then_eval_on_mock() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = fixture("mock_scenes.json");
    let results = dir.path().join("r.jsonl");
    let o = countforge(&["infer", "--annotations", scenes.to_str().unwrap(), "--mock", "--out", results.to_str().unwrap()], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = dir.path().join("rep.json");
    let o = countforge(
        &[
            "eval",
            "--results",
            results.to_str().unwrap(),
            "--annotations",
            scenes.to_str().unwrap(),
            "--out",
            report.to_str().unwrap(),
        ],
        &[],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.contains("| band     | sparse"), "{table}");
    assert!(table.contains("| band     | dense"), "{table}");
    let rep = read_json(&report);
    assert_eq!(rep["report"]["config_fingerprint"].as_str().unwrap().len(), 16);
    assert!(rep["excluding_failures"].is_object());

    let o = countforge(
        &["eval", "--results", results.to_str().unwrap(), "--annotations", scenes.to_str().unwrap(), "--format", "csv"],
        &[],
    );
    assert!(String::from_utf8(o.stdout).unwrap().starts_with("scope,name,n,mae,rmse\r\n"));
}

#[test]
fn default_fusion_beats_global_only_on_dense_mock() {
    let dir = tempfile::tempdir().unwrap();
    let dense = fixture("mock_dense.json");
    let mut maes = Vec::new();
    for fusion in ["mean", "global-only"] {
        let results = dir.path().join(format!("{fusion}.jsonl"));
        let o = countforge(
            &["infer", "--annotations", dense.to_str().unwrap(), "--mock", "--fusion", fusion, "--out", results.to_str().unwrap()],
            &[],
        );
        assert!(o.status.success(), "{}", stderr(&o));
        let o = countforge(
            &["eval", "--results", results.to_str().unwrap(), "--annotations", dense.to_str().unwrap(), "--format", "csv"],
            &[],
        );
        let csv = String::from_utf8(o.stdout).unwrap();
        let overall = csv.lines().nth(1).unwrap();
        maes.push(overall.split(',').nth(3).unwrap().parse::<f64>().unwrap());
    }
    assert!(maes[0] < maes[1], "{maes:?}");
}

#[test]
fn eval_unknown_image_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let results = dir.path().join("r.jsonl");
    std::fs::write(
        &results,
        r#"{"image_id":"ghost","global_count":3,"tile_counts":null,"local_sum":null,"fused":3.0,"used_glce":false,"parse_failures":0,"tile_specs":null,"fingerprint":"x","tool_version":"y"}
"#,
    )
    .unwrap();
    let o = countforge(
        &["eval", "--results", results.to_str().unwrap(), "--annotations", fixture("mock_scenes.json").to_str().unwrap()],
        &[],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("MissingGroundTruth"), "{}", stderr(&o));
}

#[test]
fn unreachable_endpoint_records_failures_and_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("a.png");
    image_fixture(&img);
    let ann = write_records(
        dir.path(),
        "a.json",
        serde_json::json!([{"image_id": "a", "image_path": "a.png", "category": "dots", "count": 3, "width": 8, "height": 8}]),
    );
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let url = format!("http://127.0.0.1:{port}/v1");
    let results = dir.path().join("r.jsonl");
    let o = countforge(
        &["infer", "--annotations", ann.to_str().unwrap(), "--base-url", &url, "--max-retries", "0", "--out", results.to_str().unwrap()],
        &[],
    );
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let line: Value = serde_json::from_str(std::fs::read_to_string(&results).unwrap().lines().next().unwrap()).unwrap();
    assert!(line["error"].as_str().unwrap().starts_with("AllQueriesFailed"), "{line}");
    assert!(stderr(&o).contains("1 failed"), "{}", stderr(&o));
}

/// Any decodable PNG will do; a scene tag is one.
fn image_fixture(path: &Path) {
    use countforge_core::image_ops::TileSpec;
    use countforge_core::mock::{encode_tag, SceneTag};
    let png = encode_tag(&SceneTag {
        scene: "a".into(),
        region: TileSpec::full(8, 8),
    });
    std::fs::write(path, png.bytes).unwrap();
}

#[test]
fn config_precedence_file_env_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "seed = 1\n").unwrap();
    let small = fixture("annotations_small.json");
    let run = |extra: &[&str], envs: &[(&str, &str)], name: &str| {
        let out = dir.path().join(name);
        let mut args = vec!["gen-baseline", "--config", cfg.to_str().unwrap(), "--annotations", small.to_str().unwrap()];
        args.extend(extra);
        args.extend(["--out", out.to_str().unwrap()]);
        let o = countforge(&args, envs);
        assert!(o.status.success(), "{}", stderr(&o));
        read_json(&out)[0]["meta"]["fingerprint"].as_str().unwrap().to_string()
    };
    let plain = |seed: &str, name: &str| {
        let out = dir.path().join(name);
        let o = countforge(&["gen-baseline", "--seed", seed, "--annotations", small.to_str().unwrap(), "--out", out.to_str().unwrap()], &[]);
        assert!(o.status.success());
        read_json(&out)[0]["meta"]["fingerprint"].as_str().unwrap().to_string()
    };
    assert_eq!(run(&[], &[], "f.json"), plain("1", "p1.json"));
    assert_eq!(run(&[], &[("COUNTFORGE_SEED", "2")], "e.json"), plain("2", "p2.json"));
    assert_eq!(run(&["--seed", "3"], &[("COUNTFORGE_SEED", "2")], "g.json"), plain("3", "p3.json"));
}

#[test]
fn bad_config_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "seed = \"not a number\"\n").unwrap();
    let o = countforge(
        &["gen-baseline", "--config", cfg.to_str().unwrap(), "--annotations", fixture("annotations_small.json").to_str().unwrap(), "--out", "/tmp/x.json"],
        &[],
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(countforge(&["gen-d3t"], &[]).status.code(), Some(2));
    assert_eq!(countforge(&["no-such-command"], &[]).status.code(), Some(2));
    assert_eq!(countforge(&["--help"], &[]).status.code(), Some(0));
}
