use std::path::Path;
use std::process::{Command, Output};

fn rnnp(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rnnp"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_pool(dir: &Path) -> std::path::PathBuf {
    let o = rnnp(
        &[
            "generate",
            "--classes",
            "6",
            "--dim",
            "4",
            "--samples-per-class",
            "25",
            "--seed",
            "1",
        ],
        dir,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    dir.join("embeddings.csv")
}

#[test]
fn generate_writes_requested_shape() {
    let dir = tempfile::tempdir().unwrap();
    let o = rnnp(
        &[
            "generate",
            "--format",
            "jsonl",
            "--classes",
            "3",
            "--dim",
            "5",
            "--samples-per-class",
            "4",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("embeddings.jsonl")).unwrap();
    let rows: Vec<serde_json::Value> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 12);
    assert!(rows
        .iter()
        .all(|r| r["features"].as_array().unwrap().len() == 5));
}

#[test]
fn eval_on_file_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let pool = small_pool(dir.path());
    let out = dir.path().join("eval");
    let o = rnnp(
        &[
            "eval",
            "--data",
            pool.to_str().unwrap(),
            "--episodes",
            "10",
            "--queries",
            "5",
            "--corruption",
            "0,0.4",
        ],
        &out,
    );
    assert!(o.status.success(), "{}", stderr(&o));

    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "method,corruption_rate,k_shot,mean,ci95,n_episodes"
    );
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("nnp,0,5,"));
    assert!(lines[4].starts_with("rnnp,0.4,5,"));

    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["config"]["n_episodes"], 10);
    assert_eq!(json["reports"].as_array().unwrap().len(), 4);
    assert_eq!(json["reports"][3]["config"]["config"]["beta"], 4);
}

#[test]
fn sweep_and_rectify_layouts() {
    let dir = tempfile::tempdir().unwrap();
    let pool = small_pool(dir.path());
    let data = pool.to_str().unwrap();

    let out = dir.path().join("sweep");
    let o = rnnp(
        &[
            "sweep",
            "--data",
            data,
            "--axis",
            "iterations",
            "--values",
            "0,1,3",
            "--episodes",
            "6",
            "--queries",
            "5",
            "--corruption",
            "0.4",
        ],
        &out,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("sweep_iterations.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "value,mean,ci95,corruption_rate");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("0,") && lines[3].starts_with("3,"));

    let out = dir.path().join("rect");
    let o = rnnp(
        &[
            "rectify",
            "--data",
            data,
            "--episodes",
            "6",
            "--queries",
            "5",
        ],
        &out,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("rectification.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "corruption_rate,episode_index,correct_before,correct_after"
    );
    // 3 default rates x 6 episodes, then a mean row per rate.
    assert_eq!(lines.len(), 1 + 18 + 3);
    assert!(lines[1].starts_with("0,0,25,"));
    assert!(lines.last().unwrap().starts_with("0.4,mean,15,"));
}

#[test]
fn invalid_input_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = rnnp(&["eval", "--alpha", "1.5", "--episodes", "2"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("methods[1]"), "{}", stderr(&o));

    let o = rnnp(
        &["eval", "--corruption", "0.3", "--episodes", "2"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("corruption_rates[0]"), "{}", stderr(&o));

    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"n_episodes": 2, "episodez": 3}"#).unwrap();
    let o = rnnp(&["eval", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("episodez"), "{}", stderr(&o));
}

#[test]
fn malformed_embeddings_report_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "label,f0,f1\n0,1.0,2.0\n1,3.0\n").unwrap();
    let o = rnnp(
        &["eval", "--data", bad.to_str().unwrap(), "--episodes", "2"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn config_file_and_flags_combine() {
    let dir = tempfile::tempdir().unwrap();
    let pool = small_pool(dir.path());
    let cfg = dir.path().join("cfg.json");
    let text = serde_json::json!({
        "data": {"file": {"path": pool}},
        "queries_per_class": 5,
        "n_episodes": 50,
        "corruption_rates": [0.4],
        "methods": [{"kind": "nnp"}, {"kind": "rnnp", "name": "labeled", "hybrid_labeling": "labeled_direct"}]
    });
    std::fs::write(&cfg, text.to_string()).unwrap();
    let out = dir.path().join("out");
    let o = rnnp(
        &["eval", "--config", cfg.to_str().unwrap(), "--episodes", "4"],
        &out,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["config"]["n_episodes"], 4);
    let names: Vec<&str> = json["reports"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["method"].as_str().unwrap())
        .collect();
    assert_eq!(names, ["nnp", "labeled"]);
}
