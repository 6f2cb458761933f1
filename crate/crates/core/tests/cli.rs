use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn kyle(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kyle-eq"))
        .args(args)
        .arg("--output")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

/// Data rows of a CSV artifact, skipping the config line and the header.
fn rows(path: &Path) -> Vec<Vec<String>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .unwrap();
    reader
        .records()
        .map(|r| r.unwrap().iter().map(str::to_string).collect())
        .collect()
}

fn num(s: &str) -> f64 {
    s.parse().unwrap()
}

const FIGURE: &[&str] = &[
    "--n", "5", "--sigma-a", "3", "--sigma-v", "1", "--sigma-w", "0.4472135955", "--rho",
    "0.333333333333",
];

#[test]
fn solve_writes_terminal_row() {
    let dir = TempDir::new().unwrap();
    let out = kyle(&[&["solve"], FIGURE].concat(), dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let text = fs::read_to_string(dir.path().join("coefficients.csv")).unwrap();
    assert!(text.starts_with("# config: {\"command\":\"solve\""));
    assert!(text.lines().nth(1).unwrap() == "n,xi,beta,alpha,lambda,r,sigma1,sigma2,I,J,K");

    let table = rows(&dir.path().join("coefficients.csv"));
    assert_eq!(table.len(), 5);
    let last = &table[4];
    assert_eq!(last[0], "5");
    assert_eq!(last[1], "");
    assert_eq!((num(&last[2]), num(&last[3]), num(&last[5])), (1.0, 1.0, 0.0));
    for row in &table[..4] {
        let beta = num(&row[2]);
        assert!(beta > 0.0 && beta < 1.0);
    }
    // 17 significant digits round-trip through the table.
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("solution.json")).unwrap()).unwrap();
    let lambda_json = json["solution"]["stages"][0]["lambda"].as_f64().unwrap();
    assert_eq!(num(&table[0][4]), lambda_json);
    assert_eq!(json["config"]["n"], 5);
}

#[test]
fn single_date_projection() {
    let dir = TempDir::new().unwrap();
    let out = kyle(
        &["solve", "--n", "1", "--sigma-a", "3", "--sigma-v", "1", "--sigma-w", "1", "--rho", "0.5"],
        dir.path(),
    );
    assert_eq!(code(&out), 0);
    let table = rows(&dir.path().join("coefficients.csv"));
    assert_eq!(table.len(), 1);
    let expected = 0.5 * 3.0 / (9.0 + 1.0);
    assert!((num(&table[0][4]) - expected).abs() <= 1e-15);
}

#[test]
fn invalid_inputs_exit_2() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&kyle(&["solve", "--n", "0"], dir.path())), 2);
    assert_eq!(code(&kyle(&["solve", "--n", "3", "--rho", "0"], dir.path())), 2);
    assert_eq!(code(&kyle(&["simulate", "--n", "5", "--paths", "0"], dir.path())), 2);
    assert_eq!(
        code(&kyle(&["solve", "--n", "3", "--sigma-w", "1", "--sigma-w-rule", "inv-sqrt-n"], dir.path())),
        2
    );
    assert_eq!(code(&kyle(&["solve"], dir.path())), 2);
    assert_eq!(code(&kyle(&["sweep"], dir.path())), 2);
}

#[test]
fn unreachable_tolerance_exits_3() {
    let dir = TempDir::new().unwrap();
    let out = kyle(&["solve", "--n", "5", "--tol-shoot", "1e-300"], dir.path());
    assert_eq!(code(&out), 3);
}

#[test]
fn simulate_is_byte_identical_across_runs() {
    let first = TempDir::new().unwrap();
    let second = TempDir::new().unwrap();
    let args = [&["simulate"], FIGURE, &["--paths", "100000", "--seed", "42"]].concat();
    let a = kyle(&args, first.path());
    let b = kyle(&args, second.path());
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(code(&b), 0);
    assert_eq!(a.stdout, b.stdout);
    for file in ["estimates.csv", "report.json"] {
        let x = fs::read(first.path().join(file)).unwrap();
        let y = fs::read(second.path().join(file)).unwrap();
        assert!(x == y, "{file} differs between runs");
    }

    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(first.path().join("report.json")).unwrap()).unwrap();
    let checks = report["report"]["checks"].as_array().unwrap();
    let sigma1: Vec<_> = checks.iter().filter(|c| c["name"] == "sigma1").collect();
    assert_eq!(sigma1.len(), 5);
    for c in sigma1 {
        assert!(c["z"].as_f64().unwrap().abs() < 3.0, "{c}");
    }
    assert_eq!(report["config"]["seed"], 42);
}

#[test]
fn sweep_emits_sequences() {
    let dir = TempDir::new().unwrap();
    let out = kyle(
        &[
            "sweep", "--n-list", "5,10,30", "--sigma-a", "3", "--sigma-v", "1", "--rho",
            "0.3333333333", "--sigma-w-rule", "inv-sqrt-n",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0);
    for (file, positive_terminal) in [("lambda.csv", true), ("r.csv", false)] {
        let table = rows(&dir.path().join(file));
        assert_eq!(table.len(), 5 + 10 + 30);
        for row in &table {
            let (big_n, n, t, v) = (num(&row[0]), num(&row[1]), num(&row[2]), num(&row[3]));
            assert_eq!(t, n / big_n);
            if n == big_n && !positive_terminal {
                assert_eq!(v, 0.0);
            } else {
                assert!(v > 0.0);
            }
        }
    }
    let gaps: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("gaps.json")).unwrap()).unwrap();
    assert_eq!(gaps["lambda_gap_decreasing"], true);
    assert_eq!(gaps["r_gap_decreasing"], true);
}

#[test]
fn verify_passes_and_reports() {
    let dir = TempDir::new().unwrap();
    let out = kyle(&["verify", "--n", "5", "--seed", "7", "--perturbations", "100"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["report"]["passed"], true);
    assert!(report["report"]["worst_identity_residual"].as_f64().unwrap() < 1e-9);
    assert_eq!(report["report"]["best_response"]["weakly_costlier"], 100);
}

#[test]
fn corrupted_solution_exits_4_with_check_name() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&kyle(&["solve", "--n", "5"], dir.path())), 0);
    let path = dir.path().join("solution.json");

    // Intact file verifies.
    let out = kyle(&["verify", "--solution", path.to_str().unwrap()], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));

    let mut json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    let i = json["solution"]["values"][2]["i"].as_f64().unwrap();
    json["solution"]["values"][2]["i"] = (i * (1.0 + 1e-6)).into();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, serde_json::to_string(&json).unwrap()).unwrap();
    let out = kyle(&["verify", "--solution", bad.to_str().unwrap()], dir.path());
    assert_eq!(code(&out), 4);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("i_beta_form") || stderr.contains("i_minus_j"), "{stderr}");

    fs::write(&bad, "{\"solution\": [1, 2").unwrap();
    let out = kyle(&["verify", "--solution", bad.to_str().unwrap()], dir.path());
    assert_eq!(code(&out), 4);
    assert!(String::from_utf8_lossy(&out.stderr).contains("structure"));
}

#[test]
fn config_file_with_flag_override() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"n": 3, "sigma_a": 2.0, "rho": 0.5, "sigma_w": 0.8, "format": "json"}"#).unwrap();
    let out = kyle(&["solve", "--config", cfg.to_str().unwrap(), "--rho", "0.9"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let table: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("coefficients.json")).unwrap()).unwrap();
    assert_eq!(table["config"]["rho"], 0.9);
    assert_eq!(table["config"]["sigma_a"], 2.0);
    assert_eq!(table["config"]["sigma_w"], 0.8);
    assert_eq!(table["rows"].as_array().unwrap().len(), 3);
    assert_eq!(table["columns"][4], "lambda");

    fs::write(&cfg, r#"{"n": 3, "unknown_key": 1}"#).unwrap();
    let out = kyle(&["solve", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(code(&out), 2);
}
