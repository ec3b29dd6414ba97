use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bench(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../benchmarks").join(name)
}

fn pfcl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pfcl"))
        .args(args)
        .env("PFCL_WORKERS", "2")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

// Small gauss10-5 variant: enough to exercise the whole pipeline quickly.
const SMALL: [&str; 6] = [
    "--set",
    "train.epochs_per_task=4",
    "--set",
    "stream.per_class=120",
    "--set",
    "train.hidden=[16]",
];

fn run_small(out: &Path, methods: &str, seeds: &str) -> Output {
    let spec = bench("gauss10-5.toml");
    let m = format!("experiment.methods={methods}");
    let s = format!("experiment.seeds={seeds}");
    let mut args = vec!["run", spec.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend(SMALL);
    args.extend(["--set", &m, "--set", &s]);
    pfcl(&args)
}

fn parse_csv(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn validate_accepts_benchmarks() {
    for name in ["gauss10-5.toml", "rot-digits-20.toml", "digits-5.toml"] {
        let out = pfcl(&["validate", bench(name).to_str().unwrap()]);
        assert_eq!(code(&out), 0, "{name}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok:"));
    }
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("bad.toml");
    fs::write(&spec, "[stream]\nkind = \"gaussian\"\n\n[train]\nlr = -1.0\n").unwrap();
    let out = pfcl(&["validate", spec.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("config"));

    let out = pfcl(&["validate", bench("gauss10-5.toml").to_str().unwrap(), "--set", "train.bogus=1"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_spec_is_a_config_error() {
    let out = pfcl(&["validate", "/nonexistent/spec.toml"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("not found"));
}

#[test]
fn run_writes_all_outputs_and_summaries_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_small(dir.path(), "[\"ft\", \"kd_only\"]", "[0, 1, 2]");
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    for sub in ["matrices", "matrices_task_il", "summaries", "manifests", "progress"] {
        let n = fs::read_dir(dir.path().join(sub)).unwrap().count();
        assert_eq!(n, 6, "{sub}");
    }

    let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    let rows = parse_csv(&summary);
    assert_eq!(rows.len(), 3);
    for row in &rows[1..] {
        let method = &row[0];
        assert_eq!(row[1], "3");
        let accs: Vec<f64> = (0..3)
            .map(|s| {
                let p = dir.path().join("summaries").join(format!("{method}_s{s}.json"));
                let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap();
                v["acc"].as_f64().unwrap()
            })
            .collect();
        let mean = accs.iter().sum::<f64>() / 3.0;
        let std = (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
        let (got_mean, got_std): (f64, f64) = (row[2].parse().unwrap(), row[3].parse().unwrap());
        assert!((got_mean - mean).abs() < 1e-12, "{method}: {got_mean} vs {mean}");
        assert!((got_std - std).abs() < 1e-12, "{method}: {got_std} vs {std}");
    }

    // summarize rebuilds the same table from the per-run files.
    fs::remove_file(dir.path().join("summary.csv")).unwrap();
    let out = pfcl(&["summarize", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    assert_eq!(String::from_utf8_lossy(&out.stdout), summary);
    assert_eq!(fs::read_to_string(dir.path().join("summary.csv")).unwrap(), summary);
}

#[test]
fn fine_tuning_curve_decreases_after_first_task() {
    let dir = tempfile::tempdir().unwrap();
    let spec = bench("gauss10-5.toml");
    let out = pfcl(&[
        "run",
        spec.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--set",
        "experiment.methods=[\"ft\"]",
        "--set",
        "experiment.seeds=[0]",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let rows = parse_csv(&fs::read_to_string(dir.path().join("curves.csv")).unwrap());
    assert_eq!(rows[0], ["step", "ft_mean", "ft_std"]);
    let curve: Vec<f64> = rows[1..].iter().map(|r| r[1].parse().unwrap()).collect();
    assert_eq!(curve.len(), 5);
    for w in curve.windows(2) {
        assert!(w[1] < w[0], "{curve:?}");
    }
}

#[test]
fn curves_verb_matches_hand_computation() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("ft_s0.csv");
    let b = dir.path().join("ft_s1.csv");
    fs::write(&a, "step,task_1,task_2\n1,0.8,0.1\n2,0.4,0.6\n").unwrap();
    fs::write(&b, "step,task_1,task_2\n1,0.6,0.3\n2,0.2,1\n").unwrap();
    let out = pfcl(&["curves", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let rows = parse_csv(&String::from_utf8_lossy(&out.stdout));
    assert_eq!(rows[0], ["step", "ft_mean", "ft_std"]);
    let cell = |r: usize, c: usize| rows[r][c].parse::<f64>().unwrap();
    // step 1: 0.8 and 0.6; step 2: (0.4+0.6)/2 = 0.5 and (0.2+1)/2 = 0.6
    assert!((cell(1, 1) - 0.7).abs() < 1e-12);
    assert!((cell(1, 2) - 0.1).abs() < 1e-12);
    assert!((cell(2, 1) - 0.55).abs() < 1e-12);
    assert!((cell(2, 2) - 0.05).abs() < 1e-12);

    let out_file = dir.path().join("curves.csv");
    let out = pfcl(&["curves", a.to_str().unwrap(), "-o", out_file.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    assert!(fs::read_to_string(out_file).unwrap().starts_with("step,ft_mean,ft_std\n1,0.8"));
}

#[test]
fn curves_reject_mixed_lengths_and_bad_files() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    fs::write(&a, "step,task_1,task_2\n1,0.8,0.1\n2,0.4,0.6\n").unwrap();
    fs::write(&b, "step,task_1\n1,0.5\n").unwrap();
    let out = pfcl(&["curves", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert_eq!(code(&out), 4);

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "step,task_1\n1,oops\n").unwrap();
    let out = pfcl(&["curves", bad.to_str().unwrap()]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("format"));
}
