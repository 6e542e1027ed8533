use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

fn gpprog(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gpprog"))
        .args(args)
        .env("GPPROG_OUT", out)
        .output()
        .expect("binary runs")
}

fn read_dir(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn repeated_runs_are_identical() {
    let b = data("dataset_b.csv");
    let args = [
        "evaluate", "--data", b.to_str().unwrap(), "--kernel", "MA3", "--mean", "EXPDEG", "--start", "0.9",
        "--eol", "0.8", "--horizons", "1,5", "--restarts", "2", "--seed", "7", "--jobs", "1",
    ];
    // Same output path in both runs so the manifests match too.
    let root = tempfile::tempdir().unwrap();
    let out = root.path().join("run");
    assert!(gpprog(&args, &out).status.success());
    let first = read_dir(&out);
    std::fs::remove_dir_all(&out).unwrap();
    assert!(gpprog(&args, &out).status.success());
    let second = read_dir(&out);
    let names: Vec<&str> = first.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["eol_trace.csv", "evaluation.csv", "evaluation.json", "lookahead_trace.csv", "manifest.json"]);
    assert_eq!(first, second);
}

#[test]
fn manifest_reproduces_the_run() {
    let a1 = data("cell_a1.csv");
    let root = tempfile::tempdir().unwrap();
    let out = root.path().join("fit");
    let args = ["fit", "--data", a1.to_str().unwrap(), "--kernel", "MA5+MA3", "--start", "0.55", "--restarts", "2", "--seed", "7"];
    assert!(gpprog(&args, &out).status.success());
    let first = read_dir(&out);

    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
    let replay: Vec<String> =
        manifest["args"].as_array().unwrap().iter().map(|v| v.as_str().unwrap().to_string()).collect();
    std::fs::remove_dir_all(&out).unwrap();
    let replayed = Command::new(env!("CARGO_BIN_EXE_gpprog")).args(&replay).output().unwrap();
    assert!(replayed.status.success());
    assert_eq!(read_dir(&out), first);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let missing = gpprog(&["fit", "--kernel", "MA3"], &out);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("--data"));

    let a1 = data("cell_a1.csv");
    let bad_kernel = gpprog(&["fit", "--data", a1.to_str().unwrap(), "--kernel", "MA3+"], &out);
    assert_eq!(bad_kernel.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad_kernel.stderr).contains("--kernel"));

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "cell_id,cycle,capacity\nX,1,1.0\nX,2,-0.5\n").unwrap();
    let failed = gpprog(&["fit", "--data", bad.to_str().unwrap()], &out);
    assert_eq!(failed.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&failed.stderr).contains("`X`"));

    let c = data("dataset_c.csv");
    let no_target = gpprog(&["fit", "--data", c.to_str().unwrap(), "--schema", "cycle=day"], &out);
    assert_eq!(no_target.status.code(), Some(1));
}

#[test]
fn forecast_on_day_grid() {
    let c = data("dataset_c.csv");
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("f");
    let run = gpprog(
        &[
            "forecast", "--data", c.to_str().unwrap(), "--schema", "cycle=day", "--target", "C3", "--train-cells", "C2",
            "--start", "0.5", "--restarts", "2",
        ],
        &out,
    );
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let curve = std::fs::read_to_string(out.join("forecast_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 201);
    let forecast: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("forecast.json")).unwrap()).unwrap();
    assert_eq!(forecast["model"], "MOGP2(MA5+MA3; C2)");
}
