use std::process::Command;

fn bench(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_bench")).args(args).output().expect("run bench");
    (
        out.status.code().expect("exit code"),
        String::from_utf8(out.stdout).unwrap(),
        String::from_utf8(out.stderr).unwrap(),
    )
}

#[test]
fn writes_csv_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pp.csv");
    let (code, _, err) = bench(&["pingpong", "--sizes", "8K,64K", "--iters", "20", "--out", path.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    let csv = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "variant,size,bytes,latency_us");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("raw,8K,8192,"));
    assert!(err.contains("PASS"));
}

#[test]
fn output_is_reproducible() {
    let a = bench(&["stencil", "--sizes", "64,128", "--iters", "5"]);
    let b = bench(&["stencil", "--sizes", "64,128", "--iters", "5"]);
    assert_eq!(a.0, 0);
    assert_eq!(a.1, b.1);
}

#[test]
fn usage_errors_exit_one() {
    for args in [
        vec!["nonsense"],
        vec!["pingpong", "--ranks", "3"],
        vec!["pingpong", "--sizes", "8K,4K"],
        vec!["pingpong", "--sizes", "x"],
        vec!["spectrum", "--topology", "both"],
        vec!["pingpong", "--params", "/definitely/not/here.json"],
        vec!["mg_breakdown", "--sizes", "100"],
    ] {
        assert_eq!(bench(&args).0, 1, "{args:?}");
    }
}

#[test]
fn bad_params_file_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.json");
    std::fs::write(&path, r#"{"t_launch": 1e-6, "warp_factor": 9}"#).unwrap();
    assert_eq!(bench(&["pingpong", "--params", path.to_str().unwrap()]).0, 1);
    std::fs::write(&path, r#"{"bw_net": -1}"#).unwrap();
    assert_eq!(bench(&["pingpong", "--params", path.to_str().unwrap()]).0, 1);
}

#[test]
fn failed_check_exits_two() {
    // a slow inter-node network makes the fully distributed layout lose
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("slow.json");
    std::fs::write(&path, r#"{"net_latency_inter": 80e-6}"#).unwrap();
    let (code, out, err) = bench(&["stencil", "--sizes", "64,128", "--iters", "5", "--params", path.to_str().unwrap()]);
    assert_eq!(code, 2, "{err}");
    assert!(out.starts_with("config,n,latency_us,local_dominance_n"));
    assert!(err.contains("FAIL 9-node faster than 3-node"));
}

#[test]
fn every_benchmark_runs_with_small_inputs() {
    for args in [
        vec!["unpack", "--sizes", "8K", "--iters", "10"],
        vec!["scatter", "--sizes", "8K", "--iters", "10"],
        vec!["stencil", "--topology", "intra", "--sizes", "64", "--iters", "5"],
        vec!["spectrum", "--sizes", "100,1e6,1e8"],
        vec!["mg_breakdown", "--sizes", "33", "--cycle", "w"],
        vec!["assembly_compare", "--sizes", "16", "--ranks", "2"],
    ] {
        let (code, out, err) = bench(&args);
        assert_eq!(code, 0, "{args:?}: {err}");
        assert!(out.lines().count() > 1, "{args:?}");
    }
}
