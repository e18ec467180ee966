//! End-to-end tests of the `roetrace` binary: exit codes, artifacts,
//! determinism and values against independent oracles.

use std::path::Path;
use std::process::{Command, Output};

use roetrace_oracle as oracle;

fn roetrace(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_roetrace"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("ROETRACE_THREADS")
        .output()
        .expect("binary runs")
}

/// Header line, column names and rows of a CSV artifact.
fn read_csv(path: &Path) -> (String, Vec<String>, Vec<Vec<String>>) {
    let text = std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let mut lines = text.lines();
    let first = lines.next().expect("hash line").to_string();
    let rest: String = lines.map(|l| format!("{l}\n")).collect();
    let mut r = csv::Reader::from_reader(rest.as_bytes());
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (first, header, rows)
}

fn column(header: &[String], rows: &[Vec<String>], name: &str) -> Vec<f64> {
    let i = header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"));
    rows.iter().map(|r| r[i].parse().unwrap()).collect()
}

fn manifest_value(dir: &Path, key: &str) -> String {
    let text = std::fs::read_to_string(dir.join("manifest.txt")).unwrap();
    text.lines().find_map(|l| l.strip_prefix(&format!("{key} = ")).map(String::from)).unwrap()
}

#[test]
fn verify_all_on_the_z1_profile_passes_nine_suites() {
    let dir = tempfile::tempdir().unwrap();
    let out = roetrace(&["verify", "all", "--profile", "z1"], dir.path());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{stdout}\n{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout.contains("verify: 9 passed, 0 failed, 0 skipped"), "{stdout}");
    let (_, header, rows) = read_csv(&dir.path().join("verify.csv"));
    assert_eq!(header, ["suite", "status", "detail"]);
    assert_eq!(rows.len(), 9);
    assert!(rows.iter().all(|r| r[1] == "pass"));
    for r in &rows {
        assert!(dir.path().join(format!("verify_{}.csv", r[0])).exists(), "suite {} wrote no file", r[0]);
    }
}

#[test]
fn envelope_limit_on_a_convergent_case_is_sharp() {
    let dir = tempfile::tempdir().unwrap();
    let out = roetrace(&["trace", "phi", "--set", "limit.mode=envelope"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let (_, header, rows) = read_csv(&dir.path().join("phi.csv"));
    let lo = column(&header, &rows, "envelope_lo")[0];
    let hi = column(&header, &rows, "envelope_hi")[0];
    assert!(hi - lo < 1e-9, "width {}", hi - lo);
    // e^{-Δ} on Z¹: diagonal e^{-2} I_0(2)
    let v = column(&header, &rows, "value")[0];
    assert!((v - oracle::z1_heat(1.0, 0)).abs() < 1e-12);
}

#[test]
fn unknown_flag_exits_with_usage() {
    let dir = tempfile::tempdir().unwrap();
    let out = roetrace(&["trace", "phi", "--no-such-flag"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage:"));
    let out = roetrace(&["trace", "nothing"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    for bad in ["space.colour=red", "limit.mode=sometimes", "nosection.key=1", "exhaustion.first=many"] {
        let out = roetrace(&["trace", "phi", "--set", bad], dir.path());
        assert_eq!(out.status.code(), Some(2), "{bad}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("config"), "{bad}");
    }
    let out = roetrace(&["heat", "theta", "--config", "/nonexistent/run.ini"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn window_violations_carry_the_module_name() {
    let dir = tempfile::tempdir().unwrap();
    let out = roetrace(&["heat", "theta", "--set", "space.window=40"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("heat: window escape"), "{err}");
    assert!(manifest_value(dir.path(), "status").starts_with("error 2"));
}

#[test]
fn identical_config_gives_identical_csv() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for cmd in [["trace", "phi"], ["heat", "theta"], ["spectral", "ns"], ["trace", "regularized"]] {
        roetrace(&cmd, a.path());
        roetrace(&cmd, b.path());
    }
    let mut names: Vec<_> = std::fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .filter(|n| n.to_string_lossy().ends_with(".csv"))
        .collect();
    names.sort();
    assert!(names.len() >= 7);
    for n in names {
        let x = std::fs::read(a.path().join(&n)).unwrap();
        let y = std::fs::read(b.path().join(&n)).unwrap();
        assert_eq!(x, y, "{n:?} differs");
    }
}

#[test]
fn csv_embeds_the_config_hash_and_flags_override_files() {
    let dir = tempfile::tempdir().unwrap();
    let ini = dir.path().join("run.ini");
    std::fs::write(&ini, "[space]\nkind = lattice\nd = 1\nwindow = 200\n\n[exhaustion]\nfirst = 40\nlast = 160\nstride = 20\n").unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(roetrace(&["space", "build", "--config", ini.to_str().unwrap()], &a).status.code(), Some(0));
    let out = roetrace(&["space", "build", "--config", ini.to_str().unwrap(), "--set", "exhaustion.last=120"], &b);
    assert_eq!(out.status.code(), Some(0));
    let (line_a, header, rows_a) = read_csv(&a.join("exhaustion.csv"));
    let (line_b, _, rows_b) = read_csv(&b.join("exhaustion.csv"));
    let hash = manifest_value(&a, "config_sha256");
    assert_eq!(hash.len(), 64);
    assert_eq!(line_a, format!("# roetrace space build config={hash}"));
    assert_ne!(line_a, line_b);
    assert_eq!(header, ["scale", "sites", "volume"]);
    assert_eq!(column(&header, &rows_a, "scale").last(), Some(&160.0));
    assert_eq!(column(&header, &rows_b, "scale").last(), Some(&120.0));
    // Z¹ interval [-n, n] has 2n + 1 sites
    assert!(rows_a.iter().all(|r| r[1] == format!("{}", 2 * r[0].parse::<usize>().unwrap() + 1)));
    let canon = std::fs::read_to_string(a.join("run.config")).unwrap();
    assert!(canon.contains("window = 200"));
}

#[test]
fn heat_theta_matches_the_bessel_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let out = roetrace(
        &["heat", "theta", "--set", "space.window=120", "--set", "heat.tmin=0.5", "--set", "heat.tmax=8", "--set", "heat.points=5", "--set", "heat.eps=1e-13"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let (_, header, rows) = read_csv(&dir.path().join("theta.csv"));
    assert_eq!(header, ["t", "theta", "err_bound", "degree"]);
    let ts = column(&header, &rows, "t");
    let th = column(&header, &rows, "theta");
    let eb = column(&header, &rows, "err_bound");
    for ((t, v), e) in ts.iter().zip(&th).zip(&eb) {
        assert!((v - oracle::zd_heat_diag(*t, 1)).abs() <= 1e-10, "t = {t}");
        assert!(*e <= 1e-12);
    }
}

#[test]
fn counterexample_tail_matches_the_geometric_series() {
    let dir = tempfile::tempdir().unwrap();
    let out = roetrace(&["trace", "counterexample", "--set", "trace.n=5"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let (_, _, rows) = read_csv(&dir.path().join("counterexample.csv"));
    let get = |q: &str| rows.iter().find(|r| r[0] == q).unwrap()[1].clone();
    let tail: f64 = get("norm_tail_beta2").parse().unwrap();
    assert!((tail - oracle::geometric_tail(4.0, 5)).abs() <= 1e-15);
    assert!(get("norm_tail_measured").parse::<f64>().unwrap() <= 6.6e-4);
    assert!((get("phi_T_inf").parse::<f64>().unwrap() - 1.0).abs() <= 1e-3);
    for k in 1..=5 {
        assert_eq!(get(&format!("phi_T_{k}")), "0");
    }
}

#[test]
fn density_is_gnuplot_ready_and_matches_the_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let out = roetrace(&["spectral", "dos", "--set", "spectral.lmin=0.01", "--set", "spectral.lmax=3.9"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let (_, header, rows) = read_csv(&dir.path().join("dos.csv"));
    assert_eq!(header, ["lambda", "N", "smoothing_width"]);
    for (l, n) in column(&header, &rows, "lambda").iter().zip(column(&header, &rows, "N")) {
        assert!((n - oracle::z1_density(*l)).abs() <= 1e-10, "λ = {l}");
    }
}

#[test]
fn thread_cap_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_roetrace"))
        .args(["space", "build", "--out"])
        .arg(dir.path())
        .env("ROETRACE_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(manifest_value(dir.path(), "threads"), "2");
    let out = Command::new(env!("CARGO_BIN_EXE_roetrace"))
        .args(["space", "build", "--out"])
        .arg(dir.path())
        .env("ROETRACE_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn off_lattice_spectral_suites_are_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let out = roetrace(&["verify", "all", "--profile", "strip"], dir.path());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{stdout}");
    assert!(stdout.contains("verify: 7 passed, 0 failed, 2 skipped"), "{stdout}");
}
