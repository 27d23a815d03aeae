use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use multipod::netsim::read_breakdown_csv;
use multipod_cli::config::{parse, to_toml};

const SCENARIOS: [&str; 3] = ["resnet50-like", "resnet50-like-4k", "bert-like"];

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.toml"))
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_multipod")).args(args).output().unwrap()
}

fn run_with(config: &Path, args: &[&str]) -> Output {
    let mut all = vec!["--config", config.to_str().unwrap()];
    all.extend_from_slice(args);
    run(&all)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn bundled_scenarios_round_trip() {
    for name in SCENARIOS {
        let text = std::fs::read_to_string(scenario(name)).unwrap();
        let first = parse(&text).unwrap();
        let again = parse(&to_toml(&first)).unwrap();
        assert_eq!(first, again, "{name}");
    }
}

#[test]
fn empty_config_names_the_missing_key() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "empty.toml", "");
    let o = run_with(&p, &["simulate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing required key: mesh"), "{}", stderr(&o));
}

#[test]
fn nested_missing_key_is_a_dotted_path() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "m.toml", "[mesh]\npods = 1\npod_x = 4\n");
    let o = run_with(&p, &["plan"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing required key: mesh.pod_y"), "{}", stderr(&o));
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "u.toml", "[mesh]\npods = 1\npod_x = 4\npod_y = 4\ncolour = 3\n");
    let o = run_with(&p, &["plan"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("colour"), "{}", stderr(&o));
}

#[test]
fn bad_stride_names_its_key() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(
        dir.path(),
        "s.toml",
        "[mesh]\npods = 1\npod_x = 6\npod_y = 4\n[collective]\npayload_bytes = 400\nstride = 4\n",
    );
    let o = run_with(&p, &["plan"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("collective.stride"), "{}", stderr(&o));
}

#[test]
fn missing_config_flag_is_a_config_error() {
    let o = run(&["simulate"]);
    assert_eq!(o.status.code(), Some(2));
}

fn simulate_rows(name: &str) -> Vec<multipod::netsim::StepBreakdown> {
    let o = run_with(&scenario(name), &["simulate"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    read_breakdown_csv(o.stdout.as_slice()).unwrap()
}

#[test]
fn simulated_fractions_fall_in_calibration_bands() {
    let resnet = simulate_rows("resnet50-like");
    let r = resnet.iter().find(|r| r.chips == 4096).unwrap();
    assert!((0.17..=0.27).contains(&r.allreduce_fraction), "{}", r.allreduce_fraction);
    let bert = simulate_rows("bert-like");
    let b = bert.iter().find(|r| r.chips == 4096).unwrap();
    assert!((0.223..=0.323).contains(&b.allreduce_fraction), "{}", b.allreduce_fraction);
}

#[test]
fn single_chip_has_no_allreduce() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(scenario("resnet50-like-4k"))
        .unwrap()
        .replace("chips = [16, 32, 64, 128, 256]", "chips = [1, 2]");
    let p = write(dir.path(), "one.toml", &text);
    let o = run_with(&p, &["simulate"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows = read_breakdown_csv(o.stdout.as_slice()).unwrap();
    assert_eq!(rows[0].allreduce_s, 0.0);
    assert_eq!(rows[0].allreduce_fraction, 0.0);
}

fn simulate_to(dir: &Path, name: &str) -> PathBuf {
    let out = dir.join(format!("{name}.csv"));
    let o = run_with(&scenario(name), &["--out", out.to_str().unwrap(), "simulate"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    out
}

fn csv_rows(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty())
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn report_merges_sweeps_sorted_by_chips() {
    let dir = tempfile::tempdir().unwrap();
    let big = simulate_to(dir.path(), "resnet50-like");
    let small = simulate_to(dir.path(), "resnet50-like-4k");
    let o = run(&["report", big.to_str().unwrap(), small.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("values are simulated, not measured"));
    assert!(text.contains("sha256="));
    let rows = csv_rows(&text);
    let header = &rows[0];
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let chips: Vec<usize> = rows[1..].iter().map(|r| r[col("chips")].parse().unwrap()).collect();
    assert_eq!(chips, [16, 32, 64, 128, 256, 512, 1024, 2048, 4096]);
    for r in &rows[1..] {
        let t: f64 = r[col("throughput_speedup")].parse().unwrap();
        let e: f64 = r[col("e2e_speedup")].parse().unwrap();
        let epochs: u32 = r[col("epochs")].parse().unwrap();
        let want = if epochs == 88 { t * 0.5 } else { t };
        assert_eq!(e, want, "{r:?}");
    }
}

#[test]
fn conflicting_rows_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let a = simulate_to(dir.path(), "resnet50-like");
    let text = std::fs::read_to_string(scenario("resnet50-like")).unwrap().replace("flops_rate = 4.69553836166e13", "flops_rate = 4e13");
    let cfg = write(dir.path(), "other.toml", &text);
    let b = dir.path().join("other.csv");
    assert_eq!(run_with(&cfg, &["--out", b.to_str().unwrap(), "simulate"]).status.code(), Some(0));
    let o = run(&["report", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("conflicting rows"), "{}", stderr(&o));
}

#[test]
fn every_subcommand_passes_on_the_bundled_scenario() {
    let cfg = scenario("bert-like");
    for cmd in ["verify", "plan", "metrics", "shuffle-sim"] {
        for format in ["csv", "table"] {
            let o = run_with(&cfg, &["--format", format, cmd]);
            assert_eq!(o.status.code(), Some(0), "{cmd}: {}", stderr(&o));
            assert!(!o.stdout.is_empty());
        }
    }
    let o = run_with(&scenario("resnet50-like"), &["--seed", "7", "verify"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("seed=7"));
}

#[test]
fn failed_check_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(scenario("bert-like")).unwrap().replace("buffer_size = 2", "buffer_size = 1000");
    let p = write(dir.path(), "flat.toml", &text);
    let o = run_with(&p, &["shuffle-sim"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn same_seed_same_output() {
    let cfg = scenario("bert-like");
    let a = run_with(&cfg, &["--seed", "3", "shuffle-sim"]);
    let b = run_with(&cfg, &["--seed", "3", "shuffle-sim"]);
    assert_eq!(a.stdout, b.stdout);
}
