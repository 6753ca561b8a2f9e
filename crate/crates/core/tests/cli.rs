//! End-to-end runs of the command-line driver.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use chemotaxis_ap::cli_io::{parse_config, read_csv, read_profile, to_toml, FAILURE_MARKER};
use chemotaxis_ap::diagnostics::{max_rel_deviation, steady_ks, unit_normalize};
use chemotaxis_ap::model_core::ModelParams;

fn cli(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chemotaxis-ap"))
        .args(args)
        .current_dir(cwd)
        .env_remove("CHEMOTAXIS_AP_OUT")
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn write(dir: &Path, name: &str, text: &str) {
    fs::write(dir.join(name), text).unwrap();
}

const DIFFUSIVE_RUN: &str = "scheme = \"ap_diff\"\nsnapshots = [0.05, 0.2]\nprobes = [0.0, 0.5]\noutput = \"diff\"\n\
                             [params]\nlambda0 = 10.0\n[grid]\ni_cells = 16\n";

#[test]
fn run_writes_profiles_and_repeats_exactly() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "a.toml", DIFFUSIVE_RUN);
    let first = cli(&["run", "a.toml", "--out", "one"], dir.path());
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    assert_eq!(cli(&["run", "a.toml", "--out", "two"], dir.path()).status.code(), Some(0));

    let one = dir.path().join("one/diff");
    for name in ["rho_t0.05.csv", "rho_t0.2.csv", "mass.csv", "ydist_x0.csv", "ydist_x0.5.csv", "config.toml"] {
        let a = fs::read(one.join(name)).unwrap();
        assert_eq!(a, fs::read(dir.path().join("two/diff").join(name)).unwrap(), "{name}");
    }
    let header = fs::read_to_string(one.join("ydist_x0.5.csv")).unwrap();
    assert!(header.starts_with("y,p_plus,p_minus\n"));
    let mass = read_csv(&one.join("mass.csv")).unwrap();
    assert_eq!(mass[0], vec![0.0, 0.05, 0.2]);
    // the stored config reproduces the run
    let stored = parse_config(&fs::read_to_string(one.join("config.toml")).unwrap()).unwrap();
    assert_eq!(stored, parse_config(DIFFUSIVE_RUN).unwrap());
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "a.toml", DIFFUSIVE_RUN);
    let out = Command::new(env!("CARGO_BIN_EXE_chemotaxis-ap"))
        .args(["run", "a.toml"])
        .current_dir(dir.path())
        .env("CHEMOTAXIS_AP_OUT", "from_env")
        .env("RUST_LOG", "error")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("from_env/diff/rho_t0.2.csv").exists());
}

#[test]
fn steady_run_reaches_the_keller_segel_profile() {
    let dir = tempfile::tempdir().unwrap();
    let text = "scheme = \"ap_diff\"\noutput = \"ks\"\n[params]\nlambda0 = 1e8\n[grid]\ni_cells = 100\n[steady]\nenabled = true\n";
    write(dir.path(), "ks.toml", text);
    assert_eq!(cli(&["run", "ks.toml"], dir.path()).status.code(), Some(0));
    let (x, rho) = read_profile(&dir.path().join("ks/rho_steady.csv")).unwrap();
    let params = ModelParams::diffusive(1.0, 0.5, 1e8).unwrap();
    let exact: Vec<f64> = x.iter().map(|&x| steady_ks(x, &params, 1.0, 1.0)).collect();
    assert!(max_rel_deviation(&unit_normalize(&rho, 0.01), &exact) < 1e-2);
    let steady = read_csv(&dir.path().join("ks/steady.csv")).unwrap();
    assert_eq!(steady[1], vec![1.0]);
}

#[test]
fn particle_runs_depend_only_on_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let text = "scheme = \"monte_carlo\"\nsnapshots = [0.02]\noutput = \"mc\"\nseed = 3\n\
                [grid]\ni_cells = 20\ndt = 1e-3\n[monte_carlo]\nparticles = 20000\n";
    write(dir.path(), "mc.toml", text);
    let run = |out: &str, extra: &[&str]| {
        let mut args = vec!["run", "mc.toml", "--out", out];
        args.extend_from_slice(extra);
        assert_eq!(cli(&args, dir.path()).status.code(), Some(0));
        fs::read(dir.path().join(out).join("mc/rho_t0.02.csv")).unwrap()
    };
    let base = run("a", &[]);
    assert_eq!(base, run("b", &["--threads", "1"]));
    assert_eq!(base, run("c", &["--seed", "3"]));
    assert_ne!(base, run("d", &["--seed", "4"]));
}

#[test]
fn compare_reports_zero_for_identical_runs() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "a.toml", DIFFUSIVE_RUN);
    assert_eq!(cli(&["run", "a.toml", "--out", "x"], dir.path()).status.code(), Some(0));
    let out = cli(&["compare", "x/diff", "x/diff", "--out", "cmp"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let text = fs::read_to_string(dir.path().join("cmp/compare.csv")).unwrap();
    assert_eq!(text, String::from_utf8(out.stdout).unwrap());
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "profile,linf_rel_err");
    assert_eq!(lines.len(), 3);
    assert!(lines[1..].iter().all(|l| l.ends_with(",0.0000000000000000e0")));
}

#[test]
fn exit_codes_separate_input_errors_from_failures() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "bad.toml", "scheme = \"ap_diff\"\nspeed = 2\n");
    let out = cli(&["run", "bad.toml"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("speed"));

    write(dir.path(), "cfl.toml", "scheme = \"ap_hyp\"\n[grid]\ni_cells = 10\ndt = 0.5\n");
    let out = cli(&["run", "cfl.toml"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("admissible dt"));

    assert_eq!(cli(&["run", "missing.toml"], dir.path()).status.code(), Some(2));
    assert_eq!(cli(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(cli(&["--help"], dir.path()).status.code(), Some(0));

    fs::create_dir_all(dir.path().join("empty_a")).unwrap();
    fs::create_dir_all(dir.path().join("empty_b")).unwrap();
    let out = cli(&["compare", "empty_a", "empty_b"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn table_command_writes_the_table() {
    let dir = tempfile::tempdir().unwrap();
    let text = "scheme = \"ks_limit\"\noutput = \"t\"\n[table]\nparam = \"lambda0\"\nvalues = [10.0]\npairs = [[5, 20], [10, 20]]\n";
    write(dir.path(), "t.toml", text);
    let out = cli(&["table", "t.toml"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let csv = fs::read_to_string(dir.path().join("t/table_ks_limit_lambda0.csv")).unwrap();
    assert_eq!(csv, String::from_utf8(out.stdout).unwrap());
    assert_eq!(csv.lines().count(), 3);
    assert!(!dir.path().join("t").join(FAILURE_MARKER).exists());
}

#[test]
fn serialized_configs_are_accepted_by_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = parse_config(DIFFUSIVE_RUN).unwrap();
    cfg.snapshots = vec![0.1];
    cfg.output = "again".into();
    write(dir.path(), "c.toml", &to_toml(&cfg).unwrap());
    assert_eq!(cli(&["run", "c.toml"], dir.path()).status.code(), Some(0));
    assert!(dir.path().join("again/rho_t0.1.csv").exists());
}
