use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_softmax-bellman");

fn invoke(dir: &Path, args: &[&str], config: &str) -> Output {
    let cfg = dir.join("config.toml");
    std::fs::write(&cfg, config).unwrap();
    Command::new(BIN)
        .args(args)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .unwrap()
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join("out").join(name)).unwrap()
}

const ONE_STATE: &str = "[mdp.inline]\nn_states = 1\nn_actions = 1\ngamma = 0.5\nrewards = [1.0]\n\
                         transitions = [[0, 0, 0, 1.0]]\n[operators]\nmax = true\n";

#[test]
fn solve_writes_values_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = invoke(tmp.path(), &["solve", "--seed", "9"], ONE_STATE);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let values = read(tmp.path(), "q_values.csv");
    let q: f64 = values
        .lines()
        .nth(1)
        .unwrap()
        .rsplit(',')
        .next()
        .unwrap()
        .parse()
        .unwrap();
    assert!((q - 2.0).abs() < 1e-9);
    let manifest = read(tmp.path(), "manifest.txt");
    assert!(manifest.starts_with("experiment: solve\nconfig_sha256: "));
    assert!(manifest.contains("master_seed: 9\n"));
    assert!(manifest.contains("check converged/max: passed=1 failed=0"));
}

#[test]
fn module_headers_are_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let cases = [
        (
            "solve",
            "",
            "trace_mdp0_max.csv",
            "k,step_sup,dist_qstar,max_gap,zeta_running,delta_hat_running,q_min,q_max",
        ),
        (
            "overestimate",
            "trials = 50\n",
            "estimators.csv",
            "estimator,param,m,n_trials,mean_error,sd_error,violations",
        ),
        (
            "qlearn",
            "runs = 2\n[learning]\nepisodes = 20\n",
            "curve_max.csv",
            "episode,mean_return,q_start,bias_mean,bias_max",
        ),
    ];
    for (cmd, cfg, file, header) in cases {
        let out = invoke(tmp.path(), &[cmd], cfg);
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
        assert_eq!(read(tmp.path(), file).lines().next().unwrap(), header, "{cmd}");
    }
}

#[test]
fn unknown_field_is_reported_with_line() {
    let tmp = tempfile::tempdir().unwrap();
    let out = invoke(
        tmp.path(),
        &["overestimate"],
        "trials = 10\n[operators]\nsoftmx = [1.0]\n",
    );
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("softmx") && err.contains("line 3"), "{err}");
}

#[test]
fn conflicting_mdp_sources_fail() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg =
        format!("{ONE_STATE}[mdp.random]\nn_states = 3\nn_actions = 2\n").replace("[operators]\nmax = true\n", "");
    let out = invoke(tmp.path(), &["solve"], &cfg);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("exactly one"));
}

#[test]
fn violations_are_data_unless_asserted() {
    let tmp = tempfile::tempdir().unwrap();
    let capped = format!("{ONE_STATE}[iteration]\nmax_iters = 3\n");
    let out = invoke(tmp.path(), &["solve"], &capped);
    assert!(out.status.success());
    assert!(read(tmp.path(), "manifest.txt").contains("check converged/max: passed=0 failed=1"));

    let asserted = format!("assert = [\"converged/*\"]\n{capped}");
    let out = invoke(tmp.path(), &["solve"], &asserted);
    assert_eq!(out.status.code(), Some(1));
    assert!(read(tmp.path(), "manifest.txt").contains("assert converged/*: FAILED"));

    let typo = format!("assert = [\"convergd\"]\n{ONE_STATE}");
    assert_eq!(invoke(tmp.path(), &["solve"], &typo).status.code(), Some(2));
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    invoke(tmp.path(), &["overestimate"], "seed = 1\ntrials = 50\n");
    let a = read(tmp.path(), "estimators.csv");
    invoke(tmp.path(), &["overestimate", "--seed", "2"], "seed = 1\ntrials = 50\n");
    let b = read(tmp.path(), "estimators.csv");
    assert_ne!(a, b);
    assert!(read(tmp.path(), "manifest.txt").contains("master_seed: 2\n"));
}

#[test]
fn mdp_file_is_resolved_next_to_config() {
    let tmp = tempfile::tempdir().unwrap();
    let doc = r#"{"n_states":1,"n_actions":1,"gamma":0.5,"rewards":[1.0],"transitions":[[0,0,0,1.0]]}"#;
    std::fs::write(tmp.path().join("m.json"), doc).unwrap();
    let out = invoke(
        tmp.path(),
        &["solve"],
        "[mdp]\nfile = \"m.json\"\n[operators]\nmax = true\n",
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(read(tmp.path(), "q_values.csv").contains("0,max,,0,0,1.99"));
}
