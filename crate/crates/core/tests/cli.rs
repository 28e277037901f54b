use causal_rdp::cli::run_from;
use std::fs;

fn run_to(dir: &std::path::Path, name: &str, args: &[&str]) -> (i32, String) {
    let out = dir.join(name);
    let mut argv = vec!["causal-rdp"];
    argv.extend_from_slice(args);
    let out_s = out.to_str().unwrap().to_string();
    argv.extend(["--out", out_s.as_str()]);
    let code = run_from(argv);
    (code, fs::read_to_string(&out).unwrap_or_default())
}

#[test]
fn same_config_gives_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("curve.cfg");
    fs::write(&cfg, "# curve\nrho = 0.8\nrates = 1.0,0.5\nplf = jd\np_grid = 0,0.05,inf\n").unwrap();
    let c = cfg.to_str().unwrap();
    let (a_code, a) = run_to(dir.path(), "a.csv", &["rdp", "curve", "--config", c]);
    let (b_code, b) = run_to(dir.path(), "b.csv", &["rdp", "curve", "--config", c]);
    assert_eq!((a_code, b_code), (0, 0));
    assert!(!a.is_empty());
    assert_eq!(a, b);
    assert!(a.starts_with("# causal-rdp version="));
}

#[test]
fn flags_and_config_resolve_to_the_same_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("mc.cfg");
    fs::write(&cfg, "n = 2000\nseed = 5\nlaw = identity\n").unwrap();
    let (a_code, a) = run_to(dir.path(), "a.json", &["mc", "check", "--config", cfg.to_str().unwrap()]);
    let (b_code, b) = run_to(dir.path(), "b.json", &["mc", "check", "--n", "2000", "--seed", "5", "--law", "identity"]);
    assert_eq!((a_code, b_code), (0, 0));
    assert_eq!(a, b);
}

#[test]
fn seeded_commands_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["verify", "factor2", "--systems", "20", "--seed", "3"][..],
        &["oneshot", "simulate", "--channel", "bsc", "--trials", "10000", "--seed", "4"][..],
    ] {
        let (a_code, a) = run_to(dir.path(), "a", args);
        let (b_code, b) = run_to(dir.path(), "b", args);
        assert_eq!((a_code, b_code), (0, 0), "{args:?}");
        assert_eq!(a, b, "{args:?}");
    }
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let dup = dir.path().join("dup.cfg");
    fs::write(&dup, "rho = 0.5\nrho = 0.6\n").unwrap();
    let unknown = dir.path().join("unknown.cfg");
    fs::write(&unknown, "colour = red\n").unwrap();
    for cfg in [&dup, &unknown] {
        assert_eq!(run_from(["causal-rdp", "rdp", "curve", "--config", cfg.to_str().unwrap()]), 2);
    }
    assert_eq!(run_from(["causal-rdp", "rdp", "curve", "--rho", "abc"]), 2);
    assert_eq!(run_from(["causal-rdp", "mc", "check", "--n", "10"]), 2);
}
