use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_authchain");

fn authchain(args: &[&str], dir: &Path) -> Output {
    Command::new(BIN).args(args).current_dir(dir).env_remove("AUTHCHAIN_OUT").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("scenario.toml");
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn run_writes_outputs_and_audit_passes() {
    let dir = tempfile::tempdir().unwrap();
    for model in [1, 2] {
        let cfg = write_config(dir.path(), &format!("model = {model}\nseed = 4\n"));
        let out = dir.path().join(format!("m{model}"));
        let o = authchain(&["run", "--config", &cfg, "--out", out.to_str().unwrap()], dir.path());
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains("Completed"));
        for f in ["transcript.ndjson", "chain.ndjson", "metrics.json"] {
            assert!(out.join(f).is_file(), "{f}");
        }
        let metrics: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
        assert_eq!(metrics["tx_count"], if model == 1 { 3 } else { 4 });

        let t = out.join("transcript.ndjson");
        let c = out.join("chain.ndjson");
        let a = authchain(&["audit", "--transcript", t.to_str().unwrap(), "--chain", c.to_str().unwrap()], dir.path());
        assert_eq!(a.status.code(), Some(0), "{}", stdout(&a));
        assert!(!stdout(&a).contains("FAIL"));
    }
}

#[test]
fn audit_flags_an_altered_transcript() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "model = 2\n");
    let out = dir.path().join("o");
    assert_eq!(authchain(&["run", "--config", &cfg, "--out", out.to_str().unwrap()], dir.path()).status.code(), Some(0));

    // swap one hex digit inside the disclosed token
    let t = out.join("transcript.ndjson");
    let text = std::fs::read_to_string(&t).unwrap();
    let line = text.lines().find(|l| l.contains("\"item\":\"token\"")).unwrap();
    let key = "\"token\":\"";
    let at = line.find(key).unwrap() + key.len() + 40;
    let mut bad = line.to_string();
    let digit = if &bad[at..=at] == "0" { "1" } else { "0" };
    bad.replace_range(at..=at, digit);
    std::fs::write(&t, text.replace(line, &bad)).unwrap();

    let c = out.join("chain.ndjson");
    let a = authchain(&["audit", "--transcript", t.to_str().unwrap(), "--chain", c.to_str().unwrap()], dir.path());
    assert_eq!(a.status.code(), Some(1));
    assert!(stdout(&a).contains("FAIL"));
}

#[test]
fn out_dir_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "model = 1\n");
    let target = dir.path().join("from-env");
    let o = Command::new(BIN)
        .args(["run", "--config", &cfg])
        .current_dir(dir.path())
        .env("AUTHCHAIN_OUT", &target)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(target.join("metrics.json").is_file());
}

#[test]
fn compare_prints_both_flows() {
    let dir = tempfile::tempdir().unwrap();
    let o = authchain(&["compare", "--seed", "3"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let s = stdout(&o);
    assert!(s.contains("246968") && s.contains("752880"), "{s}");
    assert!(s.contains("reference only"));

    let j = authchain(&["compare", "--seed", "3", "--json"], dir.path());
    let v: serde_json::Value = serde_json::from_slice(&j.stdout).unwrap();
    assert_eq!(v["model1"]["tx_count"], 3);
    assert_eq!(v["model2"]["tx_count"], 4);
}

#[test]
fn bad_input_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = write_config(dir.path(), "model = 1\nbogus = true\n");
    let o = authchain(&["run", "--config", &unknown, "--out", "x"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));

    let invalid = write_config(dir.path(), "model = 3\n");
    assert_eq!(authchain(&["run", "--config", &invalid, "--out", "x"], dir.path()).status.code(), Some(2));

    let missing = authchain(&["run", "--config", "nope.toml", "--out", "x"], dir.path());
    assert_eq!(missing.status.code(), Some(2));
    assert!(!dir.path().join("x").exists());
}
