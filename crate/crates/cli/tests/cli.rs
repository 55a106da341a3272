use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ccd_core::config::RunConfig;

const SMALL: &str = r#"
seed = 5

[data]
num_blocks = 3

[synthetic]
num_blocks = 3
num_users = 40
num_items = 60
interactions_per_block = 300

[model]
teacher_dim = 8
student_dim = 4
ensemble_size = 2

[cycle]
sub_cycles_per_block = 2
kd_epochs = 2
student_epochs = 2
teacher_epochs = 2
pretrain_epochs = 3
"#;

fn ccd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ccd"))
        .args(args)
        .env("CCD_LOG", "error")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file below `dir`, relative to it.
fn tree(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn run_writes_reports_for_every_block() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("out");
    let res = ccd(&["run", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let tsv = fs::read_to_string(out.join("reports.tsv")).unwrap();
    for block in 0..3 {
        assert!(tsv.lines().any(|l| l.starts_with(&format!("ccd\t{block}\t"))), "block {block} missing");
    }
    for name in ["manifest.toml", "reports.txt", "losses.tsv", "timings.tsv"] {
        assert!(out.join(name).exists(), "{name} missing");
    }
}

#[test]
fn identical_runs_produce_identical_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(ccd(&["run", "--config", s(&cfg), "--out", s(&a)]).status.code(), Some(0));
    assert_eq!(ccd(&["run", "--config", s(&cfg), "--out", s(&b)]).status.code(), Some(0));
    assert_eq!(fs::read(a.join("reports.tsv")).unwrap(), fs::read(b.join("reports.tsv")).unwrap());
    assert_eq!(fs::read(a.join("losses.tsv")).unwrap(), fs::read(b.join("losses.tsv")).unwrap());
}

#[test]
fn manifest_parses_back_to_the_run_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("out");
    assert_eq!(ccd(&["run", "--config", s(&cfg_path), "--out", s(&out), "--seed", "9"]).status.code(), Some(0));
    let manifest = fs::read_to_string(out.join("manifest.toml")).unwrap();
    assert!(manifest.starts_with(&format!("# ccd {}", env!("CARGO_PKG_VERSION"))));
    let back = RunConfig::from_toml(&manifest).unwrap();
    let mut expected = RunConfig::from_toml(SMALL).unwrap();
    expected.seed = 9;
    expected.output_dir = out.clone();
    assert_eq!(back, expected);
    // the manifest is itself a usable config
    let again = tmp.path().join("again");
    let m = tmp.path().join("manifest.toml");
    fs::write(&m, &manifest).unwrap();
    assert_eq!(ccd(&["run", "--config", s(&m), "--out", s(&again)]).status.code(), Some(0));
    assert_eq!(fs::read(out.join("reports.tsv")).unwrap(), fs::read(again.join("reports.tsv")).unwrap());
}

#[test]
fn proxy_weight_violation_is_a_config_error_naming_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &format!("{SMALL}\n[proxy]\nw_sp = 0.9\nw_pp = 0.9\n"));
    let res = ccd(&["run", "--config", s(&cfg), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("proxy.w_sp"));
    assert!(!tmp.path().join("o").exists());
}

#[test]
fn exit_codes_follow_the_contract() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.toml");
    assert_eq!(ccd(&["run", "--config", s(&missing)]).status.code(), Some(1));
    let bad_key = write_config(tmp.path(), "sede = 1\n");
    assert_eq!(ccd(&["run", "--config", s(&bad_key)]).status.code(), Some(1));
    assert_eq!(ccd(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(ccd(&["--help"]).status.code(), Some(0));

    let cfg = write_config(tmp.path(), SMALL);
    let unknown_method = ccd(&["compare", "--config", s(&cfg), "--methods", "ccd,magic"]);
    assert_eq!(unknown_method.status.code(), Some(1));
    let unknown_flag = ccd(&["ablate", "--config", s(&cfg), "--flags", "disable_everything"]);
    assert_eq!(unknown_flag.status.code(), Some(1));

    // a data file that cannot be read is a runtime failure
    let file_cfg = write_config(
        tmp.path(),
        &format!("[data]\nsource = \"file\"\npath = \"{}\"\n", s(&tmp.path().join("absent.tsv"))),
    );
    assert_eq!(ccd(&["run", "--config", s(&file_cfg), "--out", s(&tmp.path().join("f"))]).status.code(), Some(2));
}

#[test]
fn file_source_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let mut lines = String::new();
    for t in 0..600u64 {
        lines.push_str(&format!("u{}\ti{}\t{}\n", t % 30, (t * 7 + t / 30) % 50, t));
    }
    let data = tmp.path().join("data.tsv");
    fs::write(&data, lines).unwrap();
    let text = SMALL.replace("[data]\n", &format!("[data]\nsource = \"file\"\npath = \"{}\"\n", s(&data)));
    let cfg = write_config(tmp.path(), &text);
    let res = ccd(&["run", "--config", s(&cfg), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn compare_emits_a_gain_per_block() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("cmp");
    let res = ccd(&["compare", "--config", s(&cfg), "--methods", "ccd,fine_tune,full_batch", "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let gain = fs::read_to_string(out.join("gain.tsv")).unwrap();
    assert_eq!(gain.lines().count(), 1 + 3);
    let table = fs::read_to_string(out.join("compare.txt")).unwrap();
    assert!(table.contains("fine_tune") && table.contains("full_batch"));
    for m in ["ccd", "fine_tune", "full_batch"] {
        assert!(out.join(m).join("reports.tsv").exists());
    }
}

#[test]
fn compare_with_only_ccd_matches_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let (cmp, run) = (tmp.path().join("cmp"), tmp.path().join("run"));
    assert_eq!(ccd(&["compare", "--config", s(&cfg), "--methods", "ccd", "--out", s(&cmp)]).status.code(), Some(0));
    assert_eq!(ccd(&["run", "--config", s(&cfg), "--out", s(&run)]).status.code(), Some(0));
    assert_eq!(
        fs::read(cmp.join("ccd").join("reports.tsv")).unwrap(),
        fs::read(run.join("reports.tsv")).unwrap()
    );
}

#[test]
fn ablate_runs_baseline_plus_one_per_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("abl");
    let res = ccd(&["ablate", "--config", s(&cfg), "--flags", "disable_replay,disable_s_to_t", "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let table = fs::read_to_string(out.join("ablation.txt")).unwrap();
    assert!(table.contains("w/o proxy learning"));
    assert!(table.contains("w/o student-side knowledge"));
    let runs: Vec<_> = fs::read_dir(&out).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).collect();
    assert_eq!(runs.len(), 1 + 2);

    let empty = tmp.path().join("empty");
    assert_eq!(ccd(&["ablate", "--config", s(&cfg), "--out", s(&empty)]).status.code(), Some(0));
    let runs = fs::read_dir(&empty).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count();
    assert_eq!(runs, 1);
}

#[test]
fn writes_stay_inside_the_output_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("only-here");
    let res = ccd(&["ablate", "--config", s(&cfg), "--flags", "replay", "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(0));
    let outside: Vec<PathBuf> = tree(tmp.path()).into_iter().filter(|p| !p.starts_with("only-here")).collect();
    assert_eq!(outside, vec![PathBuf::from("config.toml")]);
    assert!(!tree(&out).is_empty());
}

#[test]
fn default_config_is_printed_and_valid() {
    let res = ccd(&["default-config"]);
    assert_eq!(res.status.code(), Some(0));
    let text = String::from_utf8(res.stdout).unwrap();
    assert_eq!(RunConfig::from_toml(&text).unwrap(), RunConfig::default());
}
