//! The `tapmim` binary end to end: generated data, config errors, and a
//! pretrain / analyze pipeline that reruns deterministically.

use std::path::Path;
use std::process::{Command, Output};

const CONF: &str = "image_size = 16\npatch_size = 4\nembed_dim = 16\ndepth = 3\nnum_heads = 2\n\
                    synthetic_samples = 40\nval_samples = 8\nbatch_size = 8\nepochs = 2\nwarmup_epochs = 0\n\
                    base_lr = 0.01\nanalysis_samples = 8\n";

fn tapmim(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tapmim"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn write_conf(dir: &Path, text: &str) {
    std::fs::write(dir.join("run.conf"), text).unwrap();
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    write_conf(dir.path(), CONF);
    for out in ["a", "b"] {
        let o = tapmim(dir.path(), &["gen-data", "--config", "run.conf", "--seed", "3", "--out", out]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = files(&dir.path().join("a"));
    assert_eq!(a.len(), 41);
    assert_eq!(a, files(&dir.path().join("b")));
    let o = tapmim(dir.path(), &["gen-data", "--config", "run.conf", "--seed", "4", "--out", "c"]);
    assert!(o.status.success());
    assert_ne!(a, files(&dir.path().join("c")));
}

#[test]
fn errors_are_one_machine_readable_line() {
    let dir = tempfile::tempdir().unwrap();
    write_conf(dir.path(), &format!("{CONF}colour = red\n"));
    let o = tapmim(dir.path(), &["pretrain", "--config", "run.conf"]);
    assert!(!o.status.success());
    let err = String::from_utf8(o.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error kind=config"), "{err}");
    assert!(err.contains("line 13"), "{err}");

    write_conf(dir.path(), CONF);
    let o = tapmim(dir.path(), &["analyze", "--config", "run.conf"]);
    assert!(String::from_utf8(o.stderr).unwrap().starts_with("error kind=config"));
    let o = tapmim(dir.path(), &["pretrain", "--config", "run.conf", "--taps", "7"]);
    assert!(!o.status.success());
}

#[test]
fn baseline_pipeline_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    write_conf(dir.path(), CONF);
    for out in ["r1", "r2"] {
        let o = tapmim(dir.path(), &["pretrain", "--config", "run.conf", "--taps", "none", "--out", out]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let stdout = String::from_utf8(o.stdout).unwrap();
        assert!(stdout.contains("checkpoint.dmim"), "{stdout}");
        let ck = format!("{out}/checkpoint.dmim");
        write_conf(dir.path(), &format!("{CONF}checkpoint = {ck}\n"));
        let o = tapmim(dir.path(), &["analyze", "--config", "run.conf", "--out", out]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        write_conf(dir.path(), CONF);
    }
    let r1 = files(&dir.path().join("r1"));
    let names: Vec<&str> = r1.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["checkpoint.dmim", "cka_profile.csv", "head_sim.csv", "log.csv", "val_loss.csv"]);
    assert_eq!(r1, files(&dir.path().join("r2")));

    let profile = String::from_utf8(r1[1].1.clone()).unwrap();
    assert_eq!(profile.lines().next(), Some("layer,score"));
    assert!(profile.lines().last().unwrap().starts_with("3,1"), "{profile}");
}
