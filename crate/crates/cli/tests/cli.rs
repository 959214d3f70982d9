use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"))
}

fn minn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_minn")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn quick() -> String {
    configs().join("quick.toml").display().to_string()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let o = minn(&["train", "--config", &quick(), "--out", path(dir.path()), "--seed", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 5);
    assert!(metrics.lines().all(|l| l.ends_with(",4") || l.starts_with("kind")));
    let manifest = std::fs::read_to_string(dir.path().join("manifest.toml")).unwrap();
    assert!(manifest.contains("seed = 4"));

    let o = minn(&["eval", "--config", &quick(), "--out", path(dir.path()), "--seed", "4", "--snr-db", "-10"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let acc: f64 = text.lines().nth(1).unwrap().split('\t').next().unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn runs_are_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        assert!(minn(&["train", "--config", &quick(), "--out", path(d.path())]).status.success());
    }
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("metrics.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn sweep_uses_the_config_grid() {
    let dir = tempfile::tempdir().unwrap();
    let o = minn(&["sweep", "--config", &quick(), "--out", path(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert!(table.starts_with("run,channel.snr_db,kind,"));
    assert_eq!(table.lines().count(), 1 + 2 * 4);
    assert!(dir.path().join("run_001").join("model.ckpt").exists());
}

#[test]
fn failures_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let o = minn(&["train", "--config", path(&dir.path().join("missing.toml"))]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("stage `config`"), "{}", stderr(&o));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nepoch = 3\n").unwrap();
    let o = minn(&["train", "--config", path(&bad)]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("stage `config`") && stderr(&o).contains("epoch"), "{}", stderr(&o));

    let o = minn(&["eval", "--config", &quick(), "--out", path(dir.path())]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("stage `checkpoint`"), "{}", stderr(&o));

    let o = minn(&["train", "--config", path(&configs().join("elm.toml"))]);
    assert!(!o.status.success());
    assert!(!minn(&["frobnicate"]).status.success());
}

#[test]
fn elm_and_align_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    let data = configs().join("../data");
    std::fs::write(
        &cfg,
        format!(
            "[dataset]\nsource = \"csv\"\npath = {:?}\nlabel_column = \"diagnosis\"\n\
             [elm_benchmark]\nwidths = [16]\ntrials = 2\n",
            data.join("wbcd.csv")
        ),
    )
    .unwrap();
    let o = minn(&["elm", "--config", path(&cfg), "--out", path(&dir.path().join("elm"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8(o.stdout).unwrap().contains("digital_elm"));

    std::fs::write(
        &cfg,
        format!(
            "[dataset]\npath = {:?}\ntrain_samples = 300\ntest_samples = 100\n\
             [sim]\nlayers = 2\nrows = 4\ncols = 4\n\
             [model]\ndecoder_hidden = [16]\n[model.encoder]\nconv_channels = []\nhidden = [16]\n\
             [alignment]\nencoding_dim = 4\npair_epochs = 1\niters = 10\n",
            data.join("mnist5k")
        ),
    )
    .unwrap();
    let o = minn(&["align", "--config", path(&cfg), "--out", path(&dir.path().join("align"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("align").join("align.ckpt").exists());
}
