use std::path::Path;
use std::process::{Command, Output};

fn geotab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geotab"))
        .arg("--preset")
        .arg("tiny")
        .arg("--run-dir")
        .arg(dir)
        .args(args)
        .output()
        .expect("spawn geotab")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = geotab(dir, args);
    assert!(
        out.status.success(),
        "geotab {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn checksum(stdout: &str) -> String {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix("checksum "))
        .expect("checksum line")
        .to_string()
}

#[test]
fn generate_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ca = checksum(&ok(a.path(), &["generate", "--seed", "7", "--write-regions"]));
    let cb = checksum(&ok(b.path(), &["generate", "--seed", "7", "--write-regions"]));
    assert_eq!(ca, cb);
    for f in ["world.cfg", "manifest.txt", "tracts.tsv"] {
        let x = std::fs::read(a.path().join("data").join(f)).unwrap();
        let y = std::fs::read(b.path().join("data").join(f)).unwrap();
        assert_eq!(x, y, "{f}");
    }
    assert!(std::fs::read_dir(a.path().join("data/regions")).unwrap().count() > 0);
    let c = tempfile::tempdir().unwrap();
    let cc = checksum(&ok(c.path(), &["generate", "--seed", "8"]));
    assert_ne!(ca, cc);
}

#[test]
fn error_exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let out = geotab(d.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    let out = geotab(d.path(), &["probe", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));

    let out = geotab(d.path(), &["probe"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("generate"));

    ok(d.path(), &["generate"]);
    let out = geotab(d.path(), &["probe"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing checkpoint"));
    let out = geotab(d.path(), &["train"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pretrain.ck"));

    let out = geotab(d.path(), &["--set", "train.no_such_key=1", "generate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
    let out = geotab(d.path(), &["--set", "split.regions=many", "generate"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn tiny_pipeline() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &["generate", "--seed", "3"]);
    ok(p, &["pretrain"]);
    ok(p, &["train"]);
    ok(p, &["train", "--tabular-only"]);
    for f in [
        "pretrain.ck",
        "model.ck",
        "tabular_mae.ck",
        "model_log.tsv",
        "model_epochs.tsv",
    ] {
        assert!(p.join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(p.join("model_log.tsv")).unwrap();
    let steps = log.lines().count() - 1;
    assert!(steps > 0);

    let out = geotab(p, &["train", "--resume", "--set", "train.epochs=3"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config hash"));
    ok(p, &["train", "--resume"]);
    let log = std::fs::read_to_string(p.join("model_log.tsv")).unwrap();
    assert_eq!(log.lines().count() - 1, steps);
    assert_eq!(log.lines().filter(|l| l.starts_with("step")).count(), 1);

    let out = ok(p, &["embed"]);
    assert!(out.contains("rows x"));
    let table = std::fs::read_to_string(p.join("embeddings/model.tsv")).unwrap();
    assert!(table.starts_with("# geotab-embeddings-1"));

    for table in ["model", "tab", "vis_mean", "concat", "late_fusion"] {
        let out = ok(p, &["probe", "--table", table]);
        assert!(out.contains("R2 test"), "{out}");
    }
    ok(p, &["probe", "--split", "region"]);
    assert!(p.join("probes/model_region.txt").exists());

    let out = ok(p, &["pca", "--k", "4"]);
    assert!(out.starts_with("explained variance"));
    let scores = std::fs::read_to_string(p.join("pca/model_scores.tsv")).unwrap();
    assert_eq!(scores.lines().next().unwrap(), "tract\tpc0\tpc1\tpc2\tpc3");

    let tracts = std::fs::read_to_string(p.join("data/tracts.tsv")).unwrap();
    let id = tracts.lines().nth(5).unwrap().split('\t').next().unwrap().to_string();
    ok(p, &["reconstruct", "--tract", &id]);
    let grid = std::fs::read_to_string(p.join(format!("reconstructions/tract_{id}.tsv"))).unwrap();
    assert!(grid.lines().nth(1).unwrap().contains("NaN"));

    let out = ok(p, &["attn-stats", "--regions", "3"]);
    assert!(p.join("attn_stats.txt").exists());
    assert!(!out.is_empty());
}
